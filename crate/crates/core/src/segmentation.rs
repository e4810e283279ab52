//! Splitting one long unlabeled trajectory into ordered, time-contiguous
//! pieces: Ward clustering, head/tail chaining from the known initial state,
//! and per-piece observation windows from cluster counts.

use std::path::{Path, PathBuf};

use ndarray::{ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::datagen::{read_dataset, write_dataset, ObservationPiece};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::timedist::TimeDistribution;

/// Above this many points the linkage runs on a uniform subsample.
pub const MAX_LINKAGE_POINTS: usize = 10_000;

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_dist_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Neighbours per point in the connectivity graph that constrains merges.
pub const CONNECTIVITY_NEIGHBOURS: usize = 10;

/// Symmetrised k-nearest-neighbour adjacency lists.
fn knn_graph(points: ArrayView2<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = points.nrows();
    let k = k.min(n.saturating_sub(1));
    let near = par::map_range(n, |i| {
        let x = points.row(i);
        let mut ds: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (sq_dist(x, points.row(j)), j)).collect();
        if k < ds.len() {
            ds.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ds.truncate(k);
        }
        ds.into_iter().map(|(_, j)| j).collect::<Vec<_>>()
    });
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, js) in near.iter().enumerate() {
        for &j in js {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

#[derive(PartialEq)]
struct Candidate {
    cost: f64,
    a: usize,
    b: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // reversed so the std max-heap pops the cheapest merge first
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then(other.a.cmp(&self.a))
            .then(other.b.cmp(&self.b))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy Ward merging restricted to clusters joined by an edge of `adj`,
/// stopped at `n_clusters`. If the graph has more components than that,
/// the remaining clusters are merged without the restriction.
fn ward_connected(points: ArrayView2<f64>, adj: &[Vec<usize>], n_clusters: usize) -> Vec<usize> {
    let (n, d) = points.dim();
    let cap = 2 * n;
    let mut centroid = vec![0.0; cap * d];
    centroid[..n * d].iter_mut().zip(points.iter()).for_each(|(c, p)| *c = *p);
    let mut size = vec![0usize; cap];
    size[..n].iter_mut().for_each(|s| *s = 1);
    let mut alive = vec![false; cap];
    alive[..n].iter_mut().for_each(|a| *a = true);
    let mut parent: Vec<usize> = (0..cap).collect();
    let mut nbrs: Vec<Vec<usize>> = adj.to_vec();
    nbrs.resize(cap, Vec::new());
    let cost = |centroid: &[f64], size: &[usize], a: usize, b: usize| {
        let (na, nb) = (size[a] as f64, size[b] as f64);
        na * nb / (na + nb) * sq_dist_slice(&centroid[a * d..(a + 1) * d], &centroid[b * d..(b + 1) * d])
    };
    let mut heap = std::collections::BinaryHeap::new();
    for a in 0..n {
        for &b in &adj[a] {
            if a < b {
                heap.push(Candidate { cost: cost(&centroid, &size, a, b), a, b });
            }
        }
    }
    let mut clusters = n;
    let mut next_id = n;
    let mut merge = |a: usize, b: usize, centroid: &mut Vec<f64>, size: &mut Vec<usize>, alive: &mut Vec<bool>| {
        let c = next_id;
        next_id += 1;
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in 0..d {
            centroid[c * d + k] = (na * centroid[a * d + k] + nb * centroid[b * d + k]) / (na + nb);
        }
        size[c] = size[a] + size[b];
        alive[a] = false;
        alive[b] = false;
        alive[c] = true;
        parent[a] = c;
        parent[b] = c;
        c
    };
    while clusters > n_clusters {
        let Some(Candidate { a, b, .. }) = heap.pop() else { break };
        if !alive[a] || !alive[b] {
            continue;
        }
        let c = merge(a, b, &mut centroid, &mut size, &mut alive);
        clusters -= 1;
        let mut joined: Vec<usize> = nbrs[a].iter().chain(&nbrs[b]).copied().filter(|&m| alive[m] && m != c).collect();
        joined.sort_unstable();
        joined.dedup();
        for &m in &joined {
            nbrs[m].push(c);
            heap.push(Candidate { cost: cost(&centroid, &size, m, c), a: m, b: c });
        }
        nbrs[c] = joined;
        nbrs[a] = Vec::new();
        nbrs[b] = Vec::new();
    }
    // disconnected leftovers
    while clusters > n_clusters {
        let live: Vec<usize> = (0..cap).filter(|&i| alive[i]).collect();
        let mut best = (f64::INFINITY, 0, 0);
        for (i, &a) in live.iter().enumerate() {
            for &b in &live[i + 1..] {
                let c = cost(&centroid, &size, a, b);
                if c < best.0 {
                    best = (c, a, b);
                }
            }
        }
        merge(best.1, best.2, &mut centroid, &mut size, &mut alive);
        clusters -= 1;
    }
    let roots: Vec<usize> = (0..n)
        .map(|mut i| {
            while parent[i] != i {
                i = parent[i];
            }
            i
        })
        .collect();
    canonical_labels(&roots)
}

/// Renumbers arbitrary cluster ids by first appearance.
fn canonical_labels(raw: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    raw.iter()
        .map(|r| {
            let next = map.len();
            *map.entry(*r).or_insert(next)
        })
        .collect()
}

/// Ward-linkage agglomerative clustering into exactly `n_clusters` groups,
/// merging only clusters adjacent in the k-nearest-neighbour graph so that
/// clusters follow the curve instead of cutting across nearby loops.
/// Labels are numbered by the first row in which each cluster appears.
pub fn agglomerative_cluster(points: ArrayView2<f64>, n_clusters: usize, seed: u64) -> Result<Vec<usize>> {
    cluster_with_neighbours(points, n_clusters, CONNECTIVITY_NEIGHBOURS, seed)
}

/// As [`agglomerative_cluster`] with an explicit graph degree; `k >= n - 1`
/// gives plain Ward.
pub fn cluster_with_neighbours(points: ArrayView2<f64>, n_clusters: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.nrows();
    if n_clusters == 0 {
        return Err(Error::Domain("need at least one cluster".into()));
    }
    if n_clusters > n {
        return Err(Error::Domain(format!("{n_clusters} clusters requested for {n} points")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("points must be finite".into()));
    }
    if n <= MAX_LINKAGE_POINTS {
        return Ok(ward_connected(points, &knn_graph(points, k), n_clusters));
    }
    let sub = linkage_subsample(n, seed);
    let sub_points = points.select(Axis(0), &sub);
    let sub_labels = ward_connected(sub_points.view(), &knn_graph(sub_points.view(), k), n_clusters);
    let raw = par::map_range(n, |i| {
        let x = points.row(i);
        let mut best = (f64::INFINITY, 0);
        for (j, row) in sub_points.rows().into_iter().enumerate() {
            let dj = sq_dist(x, row);
            if dj < best.0 {
                best = (dj, j);
            }
        }
        sub_labels[best.1]
    });
    Ok(canonical_labels(&raw))
}

/// Multiple of the longest minimum-spanning-tree edge used as the default
/// radius.
pub const RADIUS_FACTOR: f64 = 1.5;

/// Longest edge of the Euclidean minimum spanning tree (Prim, O(n^2)).
pub fn longest_mst_edge(points: ArrayView2<f64>) -> f64 {
    let n = points.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut best = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut cur = 0;
    let mut longest: f64 = 0.0;
    for _ in 1..n {
        done[cur] = true;
        let x = points.row(cur);
        let mut next = usize::MAX;
        let mut next_d = f64::INFINITY;
        for j in 0..n {
            if done[j] {
                continue;
            }
            let dj = sq_dist(x, points.row(j));
            if dj < best[j] {
                best[j] = dj;
            }
            if best[j] < next_d {
                next_d = best[j];
                next = j;
            }
        }
        longest = longest.max(next_d);
        cur = next;
    }
    longest.sqrt()
}

/// `RADIUS_FACTOR` times the longest minimum-spanning-tree edge, i.e. a
/// little more than the largest gap along the sampled curve. Large inputs
/// use the same deterministic subsample as the linkage.
pub fn default_radius(points: ArrayView2<f64>, seed: u64) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::Domain("need at least two points to pick a radius".into()));
    }
    let r = if n <= MAX_LINKAGE_POINTS {
        longest_mst_edge(points)
    } else {
        let sub = linkage_subsample(n, seed);
        longest_mst_edge(points.select(Axis(0), &sub).view())
    };
    if r > 0.0 {
        Ok(RADIUS_FACTOR * r)
    } else {
        Err(Error::Domain("degenerate point cloud: all points coincide".into()))
    }
}

fn linkage_subsample(n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::rng_for(seed, &[rng::stream::SUBSAMPLE]);
    let mut sub = index::sample(&mut r, n, MAX_LINKAGE_POINTS).into_vec();
    sub.sort_unstable();
    sub
}

/// One cluster in trajectory order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderedCluster {
    pub cluster: usize,
    /// Row indices (into the full point set) of the members.
    pub members: Vec<usize>,
    pub head: usize,
    /// Absent for the final piece.
    pub tail: Option<usize>,
}

fn count_within(points: ArrayView2<f64>, members: &[usize], x: ArrayView1<f64>, r2: f64) -> usize {
    members.iter().filter(|&&j| sq_dist(points.row(j), x) <= r2).count()
}

/// First index attaining the extreme value.
fn arg_best<F: Fn(usize, usize) -> bool>(values: &[usize], better: F) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if better(values[i], values[best]) {
            best = i;
        }
    }
    best
}

/// Fraction of a cluster's reach (largest distance from its head) used as the
/// tail-search radius.
pub const TAIL_BALL_FRACTION: f64 = 0.5;

/// Chains clusters into trajectory order starting from the cluster that
/// best covers `x0`. Each tail is the member (away from the head) with the
/// fewest same-cluster neighbours; the next cluster is the one holding the
/// unused point nearest the tail, which must lie within `r`, and its head is
/// that point.
pub fn order_and_anchor(
    points: ArrayView2<f64>,
    labels: &[usize],
    x0: &[f64],
    radius: f64,
) -> Result<Vec<OrderedCluster>> {
    if !(radius > 0.0) {
        return Err(Error::Domain("radius must be positive".into()));
    }
    if labels.len() != points.nrows() || x0.len() != points.ncols() {
        return Err(Error::Shape("labels, points and x0 disagree in size".into()));
    }
    let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::Domain("cluster labels must be contiguous from 0".into()));
    }
    let r2 = radius * radius;
    let x0v = ArrayView1::from(x0);
    let cover: Vec<usize> = groups.iter().map(|g| count_within(points, g, x0v, r2)).collect();
    let first = arg_best(&cover, |a, b| a > b);
    if cover[first] == 0 {
        return Err(Error::Anchoring { radius });
    }
    let nearest = |g: &[usize], x: ArrayView1<f64>| {
        let ds: Vec<f64> = g.iter().map(|&j| sq_dist(points.row(j), x)).collect();
        let mut best = 0;
        for i in 1..ds.len() {
            if ds[i] < ds[best] {
                best = i;
            }
        }
        g[best]
    };
    let mut used = vec![false; n_clusters];
    used[first] = true;
    let mut out = vec![OrderedCluster {
        cluster: first,
        members: groups[first].clone(),
        head: nearest(&groups[first], x0v),
        tail: None,
    }];
    while out.len() < n_clusters {
        let cur = out.last().unwrap();
        let g = &groups[cur.cluster];
        let head = points.row(cur.head);
        // The tail search uses a ball scaled to the cluster so the count
        // minimum sits at the far end even when density varies along it.
        let reach = g.iter().map(|&j| sq_dist(points.row(j), head)).fold(0.0, f64::max).sqrt();
        let rl = radius.max(TAIL_BALL_FRACTION * reach);
        let rl2 = rl * rl;
        let candidates: Vec<usize> = g.iter().copied().filter(|&j| sq_dist(points.row(j), head) > rl2).collect();
        let orphaned = || (0..n_clusters).filter(|&c| !used[c]).collect::<Vec<_>>();
        if candidates.is_empty() {
            return Err(Error::Ordering {
                after: out.len() - 1,
                orphaned: orphaned(),
            });
        }
        let counts = par::map_range(candidates.len(), |i| count_within(points, g, points.row(candidates[i]), rl2));
        let tail = candidates[arg_best(&counts, |a, b| a < b)];
        let tail_x = points.row(tail);
        let mut next = usize::MAX;
        let mut next_d = f64::INFINITY;
        for (c, members) in groups.iter().enumerate() {
            if used[c] {
                continue;
            }
            for &j in members {
                let dj = sq_dist(points.row(j), tail_x);
                if dj < next_d {
                    next_d = dj;
                    next = c;
                }
            }
        }
        if next_d > r2 {
            return Err(Error::Ordering {
                after: out.len() - 1,
                orphaned: orphaned(),
            });
        }
        let ng = &groups[next];
        let head = nearest(ng, tail_x);
        out.last_mut().unwrap().tail = Some(tail);
        used[next] = true;
        out.push(OrderedCluster {
            cluster: next,
            members: ng.clone(),
            head,
            tail: None,
        });
    }
    Ok(out)
}

/// Observation window of one piece.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PieceWindow {
    pub t0: f64,
    #[serde(rename = "T")]
    pub span: f64,
    pub dist: TimeDistribution,
}

/// Boundaries at the inverse CDF of cumulative count fractions; each piece
/// gets the global distribution truncated to its window.
pub fn split_distribution(dist: &TimeDistribution, counts: &[usize]) -> Result<Vec<PieceWindow>> {
    if counts.is_empty() {
        return Err(Error::Domain("no pieces to split into".into()));
    }
    if let Some(piece) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegeneratePiece {
            piece,
            reason: "cluster has no points".into(),
        });
    }
    let n: usize = counts.iter().sum();
    let (lo, hi) = dist.support();
    let mut bounds = Vec::with_capacity(counts.len() + 1);
    bounds.push(lo);
    let mut cum = 0usize;
    for &c in &counts[..counts.len() - 1] {
        cum += c;
        bounds.push(dist.inv_cdf(cum as f64 / n as f64)?);
    }
    bounds.push(hi);
    bounds
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            if !(w[1] > w[0]) {
                return Err(Error::DegeneratePiece {
                    piece: l,
                    reason: format!("empty time window [{}, {}]", w[0], w[1]),
                });
            }
            Ok(PieceWindow {
                t0: w[0],
                span: w[1] - w[0],
                dist: dist.truncate(w[0], w[1])?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SegmentationResult {
    pub pieces: Vec<ObservationPiece>,
    pub order: Vec<OrderedCluster>,
    pub radius: f64,
    /// Cluster label of every input point.
    pub labels: Vec<usize>,
}

/// Full segmentation of one observation set into `n_clusters` pieces.
/// Hidden labels, when present, are carried into the pieces.
pub fn segment(
    data: &ObservationPiece,
    n_clusters: usize,
    radius: Option<f64>,
    seed: u64,
) -> Result<SegmentationResult> {
    let points = data.points.view();
    let labels = agglomerative_cluster(points, n_clusters, seed)?;
    let radius = match radius {
        Some(r) => r,
        None => default_radius(points, seed)?,
    };
    let order = order_and_anchor(points, &labels, &data.x_init, radius)?;
    let counts: Vec<usize> = order.iter().map(|o| o.members.len()).collect();
    let windows = split_distribution(&data.dist, &counts)?;
    let mut pieces = Vec::with_capacity(order.len());
    for (l, (oc, w)) in order.iter().zip(windows).enumerate() {
        if oc.members.len() < 2 {
            return Err(Error::DegeneratePiece {
                piece: l,
                reason: "fewer than two points".into(),
            });
        }
        let x_init = if l == 0 {
            data.x_init.clone()
        } else {
            points.row(oc.head).to_vec()
        };
        let mut piece = ObservationPiece::new(points.select(Axis(0), &oc.members), x_init, w.t0, w.span, w.dist)?;
        piece.true_times = data
            .true_times
            .as_ref()
            .map(|tt| oc.members.iter().map(|&i| tt[i]).collect());
        pieces.push(piece);
    }
    Ok(SegmentationResult {
        pieces,
        order,
        radius,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub cluster: usize,
    pub n: usize,
    pub t0: f64,
    #[serde(rename = "T")]
    pub span: f64,
    pub dist: TimeDistribution,
    pub x_init: Vec<f64>,
    /// Rows of the segmented dataset that make up the piece, in file order.
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub radius: f64,
    pub pieces: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `piece_XX.csv` per piece plus `manifest.json` into `dir`.
pub fn write_pieces(result: &SegmentationResult, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (l, (piece, oc)) in result.pieces.iter().zip(&result.order).enumerate() {
        let file = format!("piece_{l:02}.csv");
        write_dataset(piece, &dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            cluster: oc.cluster,
            n: piece.len(),
            t0: piece.t0,
            span: piece.span,
            dist: piece.dist.clone(),
            x_init: piece.x_init.clone(),
            rows: oc.members.clone(),
        });
    }
    let manifest = Manifest {
        radius: result.radius,
        pieces: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads the pieces listed in a manifest, in order.
pub fn read_pieces(manifest_path: &Path) -> Result<(Manifest, Vec<ObservationPiece>)> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(manifest_path, e.line(), e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let pieces = manifest
        .pieces
        .iter()
        .map(|e| read_dataset(&dir.join(&e.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pieces))
}

/// Time range `[min, max]` of hidden labels per piece.
pub fn true_time_ranges(pieces: &[ObservationPiece]) -> Option<Vec<(f64, f64)>> {
    pieces
        .iter()
        .map(|p| {
            p.true_times.as_ref().map(|tt| {
                tt.iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| (lo.min(t), hi.max(t)))
            })
        })
        .collect()
}

/// Largest pairwise overlap between piece time ranges.
pub fn max_pairwise_overlap(ranges: &[(f64, f64)]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..ranges.len() {
        for j in i + 1..ranges.len() {
            let ov = ranges[i].1.min(ranges[j].1) - ranges[i].0.max(ranges[j].0);
            worst = worst.max(ov);
        }
    }
    worst
}

/// Mean hidden time per piece.
pub fn mean_times(pieces: &[ObservationPiece]) -> Option<Vec<f64>> {
    pieces
        .iter()
        .map(|p| p.true_times.as_ref().map(|tt| tt.iter().sum::<f64>() / tt.len() as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::datagen::{make_benchmark, synthesize, Benchmark};

    /// Ward cost of merging, recomputed from scratch for a brute-force oracle.
    fn sse(points: ArrayView2<f64>, members: &[usize]) -> f64 {
        let d = points.ncols();
        let mut c = vec![0.0; d];
        for &i in members {
            for k in 0..d {
                c[k] += points[[i, k]] / members.len() as f64;
            }
        }
        members.iter().map(|&i| sq_dist_slice(points.row(i).as_slice().unwrap(), &c)).sum()
    }

    /// Brute-force k-nearest-neighbour relation, symmetrised.
    fn adjacency(points: ArrayView2<f64>, k: usize) -> Vec<Vec<bool>> {
        let n = points.nrows();
        let mut adj = vec![vec![false; n]; n];
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| {
                sq_dist(points.row(i), points.row(a)).total_cmp(&sq_dist(points.row(i), points.row(b)))
            });
            for &j in order.iter().take(k) {
                adj[i][j] = true;
                adj[j][i] = true;
            }
        }
        adj
    }

    /// Greedy Ward: repeatedly merge the linked pair with the smallest SSE
    /// increase, recomputing every cost from scratch.
    fn greedy_ward(points: ArrayView2<f64>, n_clusters: usize, k: usize) -> Vec<usize> {
        let n = points.nrows();
        let adj = adjacency(points, k);
        let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        while clusters.len() > n_clusters {
            let mut best = (f64::INFINITY, 0, 0);
            for a in 0..clusters.len() {
                for b in a + 1..clusters.len() {
                    let linked = clusters[a].iter().any(|&i| clusters[b].iter().any(|&j| adj[i][j]));
                    if !linked {
                        continue;
                    }
                    let mut m = clusters[a].clone();
                    m.extend(&clusters[b]);
                    let inc = sse(points, &m) - sse(points, &clusters[a]) - sse(points, &clusters[b]);
                    if inc < best.0 - 1e-12 {
                        best = (inc, a, b);
                    }
                }
            }
            let b = clusters.remove(best.2);
            clusters[best.1].extend(b);
        }
        let mut raw = vec![0; n];
        for (c, m) in clusters.iter().enumerate() {
            for &i in m {
                raw[i] = c;
            }
        }
        canonical_labels(&raw)
    }

    #[test]
    fn matches_greedy_ward_oracle() {
        for seed in 0..15 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let pts = Array2::from_shape_fn((25, 2), |_| r.random_range(-1.0f64..1.0));
            for (l, k) in [(1, 24), (3, 24), (6, 24), (3, 4), (6, 5)] {
                assert_eq!(
                    cluster_with_neighbours(pts.view(), l, k, 0).unwrap(),
                    greedy_ward(pts.view(), l, k),
                    "seed {seed} L {l} k {k}"
                );
            }
        }
    }

    #[test]
    fn separate_spiral_arms_stay_apart() {
        // two concentric circles; each cluster must stay on one circle
        let n = 400;
        let pts = Array2::from_shape_fn((n, 2), |(i, k)| {
            let radius = if i < n / 2 { 1.0 } else { 1.3 };
            let a = (i % (n / 2)) as f64 / (n / 2) as f64 * std::f64::consts::TAU;
            radius * if k == 0 { a.cos() } else { a.sin() }
        });
        let labels = agglomerative_cluster(pts.view(), 8, 0).unwrap();
        for i in 0..n / 2 {
            for j in n / 2..n {
                assert_ne!(labels[i], labels[j]);
            }
        }
    }

    #[test]
    fn mst_edge() {
        let pts = array![[0.0], [1.0], [1.5], [4.0]];
        assert_eq!(longest_mst_edge(pts.view()), 2.5);
        assert_eq!(default_radius(pts.view(), 0).unwrap(), RADIUS_FACTOR * 2.5);
    }

    #[test]
    fn two_blobs_and_singletons() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let pts = Array2::from_shape_fn((60, 2), |(i, _)| {
            let z: f64 = r.sample(StandardNormal);
            z + if i % 2 == 0 { 0.0 } else { 10.0 }
        });
        let labels = agglomerative_cluster(pts.view(), 2, 0).unwrap();
        for i in 0..60 {
            assert_eq!(labels[i], i % 2);
        }
        let labels = agglomerative_cluster(pts.view(), 60, 0).unwrap();
        assert_eq!(labels, (0..60).collect::<Vec<_>>());
        assert!(agglomerative_cluster(pts.view(), 61, 0).is_err());
    }

    #[test]
    fn subsampled_linkage_assigns_every_point() {
        let n = MAX_LINKAGE_POINTS + 500;
        let pts = Array2::from_shape_fn((n, 1), |(i, _)| if i % 2 == 0 { i as f64 * 1e-4 } else { 100.0 + i as f64 * 1e-4 });
        let labels = agglomerative_cluster(pts.view(), 2, 3).unwrap();
        for i in 0..n {
            assert_eq!(labels[i], i % 2);
        }
    }

    #[test]
    fn collinear_segments_in_order() {
        // three segments on a line, listed out of order
        let mut rows = Vec::new();
        for &start in &[20.0, 0.0, 10.0] {
            for i in 0..50 {
                rows.push(start + i as f64 * 0.2);
            }
        }
        let pts = Array2::from_shape_vec((150, 1), rows).unwrap();
        let labels: Vec<usize> = (0..150).map(|i| i / 50).collect();
        let order = order_and_anchor(pts.view(), &labels, &[0.0], 1.0).unwrap();
        assert_eq!(order.iter().map(|o| o.cluster).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert_eq!(order[0].head, 50);
        assert_eq!(order[0].tail, Some(99));
        assert_eq!(order[1].head, 100);
        assert!(order[2].tail.is_none());
    }

    #[test]
    fn single_cluster_head_is_nearest() {
        let pts = array![[3.0, 0.0], [1.0, 0.0], [0.2, 0.1], [2.0, 0.0]];
        let order = order_and_anchor(pts.view(), &[0, 0, 0, 0], &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(order.len(), 1);
        assert_eq!(order[0].head, 2);
    }

    #[test]
    fn anchoring_and_ordering_errors() {
        let pts = array![[0.0], [0.1], [5.0], [5.1]];
        assert!(matches!(
            order_and_anchor(pts.view(), &[0, 0, 1, 1], &[100.0], 0.5),
            Err(Error::Anchoring { .. })
        ));
        assert!(matches!(
            order_and_anchor(pts.view(), &[0, 0, 1, 1], &[0.0], 0.05),
            Err(Error::Ordering { after: 0, ref orphaned }) if orphaned == &vec![1]
        ));
    }

    #[test]
    fn split_examples() {
        let u = TimeDistribution::uniform(0.0, 10.0).unwrap();
        let w = split_distribution(&u, &[10, 90]).unwrap();
        assert!((w[0].t0 - 0.0).abs() < 1e-12 && (w[1].t0 - 1.0).abs() < 1e-12);
        assert_eq!(w[1].t0 + w[1].span, 10.0);
        let w = split_distribution(&u, &[7; 5]).unwrap();
        for p in &w {
            assert!((p.span - 2.0).abs() < 1e-12);
        }
        let tn = TimeDistribution::truncated_normal(5.0, 10.0 / 3.0, 0.0, 10.0).unwrap();
        let w = split_distribution(&tn, &[50, 50]).unwrap();
        assert!((w[1].t0 - 5.0).abs() < 1e-9);
        assert!(matches!(split_distribution(&u, &[3, 0, 2]), Err(Error::DegeneratePiece { piece: 1, .. })));
    }

    #[test]
    fn split_spans_sum_exactly() {
        let tn = TimeDistribution::truncated_normal(5.0, 10.0 / 3.0, 0.0, 10.0).unwrap();
        let w = split_distribution(&tn, &[13, 400, 7, 99, 1]).unwrap();
        assert!(w.windows(2).all(|p| p[1].t0 > p[0].t0));
        for p in w.windows(2) {
            assert_eq!(p[0].t0 + p[0].span, p[1].t0);
        }
        assert_eq!(w.last().map(|p| p.t0 + p.span), Some(10.0));
        // count rule: cdf(t0_{l+1}) = cdf(t0_l) + n_l/n
        assert!((tn.cdf(w[2].t0) - tn.cdf(w[1].t0) - 400.0 / 520.0).abs() < 1e-10);
    }

    #[test]
    fn cubic_pieces_are_contiguous() {
        let spec = make_benchmark(Benchmark::Cubic2D);
        let data = synthesize(&spec, 2000, &spec.dist, 0.0, 4).unwrap();
        let seg = segment(&data, 8, None, 0).unwrap();
        let total: usize = seg.pieces.iter().map(|p| p.len()).sum();
        assert_eq!(total, 2000);
        let ranges = true_time_ranges(&seg.pieces).unwrap();
        assert!(max_pairwise_overlap(&ranges) < 0.02 * spec.span, "{ranges:?}");
        let means = mean_times(&seg.pieces).unwrap();
        assert!(means.windows(2).all(|m| m[1] > m[0]), "{means:?}");
        let again = segment(&data, 8, None, 0).unwrap();
        assert_eq!(again.labels, seg.labels);
    }

    #[test]
    fn manifest_round_trip() {
        let spec = make_benchmark(Benchmark::Linear2D);
        let data = synthesize(&spec, 300, &spec.dist, 0.0, 2).unwrap();
        let seg = segment(&data, 3, None, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_pieces(&seg, dir.path()).unwrap();
        let (manifest, pieces) = read_pieces(&path).unwrap();
        assert_eq!(manifest.pieces.len(), 3);
        assert_eq!(pieces, seg.pieces);
        for (e, p) in manifest.pieces.iter().zip(&pieces) {
            assert_eq!(data.points.select(Axis(0), &e.rows), p.points);
        }
    }
}
