//! Parameter-identification phase: gradient descent on the coefficients
//! through taped RK4 solves, with hard thresholding after a warm start, plus
//! a two-coefficient loss landscape scanner.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::datagen::ObservationPiece;
use crate::dictionary::{CandidateLibrary, CoefficientMatrix};
use crate::error::{Error, Result};
use crate::odesolve::{rk4_solve, rk4_solve_taped, backprop_tape, SolveGrid, SolveOptions, DEFAULT_BLOWUP_BOUND};
use crate::par;
use crate::rng::{self, stream};
use crate::surrogate::AdamW;
use crate::swd::{sliced_discrepancy_grad, ProjectionSet, SliceAggregation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiConfig {
    pub iters: usize,
    /// Thresholding starts after this many steps.
    pub iters_1: usize,
    pub batch: usize,
    pub slices: usize,
    pub threshold: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// RK4 steps are at most `piece span / steps_per_span` long.
    pub steps_per_span: usize,
    pub blowup_bound: f64,
    /// Coefficients that are exactly zero in the starting point stay zero.
    pub keep_zeros: bool,
    pub aggregation: SliceAggregation,
    pub seed: u64,
}

impl Default for PiConfig {
    fn default() -> Self {
        PiConfig {
            iters: 2000,
            iters_1: 1000,
            batch: 256,
            slices: 20,
            threshold: 0.04,
            lr: 3e-4,
            weight_decay: 0.0,
            steps_per_span: 200,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
            keep_zeros: true,
            aggregation: SliceAggregation::Squared,
            seed: 0,
        }
    }
}

impl PiConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pi: {m}")));
        if self.iters > 0 && !(self.iters_1 > 0 && self.iters_1 <= self.iters) {
            return bad("need 0 < iters_1 <= iters");
        }
        if self.batch < 2 || self.slices == 0 || self.steps_per_span == 0 {
            return bad("need batch >= 2, slices >= 1, steps_per_span >= 1");
        }
        if !(self.threshold >= 0.0) || !(self.weight_decay >= 0.0) || !(self.lr > 0.0) || !(self.blowup_bound > 0.0) {
            return bad("threshold and weight decay must be >= 0, lr and blowup_bound > 0");
        }
        Ok(())
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            blowup_bound: self.blowup_bound,
        }
    }
}

/// Loss and coefficient gradient summed over pieces.
#[derive(Clone, Debug)]
pub struct PiEval {
    /// Sum of the transport losses of the pieces that did not blow up.
    pub loss: f64,
    pub grad: CoefficientMatrix,
    pub piece_losses: Vec<Option<f64>>,
    pub blowups: usize,
}

struct PieceEval {
    loss: f64,
    grad: Array2<f64>,
}

/// Sorted distinct solve instants with `t0` first, and for every sample the
/// grid slot holding its state.
fn solve_slots(t0: f64, times: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut grid = vec![t0];
    let mut slot = vec![0; times.len()];
    for &i in &order {
        let t = times[i].max(t0);
        if t > *grid.last().unwrap() {
            grid.push(t);
        }
        slot[i] = grid.len() - 1;
    }
    (grid, slot)
}

fn piece_loss(
    piece: &ObservationPiece,
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    cfg: &PiConfig,
    seed: u64,
) -> Result<PieceEval> {
    let mut r = rng::Rng::seed_from_u64(seed);
    let times = piece.dist.sample_with(&mut r, cfg.batch);
    let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..piece.len())).collect();
    let obs = piece.points.select(Axis(0), &idx);
    let proj = ProjectionSet::random_with(&mut r, piece.dim(), cfg.slices);
    batch_loss(piece, lib, theta, cfg, &times, obs.view(), &proj)
}

/// Loss and gradient for fixed instants, observations and directions.
fn batch_loss(
    piece: &ObservationPiece,
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    cfg: &PiConfig,
    times: &[f64],
    obs: ArrayView2<f64>,
    proj: &ProjectionSet,
) -> Result<PieceEval> {
    let (grid, slot) = solve_slots(piece.t0, times);
    let d = lib.dim();
    let mut xs = Array2::zeros((times.len(), d));
    if grid.len() == 1 {
        xs.rows_mut().into_iter().for_each(|mut row| row.iter_mut().zip(&piece.x_init).for_each(|(o, v)| *o = *v));
        let (loss, _) = sliced_discrepancy_grad(xs.view(), obs, proj, cfg.aggregation)?;
        return Ok(PieceEval {
            loss,
            grad: Array2::zeros((lib.len(), d)),
        });
    }
    let sg = SolveGrid::with_max_step(grid, 1, piece.span / cfg.steps_per_span as f64)?;
    let (traj, tape) = rk4_solve_taped(lib, theta, &piece.x_init, &sg, cfg.solve_options())?;
    for (i, &s) in slot.iter().enumerate() {
        xs.row_mut(i).assign(&traj.states.row(s));
    }
    let (loss, gx) = sliced_discrepancy_grad(xs.view(), obs, proj, cfg.aggregation)?;
    let mut out_grads = Array2::zeros((traj.len(), d));
    for (i, &s) in slot.iter().enumerate() {
        let mut row = out_grads.row_mut(s);
        row += &gx.row(i);
    }
    let g = backprop_tape(&tape, lib, theta, out_grads.view())?;
    Ok(PieceEval {
        loss,
        grad: g.theta.into_inner(),
    })
}

/// Sum over pieces of the sliced loss between solved states at sampled
/// instants and sampled observations, with its gradient. A piece whose solve
/// blows up contributes no loss and no gradient and is counted.
pub fn pi_loss_and_grad(
    pieces: &[ObservationPiece],
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    cfg: &PiConfig,
    step_seed: u64,
) -> Result<PiEval> {
    lib.check_theta(theta)?;
    for p in pieces {
        if p.dim() != lib.dim() {
            return Err(Error::Shape(format!("piece dimension {} vs library {}", p.dim(), lib.dim())));
        }
    }
    let evals = par::map_range(pieces.len(), |l| {
        piece_loss(&pieces[l], lib, theta, cfg, rng::derive_seed(step_seed, &[l as u64]))
    });
    let mut grad = Array2::zeros((lib.len(), lib.dim()));
    let mut loss = 0.0;
    let mut blowups = 0;
    let mut piece_losses = Vec::with_capacity(pieces.len());
    for e in evals {
        match e {
            Ok(e) => {
                loss += e.loss;
                grad += &e.grad;
                piece_losses.push(Some(e.loss));
            }
            Err(Error::BlowUp { .. }) => {
                blowups += 1;
                piece_losses.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PiEval {
        loss,
        grad: CoefficientMatrix::from_array(grad),
        piece_losses,
        blowups,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiRecord {
    pub iter: usize,
    pub loss: f64,
    pub blowups: usize,
    pub active: usize,
}

#[derive(Clone, Debug)]
pub struct PiResult {
    pub theta: CoefficientMatrix,
    pub history: Vec<PiRecord>,
    pub blowup_steps: usize,
}

/// AdamW descent on the coefficients. After `iters_1` steps every entry with
/// magnitude below the threshold is set to zero and frozen.
pub fn run_pi(
    pieces: &[ObservationPiece],
    lib: &CandidateLibrary,
    theta0: &CoefficientMatrix,
    cfg: &PiConfig,
) -> Result<PiResult> {
    cfg.validate()?;
    lib.check_theta(theta0)?;
    if pieces.is_empty() {
        return Err(Error::Domain("no pieces to fit".into()));
    }
    let mut theta = theta0.clone();
    let n = theta.rows() * theta.cols();
    let mut frozen: Vec<bool> = if cfg.keep_zeros {
        theta.values().iter().map(|v| *v == 0.0).collect()
    } else {
        vec![false; n]
    };
    let mut opt = AdamW::new(n, cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.iters);
    let mut blowup_steps = 0;
    for it in 1..=cfg.iters {
        let seed = rng::derive_seed(cfg.seed, &[stream::PI_STEP, it as u64]);
        let ev = pi_loss_and_grad(pieces, lib, &theta, cfg, seed)?;
        if ev.blowups > 0 {
            blowup_steps += 1;
        }
        if !ev.loss.is_finite() || ev.grad.values().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step: it, piece: 0 });
        }
        let grads: Vec<f64> = ev.grad.values().iter().copied().collect();
        let vals = theta.values_mut().as_slice_mut().expect("standard layout");
        opt.step_masked(vals, &grads, Some(&frozen));
        if it > cfg.iters_1 {
            for (v, f) in vals.iter_mut().zip(frozen.iter_mut()) {
                if v.abs() < cfg.threshold {
                    *v = 0.0;
                    *f = true;
                }
            }
            if frozen.iter().all(|f| *f) {
                return Err(Error::DegenerateModel);
            }
        }
        history.push(PiRecord {
            iter: it,
            loss: ev.loss,
            blowups: ev.blowups,
            active: frozen.iter().filter(|f| !**f).count(),
        });
    }
    Ok(PiResult {
        theta,
        history,
        blowup_steps,
    })
}

pub fn write_history_csv(history: &[PiRecord], path: &Path) -> Result<()> {
    let mut out = String::from("iter,loss,blowups,active\n");
    for r in history {
        out.push_str(&format!("{},{:e},{},{}\n", r.iter, r.loss, r.blowups, r.active));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Scan axes: coefficient `(feature, dimension)` and its value range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanAxis {
    pub entry: (usize, usize),
    pub range: (f64, f64),
}

impl ScanAxis {
    pub fn value(&self, i: usize, res: usize) -> f64 {
        self.range.0 + (self.range.1 - self.range.0) * i as f64 / (res - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landscape {
    pub axes: [ScanAxis; 2],
    pub resolution: usize,
    /// `loss[[i, j]]` at axis-0 value `i`, axis-1 value `j`; NaN where the
    /// solve blew up.
    pub loss: Array2<f64>,
    pub blowup: Array2<bool>,
    pub sup_norm: Array2<f64>,
}

/// Evaluates the transport loss on a `res x res` grid of values for two
/// coefficients, all others fixed at `theta_base`. Each cell also records
/// the sup-norm of a fine solve over every piece window (steps of at most
/// span/1000); a cell is flagged when that solve or the loss solve blows up.
pub fn loss_landscape(
    pieces: &[ObservationPiece],
    lib: &CandidateLibrary,
    theta_base: &CoefficientMatrix,
    axes: [ScanAxis; 2],
    res: usize,
    cfg: &PiConfig,
) -> Result<Landscape> {
    if res < 2 {
        return Err(Error::Domain("landscape resolution must be >= 2".into()));
    }
    lib.check_theta(theta_base)?;
    for a in &axes {
        if a.entry.0 >= theta_base.rows() || a.entry.1 >= theta_base.cols() {
            return Err(Error::Shape(format!("scan entry {:?} outside the coefficient matrix", a.entry)));
        }
    }
    let seed = rng::derive_seed(cfg.seed, &[stream::LANDSCAPE]);
    let cells = par::map_range(res * res, |c| -> Result<(f64, bool, f64)> {
        let (i, j) = (c / res, c % res);
        let mut theta = theta_base.clone();
        theta.values_mut()[axes[0].entry] = axes[0].value(i, res);
        theta.values_mut()[axes[1].entry] = axes[1].value(j, res);
        let mut sup: f64 = 0.0;
        let mut blew = false;
        for p in pieces {
            let grid = SolveGrid::with_max_step(vec![p.t0, p.t0 + p.span], 1, p.span / 1000.0)?;
            match rk4_solve(lib, &theta, &p.x_init, &grid, cfg.solve_options()) {
                Ok(t) => sup = sup.max(t.sup_norm()),
                Err(Error::BlowUp { norm, .. }) => {
                    blew = true;
                    sup = f64::INFINITY.min(norm.max(sup));
                }
                Err(e) => return Err(e),
            }
        }
        let ev = pi_loss_and_grad(pieces, lib, &theta, cfg, seed)?;
        blew |= ev.blowups > 0;
        let loss = if blew { f64::NAN } else { ev.loss };
        Ok((loss, blew, sup))
    });
    let mut loss = Array2::zeros((res, res));
    let mut blowup = Array2::from_elem((res, res), false);
    let mut sup_norm = Array2::zeros((res, res));
    for (c, cell) in cells.into_iter().enumerate() {
        let (l, b, s) = cell?;
        let ix = (c / res, c % res);
        loss[ix] = l;
        blowup[ix] = b;
        sup_norm[ix] = s;
    }
    Ok(Landscape {
        axes,
        resolution: res,
        loss,
        blowup,
        sup_norm,
    })
}

impl Landscape {
    /// Grid cell with the smallest finite loss.
    pub fn argmin(&self) -> Option<(usize, usize)> {
        self.loss
            .indexed_iter()
            .filter(|(_, v)| v.is_finite())
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(ix, _)| ix)
    }

    /// Rows `i,j,a,b,loss,blowup,sup_norm`, one per cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("i,j,a,b,loss,blowup,sup_norm\n");
        for ((i, j), l) in self.loss.indexed_iter() {
            out.push_str(&format!(
                "{i},{j},{},{},{:e},{},{:e}\n",
                self.axes[0].value(i, self.resolution),
                self.axes[1].value(j, self.resolution),
                l,
                self.blowup[[i, j]] as u8,
                self.sup_norm[[i, j]]
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array1;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::datagen::{make_benchmark, synthesize, Benchmark};
    use crate::swd::sliced_w2sq;
    use crate::timedist::TimeDistribution;

    fn linear_pieces(n: usize, seed: u64) -> (Vec<ObservationPiece>, crate::datagen::BenchmarkSpec) {
        let spec = make_benchmark(Benchmark::Linear2D);
        let pieces = (0..3)
            .map(|l| {
                let dist = TimeDistribution::uniform(l as f64, l as f64 + 1.0).unwrap();
                synthesize(&spec, n, &dist, 0.0, seed + l as u64).unwrap()
            })
            .collect();
        (pieces, spec)
    }

    #[test]
    fn slots_sort_and_dedup() {
        let (grid, slot) = solve_slots(1.0, &[3.0, 1.5, 3.0, 1.0, 2.0]);
        assert_eq!(grid, vec![1.0, 1.5, 2.0, 3.0]);
        assert_eq!(slot, vec![3, 1, 3, 0, 2]);
    }

    #[test]
    fn truth_sits_near_the_sampling_floor() {
        let (pieces, spec) = linear_pieces(3000, 1);
        let cfg = PiConfig::default();
        let (mut at_truth, mut floor) = (0.0, 0.0);
        for s in 0..10u64 {
            at_truth += pi_loss_and_grad(&pieces, &spec.library, &spec.theta, &cfg, s).unwrap().loss;
            for (l, p) in pieces.iter().enumerate() {
                let mut r = ChaCha8Rng::seed_from_u64(s * 31 + l as u64);
                let a: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..p.len())).collect();
                let b: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..p.len())).collect();
                let proj = ProjectionSet::random_with(&mut r, 2, cfg.slices);
                floor += sliced_w2sq(p.points.select(Axis(0), &a).view(), p.points.select(Axis(0), &b).view(), &proj).unwrap();
            }
        }
        assert!(at_truth < 10.0 * floor, "truth {at_truth} floor {floor}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = make_benchmark(Benchmark::Cubic2D);
        let lib = spec.library.subset(&["x1^3", "x2^3"]).unwrap();
        let dist = TimeDistribution::uniform(0.0, 1.0).unwrap();
        let pieces = vec![synthesize(&spec, 500, &dist, 0.0, 3).unwrap()];
        let cfg = PiConfig {
            batch: 64,
            slices: 8,
            ..PiConfig::default()
        };
        for seed in 0..5u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let theta = CoefficientMatrix::from_array(ndarray::array![
                [r.random_range(-0.5..0.0), r.random_range(-2.5..-1.5)],
                [r.random_range(1.5..2.5), r.random_range(-0.5..0.0)]
            ]);
            let ev = pi_loss_and_grad(&pieces, &lib, &theta, &cfg, seed).unwrap();
            let h = 1e-6;
            for ix in [(0, 1), (1, 0), (0, 0)] {
                let mut p = theta.clone();
                p.values_mut()[ix] += h;
                let mut m = theta.clone();
                m.values_mut()[ix] -= h;
                let fd = (pi_loss_and_grad(&pieces, &lib, &p, &cfg, seed).unwrap().loss
                    - pi_loss_and_grad(&pieces, &lib, &m, &cfg, seed).unwrap().loss)
                    / (2.0 * h);
                let an = ev.grad.values()[ix];
                assert!((fd - an).abs() / fd.abs().max(1e-6) < 1e-4, "seed {seed} {ix:?}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_coefficients_give_constant_states() {
        let (pieces, spec) = linear_pieces(200, 2);
        let zero = CoefficientMatrix::zeros(spec.library.len(), 2);
        let cfg = PiConfig::default();
        let ev = pi_loss_and_grad(&pieces[..1], &spec.library, &zero, &cfg, 9).unwrap();
        let mut r = rng::Rng::seed_from_u64(rng::derive_seed(9, &[0]));
        let _ = pieces[0].dist.sample_with(&mut r, cfg.batch);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..pieces[0].len())).collect();
        let proj = ProjectionSet::random_with(&mut r, 2, cfg.slices);
        let reps = Array2::from_shape_fn((cfg.batch, 2), |(_, k)| pieces[0].x_init[k]);
        let want = sliced_w2sq(reps.view(), pieces[0].points.select(Axis(0), &idx).view(), &proj).unwrap();
        assert!((ev.loss - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn loss_ignores_observation_order() {
        let (pieces, spec) = linear_pieces(300, 4);
        let p = &pieces[0];
        let cfg = PiConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let times = p.dist.sample_with(&mut r, 64);
        let proj = ProjectionSet::random_with(&mut r, 2, 10);
        let obs = p.points.slice(ndarray::s![..64, ..]).to_owned();
        let mut perm: Vec<usize> = (0..64).collect();
        perm.reverse();
        perm.swap(3, 40);
        let shuffled = obs.select(Axis(0), &perm);
        let a = batch_loss(p, &spec.library, &spec.theta, &cfg, &times, obs.view(), &proj).unwrap();
        let b = batch_loss(p, &spec.library, &spec.theta, &cfg, &times, shuffled.view(), &proj).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn spurious_term_is_removed_right_after_onset() {
        let (pieces, spec) = linear_pieces(500, 5);
        let mut theta = spec.theta.clone();
        theta.values_mut()[[0, 0]] = 0.01;
        let cfg = PiConfig {
            iters: 6,
            iters_1: 3,
            batch: 64,
            lr: 1e-4,
            ..PiConfig::default()
        };
        let res = run_pi(&pieces, &spec.library, &theta, &cfg).unwrap();
        assert_eq!(res.history[2].active, 5);
        assert_eq!(res.history[3].active, 4);
        assert_eq!(res.theta.values()[[0, 0]], 0.0);
        assert_eq!(res.theta.support().len(), 4);
    }

    #[test]
    fn all_eliminated_is_degenerate() {
        let (pieces, spec) = linear_pieces(100, 6);
        let cfg = PiConfig {
            iters: 2,
            iters_1: 1,
            batch: 16,
            threshold: 100.0,
            ..PiConfig::default()
        };
        assert!(matches!(run_pi(&pieces, &spec.library, &spec.theta, &cfg), Err(Error::DegenerateModel)));
    }

    #[test]
    fn stable_from_truth() {
        let (pieces, spec) = linear_pieces(2000, 7);
        let cfg = PiConfig {
            iters: 200,
            iters_1: 100,
            ..PiConfig::default()
        };
        let res = run_pi(&pieces, &spec.library, &spec.theta, &cfg).unwrap();
        let err = (res.theta.values() - spec.theta.values()).mapv(f64::abs).sum() / spec.theta.l1_norm();
        assert!(err < 0.02, "{err}");
        assert_eq!(res.theta.support(), spec.theta.support());
    }

    #[test]
    fn landscape_is_deterministic_and_sized() {
        let (pieces, spec) = linear_pieces(200, 8);
        let axes = [
            ScanAxis {
                entry: (2, 0),
                range: (1.0, 3.0),
            },
            ScanAxis {
                entry: (1, 1),
                range: (-3.0, -1.0),
            },
        ];
        let cfg = PiConfig {
            batch: 32,
            ..PiConfig::default()
        };
        let a = loss_landscape(&pieces, &spec.library, &spec.theta, axes, 2, &cfg).unwrap();
        let b = loss_landscape(&pieces, &spec.library, &spec.theta, axes, 2, &cfg).unwrap();
        assert_eq!(a.loss.len(), 4);
        assert_eq!(a.loss, b.loss);
        assert!(a.blowup.iter().all(|b| !b));
        let vals: Array1<f64> = (0..2).map(|i| axes[0].value(i, 2)).collect();
        assert_eq!(vals.to_vec(), vec![1.0, 3.0]);
        assert!(loss_landscape(&pieces, &spec.library, &spec.theta, axes, 1, &cfg).is_err());
    }
}
