//! Monte-Carlo sliced 2-Wasserstein discrepancy between equal-size samples.
//!
//! Each slice projects both samples on a unit direction; the 1D optimal
//! transport between equal-size empirical measures pairs order statistics,
//! so a slice costs two sorts. Gradients follow the sorted matching.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng;

/// Unit directions, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    dirs: Array2<f64>,
}

impl ProjectionSet {
    /// `m` directions uniform on the unit sphere of `R^d`.
    pub fn random(d: usize, m: usize, seed: u64) -> Self {
        let mut r = rng::rng_for(seed, &[rng::stream::PROJECTIONS]);
        Self::random_with(&mut r, d, m)
    }

    pub fn random_with<R: Rng + ?Sized>(r: &mut R, d: usize, m: usize) -> Self {
        assert!(d >= 1 && m >= 1, "projection set needs d >= 1 and m >= 1");
        let mut dirs = Array2::zeros((m, d));
        for mut row in dirs.rows_mut() {
            loop {
                row.iter_mut().for_each(|v| *v = r.sample::<f64, _>(StandardNormal));
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    row.iter_mut().for_each(|v| *v /= norm);
                    break;
                }
            }
        }
        ProjectionSet { dirs }
    }

    /// Rows are normalised to unit length.
    pub fn from_directions(mut dirs: Array2<f64>) -> Result<Self> {
        if dirs.nrows() == 0 || dirs.ncols() == 0 {
            return Err(Error::Shape("empty projection set".into()));
        }
        for mut row in dirs.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Domain("projection direction has zero or non-finite norm".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(ProjectionSet { dirs })
    }

    pub fn len(&self) -> usize {
        self.dirs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.dirs.ncols()
    }

    pub fn directions(&self) -> ArrayView2<'_, f64> {
        self.dirs.view()
    }
}

/// How per-slice transport costs are aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceAggregation {
    /// Mean of squared per-slice W2 (standard SW2^2).
    #[default]
    Squared,
    /// Mean of per-slice W2, i.e. square roots taken before averaging.
    RootMean,
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    idx
}

/// `(1/n) sum_i (a_(i) - b_(i))^2` over order statistics.
pub fn w2sq_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("sample sizes differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

fn check_inputs(x: ArrayView2<f64>, y: ArrayView2<f64>, proj: &ProjectionSet) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("sample shapes differ: {:?} vs {:?}", x.dim(), y.dim())));
    }
    if x.ncols() != proj.dim() {
        return Err(Error::Shape(format!(
            "samples live in R^{}, projections in R^{}",
            x.ncols(),
            proj.dim()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::Shape("empty samples".into()));
    }
    Ok(())
}

/// Per-slice squared W2 together with the matched residuals
/// `x_i . w - y_{match(i)} . w`, indexed by the rows of `x`.
fn slices(x: ArrayView2<f64>, y: ArrayView2<f64>, proj: &ProjectionSet, want_residuals: bool) -> Vec<(f64, Vec<f64>)> {
    let px = x.dot(&proj.dirs.t());
    let py = y.dot(&proj.dirs.t());
    let n = x.nrows();
    par::map_range(proj.len(), |j| {
        let a = px.column(j).to_vec();
        let b = py.column(j).to_vec();
        let ia = argsort(&a);
        let ib = argsort(&b);
        let mut acc = 0.0;
        let mut res = if want_residuals { vec![0.0; n] } else { Vec::new() };
        for (&i, &k) in ia.iter().zip(&ib) {
            let r = a[i] - b[k];
            acc += r * r;
            if want_residuals {
                res[i] = r;
            }
        }
        (acc / n as f64, res)
    })
}

fn aggregate(w: impl Iterator<Item = f64>, m: usize, agg: SliceAggregation) -> f64 {
    let total: f64 = match agg {
        SliceAggregation::Squared => w.sum(),
        SliceAggregation::RootMean => w.map(f64::sqrt).sum(),
    };
    total / m as f64
}

/// Mean over slices of the squared 1D W2 between projected samples.
pub fn sliced_w2sq(x: ArrayView2<f64>, y: ArrayView2<f64>, proj: &ProjectionSet) -> Result<f64> {
    sliced_discrepancy(x, y, proj, SliceAggregation::Squared)
}

pub fn sliced_discrepancy(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    proj: &ProjectionSet,
    agg: SliceAggregation,
) -> Result<f64> {
    check_inputs(x, y, proj)?;
    let s = slices(x, y, proj, false);
    Ok(aggregate(s.iter().map(|(w, _)| *w), proj.len(), agg))
}

/// Value and gradient with respect to `x` of [`sliced_w2sq`].
pub fn sliced_w2sq_grad(x: ArrayView2<f64>, y: ArrayView2<f64>, proj: &ProjectionSet) -> Result<(f64, Array2<f64>)> {
    sliced_discrepancy_grad(x, y, proj, SliceAggregation::Squared)
}

pub fn sliced_discrepancy_grad(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    proj: &ProjectionSet,
    agg: SliceAggregation,
) -> Result<(f64, Array2<f64>)> {
    check_inputs(x, y, proj)?;
    let (n, m) = (x.nrows(), proj.len());
    let s = slices(x, y, proj, true);
    let value = aggregate(s.iter().map(|(w, _)| *w), m, agg);
    // coef[i, j] = d value / d (x_i . w_j)
    let mut coef = Array2::<f64>::zeros((n, m));
    for (j, (w, res)) in s.iter().enumerate() {
        let scale = match agg {
            SliceAggregation::Squared => 2.0 / (n * m) as f64,
            SliceAggregation::RootMean if *w > 0.0 => 1.0 / (n * m) as f64 / w.sqrt(),
            SliceAggregation::RootMean => 0.0,
        };
        for (i, r) in res.iter().enumerate() {
            coef[[i, j]] = scale * r;
        }
    }
    Ok((value, coef.dot(&proj.dirs)))
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_cloud(r: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| r.random_range(-2.0f64..2.0))
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn one_dimensional_cases() {
        assert_eq!(w2sq_1d(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(w2sq_1d(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(w2sq_1d(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(w2sq_1d(&[0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn matches_brute_force_assignment() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let perms = permutations(6);
        assert_eq!(perms.len(), 720);
        for _ in 0..20 {
            let a: Vec<f64> = (0..6).map(|_| r.random_range(-3.0f64..3.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| r.random_range(-3.0f64..3.0)).collect();
            let best = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &k)| (a[i] - b[k]).powi(2)).sum::<f64>() / 6.0)
                .fold(f64::INFINITY, f64::min);
            assert!((w2sq_1d(&a, &b).unwrap() - best).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_and_one_dimensional() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = random_cloud(&mut r, 30, 3);
        let p = ProjectionSet::random(3, 17, 4);
        assert_eq!(sliced_w2sq(x.view(), x.view(), &p).unwrap(), 0.0);
        let (_, g) = sliced_w2sq_grad(x.view(), x.view(), &p).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let a = random_cloud(&mut r, 25, 1);
        let b = random_cloud(&mut r, 25, 1);
        let direct = w2sq_1d(a.column(0).as_slice().unwrap(), b.column(0).as_slice().unwrap()).unwrap();
        for m in [1, 5, 40] {
            let p = ProjectionSet::random(1, m, m as u64);
            assert!((sliced_w2sq(a.view(), b.view(), &p).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_shift() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let y = random_cloud(&mut r, 40, 3);
        let v = array![0.3, -1.2, 0.5];
        let c = 0.7;
        let x = &y + &(&v * c);
        let p = ProjectionSet::random(3, 25, 8);
        let expect: f64 = p
            .directions()
            .rows()
            .into_iter()
            .map(|w| (c * w.dot(&v)).powi(2))
            .sum::<f64>()
            / 25.0;
        assert!((sliced_w2sq(x.view(), y.view(), &p).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn single_pair_gradient() {
        let x = array![[0.4, -1.0]];
        let y = array![[1.5, 2.0]];
        let p = ProjectionSet::random(2, 9, 1);
        let (_, g) = sliced_w2sq_grad(x.view(), y.view(), &p).unwrap();
        let diff: Array1<f64> = &x.row(0) - &y.row(0);
        let mut expect = Array1::<f64>::zeros(2);
        for w in p.directions().rows() {
            expect = expect + &w * (2.0 / 9.0 * diff.dot(&w));
        }
        for k in 0..2 {
            assert!((g[[0, k]] - expect[k]).abs() < 1e-14);
        }
    }

    fn fd_check(seed: u64, agg: SliceAggregation) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = random_cloud(&mut r, 12, 3);
        let y = random_cloud(&mut r, 12, 3);
        let p = ProjectionSet::random(3, 7, seed);
        let (_, g) = sliced_discrepancy_grad(x.view(), y.view(), &p, agg).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            for k in 0..3 {
                let mut xp = x.clone();
                xp[[i, k]] += h;
                let mut xm = x.clone();
                xm[[i, k]] -= h;
                let fd = (sliced_discrepancy(xp.view(), y.view(), &p, agg).unwrap()
                    - sliced_discrepancy(xm.view(), y.view(), &p, agg).unwrap())
                    / (2.0 * h);
                let rel = (fd - g[[i, k]]).abs() / fd.abs().max(g[[i, k]].abs()).max(1e-6);
                assert!(rel < 1e-5, "seed {seed} ({i},{k}) fd {fd} an {}", g[[i, k]]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            fd_check(seed, SliceAggregation::Squared);
        }
        for seed in 0..5 {
            fd_check(seed, SliceAggregation::RootMean);
        }
    }

    #[test]
    fn estimator_variance_shrinks_with_slices() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = random_cloud(&mut r, 50, 3);
        let y = &random_cloud(&mut r, 50, 3) * 0.5;
        let var = |m: usize| {
            let vals: Vec<f64> = (0..200)
                .map(|s| sliced_w2sq(x.view(), y.view(), &ProjectionSet::random(3, m, 1000 + s)).unwrap())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
        };
        let (v10, v100, v1000) = (var(10), var(100), var(1000));
        for ratio in [v10 / v100, v100 / v1000] {
            assert!((5.0..20.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn unit_directions() {
        let p = ProjectionSet::random(5, 100, 0);
        for row in p.directions().rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn nonnegative_and_symmetric(seed in 0u64..1000) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = random_cloud(&mut r, 10, 2);
            let y = random_cloud(&mut r, 10, 2);
            let p = ProjectionSet::random(2, 6, seed);
            let a = sliced_w2sq(x.view(), y.view(), &p).unwrap();
            let b = sliced_w2sq(y.view(), x.view(), &p).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
