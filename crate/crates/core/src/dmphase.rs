//! Distribution-matching phase: one surrogate network per piece, trained on
//! the sliced transport loss plus an initial-state penalty and an ODE
//! residual penalty, with the coefficients refreshed by STRidge on the
//! stacked network outputs (alternating direction scheme).

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::datagen::ObservationPiece;
use crate::dictionary::{CandidateLibrary, CoefficientMatrix};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, stream};
use crate::surrogate::{AdamW, MlpSurrogate, Normalization};
use crate::swd::{sliced_discrepancy, sliced_discrepancy_grad, ProjectionSet, SliceAggregation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmConfig {
    pub iters: usize,
    /// Steps trained on the transport and initial-state terms only.
    pub iters_phase1: usize,
    /// STRidge cadence after warmup.
    pub iters_update: usize,
    pub batch: usize,
    pub slices: usize,
    pub lambda_init: f64,
    pub lambda_reg: f64,
    /// Ridge weight inside STRidge.
    pub lambda_sparse: f64,
    /// STRidge threshold on coefficient magnitude.
    pub threshold: f64,
    /// Residual grid size per piece.
    pub n_reg: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden_layers: usize,
    pub width: usize,
    pub aggregation: SliceAggregation,
    pub seed: u64,
}

impl Default for DmConfig {
    fn default() -> Self {
        DmConfig {
            iters: 3000,
            iters_phase1: 1000,
            iters_update: 100,
            batch: 256,
            slices: 20,
            lambda_init: 0.5,
            lambda_reg: 1e-3,
            lambda_sparse: 1e-5,
            threshold: 0.04,
            n_reg: 50,
            lr: 3e-4,
            weight_decay: 0.0,
            hidden_layers: 4,
            width: 64,
            aggregation: SliceAggregation::Squared,
            seed: 0,
        }
    }
}

impl DmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dm: {m}")));
        if self.iters > 0 && !(self.iters_phase1 > 0 && self.iters_phase1 < self.iters) {
            return bad("need 0 < iters_phase1 < iters");
        }
        if self.iters_update == 0 {
            return bad("iters_update must be >= 1");
        }
        if self.batch < 2 || self.slices == 0 || self.n_reg < 2 {
            return bad("need batch >= 2, slices >= 1, n_reg >= 2");
        }
        let lambdas = [self.lambda_init, self.lambda_reg, self.lambda_sparse, self.threshold, self.weight_decay];
        if lambdas.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("weights and threshold must be finite and >= 0");
        }
        if !(self.lr > 0.0) || self.width == 0 {
            return bad("lr must be > 0 and width >= 1");
        }
        Ok(())
    }

    pub fn widths(&self, d: usize) -> Vec<usize> {
        MlpSurrogate::widths_for(self.hidden_layers, self.width, d)
    }
}

/// Loss terms for one piece at one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DmTerms {
    pub swd: f64,
    pub init: f64,
    pub residual: f64,
}

impl DmTerms {
    pub fn total(&self) -> f64 {
        self.swd + self.init + self.residual
    }

    fn add(&mut self, o: &DmTerms) {
        self.swd += o.swd;
        self.init += o.init;
        self.residual += o.residual;
    }
}

/// Anything that maps a batch of instants to states and optionally their
/// time derivatives.
pub trait TimeModel {
    fn eval_batch(&self, ts: &[f64], with_dt: bool) -> (Array2<f64>, Option<Array2<f64>>);
}

impl TimeModel for MlpSurrogate {
    fn eval_batch(&self, ts: &[f64], with_dt: bool) -> (Array2<f64>, Option<Array2<f64>>) {
        let (x, dx, _) = self.forward_batch(ts, with_dt);
        (x, dx)
    }
}

/// Uniform grid of `n` instants covering the closed piece window.
pub fn residual_grid(t0: f64, span: f64, n: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..n).map(|k| t0 + span * k as f64 / (n - 1) as f64).collect();
    g[n - 1] = t0 + span;
    g
}

struct StepDraw {
    times: Vec<f64>,
    obs: Array2<f64>,
    proj: ProjectionSet,
}

fn draw(piece: &ObservationPiece, cfg: &DmConfig, step_seed: u64) -> StepDraw {
    let mut r = rng::Rng::seed_from_u64(step_seed);
    let times = piece.dist.sample_with(&mut r, cfg.batch);
    let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..piece.len())).collect();
    let obs = piece.points.select(Axis(0), &idx);
    let proj = ProjectionSet::random_with(&mut r, piece.dim(), cfg.slices);
    StepDraw { times, obs, proj }
}

fn check_model(piece: &ObservationPiece, lib: &CandidateLibrary, theta: &CoefficientMatrix, d: usize) -> Result<()> {
    lib.check_theta(theta)?;
    if piece.dim() != d || lib.dim() != d {
        return Err(Error::Shape(format!(
            "model dimension {d}, piece {}, library {}",
            piece.dim(),
            lib.dim()
        )));
    }
    Ok(())
}

/// Loss terms only, for any time model. `step <= iters_phase1` drops the
/// residual term.
pub fn dm_loss_terms<M: TimeModel>(
    piece: &ObservationPiece,
    model: &M,
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    cfg: &DmConfig,
    step: usize,
    step_seed: u64,
) -> Result<DmTerms> {
    let dr = draw(piece, cfg, step_seed);
    let (xb, _) = model.eval_batch(&dr.times, false);
    check_model(piece, lib, theta, xb.ncols())?;
    let swd = sliced_discrepancy(xb.view(), dr.obs.view(), &dr.proj, cfg.aggregation)?;
    let (x0, _) = model.eval_batch(&[piece.t0], false);
    let init = cfg.lambda_init * x0.row(0).iter().zip(&piece.x_init).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let mut residual = 0.0;
    if step > cfg.iters_phase1 && cfg.lambda_reg > 0.0 {
        let grid = residual_grid(piece.t0, piece.span, cfg.n_reg);
        let (xg, dxg) = model.eval_batch(&grid, true);
        let dxg = dxg.expect("derivative channel");
        let (mut sc, mut f) = (vec![0.0; lib.len()], vec![0.0; lib.dim()]);
        for k in 0..grid.len() {
            let x = xg.row(k).to_vec();
            lib.rhs_into(theta.view(), &x, &mut sc, &mut f);
            residual += f.iter().zip(dxg.row(k)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        }
        residual *= cfg.lambda_reg / grid.len() as f64;
    }
    Ok(DmTerms { swd, init, residual })
}

/// Loss terms and the gradient with respect to the network parameters.
pub fn dm_loss(
    piece: &ObservationPiece,
    net: &MlpSurrogate,
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    cfg: &DmConfig,
    step: usize,
    step_seed: u64,
) -> Result<(DmTerms, Vec<f64>)> {
    let d = net.out_dim();
    check_model(piece, lib, theta, d)?;
    let dr = draw(piece, cfg, step_seed);

    let (xb, _, cache) = net.forward_batch(&dr.times, false);
    let (swd, gx) = sliced_discrepancy_grad(xb.view(), dr.obs.view(), &dr.proj, cfg.aggregation)?;
    let mut grad = net.backward_cached(&cache, gx.view(), None)?;

    let (x0, _, cache) = net.forward_batch(&[piece.t0], false);
    let diff: Vec<f64> = x0.row(0).iter().zip(&piece.x_init).map(|(a, b)| a - b).collect();
    let init = cfg.lambda_init * diff.iter().map(|v| v * v).sum::<f64>();
    if cfg.lambda_init > 0.0 {
        let g0 = Array2::from_shape_fn((1, d), |(_, k)| 2.0 * cfg.lambda_init * diff[k]);
        let g = net.backward_cached(&cache, g0.view(), None)?;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }

    let mut residual = 0.0;
    if step > cfg.iters_phase1 && cfg.lambda_reg > 0.0 {
        let grid = residual_grid(piece.t0, piece.span, cfg.n_reg);
        let n = grid.len();
        let (xg, dxg, cache) = net.forward_batch(&grid, true);
        let dxg = dxg.expect("derivative channel");
        let mut gx = Array2::zeros((n, d));
        let mut gdx = Array2::zeros((n, d));
        let (mut sc, mut f, mut r, mut vjp) = (vec![0.0; lib.len()], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let w = cfg.lambda_reg / n as f64;
        for k in 0..n {
            let x = xg.row(k).to_vec();
            lib.rhs_into(theta.view(), &x, &mut sc, &mut f);
            for i in 0..d {
                r[i] = f[i] - dxg[[k, i]];
            }
            let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            residual += nr;
            // the norm's subgradient at a zero residual is taken as zero
            if nr > 0.0 {
                r.iter_mut().for_each(|v| *v *= w / nr);
                lib.rhs_vjp_into(theta.view(), &x, &r, &mut sc, &mut vjp);
                for i in 0..d {
                    gx[[k, i]] = vjp[i];
                    gdx[[k, i]] = -r[i];
                }
            }
        }
        residual *= w;
        let g = net.backward_cached(&cache, gx.view(), Some(gdx.view()))?;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((DmTerms { swd, init, residual }, grad))
}

fn ridge_solve(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64, strict: bool) -> Result<DVector<f64>> {
    let (m, s) = a.shape();
    let (aa, bb) = if lambda > 0.0 {
        let mut aa = DMatrix::zeros(m + s, s);
        aa.view_mut((0, 0), (m, s)).copy_from(a);
        for j in 0..s {
            aa[(m + j, j)] = lambda.sqrt();
        }
        let mut bb = DVector::zeros(m + s);
        bb.rows_mut(0, m).copy_from(b);
        (aa, bb)
    } else {
        (a.clone(), b.clone())
    };
    let rows = aa.nrows();
    let svd = aa.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = if rows >= s { svd.singular_values.min() } else { 0.0 };
    let tol = smax * f64::EPSILON * (rows.max(s) as f64);
    if strict && !(smin > tol) {
        return Err(Error::Regression(format!(
            "normal equations are singular (smallest singular value {smin:e})"
        )));
    }
    svd.solve(&bb, tol).map_err(|e| Error::Regression(e.to_string()))
}

fn columns(a: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), cols.len(), |i, j| a[(i, cols[j])])
}

/// Sequential thresholded ridge regression for `A x ~ b`.
///
/// Ridge solves alternate with zeroing entries of magnitude `<= eta`, for at
/// most `s` rounds, until the support stops shrinking or empties. The
/// surviving support is refit by plain least squares.
pub fn stridge(a: ArrayView2<f64>, b: ArrayView1<f64>, lambda: f64, eta: f64) -> Result<Array1<f64>> {
    let (m, s) = a.dim();
    if m == 0 || s == 0 || b.len() != m {
        return Err(Error::Shape(format!("stridge needs m, s >= 1 and b of length m; got {m}x{s}, {}", b.len())));
    }
    if !(lambda >= 0.0) || !(eta >= 0.0) {
        return Err(Error::Domain("stridge weights must be >= 0".into()));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { what: "stridge inputs".into() });
    }
    let am = DMatrix::from_fn(m, s, |i, j| a[[i, j]]);
    let bv = DVector::from_iterator(m, b.iter().copied());
    let strict = lambda == 0.0;
    let mut x = vec![0.0; s];
    let mut support: Vec<usize> = (0..s).collect();
    for (j, v) in ridge_solve(&am, &bv, lambda, strict)?.iter().enumerate() {
        x[j] = *v;
    }
    for _ in 0..s {
        let keep: Vec<usize> = support.iter().copied().filter(|&j| x[j].abs() > eta).collect();
        if keep.len() == support.len() {
            break;
        }
        for &j in &support {
            if !keep.contains(&j) {
                x[j] = 0.0;
            }
        }
        support = keep;
        if support.is_empty() {
            break;
        }
        let sol = ridge_solve(&columns(&am, &support), &bv, lambda, strict)?;
        for (i, &j) in support.iter().enumerate() {
            x[j] = sol[i];
        }
    }
    if !support.is_empty() {
        let sol = ridge_solve(&columns(&am, &support), &bv, 0.0, strict)?;
        for (i, &j) in support.iter().enumerate() {
            x[j] = sol[i];
        }
    }
    Ok(Array1::from(x))
}

/// Network states and time derivatives on every piece's residual grid,
/// stacked in piece order.
pub fn stacked_grid_states(nets: &[MlpSurrogate], pieces: &[ObservationPiece], n: usize) -> (Array2<f64>, Array2<f64>) {
    let parts: Vec<(Array2<f64>, Array2<f64>)> = nets
        .iter()
        .zip(pieces)
        .map(|(net, p)| {
            let (x, dx, _) = net.forward_batch(&residual_grid(p.t0, p.span, n), true);
            (x, dx.expect("derivative channel"))
        })
        .collect();
    let xs: Vec<ArrayView2<f64>> = parts.iter().map(|(x, _)| x.view()).collect();
    let dxs: Vec<ArrayView2<f64>> = parts.iter().map(|(_, dx)| dx.view()).collect();
    (
        ndarray::concatenate(Axis(0), &xs).expect("equal widths"),
        ndarray::concatenate(Axis(0), &dxs).expect("equal widths"),
    )
}

fn features(lib: &CandidateLibrary, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut phi = Array2::zeros((x.nrows(), lib.len()));
    for (i, row) in x.rows().into_iter().enumerate() {
        let g = lib.eval_features(&row.to_vec())?;
        phi.row_mut(i).assign(&ArrayView1::from(&g));
    }
    Ok(phi)
}

/// One STRidge regression per state dimension of `dx ~ phi(x) theta`.
pub fn regress_theta(
    lib: &CandidateLibrary,
    x: ArrayView2<f64>,
    dx: ArrayView2<f64>,
    lambda: f64,
    eta: f64,
) -> Result<CoefficientMatrix> {
    let (m, d) = x.dim();
    if dx.dim() != (m, d) || lib.dim() != d {
        return Err(Error::Shape("states, derivatives and library disagree".into()));
    }
    let phi = features(lib, x)?;
    let mut theta = Array2::zeros((lib.len(), d));
    for k in 0..d {
        theta.column_mut(k).assign(&stridge(phi.view(), dx.column(k), lambda, eta)?);
    }
    Ok(CoefficientMatrix::from_array(theta))
}

/// Per-step loss terms summed over pieces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmRecord {
    pub iter: usize,
    pub swd: f64,
    pub init: f64,
    pub residual: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct DmResult {
    pub nets: Vec<MlpSurrogate>,
    pub theta: CoefficientMatrix,
    pub history: Vec<DmRecord>,
    pub stridge_calls: usize,
}

pub fn init_nets(pieces: &[ObservationPiece], cfg: &DmConfig) -> Result<Vec<MlpSurrogate>> {
    pieces
        .iter()
        .enumerate()
        .map(|(l, p)| {
            let mut r = rng::rng_for(cfg.seed, &[stream::NET_INIT, l as u64]);
            let mut net = MlpSurrogate::new_with(&cfg.widths(p.dim()), &mut r)?;
            net.set_normalization(Normalization::for_data(p.t0, p.span, p.points.view()))?;
            Ok(net)
        })
        .collect()
}

/// Runs the alternating schedule. Pieces train round-robin inside each
/// iteration; the coefficients change only at STRidge refreshes, which
/// happen right after warmup and then every `iters_update` iterations.
pub fn run_dm(pieces: &[ObservationPiece], lib: &CandidateLibrary, cfg: &DmConfig) -> Result<DmResult> {
    cfg.validate()?;
    if pieces.is_empty() {
        return Err(Error::Domain("no pieces to fit".into()));
    }
    for (l, p) in pieces.iter().enumerate() {
        p.validate().map_err(|e| Error::DegeneratePiece {
            piece: l,
            reason: e.to_string(),
        })?;
        if p.dim() != lib.dim() {
            return Err(Error::Shape(format!("piece {l} has dimension {}, library {}", p.dim(), lib.dim())));
        }
    }
    let nets = init_nets(pieces, cfg)?;
    let mut slots: Vec<(MlpSurrogate, AdamW)> = nets
        .into_iter()
        .map(|n| {
            let opt = AdamW::new(n.num_params(), cfg.lr, cfg.weight_decay);
            (n, opt)
        })
        .collect();
    let mut theta = CoefficientMatrix::zeros(lib.len(), lib.dim());
    let mut history = Vec::with_capacity(cfg.iters);
    let mut stridge_calls = 0;
    let refresh = |slots: &[(MlpSurrogate, AdamW)]| -> Result<CoefficientMatrix> {
        let nets: Vec<MlpSurrogate> = slots.iter().map(|(n, _)| n.clone()).collect();
        let (x, dx) = stacked_grid_states(&nets, pieces, cfg.n_reg);
        regress_theta(lib, x.view(), dx.view(), cfg.lambda_sparse, cfg.threshold)
    };

    for it in 1..=cfg.iters {
        if it == cfg.iters_phase1 + 1 {
            theta = refresh(&slots)?;
            stridge_calls += 1;
        }
        let th = &theta;
        let outcomes = par::map_slice_mut(&mut slots, |l, (net, opt)| -> Result<DmTerms> {
            let seed = rng::derive_seed(cfg.seed, &[stream::DM_STEP, it as u64, l as u64]);
            let (terms, grad) = dm_loss(&pieces[l], net, lib, th, cfg, it, seed)?;
            if !terms.total().is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step: it, piece: l });
            }
            opt.step(net.params_mut(), &grad);
            Ok(terms)
        });
        let mut sum = DmTerms::default();
        for o in outcomes {
            sum.add(&o?);
        }
        history.push(DmRecord {
            iter: it,
            swd: sum.swd,
            init: sum.init,
            residual: sum.residual,
            total: sum.total(),
        });
        if it > cfg.iters_phase1 && it % cfg.iters_update == 0 {
            theta = refresh(&slots)?;
            stridge_calls += 1;
        }
    }
    Ok(DmResult {
        nets: slots.into_iter().map(|(n, _)| n).collect(),
        theta,
        history,
        stridge_calls,
    })
}

pub fn write_history_csv(history: &[DmRecord], path: &Path) -> Result<()> {
    let mut out = String::from("iter,swd,init,residual,total\n");
    for r in history {
        out.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.iter, r.swd, r.init, r.residual, r.total));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn net_file_name(piece: usize) -> String {
    format!("net_{piece:02}.json")
}
