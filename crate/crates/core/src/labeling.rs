//! Time-label reconstruction by nearest-state projection onto a dense solve,
//! and the evaluation metrics.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::{states_at, ObservationPiece};
use crate::dictionary::{CandidateLibrary, CoefficientMatrix};
use crate::error::{Error, Result};
use crate::odesolve::{dense_solve, SolveOptions};
use crate::par;
use crate::surrogate::MlpSurrogate;

/// Per point, the grid time whose state is nearest in squared Euclidean
/// distance. Ties go to the earlier grid time.
pub fn project_onto(times: &[f64], states: ArrayView2<f64>, points: ArrayView2<f64>) -> Result<Vec<f64>> {
    if times.len() != states.nrows() || times.is_empty() {
        return Err(Error::Shape("grid times and states disagree".into()));
    }
    if states.ncols() != points.ncols() {
        return Err(Error::Shape(format!(
            "states have dimension {}, points {}",
            states.ncols(),
            points.ncols()
        )));
    }
    Ok(par::map_range(points.nrows(), |i| {
        let p = points.row(i);
        let mut best = (f64::INFINITY, 0);
        for (g, s) in states.rows().into_iter().enumerate() {
            let d2: f64 = s.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, g);
            }
        }
        times[best.1]
    }))
}

/// Labels from an RK4 solve of the identified system on `mg` uniform
/// instants over the piece window.
pub fn reconstruct_times(
    piece: &ObservationPiece,
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    mg: usize,
) -> Result<Vec<f64>> {
    if mg < 2 {
        return Err(Error::Domain("grid density must be >= 2".into()));
    }
    let traj = dense_solve(lib, theta, &piece.x_init, piece.t0, piece.span, mg - 1, SolveOptions::default())?;
    project_onto(&traj.times, traj.states.view(), piece.points.view())
}

/// Labels from the surrogate network of the piece instead of a solve.
pub fn reconstruct_times_surrogate(piece: &ObservationPiece, net: &MlpSurrogate, mg: usize) -> Result<Vec<f64>> {
    if mg < 2 {
        return Err(Error::Domain("grid density must be >= 2".into()));
    }
    let times: Vec<f64> = (0..mg)
        .map(|k| piece.t0 + piece.span * k as f64 / (mg - 1) as f64)
        .collect();
    let (states, _, _) = net.forward_batch(&times, false);
    project_onto(&times, states.view(), piece.points.view())
}

/// `sum |est - truth| / sum |truth|`, entrywise.
pub fn rmae_solution(est: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<f64> {
    if est.dim() != truth.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", est.dim(), truth.dim())));
    }
    let den: f64 = truth.iter().map(|v| v.abs()).sum();
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("true solution is identically zero".into()));
    }
    Ok(est.iter().zip(truth.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / den)
}

/// `||theta_hat - theta||_1 / ||theta||_1`, entrywise.
pub fn e_para(theta_hat: &CoefficientMatrix, theta_true: &CoefficientMatrix) -> Result<f64> {
    if theta_hat.values().dim() != theta_true.values().dim() {
        return Err(Error::Shape("coefficient matrices differ in shape".into()));
    }
    let den = theta_true.l1_norm();
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("true coefficients are all zero".into()));
    }
    let num: f64 = theta_hat
        .values()
        .iter()
        .zip(theta_true.values().iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(num / den)
}

/// `sum |t_hat - t| / sum |t|`.
pub fn e_time(t_hat: &[f64], t_true: &[f64]) -> Result<f64> {
    if t_hat.len() != t_true.len() {
        return Err(Error::Shape(format!("{} labels vs {} true times", t_hat.len(), t_true.len())));
    }
    let den: f64 = t_true.iter().map(|v| v.abs()).sum();
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("true times are all zero".into()));
    }
    Ok(t_hat.iter().zip(t_true).map(|(a, b)| (a - b).abs()).sum::<f64>() / den)
}

/// `n` uniform instants on `[lo, hi]`, both ends included.
pub fn eval_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1).max(1) as f64).collect();
    if n > 1 {
        g[n - 1] = hi;
    }
    g
}

/// The identified solution on `times`, stitched from per-piece solves that
/// start at each piece's initial state. Each instant belongs to the first
/// piece window containing it; instants outside every window use the
/// nearest window.
pub fn piecewise_solution(
    pieces: &[ObservationPiece],
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    times: &[f64],
) -> Result<Array2<f64>> {
    if pieces.is_empty() {
        return Err(Error::Domain("no pieces".into()));
    }
    let owner = |t: f64| -> usize {
        pieces
            .iter()
            .position(|p| t >= p.t0 && t <= p.t0 + p.span)
            .unwrap_or_else(|| {
                let gap = |p: &ObservationPiece| (p.t0 - t).max(t - p.t0 - p.span);
                (0..pieces.len())
                    .min_by(|&a, &b| gap(&pieces[a]).total_cmp(&gap(&pieces[b])))
                    .expect("nonempty")
            })
    };
    let owners: Vec<usize> = times.iter().map(|&t| owner(t)).collect();
    let mut out = Array2::zeros((times.len(), lib.dim()));
    for (l, p) in pieces.iter().enumerate() {
        let idx: Vec<usize> = (0..times.len()).filter(|&i| owners[i] == l).collect();
        if idx.is_empty() {
            continue;
        }
        let ts: Vec<f64> = idx.iter().map(|&i| times[i].max(p.t0)).collect();
        let states = states_at(lib, theta, &p.x_init, p.t0, &ts, p.span / 1000.0)?;
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(i).assign(&states.row(k));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMeta {
    pub seed: u64,
    /// Hex digest of the canonical configuration JSON.
    pub config_hash: String,
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionReport {
    pub library: Vec<String>,
    pub theta: Vec<Vec<f64>>,
    pub support: Vec<(usize, usize)>,
    /// Reconstructed labels, one list per piece in piece order.
    pub labels: Vec<Vec<f64>>,
    pub e_para: Option<f64>,
    pub rmae_solution: Option<f64>,
    pub e_time: Option<f64>,
    /// Absolute label errors in piece order, when true labels are known.
    pub abs_errors: Vec<f64>,
    pub meta: ReportMeta,
}

/// Labels for every piece plus whichever metrics the available truth
/// allows. `truth` is the true coefficient matrix in `lib` together with a
/// reference solution on `eval_times`.
pub fn build_report(
    pieces: &[ObservationPiece],
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    mg: usize,
    truth: Option<(&CoefficientMatrix, &[f64], ArrayView2<f64>)>,
    meta: ReportMeta,
) -> Result<ReconstructionReport> {
    let labels = pieces
        .iter()
        .map(|p| reconstruct_times(p, lib, theta, mg))
        .collect::<Result<Vec<_>>>()?;
    let mut t_hat = Vec::new();
    let mut t_true = Vec::new();
    let mut have_times = true;
    for (p, lab) in pieces.iter().zip(&labels) {
        match &p.true_times {
            Some(tt) => {
                t_hat.extend_from_slice(lab);
                t_true.extend_from_slice(tt);
            }
            None => have_times = false,
        }
    }
    let e_time = if have_times { Some(e_time(&t_hat, &t_true)?) } else { None };
    let abs_errors = if have_times {
        t_hat.iter().zip(&t_true).map(|(a, b)| (a - b).abs()).collect()
    } else {
        Vec::new()
    };
    let (e_para, rmae) = match truth {
        Some((th, times, reference)) => {
            let est = piecewise_solution(pieces, lib, theta, times)?;
            (Some(e_para(theta, th)?), Some(rmae_solution(est.view(), reference)?))
        }
        None => (None, None),
    };
    Ok(ReconstructionReport {
        library: lib.names().to_vec(),
        theta: theta.values().rows().into_iter().map(|r| r.to_vec()).collect(),
        support: theta.support(),
        labels,
        e_para,
        rmae_solution: rmae,
        e_time,
        abs_errors,
        meta,
    })
}
