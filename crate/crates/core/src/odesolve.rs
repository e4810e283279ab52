//! Fixed-step RK4 on arbitrary increasing grids, with an optional tape that
//! records every stage state so the exact gradient of the discrete solution
//! map with respect to the coefficients can be accumulated in reverse.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::dictionary::{CandidateLibrary, CoefficientMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;

/// Output instants plus the number of RK4 steps taken inside each interval.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveGrid {
    times: Vec<f64>,
    substeps: Vec<usize>,
}

impl SolveGrid {
    /// Every interval is split into `substeps_per_interval` equal steps.
    pub fn new(times: Vec<f64>, substeps_per_interval: usize) -> Result<Self> {
        validate_times(&times)?;
        if substeps_per_interval == 0 {
            return Err(Error::Domain("substeps_per_interval must be >= 1".into()));
        }
        let substeps = vec![substeps_per_interval; times.len() - 1];
        Ok(SolveGrid { times, substeps })
    }

    /// Each interval gets at least `min_substeps` steps and enough of them
    /// that no step exceeds `max_step`.
    pub fn with_max_step(times: Vec<f64>, min_substeps: usize, max_step: f64) -> Result<Self> {
        validate_times(&times)?;
        if !(max_step > 0.0) || min_substeps == 0 {
            return Err(Error::Domain("max_step must be > 0 and min_substeps >= 1".into()));
        }
        let substeps = times
            .windows(2)
            .map(|w| (((w[1] - w[0]) / max_step).ceil() as usize).max(min_substeps))
            .collect();
        Ok(SolveGrid { times, substeps })
    }

    /// `n + 1` equally spaced instants on `[t0, t0 + span]`, one step each.
    pub fn uniform(t0: f64, span: f64, n: usize) -> Result<Self> {
        if n == 0 || !(span > 0.0) {
            return Err(Error::Domain("uniform grid needs n >= 1 and span > 0".into()));
        }
        let h = span / n as f64;
        let mut times: Vec<f64> = (0..=n).map(|i| t0 + h * i as f64).collect();
        times[n] = t0 + span;
        SolveGrid::new(times, 1)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn substeps(&self) -> &[usize] {
        &self.substeps
    }

    pub fn total_steps(&self) -> usize {
        self.substeps.iter().sum()
    }
}

fn validate_times(times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::Domain("a grid needs at least two instants".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Domain("grid instants must be finite".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("grid instants must be strictly increasing".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub blowup_bound: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            blowup_bound: DEFAULT_BLOWUP_BOUND,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// One row per instant.
    pub states: Array2<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn sup_norm(&self) -> f64 {
        self.states
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push('t');
        for k in 0..self.dim() {
            out.push_str(&format!(",x{}", k + 1));
        }
        out.push('\n');
        for (t, row) in self.times.iter().zip(self.states.rows()) {
            out.push_str(&t.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Stage states and step sizes of one taped solve.
#[derive(Clone, Debug)]
pub struct SolveTape {
    dim: usize,
    x0: Vec<f64>,
    steps: Vec<f64>,
    /// `4 * dim` entries per step: the arguments of k1..k4.
    stages: Vec<f64>,
    /// Number of completed steps when each output state was recorded.
    output_step: Vec<usize>,
}

impl SolveTape {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn num_outputs(&self) -> usize {
        self.output_step.len()
    }

    /// Re-runs the recorded steps from the stored initial state.
    pub fn replay(&self, lib: &CandidateLibrary, theta: &CoefficientMatrix) -> Array2<f64> {
        let d = self.dim;
        let mut ws = Workspace::new(lib.len(), d);
        let mut x = self.x0.clone();
        let mut out = Array2::zeros((self.num_outputs(), d));
        let mut next_out = 0;
        let record = |x: &[f64], done: usize, out: &mut Array2<f64>, next: &mut usize| {
            while *next < self.output_step.len() && self.output_step[*next] == done {
                out.row_mut(*next).iter_mut().zip(x).for_each(|(o, v)| *o = *v);
                *next += 1;
            }
        };
        record(&x, 0, &mut out, &mut next_out);
        for (n, &h) in self.steps.iter().enumerate() {
            rk4_step(lib, theta.view(), &mut x, h, &mut ws, None);
            record(&x, n + 1, &mut out, &mut next_out);
        }
        out
    }
}

struct Workspace {
    g: Vec<f64>,
    k: [Vec<f64>; 4],
    y: Vec<f64>,
}

impl Workspace {
    fn new(s: usize, d: usize) -> Self {
        Workspace {
            g: vec![0.0; s],
            k: [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            y: vec![0.0; d],
        }
    }
}

#[inline]
fn rk4_step(
    lib: &CandidateLibrary,
    theta: ArrayView2<f64>,
    x: &mut [f64],
    h: f64,
    ws: &mut Workspace,
    mut stages: Option<&mut Vec<f64>>,
) {
    let d = x.len();
    let Workspace { g, k, y } = ws;
    let coef = [0.0, 0.5 * h, 0.5 * h, h];
    for st in 0..4 {
        if st == 0 {
            y.copy_from_slice(x);
        } else {
            for i in 0..d {
                y[i] = x[i] + coef[st] * k[st - 1][i];
            }
        }
        if let Some(buf) = stages.as_deref_mut() {
            buf.extend_from_slice(y);
        }
        lib.rhs_into(theta, y, g, &mut k[st]);
    }
    for i in 0..d {
        x[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
}

fn solve_impl(
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    x0: &[f64],
    grid: &SolveGrid,
    opts: SolveOptions,
    record: bool,
) -> Result<(Trajectory, Option<SolveTape>)> {
    lib.check_theta(theta)?;
    let d = lib.dim();
    if x0.len() != d {
        return Err(Error::Shape(format!("initial state has length {}, expected {d}", x0.len())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("initial state must be finite".into()));
    }
    let times = grid.times();
    let mut states = Array2::zeros((times.len(), d));
    states.row_mut(0).iter_mut().zip(x0).for_each(|(o, v)| *o = *v);

    let mut ws = Workspace::new(lib.len(), d);
    let mut x = x0.to_vec();
    let total = grid.total_steps();
    let mut tape = record.then(|| SolveTape {
        dim: d,
        x0: x0.to_vec(),
        steps: Vec::with_capacity(total),
        stages: Vec::with_capacity(total * 4 * d),
        output_step: Vec::with_capacity(times.len()),
    });
    if let Some(t) = tape.as_mut() {
        t.output_step.push(0);
    }
    let theta_view = theta.view();
    let mut done = 0;
    for (i, w) in times.windows(2).enumerate() {
        let m = grid.substeps()[i];
        let h = (w[1] - w[0]) / m as f64;
        for sub in 0..m {
            let stages = tape.as_mut().map(|t| {
                t.steps.push(h);
                &mut t.stages
            });
            rk4_step(lib, theta_view, &mut x, h, &mut ws, stages);
            done += 1;
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= opts.blowup_bound) {
                return Err(Error::BlowUp {
                    time: w[0] + h * (sub + 1) as f64,
                    norm,
                });
            }
        }
        states.row_mut(i + 1).iter_mut().zip(&x).for_each(|(o, v)| *o = *v);
        if let Some(t) = tape.as_mut() {
            t.output_step.push(done);
        }
    }
    Ok((
        Trajectory {
            times: times.to_vec(),
            states,
        },
        tape,
    ))
}

pub fn rk4_solve(
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    x0: &[f64],
    grid: &SolveGrid,
    opts: SolveOptions,
) -> Result<Trajectory> {
    solve_impl(lib, theta, x0, grid, opts, false).map(|(t, _)| t)
}

pub fn rk4_solve_taped(
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    x0: &[f64],
    grid: &SolveGrid,
    opts: SolveOptions,
) -> Result<(Trajectory, SolveTape)> {
    solve_impl(lib, theta, x0, grid, opts, true).map(|(t, tape)| (t, tape.expect("tape recorded")))
}

/// Uniform grid of `n` steps over `[t0, t0 + span]`.
pub fn dense_solve(
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    x0: &[f64],
    t0: f64,
    span: f64,
    n: usize,
    opts: SolveOptions,
) -> Result<Trajectory> {
    rk4_solve(lib, theta, x0, &SolveGrid::uniform(t0, span, n)?, opts)
}

/// Gradients of a loss through a taped solve.
#[derive(Clone, Debug)]
pub struct TapeGradient {
    pub theta: CoefficientMatrix,
    pub x0: Vec<f64>,
}

/// Reverse accumulation through the recorded RK4 steps. `loss_grads` has one
/// row per output state of the solve (dL/dx at each grid instant).
pub fn backprop_tape(
    tape: &SolveTape,
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    loss_grads: ArrayView2<f64>,
) -> Result<TapeGradient> {
    lib.check_theta(theta)?;
    let d = tape.dim;
    if loss_grads.dim() != (tape.num_outputs(), d) || lib.dim() != d {
        return Err(Error::Shape(format!(
            "loss gradients are {:?}, tape has {} outputs of dimension {d}",
            loss_grads.dim(),
            tape.num_outputs()
        )));
    }
    let s = lib.len();
    let th = theta.view();
    let mut gtheta = Array2::<f64>::zeros((s, d));
    let mut adj = vec![0.0; d];
    let mut out_idx = tape.num_outputs();

    let add_outputs = |boundary: usize, adj: &mut [f64], out_idx: &mut usize| {
        while *out_idx > 0 && tape.output_step[*out_idx - 1] == boundary {
            *out_idx -= 1;
            for (a, g) in adj.iter_mut().zip(loss_grads.row(*out_idx)) {
                *a += g;
            }
        }
    };

    let mut g = vec![0.0; s];
    let mut w = vec![0.0; s];
    let mut ybar = vec![0.0; d];
    let mut ak = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let weights = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];
    // Coefficient with which k_{st-1} enters the argument of stage st.
    let feed = [0.0, 0.5, 0.5, 1.0];

    for n in (0..tape.num_steps()).rev() {
        add_outputs(n + 1, &mut adj, &mut out_idx);
        let h = tape.steps[n];
        for st in 0..4 {
            for i in 0..d {
                ak[st][i] = h * weights[st] * adj[i];
            }
        }
        for st in (0..4).rev() {
            let y = &tape.stages[(n * 4 + st) * d..(n * 4 + st + 1) * d];
            lib.eval_into(y, &mut g);
            for j in 0..s {
                if g[j] != 0.0 {
                    for i in 0..d {
                        gtheta[[j, i]] += g[j] * ak[st][i];
                    }
                }
            }
            lib.rhs_vjp_into(th, y, &ak[st], &mut w, &mut ybar);
            for i in 0..d {
                adj[i] += ybar[i];
            }
            if st > 0 {
                let c = feed[st] * h;
                for i in 0..d {
                    ak[st - 1][i] += c * ybar[i];
                }
            }
        }
    }
    add_outputs(0, &mut adj, &mut out_idx);
    Ok(TapeGradient {
        theta: CoefficientMatrix::from_array(gtheta),
        x0: adj,
    })
}
