//! Benchmark systems, synthetic unlabeled observation sets and dataset files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dictionary::{build_library, CandidateLibrary, CoefficientMatrix, LibrarySpec};
use crate::error::{Error, Result};
use crate::odesolve::{rk4_solve, SolveGrid, SolveOptions};
use crate::rng;
use crate::timedist::TimeDistribution;

/// Data is generated with steps no longer than `span / DATA_STEPS`.
pub const DATA_STEPS: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Benchmark {
    Linear2D,
    Cubic2D,
    Linear3D,
    Lorenz,
    LV4D,
    Duffing,
    Pendulum,
}

impl Benchmark {
    pub const ALL: [Benchmark; 7] = [
        Benchmark::Linear2D,
        Benchmark::Cubic2D,
        Benchmark::Linear3D,
        Benchmark::Lorenz,
        Benchmark::LV4D,
        Benchmark::Duffing,
        Benchmark::Pendulum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Linear2D => "Linear2D",
            Benchmark::Cubic2D => "Cubic2D",
            Benchmark::Linear3D => "Linear3D",
            Benchmark::Lorenz => "Lorenz",
            Benchmark::LV4D => "LV4D",
            Benchmark::Duffing => "Duffing",
            Benchmark::Pendulum => "Pendulum",
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    /// Case-insensitive; `-` and `_` are ignored.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .flat_map(char::to_lowercase)
            .collect();
        Benchmark::ALL
            .into_iter()
            .find(|b| b.name().to_lowercase() == key)
            .ok_or_else(|| Error::UnknownSystem(s.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkSpec {
    pub system: Benchmark,
    /// Smallest library containing the true support.
    pub library: CandidateLibrary,
    pub theta: CoefficientMatrix,
    pub x0: Vec<f64>,
    /// Trajectories start at `t = 0` and run to `t = span`.
    pub span: f64,
    pub dist: TimeDistribution,
}

impl BenchmarkSpec {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// True coefficients expressed over another library; fails if that
    /// library lacks one of the active features.
    pub fn theta_in(&self, lib: &CandidateLibrary) -> Result<CoefficientMatrix> {
        lib.embed(&self.theta, &self.library)
    }
}

fn set(th: &mut CoefficientMatrix, lib: &CandidateLibrary, feature: &str, col: usize, v: f64) {
    let row = lib
        .index_of(feature)
        .unwrap_or_else(|| panic!("feature {feature} missing from truth library"));
    th.values_mut()[[row, col]] = v;
}

pub fn make_benchmark(system: Benchmark) -> BenchmarkSpec {
    let (spec, x0, span) = match system {
        Benchmark::Linear2D => (LibrarySpec::poly(1, 2), vec![2.0, 0.0], 10.0),
        Benchmark::Cubic2D => (LibrarySpec::poly(3, 2), vec![2.0, 0.0], 10.0),
        Benchmark::Linear3D => (LibrarySpec::poly(1, 3), vec![2.0, 0.0, -1.0], 10.0),
        Benchmark::Lorenz => (LibrarySpec::poly(2, 3), vec![10.0, -10.0, 20.0], 3.0),
        Benchmark::LV4D => (LibrarySpec::poly(2, 4), vec![1.0, 2.0, 2.0, 0.5], 11.0),
        Benchmark::Duffing => (LibrarySpec::poly(3, 2), vec![0.0, 2.0], 11.0),
        Benchmark::Pendulum => (LibrarySpec::poly(1, 2).with_trig(), vec![1.0, 0.1], 8.0),
    };
    let library = build_library(&spec);
    let mut th = CoefficientMatrix::zeros(library.len(), spec.dim);
    let lib = &library;
    match system {
        Benchmark::Linear2D | Benchmark::Cubic2D => {
            let (a, b) = if system == Benchmark::Linear2D {
                ("x1", "x2")
            } else {
                ("x1^3", "x2^3")
            };
            set(&mut th, lib, a, 0, -0.1);
            set(&mut th, lib, b, 0, 2.0);
            set(&mut th, lib, a, 1, -2.0);
            set(&mut th, lib, b, 1, -0.1);
        }
        Benchmark::Linear3D => {
            set(&mut th, lib, "x1", 0, -0.1);
            set(&mut th, lib, "x2", 0, 2.0);
            set(&mut th, lib, "x1", 1, -2.0);
            set(&mut th, lib, "x2", 1, -0.1);
            set(&mut th, lib, "x3", 2, -0.3);
        }
        Benchmark::Lorenz => {
            let (sigma, rho, beta) = (10.0, 28.0, 8.0 / 3.0);
            set(&mut th, lib, "x1", 0, -sigma);
            set(&mut th, lib, "x2", 0, sigma);
            set(&mut th, lib, "x1", 1, rho);
            set(&mut th, lib, "x2", 1, -1.0);
            set(&mut th, lib, "x1*x3", 1, -1.0);
            set(&mut th, lib, "x1*x2", 2, 1.0);
            set(&mut th, lib, "x3", 2, -beta);
        }
        Benchmark::LV4D => {
            let (a1, a2, b1, b2) = (1.0, 1.0, 3.0, 5.0);
            set(&mut th, lib, "x1", 0, a1);
            set(&mut th, lib, "x1*x2", 0, -b1);
            set(&mut th, lib, "x1*x2", 1, b1);
            set(&mut th, lib, "x2", 1, -2.0 * a1);
            set(&mut th, lib, "x3", 2, a2);
            set(&mut th, lib, "x3*x4", 2, -b2);
            set(&mut th, lib, "x3*x4", 3, b2);
            set(&mut th, lib, "x4", 3, -2.0 * a2);
        }
        Benchmark::Duffing => {
            let (alpha, gamma, rho, beta) = (1.0, 0.1, 0.2, 1.0);
            set(&mut th, lib, "x2", 0, alpha);
            set(&mut th, lib, "x1", 1, -gamma);
            set(&mut th, lib, "x2", 1, -rho);
            set(&mut th, lib, "x1^3", 1, -beta);
        }
        Benchmark::Pendulum => {
            let (alpha, beta) = (1.0, 1.0);
            set(&mut th, lib, "x2", 0, alpha);
            set(&mut th, lib, "sin(x1)", 1, beta);
        }
    }
    let dist = TimeDistribution::uniform(0.0, span).expect("positive span");
    BenchmarkSpec {
        system,
        library,
        theta: th,
        x0,
        span,
        dist,
    }
}

/// Parses `name` and builds the benchmark.
pub fn benchmark_by_name(name: &str) -> Result<BenchmarkSpec> {
    Ok(make_benchmark(name.parse()?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationPiece {
    /// One observation per row, in no particular order.
    pub points: Array2<f64>,
    pub x_init: Vec<f64>,
    pub t0: f64,
    pub span: f64,
    pub dist: TimeDistribution,
    /// Hidden labels, kept for evaluation only.
    pub true_times: Option<Vec<f64>>,
}

impl ObservationPiece {
    pub fn new(points: Array2<f64>, x_init: Vec<f64>, t0: f64, span: f64, dist: TimeDistribution) -> Result<Self> {
        let piece = ObservationPiece {
            points,
            x_init,
            t0,
            span,
            dist,
            true_times: None,
        };
        piece.validate()?;
        Ok(piece)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.nrows() < 2 {
            return Err(Error::Domain("an observation piece needs at least two points".into()));
        }
        if self.x_init.len() != self.points.ncols() {
            return Err(Error::Shape(format!(
                "x_init has length {}, points have {} columns",
                self.x_init.len(),
                self.points.ncols()
            )));
        }
        if self.x_init.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("x_init must be finite".into()));
        }
        if !(self.span > 0.0) || !self.t0.is_finite() {
            return Err(Error::Domain("piece window must be finite with positive length".into()));
        }
        if let Some(tt) = &self.true_times {
            if tt.len() != self.points.nrows() {
                return Err(Error::Shape("true_times length differs from number of points".into()));
            }
        }
        Ok(())
    }
}

/// Mean Euclidean norm of the rows.
pub fn mean_row_norm(x: &Array2<f64>) -> f64 {
    let n = x.nrows().max(1) as f64;
    x.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / n
}

/// States of the system at arbitrary instants inside `[t_start, ...)`,
/// returned in the order of `times`. Integration starts from `x_start` at
/// `t_start` with steps no longer than `max_step`.
pub fn states_at(
    lib: &CandidateLibrary,
    theta: &CoefficientMatrix,
    x_start: &[f64],
    t_start: f64,
    times: &[f64],
    max_step: f64,
) -> Result<Array2<f64>> {
    let d = x_start.len();
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut grid = vec![t_start];
    // slot[i] = grid index holding the state for times[i]
    let mut slot = vec![0usize; times.len()];
    for &i in &order {
        let t = times[i];
        if t < t_start {
            return Err(Error::Domain(format!("instant {t} precedes the start time {t_start}")));
        }
        if t > *grid.last().unwrap() {
            grid.push(t);
        }
        slot[i] = grid.len() - 1;
    }
    let mut out = Array2::zeros((times.len(), d));
    if grid.len() == 1 {
        out.rows_mut().into_iter().for_each(|mut r| r.iter_mut().zip(x_start).for_each(|(o, v)| *o = *v));
        return Ok(out);
    }
    let traj = rk4_solve(lib, theta, x_start, &SolveGrid::with_max_step(grid, 1, max_step)?, SolveOptions::default())?;
    for (i, &s) in slot.iter().enumerate() {
        out.row_mut(i).assign(&traj.states.row(s));
    }
    Ok(out)
}

/// Draws `n` instants from `dist`, evaluates the benchmark trajectory there
/// and adds Gaussian noise with standard deviation
/// `noise_ratio * mean_row_norm(clean)`.
pub fn synthesize(
    spec: &BenchmarkSpec,
    n: usize,
    dist: &TimeDistribution,
    noise_ratio: f64,
    seed: u64,
) -> Result<ObservationPiece> {
    if n < 2 {
        return Err(Error::Domain("need at least two observations".into()));
    }
    if !(noise_ratio >= 0.0) || !noise_ratio.is_finite() {
        return Err(Error::Domain(format!("noise ratio {noise_ratio} must be finite and >= 0")));
    }
    let (lo, hi) = dist.support();
    if lo < 0.0 {
        return Err(Error::Domain("observation instants must not precede t = 0".into()));
    }
    let times = dist.sample(n, seed);
    let max_step = spec.span / DATA_STEPS as f64;
    let mut points = states_at(&spec.library, &spec.theta, &spec.x0, 0.0, &times, max_step)?;
    let sigma = noise_ratio * mean_row_norm(&points);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
        let mut r = rng::rng_for(seed, &[rng::stream::DATA_NOISE]);
        points.iter_mut().for_each(|v| *v += normal.sample(&mut r));
    }
    let x_init = if lo == 0.0 {
        spec.x0.clone()
    } else {
        states_at(&spec.library, &spec.theta, &spec.x0, 0.0, &[lo], max_step)?.row(0).to_vec()
    };
    let mut piece = ObservationPiece::new(points, x_init, lo, hi - lo, dist.clone())?;
    piece.true_times = Some(times);
    Ok(piece)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    dim: usize,
    x_init: Vec<f64>,
    t0: f64,
    #[serde(rename = "T")]
    span: f64,
    dist: TimeDistribution,
}

/// `data/foo.csv` -> `data/foo.times.csv`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.times.csv"))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Points go to `path` (JSON header lines prefixed by `#`, then CSV);
/// hidden labels, if present, go to the sidecar.
pub fn write_dataset(piece: &ObservationPiece, path: &Path) -> Result<()> {
    piece.validate()?;
    let header = DatasetHeader {
        dim: piece.dim(),
        x_init: piece.x_init.clone(),
        t0: piece.t0,
        span: piece.span,
        dist: piece.dist.clone(),
    };
    let mut out = format!("# {}\n", serde_json::to_string(&header)?);
    let names: Vec<String> = (1..=piece.dim()).map(|k| format!("x{k}")).collect();
    out.push_str(&names.join(","));
    out.push('\n');
    for row in piece.points.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_file(path, &out)?;
    let side = sidecar_path(path);
    if let Some(tt) = &piece.true_times {
        let mut s = String::from("t\n");
        for t in tt {
            s.push_str(&t.to_string());
            s.push('\n');
        }
        write_file(&side, &s)?;
    } else if side.exists() {
        std::fs::remove_file(&side).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

fn parse_f64(path: &Path, line: usize, cell: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(path, line, format!("`{}` is not a number", cell.trim())))
}

pub fn read_dataset(path: &Path) -> Result<ObservationPiece> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut header_json = String::new();
    let mut header_line = 0;
    let mut columns: Option<usize> = None;
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if columns.is_some() {
                return Err(Error::parse(path, lineno, "header line after data"));
            }
            if header_line == 0 {
                header_line = lineno;
            }
            header_json.push_str(rest);
            continue;
        }
        if columns.is_none() {
            let names: Vec<&str> = line.split(',').map(str::trim).collect();
            for (k, name) in names.iter().enumerate() {
                if *name != format!("x{}", k + 1) {
                    return Err(Error::parse(path, lineno, format!("expected column x{}, found `{name}`", k + 1)));
                }
            }
            columns = Some(names.len());
            continue;
        }
        let d = columns.unwrap();
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d {
            return Err(Error::parse(path, lineno, format!("expected {d} values, found {}", cells.len())));
        }
        for c in cells {
            values.push(parse_f64(path, lineno, c)?);
        }
        rows += 1;
    }
    if header_line == 0 {
        return Err(Error::parse(path, 1, "missing `#` metadata header"));
    }
    let header: DatasetHeader =
        serde_json::from_str(&header_json).map_err(|e| Error::parse(path, header_line, e.to_string()))?;
    let d = columns.ok_or_else(|| Error::parse(path, header_line, "missing column header"))?;
    if header.dim != d || header.x_init.len() != d {
        return Err(Error::parse(
            path,
            header_line,
            format!(
                "header declares dim {} with x_init of length {}, data has {d} columns",
                header.dim,
                header.x_init.len()
            ),
        ));
    }
    let points = Array2::from_shape_vec((rows, d), values).map_err(|e| Error::Shape(e.to_string()))?;
    let mut piece = ObservationPiece::new(points, header.x_init, header.t0, header.span, header.dist)
        .map_err(|e| Error::parse(path, header_line, e.to_string()))?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let mut tt = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || (i == 0 && line == "t") {
                continue;
            }
            tt.push(parse_f64(&side, i + 1, line)?);
        }
        if tt.len() != rows {
            return Err(Error::parse(&side, 1, format!("{} labels for {rows} points", tt.len())));
        }
        piece.true_times = Some(tt);
        piece.validate()?;
    }
    Ok(piece)
}
