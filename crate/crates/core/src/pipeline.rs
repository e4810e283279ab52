//! End-to-end runs: configuration, presets and the staged orchestrator.
//!
//! A run directory holds every intermediate artifact, so each stage can be
//! reloaded and rerun on its own:
//!
//! ```text
//! config.json            canonical configuration
//! data.csv               observations (+ data.times.csv when labels are known)
//! pieces/                one file per piece + manifest.json
//! dm/theta.json          coefficients after distribution matching
//! dm/net_XX.json         surrogate checkpoints
//! dm/history.csv
//! dm/metrics.json
//! pi/theta.json          refined coefficients
//! pi/history.csv
//! labels.csv             piece,index,t_hat
//! trajectory.csv         t, estimated states [, true states]
//! report.json
//! ```

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{
    make_benchmark, read_dataset, states_at, synthesize, write_dataset, Benchmark, BenchmarkSpec, ObservationPiece,
    DATA_STEPS,
};
use crate::dictionary::{build_library, CandidateLibrary, CoefficientMatrix, LibrarySpec};
use crate::dmphase::{self, net_file_name, run_dm, DmConfig};
use crate::error::{Error, Result};
use crate::labeling::{
    build_report, e_para, e_time, eval_grid, piecewise_solution, reconstruct_times_surrogate, ReconstructionReport,
    ReportMeta,
};
use crate::piphase::{self, run_pi, PiConfig};
use crate::segmentation::{read_pieces, segment, write_pieces, Manifest, MANIFEST_FILE};
use crate::timedist::TimeDistribution;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Makes `dir` ready for fresh output. An existing non-empty directory is
/// only reused when `force` is set; its contents are then overwritten file
/// by file, not deleted.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let busy = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if busy && !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    create_dir(dir)
}

/// Refuses to replace an existing file unless `force` is set.
pub fn check_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

/// Where the observations come from: a benchmark system to simulate, or a
/// dataset file written by `write_dataset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<Benchmark>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub noise: f64,
    /// Observation distribution; the system's default (uniform on its
    /// horizon) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist: Option<TimeDistribution>,
}

fn default_n() -> usize {
    5000
}

fn default_grid() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub clusters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

/// Everything a run needs. The `seed` fields inside `dm` and `pi` are
/// replaced by the global `seed`, so one number fixes every random stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub library: LibrarySpec,
    pub segmentation: SegmentConfig,
    #[serde(default)]
    pub dm: DmConfig,
    #[serde(default)]
    pub pi: PiConfig,
    #[serde(default = "default_grid")]
    pub eval_grid: usize,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (&self.data.system, &self.data.dataset) {
            (Some(_), Some(_)) | (None, None) => return bad("data: give exactly one of `system` and `dataset`".into()),
            (Some(sys), None) => {
                let d = make_benchmark(*sys).dim();
                if self.library.dim != d {
                    return bad(format!("library dimension {} does not match {sys} (d = {d})", self.library.dim));
                }
                if self.data.n < 2 {
                    return bad("data: need n >= 2".into());
                }
                if !(self.data.noise >= 0.0 && self.data.noise.is_finite()) {
                    return bad("data: noise must be finite and >= 0".into());
                }
            }
            (None, Some(_)) => {}
        }
        if self.segmentation.clusters == 0 {
            return bad("segmentation: need clusters >= 1".into());
        }
        if let Some(r) = self.segmentation.radius {
            if !(r > 0.0 && r.is_finite()) {
                return bad("segmentation: radius must be positive".into());
            }
        }
        if self.eval_grid < 2 {
            return bad("eval_grid must be >= 2".into());
        }
        self.dm.validate()?;
        self.pi.validate()
    }

    /// Configuration with the global seed pushed into both phases.
    fn seeded(&self) -> (DmConfig, PiConfig) {
        let mut dm = self.dm.clone();
        let mut pi = self.pi.clone();
        dm.seed = self.seed;
        pi.seed = self.seed;
        (dm, pi)
    }

    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// SHA-256 of the canonical JSON with `out_dir` blanked, hex encoded.
    /// Where a run is written does not change what it computes.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.canonical_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Per-system settings shared by the desk and full-scale presets.
struct Row {
    name: &'static str,
    system: Benchmark,
    full_library: LibrarySpec,
    desk_library: LibrarySpec,
    threshold: f64,
    lr: f64,
    lambda_reg: f64,
}

fn rows() -> Vec<Row> {
    let p3 = |d| LibrarySpec::poly(3, d);
    vec![
        Row {
            name: "linear2d",
            system: Benchmark::Linear2D,
            full_library: p3(2).with_exp(),
            desk_library: p3(2),
            threshold: 0.04,
            lr: 3e-4,
            lambda_reg: 1e-3,
        },
        Row {
            name: "cubic2d",
            system: Benchmark::Cubic2D,
            full_library: p3(2).with_exp(),
            desk_library: p3(2),
            threshold: 0.06,
            lr: 6e-4,
            lambda_reg: 3e-5,
        },
        Row {
            name: "linear3d",
            system: Benchmark::Linear3D,
            full_library: p3(3).with_exp(),
            desk_library: p3(3),
            threshold: 0.04,
            lr: 3e-4,
            lambda_reg: 1e-3,
        },
        Row {
            name: "lorenz",
            system: Benchmark::Lorenz,
            full_library: p3(3).with_exp(),
            desk_library: p3(3),
            threshold: 0.04,
            lr: 3e-4,
            lambda_reg: 3e-5,
        },
        Row {
            name: "lv4d",
            system: Benchmark::LV4D,
            full_library: LibrarySpec::poly(2, 4).with_exp(),
            desk_library: LibrarySpec::poly(2, 4),
            threshold: 0.045,
            lr: 6e-4,
            lambda_reg: 3e-4,
        },
        Row {
            name: "duffing",
            system: Benchmark::Duffing,
            full_library: p3(2).with_exp(),
            desk_library: p3(2),
            threshold: 0.04,
            lr: 3e-4,
            lambda_reg: 3e-4,
        },
        Row {
            name: "pendulum",
            system: Benchmark::Pendulum,
            full_library: p3(2).with_trig(),
            desk_library: p3(2).with_trig(),
            threshold: 0.04,
            lr: 3e-4,
            lambda_reg: 3e-4,
        },
        Row {
            name: "pendulum-poly3",
            system: Benchmark::Pendulum,
            full_library: p3(2),
            desk_library: p3(2),
            threshold: 0.02,
            lr: 3e-4,
            lambda_reg: 3e-4,
        },
    ]
}

/// Names accepted by [`preset`]: `<row>-desk` and `<row>-full`.
pub fn preset_names() -> Vec<String> {
    rows()
        .iter()
        .flat_map(|r| [format!("{}-desk", r.name), format!("{}-full", r.name)])
        .collect()
}

/// Shipped configurations. `-full` variants follow the published settings
/// (50,000 samples, 5x500 networks); `-desk` variants shrink the sample
/// count, the networks and the iteration budget so a run takes minutes on
/// one CPU core.
pub fn preset(name: &str) -> Result<RunConfig> {
    let (row_name, desk) = if let Some(r) = name.strip_suffix("-desk") {
        (r, true)
    } else if let Some(r) = name.strip_suffix("-full") {
        (r, false)
    } else {
        return Err(Error::Config(format!("unknown preset `{name}`")));
    };
    let row = rows()
        .into_iter()
        .find(|r| r.name == row_name)
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
    let n = match (desk, row.system) {
        (true, Benchmark::Lorenz) => 10_000,
        (true, _) => 5000,
        (false, _) => 50_000,
    };
    let dm = DmConfig {
        iters: if desk { 6000 } else { 10_000 },
        iters_phase1: if desk { 2000 } else { 3000 },
        threshold: row.threshold,
        lr: row.lr,
        lambda_init: 0.5,
        lambda_reg: row.lambda_reg,
        hidden_layers: if desk { 4 } else { 5 },
        width: if desk { 64 } else { 500 },
        ..DmConfig::default()
    };
    let pi = PiConfig {
        iters: if desk { 4000 } else { 5000 },
        iters_1: if desk { 2000 } else { 2500 },
        threshold: row.threshold,
        lr: if desk { 3e-3 } else { row.lr },
        ..PiConfig::default()
    };
    Ok(RunConfig {
        data: DataConfig {
            system: Some(row.system),
            dataset: None,
            n,
            noise: 0.0,
            dist: None,
        },
        library: if desk { row.desk_library } else { row.full_library },
        segmentation: SegmentConfig {
            clusters: 10,
            radius: None,
        },
        dm,
        pi,
        eval_grid: 2000,
        out_dir: PathBuf::from(format!("runs/{name}")),
        seed: 0,
    })
}

/// Distribution-matching metrics, computed from the surrogate networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmMetrics {
    pub e_para: Option<f64>,
    /// Labels obtained by projecting onto the surrogate outputs.
    pub e_time_surrogate: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub data: ObservationPiece,
    pub pieces: Vec<ObservationPiece>,
    pub dm_theta: CoefficientMatrix,
    pub dm_metrics: DmMetrics,
    pub pi_theta: CoefficientMatrix,
    pub report: ReconstructionReport,
}

/// Paths inside a run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data.csv")
    }
    pub fn pieces(&self) -> PathBuf {
        self.root.join("pieces")
    }
    pub fn manifest(&self) -> PathBuf {
        self.pieces().join(MANIFEST_FILE)
    }
    pub fn dm(&self) -> PathBuf {
        self.root.join("dm")
    }
    pub fn pi(&self) -> PathBuf {
        self.root.join("pi")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.csv")
    }
    pub fn trajectory(&self) -> PathBuf {
        self.root.join("trajectory.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn landscape(&self) -> PathBuf {
        self.root.join("landscape.csv")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Known ground truth for a simulated run: coefficients over the run's
/// library (if it can express them) and the reference solution.
struct Truth {
    theta: Option<CoefficientMatrix>,
    times: Vec<f64>,
    states: Array2<f64>,
}

fn truth_for(spec: &BenchmarkSpec, lib: &CandidateLibrary, lo: f64, hi: f64, grid: usize) -> Result<Truth> {
    let times = eval_grid(lo, hi, grid);
    let states = states_at(&spec.library, &spec.theta, &spec.x0, 0.0, &times, spec.span / DATA_STEPS as f64)?;
    Ok(Truth {
        theta: spec.theta_in(lib).ok(),
        times,
        states,
    })
}

/// Writes `piece,index,t_hat` rows; `index` is the row in the segmented
/// dataset.
pub fn write_labels(path: &Path, manifest: &Manifest, labels: &[Vec<f64>]) -> Result<()> {
    let mut out = String::from("piece,index,t_hat\n");
    for (l, (entry, lab)) in manifest.pieces.iter().zip(labels).enumerate() {
        if entry.rows.len() != lab.len() {
            return Err(Error::Shape(format!("piece {l}: {} rows but {} labels", entry.rows.len(), lab.len())));
        }
        for (row, t) in entry.rows.iter().zip(lab) {
            out.push_str(&format!("{l},{row},{t}\n"));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `labels.csv` back as `(piece, index, t_hat)` triples.
pub fn read_labels(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "piece,index,t_hat" => {}
        _ => return Err(Error::parse(path, 1, "expected header `piece,index,t_hat`")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::parse(path, i + 1, format!("malformed row `{line}`"));
        if cells.len() != 3 {
            return Err(bad());
        }
        out.push((
            cells[0].parse().map_err(|_| bad())?,
            cells[1].parse().map_err(|_| bad())?,
            cells[2].parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

/// Reads a one-column `t` file such as `data.times.csv`.
pub fn read_times(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "t" => {}
        _ => return Err(Error::parse(path, 1, "expected header `t`")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("`{}` is not a number", l.trim())))
        })
        .collect()
}

/// `t, xhat1.., [x1..]` on the evaluation grid.
pub fn write_trajectory(path: &Path, times: &[f64], est: &Array2<f64>, truth: Option<&Array2<f64>>) -> Result<()> {
    let d = est.ncols();
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=d).map(|k| format!("xhat{k}")));
    if truth.is_some() {
        cols.extend((1..=d).map(|k| format!("x{k}")));
    }
    let mut out = cols.join(",");
    out.push('\n');
    for (i, t) in times.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(est.row(i).iter().map(|v| v.to_string()));
        if let Some(tr) = truth {
            row.extend(tr.row(i).iter().map(|v| v.to_string()));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs every stage, writing artifacts under `cfg.out_dir`. The output
/// directory must be empty or absent unless `force` is set.
pub fn run_pipeline(cfg: &RunConfig, force: bool) -> Result<PipelineOutcome> {
    stage("config", cfg.validate())?;
    let layout = RunLayout::new(&cfg.out_dir);
    stage("config", prepare_output_dir(&layout.root, force))?;
    stage("config", write_json(&layout.config(), cfg))?;
    let (dm_cfg, pi_cfg) = cfg.seeded();
    let lib = build_library(&cfg.library);

    let spec = cfg.data.system.map(make_benchmark);
    let data = stage("generate", || -> Result<ObservationPiece> {
        let data = match (&spec, &cfg.data.dataset) {
            (Some(spec), _) => {
                let dist = cfg.data.dist.clone().unwrap_or_else(|| spec.dist.clone());
                synthesize(spec, cfg.data.n, &dist, cfg.data.noise, cfg.seed)?
            }
            (None, Some(path)) => read_dataset(path)?,
            (None, None) => unreachable!("validated"),
        };
        if data.dim() != lib.dim() {
            return Err(Error::Config(format!("data has dimension {}, library {}", data.dim(), lib.dim())));
        }
        write_dataset(&data, &layout.data())?;
        Ok(data)
    }())?;

    let (manifest, pieces) = stage("segment", || -> Result<(Manifest, Vec<ObservationPiece>)> {
        let seg = segment(&data, cfg.segmentation.clusters, cfg.segmentation.radius, cfg.seed)?;
        let path = write_pieces(&seg, &layout.pieces())?;
        read_pieces(&path)
    }())?;

    let (lo, hi) = data.dist.support();
    let truth = match &spec {
        Some(s) => Some(stage("evaluate", truth_for(s, &lib, lo, hi, cfg.eval_grid))?),
        None => None,
    };

    let dm = stage("fit-dm", || -> Result<dmphase::DmResult> {
        let dir = layout.dm();
        create_dir(&dir)?;
        let res = run_dm(&pieces, &lib, &dm_cfg)?;
        res.theta.save_json(&lib, &dir.join("theta.json"))?;
        for (l, net) in res.nets.iter().enumerate() {
            net.save(&dir.join(net_file_name(l)))?;
        }
        dmphase::write_history_csv(&res.history, &dir.join("history.csv"))?;
        Ok(res)
    }())?;
    let dm_metrics = stage("fit-dm", || -> Result<DmMetrics> {
        let e_time_surrogate = if pieces.iter().all(|p| p.true_times.is_some()) {
            let mut hat = Vec::new();
            let mut tt = Vec::new();
            for (p, net) in pieces.iter().zip(&dm.nets) {
                hat.extend(reconstruct_times_surrogate(p, net, cfg.eval_grid)?);
                tt.extend(p.true_times.clone().unwrap_or_default());
            }
            Some(e_time(&hat, &tt)?)
        } else {
            None
        };
        let e = match truth.as_ref().and_then(|t| t.theta.as_ref()) {
            Some(th) => Some(e_para(&dm.theta, th)?),
            None => None,
        };
        let m = DmMetrics {
            e_para: e,
            e_time_surrogate,
        };
        write_json(&layout.dm().join("metrics.json"), &m)?;
        Ok(m)
    }())?;

    let pi = stage("fit-pi", || -> Result<piphase::PiResult> {
        let dir = layout.pi();
        create_dir(&dir)?;
        let res = run_pi(&pieces, &lib, &dm.theta, &pi_cfg)?;
        res.theta.save_json(&lib, &dir.join("theta.json"))?;
        piphase::write_history_csv(&res.history, &dir.join("history.csv"))?;
        Ok(res)
    }())?;

    let meta = ReportMeta {
        seed: cfg.seed,
        config_hash: stage("evaluate", cfg.hash())?,
        grid: cfg.eval_grid,
    };
    let report = stage("reconstruct", || -> Result<ReconstructionReport> {
        let truth_arg = truth
            .as_ref()
            .and_then(|t| t.theta.as_ref().map(|th| (th, t.times.as_slice(), t.states.view())));
        let report = build_report(&pieces, &lib, &pi.theta, cfg.eval_grid, truth_arg, meta)?;
        write_labels(&layout.labels(), &manifest, &report.labels)?;
        Ok(report)
    }())?;
    stage("evaluate", || -> Result<()> {
        let times = match &truth {
            Some(t) => t.times.clone(),
            None => eval_grid(lo, hi, cfg.eval_grid),
        };
        let est = piecewise_solution(&pieces, &lib, &pi.theta, &times)?;
        write_trajectory(&layout.trajectory(), &times, &est, truth.as_ref().map(|t| &t.states))?;
        write_json(&layout.report(), &report)
    }())?;

    Ok(PipelineOutcome {
        data,
        pieces,
        dm_theta: dm.theta,
        dm_metrics,
        pi_theta: pi.theta,
        report,
    })
}
