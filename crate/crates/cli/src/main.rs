//! `tlrecon`: command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric
//! failure, 4 segmentation or ordering failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tlrecon::datagen::{make_benchmark, read_dataset, synthesize, write_dataset, Benchmark};
use tlrecon::dictionary::{build_library, CandidateLibrary, CoefficientMatrix, LibrarySpec, ThetaFile};
use tlrecon::dmphase::{self, net_file_name, run_dm, DmConfig};
use tlrecon::labeling::{
    e_para, e_time, eval_grid, piecewise_solution, reconstruct_times, rmae_solution,
    ReconstructionReport, ReportMeta,
};
use tlrecon::piphase::{self, loss_landscape, run_pi, PiConfig, ScanAxis};
use tlrecon::pipeline::{
    check_writable, preset, preset_names, prepare_output_dir, read_json, read_labels, read_times, run_pipeline,
    write_json, write_labels, RunConfig,
};
use tlrecon::plots::emit_plots;
use tlrecon::segmentation::{read_pieces, segment, write_pieces, MANIFEST_FILE};
use tlrecon::timedist::TimeDistribution;
use tlrecon::{Error, Result};

#[derive(Parser)]
#[command(name = "tlrecon", version, about = "Identify ODE systems and recover time labels from unlabeled samples")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistKind {
    /// Uniform on [0, T].
    Uniform,
    /// Normal(T/2, (T/3)^2) truncated to [0, T].
    Truncnormal,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a benchmark system and write an unlabeled dataset.
    Generate {
        #[arg(long)]
        system: String,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, value_enum, default_value = "uniform")]
        dist: DistKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; receives data.csv and data.times.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Split a dataset into ordered trajectory pieces.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        clusters: usize,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Distribution-matching phase: surrogate networks plus STRidge.
    FitDm {
        #[arg(long)]
        pieces: PathBuf,
        #[arg(long)]
        library: PathBuf,
        /// DmConfig JSON; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Parameter-identification phase: refine coefficients through the solver.
    FitPi {
        #[arg(long)]
        pieces: PathBuf,
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        theta0: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Label every sample by projection onto the identified trajectory.
    Reconstruct {
        #[arg(long)]
        pieces: PathBuf,
        #[arg(long)]
        theta: PathBuf,
        /// Library JSON; inferred from the feature names in the theta file when absent.
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compare labels (and optionally coefficients) with the truth.
    Evaluate {
        #[arg(long)]
        labels: PathBuf,
        /// One-column `t` file aligned with the segmented dataset.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Benchmark whose true coefficients and solution give e_para and rmae.
        #[arg(long, requires_all = ["theta", "pieces"])]
        system: Option<String>,
        #[arg(long)]
        theta: Option<PathBuf>,
        #[arg(long)]
        pieces: Option<PathBuf>,
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        grid: usize,
        #[arg(long)]
        force: bool,
    },
    /// Transport loss over a grid of two coefficients of a linear or cubic
    /// benchmark. `--i 0,1` is the entry A12: equation 1, variable x2.
    Landscape {
        #[arg(long)]
        system: String,
        #[arg(long)]
        i: String,
        #[arg(long)]
        j: String,
        #[arg(long, default_value = "-3,3", allow_hyphen_values = true)]
        range: String,
        /// Range of the second axis; `--range` when absent.
        #[arg(long, allow_hyphen_values = true)]
        range_j: Option<String>,
        #[arg(long, default_value_t = 61)]
        res: usize,
        /// Observation horizon; the system's own when absent.
        #[arg(long)]
        span: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run every stage from one configuration file or preset.
    Run {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Write plot tables and SVGs for a finished run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
    /// List the shipped presets, or print one as JSON.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Anchoring { .. } | Error::Ordering { .. } | Error::DegeneratePiece { .. } => 4,
        Error::NumericOverflow { .. }
        | Error::BlowUp { .. }
        | Error::Regression(_)
        | Error::DegenerateModel
        | Error::NonFiniteLoss { .. }
        | Error::UndefinedMetric(_) => 3,
        _ => 2,
    }
}

fn load_library(path: &Path) -> Result<CandidateLibrary> {
    let spec: LibrarySpec = read_json(path)?;
    Ok(build_library(&spec))
}

/// Smallest standard library whose feature names equal `names`.
fn infer_library(names: &[String], dim: usize) -> Result<CandidateLibrary> {
    for order in 0..=6 {
        for flags in 0..8u8 {
            let spec = LibrarySpec {
                poly_order: order,
                include_exp: flags & 1 != 0,
                include_sin: flags & 2 != 0,
                include_cos: flags & 4 != 0,
                dim,
            };
            if spec.size() != names.len() {
                continue;
            }
            let lib = build_library(&spec);
            if lib.names() == names {
                return Ok(lib);
            }
        }
    }
    Err(Error::Config("cannot infer the library from the theta file; pass --library".into()))
}

fn load_theta(path: &Path, lib: Option<&Path>) -> Result<(CandidateLibrary, CoefficientMatrix)> {
    let file: ThetaFile = read_json(path)?;
    let dim = file.theta.first().map(Vec::len).unwrap_or(0);
    let lib = match lib {
        Some(p) => load_library(p)?,
        None => infer_library(&file.names, dim)?,
    };
    let theta = CoefficientMatrix::from_file(&file, &lib)?;
    Ok((lib, theta))
}

fn manifest_in(dir: &Path) -> PathBuf {
    if dir.is_dir() {
        dir.join(MANIFEST_FILE)
    } else {
        dir.to_path_buf()
    }
}

fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("expected two comma-separated numbers, got `{s}`"));
    if parts.len() != 2 {
        return Err(bad());
    }
    Ok((parts[0].parse().map_err(|_| bad())?, parts[1].parse().map_err(|_| bad())?))
}

fn parse_entry(s: &str) -> Result<(usize, usize)> {
    let (a, b) = parse_pair(s)?;
    if a < 0.0 || b < 0.0 || a.fract() != 0.0 || b.fract() != 0.0 {
        return Err(Error::Config(format!("`{s}` is not a pair of indices")));
    }
    Ok((a as usize, b as usize))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate {
            system,
            n,
            noise,
            dist,
            seed,
            out,
            force,
        } => {
            let spec = make_benchmark(system.parse::<Benchmark>()?);
            let t = spec.span;
            let dist = match dist {
                DistKind::Uniform => spec.dist.clone(),
                DistKind::Truncnormal => TimeDistribution::truncated_normal(t / 2.0, t / 3.0, 0.0, t)?,
            };
            prepare_output_dir(&out, force)?;
            let data = synthesize(&spec, n, &dist, noise, seed)?;
            write_dataset(&data, &out.join("data.csv"))?;
            println!("wrote {} samples of {} to {}", n, spec.system, out.join("data.csv").display());
        }
        Cmd::Segment {
            input,
            clusters,
            radius,
            seed,
            out,
            force,
        } => {
            let data = read_dataset(&input)?;
            prepare_output_dir(&out, force)?;
            let seg = segment(&data, clusters, radius, seed)?;
            let path = write_pieces(&seg, &out)?;
            println!("{} pieces, radius {:.4e}; manifest {}", seg.pieces.len(), seg.radius, path.display());
        }
        Cmd::FitDm {
            pieces,
            library,
            config,
            out,
            force,
        } => {
            let lib = load_library(&library)?;
            let cfg: DmConfig = match config {
                Some(p) => read_json(&p)?,
                None => DmConfig::default(),
            };
            cfg.validate()?;
            let (_, pieces) = read_pieces(&manifest_in(&pieces))?;
            check_writable(&out.join("theta.json"), force)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let res = run_dm(&pieces, &lib, &cfg)?;
            res.theta.save_json(&lib, &out.join("theta.json"))?;
            for (l, net) in res.nets.iter().enumerate() {
                net.save(&out.join(net_file_name(l)))?;
            }
            dmphase::write_history_csv(&res.history, &out.join("dm_history.csv"))?;
            for line in res.theta.describe(&lib) {
                println!("{line}");
            }
        }
        Cmd::FitPi {
            pieces,
            library,
            theta0,
            config,
            out,
            force,
        } => {
            let lib = load_library(&library)?;
            let theta0 = CoefficientMatrix::load_json(&lib, &theta0)?;
            let cfg: PiConfig = match config {
                Some(p) => read_json(&p)?,
                None => PiConfig::default(),
            };
            cfg.validate()?;
            let (_, pieces) = read_pieces(&manifest_in(&pieces))?;
            check_writable(&out.join("theta_pi.json"), force)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let res = run_pi(&pieces, &lib, &theta0, &cfg)?;
            res.theta.save_json(&lib, &out.join("theta_pi.json"))?;
            piphase::write_history_csv(&res.history, &out.join("pi_history.csv"))?;
            for line in res.theta.describe(&lib) {
                println!("{line}");
            }
            if res.blowup_steps > 0 {
                eprintln!("{} steps hit a solver blow-up", res.blowup_steps);
            }
        }
        Cmd::Reconstruct {
            pieces,
            theta,
            library,
            grid,
            out,
            force,
        } => {
            if grid < 2 {
                return Err(Error::Config("--grid must be >= 2".into()));
            }
            let (lib, theta) = load_theta(&theta, library.as_deref())?;
            let (manifest, pieces) = read_pieces(&manifest_in(&pieces))?;
            check_writable(&out, force)?;
            let labels = pieces
                .iter()
                .map(|p| reconstruct_times(p, &lib, &theta, grid))
                .collect::<Result<Vec<_>>>()?;
            write_labels(&out, &manifest, &labels)?;
            println!("labelled {} samples", labels.iter().map(Vec::len).sum::<usize>());
        }
        Cmd::Evaluate {
            labels,
            truth,
            report,
            system,
            theta,
            pieces,
            library,
            grid,
            force,
        } => {
            check_writable(&report, force)?;
            let rows = read_labels(&labels)?;
            let tt = read_times(&truth)?;
            let mut t_hat = Vec::with_capacity(rows.len());
            let mut t_true = Vec::with_capacity(rows.len());
            let mut per_piece: Vec<Vec<f64>> = Vec::new();
            for &(piece, idx, t) in &rows {
                let truth_t = *tt
                    .get(idx)
                    .ok_or_else(|| Error::Shape(format!("label index {idx} is past the end of {}", truth.display())))?;
                t_hat.push(t);
                t_true.push(truth_t);
                if per_piece.len() <= piece {
                    per_piece.resize(piece + 1, Vec::new());
                }
                per_piece[piece].push(t);
            }
            let et = e_time(&t_hat, &t_true)?;
            let mut out = ReconstructionReport {
                library: Vec::new(),
                theta: Vec::new(),
                support: Vec::new(),
                labels: per_piece,
                e_para: None,
                rmae_solution: None,
                e_time: Some(et),
                abs_errors: t_hat.iter().zip(&t_true).map(|(a, b)| (a - b).abs()).collect(),
                meta: ReportMeta {
                    seed: 0,
                    config_hash: String::new(),
                    grid,
                },
            };
            if let (Some(sys), Some(theta), Some(pieces)) = (system, theta, pieces) {
                let spec = make_benchmark(sys.parse::<Benchmark>()?);
                let (lib, th) = load_theta(&theta, library.as_deref())?;
                let (_, pieces) = read_pieces(&manifest_in(&pieces))?;
                let truth_th = spec.theta_in(&lib)?;
                let times = eval_grid(0.0, spec.span, grid);
                let reference = tlrecon::datagen::states_at(
                    &spec.library,
                    &spec.theta,
                    &spec.x0,
                    0.0,
                    &times,
                    spec.span / tlrecon::datagen::DATA_STEPS as f64,
                )?;
                let est = piecewise_solution(&pieces, &lib, &th, &times)?;
                out.library = lib.names().to_vec();
                out.theta = th.values().rows().into_iter().map(|r| r.to_vec()).collect();
                out.support = th.support();
                out.e_para = Some(e_para(&th, &truth_th)?);
                out.rmae_solution = Some(rmae_solution(est.view(), reference.view())?);
            }
            write_json(&report, &out)?;
            println!("e_time {et:.6}");
            if let Some(v) = out.e_para {
                println!("e_para {v:.6}");
            }
            if let Some(v) = out.rmae_solution {
                println!("rmae_solution {v:.6}");
            }
        }
        Cmd::Landscape {
            system,
            i,
            j,
            range,
            range_j,
            res,
            span,
            n,
            seed,
            out,
            force,
        } => {
            let spec = make_benchmark(system.parse::<Benchmark>()?);
            let power = match spec.system {
                Benchmark::Linear2D | Benchmark::Linear3D => 1,
                Benchmark::Cubic2D => 3,
                other => {
                    return Err(Error::Config(format!(
                        "landscape axes are A-matrix entries; {other} is not of the form dx/dt = A x^p"
                    )))
                }
            };
            let entry = |s: &str| -> Result<(usize, usize)> {
                let (eq, var) = parse_entry(s)?;
                let d = spec.dim();
                if eq >= d || var >= d {
                    return Err(Error::Config(format!("entry {s} outside the {d}x{d} matrix")));
                }
                let name = if power == 1 {
                    format!("x{}", var + 1)
                } else {
                    format!("x{}^{power}", var + 1)
                };
                let row = spec.library.index_of(&name).expect("feature present in the truth library");
                Ok((row, eq))
            };
            let r0 = parse_pair(&range)?;
            let r1 = match range_j {
                Some(r) => parse_pair(&r)?,
                None => r0,
            };
            let axes = [
                ScanAxis {
                    entry: entry(&i)?,
                    range: r0,
                },
                ScanAxis {
                    entry: entry(&j)?,
                    range: r1,
                },
            ];
            let t = span.unwrap_or(spec.span);
            check_writable(&out, force)?;
            let data = synthesize(&spec, n, &TimeDistribution::uniform(0.0, t)?, 0.0, seed)?;
            let cfg = PiConfig {
                seed,
                ..PiConfig::default()
            };
            let land = loss_landscape(&[data], &spec.library, &spec.theta, axes, res, &cfg)?;
            land.write_csv(&out)?;
            let flagged = land.blowup.iter().filter(|&&b| b).count();
            println!("{} cells, {flagged} blow-ups; minimum at {:?}", res * res, land.argmin());
        }
        Cmd::Run {
            config,
            preset: name,
            out,
            seed,
            force,
        } => {
            let mut cfg = match (config, name) {
                (Some(p), _) => RunConfig::load(&p)?,
                (None, Some(n)) => preset(&n)?,
                (None, None) => unreachable!("clap requires one"),
            };
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let res = run_pipeline(&cfg, force)?;
            let show = |v: Option<f64>| v.map(|x| format!("{:.4}%", 100.0 * x)).unwrap_or_else(|| "n/a".into());
            println!("dm: e_para {}  e_time(surrogate) {}", show(res.dm_metrics.e_para), show(res.dm_metrics.e_time_surrogate));
            println!(
                "pi: e_para {}  e_time {}  rmae_solution {}",
                show(res.report.e_para),
                show(res.report.e_time),
                show(res.report.rmae_solution)
            );
            let lib = build_library(&cfg.library);
            for line in res.pi_theta.describe(&lib) {
                println!("{line}");
            }
            println!("artifacts in {}", cfg.out_dir.display());
        }
        Cmd::Plot { run } => {
            for p in emit_plots(&run)? {
                println!("{}", p.display());
            }
        }
        Cmd::Presets { show } => match show {
            Some(name) => println!("{}", serde_json::to_string_pretty(&preset(&name)?)?),
            None => preset_names().iter().for_each(|n| println!("{n}")),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
