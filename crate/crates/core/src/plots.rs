//! Plot data for a finished run: CSV tables plus bare-bones SVG renderings.
//!
//! CSV is always written. The SVGs are deliberately plain (polylines and a
//! rectangle heatmap, no axes library) and exist for a quick look.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{read_labels, read_times, RunLayout};

/// Numeric CSV with a header row. Cells must parse as `f64`.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header: Vec<String> = match lines.next() {
            Some((_, h)) => h.split(',').map(|c| c.trim().to_string()).collect(),
            None => return Err(Error::parse(path, 1, "empty file")),
        };
        let mut rows = Vec::new();
        for (i, line) in lines {
            let row = line
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::parse(path, i + 1, format!("`{}` is not a number", c.trim())))
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != header.len() {
                return Err(Error::parse(path, i + 1, format!("expected {} cells", header.len())));
            }
            rows.push(row);
        }
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 40.0;
const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn bounds(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return None;
    }
    Some(if hi - lo < 1e-300 { (lo - 0.5, hi + 0.5) } else { (lo, hi) })
}

/// Line chart of several `(x, y)` series sharing one frame. Non-finite
/// points are skipped.
pub fn line_svg(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let all = || series.iter().flat_map(|(_, s)| s.iter().copied());
    let bx = bounds(all().map(|p| p.0)).unwrap_or((0.0, 1.0));
    let by = bounds(all().map(|p| p.1)).unwrap_or((0.0, 1.0));
    let sx = |x: f64| PAD + (x - bx.0) / (bx.1 - bx.0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - by.0) / (by.1 - by.0) * (H - 2.0 * PAD);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n");
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{PAD}\" y=\"20\" font-size=\"14\">{title}</text>");
    let _ = writeln!(
        s,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{}\" font-size=\"10\">x: [{:.4e}, {:.4e}]  y: [{:.4e}, {:.4e}]</text>",
        H - 10.0,
        bx.0,
        bx.1,
        by.0,
        by.1
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1\" points=\"{}\"/>",
            path.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{colour}\">{name}</text>",
            W - PAD - 120.0,
            PAD + 14.0 * (k + 1) as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of `value[i][j]`; NaN cells are drawn black.
pub fn heatmap_svg(title: &str, n_i: usize, n_j: usize, value: impl Fn(usize, usize) -> f64) -> String {
    let b = bounds((0..n_i * n_j).map(|c| value(c / n_j, c % n_j))).unwrap_or((0.0, 1.0));
    let cw = (W - 2.0 * PAD) / n_i as f64;
    let ch = (H - 2.0 * PAD) / n_j as f64;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n");
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{PAD}\" y=\"20\" font-size=\"14\">{title}</text>");
    for i in 0..n_i {
        for j in 0..n_j {
            let v = value(i, j);
            let fill = if v.is_finite() {
                let u = (v - b.0) / (b.1 - b.0);
                let r = (255.0 * u) as u8;
                let g = (255.0 * (1.0 - (2.0 * u - 1.0).abs())) as u8;
                let bl = (255.0 * (1.0 - u)) as u8;
                format!("rgb({r},{g},{bl})")
            } else {
                "black".to_string()
            };
            // axis 0 runs left to right, axis 1 bottom to top
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>",
                PAD + i as f64 * cw,
                H - PAD - (j + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05
            );
        }
    }
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{}\" font-size=\"10\">range [{:.4e}, {:.4e}], black = blow-up</text>",
        H - 10.0,
        b.0,
        b.1
    );
    s.push_str("</svg>\n");
    s
}

fn write(path: PathBuf, body: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    out.push(path);
    Ok(())
}

fn loss_plot(hist: &Path, csv: PathBuf, svg: PathBuf, title: &str, y: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let t = Table::read(hist)?;
    t.write(&csv)?;
    out.push(csv);
    let it = t.column("iter").unwrap_or_default();
    let v = t.column(y).unwrap_or_default();
    let pts: Vec<(f64, f64)> = it.iter().zip(&v).map(|(&a, &b)| (a, b.log10())).collect();
    write(svg, &line_svg(&format!("{title}: log10 {y}"), &[(y, pts)]), out)
}

/// Writes plot tables and SVGs into `<run>/plots` and returns the files
/// written. Loss histories, the trajectory table and the labels are
/// required; label errors need `data.times.csv`, and the heatmap needs a
/// `landscape.csv` in the run directory.
pub fn emit_plots(run: &Path) -> Result<Vec<PathBuf>> {
    let lay = RunLayout::new(run);
    let required = [
        lay.dm().join("history.csv"),
        lay.pi().join("history.csv"),
        lay.trajectory(),
        lay.labels(),
    ];
    if let Some(missing) = required.iter().find(|p| !p.exists()) {
        return Err(Error::MissingArtifact(missing.clone()));
    }
    let dir = lay.plots();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = Vec::new();

    loss_plot(&required[0], dir.join("dm_loss.csv"), dir.join("dm_loss.svg"), "distribution matching", "total", &mut out)?;
    loss_plot(&required[1], dir.join("pi_loss.csv"), dir.join("pi_loss.svg"), "parameter identification", "loss", &mut out)?;

    let traj = Table::read(&lay.trajectory())?;
    traj.write(&dir.join("trajectory.csv"))?;
    out.push(dir.join("trajectory.csv"));
    let pair = |a: &str, b: &str| -> Option<Vec<(f64, f64)>> {
        Some(traj.column(a)?.into_iter().zip(traj.column(b)?).collect())
    };
    let mut series = Vec::new();
    // phase plane when d >= 2, otherwise x1 against t
    let (xa, ya, xb, yb) = if traj.column("xhat2").is_some() {
        ("xhat1", "xhat2", "x1", "x2")
    } else {
        ("t", "xhat1", "t", "x1")
    };
    if let Some(s) = pair(xa, ya) {
        series.push(("estimate", s));
    }
    if let Some(s) = pair(xb, yb) {
        series.push(("truth", s));
    }
    write(dir.join("trajectory.svg"), &line_svg("trajectory", &series), &mut out)?;

    let times_path = lay.root.join("data.times.csv");
    if times_path.exists() {
        let truth = read_times(&times_path)?;
        let mut rows: Vec<Vec<f64>> = read_labels(&lay.labels())?
            .into_iter()
            .map(|(_, idx, t_hat)| -> Result<Vec<f64>> {
                let t = *truth
                    .get(idx)
                    .ok_or_else(|| Error::Shape(format!("label index {idx} has no true time")))?;
                Ok(vec![idx as f64, t, t_hat, (t_hat - t).abs()])
            })
            .collect::<Result<_>>()?;
        rows.sort_by(|a, b| a[1].total_cmp(&b[1]));
        let t = Table {
            header: ["index", "t_true", "t_hat", "abs_error"].map(String::from).to_vec(),
            rows,
        };
        t.write(&dir.join("label_errors.csv"))?;
        out.push(dir.join("label_errors.csv"));
        let pts: Vec<(f64, f64)> = t.rows.iter().map(|r| (r[1], r[3])).collect();
        write(dir.join("label_errors.svg"), &line_svg("label error against true time", &[("|t_hat - t|", pts)]), &mut out)?;
    }

    if lay.landscape().exists() {
        let land = Table::read(&lay.landscape())?;
        let col = |n: &str| land.column(n).ok_or_else(|| Error::parse(lay.landscape(), 1, format!("missing column {n}")));
        let (i, j, loss, blow) = (col("i")?, col("j")?, col("loss")?, col("blowup")?);
        let n_i = i.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1;
        let n_j = j.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1;
        let t = Table {
            header: ["i", "j", "loss", "blowup"].map(String::from).to_vec(),
            rows: (0..land.rows.len()).map(|r| vec![i[r], j[r], loss[r], blow[r]]).collect(),
        };
        t.write(&dir.join("landscape.csv"))?;
        out.push(dir.join("landscape.csv"));
        let mut grid = vec![f64::NAN; n_i * n_j];
        for r in 0..land.rows.len() {
            grid[i[r] as usize * n_j + j[r] as usize] = loss[r].log10();
        }
        write(
            dir.join("landscape.svg"),
            &heatmap_svg("log10 loss", n_i, n_j, |a, b| grid[a * n_j + b]),
            &mut out,
        )?;
    }
    Ok(out)
}
