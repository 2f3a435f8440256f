//! Result persistence (CSV tables, masks) and raster summary plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiment::{ExperimentResult, ResultRow, SliceMask};
use super::plot::{padded_range, Axes, Canvas, PALETTE};
use super::stats::{mean, std_dev};
use crate::error::{Error, Result};
use crate::io;
use crate::operators::{MaskFile, SamplingMask};
use crate::phantoms::ClassLabel;

pub const RESULTS_FILE: &str = "results.csv";
pub const PROVENANCE_FILE: &str = "provenance.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SWEEP_PLOT: &str = "ns_sweep.png";
pub const MASK_DIR: &str = "masks";

pub const RESULTS_HEADER: &str = "slice_id,class,method,regime,R_target,R_achieved,N_s,nrmse,wall_time_s";

#[derive(Serialize, Deserialize)]
struct CsvRow {
    slice_id: String,
    class: ClassLabel,
    method: String,
    regime: String,
    #[serde(rename = "R_target")]
    r_target: f64,
    #[serde(rename = "R_achieved")]
    r_achieved: f64,
    #[serde(rename = "N_s")]
    n_s: usize,
    nrmse: f64,
    wall_time_s: f64,
}

#[derive(Serialize, Deserialize)]
struct ProvenanceRow {
    slice_id: String,
    method: String,
    regime: String,
    #[serde(rename = "R_target")]
    r_target: f64,
    #[serde(rename = "N_s")]
    n_s: usize,
    checkpoint_sha256: String,
    sampler_fingerprint: String,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    class: &'a str,
    method: &'a str,
    regime: &'a str,
    #[serde(rename = "R_target")]
    r_target: f64,
    #[serde(rename = "N_s")]
    n_s: usize,
    count: usize,
    mean_nrmse: f64,
    std_nrmse: f64,
}

/// Files written by [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub results_csv: PathBuf,
    pub provenance_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub class_plots: Vec<PathBuf>,
    pub sweep_plot: PathBuf,
    pub mask_files: Vec<PathBuf>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let detail = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        _ => Error::Format {
            path: path.to_path_buf(),
            detail,
        },
    }
}

fn csv_bytes<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.into_inner().map_err(|e| Error::io(path, e.into_error()))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    io::write_bytes(path, &csv_bytes(path, rows)?)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// Results table bytes, exactly as written to `results.csv`.
pub fn results_csv_bytes(result: &ExperimentResult) -> Result<Vec<u8>> {
    csv_bytes(Path::new(RESULTS_FILE), result.rows.iter().map(to_csv_row))
}

fn to_csv_row(r: &ResultRow) -> CsvRow {
    CsvRow {
        slice_id: r.slice_id.clone(),
        class: r.class,
        method: r.method.clone(),
        regime: r.regime.clone(),
        r_target: r.r_target,
        r_achieved: r.r_achieved,
        n_s: r.n_s,
        nrmse: r.nrmse,
        wall_time_s: r.wall_time_s,
    }
}

fn mask_file_name(m: &SliceMask) -> String {
    format!("{}_R{}.toml", m.slice_id, m.r_target)
}

/// Groups `(class, method, regime, R, N_s)` → NRMSE values, in canonical order.
type GroupKey = (Option<ClassLabel>, String, String, u64, usize);

fn groups(rows: &[ResultRow]) -> BTreeMap<GroupKey, Vec<f64>> {
    let mut g: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in rows {
        // R values are positive, so their bit patterns sort like the numbers.
        for class in [Some(r.class), None] {
            g.entry((class, r.method.clone(), r.regime.clone(), r.r_target.to_bits(), r.n_s))
                .or_default()
                .push(r.nrmse);
        }
    }
    g
}

/// Writes `results.csv`, `provenance.csv`, `summary.csv`, one mask file per
/// (slice, R), a per-class NRMSE distribution plot and the N_s line plot.
pub fn emit_report(result: &ExperimentResult, outdir: &Path) -> Result<ReportFiles> {
    if result.rows.is_empty() {
        return Err(Error::invalid("cannot report an empty result"));
    }
    let mut result = result.clone();
    result.canonicalize();
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;

    let results_csv = outdir.join(RESULTS_FILE);
    io::write_bytes(&results_csv, &results_csv_bytes(&result)?)?;

    let provenance_csv = outdir.join(PROVENANCE_FILE);
    write_csv(
        &provenance_csv,
        result.rows.iter().map(|r| ProvenanceRow {
            slice_id: r.slice_id.clone(),
            method: r.method.clone(),
            regime: r.regime.clone(),
            r_target: r.r_target,
            n_s: r.n_s,
            checkpoint_sha256: r.checkpoint_sha256.clone().unwrap_or_default(),
            sampler_fingerprint: r.sampler_fingerprint.clone().unwrap_or_default(),
        }),
    )?;

    let grouped = groups(&result.rows);
    let summary_csv = outdir.join(SUMMARY_FILE);
    write_csv(
        &summary_csv,
        grouped.iter().map(|((class, method, regime, r, n_s), v)| SummaryRow {
            class: class.map_or("all", ClassLabel::name),
            method,
            regime,
            r_target: f64::from_bits(*r),
            n_s: *n_s,
            count: v.len(),
            mean_nrmse: mean(v),
            std_nrmse: std_dev(v),
        }),
    )?;

    let mask_dir = outdir.join(MASK_DIR);
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let mut mask_files = Vec::new();
    for m in &result.masks {
        let path = mask_dir.join(mask_file_name(m));
        io::write_toml(&path, &m.mask.to_file())?;
        mask_files.push(path);
    }

    let mut classes: Vec<ClassLabel> = result.rows.iter().map(|r| r.class).collect();
    classes.sort();
    classes.dedup();
    let mut class_plots = Vec::new();
    for c in classes {
        let path = outdir.join(format!("nrmse_{}.png", c.name()));
        plot_distribution(&grouped, c, &path)?;
        class_plots.push(path);
    }
    let sweep_plot = outdir.join(SWEEP_PLOT);
    plot_sweep(&grouped, &sweep_plot)?;

    Ok(ReportFiles {
        results_csv,
        provenance_csv,
        summary_csv,
        class_plots,
        sweep_plot,
        mask_files,
    })
}

/// Strip plot of per-slice NRMSE for every configuration of one class, with
/// the group mean as a horizontal bar. Colors cycle over (method, regime).
fn plot_distribution(grouped: &BTreeMap<GroupKey, Vec<f64>>, class: ClassLabel, path: &Path) -> Result<()> {
    let cells: Vec<(&GroupKey, &Vec<f64>)> = grouped.iter().filter(|(k, _)| k.0 == Some(class)).collect();
    let mut series: Vec<(&str, &str)> = cells.iter().map(|(k, _)| (k.1.as_str(), k.2.as_str())).collect();
    series.sort();
    series.dedup();
    let n = cells.len().max(1);
    let (width, height) = (120 + 40 * n as u32, 320);
    let mut canvas = Canvas::new(width, height);
    let ax = Axes {
        left: 60,
        top: 20,
        width: width as i64 - 90,
        height: height as i64 - 60,
        x_range: (-0.5, n as f64 - 0.5),
        y_range: padded_range(cells.iter().flat_map(|(_, v)| v.iter().copied())),
    };
    ax.draw_frame(&mut canvas, 5);
    for (i, (key, values)) in cells.iter().enumerate() {
        let s = series.iter().position(|&p| p == (key.1.as_str(), key.2.as_str())).unwrap_or(0);
        let color = PALETTE[s % PALETTE.len()];
        let x = ax.px(i as f64);
        for (j, v) in values.iter().enumerate() {
            // Deterministic horizontal jitter keeps coincident points visible.
            let jitter = (j as i64 * 7) % 15 - 7;
            canvas.dot(x + jitter, ax.py(*v), color);
        }
        let m = ax.py(mean(values));
        canvas.fill_rect(x - 12, m, x + 12, m + 1, color);
        ax.x_tick(&mut canvas, i as f64, &format!("{}", f64::from_bits(key.3)));
    }
    canvas.save(path)
}

/// Mean NRMSE against N_s, one polyline per (method, regime, R) over all classes.
fn plot_sweep(grouped: &BTreeMap<GroupKey, Vec<f64>>, path: &Path) -> Result<()> {
    let mut lines: BTreeMap<(&str, &str, u64), Vec<(usize, f64)>> = BTreeMap::new();
    for (k, v) in grouped.iter().filter(|(k, _)| k.0.is_none()) {
        lines.entry((&k.1, &k.2, k.3)).or_default().push((k.4, mean(v)));
    }
    let xs: Vec<f64> = lines.values().flatten().map(|(n, _)| *n as f64).collect();
    let (width, height) = (480, 320);
    let mut canvas = Canvas::new(width, height);
    let x_lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ax = Axes {
        left: 60,
        top: 20,
        width: width as i64 - 90,
        height: height as i64 - 60,
        x_range: (x_lo - 0.5, x_hi + 0.5),
        y_range: padded_range(lines.values().flatten().map(|(_, m)| *m)),
    };
    ax.draw_frame(&mut canvas, 5);
    let mut ticks: Vec<usize> = lines.values().flatten().map(|(n, _)| *n).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for t in ticks {
        ax.x_tick(&mut canvas, t as f64, &t.to_string());
    }
    for (i, pts) in lines.values().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pix: Vec<(i64, i64)> = pts.iter().map(|(n, m)| (ax.px(*n as f64), ax.py(*m))).collect();
        for w in pix.windows(2) {
            canvas.line(w[0], w[1], color);
        }
        for &(x, y) in &pix {
            canvas.dot(x, y, color);
        }
    }
    canvas.save(path)
}

/// Reads a report directory back: rows from `results.csv` joined with
/// `provenance.csv`, and masks from `masks/`.
pub fn load_result(dir: &Path) -> Result<ExperimentResult> {
    let rows: Vec<CsvRow> = read_csv(&dir.join(RESULTS_FILE))?;
    let prov_path = dir.join(PROVENANCE_FILE);
    let prov: Vec<ProvenanceRow> = if prov_path.exists() { read_csv(&prov_path)? } else { Vec::new() };
    if !prov.is_empty() && prov.len() != rows.len() {
        return Err(Error::Format {
            path: prov_path,
            detail: format!("{} provenance rows for {} result rows", prov.len(), rows.len()),
        });
    }
    let nonempty = |s: &str| (!s.is_empty()).then(|| s.to_string());
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let p = prov.get(i);
            ResultRow {
                slice_id: r.slice_id,
                class: r.class,
                method: r.method,
                regime: r.regime,
                r_target: r.r_target,
                r_achieved: r.r_achieved,
                n_s: r.n_s,
                nrmse: r.nrmse,
                wall_time_s: r.wall_time_s,
                checkpoint_sha256: p.and_then(|p| nonempty(&p.checkpoint_sha256)),
                sampler_fingerprint: p.and_then(|p| nonempty(&p.sampler_fingerprint)),
            }
        })
        .collect::<Vec<_>>();

    let mut masks = Vec::new();
    let mut seen: Vec<(String, f64)> = rows.iter().map(|r| (r.slice_id.clone(), r.r_target)).collect();
    seen.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.total_cmp(&b.1)));
    seen.dedup();
    for (slice_id, r_target) in seen {
        let probe = SliceMask {
            slice_id,
            r_target,
            mask: SamplingMask::full(1)?,
        };
        let path = dir.join(MASK_DIR).join(mask_file_name(&probe));
        if path.exists() {
            let f: MaskFile = io::read_toml(&path)?;
            masks.push(SliceMask {
                mask: SamplingMask::from_file(&f)?,
                ..probe
            });
        }
    }
    let mut out = ExperimentResult { rows, masks };
    out.canonicalize();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{make_echo_train_mask, MaskMode};

    fn synthetic_result() -> ExperimentResult {
        let mut rows = Vec::new();
        let mut masks = Vec::new();
        for (i, class) in [ClassLabel::SeAx, ClassLabel::FseAx, ClassLabel::FseCor].into_iter().enumerate() {
            let id = format!("slice_{i}");
            for r in [2.0, 1.5] {
                let mode = if class.is_fse() { MaskMode::Fse } else { MaskMode::Se };
                let mask = make_echo_train_mask(48, 4, r, i as u64, mode).unwrap();
                for (method, regime, n_s) in [("dps", "all-embed/denoised", 5), ("dps", "all/denoised", 5), ("l1-wavelet", "none", 1)] {
                    rows.push(ResultRow {
                        slice_id: id.clone(),
                        class,
                        method: method.into(),
                        regime: regime.into(),
                        r_target: r,
                        r_achieved: mask.r,
                        n_s,
                        nrmse: 0.1 + 0.01 * i as f64 + 0.05 * r + if method == "dps" { 0.0 } else { 0.2 },
                        wall_time_s: 0.0,
                        checkpoint_sha256: (method == "dps").then(|| format!("{regime}-hash")),
                        sampler_fingerprint: (method == "dps").then(|| "abcd".to_string()),
                    });
                }
                masks.push(SliceMask {
                    slice_id: id.clone(),
                    r_target: r,
                    mask,
                });
            }
        }
        rows.reverse();
        ExperimentResult { rows, masks }
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let res = synthetic_result();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&res, dir.path()).unwrap();
        let text = fs::read_to_string(&files.results_csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), res.rows.len() + 1);
        assert_eq!(lines[0], RESULTS_HEADER);
        // Canonical order: slice, method, R, N_s, regime.
        assert!(lines[1].starts_with("slice_0,SE_AX,dps,all-embed/denoised,1.5,"));
    }

    #[test]
    fn re_emitting_gives_identical_bytes_regardless_of_row_order() {
        let res = synthetic_result();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        emit_report(&res, a.path()).unwrap();
        let mut shuffled = res.clone();
        shuffled.rows.rotate_left(5);
        shuffled.masks.reverse();
        emit_report(&shuffled, b.path()).unwrap();
        for f in [RESULTS_FILE, PROVENANCE_FILE, SUMMARY_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn plots_exist_for_every_class() {
        let res = synthetic_result();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&res, dir.path()).unwrap();
        assert_eq!(files.class_plots.len(), 3);
        for p in files.class_plots.iter().chain([&files.sweep_plot]) {
            assert!(fs::metadata(p).unwrap().len() > 0, "{}", p.display());
        }
    }

    #[test]
    fn load_result_round_trips_rows_provenance_and_masks() {
        let mut res = synthetic_result();
        res.canonicalize();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&res, dir.path()).unwrap();
        let back = load_result(dir.path()).unwrap();
        assert_eq!(back, res);
        for m in &back.masks {
            assert_eq!(m.mask.r, crate::operators::acceleration(&m.mask));
        }
    }

    #[test]
    fn empty_result_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&ExperimentResult::default(), dir.path()).is_err());
    }
}
