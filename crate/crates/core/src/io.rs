//! Files: the market CSV, model checkpoints and the report outputs.
//!
//! JSON documents carry a `schema_version`; CSV schemas are fixed by their
//! header rows. Floats are written in shortest round-trip form, so every
//! file re-reads to the values that were written.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::flow::ConditionalFlowModel;
use crate::grid::{check_static_arbitrage, price_from_dlv, DlvGrid, GridSpec};
use crate::pipeline::dataset::{ConditionDiagnostics, Origin, TransitionDataset};
use crate::pipeline::eval::{DriftReport, PnlReport};
use crate::pipeline::kde::Kde2;
use crate::pipeline::stages::{DriftRemoval, Evaluation};
use crate::pipeline::MarketSeries;
use crate::training::TrainReport;

pub const SCHEMA_VERSION: u32 = 1;

pub const MARKET_CSV: &str = "market.csv";
pub const CODEC_JSON: &str = "codec.json";
pub const PHYSICAL_JSON: &str = "physical.json";
pub const DATASET_CSV: &str = "weighted_dataset.csv";
pub const DRIFT_REMOVAL_JSON: &str = "drift_removal.json";
pub const RISK_NEUTRAL_JSON: &str = "risk_neutral.json";
pub const DRIFT_REPORT_JSON: &str = "drift_report.json";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const PNL_SCATTER_CSV: &str = "pnl_scatter.csv";
pub const WEIGHTS_HIST_CSV: &str = "weights_hist.csv";
pub const TRAINING_CURVES_CSV: &str = "training_curves.csv";
pub const SIMULATION_CSV: &str = "simulation.csv";

pub fn kde_file_name(name: &str) -> String {
    format!("kde_{name}.csv")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::Reader::from_reader(File::open(path)?))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(field: &str, row: usize, column: &str) -> Result<f64> {
    field.trim().parse().map_err(|_| Error::Data {
        row,
        message: format!("column {column}: cannot parse {field:?} as a number"),
    })
}

fn check_header(reader: &mut csv::Reader<File>, expected: &[String]) -> Result<()> {
    let header = reader.headers()?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Data {
            row: 0,
            message: format!("header {got:?} does not match {expected:?}"),
        });
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

/// Market CSV header for a grid.
pub fn market_header(spec: &GridSpec) -> Vec<String> {
    let mut h = vec!["date".to_string(), "spot".to_string()];
    h.extend(spec.column_names());
    h
}

pub fn write_market_csv(path: &Path, series: &MarketSeries) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(market_header(series.spec()))?;
    for t in 0..series.len() {
        let mut rec = vec![series.dates()[t].format("%Y-%m-%d").to_string(), num(series.spots()[t])];
        rec.extend(series.dlvs()[t].values().iter().map(|v| num(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a market CSV written for `spec`. Every row is priced and checked
/// for static arbitrage; failures name the data row (1-based).
pub fn load_market_csv(path: &Path, spec: &Arc<GridSpec>) -> Result<MarketSeries> {
    let mut r = csv_reader(path)?;
    let header = market_header(spec);
    check_header(&mut r, &header)?;
    let (mut dates, mut spots, mut dlvs) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Data {
                row,
                message: format!("expected {} fields, got {}", header.len(), rec.len()),
            });
        }
        let date = NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d").map_err(|e| Error::Data {
            row,
            message: format!("date {:?}: {e}", &rec[0]),
        })?;
        let spot = parse_f64(&rec[1], row, "spot")?;
        if !(spot > 0.0 && spot.is_finite()) {
            return Err(Error::Data {
                row,
                message: format!("non-positive spot {spot}"),
            });
        }
        let mut values = Vec::with_capacity(spec.len());
        for (j, field) in rec.iter().skip(2).enumerate() {
            let v = parse_f64(field, row, &header[j + 2])?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Data {
                    row,
                    message: format!("non-positive DLV {v} in column {}", header[j + 2]),
                });
            }
            values.push(v);
        }
        let dlv = DlvGrid::new(Arc::clone(spec), values).map_err(|e| Error::Data {
            row,
            message: e.to_string(),
        })?;
        let prices = price_from_dlv(&dlv).map_err(|e| Error::Data {
            row,
            message: e.to_string(),
        })?;
        if let Some(v) = check_static_arbitrage(&prices).first() {
            return Err(Error::Data {
                row,
                message: format!("derived prices violate {} at ({}, {})", v.kind, v.maturity, v.strike),
            });
        }
        dates.push(date);
        spots.push(spot);
        dlvs.push(dlv);
    }
    MarketSeries::new(Arc::clone(spec), dates, spots, dlvs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalCheckpoint {
    pub schema_version: u32,
    pub model: ConditionalFlowModel,
    pub report: TrainReport,
    pub heldout_nll: f64,
    pub baseline_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskNeutralCheckpoint {
    pub schema_version: u32,
    pub model: ConditionalFlowModel,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecCheckpoint {
    pub schema_version: u32,
    pub codec: Codec,
    pub report: TrainReport,
}

/// Reads a checkpoint, mapping parse and version problems to
/// [`Error::Checkpoint`].
pub fn read_checkpoint<T: Versioned>(path: &Path) -> Result<T> {
    let value: T = read_json(path).map_err(|e| match e {
        Error::Io(e) => Error::Io(e),
        e => Error::Checkpoint(format!("{}: {e}", path.display())),
    })?;
    if value.schema_version() != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            path.display(),
            value.schema_version()
        )));
    }
    Ok(value)
}

pub trait Versioned: DeserializeOwned {
    fn schema_version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn schema_version(&self) -> u32 {
                self.schema_version
            }
        })*
    };
}

versioned!(PhysicalCheckpoint, RiskNeutralCheckpoint, CodecCheckpoint, DriftReportFile, DriftRemovalFile, EvaluationFile);

fn dataset_header(l: usize) -> Vec<String> {
    let mut h: Vec<String> = ["condition_index", "origin", "weight"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=l).map(|j| format!("z{j}")));
    h.push("next_return".into());
    h.extend((1..=l).map(|j| format!("next_z{j}")));
    h
}

pub fn write_dataset_csv(path: &Path, data: &TransitionDataset) -> Result<()> {
    let l = data.conditions.ncols();
    let mut w = csv_writer(path)?;
    w.write_record(dataset_header(l))?;
    for i in 0..data.len() {
        let origin = match data.origin[i] {
            Origin::Historical => "historical",
            Origin::Generated => "generated",
        };
        let mut rec = vec![data.condition_index[i].to_string(), origin.to_string(), num(data.weights[i])];
        rec.extend(data.conditions.row(i).iter().map(|v| num(*v)));
        rec.extend(data.nexts.row(i).iter().map(|v| num(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<TransitionDataset> {
    let mut r = csv_reader(path)?;
    let width = r.headers()?.len();
    if width < 5 || (width - 4) % 2 != 0 {
        return Err(Error::Data {
            row: 0,
            message: format!("dataset header has {width} columns"),
        });
    }
    let l = (width - 4) / 2;
    check_header(&mut r, &dataset_header(l))?;
    let (mut cond, mut next, mut weights, mut origin, mut index) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        index.push(rec[0].trim().parse::<usize>().map_err(|_| Error::Data {
            row,
            message: format!("bad condition index {:?}", &rec[0]),
        })?);
        origin.push(match rec[1].trim() {
            "historical" => Origin::Historical,
            "generated" => Origin::Generated,
            o => {
                return Err(Error::Data {
                    row,
                    message: format!("unknown origin {o:?}"),
                })
            }
        });
        let w = parse_f64(&rec[2], row, "weight")?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Data {
                row,
                message: format!("weight {w} is not finite and nonnegative"),
            });
        }
        weights.push(w);
        for j in 0..l {
            cond.push(parse_f64(&rec[3 + j], row, "condition")?);
        }
        for j in 0..=l {
            next.push(parse_f64(&rec[3 + l + j], row, "next")?);
        }
    }
    let n = weights.len();
    Ok(TransitionDataset {
        conditions: Array2::from_shape_vec((n, l), cond).expect("row-major fill"),
        nexts: Array2::from_shape_vec((n, l + 1), next).expect("row-major fill"),
        weights,
        origin,
        condition_index: index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRemovalFile {
    pub schema_version: u32,
    pub lambda: f64,
    pub samples_per_condition: usize,
    pub conditions: usize,
    pub skipped: usize,
    pub diagnostics: Vec<ConditionDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReportFile {
    pub schema_version: u32,
    /// Historical index of every evaluated condition.
    pub condition_indices: Vec<usize>,
    pub reports: Vec<DriftReport>,
}

/// Utility-optimal trade at one condition under both simulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnlSummary {
    pub condition_index: usize,
    pub physical_action: Vec<f64>,
    pub physical_certainty_equivalent: f64,
    pub risk_neutral_action: Vec<f64>,
    pub risk_neutral_certainty_equivalent: f64,
}

impl PnlSummary {
    pub fn new(condition_index: usize, p: &PnlReport, q: &PnlReport) -> Self {
        PnlSummary {
            condition_index,
            physical_action: p.action.clone(),
            physical_certainty_equivalent: p.certainty_equivalent,
            risk_neutral_action: q.action.clone(),
            risk_neutral_certainty_equivalent: q.certainty_equivalent,
        }
    }
}

/// Marginal statistics of `q_θ` against `p_η` at one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub condition_index: usize,
    pub physical_return_std: f64,
    pub risk_neutral_return_std: f64,
    /// Shift of every latent coordinate's mean, in combined standard errors.
    pub latent_mean_shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub schema_version: u32,
    pub lambda: f64,
    pub samples: usize,
    pub pnl: Vec<PnlSummary>,
    pub fidelity: Vec<FidelitySummary>,
}

/// One row of the PnL scatter: spot move and optimal PnL under both
/// simulators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub spot_move_physical: f64,
    pub pnl_physical: f64,
    pub spot_move_risk_neutral: f64,
    pub pnl_risk_neutral: f64,
}

pub fn write_pnl_scatter(path: &Path, p: &PnlReport, q: &PnlReport) -> Result<()> {
    if p.scatter.len() != q.scatter.len() {
        return Err(Error::Shape {
            expected: p.scatter.len(),
            actual: q.scatter.len(),
        });
    }
    let mut w = csv_writer(path)?;
    for (a, b) in p.scatter.iter().zip(&q.scatter) {
        w.serialize(ScatterRow {
            spot_move_physical: a.0,
            pnl_physical: a.1,
            spot_move_risk_neutral: b.0,
            pnl_risk_neutral: b.1,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv_reader(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pnl_scatter(path: &Path) -> Result<Vec<ScatterRow>> {
    read_rows(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

pub fn write_weights_hist(path: &Path, hist: &[(f64, f64, usize)]) -> Result<()> {
    write_rows(path, hist.iter().map(|&(bin_lo, bin_hi, count)| HistogramRow { bin_lo, bin_hi, count }))
}

pub fn read_weights_hist(path: &Path) -> Result<Vec<HistogramRow>> {
    read_rows(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct KdeRow {
    x: f64,
    y: f64,
    density: f64,
    bandwidth_x: f64,
    bandwidth_y: f64,
}

/// Long format, `x` outer and `y` inner.
pub fn write_kde_csv(path: &Path, kde: &Kde2) -> Result<()> {
    let rows = kde.x.iter().enumerate().flat_map(|(i, &x)| {
        kde.y.iter().enumerate().map(move |(j, &y)| KdeRow {
            x,
            y,
            density: kde.density[[i, j]],
            bandwidth_x: kde.bandwidth.0,
            bandwidth_y: kde.bandwidth.1,
        })
    });
    write_rows(path, rows)
}

pub fn read_kde_csv(path: &Path) -> Result<Kde2> {
    let rows: Vec<KdeRow> = read_rows(path)?;
    let first = rows.first().ok_or(Error::Empty("kernel density file"))?;
    let ny = rows.iter().take_while(|r| r.x == first.x).count();
    if ny == 0 || rows.len() % ny != 0 {
        return Err(Error::Data {
            row: 0,
            message: "kernel density rows do not form a lattice".into(),
        });
    }
    let nx = rows.len() / ny;
    Ok(Kde2 {
        x: rows.iter().step_by(ny).map(|r| r.x).collect(),
        y: rows[..ny].iter().map(|r| r.y).collect(),
        bandwidth: (first.bandwidth_x, first.bandwidth_y),
        density: Array2::from_shape_fn((nx, ny), |(i, j)| rows[i * ny + j].density),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

const STAGE_ORDER: [&str; 3] = ["codec", "physical", "risk_neutral"];

fn curve_rows(stage: &str, report: &TrainReport) -> Vec<CurveRow> {
    report
        .train_loss
        .iter()
        .zip(&report.validation_loss)
        .enumerate()
        .map(|(epoch, (t, v))| CurveRow {
            stage: stage.to_string(),
            epoch,
            train_loss: *t,
            validation_loss: *v,
        })
        .collect()
}

/// Replaces the rows of `stage` in the training-curve file, keeping other
/// stages. Rows are ordered by stage, then epoch.
pub fn update_training_curves(path: &Path, stage: &str, report: &TrainReport) -> Result<()> {
    let mut rows: Vec<CurveRow> = if path.exists() {
        read_training_curves(path)?.into_iter().filter(|r| r.stage != stage).collect()
    } else {
        Vec::new()
    };
    rows.extend(curve_rows(stage, report));
    let rank = |s: &str| STAGE_ORDER.iter().position(|x| *x == s).unwrap_or(STAGE_ORDER.len());
    rows.sort_by(|a, b| (rank(&a.stage), &a.stage, a.epoch).cmp(&(rank(&b.stage), &b.stage, b.epoch)));
    write_rows(path, rows)
}

pub fn read_training_curves(path: &Path) -> Result<Vec<CurveRow>> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    pub path: usize,
    pub step: usize,
    pub spot: f64,
    /// Latent coordinates separated by `;`.
    pub code: String,
}

pub fn write_simulation_csv(path: &Path, paths: &[crate::pipeline::SimulatedPath]) -> Result<()> {
    let rows = paths.iter().enumerate().flat_map(|(p, sp)| {
        sp.spots.iter().zip(&sp.codes).enumerate().map(move |(step, (s, z))| PathRow {
            path: p,
            step,
            spot: *s,
            code: z.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";"),
        })
    });
    write_rows(path, rows)
}

pub fn read_simulation_csv(path: &Path) -> Result<Vec<PathRow>> {
    read_rows(path)
}

/// Writes the drift-removal outputs: training records, per-condition
/// diagnostics and the pooled weight histogram.
pub fn emit_drift_removal(dir: &Path, out: &DriftRemoval, lambda: f64, samples_per_condition: usize) -> Result<()> {
    write_dataset_csv(&dir.join(DATASET_CSV), &out.weighted.dataset)?;
    write_json(
        &dir.join(DRIFT_REMOVAL_JSON),
        &DriftRemovalFile {
            schema_version: SCHEMA_VERSION,
            lambda,
            samples_per_condition,
            conditions: out.weighted.diagnostics.len(),
            skipped: out.weighted.skipped(),
            diagnostics: out.weighted.diagnostics.clone(),
        },
    )?;
    write_weights_hist(&dir.join(WEIGHTS_HIST_CSV), &out.histogram)
}

/// Writes the drift table, trade summaries, PnL scatter and densities.
pub fn emit_evaluation(dir: &Path, ev: &Evaluation, lambda: f64, samples: usize) -> Result<()> {
    write_json(
        &dir.join(DRIFT_REPORT_JSON),
        &DriftReportFile {
            schema_version: SCHEMA_VERSION,
            condition_indices: ev.condition_indices.clone(),
            reports: ev.drift.clone(),
        },
    )?;
    write_json(
        &dir.join(EVALUATION_JSON),
        &EvaluationFile {
            schema_version: SCHEMA_VERSION,
            lambda,
            samples,
            pnl: ev.pnl.clone(),
            fidelity: ev.fidelity.clone(),
        },
    )?;
    write_pnl_scatter(&dir.join(PNL_SCATTER_CSV), &ev.scatter.0, &ev.scatter.1)?;
    for (name, k) in &ev.kde {
        write_kde_csv(&dir.join(kde_file_name(name)), k)?;
    }
    Ok(())
}
