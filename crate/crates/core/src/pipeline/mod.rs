//! End-to-end stages: physical simulator, drift-removed training set,
//! risk-neutral simulator, simulation and evaluation statistics.
//!
//! The compressed state is `(R_t, z_t)`: the one-step spot return and the
//! latent code of the DLV grid. Flows model `(R_{t+1}, z_{t+1} - z_t)`
//! conditioned on `z_t`.

pub mod dataset;
pub mod eval;
pub mod kde;
pub mod stages;
pub mod synth;

use std::sync::Arc;

use chrono::NaiveDate;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::flow::{Bounds, ConditionalFlowModel, FlowConfig, FlowData};
use crate::grid::{interp_call, price_from_dlv, roll_option_value, DlvGrid, GridSpec, MarketState};
use crate::measure::{Instrument, InstrumentSet};
use crate::training::{TrainConfig, TrainReport};

/// Dated spot levels with their DLV grids.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSeries {
    spec: Arc<GridSpec>,
    dates: Vec<NaiveDate>,
    spots: Vec<f64>,
    dlvs: Vec<DlvGrid>,
}

impl MarketSeries {
    pub fn new(spec: Arc<GridSpec>, dates: Vec<NaiveDate>, spots: Vec<f64>, dlvs: Vec<DlvGrid>) -> Result<Self> {
        if dates.len() != spots.len() || dates.len() != dlvs.len() {
            return Err(Error::Dimension("dates, spots and grids differ in length".into()));
        }
        if let Some(row) = dates.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::Data {
                row: row + 1,
                message: "dates must be strictly increasing".into(),
            });
        }
        if let Some(row) = spots.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Data {
                row,
                message: format!("non-positive spot {}", spots[row]),
            });
        }
        if let Some(row) = dlvs.iter().position(|d| d.spec().as_ref() != spec.as_ref()) {
            return Err(Error::Data {
                row,
                message: "grid does not match the series spec".into(),
            });
        }
        Ok(MarketSeries { spec, dates, spots, dlvs })
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn spots(&self) -> &[f64] {
        &self.spots
    }

    pub fn dlvs(&self) -> &[DlvGrid] {
        &self.dlvs
    }

    pub fn len(&self) -> usize {
        self.spots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spots.is_empty()
    }

    pub fn state(&self, t: usize) -> Result<MarketState> {
        MarketState::new(self.spots[t], price_from_dlv(&self.dlvs[t])?)
    }

    /// `log σ` rows, one per day.
    pub fn log_dlv(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.spec.len()), |(t, j)| self.dlvs[t].values()[j].ln())
    }

    /// One-step returns `R_t = S_t / S_{t-1} - 1` for `t ≥ 1`.
    pub fn returns(&self) -> Vec<f64> {
        self.spots.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
    }
}

/// Codes and returns of a series, with its flow transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedSeries {
    pub returns: Vec<f64>,
    /// One code per day.
    pub codes: Array2<f64>,
}

impl CompressedSeries {
    pub fn new(series: &MarketSeries, codec: &Codec) -> Result<Self> {
        Ok(CompressedSeries {
            returns: series.returns(),
            codes: codec.encode_log_batch(series.log_dlv().view())?,
        })
    }

    /// Conditions `z_t` and flow states `(R_{t+1}, z_{t+1} - z_t)`.
    pub fn transitions(&self) -> (Array2<f64>, Array2<f64>) {
        let n = self.returns.len();
        let l = self.codes.ncols();
        let conditions = self.codes.slice(ndarray::s![..n, ..]).to_owned();
        let states = Array2::from_shape_fn((n, 1 + l), |(t, j)| {
            if j == 0 {
                self.returns[t]
            } else {
                self.codes[[t + 1, j - 1]] - self.codes[[t, j - 1]]
            }
        });
        (conditions, states)
    }
}

/// Source of next compressed states `(R_{t+1}, z_{t+1})` given the current
/// code and one row of uniforms per sample.
pub trait TransitionSampler: Sync {
    fn dim(&self) -> usize;
    fn sample_next(&self, code: &[f64], uniforms: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// A flow over `(R, Δz)` seen as a sampler of next levels.
#[derive(Debug, Clone, Copy)]
pub struct FlowSampler<'a>(pub &'a ConditionalFlowModel);

impl TransitionSampler for FlowSampler<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn sample_next(&self, code: &[f64], uniforms: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = uniforms.nrows();
        let conds = Array2::from_shape_fn((n, code.len()), |(_, j)| code[j]);
        let mut out = self.0.sample_batch(conds.view(), uniforms)?;
        for mut row in out.rows_mut() {
            for (j, z) in code.iter().enumerate() {
                row[j + 1] += z;
            }
        }
        Ok(out)
    }
}

/// Market state with the given spot and the surface `Φ(decode(code))`.
pub fn market_from_code(codec: &Codec, spec: &Arc<GridSpec>, spot: f64, code: &[f64]) -> Result<MarketState> {
    MarketState::new(spot, price_from_dlv(&codec.decode(spec, code)?)?)
}

/// Next-day market states for rows `(R, z)` starting from unit spot.
pub fn next_markets(codec: &Codec, spec: &Arc<GridSpec>, next: ArrayView2<'_, f64>) -> Result<Vec<MarketState>> {
    let logs = codec.decode_log_batch(next.slice(ndarray::s![.., 1..]))?;
    next.rows()
        .into_iter()
        .zip(logs.rows())
        .map(|(row, log)| {
            let dlv = DlvGrid::new(Arc::clone(spec), log.iter().map(|v| v.exp()).collect())?;
            MarketState::new(1.0 + row[0], price_from_dlv(&dlv)?)
        })
        .collect()
}

/// One-step gains of every instrument, in units of the current spot.
pub fn instrument_gains(prev: &MarketState, next: &MarketState, instruments: &InstrumentSet) -> Result<Vec<f64>> {
    instruments
        .instruments()
        .iter()
        .map(|i| match *i {
            Instrument::Spot => Ok(next.spot / prev.spot - 1.0),
            Instrument::Call { maturity, strike } => Ok(roll_option_value(prev, next, maturity, strike)?.change),
        })
        .collect()
}

/// Current instrument prices in units of the spot.
pub fn instrument_prices(state: &MarketState, instruments: &InstrumentSet) -> Result<Vec<f64>> {
    instruments
        .instruments()
        .iter()
        .map(|i| match *i {
            Instrument::Spot => Ok(1.0),
            Instrument::Call { maturity, strike } => interp_call(&state.prices, maturity, strike),
        })
        .collect()
}

/// Substream seed for item `t` of a stage seeded with `seed`.
pub fn substream_seed(seed: u64, t: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ t.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Owen-scrambled Sobol points in `[0, 1)^dim`, one row per sample.
pub fn sobol_uniforms(n: usize, dim: usize, seed: u64) -> Result<Array2<f64>> {
    if dim > 256 || n > u32::MAX as usize {
        return Err(Error::Dimension(format!("Sobol points support at most 256 dimensions, got {dim}")));
    }
    let s = (seed ^ (seed >> 32)) as u32;
    Ok(Array2::from_shape_fn((n, dim), |(i, j)| {
        sobol_burley::sample(i as u32, j as u32, s) as f64
    }))
}

/// Physical simulator with its data and fit diagnostics.
#[derive(Debug, Clone)]
pub struct PhysicalFit {
    pub model: ConditionalFlowModel,
    pub report: TrainReport,
    pub compressed: CompressedSeries,
    /// Mean held-out NLL of the flow, in unit-box coordinates.
    pub heldout_nll: f64,
    /// Same for independent per-coordinate histograms fitted on the
    /// training split.
    pub baseline_nll: f64,
}

/// Bounds of the physical flow's states and conditions.
pub fn flow_bounds(conditions: ArrayView2<'_, f64>, states: ArrayView2<'_, f64>, margin: f64) -> Result<(Bounds, Bounds)> {
    Ok((Bounds::fit(states, margin)?, Bounds::fit(conditions, margin)?))
}

/// Fits the physical transition density `p_η` on a historical series.
pub fn fit_physical(series: &MarketSeries, codec: &Codec, flow: &FlowConfig, train: &TrainConfig, seed: u64) -> Result<PhysicalFit> {
    if let Some(d) = flow.dim {
        if d != 1 + codec.latent_dim() {
            return Err(Error::Config(format!(
                "flow dimension {d} does not match 1 + latent dimension {}",
                codec.latent_dim()
            )));
        }
    }
    let compressed = CompressedSeries::new(series, codec)?;
    let (conditions, states) = compressed.transitions();
    let (bounds, cond_bounds) = flow_bounds(conditions.view(), states.view(), flow.bounds_margin)?;
    let mut model = ConditionalFlowModel::new(bounds, cond_bounds, flow, seed)?;
    let data = FlowData::unweighted(conditions, states)?;
    let report = crate::flow::fit_flow(&mut model, &data, train, substream_seed(seed, 1))?;
    let (tr, val) = train.split(data.len())?;
    let held = FlowData::unweighted(
        data.conditions.slice(ndarray::s![val.clone(), ..]).to_owned(),
        data.states.slice(ndarray::s![val, ..]).to_owned(),
    )?;
    let heldout_nll = model.weighted_nll(&held)?;
    let baseline = HistogramBaseline::fit(&model, data.states.slice(ndarray::s![tr, ..]))?;
    let baseline_nll = baseline.nll(&model, held.states.view())?;
    Ok(PhysicalFit {
        model,
        report,
        compressed,
        heldout_nll,
        baseline_nll,
    })
}

/// Independent per-coordinate histograms on a flow's bins.
struct HistogramBaseline {
    log_probs: Vec<Vec<f64>>,
}

impl HistogramBaseline {
    fn fit(model: &ConditionalFlowModel, states: ArrayView2<'_, f64>) -> Result<Self> {
        let b = model.bins();
        let mut counts = vec![vec![1.0; b]; model.dim()];
        for row in states.rows() {
            let u = model.rescale_to_unit(&row.to_vec())?;
            for (j, v) in u.iter().enumerate() {
                counts[j][crate::flow::bin_index(*v, b)] += 1.0;
            }
        }
        let log_probs = counts
            .into_iter()
            .map(|c| {
                let total: f64 = c.iter().sum();
                c.into_iter().map(|v| (v / total).ln()).collect()
            })
            .collect();
        Ok(HistogramBaseline { log_probs })
    }

    fn nll(&self, model: &ConditionalFlowModel, states: ArrayView2<'_, f64>) -> Result<f64> {
        let b = model.bins();
        let mut total = 0.0;
        for row in states.rows() {
            let u = model.rescale_to_unit(&row.to_vec())?;
            for (j, v) in u.iter().enumerate() {
                total -= (b as f64).ln() + self.log_probs[j][crate::flow::bin_index(*v, b)];
            }
        }
        Ok(total / states.nrows() as f64)
    }
}

/// Simulated paths: spot levels and DLV grids per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPath {
    pub spots: Vec<f64>,
    pub codes: Vec<Vec<f64>>,
}

/// Iterates one-step sampling from `start`; each path starts from the code
/// of the start grid. Steps whose code leaves `valid` are logged.
pub fn simulate(
    sampler: &dyn TransitionSampler,
    codec: &Codec,
    start: &MarketState,
    horizon: usize,
    n_paths: usize,
    valid: Option<&Bounds>,
    seed: u64,
) -> Result<Vec<SimulatedPath>> {
    let start_dlv = crate::grid::dlv_from_price(&start.prices)?;
    let z0 = codec.encode(&start_dlv)?;
    let mut paths: Vec<SimulatedPath> = (0..n_paths)
        .map(|_| SimulatedPath {
            spots: vec![start.spot],
            codes: vec![z0.clone()],
        })
        .collect();
    let mut warned = 0usize;
    for (p, path) in paths.iter_mut().enumerate() {
        let u = sobol_uniforms(horizon, sampler.dim(), substream_seed(seed, p as u64))?;
        for step in 0..horizon {
            let code = path.codes[step].clone();
            let next = sampler.sample_next(&code, u.slice(ndarray::s![step..step + 1, ..]))?;
            let z: Vec<f64> = next.row(0).iter().skip(1).copied().collect();
            if let Some(b) = valid {
                if !b.contains(&z) {
                    warned += 1;
                }
            }
            path.spots.push(path.spots[step] * (1.0 + next[[0, 0]]));
            path.codes.push(z);
        }
    }
    if warned > 0 {
        log::warn!("{warned} simulated codes left the decoder's validated range");
    }
    Ok(paths)
}
