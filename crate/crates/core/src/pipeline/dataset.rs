//! Weighted transition datasets: samples from the physical simulator,
//! reweighted per condition so every instrument becomes a martingale.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::flow::{ConditionalFlowModel, FlowData};
use crate::grid::GridSpec;
use crate::measure::{reweighted_mean, solve_optimal_action, GainsSample, InstrumentSet, RiskAversion, SolverConfig};
use crate::training::{TrainConfig, TrainReport};

use super::{instrument_gains, market_from_code, next_markets, sobol_uniforms, substream_seed, TransitionSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Historical,
    Generated,
}

/// Transitions `z_t → (R_{t+1}, z_{t+1})` with weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    /// Conditions `z_t`.
    pub conditions: Array2<f64>,
    /// Next states `(R_{t+1}, z_{t+1})`.
    pub nexts: Array2<f64>,
    pub weights: Vec<f64>,
    pub origin: Vec<Origin>,
    /// Index of the condition each record was generated from.
    pub condition_index: Vec<usize>,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Flow training data over `(R, Δz)`.
    pub fn flow_data(&self) -> Result<FlowData> {
        let mut states = self.nexts.clone();
        for (mut row, cond) in states.rows_mut().into_iter().zip(self.conditions.rows()) {
            for (j, z) in cond.iter().enumerate() {
                row[j + 1] -= z;
            }
        }
        FlowData::new(self.conditions.clone(), states, self.weights.clone())
    }

    /// Records whose condition index is a multiple of `stride`.
    pub fn thinned(&self, stride: usize) -> TransitionDataset {
        let stride = stride.max(1);
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.condition_index[i] % stride == 0).collect();
        self.select(&keep)
    }

    /// The first `keep` records of every condition.
    pub fn leading_samples(&self, keep: usize) -> TransitionDataset {
        let mut seen = 0;
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                if i == 0 || self.condition_index[i] != self.condition_index[i - 1] {
                    seen = 0;
                }
                seen += 1;
                seen <= keep
            })
            .collect();
        self.select(&idx)
    }

    fn select(&self, keep: &[usize]) -> TransitionDataset {
        TransitionDataset {
            conditions: self.conditions.select(Axis(0), keep),
            nexts: self.nexts.select(Axis(0), keep),
            weights: keep.iter().map(|&i| self.weights[i]).collect(),
            origin: keep.iter().map(|&i| self.origin[i]).collect(),
            condition_index: keep.iter().map(|&i| self.condition_index[i]).collect(),
        }
    }

    /// Every record with weight one.
    pub fn unweighted(&self) -> TransitionDataset {
        TransitionDataset {
            weights: vec![1.0; self.len()],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftRemovalConfig {
    pub samples_per_condition: usize,
    pub lambda: RiskAversion,
    pub solver: SolverConfig,
    /// Largest tolerated fraction of conditions without a converged solve.
    pub max_skip_fraction: f64,
    /// Only one record in `training_stride` trains `q_θ`.
    pub training_stride: usize,
    pub thinning: Thinning,
}

/// How the training records of `q_θ` are thinned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Thinning {
    /// Every sample of every `training_stride`-th condition.
    Conditions,
    /// The leading `1 / training_stride` of every condition's samples.
    Samples,
}

impl DriftRemovalConfig {
    pub fn thin(&self, data: &TransitionDataset) -> TransitionDataset {
        match self.thinning {
            Thinning::Conditions => data.thinned(self.training_stride),
            Thinning::Samples => data.leading_samples(self.samples_per_condition.div_ceil(self.training_stride.max(1))),
        }
    }
}

impl Default for DriftRemovalConfig {
    fn default() -> Self {
        DriftRemovalConfig {
            samples_per_condition: 1024,
            lambda: RiskAversion::default(),
            solver: SolverConfig::default(),
            max_skip_fraction: 0.01,
            training_stride: 6,
            thinning: Thinning::Samples,
        }
    }
}

/// Per-condition outcome of the change of measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDiagnostics {
    pub condition: usize,
    pub converged: bool,
    pub iterations: usize,
    pub action: Vec<f64>,
    /// Sup norm of the reweighted mean gains.
    pub residual: f64,
    pub mean_weight: f64,
    pub min_weight: f64,
    /// Physical (unweighted) mean gain per instrument.
    pub physical_drift: Vec<f64>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDataset {
    pub dataset: TransitionDataset,
    pub diagnostics: Vec<ConditionDiagnostics>,
}

impl WeightedDataset {
    pub fn skipped(&self) -> usize {
        self.diagnostics.iter().filter(|d| !d.converged).count()
    }
}

struct ConditionBlock {
    nexts: Array2<f64>,
    weights: Vec<f64>,
    diag: ConditionDiagnostics,
}

fn one_condition(
    sampler: &dyn TransitionSampler,
    codec: &Codec,
    spec: &Arc<GridSpec>,
    t: usize,
    code: &[f64],
    instruments: &InstrumentSet,
    config: &DriftRemovalConfig,
    seed: u64,
) -> Result<ConditionBlock> {
    let n = config.samples_per_condition;
    let u = sobol_uniforms(n, sampler.dim(), substream_seed(seed, t as u64))?;
    let nexts = sampler.sample_next(code, u.view())?;
    let now = market_from_code(codec, spec, 1.0, code)?;
    let markets = next_markets(codec, spec, nexts.view())?;
    let mut gains = Array2::zeros((n, instruments.len()));
    for (mut row, next) in gains.rows_mut().into_iter().zip(&markets) {
        let g = instrument_gains(&now, next, instruments)?;
        row.assign(&ndarray::ArrayView1::from(&g));
    }
    let physical_drift = gains.mean_axis(Axis(0)).expect("nonempty").to_vec();
    let sample = GainsSample::new(gains)?;
    match solve_optimal_action(&sample, config.lambda, config.solver) {
        Ok(mc) => {
            let residual = reweighted_mean(&sample, &mc.weights).iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let diag = ConditionDiagnostics {
                condition: t,
                converged: true,
                iterations: mc.iterations,
                action: mc.action,
                residual,
                mean_weight: mc.weights.iter().sum::<f64>() / n as f64,
                min_weight: mc.weights.iter().cloned().fold(f64::INFINITY, f64::min),
                physical_drift,
                message: None,
            };
            Ok(ConditionBlock {
                nexts,
                weights: mc.weights,
                diag,
            })
        }
        Err(e @ (Error::NoConvergence { .. } | Error::Solver(_))) => Ok(ConditionBlock {
            nexts: Array2::zeros((0, sampler.dim())),
            weights: Vec::new(),
            diag: ConditionDiagnostics {
                condition: t,
                converged: false,
                iterations: 0,
                action: Vec::new(),
                residual: f64::NAN,
                mean_weight: f64::NAN,
                min_weight: f64::NAN,
                physical_drift,
                message: Some(e.to_string()),
            },
        }),
        Err(e) => Err(e),
    }
}

/// For every condition code, draws `N` next states, solves the utility
/// problem on the instrument gains and emits the weighted samples.
///
/// Conditions are processed in parallel with per-condition substreams and
/// assembled in condition order. Unsolvable conditions are skipped and
/// reported; more than `max_skip_fraction` of them is an error.
pub fn build_weighted_dataset(
    sampler: &dyn TransitionSampler,
    codec: &Codec,
    spec: &Arc<GridSpec>,
    conditions: ArrayView2<'_, f64>,
    instruments: &InstrumentSet,
    config: &DriftRemovalConfig,
    seed: u64,
) -> Result<WeightedDataset> {
    if config.samples_per_condition < 2 {
        return Err(Error::Config("need at least two samples per condition".into()));
    }
    if conditions.nrows() == 0 {
        return Err(Error::Empty("conditions"));
    }
    instruments.validate(spec)?;
    let codes: Vec<Vec<f64>> = conditions.rows().into_iter().map(|r| r.to_vec()).collect();
    let blocks: Vec<ConditionBlock> = codes
        .par_iter()
        .enumerate()
        .map(|(t, code)| one_condition(sampler, codec, spec, t, code, instruments, config, seed))
        .collect::<Result<_>>()?;
    let skipped = blocks.iter().filter(|b| !b.diag.converged).count();
    if skipped as f64 > config.max_skip_fraction * blocks.len() as f64 {
        return Err(Error::TooManySkipped {
            skipped,
            total: blocks.len(),
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} of {} conditions skipped: no converged change of measure", blocks.len());
    }
    let total: usize = blocks.iter().map(|b| b.weights.len()).sum();
    let l = conditions.ncols();
    let mut cond_rows = Array2::zeros((total, l));
    let mut nexts = Array2::zeros((total, 1 + l));
    let mut weights = Vec::with_capacity(total);
    let mut index = Vec::with_capacity(total);
    let mut r = 0;
    for b in &blocks {
        for (row, w) in b.nexts.rows().into_iter().zip(&b.weights) {
            cond_rows.row_mut(r).assign(&conditions.row(b.diag.condition));
            nexts.row_mut(r).assign(&row);
            weights.push(*w);
            index.push(b.diag.condition);
            r += 1;
        }
    }
    Ok(WeightedDataset {
        dataset: TransitionDataset {
            conditions: cond_rows,
            nexts,
            weights,
            origin: vec![Origin::Generated; total],
            condition_index: index,
        },
        diagnostics: blocks.into_iter().map(|b| b.diag).collect(),
    })
}

/// Trains the risk-neutral simulator on a weighted dataset.
///
/// The model shares the physical simulator's architecture and bounds and
/// starts from `init`'s parameters when given, otherwise from scratch.
pub fn fit_risk_neutral(
    physical: &ConditionalFlowModel,
    dataset: &TransitionDataset,
    init: Option<&ConditionalFlowModel>,
    train: &TrainConfig,
    seed: u64,
) -> Result<(ConditionalFlowModel, TrainReport)> {
    let data = dataset.flow_data()?;
    let widths = physical.conditioners()[0].widths();
    let config = crate::flow::FlowConfig {
        bins: physical.bins(),
        hidden: widths[1..widths.len() - 1].to_vec(),
        ..Default::default()
    };
    let mut model = match init {
        Some(m) => m.clone(),
        None => ConditionalFlowModel::new(physical.bounds().clone(), physical.condition_bounds().clone(), &config, seed)?,
    };
    let report = crate::flow::fit_flow(&mut model, &data, train, substream_seed(seed, 1))?;
    Ok((model, report))
}

/// Histogram of weights on `bins` equal-width bins over `[0, max]`.
pub fn weight_histogram(weights: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let max = weights.iter().cloned().fold(0.0, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for w in weights {
        counts[((w / width) as usize).min(bins - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 * width, (i + 1) as f64 * width, c))
        .collect()
}
