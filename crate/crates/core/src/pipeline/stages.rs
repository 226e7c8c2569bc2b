//! Stage runners driven by a [`PipelineConfig`], shared by the command
//! line and the end-to-end checks.

use std::sync::Arc;

use ndarray::{s, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{fit_autoencoder, Codec};
use crate::config::{PipelineConfig, Stage};
use crate::error::{Error, Result};
use crate::flow::ConditionalFlowModel;
use crate::grid::GridSpec;
use crate::io::{FidelitySummary, PnlSummary};
use crate::measure::{Instrument, SolverConfig};
use crate::training::TrainReport;

use super::dataset::{build_weighted_dataset, fit_risk_neutral, weight_histogram, TransitionDataset, WeightedDataset};
use super::eval::{drift_report, mean_and_error, pnl_from_gains, sample_gains, DriftReport, PnlReport};
use super::kde::{kde2, Kde2};
use super::synth::SyntheticMarket;
use super::{fit_physical, instrument_prices, substream_seed, CompressedSeries, FlowSampler, MarketSeries, PhysicalFit};

/// The configured synthetic market on the configured grid.
pub fn synthetic_series(config: &PipelineConfig) -> Result<MarketSeries> {
    SyntheticMarket::new(config.synthetic.clone().unwrap_or_default(), config.spec())?.generate()
}

/// Trains the codec; standardization uses the training split only.
pub fn codec_stage(series: &MarketSeries, config: &PipelineConfig) -> Result<(Codec, TrainReport)> {
    let logs = series.log_dlv();
    let train = &config.training.codec;
    let (tr, _) = train.split(logs.nrows())?;
    let seed = config.stage_seed(Stage::Codec);
    let mut codec = Codec::for_data(logs.slice(s![tr, ..]), &config.codec, seed)?;
    let report = fit_autoencoder(&mut codec, logs.view(), train, substream_seed(seed, 1))?;
    log::info!(
        "codec: {} epochs, reconstruction MSE {:e}",
        report.epochs_run,
        codec.reconstruction_mse(logs.view())?
    );
    Ok((codec, report))
}

pub fn physical_stage(series: &MarketSeries, codec: &Codec, config: &PipelineConfig) -> Result<PhysicalFit> {
    let fit = fit_physical(series, codec, &config.flow, &config.training.physical, config.stage_seed(Stage::Physical))?;
    log::info!(
        "physical: {} epochs, held-out NLL {:.4} (histogram baseline {:.4})",
        fit.report.epochs_run,
        fit.heldout_nll,
        fit.baseline_nll
    );
    Ok(fit)
}

#[derive(Debug, Clone)]
pub struct DriftRemoval {
    /// Thinned training records, with the diagnostics of all conditions.
    pub weighted: WeightedDataset,
    /// Weight histogram pooled over all conditions.
    pub histogram: Vec<(f64, f64, usize)>,
}

/// Runs the change of measure on every historical state.
pub fn drift_removal_stage(
    physical: &ConditionalFlowModel,
    codec: &Codec,
    spec: &Arc<GridSpec>,
    codes: ArrayView2<'_, f64>,
    config: &PipelineConfig,
) -> Result<DriftRemoval> {
    let dr = &config.drift_removal;
    let full = build_weighted_dataset(
        &FlowSampler(physical),
        codec,
        spec,
        codes,
        &config.instrument_set()?,
        dr,
        config.stage_seed(Stage::DriftRemoval),
    )?;
    let histogram = weight_histogram(&full.dataset.weights, config.evaluation.weight_bins);
    log::info!(
        "drift removal: {} conditions, {} skipped, {} records",
        full.diagnostics.len(),
        full.skipped(),
        full.dataset.len()
    );
    Ok(DriftRemoval {
        weighted: WeightedDataset {
            dataset: dr.thin(&full.dataset),
            diagnostics: full.diagnostics,
        },
        histogram,
    })
}

pub fn risk_neutral_stage(
    physical: &ConditionalFlowModel,
    dataset: &TransitionDataset,
    config: &PipelineConfig,
) -> Result<(ConditionalFlowModel, TrainReport)> {
    let (model, report) = fit_risk_neutral(physical, dataset, None, &config.training.risk_neutral, config.stage_seed(Stage::RiskNeutral))?;
    log::info!("risk neutral: {} records, {} epochs", dataset.len(), report.epochs_run);
    Ok((model, report))
}

/// The last of `n` states followed by `k` distinct random earlier ones in
/// increasing order.
pub fn evaluation_conditions(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Empty("history"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, n - 1, k.min(n - 1)).into_vec();
    picks.sort_unstable();
    let mut out = vec![n - 1];
    out.extend(picks);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub condition_indices: Vec<usize>,
    pub drift: Vec<DriftReport>,
    pub pnl: Vec<PnlSummary>,
    pub fidelity: Vec<FidelitySummary>,
    /// Physical and risk-neutral trades at the first condition.
    pub scatter: (PnlReport, PnlReport),
    /// `(R, z_1)` densities at the first condition.
    pub kde: Vec<(String, Kde2)>,
}

fn column_std(v: ndarray::ArrayView1<'_, f64>) -> f64 {
    let n = v.len() as f64;
    let m = v.sum() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Drift, optimal trade and marginal statistics of both simulators at the
/// evaluation conditions, with common random numbers per condition.
pub fn evaluation_stage(
    physical: &ConditionalFlowModel,
    risk_neutral: &ConditionalFlowModel,
    codec: &Codec,
    spec: &Arc<GridSpec>,
    codes: ArrayView2<'_, f64>,
    config: &PipelineConfig,
) -> Result<Evaluation> {
    let ev = &config.evaluation;
    let set = config.instrument_set()?;
    let seed = config.stage_seed(Stage::Evaluation);
    let lambda = config.drift_removal.lambda;
    let spot = set.instruments().iter().position(|i| *i == Instrument::Spot);
    let indices = evaluation_conditions(codes.nrows(), ev.random_conditions, config.stage_seed(Stage::Conditions))?;
    let (mut drift, mut pnl, mut fidelity, mut kde) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut scatter = None;
    for &t in &indices {
        let code = codes.row(t).to_vec();
        let s = substream_seed(seed, t as u64);
        let (now, p_next, p_gains) = sample_gains(&FlowSampler(physical), codec, spec, &code, &set, ev.samples, s)?;
        let (_, q_next, q_gains) = sample_gains(&FlowSampler(risk_neutral), codec, spec, &code, &set, ev.samples, s)?;
        let prices = instrument_prices(&now, &set)?;
        drift.push(drift_report(&set, &prices, &p_gains, &q_gains, code.clone(), s));

        let p = pnl_from_gains(p_gains, lambda, SolverConfig::default(), spot)?;
        let q = pnl_from_gains(q_gains, lambda, SolverConfig::default(), spot)?;
        pnl.push(PnlSummary::new(t, &p, &q));

        let (pm, pe) = mean_and_error(&p_next);
        let (qm, qe) = mean_and_error(&q_next);
        fidelity.push(FidelitySummary {
            condition_index: t,
            physical_return_std: column_std(p_next.column(0)),
            risk_neutral_return_std: column_std(q_next.column(0)),
            latent_mean_shift: (1..pm.len()).map(|j| (qm[j] - pm[j]) / (pe[j].hypot(qe[j]))).collect(),
        });

        if scatter.is_none() {
            let m = ev.kde_samples.min(ev.samples);
            for (name, next) in [("physical", &p_next), ("risk_neutral", &q_next)] {
                let pairs: Vec<(f64, f64)> = next
                    .slice(s![..m, ..2])
                    .axis_iter(Axis(0))
                    .map(|r| (r[0], r[1]))
                    .collect();
                kde.push((name.to_string(), kde2(&pairs, ev.kde_points)?));
            }
            scatter = Some((p, q));
        }
    }
    Ok(Evaluation {
        condition_indices: indices,
        drift,
        pnl,
        fidelity,
        scatter: scatter.expect("at least one condition"),
        kde,
    })
}

/// Every stage on one market series.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub codec: Codec,
    pub codec_report: TrainReport,
    pub physical: PhysicalFit,
    pub drift_removal: DriftRemoval,
    pub risk_neutral: ConditionalFlowModel,
    pub risk_neutral_report: TrainReport,
    pub evaluation: Evaluation,
}

pub fn run_pipeline(series: &MarketSeries, config: &PipelineConfig) -> Result<PipelineRun> {
    config.validate()?;
    let spec = series.spec();
    let (codec, codec_report) = codec_stage(series, config)?;
    let physical = physical_stage(series, &codec, config)?;
    let codes = physical.compressed.codes.clone();
    let drift_removal = drift_removal_stage(&physical.model, &codec, spec, codes.view(), config)?;
    let (risk_neutral, risk_neutral_report) = risk_neutral_stage(&physical.model, &drift_removal.weighted.dataset, config)?;
    let evaluation = evaluation_stage(&physical.model, &risk_neutral, &codec, spec, codes.view(), config)?;
    Ok(PipelineRun {
        codec,
        codec_report,
        physical,
        drift_removal,
        risk_neutral,
        risk_neutral_report,
        evaluation,
    })
}

/// Codes of every historical state under `codec`.
pub fn historical_codes(series: &MarketSeries, codec: &Codec) -> Result<ndarray::Array2<f64>> {
    Ok(CompressedSeries::new(series, codec)?.codes)
}
