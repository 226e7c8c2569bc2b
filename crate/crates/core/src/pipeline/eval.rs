//! Monte Carlo drift and optimal-PnL statistics of a simulator at a
//! condition.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, MarketState};
use crate::measure::{exp_utility, hedge_gains, solve_optimal_action, GainsSample, Instrument, InstrumentSet, RiskAversion, SolverConfig};

use super::{instrument_gains, instrument_prices, market_from_code, next_markets, sobol_uniforms, TransitionSampler};

/// Instrument gains of `n` one-step samples from `sampler` at `code`,
/// together with the current market.
pub fn sample_gains(
    sampler: &dyn TransitionSampler,
    codec: &Codec,
    spec: &Arc<GridSpec>,
    code: &[f64],
    instruments: &InstrumentSet,
    n: usize,
    seed: u64,
) -> Result<(MarketState, Array2<f64>, Array2<f64>)> {
    let u = sobol_uniforms(n, sampler.dim(), seed)?;
    let nexts = sampler.sample_next(code, u.view())?;
    let now = market_from_code(codec, spec, 1.0, code)?;
    let mut gains = Array2::zeros((n, instruments.len()));
    // decode in chunks to bound memory at large n
    for start in (0..n).step_by(8192) {
        let end = (start + 8192).min(n);
        let markets = next_markets(codec, spec, nexts.slice(ndarray::s![start..end, ..]))?;
        for (r, next) in markets.iter().enumerate() {
            let g = instrument_gains(&now, next, instruments)?;
            gains.row_mut(start + r).assign(&ndarray::ArrayView1::from(&g));
        }
    }
    Ok((now, nexts, gains))
}

/// Drift of one instrument under both measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentDrift {
    pub instrument: Instrument,
    pub price: f64,
    #[serde(rename = "P drift")]
    pub p_drift: f64,
    #[serde(rename = "Q drift")]
    pub q_drift: f64,
    #[serde(rename = "P drift (%)")]
    pub p_drift_pct: f64,
    #[serde(rename = "Q drift (%)")]
    pub q_drift_pct: f64,
    /// `|P %| / |Q %|`; `None` when the risk-neutral drift is exactly zero.
    #[serde(rename = "Ratio")]
    pub ratio: Option<f64>,
    pub p_std_error: f64,
    pub q_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub condition: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub instruments: Vec<InstrumentDrift>,
}

/// Column means and standard errors.
pub fn mean_and_error(gains: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = gains.nrows() as f64;
    let mean = gains.mean_axis(Axis(0)).expect("nonempty").to_vec();
    let err = gains
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt())
        .collect();
    (mean, err)
}

/// Builds the drift table from gain samples under both measures.
pub fn drift_report(
    instruments: &InstrumentSet,
    prices: &[f64],
    p_gains: &Array2<f64>,
    q_gains: &Array2<f64>,
    condition: Vec<f64>,
    seed: u64,
) -> DriftReport {
    let (p, pe) = mean_and_error(p_gains);
    let (q, qe) = mean_and_error(q_gains);
    let rows = instruments
        .instruments()
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let p_pct = 100.0 * p[i] / prices[i];
            let q_pct = 100.0 * q[i] / prices[i];
            InstrumentDrift {
                instrument: *inst,
                price: prices[i],
                p_drift: p[i],
                q_drift: q[i],
                p_drift_pct: p_pct,
                q_drift_pct: q_pct,
                ratio: (q_pct != 0.0).then(|| p_pct.abs() / q_pct.abs()),
                p_std_error: pe[i],
                q_std_error: qe[i],
            }
        })
        .collect();
    DriftReport {
        condition,
        samples: p_gains.nrows(),
        seed,
        instruments: rows,
    }
}

/// MC drift per instrument under the physical and the risk-neutral
/// simulator at the condition code, with common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_drift(
    physical: &dyn TransitionSampler,
    risk_neutral: &dyn TransitionSampler,
    codec: &Codec,
    spec: &Arc<GridSpec>,
    code: &[f64],
    instruments: &InstrumentSet,
    n: usize,
    seed: u64,
) -> Result<DriftReport> {
    if n < 2 {
        return Err(Error::Config("drift evaluation needs at least two samples".into()));
    }
    let (now, _, p) = sample_gains(physical, codec, spec, code, instruments, n, seed)?;
    let (_, _, q) = sample_gains(risk_neutral, codec, spec, code, instruments, n, seed)?;
    let prices = instrument_prices(&now, instruments)?;
    Ok(drift_report(instruments, &prices, &p, &q, code.to_vec(), seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnlReport {
    pub action: Vec<f64>,
    pub lambda: RiskAversion,
    pub expected_utility: f64,
    pub certainty_equivalent: f64,
    /// `(spot move, a*·dX)` per sample.
    pub scatter: Vec<(f64, f64)>,
}

/// Certainty equivalent `u⁻¹(E u)`.
pub fn certainty_equivalent(expected_utility: f64, lambda: RiskAversion) -> f64 {
    let l = lambda.get();
    -(-l * expected_utility).ln_1p() / l
}

/// Optimal exponential-utility trade on the gains and its statistics.
pub fn pnl_from_gains(gains: Array2<f64>, lambda: RiskAversion, solver: SolverConfig, spot_column: Option<usize>) -> Result<PnlReport> {
    let sample = GainsSample::new(gains)?;
    let mc = solve_optimal_action(&sample, lambda, solver)?;
    let pnl = hedge_gains(&sample, &mc.action);
    let n = pnl.len() as f64;
    let eu = pnl.iter().map(|g| exp_utility(*g, lambda)).sum::<f64>() / n;
    let spot: Vec<f64> = match spot_column {
        Some(c) => sample.view().column(c).to_vec(),
        None => vec![f64::NAN; pnl.len()],
    };
    Ok(PnlReport {
        action: mc.action,
        lambda,
        expected_utility: eu,
        certainty_equivalent: certainty_equivalent(eu, lambda),
        scatter: spot.into_iter().zip(pnl).collect(),
    })
}

/// Solves the utility problem on `n` samples of `sampler` at `code`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pnl(
    sampler: &dyn TransitionSampler,
    codec: &Codec,
    spec: &Arc<GridSpec>,
    code: &[f64],
    lambda: RiskAversion,
    instruments: &InstrumentSet,
    n: usize,
    seed: u64,
) -> Result<PnlReport> {
    let (_, _, gains) = sample_gains(sampler, codec, spec, code, instruments, n, seed)?;
    let spot = instruments.instruments().iter().position(|i| *i == Instrument::Spot);
    pnl_from_gains(gains, lambda, SolverConfig::default(), spot)
}
