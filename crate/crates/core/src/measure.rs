//! Minimal-entropy change of measure on a Monte Carlo sample of one-step
//! instrument gains.
//!
//! For exponential utility with risk aversion `λ` the optimal hedge `a*`
//! minimizes `L(a) = E[exp(-λ a·dX)]`, and the weights
//! `w_j ∝ exp(-λ a*·dx_j)` turn the sample into a martingale sample.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Relative eigenvalue cutoff below which a direction of the gains'
/// second moment is treated as absent.
const RANK_TOL: f64 = 1e-12;

/// Exponential risk aversion `λ > 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RiskAversion(f64);

impl RiskAversion {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda > 0.0 && lambda.is_finite() {
            Ok(RiskAversion(lambda))
        } else {
            Err(Error::Config(format!("risk aversion must be positive, got {lambda}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for RiskAversion {
    fn default() -> Self {
        RiskAversion(1.0)
    }
}

impl TryFrom<f64> for RiskAversion {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        RiskAversion::new(v)
    }
}

impl From<RiskAversion> for f64 {
    fn from(l: RiskAversion) -> f64 {
        l.0
    }
}

/// `u(x) = (1 - e^{-λx}) / λ`.
pub fn exp_utility(x: f64, lambda: RiskAversion) -> f64 {
    let l = lambda.get();
    -(-l * x).exp_m1() / l
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Instrument {
    Spot,
    Call { maturity: f64, strike: f64 },
}

impl std::fmt::Display for Instrument {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Instrument::Spot => write!(f, "spot"),
            Instrument::Call { maturity, strike } => write!(f, "call_{maturity}_{strike:.2}"),
        }
    }
}

/// Tradeable instruments: the spot and options on grid pillars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstrumentSet(Vec<Instrument>);

impl InstrumentSet {
    pub fn new(spec: &GridSpec, instruments: Vec<Instrument>) -> Result<Self> {
        if instruments.is_empty() {
            return Err(Error::Config("instrument set is empty".into()));
        }
        for (i, a) in instruments.iter().enumerate() {
            if let Instrument::Call { maturity, strike } = a {
                if spec.maturity_index(*maturity).is_none() || spec.strike_index(*strike).is_none() {
                    return Err(Error::Config(format!(
                        "option ({maturity}, {strike}) is not on the grid"
                    )));
                }
            }
            if instruments[..i].contains(a) {
                return Err(Error::Config(format!("duplicate instrument {a:?}")));
            }
        }
        Ok(InstrumentSet(instruments))
    }

    /// The spot and the at-the-money option of every maturity.
    pub fn reference(spec: &Arc<GridSpec>) -> Self {
        let mut v = vec![Instrument::Spot];
        v.extend(spec.maturities().iter().map(|&maturity| Instrument::Call { maturity, strike: 1.0 }));
        InstrumentSet(v)
    }

    pub fn instruments(&self) -> &[Instrument] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks every option still lies on `spec`.
    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        InstrumentSet::new(spec, self.0.clone()).map(|_| ())
    }
}

/// `N × D` matrix of one-step gains, normalized by the current spot.
#[derive(Debug, Clone, PartialEq)]
pub struct GainsSample(Array2<f64>);

impl GainsSample {
    pub fn new(gains: Array2<f64>) -> Result<Self> {
        if gains.nrows() < 2 || gains.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "gains sample needs at least 2 rows and 1 column, got {:?}",
                gains.dim()
            )));
        }
        if gains.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gains sample".into()));
        }
        Ok(GainsSample(gains))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Sample loss `L̂(a)` with its gradient and Hessian.
///
/// Exponents are max-shifted; `log_loss` is always finite while the raw
/// derivatives may overflow for extreme actions.
#[derive(Debug, Clone)]
pub struct UtilityLoss {
    pub log_loss: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl UtilityLoss {
    pub fn loss(&self) -> f64 {
        self.log_loss.exp()
    }
}

fn shifted_exponentials(theta: &[f64], gains: ArrayView2<'_, f64>) -> (Vec<f64>, f64) {
    let th = ArrayView1::from(theta);
    let e: Vec<f64> = gains.rows().into_iter().map(|r| -r.dot(&th)).collect();
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (e.into_iter().map(|x| (x - m).exp()).collect(), m)
}

pub fn utility_loss(action: &[f64], samples: &GainsSample, lambda: RiskAversion) -> Result<UtilityLoss> {
    let d = samples.dim();
    if action.len() != d {
        return Err(Error::Shape {
            expected: d,
            actual: action.len(),
        });
    }
    let l = lambda.get();
    let theta: Vec<f64> = action.iter().map(|a| a * l).collect();
    let (ex, m) = shifted_exponentials(&theta, samples.view());
    let n = samples.len() as f64;
    let mean = ex.iter().sum::<f64>() / n;
    let scale = m.exp() / n;
    let mut gradient = DVector::zeros(d);
    let mut hessian = DMatrix::zeros(d, d);
    for (row, e) in samples.view().rows().into_iter().zip(&ex) {
        for p in 0..d {
            gradient[p] -= l * e * row[p] * scale;
            for q in 0..=p {
                hessian[(p, q)] += l * l * e * row[p] * row[q] * scale;
            }
        }
    }
    for p in 0..d {
        for q in 0..p {
            hessian[(q, p)] = hessian[(p, q)];
        }
    }
    Ok(UtilityLoss {
        log_loss: m + mean.ln(),
        gradient,
        hessian,
    })
}

/// Optimal action, weights and solver diagnostics for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureChange {
    pub action: Vec<f64>,
    pub lambda: RiskAversion,
    pub weights: Vec<f64>,
    /// Sup norm of the reweighted mean gain at the solution.
    pub gradient_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-12,
            max_iter: 100,
        }
    }
}

/// `f(θ) = log N⁻¹ Σ exp(-θ·y_j)` with gradient `-E_p[y]` and Hessian
/// `Cov_p(y)` under the tilted probabilities `p`.
fn tilted(theta: &DVector<f64>, y: &DMatrix<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
    let e = -(y * theta);
    let m = e.max();
    let p = e.map(|x| (x - m).exp());
    let total = p.sum();
    let f = m + (total / y.nrows() as f64).ln();
    let p = p / total;
    let mean = y.transpose() * &p;
    let mut cov = DMatrix::zeros(y.ncols(), y.ncols());
    for (j, row) in y.row_iter().enumerate() {
        let c = row.transpose() - &mean;
        cov += p[j] * &c * c.transpose();
    }
    (f, -mean, cov)
}

fn tilted_value(theta: &DVector<f64>, y: &DMatrix<f64>) -> f64 {
    let e = -(y * theta);
    let m = e.max();
    m + (e.map(|x| (x - m).exp()).sum() / y.nrows() as f64).ln()
}

/// Damped, Levenberg-regularized Newton solve of `min_a L̂(a)`.
///
/// Works on `θ = λa` and the convex merit `log L̂`; directions in which the
/// sample has no variation keep a zero action.
pub fn solve_optimal_action(samples: &GainsSample, lambda: RiskAversion, config: SolverConfig) -> Result<MeasureChange> {
    let n = samples.len();
    let d = samples.dim();
    let live: Vec<usize> = (0..d)
        .filter(|&j| samples.view().column(j).iter().any(|v| *v != 0.0))
        .collect();
    let x = DMatrix::from_fn(n, live.len(), |i, j| samples.view()[(i, live[j])]);
    let moment = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(moment);
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..live.len()).filter(|&i| eig.eigenvalues[i] > RANK_TOL * top).collect();
    let mut theta_live = DVector::zeros(live.len());
    let mut iterations = 0;
    if !keep.is_empty() {
        let basis = DMatrix::from_fn(live.len(), keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
        let y = &x * &basis;
        let r = keep.len();
        let mut theta = DVector::zeros(r);
        let (mut f, mut g, mut h) = tilted(&theta, &y);
        loop {
            if g.amax() <= config.tol {
                break;
            }
            if iterations >= config.max_iter {
                return Err(Error::NoConvergence {
                    iterations,
                    residual: g.amax(),
                });
            }
            iterations += 1;
            let ridge = 1e-14 * h.trace().max(f64::MIN_POSITIVE);
            let mut mu = 0.0;
            let step = loop {
                let reg = &h + DMatrix::identity(r, r) * mu;
                if let Some(ch) = reg.cholesky() {
                    break ch.solve(&(-&g));
                }
                mu = if mu == 0.0 { ridge } else { mu * 10.0 };
                if !mu.is_finite() {
                    return Err(Error::Solver("Hessian regularization failed".into()));
                }
            };
            let slope = g.dot(&step);
            let mut t = 1.0;
            // below roundoff the merit cannot rank steps; trust Newton
            let mut accepted = -slope <= 1e-13 * (1.0 + f.abs());
            if accepted {
                theta += &step;
            }
            for _ in 0..if accepted { 0 } else { 60 } {
                let trial = &theta + &step * t;
                let ft = tilted_value(&trial, &y);
                if ft.is_finite() && ft <= f + 1e-4 * t * slope {
                    theta = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return Err(Error::NoConvergence {
                    iterations,
                    residual: g.amax(),
                });
            }
            (f, g, h) = tilted(&theta, &y);
        }
        theta_live = basis * theta;
    }
    let mut theta = vec![0.0; d];
    for (j, t) in live.iter().zip(theta_live.iter()) {
        theta[*j] = *t;
    }
    let weights = weights_for_theta(&theta, samples);
    let gradient_norm = reweighted_mean(samples, &weights).iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let l = lambda.get();
    Ok(MeasureChange {
        action: theta.iter().map(|t| t / l).collect(),
        lambda,
        weights,
        gradient_norm,
        iterations,
    })
}

fn weights_for_theta(theta: &[f64], samples: &GainsSample) -> Vec<f64> {
    let (ex, _) = shifted_exponentials(theta, samples.view());
    let mean = ex.iter().sum::<f64>() / ex.len() as f64;
    ex.into_iter().map(|e| e / mean).collect()
}

/// `w_j = exp(-λ a·dx_j) / N⁻¹Σ_i exp(-λ a·dx_i)`.
pub fn compute_weights(samples: &GainsSample, action: &[f64], lambda: RiskAversion) -> Result<Vec<f64>> {
    if action.len() != samples.dim() {
        return Err(Error::Shape {
            expected: samples.dim(),
            actual: action.len(),
        });
    }
    let theta: Vec<f64> = action.iter().map(|a| a * lambda.get()).collect();
    Ok(weights_for_theta(&theta, samples))
}

/// Realized hedge gains `G*_j = a·dx_j`.
pub fn hedge_gains(samples: &GainsSample, action: &[f64]) -> Vec<f64> {
    let a = ArrayView1::from(action);
    samples.view().rows().into_iter().map(|r| r.dot(&a)).collect()
}

/// `N⁻¹ Σ_j w_j dx_j` per instrument.
pub fn reweighted_mean(samples: &GainsSample, weights: &[f64]) -> Vec<f64> {
    let n = samples.len() as f64;
    samples
        .view()
        .columns()
        .into_iter()
        .map(|c| c.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / n)
        .collect()
}
