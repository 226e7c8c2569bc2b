//! Floating maturity/strike grid of normalized call prices, its discrete
//! local volatility (DLV) parametrization and the roll-down of fixed-strike
//! options from one day to the next.
//!
//! Prices are normalized to a unit forward: the entry at maturity `i` and
//! relative strike `j` pays `(S_{t+τ_i}/S_t - k_j)^+`. The DLV map builds the
//! grid maturity by maturity from the intrinsic layer at `τ = 0`, applying
//! implicit discrete Dupire steps
//!
//! ```text
//! C_next - Δτ · ½ σ_j² k_j² δ²C_next = C_prev
//! ```
//!
//! with the boundary strikes pinned to intrinsic value. Each maturity
//! interval is split into equal substeps no longer than
//! [`GridSpec::max_substep_days`]; with a single substep the inverse map is
//! closed form, otherwise it is a per-layer Newton solve.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHECK_TOL: f64 = 1e-12;

/// Maturity/strike pillars of the floating grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GridSpecRaw", into = "GridSpecRaw")]
pub struct GridSpec {
    maturities: Vec<f64>,
    strikes: Vec<f64>,
    low_boundary_strike: f64,
    high_boundary_strike: f64,
    day_count: f64,
    max_substep_days: f64,
    // derived
    ext_strikes: Vec<f64>,
    ext_taus: Vec<f64>,
    substeps: Vec<usize>,
    stencil: Vec<Stencil>,
    kink: Vec<f64>,
    atm: usize,
}

#[derive(Debug, Clone, Copy)]
struct Stencil {
    lower: f64,
    diag: f64,
    upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpecRaw {
    #[serde(default = "default_maturities")]
    maturities: Vec<f64>,
    #[serde(default = "default_strikes")]
    strikes: Vec<f64>,
    #[serde(default = "default_low")]
    low_boundary_strike: f64,
    #[serde(default = "default_high")]
    high_boundary_strike: f64,
    #[serde(default = "default_day_count")]
    day_count: f64,
    #[serde(default = "default_substep")]
    max_substep_days: f64,
}

fn default_maturities() -> Vec<f64> {
    vec![60.0, 120.0]
}

fn default_strikes() -> Vec<f64> {
    (0..13).map(|i| (70 + 5 * i) as f64 / 100.0).collect()
}

fn default_low() -> f64 {
    0.4
}

fn default_high() -> f64 {
    1.6
}

fn default_day_count() -> f64 {
    252.0
}

fn default_substep() -> f64 {
    10.0
}

impl TryFrom<GridSpecRaw> for GridSpec {
    type Error = Error;

    fn try_from(raw: GridSpecRaw) -> Result<Self> {
        GridSpec::new(
            raw.maturities,
            raw.strikes,
            raw.low_boundary_strike,
            raw.high_boundary_strike,
            raw.day_count,
            raw.max_substep_days,
        )
    }
}

impl From<GridSpec> for GridSpecRaw {
    fn from(spec: GridSpec) -> Self {
        GridSpecRaw {
            maturities: spec.maturities,
            strikes: spec.strikes,
            low_boundary_strike: spec.low_boundary_strike,
            high_boundary_strike: spec.high_boundary_strike,
            day_count: spec.day_count,
            max_substep_days: spec.max_substep_days,
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::new(
            default_maturities(),
            default_strikes(),
            default_low(),
            default_high(),
            default_day_count(),
            default_substep(),
        )
        .expect("reference grid is valid")
    }
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl GridSpec {
    pub fn new(
        maturities: Vec<f64>,
        strikes: Vec<f64>,
        low_boundary_strike: f64,
        high_boundary_strike: f64,
        day_count: f64,
        max_substep_days: f64,
    ) -> Result<Self> {
        let bad = |msg: &str| Err(Error::InvalidGrid(msg.to_string()));
        if maturities.is_empty() || strikes.is_empty() {
            return bad("maturities and strikes must be nonempty");
        }
        if maturities.iter().chain(&strikes).any(|x| !x.is_finite()) {
            return bad("non-finite pillar");
        }
        if !strictly_increasing(&maturities) || maturities[0] < 1.0 {
            return bad("maturities must be strictly increasing and at least one day");
        }
        if !strictly_increasing(&strikes) || strikes[0] <= 0.0 {
            return bad("strikes must be strictly increasing and positive");
        }
        if !(low_boundary_strike > 0.0 && low_boundary_strike < strikes[0]) {
            return bad("low boundary strike must lie in (0, min strike)");
        }
        if !(high_boundary_strike > strikes[strikes.len() - 1]) || !high_boundary_strike.is_finite() {
            return bad("high boundary strike must exceed the max strike");
        }
        if !(day_count > 0.0 && day_count.is_finite()) {
            return bad("day count must be positive");
        }
        if !(max_substep_days > 0.0) {
            return bad("max substep length must be positive");
        }
        let Some(atm) = strikes.iter().position(|&k| (k - 1.0).abs() < 1e-12) else {
            return bad("strikes must contain the at-the-money pillar 1.0");
        };

        let mut ext_strikes = Vec::with_capacity(strikes.len() + 2);
        ext_strikes.push(low_boundary_strike);
        ext_strikes.extend_from_slice(&strikes);
        ext_strikes.push(high_boundary_strike);

        let mut ext_taus = Vec::with_capacity(maturities.len() + 1);
        ext_taus.push(0.0);
        ext_taus.extend_from_slice(&maturities);

        let substeps = ext_taus
            .windows(2)
            .map(|w| ((w[1] - w[0]) / max_substep_days - 1e-9).ceil().max(1.0) as usize)
            .collect();

        let stencil = (1..=strikes.len())
            .map(|j| {
                let hm = ext_strikes[j] - ext_strikes[j - 1];
                let hp = ext_strikes[j + 1] - ext_strikes[j];
                Stencil {
                    lower: 2.0 / (hm * (hm + hp)),
                    diag: 2.0 / (hm * hp),
                    upper: 2.0 / (hp * (hm + hp)),
                }
            })
            .collect::<Vec<Stencil>>();

        // second difference of the intrinsic payoff: the payoff is linear
        // away from the money, and the slope jumps by one at the ATM pillar
        let kink = (0..strikes.len())
            .map(|j| {
                if j == atm {
                    2.0 / (ext_strikes[j + 2] - ext_strikes[j])
                } else {
                    0.0
                }
            })
            .collect();

        Ok(GridSpec {
            maturities,
            strikes,
            low_boundary_strike,
            high_boundary_strike,
            day_count,
            max_substep_days,
            ext_strikes,
            ext_taus,
            substeps,
            stencil,
            kink,
            atm,
        })
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn low_boundary_strike(&self) -> f64 {
        self.low_boundary_strike
    }

    pub fn high_boundary_strike(&self) -> f64 {
        self.high_boundary_strike
    }

    pub fn day_count(&self) -> f64 {
        self.day_count
    }

    pub fn max_substep_days(&self) -> f64 {
        self.max_substep_days
    }

    /// Number of maturity pillars `m`.
    pub fn m(&self) -> usize {
        self.maturities.len()
    }

    /// Number of strike pillars `n`.
    pub fn n(&self) -> usize {
        self.strikes.len()
    }

    /// Total number of grid nodes `m·n`.
    pub fn len(&self) -> usize {
        self.m() * self.n()
    }


    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the `k = 1` strike pillar.
    pub fn atm_index(&self) -> usize {
        self.atm
    }

    pub fn maturity_index(&self, tau: f64) -> Option<usize> {
        self.maturities.iter().position(|&t| (t - tau).abs() < 1e-9)
    }

    pub fn strike_index(&self, k: f64) -> Option<usize> {
        self.strikes.iter().position(|&s| (s - k).abs() < 1e-9)
    }

    /// Substeps used by the DLV map for each maturity interval.
    pub fn substeps(&self) -> &[usize] {
        &self.substeps
    }

    fn layer_dt(&self, layer: usize) -> f64 {
        (self.ext_taus[layer + 1] - self.ext_taus[layer]) / self.day_count / self.substeps[layer] as f64
    }

    fn intrinsic(k: f64) -> f64 {
        (1.0 - k).max(0.0)
    }

    /// Column names of the CSV market schema, maturity-major.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len());
        for &tau in &self.maturities {
            for &k in &self.strikes {
                names.push(format!("dlv_{}_{}", fmt_pillar(tau), fmt_strike(k)));
            }
        }
        names
    }

    /// Second difference of the call prices of one layer, given as time
    /// values, at interior node `j`.
    fn butterfly(&self, time_values: &[f64], j: usize) -> f64 {
        let (left, right) = self.neighbours(time_values, j);
        let s = self.stencil[j];
        s.lower * left - s.diag * time_values[j] + s.upper * right + self.kink[j]
    }

    /// Sum of absolute terms entering [`Self::butterfly`], the roundoff scale.
    fn butterfly_scale(&self, time_values: &[f64], j: usize) -> f64 {
        let (left, right) = self.neighbours(time_values, j);
        let s = self.stencil[j];
        s.lower * left.abs() + s.diag * time_values[j].abs() + s.upper * right.abs() + self.kink[j].abs()
    }

    fn neighbours(&self, time_values: &[f64], j: usize) -> (f64, f64) {
        let left = if j == 0 { 0.0 } else { time_values[j - 1] };
        let right = if j + 1 == time_values.len() { 0.0 } else { time_values[j + 1] };
        (left, right)
    }
}

fn fmt_pillar(tau: f64) -> String {
    if tau.fract() == 0.0 {
        format!("{}", tau as i64)
    } else {
        format!("{tau}")
    }
}

fn fmt_strike(k: f64) -> String {
    format!("{k:.2}")
}

impl PartialEq for GridSpec {
    fn eq(&self, other: &Self) -> bool {
        self.maturities == other.maturities
            && self.strikes == other.strikes
            && self.low_boundary_strike == other.low_boundary_strike
            && self.high_boundary_strike == other.high_boundary_strike
            && self.day_count == other.day_count
            && self.max_substep_days == other.max_substep_days
    }
}

/// Positive DLV grid, maturity-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DlvGrid {
    spec: Arc<GridSpec>,
    values: Vec<f64>,
}

impl DlvGrid {
    pub fn new(spec: Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::Shape {
                expected: spec.len(),
                actual: values.len(),
            });
        }
        let n = spec.n();
        if let Some(idx) = values.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::NonPositiveDlv {
                maturity: idx / n,
                strike: idx % n,
                value: values[idx],
            });
        }
        Ok(DlvGrid { spec, values })
    }

    /// Flat DLV grid.
    pub fn flat(spec: Arc<GridSpec>, sigma: f64) -> Result<Self> {
        let len = spec.len();
        DlvGrid::new(spec, vec![sigma; len])
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.spec.n() + j]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Normalized call prices on the floating grid, maturity-major.
///
/// Stored as time values `C - (1 - k)^+` so that deep in-the-money calendar
/// spreads keep full relative precision.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceGrid {
    spec: Arc<GridSpec>,
    time_values: Vec<f64>,
}

impl PriceGrid {
    /// Wraps raw prices without any arbitrage validation; see
    /// [`check_static_arbitrage`].
    pub fn new(spec: Arc<GridSpec>, prices: Vec<f64>) -> Result<Self> {
        if prices.len() != spec.len() {
            return Err(Error::Shape {
                expected: spec.len(),
                actual: prices.len(),
            });
        }
        let n = spec.n();
        let time_values = prices
            .iter()
            .enumerate()
            .map(|(idx, c)| c - GridSpec::intrinsic(spec.strikes[idx % n]))
            .collect();
        Ok(PriceGrid { spec, time_values })
    }

    pub fn from_time_values(spec: Arc<GridSpec>, time_values: Vec<f64>) -> Result<Self> {
        if time_values.len() != spec.len() {
            return Err(Error::Shape {
                expected: spec.len(),
                actual: time_values.len(),
            });
        }
        Ok(PriceGrid { spec, time_values })
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    /// Call prices, maturity-major.
    pub fn prices(&self) -> Vec<f64> {
        let n = self.spec.n();
        self.time_values
            .iter()
            .enumerate()
            .map(|(idx, v)| GridSpec::intrinsic(self.spec.strikes[idx % n]) + v)
            .collect()
    }

    pub fn time_values(&self) -> &[f64] {
        &self.time_values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        GridSpec::intrinsic(self.spec.strikes[j]) + self.time_value(i, j)
    }

    pub fn time_value(&self, i: usize, j: usize) -> f64 {
        self.time_values[i * self.spec.n() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, price: f64) {
        let n = self.spec.n();
        self.time_values[i * n + j] = price - GridSpec::intrinsic(self.spec.strikes[j]);
    }

    fn layer(&self, i: usize) -> &[f64] {
        let n = self.spec.n();
        &self.time_values[i * n..(i + 1) * n]
    }

    /// Price on the augmented lattice: maturity layer 0 is the intrinsic
    /// layer at `τ = 0`, strike columns 0 and `n + 1` are the boundary pins.
    fn lattice(&self, ia: usize, ja: usize) -> f64 {
        let n = self.spec.n();
        let intrinsic = GridSpec::intrinsic(self.spec.ext_strikes[ja]);
        if ia == 0 || ja == 0 || ja == n + 1 {
            intrinsic
        } else {
            intrinsic + self.time_values[(ia - 1) * n + ja - 1]
        }
    }
}

/// Spot level together with its floating call-price grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub spot: f64,
    pub prices: PriceGrid,
}

impl MarketState {
    pub fn new(spot: f64, prices: PriceGrid) -> Result<Self> {
        if !(spot > 0.0 && spot.is_finite()) {
            return Err(Error::NonFinite(format!("spot level {spot}")));
        }
        Ok(MarketState { spot, prices })
    }
}

/// Solves `(I - L) X = B` for the `n × cols` row-major block `rhs` in place,
/// where `L` is the implicit step operator with coefficients
/// `coef[j] = ½ σ_j² k_j² Δt` and zero boundary data.
fn implicit_solve(spec: &GridSpec, coef: &[f64], rhs: &mut [f64], cols: usize, scratch: &mut Vec<f64>) -> Result<()> {
    let n = spec.n();
    scratch.clear();
    scratch.resize(n, 0.0);
    let mut denom = 1.0;
    for j in 0..n {
        let s = spec.stencil[j];
        let lower = -coef[j] * s.lower;
        denom = 1.0 + coef[j] * s.diag - if j == 0 { 0.0 } else { lower * scratch[j - 1] };
        if !(denom > 0.0 && denom.is_finite()) {
            return Err(Error::Solver(format!("pivot {denom} at node {j}")));
        }
        scratch[j] = if j + 1 < n { -coef[j] * s.upper / denom } else { 0.0 };
        for c in 0..cols {
            let carried = if j == 0 { 0.0 } else { lower * rhs[(j - 1) * cols + c] };
            rhs[j * cols + c] = (rhs[j * cols + c] - carried) / denom;
        }
    }
    let _ = denom;
    for j in (0..n - 1).rev() {
        for c in 0..cols {
            rhs[j * cols + c] -= scratch[j] * rhs[(j + 1) * cols + c];
        }
    }
    Ok(())
}

fn layer_coefficients(spec: &GridSpec, variance: &[f64], dt: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend(
        variance
            .iter()
            .zip(&spec.strikes)
            .map(|(&v, &k)| 0.5 * v * k * k * dt),
    );
}

/// One implicit step on time values: `V_next - L V_next = V + L I`.
fn step_time_values(spec: &GridSpec, coef: &[f64], layer: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
    for ((v, c), kink) in layer.iter_mut().zip(coef).zip(&spec.kink) {
        *v += c * kink;
    }
    implicit_solve(spec, coef, layer, 1, scratch)
}

/// Maps a DLV grid to its arbitrage-free call-price grid.
pub fn price_from_dlv(dlv: &DlvGrid) -> Result<PriceGrid> {
    let spec = dlv.spec();
    let (m, n) = (spec.m(), spec.n());
    let mut values = Vec::with_capacity(m * n);
    let mut layer = vec![0.0; n];
    let mut coef = Vec::with_capacity(n);
    let mut scratch = Vec::with_capacity(n);
    let mut variance = vec![0.0; n];
    for i in 0..m {
        for (v, s) in variance.iter_mut().zip(&dlv.values[i * n..(i + 1) * n]) {
            *v = s * s;
        }
        layer_coefficients(spec, &variance, spec.layer_dt(i), &mut coef);
        for _ in 0..spec.substeps[i] {
            step_time_values(spec, &coef, &mut layer, &mut scratch)?;
        }
        values.extend_from_slice(&layer);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("non-finite price".into()));
    }
    PriceGrid::from_time_values(Arc::clone(spec), values)
}

/// Propagates one maturity layer through its substeps together with the
/// sensitivity of the result to the log-variances of that layer.
fn layer_with_sensitivity(
    spec: &GridSpec,
    layer_index: usize,
    prev: &[f64],
    log_var: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = spec.n();
    let variance: Vec<f64> = log_var.iter().map(|v| v.exp()).collect();
    let mut coef = Vec::with_capacity(n);
    layer_coefficients(spec, &variance, spec.layer_dt(layer_index), &mut coef);
    let mut scratch = Vec::with_capacity(n);
    let mut layer = prev.to_vec();
    // sens[j * n + q] = dV_j / d(log σ_q²)
    let mut sens = vec![0.0; n * n];
    for _ in 0..spec.substeps[layer_index] {
        step_time_values(spec, &coef, &mut layer, &mut scratch)?;
        // differentiating V' - L V' = V + L I gives
        // (I - L) S' = S + e_q coef_q δ²C'_q
        for q in 0..n {
            sens[q * n + q] += coef[q] * spec.butterfly(&layer, q);
        }
        implicit_solve(spec, &coef, &mut sens, n, &mut scratch)?;
    }
    Ok((layer, DMatrix::from_row_slice(n, n, &sens)))
}

/// Recovers the DLV grid of a strictly arbitrage-free price grid.
///
/// Each layer is inverted from the previous one: closed form when the
/// maturity interval uses a single substep, Newton on log-variances
/// otherwise (seeded with the closed-form one-step value).
pub fn dlv_from_price(prices: &PriceGrid) -> Result<DlvGrid> {
    let spec = prices.spec();
    let (m, n) = (spec.m(), spec.n());
    let mut out = Vec::with_capacity(m * n);
    let mut prev = vec![0.0; n];
    for i in 0..m {
        let target = prices.layer(i);
        let total_dt = (spec.ext_taus[i + 1] - spec.ext_taus[i]) / spec.day_count;
        if let Some(j) = target.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("price at ({i}, {j})")));
        }
        let calendar: Vec<f64> = target.iter().zip(&prev).map(|(c, p)| c - p).collect();
        for (j, &cal) in calendar.iter().enumerate() {
            if cal < 0.0 {
                return Err(arbitrage(ViolationKind::Calendar, i, j, -cal));
            }
            if cal == 0.0 {
                return Err(degenerate(i, j, "zero calendar spread"));
            }
        }
        let butterfly: Vec<f64> = (0..n).map(|j| spec.butterfly(target, j)).collect();
        for (j, &b) in butterfly.iter().enumerate() {
            let noise = 16.0 * f64::EPSILON * spec.butterfly_scale(target, j);
            if b < -noise {
                return Err(arbitrage(ViolationKind::Convexity, i, j, -b));
            }
            if b.abs() <= noise {
                return Err(degenerate(i, j, "zero butterfly"));
            }
        }
        let guess: Vec<f64> = calendar
            .iter()
            .zip(&butterfly)
            .zip(&spec.strikes)
            .map(|((cal, b), k)| cal / (0.5 * total_dt * k * k * b))
            .collect();
        let variance = if spec.substeps[i] == 1 {
            guess
        } else {
            newton_layer(spec, i, &prev, target, guess)?
        };
        out.extend(variance.iter().map(|v| v.sqrt()));
        prev.copy_from_slice(target);
    }
    DlvGrid::new(Arc::clone(spec), out)
}

fn arbitrage(kind: ViolationKind, maturity: usize, strike: usize, magnitude: f64) -> Error {
    Error::StaticArbitrage {
        kind: kind.to_string(),
        maturity,
        strike,
        magnitude,
    }
}

fn degenerate(maturity: usize, strike: usize, reason: &str) -> Error {
    Error::DegeneratePrices {
        maturity,
        strike,
        reason: reason.to_string(),
    }
}

fn newton_layer(spec: &GridSpec, i: usize, prev: &[f64], target: &[f64], guess: Vec<f64>) -> Result<Vec<f64>> {
    const MAX_ITER: usize = 200;
    let n = spec.n();
    // residuals are measured against the calendar spread each node controls,
    // floored at the roundoff level of the price itself
    let weight: Vec<f64> = target
        .iter()
        .zip(prev)
        .map(|(t, p)| 1.0 / ((t - p) + 64.0 * f64::EPSILON * t.abs()))
        .collect();
    let merit = |price: &[f64]| -> (f64, f64) {
        price
            .iter()
            .zip(target)
            .zip(&weight)
            .fold((0.0_f64, 0.0_f64), |(sq, sup), ((p, t), w)| {
                let r = (p - t).abs() * w;
                (sq + r * r, sup.max(r))
            })
    };
    let mut log_var: Vec<f64> = guess.iter().map(|v| v.ln()).collect();
    let (mut price, mut jac) = layer_with_sensitivity(spec, i, prev, &log_var)?;
    let (mut sq, mut res) = merit(&price);
    let mut iterations = 0;
    while iterations < MAX_ITER && res > f64::EPSILON {
        iterations += 1;
        let f = DVector::from_iterator(n, price.iter().zip(target).map(|(p, t)| t - p));
        let Some(mut step) = jac.clone().lu().solve(&f) else {
            return Err(Error::Solver(format!("singular Newton system in maturity layer {i}")));
        };
        let longest = step.amax();
        if longest > 2.0 {
            step *= 2.0 / longest;
        }
        // the Newton direction descends any diagonally weighted sum of squares
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = log_var.iter().zip(step.iter()).map(|(v, d)| v + t * d).collect();
            let (p, j) = layer_with_sensitivity(spec, i, prev, &trial)?;
            let (s2, r) = merit(&p);
            if s2 < sq {
                log_var = trial;
                price = p;
                jac = j;
                sq = s2;
                res = r;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if res > 1e-6 {
        return Err(Error::NoConvergence { iterations, residual: res });
    }
    Ok(log_var.iter().map(|v| v.exp()).collect())
}

/// Kind of static-arbitrage violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    /// Price below intrinsic value, negative, or above the forward.
    Bound,
    /// Price decreasing in maturity at fixed strike.
    Calendar,
    /// Price increasing in strike, or falling faster than the forward.
    StrikeMonotonicity,
    /// Negative discrete butterfly.
    Convexity,
    NonFinite,
}

impl std::fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ViolationKind::Bound => "price bound",
            ViolationKind::Calendar => "calendar monotonicity",
            ViolationKind::StrikeMonotonicity => "strike monotonicity",
            ViolationKind::Convexity => "strike convexity",
            ViolationKind::NonFinite => "finiteness",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub maturity: usize,
    pub strike: usize,
    pub magnitude: f64,
}

/// Lists every static-arbitrage violation of a price grid.
///
/// Boundary strikes and the `τ = 0` layer enter the checks at their
/// intrinsic values, so a clean grid stays clean under interpolation.
pub fn check_static_arbitrage(prices: &PriceGrid) -> Vec<Violation> {
    check_static_arbitrage_with_tol(prices, CHECK_TOL)
}

pub fn check_static_arbitrage_with_tol(prices: &PriceGrid, tol: f64) -> Vec<Violation> {
    let spec = prices.spec();
    let (m, n) = (spec.m(), spec.n());
    let mut out = Vec::new();
    let mut push = |kind, maturity, strike, magnitude: f64| {
        out.push(Violation {
            kind,
            maturity,
            strike,
            magnitude,
        })
    };
    for i in 0..m {
        for j in 0..n {
            let v = prices.time_value(i, j);
            if !v.is_finite() {
                push(ViolationKind::NonFinite, i, j, f64::NAN);
                continue;
            }
            let c = prices.get(i, j);
            if v < -tol {
                push(ViolationKind::Bound, i, j, -v);
            }
            if c > 1.0 + tol {
                push(ViolationKind::Bound, i, j, c - 1.0);
            }
            let earlier = if i == 0 { 0.0 } else { prices.time_value(i - 1, j) };
            if v < earlier - tol {
                push(ViolationKind::Calendar, i, j, earlier - v);
            }
            // slopes on the augmented strike axis
            let ja = j + 1;
            let left = prices.lattice(i + 1, ja - 1);
            let right = prices.lattice(i + 1, ja + 1);
            let hm = spec.ext_strikes[ja] - spec.ext_strikes[ja - 1];
            let hp = spec.ext_strikes[ja + 1] - spec.ext_strikes[ja];
            let slope_left = (c - left) / hm;
            let slope_right = (right - c) / hp;
            let butterfly = (slope_right - slope_left) * 0.5 * (hm + hp);
            if butterfly < -tol {
                push(ViolationKind::Convexity, i, j, -butterfly);
            }
            if slope_right * hp > tol {
                push(ViolationKind::StrikeMonotonicity, i, j, slope_right * hp);
            }
            if (slope_left + 1.0) * hm < -tol {
                push(ViolationKind::StrikeMonotonicity, i, j, -(slope_left + 1.0) * hm);
            }
        }
    }
    out
}

/// Bilinear interpolation of the augmented price lattice at `(τ, k)`,
/// with `τ` in business days.
pub fn interp_call(prices: &PriceGrid, tau: f64, k: f64) -> Result<f64> {
    let spec = prices.spec();
    let taus = &spec.ext_taus;
    let ks = &spec.ext_strikes;
    let outside = !(tau >= 0.0 && tau <= taus[taus.len() - 1] && k >= ks[0] && k <= ks[ks.len() - 1]);
    if outside {
        return Err(Error::OutsideLattice { tau, strike: k });
    }
    let (i, wt) = locate(taus, tau);
    let (j, wk) = locate(ks, k);
    let blend = |ia: usize| {
        let a = prices.lattice(ia, j);
        if wk == 0.0 {
            a
        } else {
            a * (1.0 - wk) + prices.lattice(ia, j + 1) * wk
        }
    };
    let lower = blend(i);
    if wt == 0.0 {
        Ok(lower)
    } else {
        Ok(lower * (1.0 - wt) + blend(i + 1) * wt)
    }
}

/// Cell index and weight of `x` within sorted `nodes` (x inside the range).
fn locate(nodes: &[f64], x: f64) -> (usize, f64) {
    let last = nodes.len() - 1;
    let idx = nodes.partition_point(|&v| v <= x);
    let i = idx.saturating_sub(1).min(last - 1);
    let w = (x - nodes[i]) / (nodes[i + 1] - nodes[i]);
    (i, if nodes[i] == x { 0.0 } else { w })
}

/// Next-day value of an option bought at `(τ, k)` and its one-day change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolledOption {
    /// `S_{t+1}/S_t · C̃_{t+1}(τ - 1, k S_t/S_{t+1})`, in units of `S_t`.
    pub value: f64,
    /// `value - C̃_t(τ, k)`.
    pub change: f64,
}

/// Values a call bought on day `t` at floating pillar `(τ, k)` on day
/// `t + 1`, after its maturity has shrunk by one day and its relative
/// strike has moved with the spot.
pub fn roll_option_value(prev: &MarketState, next: &MarketState, tau: f64, k: f64) -> Result<RolledOption> {
    if tau < 1.0 {
        return Err(Error::OutsideLattice { tau: tau - 1.0, strike: k });
    }
    let entry = interp_call(&prev.prices, tau, k)?;
    let ratio = next.spot / prev.spot;
    let value = rolled_value(&next.prices, ratio, tau, k)?;
    Ok(RolledOption {
        value,
        change: value - entry,
    })
}

/// Rolled value of a `(τ, k)` call given the next grid and the spot ratio.
pub fn rolled_value(next: &PriceGrid, ratio: f64, tau: f64, k: f64) -> Result<f64> {
    let spec = next.spec();
    let shifted = k / ratio;
    if shifted <= spec.low_boundary_strike || shifted >= spec.high_boundary_strike {
        return Ok(ratio * GridSpec::intrinsic(shifted));
    }
    Ok(ratio * interp_call(next, tau - 1.0, shifted)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> Arc<GridSpec> {
        Arc::new(GridSpec::default())
    }

    fn random_dlv(spec: &Arc<GridSpec>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> DlvGrid {
        let v = (0..spec.len()).map(|_| rng.random_range(lo..hi)).collect();
        DlvGrid::new(Arc::clone(spec), v).unwrap()
    }

    #[test]
    fn reference_grid_layout() {
        let s = GridSpec::default();
        assert_eq!(s.n(), 13);
        assert_eq!(s.m(), 2);
        assert_eq!(s.atm_index(), 6);
        assert_eq!(s.substeps(), &[6, 6]);
        let names = s.column_names();
        assert_eq!(names[0], "dlv_60_0.70");
        assert_eq!(names[25], "dlv_120_1.30");
    }

    #[test]
    fn rejects_bad_specs() {
        let k = default_strikes();
        assert!(GridSpec::new(vec![120.0, 60.0], k.clone(), 0.4, 1.6, 252.0, 10.0).is_err());
        assert!(GridSpec::new(vec![60.0], k.clone(), 0.75, 1.6, 252.0, 10.0).is_err());
        assert!(GridSpec::new(vec![60.0], k.clone(), 0.4, 1.3, 252.0, 10.0).is_err());
        assert!(GridSpec::new(vec![60.0], vec![0.9, 0.95], 0.4, 1.6, 252.0, 10.0).is_err());
        assert!(GridSpec::new(vec![0.5], k, 0.4, 1.6, 252.0, 10.0).is_err());
    }

    #[test]
    fn spec_serde_round_trip() {
        let s = GridSpec::default();
        let text = serde_json::to_string(&s).unwrap();
        let back: GridSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
        let err = serde_json::from_str::<GridSpec>(r#"{"strikes": [0.9, 0.95]}"#);
        assert!(err.is_err());
    }

    #[test]
    fn zero_vol_limit_is_intrinsic() {
        let spec = spec();
        let prices = price_from_dlv(&DlvGrid::flat(Arc::clone(&spec), 1e-12).unwrap()).unwrap();
        for i in 0..spec.m() {
            for (j, &k) in spec.strikes().iter().enumerate() {
                assert!((prices.get(i, j) - (1.0 - k).max(0.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_non_positive_dlv() {
        let spec = spec();
        let mut v = vec![0.2; spec.len()];
        v[14] = 0.0;
        match DlvGrid::new(spec, v) {
            Err(Error::NonPositiveDlv { maturity, strike, .. }) => assert_eq!((maturity, strike), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_substep_inverse_is_closed_form() {
        let spec = Arc::new(GridSpec::new(vec![60.0, 120.0], default_strikes(), 0.4, 1.6, 252.0, 1000.0).unwrap());
        assert_eq!(spec.substeps(), &[1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let dlv = random_dlv(&spec, &mut rng, 0.05, 0.8);
            let back = dlv_from_price(&price_from_dlv(&dlv).unwrap()).unwrap();
            for (a, b) in dlv.values().iter().zip(back.values()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn round_trip_with_substeps() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let dlv = random_dlv(&spec, &mut rng, 0.05, 0.8);
            let prices = price_from_dlv(&dlv).unwrap();
            assert!(check_static_arbitrage(&prices).is_empty());
            let back = dlv_from_price(&prices).unwrap();
            let err = dlv
                .values()
                .iter()
                .zip(back.values())
                .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(err < 1e-8, "round trip error {err}");
        }
    }

    #[test]
    fn calendar_violation_is_named() {
        let spec = spec();
        let mut prices = price_from_dlv(&DlvGrid::flat(Arc::clone(&spec), 0.2).unwrap()).unwrap();
        let c = prices.get(0, 4) - 1e-3;
        prices.set(1, 4, c);
        match dlv_from_price(&prices) {
            Err(Error::StaticArbitrage { kind, maturity, strike, .. }) => {
                assert_eq!(kind, ViolationKind::Calendar.to_string());
                assert_eq!((maturity, strike), (1, 4));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_butterfly_is_degenerate() {
        let spec = spec();
        let prices = price_from_dlv(&DlvGrid::flat(Arc::clone(&spec), 0.2).unwrap()).unwrap();
        // place node 3 on the chord of its neighbours
        let mut tv = prices.time_values().to_vec();
        tv[3] = 0.5 * (tv[2] + tv[4]);
        let prices = PriceGrid::from_time_values(spec, tv).unwrap();
        assert!(matches!(
            dlv_from_price(&prices),
            Err(Error::DegeneratePrices { maturity: 0, strike: 3, .. })
        ));
    }

    #[test]
    fn intrinsic_prices_are_degenerate() {
        let spec = spec();
        let v: Vec<f64> = (0..spec.len())
            .map(|idx| (1.0 - spec.strikes()[idx % spec.n()]).max(0.0))
            .collect();
        let prices = PriceGrid::new(spec, v).unwrap();
        assert!(check_static_arbitrage(&prices).is_empty());
        assert!(matches!(dlv_from_price(&prices), Err(Error::DegeneratePrices { .. })));
    }

    #[test]
    fn convexity_violation_at_bumped_node() {
        let spec = spec();
        let mut prices = price_from_dlv(&DlvGrid::flat(Arc::clone(&spec), 0.2).unwrap()).unwrap();
        let c = prices.get(0, 6) + 0.05;
        prices.set(0, 6, c);
        let v = check_static_arbitrage(&prices);
        let convex: Vec<usize> = v
            .iter()
            .filter(|x| x.kind == ViolationKind::Convexity && x.maturity == 0)
            .map(|x| x.strike)
            .collect();
        assert_eq!(convex, vec![6], "{v:?}");
    }

    #[test]
    fn negative_price_is_bound_violation() {
        let spec = spec();
        let mut prices = price_from_dlv(&DlvGrid::flat(Arc::clone(&spec), 0.2).unwrap()).unwrap();
        prices.set(0, 12, -0.01);
        let v = check_static_arbitrage(&prices);
        assert!(v
            .iter()
            .any(|x| x.kind == ViolationKind::Bound && x.maturity == 0 && x.strike == 12));
    }

    #[test]
    fn interpolation_identities() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prices = price_from_dlv(&random_dlv(&spec, &mut rng, 0.1, 0.5)).unwrap();
        for (i, &tau) in spec.maturities().iter().enumerate() {
            for (j, &k) in spec.strikes().iter().enumerate() {
                assert_eq!(interp_call(&prices, tau, k).unwrap(), prices.get(i, j));
            }
        }
        let mid = interp_call(&prices, 90.0, 0.975).unwrap();
        let mean = 0.25 * (prices.get(0, 5) + prices.get(0, 6) + prices.get(1, 5) + prices.get(1, 6));
        assert!((mid - mean).abs() < 1e-15);
        assert!((interp_call(&prices, 0.0, 0.8).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(interp_call(&prices, 60.0, 1.6).unwrap(), 0.0);
        assert!(interp_call(&prices, 121.0, 1.0).is_err());
        assert!(interp_call(&prices, 60.0, 0.3).is_err());
    }

    #[test]
    fn short_dated_query_is_bracketed() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let prices = price_from_dlv(&random_dlv(&spec, &mut rng, 0.05, 0.8)).unwrap();
            let c = interp_call(&prices, 30.0, 1.0).unwrap();
            assert!(c > 0.0 && c < prices.get(0, spec.atm_index()));
        }
    }

    #[test]
    fn roll_at_unit_ratio_and_beyond_boundary() {
        let spec = spec();
        let prices = price_from_dlv(&DlvGrid::flat(Arc::clone(&spec), 0.2).unwrap()).unwrap();
        let prev = MarketState::new(100.0, prices.clone()).unwrap();
        let same = MarketState::new(100.0, prices.clone()).unwrap();
        let r = roll_option_value(&prev, &same, 60.0, 1.0).unwrap();
        assert_eq!(r.value, interp_call(&prices, 59.0, 1.0).unwrap());
        assert!(r.change < 0.0);

        let up = MarketState::new(300.0, prices.clone()).unwrap();
        let r = roll_option_value(&prev, &up, 60.0, 1.0).unwrap();
        assert!((r.value - (3.0 - 1.0)).abs() < 1e-15);

        let down = MarketState::new(40.0, prices).unwrap();
        let r = roll_option_value(&prev, &down, 120.0, 0.7).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(roll_option_value(&prev, &same, 0.5, 1.0).is_err());
    }
}
