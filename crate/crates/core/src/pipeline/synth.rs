//! Synthetic ground-truth market: mean-reverting latent factors mapped to
//! DLV grids, with spot returns whose realized volatility sits apart from
//! the option-implied level.

use std::sync::Arc;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{price_from_dlv, DlvGrid, GridSpec, MarketState};
use crate::measure::InstrumentSet;

use super::{instrument_gains, MarketSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticMarketConfig {
    /// Number of latent factors (1 to 3): level, skew, term slope.
    pub factors: usize,
    /// Daily AR(1) coefficient of every factor.
    pub persistence: f64,
    /// Stationary standard deviation of every factor.
    pub factor_vol: f64,
    /// ATM DLV at the reference maturity when all factors are zero.
    pub level: f64,
    pub level_loading: f64,
    /// Log-DLV slope in relative strike at the reference maturity.
    pub skew: f64,
    pub skew_loading: f64,
    /// Log-DLV curvature in relative strike.
    pub smile: f64,
    /// Log-DLV slope in log maturity.
    pub term_slope: f64,
    pub term_loading: f64,
    /// Correlation of the spot shock with the level factor shock.
    pub leverage: f64,
    /// Expected spot return per step.
    pub drift: f64,
    /// Realized spot volatility as a multiple of the reference ATM DLV.
    pub vol_multiplier: f64,
    /// Maturity (days) whose ATM DLV sets the realized volatility.
    pub reference_maturity: f64,
    pub horizon: usize,
    pub start_spot: f64,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl Default for SyntheticMarketConfig {
    fn default() -> Self {
        SyntheticMarketConfig {
            factors: 3,
            persistence: 0.98,
            factor_vol: 1.0,
            level: 0.2,
            level_loading: 0.25,
            skew: -0.6,
            skew_loading: 0.15,
            smile: 0.8,
            term_slope: 0.05,
            term_loading: 0.03,
            leverage: -0.5,
            drift: 1e-3,
            vol_multiplier: 0.6,
            reference_maturity: 60.0,
            horizon: 2543,
            start_spot: 100.0,
            start_date: NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date"),
            seed: 7,
        }
    }
}

impl SyntheticMarketConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic market: {m}")));
        if !(1..=3).contains(&self.factors) {
            return bad("factor count must be 1, 2 or 3");
        }
        if !(self.persistence.abs() < 1.0) {
            return bad("persistence must lie in (-1, 1)");
        }
        if !(self.factor_vol >= 0.0) || !(self.level > 0.0) || !(self.start_spot > 0.0) {
            return bad("factor vol, level and start spot must be positive");
        }
        if !(self.vol_multiplier > 0.0) {
            return bad("realized-vol multiplier must be positive");
        }
        if !(self.leverage.abs() <= 1.0) {
            return bad("leverage must be a correlation");
        }
        if self.horizon < 2 {
            return bad("horizon must be at least two days");
        }
        let all = [
            self.level_loading,
            self.skew,
            self.skew_loading,
            self.smile,
            self.term_slope,
            self.term_loading,
            self.drift,
            self.reference_maturity,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("non-finite coefficient");
        }
        Ok(())
    }
}

/// Generator state: the spot level and the latent factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthState {
    pub spot: f64,
    pub factors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticMarket {
    config: SyntheticMarketConfig,
    spec: Arc<GridSpec>,
}

impl SyntheticMarket {
    pub fn new(config: SyntheticMarketConfig, spec: Arc<GridSpec>) -> Result<Self> {
        config.validate()?;
        if !(config.reference_maturity > 0.0) {
            return Err(Error::Config("reference maturity must be positive".into()));
        }
        Ok(SyntheticMarket { config, spec })
    }

    pub fn config(&self) -> &SyntheticMarketConfig {
        &self.config
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    fn factor(&self, f: &[f64], i: usize) -> f64 {
        f.get(i).copied().unwrap_or(0.0)
    }

    /// DLV grid of the given factors.
    pub fn dlv(&self, factors: &[f64]) -> Result<DlvGrid> {
        let c = &self.config;
        let (f1, f2, f3) = (self.factor(factors, 0), self.factor(factors, 1), self.factor(factors, 2));
        let mut values = Vec::with_capacity(self.spec.len());
        for &tau in self.spec.maturities() {
            let t = tau / c.reference_maturity;
            for &k in self.spec.strikes() {
                let x = k - 1.0;
                let log_sigma = c.level.ln()
                    + c.level_loading * f1
                    + (c.skew + c.skew_loading * f2) * x / t.sqrt()
                    + c.smile * x * x
                    + (c.term_slope + c.term_loading * f3) * t.ln();
                values.push(log_sigma.exp());
            }
        }
        DlvGrid::new(Arc::clone(&self.spec), values)
    }

    /// Annualized realized spot volatility in the given factor state.
    pub fn realized_vol(&self, factors: &[f64]) -> f64 {
        let c = &self.config;
        let log_atm = c.level.ln() + c.level_loading * self.factor(factors, 0);
        c.vol_multiplier * log_atm.exp()
    }

    /// One step of the factor and spot dynamics given standard normal shocks
    /// (spot shock first, then one per factor).
    pub fn step_with_shocks(&self, state: &SynthState, shocks: &[f64]) -> SynthState {
        let c = &self.config;
        let daily = self.realized_vol(&state.factors) / self.spec.day_count().sqrt();
        let ret = c.drift + daily * shocks[0];
        let innov = c.factor_vol * (1.0 - c.persistence * c.persistence).sqrt();
        let rho = c.leverage;
        let factors = state
            .factors
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let z = if i == 0 {
                    rho * shocks[0] + (1.0 - rho * rho).sqrt() * shocks[1]
                } else {
                    shocks[i + 1]
                };
                c.persistence * f + innov * z
            })
            .collect();
        SynthState {
            spot: state.spot * (1.0 + ret),
            factors,
        }
    }

    fn shocks(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..=self.config.factors).map(|_| StandardNormal.sample(rng)).collect()
    }

    pub fn market_state(&self, state: &SynthState) -> Result<MarketState> {
        MarketState::new(state.spot, price_from_dlv(&self.dlv(&state.factors)?)?)
    }

    /// Generates `horizon` business days, starting from zero factors.
    pub fn generate(&self) -> Result<MarketSeries> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut state = SynthState {
            spot: c.start_spot,
            factors: vec![0.0; c.factors],
        };
        let mut dates = Vec::with_capacity(c.horizon);
        let mut spots = Vec::with_capacity(c.horizon);
        let mut dlvs = Vec::with_capacity(c.horizon);
        let mut date = c.start_date;
        for t in 0..c.horizon {
            if t > 0 {
                state = self.step_with_shocks(&state, &self.shocks(&mut rng));
                date = next_business_day(date);
            }
            dates.push(date);
            spots.push(state.spot);
            dlvs.push(self.dlv(&state.factors)?);
        }
        MarketSeries::new(Arc::clone(&self.spec), dates, spots, dlvs)
    }

    /// Monte Carlo one-step instrument gains from `state`, in units of the
    /// current spot.
    pub fn one_step_gains(&self, state: &SynthState, instruments: &InstrumentSet, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let now = self.market_state(state)?;
        (0..n)
            .map(|_| {
                let next = self.step_with_shocks(state, &self.shocks(&mut rng));
                instrument_gains(&now, &self.market_state(&next)?, instruments)
            })
            .collect()
    }
}

fn next_business_day(date: NaiveDate) -> NaiveDate {
    let mut d = date + Duration::days(1);
    while matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
        d += Duration::days(1);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::check_static_arbitrage;

    fn market(horizon: usize) -> SyntheticMarket {
        let cfg = SyntheticMarketConfig {
            horizon,
            ..SyntheticMarketConfig::default()
        };
        SyntheticMarket::new(cfg, Arc::new(GridSpec::default())).unwrap()
    }

    #[test]
    fn generated_surfaces_are_arbitrage_free() {
        let m = market(200);
        let series = m.generate().unwrap();
        assert_eq!(series.len(), 200);
        for t in 0..series.len() {
            let s = series.state(t).unwrap();
            assert!(check_static_arbitrage(&s.prices).is_empty());
        }
        assert!(series.dates().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn generation_is_seeded() {
        let a = market(50).generate().unwrap();
        let b = market(50).generate().unwrap();
        assert_eq!(a.spots(), b.spots());
        let mut cfg = SyntheticMarketConfig {
            horizon: 50,
            ..SyntheticMarketConfig::default()
        };
        cfg.seed += 1;
        let c = SyntheticMarket::new(cfg, Arc::new(GridSpec::default())).unwrap().generate().unwrap();
        assert_ne!(a.spots(), c.spots());
    }

    #[test]
    fn zero_factors_give_reference_level() {
        let m = market(10);
        let dlv = m.dlv(&[0.0; 3]).unwrap();
        let spec = m.spec();
        let i = spec.maturity_index(60.0).unwrap();
        assert!((dlv.get(i, spec.atm_index()) - 0.2).abs() < 1e-15);
        assert!((m.realized_vol(&[0.0; 3]) - 0.12).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_configs() {
        let spec = Arc::new(GridSpec::default());
        for cfg in [
            SyntheticMarketConfig { factors: 0, ..Default::default() },
            SyntheticMarketConfig { persistence: 1.0, ..Default::default() },
            SyntheticMarketConfig { vol_multiplier: 0.0, ..Default::default() },
            SyntheticMarketConfig { leverage: 1.5, ..Default::default() },
        ] {
            assert!(SyntheticMarket::new(cfg, Arc::clone(&spec)).is_err());
        }
    }
}
