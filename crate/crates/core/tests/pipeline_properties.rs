use std::sync::{Arc, OnceLock};

use ndarray::{s, Array2, ArrayView2};
use rnsim::codec::{fit_autoencoder, Codec, CodecConfig};
use rnsim::diffnet::AdamConfig;
use rnsim::flow::{FlowConfig, FlowData};
use rnsim::grid::{check_static_arbitrage, price_from_dlv, GridSpec};
use rnsim::measure::{Instrument, InstrumentSet, RiskAversion};
use rnsim::pipeline::dataset::{build_weighted_dataset, weight_histogram, DriftRemovalConfig};
use rnsim::pipeline::eval::{drift_report, evaluate_drift, evaluate_pnl, mean_and_error};
use rnsim::pipeline::synth::{SynthState, SyntheticMarket, SyntheticMarketConfig};
use rnsim::pipeline::{fit_physical, instrument_prices, simulate, FlowSampler, PhysicalFit, TransitionSampler};
use rnsim::training::TrainConfig;

fn spec() -> Arc<GridSpec> {
    Arc::new(GridSpec::default())
}

fn neutral(m: &SyntheticMarket) -> SynthState {
    SynthState {
        spot: 1.0,
        factors: vec![0.0; m.config().factors],
    }
}

/// Mean one-step gain of the ATM 60-day call in % of its price, with the
/// standard error.
fn atm_drift(cfg: SyntheticMarketConfig, n: usize, seed: u64) -> (f64, f64) {
    let m = SyntheticMarket::new(cfg, spec()).unwrap();
    let set = InstrumentSet::new(&spec(), vec![Instrument::Call { maturity: 60.0, strike: 1.0 }]).unwrap();
    let state = neutral(&m);
    let gains = m.one_step_gains(&state, &set, n, seed).unwrap();
    let g = Array2::from_shape_fn((n, 1), |(i, _)| gains[i][0]);
    let (mean, err) = mean_and_error(&g);
    let price = instrument_prices(&m.market_state(&state).unwrap(), &set).unwrap()[0];
    (100.0 * mean[0] / price, 100.0 * err[0] / price)
}

#[test]
fn reference_market_has_cheap_options() {
    let (d, e) = atm_drift(SyntheticMarketConfig::default(), 1 << 16, 11);
    assert!((0.5..=4.0).contains(&d), "drift {d}% (se {e})");
}

#[test]
fn zero_drift_at_break_even_volatility() {
    let with = |v: f64| SyntheticMarketConfig {
        drift: 0.0,
        vol_multiplier: v,
        ..Default::default()
    };
    // common random numbers make the drift monotone in the multiplier
    let (mut lo, mut hi) = (0.3, 0.6);
    assert!(atm_drift(with(lo), 1 << 14, 5).0 < 0.0);
    assert!(atm_drift(with(hi), 1 << 14, 5).0 > 0.0);
    for _ in 0..12 {
        let mid = 0.5 * (lo + hi);
        if atm_drift(with(mid), 1 << 14, 5).0 > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (d, e) = atm_drift(with(0.5 * (lo + hi)), 1 << 16, 99);
    assert!(d.abs() <= 2.0 * e, "break-even {} drift {d}% se {e}", 0.5 * (lo + hi));
}

struct Fixture {
    spec: Arc<GridSpec>,
    codec: Codec,
    physical: PhysicalFit,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = spec();
        let cfg = SyntheticMarketConfig {
            horizon: 1200,
            ..Default::default()
        };
        let series = SyntheticMarket::new(cfg, Arc::clone(&spec)).unwrap().generate().unwrap();
        let logs = series.log_dlv();
        let mut codec = Codec::for_data(logs.slice(s![..960, ..]), &CodecConfig::default(), 1).unwrap();
        let tc = TrainConfig {
            batch_size: 128,
            max_epochs: 300,
            min_epochs: 100,
            patience: 50,
            lr_decay: 0.99,
            optimizer: AdamConfig {
                learning_rate: 2e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        fit_autoencoder(&mut codec, logs.view(), &tc, 2).unwrap();
        let flow = FlowConfig {
            hidden: vec![32, 32],
            bins: 32,
            ..Default::default()
        };
        let pt = TrainConfig {
            batch_size: 128,
            max_epochs: 200,
            min_epochs: 30,
            patience: 30,
            lr_decay: 0.995,
            ..Default::default()
        };
        let physical = fit_physical(&series, &codec, &flow, &pt, 3).unwrap();
        Fixture { spec, codec, physical }
    })
}

fn codes(f: &Fixture) -> ArrayView2<'_, f64> {
    f.physical.compressed.codes.view()
}

#[test]
fn conditioning_beats_histogram_baseline() {
    let f = fixture();
    assert!(
        f.physical.heldout_nll < f.physical.baseline_nll,
        "{} vs {}",
        f.physical.heldout_nll,
        f.physical.baseline_nll
    );
}

#[test]
fn weighted_dataset_reweights_every_condition_exactly() {
    let f = fixture();
    let set = InstrumentSet::reference(&f.spec);
    let cfg = DriftRemovalConfig {
        samples_per_condition: 256,
        ..Default::default()
    };
    let conds = codes(f).slice(s![..200, ..]).to_owned();
    let wd = build_weighted_dataset(&FlowSampler(&f.physical.model), &f.codec, &f.spec, conds.view(), &set, &cfg, 7).unwrap();
    assert_eq!(wd.skipped(), 0);
    assert_eq!(wd.dataset.len(), 200 * 256);
    assert!(wd.dataset.weights.iter().all(|w| *w > 0.0 && w.is_finite()));
    for (t, chunk) in wd.dataset.weights.chunks(256).enumerate() {
        let mean = chunk.iter().sum::<f64>() / 256.0;
        assert!((mean - 1.0).abs() <= 1e-12, "condition {t}: mean weight {mean}");
        assert!(wd.dataset.condition_index[t * 256..(t + 1) * 256].iter().all(|&i| i == t));
    }
    for d in &wd.diagnostics {
        assert!(d.converged && d.residual <= 1e-8, "{d:?}");
    }
    // pooled weights: right-skewed with the mode below one
    let w = &wd.dataset.weights;
    let mut sorted = w.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!(median < mean, "median {median} mean {mean}");
    let hist = weight_histogram(w, 60);
    let mode = hist.iter().max_by_key(|b| b.2).unwrap();
    assert!(mode.1 <= 1.0, "mode bin {mode:?}");

    // reweighting is deterministic per seed
    let again = build_weighted_dataset(&FlowSampler(&f.physical.model), &f.codec, &f.spec, conds.view(), &set, &cfg, 7).unwrap();
    assert_eq!(again.dataset, wd.dataset);
}

#[test]
fn unit_weights_reproduce_the_physical_objective() {
    let f = fixture();
    let (c, s) = f.physical.compressed.transitions();
    let plain = FlowData::unweighted(c.clone(), s.clone()).unwrap();
    let ones = FlowData::new(c, s, vec![1.0; plain.len()]).unwrap();
    let m = &f.physical.model;
    let (a, ga) = m.weighted_nll_with_grad(&plain).unwrap();
    let (b, gb) = m.weighted_nll_with_grad(&ones).unwrap();
    assert!((a - b).abs() <= 1e-12);
    for (x, y) in ga.iter().flatten().zip(gb.iter().flatten()) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn simulated_surfaces_are_arbitrage_free_and_seeded() {
    let f = fixture();
    let start = rnsim::pipeline::market_from_code(&f.codec, &f.spec, 100.0, &codes(f).row(0).to_vec()).unwrap();
    let sampler = FlowSampler(&f.physical.model);
    let one = simulate(&sampler, &f.codec, &start, 1, 1, None, 4).unwrap();
    assert_eq!(one, simulate(&sampler, &f.codec, &start, 1, 1, None, 4).unwrap());
    let paths = simulate(&sampler, &f.codec, &start, 10, 20, Some(f.physical.model.condition_bounds()), 5).unwrap();
    for p in &paths {
        assert_eq!(p.spots.len(), 11);
        assert!(p.spots.iter().all(|s| *s > 0.0));
        for z in &p.codes {
            let prices = price_from_dlv(&f.codec.decode(&f.spec, z).unwrap()).unwrap();
            assert!(check_static_arbitrage(&prices).is_empty());
        }
    }
}

/// Symmetric two-point spot move with the surface frozen.
struct TwoPoint;

impl TransitionSampler for TwoPoint {
    fn dim(&self) -> usize {
        4
    }

    fn sample_next(&self, code: &[f64], u: ArrayView2<'_, f64>) -> rnsim::Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((u.nrows(), 4), |(i, j)| match j {
            0 if u[[i, 0]] < 0.5 => -0.01,
            0 => 0.01,
            _ => code[j - 1],
        }))
    }
}

#[test]
fn two_point_spot_is_driftless() {
    let f = fixture();
    let set = InstrumentSet::new(&f.spec, vec![Instrument::Spot]).unwrap();
    let code = codes(f).row(10).to_vec();
    let r = evaluate_drift(&TwoPoint, &TwoPoint, &f.codec, &f.spec, &code, &set, 1 << 14, 3).unwrap();
    let spot = &r.instruments[0];
    assert!(spot.p_drift.abs() <= 3.0 * spot.p_std_error.max(1e-15), "{spot:?}");
}

#[test]
fn drift_table_of_identical_samples() {
    let set = InstrumentSet::reference(&spec());
    let g = Array2::zeros((16, 3));
    let r = drift_report(&set, &[1.0, 0.04, 0.06], &g, &g, vec![0.0; 3], 0);
    for i in &r.instruments {
        assert_eq!((i.p_drift, i.q_drift, i.ratio), (0.0, 0.0, None));
    }
    let json = serde_json::to_value(&r).unwrap();
    for key in ["P drift", "Q drift", "P drift (%)", "Q drift (%)", "Ratio"] {
        assert!(json["instruments"][0].get(key).is_some(), "{key}");
    }
}

#[test]
fn physical_samples_reward_buying_options() {
    let f = fixture();
    let set = InstrumentSet::new(&f.spec, vec![Instrument::Spot, Instrument::Call { maturity: 60.0, strike: 1.0 }]).unwrap();
    let code = codes(f).row(codes(f).nrows() - 1).to_vec();
    let r = evaluate_pnl(&FlowSampler(&f.physical.model), &f.codec, &f.spec, &code, RiskAversion::default(), &set, 1 << 14, 8).unwrap();
    assert!(r.certainty_equivalent > 0.0);
    assert!(r.action[1] > 0.0 && r.action[0] < 0.0, "{:?}", r.action);
    assert_eq!(r.scatter.len(), 1 << 14);
}
