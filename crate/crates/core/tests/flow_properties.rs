use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnsim::flow::{fit_flow, Bounds, ConditionalFlowModel, FlowConfig, FlowData};
use rnsim::training::TrainConfig;

fn perturbed_model(d: usize, c: usize, bins: usize, seed: u64) -> ConditionalFlowModel {
    let cfg = FlowConfig {
        bins,
        hidden: vec![16, 16],
        ..FlowConfig::default()
    };
    let mut m = ConditionalFlowModel::new(
        Bounds::new(vec![-1.0; d], vec![2.0; d]).unwrap(),
        Bounds::new(vec![0.0; c], vec![1.0; c]).unwrap(),
        &cfg,
        seed,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for net in m.conditioners_mut() {
        for p in net.params_mut() {
            *p += rng.random_range(-0.4..0.4);
        }
    }
    m
}

fn ks_uniform(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len() as f64;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn sampling_matches_model_cdf() {
    let m = perturbed_model(2, 1, 32, 1);
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let conds = Array2::from_elem((n, 1), 0.3);
    let u = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
    let xs = m.sample_batch(conds.view(), u.view()).unwrap();
    let back = m.cdf_batch(xs.view(), conds.view()).unwrap();
    for j in 0..2 {
        let ks = ks_uniform(back.column(j).to_vec());
        assert!(ks <= 0.01, "coordinate {j}: KS {ks}");
    }
    let recovered = back
        .iter()
        .zip(u.iter())
        .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(recovered < 1e-10);
}

#[test]
fn sampling_is_triangular() {
    let m = perturbed_model(3, 2, 16, 2);
    let cond = [0.2, 0.8];
    let base = m.sample_step(&cond, &[0.3, 0.6, 0.9]).unwrap();
    let later = m.sample_step(&cond, &[0.3, 0.6, 0.1]).unwrap();
    assert_eq!(base[..2], later[..2]);
    let middle = m.sample_step(&cond, &[0.3, 0.2, 0.9]).unwrap();
    assert_eq!(base[0], middle[0]);
    assert_ne!(base[1], middle[1]);
}

#[test]
fn endpoints_map_to_bounds() {
    let m = perturbed_model(2, 1, 16, 3);
    assert_eq!(m.sample_step(&[0.5], &[0.0, 0.0]).unwrap(), vec![-1.0, -1.0]);
    assert_eq!(m.sample_step(&[0.5], &[1.0, 1.0]).unwrap(), vec![2.0, 2.0]);
}

#[test]
fn conditional_probabilities_are_normalized() {
    let m = perturbed_model(3, 2, 64, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let c = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        for j in 0..3 {
            let prefix: Vec<f64> = (0..j).map(|_| rng.random::<f64>()).collect();
            let p = m.bin_probs(j, &c, &prefix).unwrap();
            assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(p.probs().iter().all(|&q| q > 0.0));
        }
    }
}

#[test]
fn weighted_nll_gradient_matches_finite_differences() {
    let m = perturbed_model(2, 2, 8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 12;
    let c = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
    let s = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..2.0));
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    let data = FlowData::new(c, s, w).unwrap();
    let (_, grads) = m.weighted_nll_with_grad(&data).unwrap();
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for j in 0..2 {
        for idx in (0..m.conditioners()[j].num_params()).step_by(3) {
            let mut up = m.clone();
            up.conditioners_mut()[j].params_mut()[idx] += h;
            let mut down = m.clone();
            down.conditioners_mut()[j].params_mut()[idx] -= h;
            let fd = (up.weighted_nll(&data).unwrap() - down.weighted_nll(&data).unwrap()) / (2.0 * h);
            let g = grads[j][idx];
            if fd.abs().max(g.abs()) > 1e-7 {
                worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()));
            }
        }
    }
    assert!(worst <= 1e-4, "worst relative gradient error {worst}");
}

#[test]
fn probabilities_move_continuously_with_condition() {
    let m = perturbed_model(1, 2, 8, 8);
    let net = &m.conditioners()[0];
    let c = [0.4, 0.6];
    // logits of bin 3 as a function of the centered condition
    let centered = [2.0 * c[0] - 1.0, 2.0 * c[1] - 1.0];
    let mut one_hot = vec![0.0; 8];
    one_hot[3] = 1.0;
    let (_, input_grad) = net.gradients(&centered, &one_hot).unwrap();
    let h = 1e-6;
    for i in 0..2 {
        let mut up = centered;
        up[i] += h;
        let mut down = centered;
        down[i] -= h;
        let fd = (net.forward(&up).unwrap()[3] - net.forward(&down).unwrap()[3]) / (2.0 * h);
        assert!((fd - input_grad[i]).abs() <= 1e-4 * fd.abs().max(1e-6));
    }
    let p0 = m.bin_probs(0, &c, &[]).unwrap();
    let p1 = m.bin_probs(0, &[0.4 + 1e-7, 0.6], &[]).unwrap();
    assert!(p0.probs().iter().zip(p1.probs()).all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn recovers_two_bin_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let states = Array2::from_shape_fn((n, 1), |_| {
        let v: f64 = rng.random();
        if rng.random::<f64>() < 0.75 {
            0.5 * v
        } else {
            0.5 + 0.5 * v
        }
    });
    let conds = Array2::from_elem((n, 1), 0.5);
    let data = FlowData::unweighted(conds, states).unwrap();
    let cfg = FlowConfig {
        bins: 2,
        hidden: vec![16, 16],
        ..FlowConfig::default()
    };
    let unit = Bounds::new(vec![0.0], vec![1.0]).unwrap();
    let mut m = ConditionalFlowModel::new(unit.clone(), unit, &cfg, 12).unwrap();
    let train = TrainConfig {
        max_epochs: 300,
        ..TrainConfig::default()
    };
    let report = fit_flow(&mut m, &data, &train, 13).unwrap();
    for c in [0.5] {
        let p = m.bin_probs(0, &[c], &[]).unwrap();
        assert!((p.probs()[0] - 0.75).abs() <= 0.02, "c = {c}: p = {:?} after {} epochs", p.probs(), report.epochs_run);
    }
    assert!(report.best_so_far.windows(2).all(|w| w[1] <= w[0]));
    assert!(report.best_validation_loss <= *report.validation_loss.last().unwrap());
    let val = FlowData::unweighted(
        data.conditions.slice(ndarray::s![8000.., ..]).to_owned(),
        data.states.slice(ndarray::s![8000.., ..]).to_owned(),
    )
    .unwrap();
    assert!((m.weighted_nll(&val).unwrap() - report.best_validation_loss).abs() < 1e-12);
}

#[test]
fn training_is_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 500;
    let conds = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>());
    let states = Array2::from_shape_fn((n, 2), |(i, _)| conds[[i, 0]] * 0.5 + rng.random::<f64>() * 0.5);
    let data = FlowData::unweighted(conds, states).unwrap();
    let train = TrainConfig {
        max_epochs: 5,
        min_epochs: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = perturbed_model(2, 1, 8, 15);
        fit_flow(&mut m, &data, &train, 16).unwrap();
        serde_json::to_string(&m).unwrap()
    };
    assert_eq!(run(), run());
}
