//! Autoregressive conditional density model with piecewise-constant bin
//! densities (linear-interpolation spline flow).
//!
//! Each state coordinate is rescaled to `[0, 1]` and split into `B` equal
//! bins. Coordinate `j` has bin probabilities produced by its own
//! conditioner network from the condition and coordinates `0..j` of the
//! same draw; the density on bin `k` is `B·p_k` and sampling inverts the
//! piecewise-linear CDF.

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{softmax_in_place, Adam, BatchCache, Mlp};
use crate::error::{Error, Result};
use crate::training::{shuffled, EarlyStopping, TrainConfig, TrainReport};

const CHUNK: usize = 4096;

/// Per-coordinate affine box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Dimension("bounds need matching nonempty lo/hi".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(h > l) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::Dimension("bounds need finite lo < hi".into()));
        }
        Ok(Bounds { lo, hi })
    }

    /// Column-wise min/max of `rows`, widened by `margin` times the range
    /// on each side.
    pub fn fit(rows: ArrayView2<'_, f64>, margin: f64) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::Empty("bounds data"));
        }
        let mut lo = Vec::with_capacity(rows.ncols());
        let mut hi = Vec::with_capacity(rows.ncols());
        for (j, col) in rows.axis_iter(Axis(1)).enumerate() {
            let min = col.iter().copied().fold(f64::INFINITY, f64::min);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(max > min) {
                return Err(Error::Dimension(format!("coordinate {j} has zero range")));
            }
            let pad = margin * (max - min);
            lo.push(min - pad);
            hi.push(max + pad);
        }
        Bounds::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| v >= l && v <= h)
    }

    /// `(x - lo)/(hi - lo)`, rejecting coordinates outside the box.
    pub fn to_unit(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!("expected {} coordinates, got {}", self.dim(), x.len())));
        }
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                let (l, h) = (self.lo[j], self.hi[j]);
                if !(v >= l && v <= h) {
                    return Err(Error::OutOfRange {
                        coordinate: j,
                        value: v,
                        lo: l,
                        hi: h,
                    });
                }
                Ok(((v - l) / (h - l)).clamp(0.0, 1.0))
            })
            .collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, &v)| self.from_unit_coord(j, v))
            .collect()
    }

    fn from_unit_coord(&self, j: usize, u: f64) -> f64 {
        if u >= 1.0 {
            self.hi[j]
        } else {
            self.lo[j] + u * (self.hi[j] - self.lo[j])
        }
    }

    /// Affine map to `[-1, 1]` without range checks (network inputs).
    fn centered(&self, j: usize, v: f64) -> f64 {
        2.0 * (v - self.lo[j]) / (self.hi[j] - self.lo[j]) - 1.0
    }
}

/// Normalized bin probabilities of one coordinate on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinDensity {
    probs: Vec<f64>,
}

impl BinDensity {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Dimension("need at least two bins".into()));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p > 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::NonFinite("bin probabilities must be positive and sum to one".into()));
        }
        Ok(BinDensity { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn bins(&self) -> usize {
        self.probs.len()
    }

    pub fn bin_of(&self, u: f64) -> usize {
        bin_index(u, self.probs.len())
    }

    pub fn density(&self, u: f64) -> f64 {
        self.probs.len() as f64 * self.probs[self.bin_of(u)]
    }

    pub fn cdf(&self, u: f64) -> f64 {
        cdf(&self.probs, u)
    }

    pub fn inverse_cdf(&self, q: f64) -> f64 {
        inverse_cdf(&self.probs, q)
    }
}

/// Right-open bins with the top point assigned to the last bin.
pub fn bin_index(u: f64, bins: usize) -> usize {
    ((u * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

fn cdf(probs: &[f64], u: f64) -> f64 {
    let b = probs.len();
    let k = bin_index(u, b);
    let below: f64 = probs[..k].iter().sum();
    (below + probs[k] * (u * b as f64 - k as f64)).clamp(0.0, 1.0)
}

fn inverse_cdf(probs: &[f64], q: f64) -> f64 {
    let b = probs.len();
    if q <= 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return 1.0;
    }
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        if q < acc + p || k + 1 == b {
            let inside = ((q - acc) / p).clamp(0.0, 1.0);
            return ((k as f64 + inside) / b as f64).min(1.0);
        }
        acc += p;
    }
    1.0
}

/// Transition records for a conditional flow: `conditions` (N × c),
/// `states` (N × d) and nonnegative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowData {
    pub conditions: Array2<f64>,
    pub states: Array2<f64>,
    pub weights: Vec<f64>,
}

impl FlowData {
    pub fn new(conditions: Array2<f64>, states: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        if conditions.nrows() != states.nrows() || weights.len() != states.nrows() {
            return Err(Error::Dimension(format!(
                "{} conditions, {} states, {} weights",
                conditions.nrows(),
                states.nrows(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::NonFinite("weights must be finite and nonnegative".into()));
        }
        if conditions.iter().chain(states.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transition data".into()));
        }
        Ok(FlowData {
            conditions,
            states,
            weights,
        })
    }

    pub fn unweighted(conditions: Array2<f64>, states: Array2<f64>) -> Result<Self> {
        let n = states.nrows();
        FlowData::new(conditions, states, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn select(&self, idx: &[usize]) -> FlowData {
        FlowData {
            conditions: self.conditions.select(Axis(0), idx),
            states: self.states.select(Axis(0), idx),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub bins: usize,
    pub hidden: Vec<usize>,
    /// Relative margin added on each side of the data range.
    pub bounds_margin: f64,
    /// State dimension; when present it must equal `1 + latent_dim`.
    pub dim: Option<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            bins: 64,
            hidden: vec![64, 64, 64],
            bounds_margin: 0.1,
            dim: None,
        }
    }
}

/// Autoregressive conditional flow with one conditioner per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalFlowModel {
    format_version: u32,
    bins: usize,
    bounds: Bounds,
    condition_bounds: Bounds,
    conditioners: Vec<Mlp>,
}

impl ConditionalFlowModel {
    /// Fresh model whose conditioners output all-zero logits, i.e. uniform
    /// bins in every coordinate.
    pub fn new(bounds: Bounds, condition_bounds: Bounds, config: &FlowConfig, seed: u64) -> Result<Self> {
        if config.bins < 2 {
            return Err(Error::Config("a flow needs at least two bins".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = condition_bounds.dim();
        let conditioners = (0..bounds.dim())
            .map(|j| {
                let mut widths = vec![c + j];
                widths.extend_from_slice(&config.hidden);
                widths.push(config.bins);
                let mut net = Mlp::new(&widths, &mut rng)?;
                net.zero_output_layer();
                Ok(net)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ConditionalFlowModel {
            format_version: crate::diffnet::CHECKPOINT_VERSION,
            bins: config.bins,
            bounds,
            condition_bounds,
            conditioners,
        })
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn condition_dim(&self) -> usize {
        self.condition_bounds.dim()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn condition_bounds(&self) -> &Bounds {
        &self.condition_bounds
    }

    pub fn conditioners(&self) -> &[Mlp] {
        &self.conditioners
    }

    pub fn conditioners_mut(&mut self) -> &mut [Mlp] {
        &mut self.conditioners
    }

    pub fn rescale_to_unit(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.bounds.to_unit(x)
    }

    pub fn rescale_from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.bounds.from_unit(u)
    }

    fn check_condition(&self, condition: &[f64]) -> Result<()> {
        if condition.len() != self.condition_dim() {
            return Err(Error::Dimension(format!(
                "expected a {}-dimensional condition, got {}",
                self.condition_dim(),
                condition.len()
            )));
        }
        Ok(())
    }

    /// Conditioner inputs for coordinate `j`: centered condition followed by
    /// the centered unit coordinates `0..j`.
    fn inputs(&self, j: usize, conditions: ArrayView2<'_, f64>, unit: ArrayView2<'_, f64>) -> Array2<f64> {
        let c = self.condition_dim();
        Array2::from_shape_fn((conditions.nrows(), c + j), |(r, col)| {
            if col < c {
                self.condition_bounds.centered(col, conditions[[r, col]])
            } else {
                2.0 * unit[[r, col - c]] - 1.0
            }
        })
    }

    /// Bin probabilities of coordinate `j` given the condition and the unit
    /// coordinates already generated.
    pub fn bin_probs(&self, j: usize, condition: &[f64], prefix_unit: &[f64]) -> Result<BinDensity> {
        if j >= self.dim() || prefix_unit.len() != j {
            return Err(Error::Dimension(format!("coordinate {j} needs a prefix of length {j}")));
        }
        self.check_condition(condition)?;
        let cond = ArrayView2::from_shape((1, condition.len()), condition).map_err(|e| Error::Dimension(e.to_string()))?;
        let prefix = ArrayView2::from_shape((1, j), prefix_unit).map_err(|e| Error::Dimension(e.to_string()))?;
        let mut logits = self.conditioners[j].forward_batch(self.inputs(j, cond, prefix).view())?;
        let mut row = logits.row_mut(0);
        let probs = row.as_slice_mut().expect("contiguous row");
        softmax_in_place(probs);
        BinDensity::new(probs.to_vec())
    }

    pub fn log_density(&self, x_next: &[f64], condition: &[f64]) -> Result<f64> {
        self.check_condition(condition)?;
        let x = ArrayView2::from_shape((1, x_next.len()), x_next).map_err(|e| Error::Dimension(e.to_string()))?;
        let c = ArrayView2::from_shape((1, condition.len()), condition).map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(self.log_density_batch(x, c)?[0])
    }

    fn unit_rows(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if states.ncols() != self.dim() {
            return Err(Error::Dimension(format!("expected {} state columns, got {}", self.dim(), states.ncols())));
        }
        let mut unit = Array2::zeros(states.raw_dim());
        for (r, row) in states.rows().into_iter().enumerate() {
            let u = self.bounds.to_unit(row.as_slice().unwrap_or(&row.to_vec()))?;
            unit.row_mut(r).assign(&ndarray::ArrayView1::from(&u));
        }
        Ok(unit)
    }

    pub fn log_density_batch(&self, states: ArrayView2<'_, f64>, conditions: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if conditions.ncols() != self.condition_dim() || conditions.nrows() != states.nrows() {
            return Err(Error::Dimension("condition rows do not match states".into()));
        }
        let unit = self.unit_rows(states)?;
        let log_b = (self.bins as f64).ln();
        let mut out = vec![0.0; states.nrows()];
        for start in (0..states.nrows()).step_by(CHUNK) {
            let end = (start + CHUNK).min(states.nrows());
            let u = unit.slice(ndarray::s![start..end, ..]);
            let c = conditions.slice(ndarray::s![start..end, ..]);
            for j in 0..self.dim() {
                let logits = self.conditioners[j].forward_batch(self.inputs(j, c, u).view())?;
                for (r, row) in logits.rows().into_iter().enumerate() {
                    let k = bin_index(u[[r, j]], self.bins);
                    out[start + r] += log_b + log_softmax_at(row.as_slice().expect("contiguous"), k);
                }
            }
        }
        Ok(out)
    }

    /// Triangular map from `u ∈ [0,1]^d` to a state, coordinate by coordinate.
    pub fn sample_step(&self, condition: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_condition(condition)?;
        let c = ArrayView2::from_shape((1, condition.len()), condition).map_err(|e| Error::Dimension(e.to_string()))?;
        let uu = ArrayView2::from_shape((1, u.len()), u).map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(self.sample_batch(c, uu)?.row(0).to_vec())
    }

    /// Row-wise [`Self::sample_step`].
    pub fn sample_batch(&self, conditions: ArrayView2<'_, f64>, uniforms: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if uniforms.ncols() != self.dim() || conditions.nrows() != uniforms.nrows() {
            return Err(Error::Dimension("uniform rows do not match conditions".into()));
        }
        if conditions.ncols() != self.condition_dim() {
            return Err(Error::Dimension("condition width mismatch".into()));
        }
        let n = uniforms.nrows();
        let mut unit = Array2::zeros((n, self.dim()));
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let c = conditions.slice(ndarray::s![start..end, ..]);
            for j in 0..self.dim() {
                let mut logits = {
                    let prefix = unit.slice(ndarray::s![start..end, ..]);
                    self.conditioners[j].forward_batch(self.inputs(j, c, prefix).view())?
                };
                for (r, mut row) in logits.rows_mut().into_iter().enumerate() {
                    let probs = row.as_slice_mut().expect("contiguous");
                    softmax_in_place(probs);
                    unit[[start + r, j]] = inverse_cdf(probs, uniforms[[start + r, j]]);
                }
            }
        }
        let mut out = unit;
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.bounds.from_unit_coord(j, *v);
            }
        }
        Ok(out)
    }

    /// Maps states back to uniforms through the conditional CDFs.
    pub fn cdf_batch(&self, states: ArrayView2<'_, f64>, conditions: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let unit = self.unit_rows(states)?;
        let mut out = Array2::zeros(unit.raw_dim());
        for j in 0..self.dim() {
            let mut logits = self.conditioners[j].forward_batch(self.inputs(j, conditions, unit.view()).view())?;
            for (r, mut row) in logits.rows_mut().into_iter().enumerate() {
                let probs = row.as_slice_mut().expect("contiguous");
                softmax_in_place(probs);
                out[[r, j]] = cdf(probs, unit[[r, j]]);
            }
        }
        Ok(out)
    }

    /// `mean(-w · log q(x | c))` over the data.
    pub fn weighted_nll(&self, data: &FlowData) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("flow data"));
        }
        let logs = self.log_density_batch(data.states.view(), data.conditions.view())?;
        let total: f64 = logs.iter().zip(&data.weights).map(|(l, w)| -w * l).sum();
        Ok(total / data.len() as f64)
    }

    /// Weighted NLL of a batch and its gradient per conditioner.
    pub fn weighted_nll_with_grad(&self, data: &FlowData) -> Result<(f64, Vec<Vec<f64>>)> {
        if data.is_empty() {
            return Err(Error::Empty("flow data"));
        }
        let unit = self.unit_rows(data.states.view())?;
        let b = data.len() as f64;
        let log_b = (self.bins as f64).ln();
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(self.dim());
        let mut cache = BatchCache::default();
        for j in 0..self.dim() {
            let net = &self.conditioners[j];
            let inputs = self.inputs(j, data.conditions.view(), unit.view());
            let mut delta = net.forward_cached(inputs.view(), &mut cache)?.clone();
            for (r, mut row) in delta.rows_mut().into_iter().enumerate() {
                let w = data.weights[r];
                let k = bin_index(unit[[r, j]], self.bins);
                let logits = row.as_slice_mut().expect("contiguous");
                loss -= w * (log_b + log_softmax_at(logits, k));
                softmax_in_place(logits);
                logits[k] -= 1.0;
                for g in logits.iter_mut() {
                    *g *= w / b;
                }
            }
            let mut g = vec![0.0; net.num_params()];
            net.backward(&cache, delta.view(), &mut g)?;
            grads.push(g);
        }
        Ok((loss / b, grads))
    }

    fn params(&self) -> Vec<Vec<f64>> {
        self.conditioners.iter().map(|n| n.params().to_vec()).collect()
    }

    fn set_params(&mut self, params: &[Vec<f64>]) -> Result<()> {
        for (net, p) in self.conditioners.iter_mut().zip(params) {
            net.set_params(p)?;
        }
        Ok(())
    }
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits[k] - max - sum.ln()
}

/// Trains `model` by mini-batch Adam on the weighted NLL with a
/// chronological validation split and early stopping; restores the best
/// validation parameters.
pub fn fit_flow(model: &mut ConditionalFlowModel, data: &FlowData, config: &TrainConfig, seed: u64) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("flow data"));
    }
    let (train_range, val_range) = config.split(data.len())?;
    let val_idx: Vec<usize> = val_range.collect();
    let val = data.select(&val_idx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimizers: Vec<Adam> = model
        .conditioners
        .iter()
        .map(|n| Adam::new(n.num_params(), config.optimizer))
        .collect();
    let mut stopper = EarlyStopping::new(model.params());
    for epoch in 0..config.max_epochs {
        for opt in &mut optimizers {
            opt.set_learning_rate(config.learning_rate(epoch));
        }
        let order = shuffled(train_range.clone(), &mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let part = data.select(batch);
            let (loss, grads) = model.weighted_nll_with_grad(&part)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            train_loss += loss * batch.len() as f64;
            for ((net, opt), g) in model.conditioners.iter_mut().zip(&mut optimizers).zip(&grads) {
                opt.step(net.params_mut(), g)?;
            }
        }
        train_loss /= order.len() as f64;
        let val_loss = model.weighted_nll(&val)?;
        log::debug!("flow epoch {epoch}: train {train_loss:.6} validation {val_loss:.6}");
        if stopper.record(epoch, train_loss, val_loss, || model.params(), config)? {
            break;
        }
    }
    let (best, report) = stopper.finish();
    model.set_params(&best)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn unit_bounds(d: usize) -> Bounds {
        Bounds::new(vec![0.0; d], vec![1.0; d]).unwrap()
    }

    fn model(d: usize, c: usize, bins: usize, seed: u64) -> ConditionalFlowModel {
        let cfg = FlowConfig {
            bins,
            hidden: vec![8, 8],
            ..FlowConfig::default()
        };
        ConditionalFlowModel::new(unit_bounds(d), unit_bounds(c), &cfg, seed).unwrap()
    }

    /// Sets the output bias of conditioner `j` so its probabilities are `p`
    /// regardless of input.
    fn pin_probs(m: &mut ConditionalFlowModel, j: usize, p: &[f64]) {
        let net = &mut m.conditioners_mut()[j];
        let n = net.num_params();
        let params = net.params_mut();
        params[n - p.len()..].iter_mut().zip(p).for_each(|(b, q)| *b = q.ln());
    }

    #[test]
    fn rescaling_endpoints_and_round_trip() {
        let b = Bounds::new(vec![-2.0, 10.0], vec![3.0, 11.0]).unwrap();
        assert_eq!(b.to_unit(&[-2.0, 10.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(b.to_unit(&[3.0, 11.0]).unwrap(), vec![1.0, 1.0]);
        let x = [0.123456, 10.987654];
        let back = b.from_unit(&b.to_unit(&x).unwrap());
        assert!(back.iter().zip(&x).all(|(a, c)| (a - c).abs() < 1e-14));
    }

    #[test]
    fn out_of_bounds_datum_is_rejected() {
        let data = array![[0.0], [1.0], [0.5]];
        let b = Bounds::fit(data.view(), 0.1).unwrap();
        assert!((b.lo()[0] + 0.1).abs() < 1e-15 && (b.hi()[0] - 1.1).abs() < 1e-15);
        match b.to_unit(&[1.2 + 1e-9]) {
            Err(Error::OutOfRange { coordinate: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fresh_model_is_uniform() {
        let m = model(3, 2, 16, 1);
        for j in 0..3 {
            let p = m.bin_probs(j, &[0.3, 0.9], &vec![0.5; j]).unwrap();
            assert!(p.probs().iter().all(|&q| (q - 1.0 / 16.0).abs() < 1e-15));
        }
        assert!(m.log_density(&[0.1, 0.7, 0.99], &[0.2, 0.2]).unwrap().abs() < 1e-14);
        let u = [0.0, 0.37, 1.0];
        assert_eq!(m.sample_step(&[0.5, 0.5], &u).unwrap(), u.to_vec());
    }

    #[test]
    fn two_bin_density_value() {
        let mut m = model(1, 1, 2, 2);
        pin_probs(&mut m, 0, &[0.75, 0.25]);
        let ld = m.log_density(&[0.3], &[0.5]).unwrap();
        assert!((ld - 1.5f64.ln()).abs() < 1e-12);
        assert!((ld - 0.405465).abs() < 1e-6);
    }

    #[test]
    fn hand_inverted_cdf() {
        let p = BinDensity::new(vec![0.5, 0.25, 0.125, 0.125]).unwrap();
        assert_eq!(p.inverse_cdf(0.5), 0.25);
        assert_eq!(p.inverse_cdf(0.0), 0.0);
        assert_eq!(p.inverse_cdf(1.0), 1.0);
        assert_eq!(p.bin_of(1.0), 3);
        assert_eq!(p.bin_of(0.25), 1);
        for q in [0.01, 0.3, 0.62, 0.8, 0.999] {
            assert!((p.cdf(p.inverse_cdf(q)) - q).abs() < 1e-15);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = model(2, 1, 8, 3);
        for net in m.conditioners_mut() {
            for p in net.params_mut() {
                *p += rng.random_range(-0.5..0.5);
            }
        }
        let cond = [0.4];
        let mut total = 0.0;
        for a in 0..8 {
            for b in 0..8 {
                let x = [(a as f64 + 0.5) / 8.0, (b as f64 + 0.5) / 8.0];
                total += m.log_density(&x, &cond).unwrap().exp() / 64.0;
            }
        }
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn batch_and_single_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = model(3, 2, 8, 4);
        for net in m.conditioners_mut() {
            for p in net.params_mut() {
                *p += rng.random_range(-0.5..0.5);
            }
        }
        let conds = Array2::from_shape_fn((5, 2), |_| rng.random::<f64>());
        let u = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>());
        let xs = m.sample_batch(conds.view(), u.view()).unwrap();
        let lds = m.log_density_batch(xs.view(), conds.view()).unwrap();
        let back = m.cdf_batch(xs.view(), conds.view()).unwrap();
        for r in 0..5 {
            let c = conds.row(r).to_vec();
            let x = m.sample_step(&c, &u.row(r).to_vec()).unwrap();
            assert_eq!(x, xs.row(r).to_vec());
            assert!((m.log_density(&x, &c).unwrap() - lds[r]).abs() < 1e-14);
            for j in 0..3 {
                assert!((back[[r, j]] - u[[r, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn weighted_nll_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = model(2, 1, 4, 5);
        for net in m.conditioners_mut() {
            for p in net.params_mut() {
                *p += rng.random_range(-0.5..0.5);
            }
        }
        let c = Array2::from_shape_fn((6, 1), |_| rng.random::<f64>());
        let s = Array2::from_shape_fn((6, 2), |_| rng.random::<f64>());
        let ones = FlowData::unweighted(c.clone(), s.clone()).unwrap();
        let direct: f64 = -m.log_density_batch(s.view(), c.view()).unwrap().iter().sum::<f64>() / 6.0;
        assert_eq!(m.weighted_nll(&ones).unwrap(), direct);

        let zeros = FlowData::new(c.clone(), s.clone(), vec![0.0; 6]).unwrap();
        let (l0, g0) = m.weighted_nll_with_grad(&zeros).unwrap();
        assert_eq!(l0, 0.0);
        assert!(g0.iter().flatten().all(|&g| g == 0.0));

        let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..2.0)).collect();
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let (l1, g1) = m.weighted_nll_with_grad(&FlowData::new(c.clone(), s.clone(), w).unwrap()).unwrap();
        let (l2, g2) = m.weighted_nll_with_grad(&FlowData::new(c, s, w2).unwrap()).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-13);
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert!((b - 2.0 * a).abs() < 1e-13);
        }
    }

    #[test]
    fn negative_weight_is_rejected() {
        let c = Array2::zeros((2, 1));
        let s = Array2::zeros((2, 1));
        assert!(FlowData::new(c, s, vec![1.0, -0.5]).is_err());
    }
}
