//! Autoencoder between DLV grids and a low-dimensional code.
//!
//! Both networks work on standardized log-DLVs; the decoder output is
//! exponentiated, so every decoded grid is strictly positive and prices to
//! an arbitrage-free surface.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Activation, Adam, BatchCache, Mlp};
use crate::error::{Error, Result};
use crate::grid::{DlvGrid, GridSpec};
use crate::training::{shuffled, EarlyStopping, TrainConfig, TrainReport};

/// Decoded log-DLVs are kept inside this range so extreme codes still give
/// finite positive grids.
const LOG_DLV_RANGE: (f64, f64) = (-20.0, 5.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Use identity activations everywhere (linear autoencoder).
    pub linear: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            latent_dim: 3,
            hidden: vec![64, 64, 64],
            linear: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codec {
    format_version: u32,
    grid_len: usize,
    latent_dim: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    encoder: Mlp,
    decoder: Mlp,
}

fn build_net(widths: &[usize], linear: bool, rng: &mut ChaCha8Rng) -> Result<Mlp> {
    let mut net = Mlp::new(widths, rng)?;
    if linear {
        let acts = vec![Activation::Identity; widths.len() - 1];
        let params = net.params().to_vec();
        net = Mlp::zeros(widths, &acts)?;
        net.set_params(&params)?;
    }
    Ok(net)
}

impl Codec {
    /// Untrained codec for grids of `grid_len` nodes, standardizing log-DLVs
    /// with the given per-node mean and scale.
    pub fn new(grid_len: usize, mean: Vec<f64>, scale: Vec<f64>, config: &CodecConfig, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || config.latent_dim > grid_len {
            return Err(Error::Config(format!(
                "latent dimension {} must lie in 1..={grid_len}",
                config.latent_dim
            )));
        }
        if mean.len() != grid_len || scale.len() != grid_len || scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Dimension("standardization must match the grid and be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = vec![grid_len];
        enc.extend_from_slice(&config.hidden);
        enc.push(config.latent_dim);
        let mut dec = vec![config.latent_dim];
        dec.extend_from_slice(&config.hidden);
        dec.push(grid_len);
        Ok(Codec {
            format_version: crate::diffnet::CHECKPOINT_VERSION,
            grid_len,
            latent_dim: config.latent_dim,
            mean,
            scale,
            encoder: build_net(&enc, config.linear, &mut rng)?,
            decoder: build_net(&dec, config.linear, &mut rng)?,
        })
    }

    /// Untrained codec whose standardization is fitted to `log_dlv` rows.
    pub fn for_data(log_dlv: ArrayView2<'_, f64>, config: &CodecConfig, seed: u64) -> Result<Self> {
        if log_dlv.nrows() < 2 {
            return Err(Error::Empty("autoencoder data"));
        }
        let mean = log_dlv.mean_axis(Axis(0)).expect("nonempty").to_vec();
        let scale = log_dlv
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|s| if *s > 1e-12 { *s } else { 1.0 })
            .collect();
        Codec::new(log_dlv.ncols(), mean, scale, config, seed)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn grid_len(&self) -> usize {
        self.grid_len
    }

    fn standardize(&self, log_dlv: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = log_dlv.to_owned();
        for mut row in z.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        z
    }

    pub fn encode(&self, dlv: &DlvGrid) -> Result<Vec<f64>> {
        let logs: Vec<f64> = dlv.values().iter().map(|v| v.ln()).collect();
        let row = ArrayView2::from_shape((1, logs.len()), &logs).map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(self.encode_log_batch(row)?.row(0).to_vec())
    }

    /// Codes of a batch of log-DLV rows.
    pub fn encode_log_batch(&self, log_dlv: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if log_dlv.ncols() != self.grid_len {
            return Err(Error::Shape {
                expected: self.grid_len,
                actual: log_dlv.ncols(),
            });
        }
        self.encoder.forward_batch(self.standardize(log_dlv).view())
    }

    pub fn decode(&self, spec: &Arc<GridSpec>, code: &[f64]) -> Result<DlvGrid> {
        if spec.len() != self.grid_len {
            return Err(Error::Shape {
                expected: self.grid_len,
                actual: spec.len(),
            });
        }
        let row = ArrayView2::from_shape((1, code.len()), code).map_err(|e| Error::Dimension(e.to_string()))?;
        let logs = self.decode_log_batch(row)?;
        DlvGrid::new(Arc::clone(spec), logs.row(0).iter().map(|v| v.exp()).collect())
    }

    /// Decoded log-DLVs of a batch of codes.
    pub fn decode_log_batch(&self, codes: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if codes.ncols() != self.latent_dim {
            return Err(Error::Dimension(format!(
                "expected {}-dimensional codes, got {}",
                self.latent_dim,
                codes.ncols()
            )));
        }
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("code".into()));
        }
        let mut y = self.decoder.forward_batch(codes)?;
        for mut row in y.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (m + s * *v).clamp(LOG_DLV_RANGE.0, LOG_DLV_RANGE.1);
            }
        }
        Ok(y)
    }

    /// Mean squared log-DLV reconstruction error of `log_dlv` rows.
    pub fn reconstruction_mse(&self, log_dlv: ArrayView2<'_, f64>) -> Result<f64> {
        let codes = self.encode_log_batch(log_dlv)?;
        let recon = self.decode_log_batch(codes.view())?;
        let n = log_dlv.len() as f64;
        Ok(recon.iter().zip(log_dlv.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
    }

    fn loss_and_grad(&self, z: ArrayView2<'_, f64>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut enc_cache = BatchCache::default();
        let mut dec_cache = BatchCache::default();
        let codes = self.encoder.forward_cached(z, &mut enc_cache)?.clone();
        let y = self.decoder.forward_cached(codes.view(), &mut dec_cache)?;
        let count = z.len() as f64;
        let mut delta = y.clone();
        let mut loss = 0.0;
        for (mut drow, zrow) in delta.rows_mut().into_iter().zip(z.rows()) {
            for ((d, zv), s) in drow.iter_mut().zip(zrow).zip(&self.scale) {
                let e = s * (*d - zv);
                loss += e * e;
                *d = 2.0 * s * e / count;
            }
        }
        let mut dec_grad = vec![0.0; self.decoder.num_params()];
        let code_grad = self.decoder.backward(&dec_cache, delta.view(), &mut dec_grad)?;
        let mut enc_grad = vec![0.0; self.encoder.num_params()];
        self.encoder.backward(&enc_cache, code_grad.view(), &mut enc_grad)?;
        Ok((loss / count, enc_grad, dec_grad))
    }

    fn params(&self) -> Vec<Vec<f64>> {
        vec![self.encoder.params().to_vec(), self.decoder.params().to_vec()]
    }
}

/// Trains the codec on log-DLV rows (chronological order) by mini-batch
/// Adam on the log-DLV reconstruction MSE with early stopping.
pub fn fit_autoencoder(codec: &mut Codec, log_dlv: ArrayView2<'_, f64>, config: &TrainConfig, seed: u64) -> Result<TrainReport> {
    config.validate()?;
    if log_dlv.nrows() == 0 {
        return Err(Error::Empty("autoencoder data"));
    }
    if log_dlv.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log-DLV data".into()));
    }
    let (train_range, val_range) = config.split(log_dlv.nrows())?;
    let z = codec.standardize(log_dlv);
    let val = log_dlv.slice(ndarray::s![val_range.start..val_range.end, ..]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc_opt = Adam::new(codec.encoder.num_params(), config.optimizer);
    let mut dec_opt = Adam::new(codec.decoder.num_params(), config.optimizer);
    let mut stopper = EarlyStopping::new(codec.params());
    for epoch in 0..config.max_epochs {
        enc_opt.set_learning_rate(config.learning_rate(epoch));
        dec_opt.set_learning_rate(config.learning_rate(epoch));
        let order = shuffled(train_range.clone(), &mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let part = z.select(Axis(0), batch);
            let (loss, ge, gd) = codec.loss_and_grad(part.view())?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            train_loss += loss * batch.len() as f64;
            enc_opt.step(codec.encoder.params_mut(), &ge)?;
            dec_opt.step(codec.decoder.params_mut(), &gd)?;
        }
        train_loss /= order.len() as f64;
        let val_loss = codec.reconstruction_mse(val)?;
        log::debug!("autoencoder epoch {epoch}: train {train_loss:.3e} validation {val_loss:.3e}");
        if stopper.record(epoch, train_loss, val_loss, || codec.params(), config)? {
            break;
        }
    }
    let (best, report) = stopper.finish();
    codec.encoder.set_params(&best[0])?;
    codec.decoder.set_params(&best[1])?;
    Ok(report)
}
