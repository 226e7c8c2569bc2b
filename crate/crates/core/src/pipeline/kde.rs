//! Bivariate Gaussian product-kernel density on a regular lattice.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde2 {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub bandwidth: (f64, f64),
    /// `density[[i, j]]` at `(x[i], y[j])`.
    pub density: Array2<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn axis(v: &[f64], h: f64, points: usize) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Gaussian KDE with Scott's-rule bandwidths `σ_i n^{-1/6}` evaluated on a
/// `points × points` lattice spanning the data plus three bandwidths.
pub fn kde2(samples: &[(f64, f64)], points: usize) -> Result<Kde2> {
    if samples.len() < 100 {
        return Err(Error::Empty("kernel density needs at least 100 samples"));
    }
    if points < 2 {
        return Err(Error::Config("lattice needs at least two points per axis".into()));
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let (_, sx) = mean_std(&xs);
    let (_, sy) = mean_std(&ys);
    if !(sx > 0.0 && sy > 0.0) {
        return Err(Error::Dimension("zero-variance coordinate in kernel density".into()));
    }
    let factor = (samples.len() as f64).powf(-1.0 / 6.0);
    let (hx, hy) = (sx * factor, sy * factor);
    let x = axis(&xs, hx, points);
    let y = axis(&ys, hy, points);
    // separable kernel: density = Kx · Kyᵀ / n
    let kx = Array2::from_shape_fn((points, xs.len()), |(i, s)| gauss((x[i] - xs[s]) / hx) / hx);
    let ky = Array2::from_shape_fn((ys.len(), points), |(s, j)| gauss((y[j] - ys[s]) / hy) / hy);
    let density = kx.dot(&ky) / samples.len() as f64;
    Ok(Kde2 {
        x,
        y,
        bandwidth: (hx, hy),
        density,
    })
}

fn gauss(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Kde2 {
    /// Riemann sum of the lattice values.
    pub fn integral(&self) -> f64 {
        let dx = self.x[1] - self.x[0];
        let dy = self.y[1] - self.y[0];
        self.density.sum() * dx * dy
    }
}
