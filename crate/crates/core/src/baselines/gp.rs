//! Gaussian-process regression with a constant·RBF kernel, solved by Cholesky.

use serde::{Deserialize, Serialize};

use super::BaselineError;

/// Diagonal jitter added on top of the noise variance.
pub const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    /// Kernel amplitude `c` in `c · exp(-|a-b|² / 2ℓ²)`.
    pub amplitude: f64,
    /// `ℓ`; an infinite length scale gives the constant kernel `c`.
    pub length_scale: f64,
    /// Observation noise variance `σ_n²`.
    pub noise: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            length_scale: 1.0,
            noise: 1e-2,
        }
    }
}

impl GpConfig {
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        if self.length_scale.is_infinite() {
            return self.amplitude;
        }
        self.amplitude * (-d2 / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    pub config: GpConfig,
    x: Vec<Vec<f64>>,
    /// Lower Cholesky factor of `K + (σ_n² + jitter) I`, row-major.
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

/// In-place lower Cholesky factorization of a row-major `n × n` SPD matrix.
pub fn cholesky(a: &mut [f64], n: usize) -> Result<(), BaselineError> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d.is_nan() || d <= 0.0 {
            return Err(BaselineError::Factorization { pivot: j, value: d });
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L z = b`.
fn forward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * z[k]).sum();
        z[i] = (b[i] - s) / l[i * n + i];
    }
    z
}

/// Solves `Lᵀ x = z`.
fn backward_sub(l: &[f64], n: usize, z: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (z[i] - s) / l[i * n + i];
    }
    x
}

pub fn gp_fit(x: &[Vec<f64>], y: &[f64], config: &GpConfig) -> Result<GpModel, BaselineError> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(BaselineError::Data(format!(
            "{} rows, {} targets",
            n,
            y.len()
        )));
    }
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = config.kernel(&x[i], &x[j]);
        }
        k[i * n + i] += config.noise + JITTER;
    }
    cholesky(&mut k, n)?;
    let alpha = backward_sub(&k, n, &forward_sub(&k, n, y));
    Ok(GpModel {
        config: *config,
        x: x.to_vec(),
        chol: k,
        alpha,
    })
}

impl GpModel {
    /// Posterior mean `k*ᵀ α` and variance `k(x*,x*) − vᵀv` with `L v = k*`, clamped at 0.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let ks: Vec<f64> = self.x.iter().map(|xi| self.config.kernel(xi, q)).collect();
        let mean = ks.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = forward_sub(&self.chol, n, &ks);
        let var = self.config.kernel(q, q) - v.iter().map(|t| t * t).sum::<f64>();
        (mean, var.max(0.0))
    }

    pub fn summary(&self) -> String {
        format!(
            "gaussian_process\nkernel = constant * rbf\namplitude = {}\nlength_scale = {}\nnoise = {}\njitter = {}\ntraining_points = {}\n",
            self.config.amplitude,
            self.config.length_scale,
            self.config.noise,
            JITTER,
            self.x.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_point_hand_example() {
        let cfg = GpConfig {
            amplitude: 1.0,
            length_scale: f64::INFINITY,
            noise: 1.0,
        };
        let m = gp_fit(&[vec![0.3]], &[2.0], &cfg).unwrap();
        let (mu, var) = m.predict(&[5.0]);
        assert!((mu - 1.0).abs() < 1e-9);
        assert!((var - 0.5).abs() < 1e-9);
    }

    #[test]
    fn interpolates_without_noise() {
        let cfg = GpConfig {
            noise: 0.0,
            ..Default::default()
        };
        let x = vec![vec![0.0], vec![1.0], vec![2.5]];
        let y = [1.0, -2.0, 0.5];
        let m = gp_fit(&x, &y, &cfg).unwrap();
        for (xi, yi) in x.iter().zip(y) {
            let (mu, var) = m.predict(xi);
            assert!((mu - yi).abs() < 1e-6);
            assert!(var.abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0];
        assert!(matches!(
            cholesky(&mut a, 2),
            Err(BaselineError::Factorization { pivot: 1, .. })
        ));
    }
}
