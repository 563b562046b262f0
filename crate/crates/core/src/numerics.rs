//! Dense row-major `f64` kernels with hand-written backward rules.
//!
//! Every forward kernel has a matching `*_backward` that maps the upstream
//! gradient to gradients of the inputs. Summation order is fixed, so all
//! kernels are bitwise deterministic.

use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("softmax row {0} has no valid column")]
    FullyMasked(usize),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite value at coordinate {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(NumericsError::Shape {
                op: "from_vec",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension (1 for a vector).
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::Shape {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (n, k) = as_matrix(a);
    let (k2, m) = as_matrix(b);
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (n, k) = as_matrix(a);
    let (m, k2) = as_matrix(b);
    if k != k2 {
        return Err(shape_err("matmul_nt", a, b));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (k, n) = as_matrix(a);
    let (k2, m) = as_matrix(b);
    if k != k2 {
        return Err(shape_err("matmul_tn", a, b));
    }
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Gradients of `c = a · b`: `(dc · bᵀ, aᵀ · dc)`.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    dc: &Tensor,
) -> Result<(Tensor, Tensor), NumericsError> {
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.shape != b.shape {
        return Err(shape_err("add", a, b));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Adds a length-`cols` bias to every row.
pub fn add_row_broadcast(a: &Tensor, bias: &Tensor) -> Result<Tensor, NumericsError> {
    if bias.len() != a.cols() {
        return Err(shape_err("add_row_broadcast", a, bias));
    }
    let mut out = a.clone();
    let c = a.cols();
    for row in out.data.chunks_mut(c) {
        for (x, b) in row.iter_mut().zip(&bias.data) {
            *x += b;
        }
    }
    Ok(out)
}

/// Column sums of the upstream gradient, i.e. the bias gradient of `add_row_broadcast`.
pub fn sum_rows(dy: &Tensor) -> Tensor {
    let c = dy.cols();
    let mut out = vec![0.0; c];
    for row in dy.data.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor {
        shape: vec![c],
        data: out,
    }
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    let mut out = a.clone();
    out.scale_assign(s);
    out
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (n, m) = as_matrix(a);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data[i * m + j];
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Concatenates matrices with equal row counts along the last axis.
pub fn concat_last(parts: &[Tensor]) -> Result<Tensor, NumericsError> {
    let first = parts.first().ok_or(NumericsError::Empty("concat_last"))?;
    let n = first.rows();
    if let Some(bad) = parts.iter().find(|p| p.rows() != n) {
        return Err(shape_err("concat_last", first, bad));
    }
    let total: usize = parts.iter().map(Tensor::cols).sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor {
        shape: vec![n, total],
        data,
    })
}

/// Splits the upstream gradient of `concat_last` back into per-part gradients.
pub fn concat_last_backward(dy: &Tensor, widths: &[usize]) -> Vec<Tensor> {
    let n = dy.rows();
    let mut out: Vec<Tensor> = widths.iter().map(|&w| Tensor::zeros(&[n, w])).collect();
    for i in 0..n {
        let row = dy.row(i);
        let mut off = 0;
        for (t, &w) in out.iter_mut().zip(widths) {
            t.row_mut(i).copy_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    out
}

/// Row-wise softmax over the columns where `mask` is true; masked columns get 0.
pub fn softmax_rows(x: &Tensor, mask: &[bool]) -> Result<Tensor, NumericsError> {
    let (n, m) = as_matrix(x);
    if mask.len() != m {
        return Err(NumericsError::Shape {
            op: "softmax_rows",
            left: x.shape.clone(),
            right: vec![mask.len()],
        });
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = x.row(i);
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &ok)| ok)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NumericsError::FullyMasked(i));
        }
        let orow = &mut out[i * m..(i + 1) * m];
        let mut sum = 0.0;
        for j in 0..m {
            if mask[j] {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// `dx_ij = y_ij (dy_ij − Σ_k y_ik dy_ik)`; masked columns have `y = 0` and get no gradient.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let m = y.cols();
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y
        .data
        .chunks(m)
        .zip(dy.data.chunks(m))
        .zip(dx.chunks_mut(m))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..m {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    Tensor {
        shape: y.shape.clone(),
        data: dx,
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Per-row `(x − μ)/sqrt(var + ε) · γ + β` with population variance.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, LayerNormCache), NumericsError> {
    let (n, d) = as_matrix(x);
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err("layer_norm", x, gamma));
    }
    let mut xhat = vec![0.0; n * d];
    let mut out = vec![0.0; n * d];
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    Ok((
        Tensor {
            shape: vec![n, d],
            data: out,
        },
        LayerNormCache {
            xhat: Tensor {
                shape: vec![n, d],
                data: xhat,
            },
            inv_std,
        },
    ))
}

/// Returns `(dx, dγ, dβ)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = as_matrix(dy);
    let mut dx = vec![0.0; n * d];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut g = vec![0.0; d];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            g[j] = dyr[j] * gamma.data[j];
        }
        let mean_g = g.iter().sum::<f64>() / d as f64;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        for j in 0..d {
            dx[i * d + j] = is * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    (
        Tensor {
            shape: vec![n, d],
            data: dx,
        },
        Tensor {
            shape: vec![d],
            data: dgamma,
        },
        Tensor {
            shape: vec![d],
            data: dbeta,
        },
    )
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximation GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, g)| gelu_grad_scalar(v) * g)
            .collect(),
    }
}

/// Mean over `positions` of `−log softmax(logits[pos])[target]`, with the
/// gradient w.r.t. the full logits matrix (zero on unused rows).
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[u32],
    positions: &[usize],
) -> Result<(f64, Tensor), NumericsError> {
    if positions.is_empty() {
        return Err(NumericsError::Empty("cross_entropy"));
    }
    if targets.len() != positions.len() {
        return Err(NumericsError::Shape {
            op: "cross_entropy",
            left: vec![targets.len()],
            right: vec![positions.len()],
        });
    }
    let v = logits.cols();
    let scale = 1.0 / positions.len() as f64;
    let mut grad = Tensor::zeros(&[logits.rows(), v]);
    let mut loss = 0.0;
    for (&pos, &t) in positions.iter().zip(targets) {
        let row = logits.row(pos);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[t as usize];
        let g = grad.row_mut(pos);
        for j in 0..v {
            g[j] += scale * (row[j] - log_z).exp();
        }
        g[t as usize] -= scale;
    }
    Ok((loss * scale, grad))
}

/// Mean squared error and its gradient `2(pred − target)/N`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NumericsError> {
    if pred.len() != target.len() {
        return Err(NumericsError::Shape {
            op: "mse_loss",
            left: vec![pred.len()],
            right: vec![target.len()],
        });
    }
    if pred.is_empty() {
        return Err(NumericsError::Empty("mse_loss"));
    }
    let n = pred.len() as f64;
    let loss = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect();
    Ok((loss, grad))
}

/// Relative error used by the gradient checker.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `x` and returns
/// the largest per-coordinate relative error.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(NumericsError::Shape {
            op: "grad_check",
            left: vec![x.len()],
            right: vec![analytic.len()],
        });
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        if !(numeric.is_finite() && analytic[i].is_finite()) {
            return Err(NumericsError::NonFinite(i));
        }
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    /// Deterministic pseudo-random fill for gradient tests.
    fn filled(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Scalar probe loss `Σ w ⊙ y` so every output coordinate matters.
    fn probe(y: &Tensor, w: &Tensor) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn matmul_hand_values() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&id, &a).unwrap(), a);
        assert!(matches!(matmul(&b, &b), Err(NumericsError::Shape { .. })));
        assert_eq!(
            matmul_nt(&a, &a).unwrap(),
            matmul(&a, &transpose(&a)).unwrap()
        );
        assert_eq!(
            matmul_tn(&a, &a).unwrap(),
            matmul(&transpose(&a), &a).unwrap()
        );
    }

    #[test]
    fn matmul_gradients() {
        let a = filled(&[3, 4], 1);
        let b = filled(&[4, 2], 2);
        let w = filled(&[3, 2], 3);
        let (da, db) = matmul_backward(&a, &b, &w).unwrap();
        let err_a = grad_check(
            |x| {
                probe(
                    &matmul(&Tensor::from_vec(&[3, 4], x.to_vec()).unwrap(), &b).unwrap(),
                    &w,
                )
            },
            a.data(),
            da.data(),
            1e-5,
        )
        .unwrap();
        let err_b = grad_check(
            |x| {
                probe(
                    &matmul(&a, &Tensor::from_vec(&[4, 2], x.to_vec()).unwrap()).unwrap(),
                    &w,
                )
            },
            b.data(),
            db.data(),
            1e-5,
        )
        .unwrap();
        assert!(err_a <= 1e-6 && err_b <= 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn concat_and_split() {
        let a = t(&[&[1.0], &[2.0]]);
        let b = t(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let c = concat_last(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let parts = concat_last_backward(&c, &[1, 2]);
        assert_eq!(parts, vec![a, b]);
        assert_eq!(transpose(&transpose(&c)), c);
        let bias = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let shifted = add_row_broadcast(&c, &bias).unwrap();
        assert_eq!(shifted.get(1, 2), 7.0);
        assert_eq!(sum_rows(&c).data(), &[3.0, 8.0, 10.0]);
        assert_eq!(scale(&c, 2.0).get(0, 0), 2.0);
        assert_eq!(add(&c, &c).unwrap(), scale(&c, 2.0));
    }

    #[test]
    fn softmax_examples() {
        let x = t(&[&[0.0, 3f64.ln()]]);
        let y = softmax_rows(&x, &[true, true]).unwrap();
        assert!((y.get(0, 0) - 0.25).abs() < 1e-15 && (y.get(0, 1) - 0.75).abs() < 1e-15);

        let u = t(&[&[2.0, 2.0, 2.0, 9.0]]);
        let yu = softmax_rows(&u, &[true, true, true, false]).unwrap();
        for j in 0..3 {
            assert!((yu.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(yu.get(0, 3), 0.0);

        let shifted = t(&[&[100.0, 100.0 + 3f64.ln()]]);
        let ys = softmax_rows(&shifted, &[true, true]).unwrap();
        assert!((ys.get(0, 1) - y.get(0, 1)).abs() < 1e-14);

        assert_eq!(
            softmax_rows(&x, &[false, false]),
            Err(NumericsError::FullyMasked(0))
        );
    }

    #[test]
    fn softmax_gradient() {
        let x = filled(&[3, 5], 4);
        let w = filled(&[3, 5], 5);
        let mask = [true, true, false, true, true];
        let y = softmax_rows(&x, &mask).unwrap();
        let dx = softmax_rows_backward(&y, &w);
        let err = grad_check(
            |v| {
                probe(
                    &softmax_rows(&Tensor::from_vec(&[3, 5], v.to_vec()).unwrap(), &mask).unwrap(),
                    &w,
                )
            },
            x.data(),
            dx.data(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        let zeros = Tensor::zeros(&[4]);
        let c = t(&[&[3.0, 3.0, 3.0, 3.0]]);
        let (y, _) = layer_norm(&c, &ones, &zeros).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        let x = filled(&[2, 6], 6);
        let gamma = Tensor::from_vec(&[6], vec![2.5; 6]).unwrap();
        let beta = Tensor::from_vec(&[6], vec![-0.5; 6]).unwrap();
        let (y, _) = layer_norm(&x, &gamma, &beta).unwrap();
        for i in 0..2 {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 6.0;
            let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0).sqrt();
            assert!((mean + 0.5).abs() < 1e-12);
            assert!((std - 2.5).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let x = filled(&[3, 5], 7);
        let gamma = filled(&[5], 8);
        let beta = filled(&[5], 9);
        let w = filled(&[3, 5], 10);
        let (_, cache) = layer_norm(&x, &gamma, &beta).unwrap();
        let (dx, dg, db) = layer_norm_backward(&cache, &gamma, &w);
        let f_x = |v: &[f64]| {
            probe(
                &layer_norm(
                    &Tensor::from_vec(&[3, 5], v.to_vec()).unwrap(),
                    &gamma,
                    &beta,
                )
                .unwrap()
                .0,
                &w,
            )
        };
        let f_g = |v: &[f64]| {
            probe(
                &layer_norm(&x, &Tensor::from_vec(&[5], v.to_vec()).unwrap(), &beta)
                    .unwrap()
                    .0,
                &w,
            )
        };
        let f_b = |v: &[f64]| {
            probe(
                &layer_norm(&x, &gamma, &Tensor::from_vec(&[5], v.to_vec()).unwrap())
                    .unwrap()
                    .0,
                &w,
            )
        };
        assert!(grad_check(f_x, x.data(), dx.data(), 1e-5).unwrap() <= 1e-5);
        assert!(grad_check(f_g, gamma.data(), dg.data(), 1e-5).unwrap() <= 1e-5);
        assert!(grad_check(f_b, beta.data(), db.data(), 1e-5).unwrap() <= 1e-5);
    }

    #[test]
    fn gelu_examples() {
        let x = Tensor::from_vec(&[3], vec![0.0, 10.0, -10.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-6);
        let x = filled(&[7], 11);
        let w = filled(&[7], 12);
        let dx = gelu_backward(&x, &w);
        let err = grad_check(
            |v| probe(&gelu(&Tensor::from_vec(&[7], v.to_vec()).unwrap()), &w),
            x.data(),
            dx.data(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[2, 7]);
        let (l, _) = cross_entropy(&uniform, &[3], &[1]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-14);

        let hand = t(&[&[0.0, 0.0, 8f64.ln()]]);
        let (l, _) = cross_entropy(&hand, &[2], &[0]).unwrap();
        assert!((l + (0.8f64).ln()).abs() < 1e-14);
        assert!((l - 0.2231).abs() < 1e-4);

        let confident = t(&[&[-50.0, 50.0]]);
        assert!(cross_entropy(&confident, &[1], &[0]).unwrap().0 < 1e-30);
        assert!(matches!(
            cross_entropy(&hand, &[], &[]),
            Err(NumericsError::Empty(_))
        ));

        let logits = filled(&[4, 6], 13);
        let (_, g) = cross_entropy(&logits, &[2, 5], &[0, 3]).unwrap();
        let err = grad_check(
            |v| {
                cross_entropy(
                    &Tensor::from_vec(&[4, 6], v.to_vec()).unwrap(),
                    &[2, 5],
                    &[0, 3],
                )
                .unwrap()
                .0
            },
            logits.data(),
            g.data(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        let (l, g) = mse_loss(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert_eq!(l, 2.5);
        let err = grad_check(
            |v| mse_loss(v, &[2.0, 4.0]).unwrap().0,
            &[1.0, 2.0],
            &g,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse_loss(&[], &[]).is_err());
    }

    #[test]
    fn grad_check_exact_on_linear_and_detects_corruption() {
        let c = [0.5, -2.0, 3.0];
        let f = |x: &[f64]| x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        assert!(grad_check(f, &[1.0, 2.0, 3.0], &c, 1e-5).unwrap() <= 1e-10);
        let corrupted = [0.5, -2.0, 3.3];
        assert!(grad_check(f, &[1.0, 2.0, 3.0], &corrupted, 1e-5).unwrap() > 1e-2);
        assert!(matches!(
            grad_check(|_| f64::NAN, &[1.0], &[1.0], 1e-5),
            Err(NumericsError::NonFinite(0))
        ));
    }

    #[test]
    fn kernels_are_deterministic() {
        let a = filled(&[5, 5], 14);
        let b = filled(&[5, 5], 15);
        assert_eq!(
            matmul(&a, &b).unwrap().data(),
            matmul(&a, &b).unwrap().data()
        );
        let mask = [true; 5];
        assert_eq!(
            softmax_rows(&a, &mask).unwrap(),
            softmax_rows(&a, &mask).unwrap()
        );
    }
}
