//! Dense row-major f64 matrices and the handful of kernels the encoder
//! needs, each with its backward pass.

use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn cols_slice(&self, start: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Writes `src` into columns starting at `start`.
    pub fn set_cols(&mut self, start: usize, src: &Mat) {
        for r in 0..self.rows {
            let w = src.cols;
            self.row_mut(r)[start..start + w].copy_from_slice(src.row(r));
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b` with `b` given as a row-major `[a.cols × out]` slice.
pub fn matmul(a: &Mat, b: &[f64], out: usize) -> Mat {
    debug_assert_eq!(b.len(), a.cols * out);
    let mut c = Mat::zeros(a.rows, out);
    for i in 0..a.rows {
        let crow = &mut c.data[i * out..(i + 1) * out];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * out..(k + 1) * out];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// `a · bᵀ` where `b` is a row-major `[m × a.cols]` slice.
pub fn matmul_bt(a: &Mat, b: &[f64], m: usize) -> Mat {
    let k = a.cols;
    debug_assert_eq!(b.len(), m * k);
    let mut c = Mat::zeros(a.rows, m);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            c.data[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// Accumulates `aᵀ · b` into `acc` (`[a.cols × b.cols]`, row-major).
pub fn add_matmul_at(acc: &mut [f64], a: &Mat, b: &Mat) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(acc.len(), a.cols * b.cols);
    let n = b.cols;
    for r in 0..a.rows {
        let brow = b.row(r);
        for (i, &ai) in a.row(r).iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let accrow = &mut acc[i * n..(i + 1) * n];
            for (x, &bv) in accrow.iter_mut().zip(brow) {
                *x += ai * bv;
            }
        }
    }
}

/// `y = x·W + b`.
pub fn linear(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let out = b.len();
    let mut y = matmul(x, w, out);
    for r in 0..y.rows {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
    y
}

/// Backward of [`linear`]: accumulates weight and bias gradients and
/// returns the input gradient.
pub fn linear_backward(x: &Mat, w: &[f64], dy: &Mat, dw: &mut [f64], db: &mut [f64]) -> Mat {
    add_matmul_at(dw, x, dy);
    for r in 0..dy.rows {
        for (g, v) in db.iter_mut().zip(dy.row(r)) {
            *g += v;
        }
    }
    matmul_bt(dy, w, x.cols)
}

pub fn relu(x: &Mat) -> Mat {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &Mat, dy: &Mat) -> Mat {
    Mat {
        rows: dy.rows,
        cols: dy.cols,
        data: pre
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

pub const LN_EPS: f64 = 1e-5;

pub struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> (Mat, LnCache) {
    let d = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..x.cols {
            let h = (row[c] - mean) * is;
            xhat.data[r * x.cols + c] = h;
            y.data[r * x.cols + c] = h * gamma[c] + beta[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LnCache,
    gamma: &[f64],
    dy: &Mat,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Mat {
    let cols = dy.cols;
    let d = cols as f64;
    let mut dx = Mat::zeros(dy.rows, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..dy.rows {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..cols {
            dgamma[c] += g[c] * xh[c];
            dbeta[c] += g[c];
            dxhat[c] = g[c] * gamma[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let is = cache.inv_std[r];
        for c in 0..cols {
            dx.data[r * cols + c] = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

/// Inverted-dropout mask: entries are 0 or `1/(1-p)`. `None` when dropout is
/// inactive.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: Option<&mut R>) -> Option<Vec<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect(),
    )
}

pub fn apply_mask(x: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in x.data.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log Σ exp` of a slice.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let c = matmul(&a, &b, 2);
        assert_eq!(c.data, vec![4.0, 5.0, 10.0, 11.0]);
        // bᵀ stored row-major as [2 × 3]
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        assert_eq!(matmul_bt(&a, &bt, 2).data, c.data);
        let mut acc = vec![0.0; 9];
        add_matmul_at(&mut acc, &a, &a);
        assert_eq!(acc[0], 17.0);
        assert_eq!(acc[8], 45.0);
    }

    #[test]
    fn layer_norm_moments() {
        let x = Mat::from_vec(1, 4, vec![1.0, 2.0, 3.0, 10.0]);
        let (y, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4]);
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        let var: f64 = y.data.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn softmax_and_lse() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
