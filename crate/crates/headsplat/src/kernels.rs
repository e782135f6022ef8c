//! Shared dense math kernels: GEMM-backed 2D convolution, layer norm, softmax,
//! activations. Both the autodiff tape and the inference paths call these, so
//! training-time and drive-time forwards are bit-identical.

use ndarray::{Array1, Array2, Array3, ArrayView3};

/// im2col for a CxHxW input with square kernel `k`, stride `s`, zero padding `p`.
/// Output is (C*k*k) x (Ho*Wo), column-major over output pixels.
pub fn im2col(x: &ArrayView3<f64>, k: usize, s: usize, p: usize) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    let mut col = Array2::<f64>::zeros((c * k * k, ho * wo));
    {
        let cs = col.as_slice_mut().unwrap();
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let base = row * ho * wo;
                    for oi in 0..ho {
                        let ii = oi * s + ki;
                        if ii < p || ii >= h + p {
                            continue;
                        }
                        let ii = ii - p;
                        for oj in 0..wo {
                            let jj = oj * s + kj;
                            if jj < p || jj >= w + p {
                                continue;
                            }
                            cs[base + oi * wo + oj] = x[[ci, ii, jj - p]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back into input layout.
pub fn col2im(
    gcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
) -> Array3<f64> {
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    let mut gx = Array3::<f64>::zeros((c, h, w));
    let gs = gcol.as_slice().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * ho * wo;
                for oi in 0..ho {
                    let ii = oi * s + ki;
                    if ii < p || ii >= h + p {
                        continue;
                    }
                    let ii = ii - p;
                    for oj in 0..wo {
                        let jj = oj * s + kj;
                        if jj < p || jj >= w + p {
                            continue;
                        }
                        gx[[ci, ii, jj - p]] += gs[base + oi * wo + oj];
                    }
                }
            }
        }
    }
    gx
}

/// Forward convolution. `x`: CxHxW, `weight`: Ox(C*k*k) flattened, `bias`: O.
/// Returns (output OxHoxWo, saved col matrix for the backward pass).
pub fn conv2d_forward(
    x: &ArrayView3<f64>,
    weight: &Array2<f64>,
    bias: &Array1<f64>,
    k: usize,
    s: usize,
    p: usize,
) -> (Array3<f64>, Array2<f64>) {
    let (_, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    let col = im2col(x, k, s, p);
    let mut out = weight.dot(&col); // O x (Ho*Wo)
    for (mut row, &b) in out.rows_mut().into_iter().zip(bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    let o = weight.nrows();
    (out.into_shape_with_order((o, ho, wo)).unwrap(), col)
}

/// Backward convolution given the saved col matrix.
/// Returns (grad_x, grad_weight, grad_bias).
pub fn conv2d_backward(
    gout: &ArrayView3<f64>,
    col: &Array2<f64>,
    weight: &Array2<f64>,
    in_shape: (usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let (o, ho, wo) = (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
    let g2 = gout.to_shape((o, ho * wo)).unwrap();
    let gw = g2.dot(&col.t());
    let gb = g2.sum_axis(ndarray::Axis(1));
    let gcol = weight.t().dot(&g2);
    let gx = col2im(&gcol, in_shape.0, in_shape.1, in_shape.2, k, s, p);
    (gx, gw, gb)
}

/// Nearest-neighbor 2x upsampling of a CxHxW map.
pub fn upsample2(x: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, i, j)| x[[ci, i / 2, j / 2]])
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(g: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                out[[ci, i / 2, j / 2]] += g[[ci, i, j]];
            }
        }
    }
    out
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm of a TxD matrix; returns (y, xhat, inv_sigma).
pub fn layernorm_rows(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (t, d) = x.dim();
    let mut y = Array2::zeros((t, d));
    let mut xhat = Array2::zeros((t, d));
    let mut inv_sigma = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mu = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_sigma[i] = inv;
        for j in 0..d {
            let h = (x[[i, j]] - mu) * inv;
            xhat[[i, j]] = h;
            y[[i, j]] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, inv_sigma)
}

/// Backward of [`layernorm_rows`]. Returns (gx, ggamma, gbeta).
pub fn layernorm_rows_backward(
    g: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_sigma: &Array1<f64>,
    gamma: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (t, d) = g.dim();
    let mut gx = Array2::zeros((t, d));
    let mut ggamma = Array1::zeros(d);
    let mut gbeta = Array1::zeros(d);
    for i in 0..t {
        let mut sum_gh = 0.0;
        let mut sum_gh_xhat = 0.0;
        for j in 0..d {
            let gh = g[[i, j]] * gamma[j];
            sum_gh += gh;
            sum_gh_xhat += gh * xhat[[i, j]];
            ggamma[j] += g[[i, j]] * xhat[[i, j]];
            gbeta[j] += g[[i, j]];
        }
        let mean_gh = sum_gh / d as f64;
        let mean_gh_xhat = sum_gh_xhat / d as f64;
        for j in 0..d {
            let gh = g[[i, j]] * gamma[j];
            gx[[i, j]] = inv_sigma[i] * (gh - mean_gh - xhat[[i, j]] * mean_gh_xhat);
        }
    }
    (gx, ggamma, gbeta)
}

/// Row-wise softmax of a TxS matrix.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.mapv_inplace(|v| v / z);
    }
    y
}

/// Backward of softmax given y = softmax(x): gx = y * (g - sum(g*y)).
pub fn softmax_rows_backward(g: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let (t, s) = g.dim();
    let mut gx = Array2::zeros((t, s));
    for i in 0..t {
        let dot: f64 = (0..s).map(|j| g[[i, j]] * y[[i, j]]).sum();
        for j in 0..s {
            gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
        }
    }
    gx
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
