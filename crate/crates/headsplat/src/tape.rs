//! Minimal reverse-mode autodiff over `ndarray` values.
//!
//! A [`Tape`] is an append-only arena of nodes; every op pushes its result and
//! (when gradients are enabled) a one-shot backward closure. `backward` walks
//! the arena in reverse, so construction order is the topological order and
//! gradient accumulation is deterministic. Inference paths build the same
//! graphs with gradients disabled and pay only the value storage.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn, Slice};

use crate::kernels;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn =
    Box<dyn FnOnce(ArrayD<f64>, &[ArrayD<f64>], &mut [Option<ArrayD<f64>>])>;

pub struct Tape {
    values: Vec<ArrayD<f64>>,
    backs: Vec<Option<BackFn>>,
    params: Vec<(String, Var)>,
    grad_enabled: bool,
}

pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.slots[v.0].as_ref()
    }
}

fn acc(slots: &mut [Option<ArrayD<f64>>], idx: usize, delta: ArrayD<f64>) {
    match &mut slots[idx] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Gradient accumulation hook for custom ops defined outside this module.
pub(crate) fn acc_external(slots: &mut [Option<ArrayD<f64>>], var: Var, delta: ArrayD<f64>) {
    acc(slots, var.0, delta)
}

/// Copies into standard (row-major contiguous) layout when needed; e.g.
/// transposed views come back F-contiguous and would break reshapes and
/// serialization downstream.
fn to_standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let shape = a.raw_dim();
        ArrayD::from_shape_vec(shape, a.iter().cloned().collect()).unwrap()
    }
}

impl Tape {
    pub fn training() -> Self {
        Self { values: Vec::new(), backs: Vec::new(), params: Vec::new(), grad_enabled: true }
    }

    pub fn inference() -> Self {
        Self { values: Vec::new(), backs: Vec::new(), params: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn val(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    pub fn val2(&self, v: Var) -> Array2<f64> {
        self.val(v).clone().into_dimensionality().expect("expected 2-d value")
    }

    pub fn val3(&self, v: Var) -> Array3<f64> {
        self.val(v).clone().into_dimensionality().expect("expected 3-d value")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.val(v);
        assert_eq!(a.len(), 1, "expected scalar");
        *a.iter().next().unwrap()
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.values.push(to_standard(value));
        self.backs.push(if self.grad_enabled { back } else { None });
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    pub fn constant1(&mut self, v: Array1<f64>) -> Var {
        self.constant(v.into_dyn())
    }

    pub fn constant2(&mut self, v: Array2<f64>) -> Var {
        self.constant(v.into_dyn())
    }

    pub fn constant3(&mut self, v: Array3<f64>) -> Var {
        self.constant(v.into_dyn())
    }

    /// A named leaf whose gradient is collected by [`Tape::param_grads`].
    pub fn param(&mut self, name: &str, value: ArrayD<f64>) -> Var {
        let v = self.push(value, None);
        self.params.push((name.to_string(), v));
        v
    }

    /// Runs the reverse sweep from a scalar loss. Backward closures are
    /// consumed; values remain readable.
    pub fn backward(&mut self, loss: Var) -> Grads {
        assert_eq!(self.val(loss).len(), 1, "backward needs a scalar loss");
        let mut slots: Vec<Option<ArrayD<f64>>> = (0..self.values.len()).map(|_| None).collect();
        slots[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0).into_shape_with_order(self.val(loss).raw_dim()).unwrap());
        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            match self.backs[i].take() {
                Some(back) => back(g, &self.values, &mut slots),
                None => slots[i] = Some(g), // leaf: keep for collection
            }
        }
        Grads { slots }
    }

    /// Named parameter gradients in registration order. Parameters that did
    /// not influence the loss get zero gradients.
    pub fn param_grads(&self, grads: &Grads) -> indexmap::IndexMap<String, ArrayD<f64>> {
        let mut out = indexmap::IndexMap::new();
        for (name, var) in &self.params {
            let g = grads
                .of(*var)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(self.val(*var).raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape());
        let v = self.val(a) + self.val(b);
        self.push(
            v,
            Some(Box::new(move |g, _vals, slots| {
                acc(slots, b.0, g.clone());
                acc(slots, a.0, g);
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape());
        let v = self.val(a) - self.val(b);
        self.push(
            v,
            Some(Box::new(move |g, _vals, slots| {
                acc(slots, b.0, g.mapv(|x| -x));
                acc(slots, a.0, g);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape());
        let v = self.val(a) * self.val(b);
        self.push(
            v,
            Some(Box::new(move |g, vals, slots| {
                acc(slots, a.0, &g * &vals[b.0]);
                acc(slots, b.0, &g * &vals[a.0]);
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).mapv(|x| x + c);
        self.push(v, Some(Box::new(move |g, _vals, slots| acc(slots, a.0, g))))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).mapv(|x| x * c);
        self.push(v, Some(Box::new(move |g, _vals, slots| acc(slots, a.0, g.mapv(|x| x * c)))))
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let v = self.val(a).mapv(f);
        self.push(
            v,
            Some(Box::new(move |g, vals, slots| {
                acc(slots, a.0, &g * &vals[a.0].mapv(df));
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, crate::gauss::sigmoid, |x| {
            let s = crate::gauss::sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |x| 1.0 - x.tanh() * x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, f64::exp)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, kernels::gelu_grad)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, f64::signum)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x| 2.0 * x)
    }

    /// Clamp to [0,1] with gradient passing on the closed interval, so an
    /// exactly-saturated value at an endpoint still receives gradient.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| x.clamp(0.0, 1.0));
        self.push(
            v,
            Some(Box::new(move |g, vals, slots| {
                let mask = vals[a.0].mapv(|x| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 });
                acc(slots, a.0, &g * &mask);
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.val(a).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Some(Box::new(move |g, vals, slots| {
                let gv = *g.iter().next().unwrap();
                acc(slots, a.0, ArrayD::from_elem(vals[a.0].raw_dim(), gv));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// TxD -> D column means.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.val2(a);
        let (t, _d) = m.dim();
        let v = m.mean_axis(Axis(0)).unwrap();
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, vals, slots| {
                let shape = vals[a.0].raw_dim();
                let d = shape[1];
                let gv = g.into_shape_with_order(IxDyn(&[d])).unwrap();
                let mut out = ArrayD::zeros(shape);
                for mut row in out.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap().rows_mut() {
                    for (x, gj) in row.iter_mut().zip(gv.iter()) {
                        *x = gj / t as f64;
                    }
                }
                acc(slots, a.0, out);
            })),
        )
    }

    /// CxHxW -> C spatial means.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let m = self.val3(a);
        let (c, h, w) = m.dim();
        let v = Array1::from_shape_fn(c, |ci| m.index_axis(Axis(0), ci).mean().unwrap());
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, _vals, slots| {
                let scale = 1.0 / (h * w) as f64;
                let out = Array3::from_shape_fn((c, h, w), |(ci, _, _)| g[[ci]] * scale);
                acc(slots, a.0, out.into_dyn());
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.val(a).clone().into_shape_with_order(IxDyn(shape)).expect("reshape size mismatch");
        self.push(
            v,
            Some(Box::new(move |g, vals, slots| {
                let back = to_standard(g).into_shape_with_order(vals[a.0].raw_dim()).unwrap();
                acc(slots, a.0, back);
            })),
        )
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = self.val2(a).t().to_owned();
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, _vals, slots| {
                let g2: Array2<f64> = g.into_dimensionality().unwrap();
                acc(slots, a.0, g2.t().to_owned().into_dyn());
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.val(*p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let lens: Vec<usize> = parts.iter().map(|p| self.val(*p).shape()[axis]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            v,
            Some(Box::new(move |g, _vals, slots| {
                let mut start = 0;
                for (id, len) in ids.iter().zip(lens.iter()) {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(start..start + len))
                        .to_owned();
                    acc(slots, *id, piece);
                    start += len;
                }
            })),
        )
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.val(a).slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        self.push(
            v,
            Some(Box::new(move |g, vals, slots| {
                let mut out = ArrayD::zeros(vals[a.0].raw_dim());
                out.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(&g);
                acc(slots, a.0, out);
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.val2(a);
        let bv = self.val2(b);
        let v = av.dot(&bv);
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, vals, slots| {
                let g2: Array2<f64> = g.into_dimensionality().unwrap();
                let av: ndarray::ArrayView2<f64> = vals[a.0].view().into_dimensionality().unwrap();
                let bv: ndarray::ArrayView2<f64> = vals[b.0].view().into_dimensionality().unwrap();
                acc(slots, a.0, g2.dot(&bv.t()).into_dyn());
                acc(slots, b.0, av.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// TxD + D broadcast add.
    pub fn add_bias_rows(&mut self, x: Var, b: Var) -> Var {
        let xv = self.val2(x);
        let bv: Array1<f64> = self.val(b).clone().into_dimensionality().unwrap();
        assert_eq!(xv.ncols(), bv.len());
        let v = &xv + &bv;
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, _vals, slots| {
                let g2: Array2<f64> = g.clone().into_dimensionality().unwrap();
                acc(slots, b.0, g2.sum_axis(Axis(0)).into_dyn());
                acc(slots, x.0, g);
            })),
        )
    }

    /// CxHxW + C broadcast add.
    pub fn add_bias_channels(&mut self, x: Var, b: Var) -> Var {
        let xv = self.val3(x);
        let bv: Array1<f64> = self.val(b).clone().into_dimensionality().unwrap();
        assert_eq!(xv.shape()[0], bv.len());
        let mut v = xv;
        for (mut plane, &bc) in v.axis_iter_mut(Axis(0)).zip(bv.iter()) {
            plane.mapv_inplace(|t| t + bc);
        }
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, _vals, slots| {
                let g3: Array3<f64> = g.clone().into_dimensionality().unwrap();
                let gb = Array1::from_shape_fn(g3.shape()[0], |c| g3.index_axis(Axis(0), c).sum());
                acc(slots, b.0, gb.into_dyn());
                acc(slots, x.0, g);
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let y = kernels::softmax_rows(&self.val2(a));
        self.push(
            y.into_dyn(),
            Some(Box::new(move |g, vals, slots| {
                // vals[out] is not addressable here; recompute from input.
                let x: Array2<f64> = vals[a.0].clone().into_dimensionality().unwrap();
                let y = kernels::softmax_rows(&x);
                let g2: Array2<f64> = g.into_dimensionality().unwrap();
                acc(slots, a.0, kernels::softmax_rows_backward(&g2, &y).into_dyn());
            })),
        )
    }

    pub fn layernorm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.val2(x);
        let gv: Array1<f64> = self.val(gamma).clone().into_dimensionality().unwrap();
        let bv: Array1<f64> = self.val(beta).clone().into_dimensionality().unwrap();
        let (y, xhat, inv) = kernels::layernorm_rows(&xv, &gv, &bv);
        self.push(
            y.into_dyn(),
            Some(Box::new(move |g, _vals, slots| {
                let g2: Array2<f64> = g.into_dimensionality().unwrap();
                let (gx, gg, gb) = kernels::layernorm_rows_backward(&g2, &xhat, &inv, &gv);
                acc(slots, x.0, gx.into_dyn());
                acc(slots, gamma.0, gg.into_dyn());
                acc(slots, beta.0, gb.into_dyn());
            })),
        )
    }

    /// Unit-normalizes each row of an Nx4 matrix (quaternion activation).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.val2(a);
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            row.mapv_inplace(|v| v / n);
        }
        self.push(
            y.into_dyn(),
            Some(Box::new(move |g, vals, slots| {
                let x: Array2<f64> = vals[a.0].clone().into_dimensionality().unwrap();
                let g2: Array2<f64> = g.into_dimensionality().unwrap();
                let mut gx = Array2::zeros(x.raw_dim());
                for i in 0..x.nrows() {
                    let r = x.row(i);
                    let n2 = r.iter().map(|v| v * v).sum::<f64>();
                    let n = n2.sqrt().max(1e-300);
                    let dot: f64 = r.iter().zip(g2.row(i).iter()).map(|(a, b)| a * b).sum();
                    for j in 0..x.ncols() {
                        gx[[i, j]] = g2[[i, j]] / n - r[j] * dot / (n2 * n);
                    }
                }
                acc(slots, a.0, gx.into_dyn());
            })),
        )
    }

    /// Per-pixel channel L2 normalization of a CxHxW map: x / sqrt(sum_c x^2 + eps).
    pub fn channel_l2norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.val3(a);
        let (c, h, w) = x.dim();
        let mut norms = Array2::<f64>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let s: f64 = (0..c).map(|ci| x[[ci, i, j]] * x[[ci, i, j]]).sum();
                norms[[i, j]] = (s + eps).sqrt();
            }
        }
        let y = Array3::from_shape_fn((c, h, w), |(ci, i, j)| x[[ci, i, j]] / norms[[i, j]]);
        self.push(
            y.into_dyn(),
            Some(Box::new(move |g, vals, slots| {
                let x: Array3<f64> = vals[a.0].clone().into_dimensionality().unwrap();
                let g3: Array3<f64> = g.into_dimensionality().unwrap();
                let mut gx = Array3::zeros((c, h, w));
                for i in 0..h {
                    for j in 0..w {
                        let n = norms[[i, j]];
                        let dot: f64 = (0..c).map(|ci| g3[[ci, i, j]] * x[[ci, i, j]]).sum();
                        for ci in 0..c {
                            gx[[ci, i, j]] = g3[[ci, i, j]] / n - x[[ci, i, j]] * dot / (n * n * n);
                        }
                    }
                }
                acc(slots, a.0, gx.into_dyn());
            })),
        )
    }

    // ---- conv ----

    /// 2D convolution: x CxHxW, weight Ox(C*k*k), bias O.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.val3(x);
        let wv = self.val2(weight);
        let bv: Array1<f64> = self.val(bias).clone().into_dimensionality().unwrap();
        let in_shape = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (out, col) = kernels::conv2d_forward(&xv.view(), &wv, &bv, k, stride, pad);
        let save_col = self.grad_enabled.then_some(col);
        self.push(
            out.into_dyn(),
            save_col.map(|col| -> BackFn {
                Box::new(move |g, vals, slots| {
                    let g3: Array3<f64> = g.into_dimensionality().unwrap();
                    let wv: Array2<f64> = vals[weight.0].clone().into_dimensionality().unwrap();
                    let (gx, gw, gb) =
                        kernels::conv2d_backward(&g3.view(), &col, &wv, in_shape, k, stride, pad);
                    acc(slots, x.0, gx.into_dyn());
                    acc(slots, weight.0, gw.into_dyn());
                    acc(slots, bias.0, gb.into_dyn());
                })
            }),
        )
    }

    /// HxWx3 image layout to CxHxW conv layout.
    pub fn hwc_to_chw(&mut self, x: Var) -> Var {
        let v = self.val3(x);
        let (h, w, c) = v.dim();
        let out = Array3::from_shape_fn((c, h, w), |(ci, i, j)| v[[i, j, ci]]);
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, _vals, slots| {
                let g3: Array3<f64> = g.into_dimensionality().unwrap();
                let back = Array3::from_shape_fn((h, w, c), |(i, j, ci)| g3[[ci, i, j]]);
                acc(slots, x.0, back.into_dyn());
            })),
        )
    }

    /// CxHxW conv layout back to HxWxC image layout.
    pub fn chw_to_hwc(&mut self, x: Var) -> Var {
        let v = self.val3(x);
        let (c, h, w) = v.dim();
        let out = Array3::from_shape_fn((h, w, c), |(i, j, ci)| v[[ci, i, j]]);
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, _vals, slots| {
                let g3: Array3<f64> = g.into_dimensionality().unwrap();
                let back = Array3::from_shape_fn((c, h, w), |(ci, i, j)| g3[[i, j, ci]]);
                acc(slots, x.0, back.into_dyn());
            })),
        )
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = kernels::upsample2(&self.val3(x).view());
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, _vals, slots| {
                let g3: Array3<f64> = g.into_dimensionality().unwrap();
                acc(slots, x.0, kernels::upsample2_backward(&g3.view()).into_dyn());
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};

    /// Central-difference check of `build`'s scalar output against tape
    /// gradients for one named parameter.
    fn check_param_grad(
        build: &dyn Fn(&mut Tape, &ArrayD<f64>) -> Var,
        init: &ArrayD<f64>,
        tol: f64,
    ) {
        let mut tape = Tape::training();
        let loss = build(&mut tape, init);
        let grads = tape.backward(loss);
        let named = tape.param_grads(&grads);
        let analytic = named.get("p").unwrap().clone();

        let h = 1e-6;
        let flat: Vec<f64> = init.iter().cloned().collect();
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let vp = {
                let arr = Array::from_shape_vec(init.raw_dim(), plus).unwrap();
                let mut t = Tape::training();
                let l = build(&mut t, &arr);
                t.scalar(l)
            };
            let vm = {
                let arr = Array::from_shape_vec(init.raw_dim(), minus).unwrap();
                let mut t = Tape::training();
                let l = build(&mut t, &arr);
                t.scalar(l)
            };
            let fd = (vp - vm) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[i];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                "param[{i}]: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn composite_mlp_gradients() {
        let init = arr2(&[[0.3, -0.7], [1.1, 0.4], [-0.2, 0.9]]).into_dyn();
        check_param_grad(
            &|t, p| {
                let w = t.param("p", p.clone());
                let x = t.constant2(arr2(&[[0.5, -1.0, 0.25], [0.1, 0.2, 0.3]]));
                let h = t.matmul(x, w); // 2x2
                let h = t.gelu(h);
                let h = t.tanh(h);
                let s = t.square(h);
                t.mean_all(s)
            },
            &init,
            1e-5,
        );
    }

    #[test]
    fn attention_style_chain_gradients() {
        let init = arr2(&[[0.2, -0.4, 0.6], [0.9, 0.1, -0.3], [0.5, 0.5, 0.5]]).into_dyn();
        check_param_grad(
            &|t, p| {
                let wq = t.param("p", p.clone());
                let x = t.constant2(arr2(&[[0.3, 0.6, -0.1], [1.0, -0.5, 0.2]]));
                let q = t.matmul(x, wq);
                let k = t.constant2(arr2(&[[0.1, 0.8, 0.3], [-0.4, 0.2, 0.7]]));
                let kt = t.transpose2(k);
                let scores = t.matmul(q, kt);
                let scores = t.mul_scalar(scores, 1.0 / 3.0f64.sqrt());
                let attn = t.softmax_rows(scores);
                let out = t.matmul(attn, k);
                t.mean_all(out)
            },
            &init,
            1e-5,
        );
    }

    #[test]
    fn conv_upsample_chain_gradients() {
        let init = Array::from_shape_vec(IxDyn(&[2, 1 * 3 * 3]), (0..18).map(|i| (i as f64 - 9.0) * 0.1).collect()).unwrap();
        check_param_grad(
            &|t, p| {
                let w = t.param("p", p.clone());
                let x = t.constant3(Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f64 * 0.1 - 0.8));
                let b = t.constant1(arr1(&[0.05, -0.05]));
                let y = t.conv2d(x, w, b, 3, 1, 1);
                let y = t.upsample2(y);
                let y = t.sigmoid(y);
                t.mean_all(y)
            },
            &init,
            1e-5,
        );
    }

    #[test]
    fn normalization_op_gradients() {
        let init = arr2(&[[1.0, 2.0, -0.5, 0.3], [0.2, -0.8, 0.9, 1.5]]).into_dyn();
        check_param_grad(
            &|t, p| {
                let q = t.param("p", p.clone());
                let n = t.normalize_rows(q);
                let s = t.abs(n);
                t.sum_all(s)
            },
            &init,
            1e-5,
        );

        let init3 = Array::from_shape_vec(IxDyn(&[3, 2, 2]), (0..12).map(|i| (i as f64 - 6.0) * 0.3).collect()).unwrap();
        check_param_grad(
            &|t, p| {
                let x = t.param("p", p.clone());
                let n = t.channel_l2norm(x, 1e-6);
                let sq = t.square(n);
                t.mean_all(sq)
            },
            &init3,
            1e-5,
        );
    }

    #[test]
    fn layernorm_bias_and_pool_gradients() {
        let init = arr2(&[[0.3, -0.2, 0.8, 0.1], [0.6, 0.9, -0.4, 0.2]]).into_dyn();
        check_param_grad(
            &|t, p| {
                let x = t.param("p", p.clone());
                let gamma = t.constant1(arr1(&[1.0, 0.9, 1.1, 1.2]));
                let beta = t.constant1(arr1(&[0.0, 0.1, -0.1, 0.05]));
                let y = t.layernorm_rows(x, gamma, beta);
                let b = t.constant1(arr1(&[0.2, -0.3, 0.4, 0.0]));
                let y = t.add_bias_rows(y, b);
                let pooled = t.mean_rows(y);
                let s = t.square(pooled);
                t.sum_all(s)
            },
            &init,
            1e-5,
        );
    }

    #[test]
    fn slice_concat_roundtrip_gradients() {
        let init = arr2(&[[0.5, -0.5, 0.25, 0.75]]).into_dyn();
        check_param_grad(
            &|t, p| {
                let x = t.param("p", p.clone());
                let a = t.slice_axis(x, 1, 0, 2);
                let b = t.slice_axis(x, 1, 2, 2);
                let swapped = t.concat(1, &[b, a]);
                let sq = t.square(swapped);
                let c = t.mul(sq, swapped);
                t.mean_all(c)
            },
            &init,
            1e-5,
        );
    }

    #[test]
    fn inference_tape_records_no_backward() {
        let mut t = Tape::inference();
        let a = t.constant2(arr2(&[[1.0, 2.0]]));
        let b = t.sigmoid(a);
        assert!(t.backs.iter().all(|b| b.is_none()));
        assert_eq!(t.val2(b).ncols(), 2);
    }

    #[test]
    fn grad_accumulates_over_shared_inputs() {
        let mut t = Tape::training();
        let x = t.param("p", arr1(&[2.0]).into_dyn());
        let y = t.mul(x, x); // x^2, dy/dx = 2x = 4
        let grads = t.backward(y);
        let g = t.param_grads(&grads);
        assert!((g["p"].as_slice().unwrap()[0] - 4.0).abs() < 1e-12);
    }
}
