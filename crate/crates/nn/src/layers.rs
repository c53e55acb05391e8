//! Convolution, batch normalization and the composite layer unit.
//!
//! All kernels work per sample in NCHW layout. Reductions over the batch are
//! performed sequentially in sample order so gradients do not depend on the
//! number of worker threads.

use layershift_core::par;

use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Op, Scalar};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Same-padded, stride-1 square convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let s0 = (sy as usize) * w + (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let d0 = (sy as usize) * w + (x0 as isize + dx) as usize;
                    for (d, &s) in dst[d0..d0 + (x1 - x0)].iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
    x
}

pub struct ConvGrads<T> {
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
    pub input: Option<Tensor<T>>,
}

impl Conv2d {
    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.c, self.c_in);
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.c_in * self.k * self.k;
        let weight = &params.get(self.weight).value;
        let bias = self.bias.map(|b| &params.get(b).value);
        let mut out = Tensor::zeros(x.n, self.c_out, h, w);
        par::for_each_chunk_mut(&mut out.data, self.c_out * hw, |i, o| {
            let xs = x.sample(i);
            if self.k == 1 {
                gemm(self.c_out, kk, hw, weight, Op::N, xs, Op::N, T::zero(), o);
            } else {
                let col = im2col(xs, self.c_in, h, w, self.k);
                gemm(self.c_out, kk, hw, weight, Op::N, &col, Op::N, T::zero(), o);
            }
            if let Some(b) = bias {
                for (co, plane) in o.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v = *v + b[co]);
                }
            }
        });
        out
    }

    /// Gradients for the requested outputs given `dy`, the gradient at the
    /// convolution output.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        want_weight: bool,
        want_bias: bool,
        want_input: bool,
    ) -> ConvGrads<T> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.c_in * self.k * self.k;
        let weight = &params.get(self.weight).value;
        let want_bias = want_bias && self.bias.is_some();
        let per_sample = par::map_range(x.n, |i| {
            let xs = x.sample(i);
            let dz = dy.sample(i);
            let col_buf;
            let col: &[T] = if self.k == 1 {
                xs
            } else if want_weight {
                col_buf = im2col(xs, self.c_in, h, w, self.k);
                &col_buf
            } else {
                &[]
            };
            let dw = want_weight.then(|| {
                let mut g = vec![T::zero(); self.c_out * kk];
                gemm(self.c_out, hw, kk, dz, Op::N, col, Op::T, T::zero(), &mut g);
                g
            });
            let db = want_bias.then(|| {
                dz.chunks(hw)
                    .map(|plane| plane.iter().copied().sum::<T>())
                    .collect::<Vec<T>>()
            });
            let dx = want_input.then(|| {
                let mut dcol = vec![T::zero(); kk * hw];
                gemm(kk, self.c_out, hw, weight, Op::T, dz, Op::N, T::zero(), &mut dcol);
                if self.k == 1 {
                    dcol
                } else {
                    col2im(&dcol, self.c_in, h, w, self.k)
                }
            });
            (dw, db, dx)
        });
        let mut weight_grad = want_weight.then(|| vec![T::zero(); self.c_out * kk]);
        let mut bias_grad = want_bias.then(|| vec![T::zero(); self.c_out]);
        let mut input_grad = want_input.then(|| Vec::with_capacity(x.data.len()));
        for (dw, db, dx) in per_sample {
            if let (Some(acc), Some(g)) = (weight_grad.as_mut(), dw) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b);
            }
            if let (Some(acc), Some(g)) = (bias_grad.as_mut(), db) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b);
            }
            if let (Some(acc), Some(g)) = (input_grad.as_mut(), dx) {
                acc.extend(g);
            }
        }
        ConvGrads {
            weight: weight_grad,
            bias: bias_grad,
            input: input_grad.map(|d| Tensor {
                n: x.n,
                c: x.c,
                h,
                w,
                data: d,
            }),
        }
    }
}

/// Per-channel batch normalization with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Per-channel sums over all samples and pixels, in a fixed order.
fn channel_sums<T: Scalar>(t: &Tensor<T>, f: impl Fn(usize, usize) -> f64 + Sync + Send) -> Vec<f64> {
    let hw = t.plane();
    par::map_range(t.c, |c| {
        let mut s = 0.0;
        for i in 0..t.n {
            let base = (i * t.c + c) * hw;
            for j in base..base + hw {
                s += f(c, j);
            }
        }
        s
    })
}

impl BatchNorm {
    /// Normalizes with batch statistics when `batch_stats` is set (and then
    /// updates the running statistics), otherwise with the running ones.
    pub fn forward<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        x: &Tensor<T>,
        batch_stats: bool,
    ) -> (Tensor<T>, BnCache<T>) {
        let hw = x.plane();
        let m = (x.n * hw) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = if batch_stats {
            let mean: Vec<f64> = channel_sums(x, |_, j| x.data[j].as_f64())
                .into_iter()
                .map(|s| s / m)
                .collect();
            let var: Vec<f64> = channel_sums(x, |c, j| (x.data[j].as_f64() - mean[c]).powi(2))
                .into_iter()
                .map(|s| s / m)
                .collect();
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for (id, stat, corr) in [(self.running_mean, &mean, 1.0), (self.running_var, &var, unbiased)] {
                let p = params.get_mut(id);
                for (r, &s) in p.value.iter_mut().zip(stat.iter()) {
                    *r = T::from_f64((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * s * corr);
                }
            }
            (mean, var)
        } else {
            let to64 = |id| params.get(id).value.iter().map(|v: &T| v.as_f64()).collect();
            (to64(self.running_mean), to64(self.running_var))
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let scale = &params.get(self.scale).value;
        let shift = &params.get(self.shift).value;
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        for (idx, (xh, yv)) in xhat.chunks_mut(hw).zip(y.data.chunks_mut(hw)).enumerate() {
            let c = idx % x.c;
            let src = &x.data[idx * hw..(idx + 1) * hw];
            let (mu, is) = (T::from_f64(mean[c]), T::from_f64(inv_std[c]));
            for j in 0..hw {
                xh[j] = (src[j] - mu) * is;
                yv[j] = scale[c] * xh[j] + shift[c];
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Returns `(d_scale, d_shift, d_input)`; the input gradient only when asked.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        want_input: bool,
    ) -> (Vec<T>, Vec<T>, Option<Tensor<T>>) {
        let hw = dy.plane();
        let m = (dy.n * hw) as f64;
        let sum_dy = channel_sums(dy, |_, j| dy.data[j].as_f64());
        let sum_dy_xhat = channel_sums(dy, |_, j| dy.data[j].as_f64() * cache.xhat[j].as_f64());
        let d_scale = sum_dy_xhat.iter().map(|&v| T::from_f64(v)).collect();
        let d_shift = sum_dy.iter().map(|&v| T::from_f64(v)).collect();
        let dx = want_input.then(|| {
            let scale = &params.get(self.scale).value;
            let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
            for (idx, out) in dx.data.chunks_mut(hw).enumerate() {
                let c = idx % dy.c;
                let g = dy.data[idx * hw..(idx + 1) * hw].iter();
                let xh = &cache.xhat[idx * hw..(idx + 1) * hw];
                let k = scale[c].as_f64() * cache.inv_std[c];
                if cache.batch_stats {
                    let (a, b) = (sum_dy[c] / m, sum_dy_xhat[c] / m);
                    for ((o, &d), &xv) in out.iter_mut().zip(g).zip(xh) {
                        *o = T::from_f64(k * (d.as_f64() - a - xv.as_f64() * b));
                    }
                } else {
                    let kt = T::from_f64(k);
                    for (o, &d) in out.iter_mut().zip(g) {
                        *o = kt * d;
                    }
                }
            }
            dx
        });
        (d_scale, d_shift, dx)
    }
}

fn relu_in_place<T: Scalar>(t: &mut Tensor<T>) {
    t.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes `grad` wherever the activation is not positive.
fn relu_mask<T: Scalar>(grad: &mut Tensor<T>, activation: &[T]) {
    for (g, &a) in grad.data.iter_mut().zip(activation) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// How a layer combines its convolution with normalization and activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// BN -> ReLU -> conv
    PreAct,
    /// conv -> BN
    ConvBn,
    /// conv -> ReLU
    ConvRelu,
    /// conv
    Conv,
}

/// One convolutional layer together with its normalization, the unit that
/// layer groups count and freeze.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kind: LayerKind,
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    conv_in: Tensor<T>,
    bn: Option<BnCache<T>>,
    /// Output activation, kept only when a ReLU follows the convolution.
    relu_out: Option<Vec<T>>,
}

impl ConvLayer {
    /// Learnable tensors owned by the layer.
    pub fn learnable_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.conv.weight];
        ids.extend(self.conv.bias);
        if let Some(bn) = &self.bn {
            ids.extend([bn.scale, bn.shift]);
        }
        ids
    }

    /// All tensors owned by the layer, buffers included.
    pub fn tensor_ids(&self) -> Vec<ParamId> {
        let mut ids = self.learnable_ids();
        if let Some(bn) = &self.bn {
            ids.extend([bn.running_mean, bn.running_var]);
        }
        ids
    }

    pub fn has_trainable<T: Scalar>(&self, params: &ParamStore<T>) -> bool {
        self.learnable_ids().into_iter().any(|id| params.is_trainable(id))
    }

    fn bn_trains<T: Scalar>(&self, params: &ParamStore<T>, training: bool) -> bool {
        training && self.bn.as_ref().is_some_and(|bn| params.is_trainable(bn.scale))
    }

    /// Inference pass: normalization always uses running statistics.
    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut shim = BorrowShim(params);
        self.forward_impl(&mut shim, x, false).0
    }

    /// Training pass. Batch statistics are used (and running statistics
    /// updated) only for trainable normalization layers.
    pub fn forward_train<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        x: &Tensor<T>,
    ) -> (Tensor<T>, LayerCache<T>) {
        let batch_stats = self.bn_trains(params, true);
        let mut owner = OwnedStore(params);
        let (y, cache) = self.forward_impl(&mut owner, x, batch_stats);
        (y, cache.expect("training pass keeps a cache"))
    }

    fn forward_impl<T: Scalar, S: StoreAccess<T>>(
        &self,
        store: &mut S,
        x: &Tensor<T>,
        batch_stats: bool,
    ) -> (Tensor<T>, Option<LayerCache<T>>) {
        let keep = store.keeps_cache();
        match self.kind {
            LayerKind::PreAct => {
                let bn = self.bn.as_ref().expect("pre-activation layer has BN");
                let (mut a, bn_cache) = store.bn_forward(bn, x, batch_stats);
                relu_in_place(&mut a);
                let y = self.conv.forward(store.params(), &a);
                let cache = keep.then(|| LayerCache {
                    conv_in: a,
                    bn: Some(bn_cache),
                    relu_out: None,
                });
                (y, cache)
            }
            LayerKind::ConvBn => {
                let bn = self.bn.as_ref().expect("conv-bn layer has BN");
                let z = self.conv.forward(store.params(), x);
                let (y, bn_cache) = store.bn_forward(bn, &z, batch_stats);
                let cache = keep.then(|| LayerCache {
                    conv_in: x.clone(),
                    bn: Some(bn_cache),
                    relu_out: None,
                });
                (y, cache)
            }
            LayerKind::ConvRelu => {
                let mut y = self.conv.forward(store.params(), x);
                relu_in_place(&mut y);
                let cache = keep.then(|| LayerCache {
                    conv_in: x.clone(),
                    bn: None,
                    relu_out: Some(y.data.clone()),
                });
                (y, cache)
            }
            LayerKind::Conv => {
                let y = self.conv.forward(store.params(), x);
                let cache = keep.then(|| LayerCache {
                    conv_in: x.clone(),
                    bn: None,
                    relu_out: None,
                });
                (y, cache)
            }
        }
    }

    /// Accumulates parameter gradients for trainable tensors and returns the
    /// input gradient when `want_input` is set.
    pub fn backward<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        cache: &LayerCache<T>,
        mut dy: Tensor<T>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let w_tr = params.is_trainable(self.conv.weight);
        let b_tr = self.conv.bias.is_some_and(|b| params.is_trainable(b));
        let bn_tr = self.bn.as_ref().is_some_and(|bn| params.is_trainable(bn.scale) || params.is_trainable(bn.shift));
        match self.kind {
            LayerKind::PreAct => {
                let bn = self.bn.as_ref().unwrap();
                let need_conv_in = want_input || bn_tr;
                let g = self.conv.backward(params, &cache.conv_in, &dy, w_tr, b_tr, need_conv_in);
                self.store_conv_grads(params, &g);
                let mut da = g.input?;
                relu_mask(&mut da, &cache.conv_in.data);
                let (ds, dsh, dx) = bn.backward(params, cache.bn.as_ref().unwrap(), &da, want_input);
                self.store_bn_grads(params, bn, &ds, &dsh);
                dx
            }
            LayerKind::ConvBn => {
                let bn = self.bn.as_ref().unwrap();
                let need_z = want_input || w_tr || b_tr;
                let (ds, dsh, dz) = bn.backward(params, cache.bn.as_ref().unwrap(), &dy, need_z);
                self.store_bn_grads(params, bn, &ds, &dsh);
                let dz = dz?;
                let g = self.conv.backward(params, &cache.conv_in, &dz, w_tr, b_tr, want_input);
                self.store_conv_grads(params, &g);
                g.input
            }
            LayerKind::ConvRelu | LayerKind::Conv => {
                if let Some(out) = &cache.relu_out {
                    relu_mask(&mut dy, out);
                }
                let g = self.conv.backward(params, &cache.conv_in, &dy, w_tr, b_tr, want_input);
                self.store_conv_grads(params, &g);
                g.input
            }
        }
    }

    fn store_conv_grads<T: Scalar>(&self, params: &mut ParamStore<T>, g: &ConvGrads<T>) {
        if let Some(w) = &g.weight {
            params.accumulate_grad(self.conv.weight, w);
        }
        if let (Some(b), Some(id)) = (&g.bias, self.conv.bias) {
            params.accumulate_grad(id, b);
        }
    }

    fn store_bn_grads<T: Scalar>(&self, params: &mut ParamStore<T>, bn: &BatchNorm, ds: &[T], dsh: &[T]) {
        if params.is_trainable(bn.scale) {
            params.accumulate_grad(bn.scale, ds);
        }
        if params.is_trainable(bn.shift) {
            params.accumulate_grad(bn.shift, dsh);
        }
    }
}

/// Store access for the shared forward path: inference borrows immutably
/// and keeps no caches, training borrows mutably and keeps them.
trait StoreAccess<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn keeps_cache(&self) -> bool;
    fn bn_forward(&mut self, bn: &BatchNorm, x: &Tensor<T>, batch_stats: bool) -> (Tensor<T>, BnCache<T>);
}

struct BorrowShim<'a, T>(&'a ParamStore<T>);
struct OwnedStore<'a, T>(&'a mut ParamStore<T>);

impl<T: Scalar> StoreAccess<T> for BorrowShim<'_, T> {
    fn params(&self) -> &ParamStore<T> {
        self.0
    }
    fn keeps_cache(&self) -> bool {
        false
    }
    fn bn_forward(&mut self, bn: &BatchNorm, x: &Tensor<T>, batch_stats: bool) -> (Tensor<T>, BnCache<T>) {
        debug_assert!(!batch_stats);
        bn_eval(self.0, bn, x)
    }
}

impl<T: Scalar> StoreAccess<T> for OwnedStore<'_, T> {
    fn params(&self) -> &ParamStore<T> {
        self.0
    }
    fn keeps_cache(&self) -> bool {
        true
    }
    fn bn_forward(&mut self, bn: &BatchNorm, x: &Tensor<T>, batch_stats: bool) -> (Tensor<T>, BnCache<T>) {
        if batch_stats {
            bn.forward(self.0, x, true)
        } else {
            bn_eval(self.0, bn, x)
        }
    }
}

/// Running-statistics normalization without touching the store.
fn bn_eval<T: Scalar>(params: &ParamStore<T>, bn: &BatchNorm, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
    let hw = x.plane();
    let mean = &params.get(bn.running_mean).value;
    let var = &params.get(bn.running_var).value;
    let scale = &params.get(bn.scale).value;
    let shift = &params.get(bn.shift).value;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v.as_f64() + BN_EPS).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
    for (idx, (xh, yv)) in xhat.chunks_mut(hw).zip(y.data.chunks_mut(hw)).enumerate() {
        let c = idx % x.c;
        let (mu, is) = (mean[c], T::from_f64(inv_std[c]));
        for ((h, o), &s) in xh.iter_mut().zip(yv.iter_mut()).zip(&x.data[idx * hw..(idx + 1) * hw]) {
            *h = (s - mu) * is;
            *o = scale[c] * *h + shift[c];
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats: false,
        },
    )
}

/// 2x2 max pooling with stride 2; returns the pooled tensor and the argmax
/// position (0..4) of every output.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, ho, wo);
    let mut arg = vec![0u8; y.data.len()];
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        for r in 0..ho {
            for c in 0..wo {
                let o = p * ho * wo + r * wo + c;
                let mut best = src[2 * r * x.w + 2 * c];
                let mut bi = 0u8;
                for (k, (dr, dc)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = src[(2 * r + dr) * x.w + 2 * c + dc];
                    if v > best {
                        best = v;
                        bi = k as u8 + 1;
                    }
                }
                y.data[o] = best;
                arg[o] = bi;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u8], h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let (ho, wo) = (dy.h, dy.w);
    for p in 0..dy.n * dy.c {
        for r in 0..ho {
            for c in 0..wo {
                let o = p * ho * wo + r * wo + c;
                let (dr, dc) = [(0, 0), (0, 1), (1, 0), (1, 1)][arg[o] as usize];
                dx.data[p * h * w + (2 * r + dr) * w + 2 * c + dc] = dy.data[o];
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by 2 in both directions.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, h, w);
    for p in 0..x.n * x.c {
        for r in 0..h {
            for c in 0..w {
                y.data[p * h * w + r * w + c] = x.data[p * x.h * x.w + (r / 2) * x.w + c / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for p in 0..dy.n * dy.c {
        for r in 0..dy.h {
            for c in 0..dy.w {
                let o = p * h * w + (r / 2) * w + c / 2;
                dx.data[o] = dx.data[o] + dy.data[p * dy.h * dy.w + r * dy.w + c];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.sample_len(), b.sample_len());
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(&a.data[i * sa..(i + 1) * sa]);
        data.extend_from_slice(&b.data[i * sb..(i + 1) * sb]);
    }
    Tensor {
        n: a.n,
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn split_channels<T: Scalar>(t: &Tensor<T>, c_first: usize) -> (Tensor<T>, Tensor<T>) {
    let hw = t.plane();
    let c_second = t.c - c_first;
    let mut a = Vec::with_capacity(t.n * c_first * hw);
    let mut b = Vec::with_capacity(t.n * c_second * hw);
    for s in 0..t.n {
        let x = t.sample(s);
        a.extend_from_slice(&x[..c_first * hw]);
        b.extend_from_slice(&x[c_first * hw..]);
    }
    (
        Tensor {
            n: t.n,
            c: c_first,
            h: t.h,
            w: t.w,
            data: a,
        },
        Tensor {
            n: t.n,
            c: c_second,
            h: t.h,
            w: t.w,
            data: b,
        },
    )
}
