//! Network building blocks with explicit forward caches and hand-derived
//! backward passes. Reverse-mode differentiation is implemented within the
//! artifact; the finite-difference oracle in [`super::check`] is the
//! correctness authority for every layer here.

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::{Feat, GradBuffer, ParamId, ParameterStore, Tensor};
use crate::diffusion::sigmoid;

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 2D convolution, stride 1, odd kernel, zero same-padding.
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub struct Conv2dCache {
    input: Feat,
}

impl Conv2d {
    /// He-style init scaled by fan-in; `zero_init` makes the layer emit
    /// exactly zero until trained (used for output projections).
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        zero_init: bool,
        rng: &mut impl Rng,
    ) -> Conv2d {
        assert!(k % 2 == 1, "kernel size must be odd");
        let fan_in = (in_c * k * k) as f64;
        let std = if zero_init { 0.0 } else { (2.0 / fan_in).sqrt() };
        let wdata: Vec<f64> = (0..out_c * in_c * k * k)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let weight = store.register(
            &format!("{name}.weight"),
            Tensor::from_vec(&[out_c, in_c, k, k], wdata).expect("sized"),
        );
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[out_c]));
        Conv2d {
            in_c,
            out_c,
            k,
            weight,
            bias,
        }
    }

    pub fn forward(&self, store: &ParameterStore, input: &Feat) -> (Feat, Conv2dCache) {
        debug_assert_eq!(input.c, self.in_c);
        let (h, w) = (input.h, input.w);
        let pad = self.k / 2;
        let wt = store.value(self.weight).data();
        let bias = store.value(self.bias).data();
        let mut out = Feat::zeros(self.out_c, h, w);
        for o in 0..self.out_c {
            out.plane_mut(o).fill(bias[o]);
        }
        for o in 0..self.out_c {
            for i in 0..self.in_c {
                for ky in 0..self.k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..self.k {
                        let dx = kx as isize - pad as isize;
                        let wgt = wt[((o * self.in_c + i) * self.k + ky) * self.k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (y0, y1) = row_range(h, dy);
                        let (x0, x1) = row_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        let src_plane = input.plane(i);
                        let hw = h * w;
                        let out_plane = &mut out.data[o * hw..(o + 1) * hw];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let src = &src_plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            axpy(&mut out_plane[y * w + x0..y * w + x1], wgt, src);
                        }
                    }
                }
            }
        }
        (
            out,
            Conv2dCache {
                input: input.clone(),
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        gb: &mut GradBuffer,
        cache: &Conv2dCache,
        dout: &Feat,
    ) -> Feat {
        let input = &cache.input;
        let (h, w) = (input.h, input.w);
        let pad = self.k / 2;
        let wt = store.value(self.weight).data().to_vec();
        let mut din = Feat::zeros(self.in_c, h, w);

        // bias grads
        {
            let db = gb.grad_mut(self.bias).data_mut();
            for o in 0..self.out_c {
                db[o] += dout.plane(o).iter().sum::<f64>();
            }
        }

        // weight grads
        {
            let dw = gb.grad_mut(self.weight).data_mut();
            for o in 0..self.out_c {
                let dplane = dout.plane(o);
                for i in 0..self.in_c {
                    let splane = input.plane(i);
                    for ky in 0..self.k {
                        let dy = ky as isize - pad as isize;
                        for kx in 0..self.k {
                            let dx = kx as isize - pad as isize;
                            let (y0, y1) = row_range(h, dy);
                            let (x0, x1) = row_range(w, dx);
                            if x0 >= x1 {
                                continue;
                            }
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let sx0 = (x0 as isize + dx) as usize;
                                acc += dot(
                                    &dplane[y * w + x0..y * w + x1],
                                    &splane[sy * w + sx0..sy * w + sx0 + (x1 - x0)],
                                );
                            }
                            dw[((o * self.in_c + i) * self.k + ky) * self.k + kx] += acc;
                        }
                    }
                }
            }
        }

        // input grads
        let hw = h * w;
        for i in 0..self.in_c {
            let dplane_in = &mut din.data[i * hw..(i + 1) * hw];
            for o in 0..self.out_c {
                let dplane_out = dout.plane(o);
                for ky in 0..self.k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..self.k {
                        let dx = kx as isize - pad as isize;
                        let wgt = wt[((o * self.in_c + i) * self.k + ky) * self.k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (y0, y1) = row_range(h, dy);
                        let (x0, x1) = row_range(w, dx);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            axpy(
                                &mut dplane_in[sy * w + sx0..sy * w + sx0 + (x1 - x0)],
                                wgt,
                                &dplane_out[y * w + x0..y * w + x1],
                            );
                        }
                    }
                }
            }
        }
        din
    }
}

/// Valid output-row interval for a shift of `d`.
#[inline]
fn row_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = ((n as isize - d).min(n as isize)).max(0) as usize;
    (lo, hi)
}

/// Fully connected layer on flat vectors.
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub struct LinearCache {
    input: Vec<f64>,
}

impl Linear {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Linear {
        let std = (2.0 / in_dim as f64).sqrt();
        let wdata: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let weight = store.register(
            &format!("{name}.weight"),
            Tensor::from_vec(&[out_dim, in_dim], wdata).expect("sized"),
        );
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward(&self, store: &ParameterStore, input: &[f64]) -> (Vec<f64>, LinearCache) {
        debug_assert_eq!(input.len(), self.in_dim);
        let wt = store.value(self.weight).data();
        let bias = store.value(self.bias).data();
        let out = (0..self.out_dim)
            .map(|o| bias[o] + dot(&wt[o * self.in_dim..(o + 1) * self.in_dim], input))
            .collect();
        (
            out,
            LinearCache {
                input: input.to_vec(),
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        gb: &mut GradBuffer,
        cache: &LinearCache,
        dout: &[f64],
    ) -> Vec<f64> {
        let wt = store.value(self.weight).data().to_vec();
        {
            let dw = gb.grad_mut(self.weight).data_mut();
            for o in 0..self.out_dim {
                axpy(
                    &mut dw[o * self.in_dim..(o + 1) * self.in_dim],
                    dout[o],
                    &cache.input,
                );
            }
        }
        {
            let db = gb.grad_mut(self.bias).data_mut();
            axpy(db, 1.0, dout);
        }
        let mut din = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            axpy(&mut din, dout[o], &wt[o * self.in_dim..(o + 1) * self.in_dim]);
        }
        din
    }
}

/// SiLU (x * sigmoid(x)) applied elementwise.
pub fn silu_forward(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&x| x * sigmoid(x)).collect()
}

pub fn silu_backward(input: &[f64], dout: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(dout)
        .map(|(&x, &d)| {
            let s = sigmoid(x);
            d * (s + x * s * (1.0 - s))
        })
        .collect()
}

pub fn silu_feat(input: &Feat) -> Feat {
    Feat {
        c: input.c,
        h: input.h,
        w: input.w,
        data: silu_forward(&input.data),
    }
}

pub fn silu_feat_backward(input: &Feat, dout: &Feat) -> Feat {
    Feat {
        c: input.c,
        h: input.h,
        w: input.w,
        data: silu_backward(&input.data, &dout.data),
    }
}

/// 2x average pooling; spatial dims must be even.
pub fn avgpool2(input: &Feat) -> Feat {
    debug_assert!(input.h % 2 == 0 && input.w % 2 == 0);
    let (h2, w2) = (input.h / 2, input.w / 2);
    let mut out = Feat::zeros(input.c, h2, w2);
    for c in 0..input.c {
        let src = input.plane(c);
        let hw2 = h2 * w2;
        let dst = &mut out.data[c * hw2..(c + 1) * hw2];
        for y in 0..h2 {
            for x in 0..w2 {
                let base = 2 * y * input.w + 2 * x;
                dst[y * w2 + x] = 0.25
                    * (src[base] + src[base + 1] + src[base + input.w] + src[base + input.w + 1]);
            }
        }
    }
    out
}

pub fn avgpool2_backward(dout: &Feat, h: usize, w: usize) -> Feat {
    let mut din = Feat::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let dsrc = dout.plane(c);
        let hw = h * w;
        let dst = &mut din.data[c * hw..(c + 1) * hw];
        for y in 0..dout.h {
            for x in 0..dout.w {
                let g = 0.25 * dsrc[y * dout.w + x];
                let base = 2 * y * w + 2 * x;
                dst[base] += g;
                dst[base + 1] += g;
                dst[base + w] += g;
                dst[base + w + 1] += g;
            }
        }
    }
    din
}

/// 2x nearest-neighbor upsampling.
pub fn upsample2(input: &Feat) -> Feat {
    let (h2, w2) = (input.h * 2, input.w * 2);
    let mut out = Feat::zeros(input.c, h2, w2);
    for c in 0..input.c {
        let src = input.plane(c);
        let hw2 = h2 * w2;
        let dst = &mut out.data[c * hw2..(c + 1) * hw2];
        for y in 0..input.h {
            for x in 0..input.w {
                let v = src[y * input.w + x];
                let base = 2 * y * w2 + 2 * x;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + w2] = v;
                dst[base + w2 + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &Feat) -> Feat {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut din = Feat::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let dsrc = dout.plane(c);
        let hw = h * w;
        let dst = &mut din.data[c * hw..(c + 1) * hw];
        for y in 0..h {
            for x in 0..w {
                let base = 2 * y * dout.w + 2 * x;
                dst[y * w + x] =
                    dsrc[base] + dsrc[base + 1] + dsrc[base + dout.w] + dsrc[base + dout.w + 1];
            }
        }
    }
    din
}

/// Scaled dot-product attention over spatial positions, split into heads
/// along the channel axis. `q`, `k`, `v` share shape `[heads*d, H, W]`.
pub struct AttnCache {
    q: Feat,
    k: Feat,
    v: Feat,
    /// Per-head row-softmax weights, each `P x P`.
    weights: Vec<Vec<f64>>,
}

pub fn attention_forward(q: &Feat, k: &Feat, v: &Feat, heads: usize) -> (Feat, AttnCache) {
    let c = q.c;
    debug_assert!(c % heads == 0);
    let d = c / heads;
    let p = q.h * q.w;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Feat::zeros(c, q.h, q.w);
    let mut weights = Vec::with_capacity(heads);

    for head in 0..heads {
        let ch0 = head * d;
        // logits and row softmax
        let mut attn = vec![0.0; p * p];
        for pi in 0..p {
            let row = &mut attn[pi * p..(pi + 1) * p];
            for (pj, r) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for cc in 0..d {
                    acc += q.data[(ch0 + cc) * p + pi] * k.data[(ch0 + cc) * p + pj];
                }
                *r = acc * scale;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            for r in row.iter_mut() {
                *r /= total;
            }
        }
        // out[:, pi] = sum_j attn[pi][pj] * v[:, pj]
        for cc in 0..d {
            let vplane = &v.data[(ch0 + cc) * p..(ch0 + cc + 1) * p];
            let oplane = &mut out.data[(ch0 + cc) * p..(ch0 + cc + 1) * p];
            for pi in 0..p {
                oplane[pi] = dot(&attn[pi * p..(pi + 1) * p], vplane);
            }
        }
        weights.push(attn);
    }

    (
        out,
        AttnCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            weights,
        },
    )
}

pub fn attention_backward(cache: &AttnCache, dout: &Feat, heads: usize) -> (Feat, Feat, Feat) {
    let c = cache.q.c;
    let d = c / heads;
    let p = cache.q.h * cache.q.w;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Feat::zeros(c, cache.q.h, cache.q.w);
    let mut dk = Feat::zeros(c, cache.q.h, cache.q.w);
    let mut dv = Feat::zeros(c, cache.q.h, cache.q.w);

    for head in 0..heads {
        let ch0 = head * d;
        let attn = &cache.weights[head];

        // dV: dv[:, pj] += attn[pi][pj] * dout[:, pi]
        for cc in 0..d {
            let doplane = &dout.data[(ch0 + cc) * p..(ch0 + cc + 1) * p];
            let dvplane = &mut dv.data[(ch0 + cc) * p..(ch0 + cc + 1) * p];
            for pi in 0..p {
                axpy(dvplane, doplane[pi], &attn[pi * p..(pi + 1) * p]);
            }
        }

        // dA[pi][pj] = dout[:, pi] . v[:, pj], then softmax backward per row.
        let mut dlogits = vec![0.0; p * p];
        for pi in 0..p {
            let arow = &attn[pi * p..(pi + 1) * p];
            let drow = &mut dlogits[pi * p..(pi + 1) * p];
            for pj in 0..p {
                let mut acc = 0.0;
                for cc in 0..d {
                    acc += dout.data[(ch0 + cc) * p + pi] * cache.v.data[(ch0 + cc) * p + pj];
                }
                drow[pj] = acc;
            }
            let dotval = dot(drow, arow);
            for pj in 0..p {
                drow[pj] = arow[pj] * (drow[pj] - dotval);
            }
        }

        // dQ[:, pi] += scale * dlogits[pi][pj] * k[:, pj]
        // dK[:, pj] += scale * dlogits[pi][pj] * q[:, pi]
        for cc in 0..d {
            let kplane = &cache.k.data[(ch0 + cc) * p..(ch0 + cc + 1) * p];
            let qplane = &cache.q.data[(ch0 + cc) * p..(ch0 + cc + 1) * p];
            let dqplane = &mut dq.data[(ch0 + cc) * p..(ch0 + cc + 1) * p];
            for pi in 0..p {
                dqplane[pi] = scale * dot(&dlogits[pi * p..(pi + 1) * p], kplane);
            }
            let dkplane = &mut dk.data[(ch0 + cc) * p..(ch0 + cc + 1) * p];
            for pi in 0..p {
                axpy(dkplane, scale * qplane[pi], &dlogits[pi * p..(pi + 1) * p]);
            }
        }
    }
    (dq, dk, dv)
}

/// Sinusoidal timestep features (no parameters).
pub fn time_features(t: usize, dim: usize) -> Vec<f64> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Learned lookup table for discrete style tags.
pub struct Embedding {
    pub vocab: usize,
    pub dim: usize,
    pub table: ParamId,
}

impl Embedding {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Embedding {
        let data: Vec<f64> = (0..vocab * dim)
            .map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let table = store.register(
            &format!("{name}.table"),
            Tensor::from_vec(&[vocab, dim], data).expect("sized"),
        );
        Embedding { vocab, dim, table }
    }

    pub fn forward(&self, store: &ParameterStore, idx: usize) -> Vec<f64> {
        store.value(self.table).data()[idx * self.dim..(idx + 1) * self.dim].to_vec()
    }

    pub fn backward(&self, gb: &mut GradBuffer, idx: usize, dout: &[f64]) {
        let g = gb.grad_mut(self.table).data_mut();
        axpy(&mut g[idx * self.dim..(idx + 1) * self.dim], 1.0, dout);
    }
}

/// Broadcast a per-channel bias over a feature map.
pub fn add_channel_bias(feat: &mut Feat, bias: &[f64]) {
    debug_assert_eq!(feat.c, bias.len());
    for c in 0..feat.c {
        let b = bias[c];
        for v in feat.plane_mut(c) {
            *v += b;
        }
    }
}

/// Gradient of [`add_channel_bias`] with respect to the bias vector.
pub fn channel_bias_grad(dout: &Feat) -> Vec<f64> {
    (0..dout.c).map(|c| dout.plane(c).iter().sum()).collect()
}
