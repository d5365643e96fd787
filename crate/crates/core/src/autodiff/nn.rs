//! Normalisation, convolution and resampling primitives on `[H, W, C]` maps.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::imgops::{bilinear_taps, nearest_index};
use crate::tensor::{Float, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Geometry of a strided 2D convolution over an HWC map.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

fn hwc(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(op, format!("expected [H, W, C], got {shape:?}"))),
    }
}

impl<T: Float> Graph<'_, T> {
    /// Normalises over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {shape:?} with gamma {:?} beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_c = T::one() / T::of(c as f64);
        let src = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = src.len() / c;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("layer_norm", value, &[x, gamma, beta], move |ctx| {
            let g = ctx.grad_out();
            if ctx.wants(gamma) {
                let dst = ctx.grad_mut(gamma);
                for r in 0..rows {
                    for j in 0..c {
                        dst[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if ctx.wants(beta) {
                let dst = ctx.grad_mut(beta);
                for r in 0..rows {
                    for j in 0..c {
                        dst[j] += g[r * c + j];
                    }
                }
            }
            if ctx.wants(x) {
                let gv = ctx.value(gamma).data();
                let dst = ctx.grad_mut(x);
                let mut dxh = vec![T::zero(); c];
                for r in 0..rows {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..c {
                        dxh[j] = g[r * c + j] * gv[j];
                        mean_d += dxh[j];
                        mean_dx += dxh[j] * xhat[r * c + j];
                    }
                    mean_d *= inv_c;
                    mean_dx *= inv_c;
                    for j in 0..c {
                        dst[r * c + j] += rstd[r] * (dxh[j] - mean_d - xhat[r * c + j] * mean_dx);
                    }
                }
            }
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| Error::shape("log_softmax", "scalar input"))?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(k).zip(out.chunks_mut(k)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            dst.iter_mut().zip(row).for_each(|(d, &v)| *d = v - lse);
        }
        let value = Tensor::new(shape, out)?;
        let logp = value.data().to_vec();
        self.push("log_softmax", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            let dst = ctx.grad_mut(x);
            for r in 0..g.len() / k {
                let gs: T = g[r * k..(r + 1) * k].iter().copied().sum();
                for j in 0..k {
                    dst[r * k + j] += g[r * k + j] - logp[r * k + j].exp() * gs;
                }
            }
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let lp = self.log_softmax(x)?;
        self.exp(lp)
    }

    /// Dense 2D convolution. `x: [H, W, Cin]`, `w: [k, k, Cin, Cout]`,
    /// `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (h, wd, cin) = hwc("conv2d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        let k = spec.kernel;
        if ws.len() != 4 || ws[0] != k || ws[1] != k || ws[2] != cin {
            return Err(Error::shape(
                "conv2d",
                format!("weight {ws:?} for input channels {cin}, kernel {k}"),
            ));
        }
        let cout = ws[3];
        let (Some(oh), Some(ow)) = (spec.out_extent(h), spec.out_extent(wd)) else {
            return Err(Error::shape("conv2d", format!("kernel {k} larger than {h}x{wd}")));
        };
        let kk = k * k * cin;
        let p = oh * ow;
        let src = self.value(x).data();
        let mut cols = vec![T::zero(); p * kk];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
                for ky in 0..k {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let s = (iy as usize * wd + ix as usize) * cin;
                        row[(ky * k + kx) * cin..(ky * k + kx + 1) * cin]
                            .copy_from_slice(&src[s..s + cin]);
                    }
                }
            }
        }
        let mut out = vec![T::zero(); p * cout];
        T::gemm(
            p,
            kk,
            cout,
            &cols,
            (kk as isize, 1),
            self.value(w).data(),
            (cout as isize, 1),
            &mut out,
            T::zero(),
        );
        let value = Tensor::new(vec![oh, ow, cout], out)?;
        let y = self.push("conv2d", value, &[x, w], move |ctx| {
            let g = ctx.grad_out();
            if ctx.wants(w) {
                let dst = ctx.grad_mut(w);
                T::gemm(kk, p, cout, &cols, (1, kk as isize), g, (cout as isize, 1), dst, T::one());
            }
            if ctx.wants(x) {
                let wv = ctx.value(w).data();
                let mut dcols = vec![T::zero(); p * kk];
                T::gemm(p, cout, kk, g, (cout as isize, 1), wv, (1, cout as isize), &mut dcols, T::zero());
                let dst = ctx.grad_mut(x);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = &dcols[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
                        for ky in 0..k {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let s = (iy as usize * wd + ix as usize) * cin;
                                dst[s..s + cin]
                                    .iter_mut()
                                    .zip(&row[(ky * k + kx) * cin..(ky * k + kx + 1) * cin])
                                    .for_each(|(d, &v)| *d += v);
                            }
                        }
                    }
                }
            }
        })?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Depthwise `k×k` convolution with same padding. `w: [k, k, C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, c) = hwc("depthwise_conv2d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != ws[1] || ws[0].is_multiple_of(2) || ws[2] != c || self.shape(b) != [c] {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("weight {ws:?}, bias {:?} for {c} channels", self.shape(b)),
            ));
        }
        let k = ws[0];
        let pad = (k / 2) as isize;
        let src = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); h * wd * c];
        for y in 0..h {
            for x0 in 0..wd {
                let o = &mut out[(y * wd + x0) * c..(y * wd + x0 + 1) * c];
                o.copy_from_slice(bv);
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x0 as isize + kx as isize - pad;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let s = &src[(iy as usize * wd + ix as usize) * c..][..c];
                        let kw = &wv[(ky * k + kx) * c..][..c];
                        for j in 0..c {
                            o[j] += s[j] * kw[j];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![h, wd, c], out)?;
        self.push("depthwise_conv2d", value, &[x, w, b], move |ctx| {
            let g = ctx.grad_out();
            if ctx.wants(b) {
                let dst = ctx.grad_mut(b);
                for px in g.chunks(c) {
                    dst.iter_mut().zip(px).for_each(|(d, &v)| *d += v);
                }
            }
            let want_w = ctx.wants(w);
            let want_x = ctx.wants(x);
            let src = ctx.value(x).data();
            let wv = ctx.value(w).data();
            let mut dw = vec![T::zero(); if want_w { wv.len() } else { 0 }];
            let mut dx = vec![T::zero(); if want_x { src.len() } else { 0 }];
            for y in 0..h {
                for x0 in 0..wd {
                    let go = &g[(y * wd + x0) * c..][..c];
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = x0 as isize + kx as isize - pad;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let so = (iy as usize * wd + ix as usize) * c;
                            let ko = (ky * k + kx) * c;
                            for j in 0..c {
                                if want_w {
                                    dw[ko + j] += go[j] * src[so + j];
                                }
                                if want_x {
                                    dx[so + j] += go[j] * wv[ko + j];
                                }
                            }
                        }
                    }
                }
            }
            if want_w {
                ctx.add_grad(w, &dw);
            }
            if want_x {
                ctx.add_grad(x, &dx);
            }
        })
    }

    /// Causal depthwise 1D convolution over `x: [S, L, C]` with
    /// `w: [K, C]`; output `t` sees inputs `t-K+1 ..= t`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [s, l, c] = shape[..] else {
            return Err(Error::shape("causal_conv1d", format!("expected [S, L, C], got {shape:?}")));
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != c || self.shape(b) != [c] {
            return Err(Error::shape(
                "causal_conv1d",
                format!("weight {ws:?}, bias {:?} for {c} channels", self.shape(b)),
            ));
        }
        let k = ws[0];
        let src = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); s * l * c];
        for si in 0..s {
            for t in 0..l {
                let o = &mut out[(si * l + t) * c..][..c];
                o.copy_from_slice(bv);
                for kk in 0..k {
                    let Some(ti) = (t + kk + 1).checked_sub(k) else {
                        continue;
                    };
                    let xs = &src[(si * l + ti) * c..][..c];
                    let kw = &wv[kk * c..][..c];
                    for j in 0..c {
                        o[j] += xs[j] * kw[j];
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("causal_conv1d", value, &[x, w, b], move |ctx| {
            let g = ctx.grad_out();
            if ctx.wants(b) {
                let dst = ctx.grad_mut(b);
                for row in g.chunks(c) {
                    dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            }
            let want_w = ctx.wants(w);
            let want_x = ctx.wants(x);
            let src = ctx.value(x).data();
            let wv = ctx.value(w).data();
            let mut dw = vec![T::zero(); if want_w { wv.len() } else { 0 }];
            let mut dx = vec![T::zero(); if want_x { src.len() } else { 0 }];
            for si in 0..s {
                for t in 0..l {
                    let go = &g[(si * l + t) * c..][..c];
                    for kk in 0..k {
                        let Some(ti) = (t + kk + 1).checked_sub(k) else {
                            continue;
                        };
                        let so = (si * l + ti) * c;
                        for j in 0..c {
                            if want_w {
                                dw[kk * c + j] += go[j] * src[so + j];
                            }
                            if want_x {
                                dx[so + j] += go[j] * wv[kk * c + j];
                            }
                        }
                    }
                }
            }
            if want_w {
                ctx.add_grad(w, &dw);
            }
            if want_x {
                ctx.add_grad(x, &dx);
            }
        })
    }

    /// Bilinear resize (half-pixel centres) of an `[H, W, C]` map.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (h, w, c) = hwc("resize_bilinear", self.shape(x))?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(Error::shape("resize_bilinear", format!("{h}x{w} -> {oh}x{ow}")));
        }
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); oh * ow * c];
        for (oy, ty_) in ty.iter().enumerate() {
            for (ox, tx_) in tx.iter().enumerate() {
                let dst = &mut out[(oy * ow + ox) * c..][..c];
                for (r, wy) in [(ty_.lo, 1.0 - ty_.w), (ty_.hi, ty_.w)] {
                    for (cc, wx) in [(tx_.lo, 1.0 - tx_.w), (tx_.hi, tx_.w)] {
                        let wt = T::of(wy * wx);
                        if wt == T::zero() {
                            continue;
                        }
                        let s = &src[(r * w + cc) * c..][..c];
                        dst.iter_mut().zip(s).for_each(|(d, &v)| *d += wt * v);
                    }
                }
            }
        }
        let value = Tensor::new(vec![oh, ow, c], out)?;
        self.push("resize_bilinear", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            let dst = ctx.grad_mut(x);
            for (oy, ty_) in ty.iter().enumerate() {
                for (ox, tx_) in tx.iter().enumerate() {
                    let go = &g[(oy * ow + ox) * c..][..c];
                    for (r, wy) in [(ty_.lo, 1.0 - ty_.w), (ty_.hi, ty_.w)] {
                        for (cc, wx) in [(tx_.lo, 1.0 - tx_.w), (tx_.hi, tx_.w)] {
                            let wt = T::of(wy * wx);
                            if wt == T::zero() {
                                continue;
                            }
                            let d = &mut dst[(r * w + cc) * c..][..c];
                            d.iter_mut().zip(go).for_each(|(d, &v)| *d += wt * v);
                        }
                    }
                }
            }
        })
    }

    /// Nearest-neighbour resize of an `[H, W, C]` map.
    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (h, w, c) = hwc("resize_nearest", self.shape(x))?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("resize_nearest", format!("{h}x{w} -> {oh}x{ow}")));
        }
        let iy = nearest_index(h, oh);
        let ix = nearest_index(w, ow);
        let index: Vec<usize> = iy
            .iter()
            .flat_map(|&r| ix.iter().map(move |&cc| r * w + cc))
            .collect();
        let flat = self.reshape(x, &[h * w, c])?;
        let g = self.gather_rows(flat, &index)?;
        self.reshape(g, &[oh, ow, c])
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (h, w, c) = hwc("avg_pool2d", self.shape(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("avg_pool2d", format!("window {k} on {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / T::of((k * k) as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); oh * ow * c];
        for y in 0..h {
            for x0 in 0..w {
                let d = &mut out[((y / k) * ow + x0 / k) * c..][..c];
                let s = &src[(y * w + x0) * c..][..c];
                d.iter_mut().zip(s).for_each(|(d, &v)| *d += v * inv);
            }
        }
        let value = Tensor::new(vec![oh, ow, c], out)?;
        self.push("avg_pool2d", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            let dst = ctx.grad_mut(x);
            for y in 0..h {
                for x0 in 0..w {
                    let s = &g[((y / k) * ow + x0 / k) * c..][..c];
                    let d = &mut dst[(y * w + x0) * c..][..c];
                    d.iter_mut().zip(s).for_each(|(d, &v)| *d += v * inv);
                }
            }
        })
    }

    /// Adaptive average pooling of the last axis from `L` to `p` bins
    /// (`bin i` covers `[floor(iL/p), ceil((i+1)L/p))`).
    pub fn adaptive_avg_pool_last(&mut self, x: Var, p: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let l = *shape.last().ok_or_else(|| Error::shape("adaptive_avg_pool", "scalar input"))?;
        if l == 0 || p == 0 {
            return Err(Error::shape("adaptive_avg_pool", format!("{shape:?} -> {p} bins")));
        }
        let bins: Vec<(usize, usize)> = (0..p)
            .map(|i| ((i * l) / p, ((i + 1) * l).div_ceil(p)))
            .collect();
        let src = self.value(x).data();
        let rows = src.len() / l;
        let mut out = vec![T::zero(); rows * p];
        for r in 0..rows {
            let row = &src[r * l..(r + 1) * l];
            for (i, &(s, e)) in bins.iter().enumerate() {
                let sum: T = row[s..e].iter().copied().sum();
                out[r * p + i] = sum / T::of((e - s) as f64);
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = p;
        let value = Tensor::new(oshape, out)?;
        self.push("adaptive_avg_pool", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            let dst = ctx.grad_mut(x);
            for r in 0..rows {
                for (i, &(s, e)) in bins.iter().enumerate() {
                    let share = g[r * p + i] / T::of((e - s) as f64);
                    dst[r * l + s..r * l + e].iter_mut().for_each(|d| *d += share);
                }
            }
        })
    }
}
