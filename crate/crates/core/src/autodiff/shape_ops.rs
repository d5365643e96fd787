//! Matmul, reductions and data-movement primitives.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Graph<'_, T> {
    /// `[.., K] × [K, N] -> [.., N]`; leading axes of the left operand are
    /// flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            T::zero(),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, &[a, b], move |ctx| {
            let g = ctx.grad_out();
            if ctx.wants(a) {
                let bv = ctx.value(b).data();
                let dst = ctx.grad_mut(a);
                // dA = dY · Bᵀ
                T::gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), dst, T::one());
            }
            if ctx.wants(b) {
                let av = ctx.value(a).data();
                let dst = ctx.grad_mut(b);
                // dB = Aᵀ · dY
                T::gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), dst, T::one());
            }
        })
    }

    /// `x·w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", src.shape()),
            ));
        }
        if src.shape() == shape {
            return Ok(x);
        }
        let value = Tensor::new(shape.to_vec(), src.data().to_vec())?;
        self.push("reshape", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            ctx.add_grad(x, g);
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", format!("rank < 2: {shape:?}")));
        }
        let r = shape[shape.len() - 2];
        let c = shape[shape.len() - 1];
        let batch = self.value(x).numel() / (r * c).max(1);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..batch {
            let o = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = src[o + i * c + j];
                }
            }
        }
        let mut oshape = shape;
        let len = oshape.len();
        oshape.swap(len - 2, len - 1);
        let value = Tensor::new(oshape, out)?;
        self.push("transpose", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            let dst = ctx.grad_mut(x);
            for bi in 0..batch {
                let o = bi * r * c;
                for i in 0..r {
                    for j in 0..c {
                        dst[o + i * c + j] += g[o + j * r + i];
                    }
                }
            }
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            widths.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let parts_owned = parts.to_vec();
        self.push("concat", value, parts, move |ctx| {
            let g = ctx.grad_out();
            let mut start = 0;
            for (&p, &w) in parts_owned.iter().zip(&widths) {
                if ctx.wants(p) {
                    let dst = ctx.grad_mut(p);
                    for o in 0..outer {
                        let src = &g[(o * total + start) * inner..(o * total + start + w) * inner];
                        dst[o * w * inner..(o + 1) * w * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
                start += w;
            }
        })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = Tensor::new(oshape, out)?;
        self.push("narrow", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            let dst = ctx.grad_mut(x);
            for o in 0..outer {
                dst[(o * full + start) * inner..(o * full + start + len) * inner]
                    .iter_mut()
                    .zip(&g[o * len * inner..(o + 1) * len * inner])
                    .for_each(|(d, &s)| *d += s);
            }
        })
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        if self.shape(x).get(axis) != Some(&start) {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not cover axis {axis} of {:?}", self.shape(x)),
            ));
        }
        Ok(out)
    }

    /// Reverses the order of entries along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("flip", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let flip = move |src: &[T], dst: &mut [T], accumulate: bool| {
            for o in 0..outer {
                for i in 0..n {
                    let s = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                    let d = &mut dst[(o * n + n - 1 - i) * inner..(o * n + n - i) * inner];
                    if accumulate {
                        d.iter_mut().zip(s).for_each(|(d, &s)| *d += s);
                    } else {
                        d.copy_from_slice(s);
                    }
                }
            }
        };
        let mut out = vec![T::zero(); self.value(x).numel()];
        flip(self.value(x).data(), &mut out, false);
        let value = Tensor::new(shape, out)?;
        self.push("flip", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            flip(g, ctx.grad_mut(x), true);
        })
    }

    /// Selects rows (first-axis entries) by index; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::shape("gather_rows", "scalar input"))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} >= {rows} rows")));
        }
        let width: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut oshape = shape;
        oshape[0] = index.len();
        let value = Tensor::new(oshape, out)?;
        let index = index.to_vec();
        self.push("gather_rows", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            let dst = ctx.grad_mut(x);
            for (r, &i) in index.iter().enumerate() {
                dst[i * width..(i + 1) * width]
                    .iter_mut()
                    .zip(&g[r * width..(r + 1) * width])
                    .for_each(|(d, &s)| *d += s);
            }
        })
    }

    /// Adjoint of [`Graph::gather_rows`]: row `r` of `x` is added into row
    /// `index[r]` of a zero tensor with `rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&index.len()) {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices for {shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("scatter_add_rows", format!("index {bad} >= {rows} rows")));
        }
        let width: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * width];
        for (r, &i) in index.iter().enumerate() {
            out[i * width..(i + 1) * width]
                .iter_mut()
                .zip(&src[r * width..(r + 1) * width])
                .for_each(|(d, &s)| *d += s);
        }
        let mut oshape = shape;
        oshape[0] = rows;
        let value = Tensor::new(oshape, out)?;
        let index = index.to_vec();
        self.push("scatter_add_rows", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            let dst = ctx.grad_mut(x);
            for (r, &i) in index.iter().enumerate() {
                dst[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(&g[i * width..(i + 1) * width])
                    .for_each(|(d, &s)| *d += s);
            }
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), &[x], move |ctx| {
            let g = ctx.grad_out()[0];
            ctx.grad_mut(x).iter_mut().for_each(|d| *d += g);
        })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over the first `axes` axes: `[a, b, .., rest] -> [rest]`.
    pub fn mean_leading(&mut self, x: Var, axes: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes == 0 || axes > shape.len() {
            return Err(Error::shape("mean_leading", format!("{axes} axes of {shape:?}")));
        }
        let rows: usize = shape[..axes].iter().product();
        let width: usize = shape[axes..].iter().product();
        let inv = T::one() / T::of(rows as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); width];
        for r in 0..rows {
            out.iter_mut()
                .zip(&src[r * width..(r + 1) * width])
                .for_each(|(d, &s)| *d += s);
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(shape[axes..].to_vec(), out)?;
        self.push("mean_leading", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            let dst = ctx.grad_mut(x);
            for r in 0..rows {
                dst[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &s)| *d += s * inv);
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2, 1], &[1.0, -1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[-1.0, -1.0]);
        assert!(g.matmul(b, b).is_err());
    }

    #[test]
    fn flip_twice_is_identity_and_concat_split_round_trips() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = g.input(t(&[2, 3, 4], &data).cast());
        for axis in 0..3 {
            let f = g.flip(x, axis).unwrap();
            let ff = g.flip(f, axis).unwrap();
            assert_eq!(g.value(ff), g.value(x));
        }
        let tr = g.transpose(x).unwrap();
        let trtr = g.transpose(tr).unwrap();
        assert_eq!(g.value(trtr).data(), g.value(x).data());
        let parts = g.split(x, 1, &[1, 2]).unwrap();
        let back = g.concat(&parts, 1).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        assert!(g.split(x, 1, &[1, 1]).is_err());
    }

    #[test]
    fn scatter_is_adjoint_of_gather() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let idx = [2, 0, 2];
        let gx = g.gather_rows(x, &idx).unwrap();
        assert_eq!(g.value(gx).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let y = g.input(t(&[3, 2], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]));
        let sy = g.scatter_add_rows(y, &idx, 3).unwrap();
        assert_eq!(g.value(sy).data(), &[2.0, 2.0, 0.0, 0.0, 4.0, 4.0]);
        // <gather(x), y> == <x, scatter(y)>
        let lhs: f64 = g.value(gx).data().iter().zip(g.value(y).data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(x).data().iter().zip(g.value(sy).data()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
