//! Elementwise primitives with numpy-style broadcasting.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides_of, Float, Tensor};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// How an operand maps onto the broadcast output.
enum Layout {
    Same,
    Scalar,
    /// Operand equals a trailing block of the output, repeated.
    Suffix(usize),
    /// Arbitrary broadcast: per-output source offsets.
    General(Vec<usize>),
}

fn layout(shape: &[usize], out: &[usize]) -> Layout {
    let n: usize = shape.iter().product();
    let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    if shape == out {
        Layout::Same
    } else if n == 1 {
        Layout::Scalar
    } else if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
        Layout::Suffix(n)
    } else {
        let rank = out.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, rank - shape.len())
            .chain(shape.iter().copied())
            .collect();
        let src_strides = strides_of(&padded);
        let out_strides = strides_of(out);
        let total: usize = out.iter().product();
        let offsets = (0..total)
            .map(|i| {
                (0..rank)
                    .map(|d| {
                        let idx = (i / out_strides[d]) % out[d];
                        if padded[d] == 1 {
                            0
                        } else {
                            idx * src_strides[d]
                        }
                    })
                    .sum()
            })
            .collect();
        Layout::General(offsets)
    }
}

fn expand<T: Float>(data: &[T], layout: &Layout, total: usize) -> Vec<T> {
    match layout {
        Layout::Same => data.to_vec(),
        Layout::Scalar => vec![data[0]; total],
        Layout::Suffix(n) => (0..total).map(|i| data[i % n]).collect(),
        Layout::General(off) => off.iter().map(|&o| data[o]).collect(),
    }
}

/// Sums a full-size gradient back onto the operand layout.
fn reduce_into<T: Float>(grad: &[T], layout: &Layout, dst: &mut [T]) {
    match layout {
        Layout::Same => dst.iter_mut().zip(grad).for_each(|(d, &g)| *d += g),
        Layout::Scalar => dst[0] += grad.iter().copied().sum(),
        Layout::Suffix(n) => {
            for chunk in grad.chunks(*n) {
                dst.iter_mut().zip(chunk).for_each(|(d, &g)| *d += g);
            }
        }
        Layout::General(off) => {
            for (&o, &g) in off.iter().zip(grad) {
                dst[o] += g;
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Float> Graph<'_, T> {
    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let total: usize = out_shape.iter().product();
        let la = layout(&sa, &out_shape);
        let lb = layout(&sb, &out_shape);
        let xa = expand(self.value(a).data(), &la, total);
        let xb = expand(self.value(b).data(), &lb, total);
        let data: Vec<T> = match op {
            BinOp::Add => xa.iter().zip(&xb).map(|(&p, &q)| p + q).collect(),
            BinOp::Sub => xa.iter().zip(&xb).map(|(&p, &q)| p - q).collect(),
            BinOp::Mul => xa.iter().zip(&xb).map(|(&p, &q)| p * q).collect(),
            BinOp::Div => xa.iter().zip(&xb).map(|(&p, &q)| p / q).collect(),
        };
        let value = Tensor::new(out_shape, data)?;
        // Keep the expanded operands only when the partials need them.
        let (keep_a, keep_b) = match op {
            BinOp::Add | BinOp::Sub => (Vec::new(), Vec::new()),
            BinOp::Mul => (xa, xb),
            BinOp::Div => (Vec::new(), xb),
        };
        let quotient = match op {
            BinOp::Div => value.data().to_vec(),
            _ => Vec::new(),
        };
        self.push(name, value, &[a, b], move |ctx| {
            let g = ctx.grad_out();
            if ctx.wants(a) {
                let ga: Vec<T> = match op {
                    BinOp::Add | BinOp::Sub => g.to_vec(),
                    BinOp::Mul => g.iter().zip(&keep_b).map(|(&g, &q)| g * q).collect(),
                    BinOp::Div => g.iter().zip(&keep_b).map(|(&g, &q)| g / q).collect(),
                };
                reduce_into(&ga, &la, ctx.grad_mut(a));
            }
            if ctx.wants(b) {
                let gb: Vec<T> = match op {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|&g| -g).collect(),
                    BinOp::Mul => g.iter().zip(&keep_a).map(|(&g, &p)| g * p).collect(),
                    BinOp::Div => g
                        .iter()
                        .zip(&quotient)
                        .zip(&keep_b)
                        .map(|((&g, &y), &q)| -g * y / q)
                        .collect(),
                };
                reduce_into(&gb, &lb, ctx.grad_mut(b));
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    /// Applies `f` elementwise; `df(x, y)` is the local derivative.
    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        df: fn(T, T) -> T,
    ) -> Result<Var> {
        let input = self.value(x);
        let data: Vec<T> = input.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(input.shape().to_vec(), data)?;
        let out = value.data().to_vec();
        self.push(op, value, &[x], move |ctx| {
            let xs = ctx.value(x).data();
            let g = ctx.grad_out();
            let dst = ctx.grad_mut(x);
            for i in 0..dst.len() {
                dst[i] += g[i] * df(xs[i], out[i]);
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), |x, _| {
            let s = sigmoid(x);
            s + x * s * (T::one() - s)
        })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, |v| -v, |_, _| -T::one())
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let input = self.value(x);
        let value = Tensor::new(
            input.shape().to_vec(),
            input.data().iter().map(|&v| v * s).collect(),
        )?;
        self.push("scale", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            let dst = ctx.grad_mut(x);
            dst.iter_mut().zip(g).for_each(|(d, &g)| *d += g * s);
        })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let input = self.value(x);
        let value = Tensor::new(
            input.shape().to_vec(),
            input.data().iter().map(|&v| v + c).collect(),
        )?;
        self.push("add_scalar", value, &[x], move |ctx| {
            let g = ctx.grad_out();
            ctx.add_grad(x, g);
        })
    }
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(-40.0f64) - (-40.0f64).exp()).abs() < 1e-25);
        assert!((softplus(40.0f64) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape("t", &[4, 1], &[1, 3]).unwrap(), vec![4, 3]);
        let err = broadcast_shape("mul", &[4, 3], &[2]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mul") && msg.contains("[4, 3]") && msg.contains("[2]"));
    }

    #[test]
    fn general_broadcast_gradient_reduces() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_f64(vec![2, 1], &[1.0, 2.0]).unwrap().with_grad());
        let b = g.input(Tensor::from_f64(vec![1, 3], &[1.0, 2.0, 3.0]).unwrap().with_grad());
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[6.0, 6.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0, 3.0]);
    }
}
