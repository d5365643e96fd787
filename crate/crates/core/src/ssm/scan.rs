//! Selective-scan kernels.
//!
//! Layout: `S` independent sequences of length `L` over `E` channels with a
//! diagonal state of size `N` per channel.
//!
//! ```text
//! h_t[e, n] = exp(Δ_t[e]·A[e, n]) · h_{t-1}[e, n] + g(Δ_t[e], A[e, n]) · B_t[n] · u_t[e]
//! y_t[e]    = Σ_n C_t[n] · h_t[e, n] + D[e] · u_t[e]
//! ```

use rayon::prelude::*;

use super::zoh::{zoh_gain_da, ZOH_SERIES_THRESHOLD};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// How the time axis is traversed in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanSchedule {
    Sequential,
    /// Blocks of this many steps; state is carried between blocks and the
    /// channel lanes of a block run in parallel.
    Chunked(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub seqs: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Borrowed operands of one scan.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub dims: ScanDims,
    /// `[S, L, E]`
    pub u: &'a [T],
    /// `[S, L, E]`, strictly positive
    pub delta: &'a [T],
    /// `[E, N]`
    pub a: &'a [T],
    /// `[S, L, N]`
    pub b: &'a [T],
    /// `[S, L, N]`
    pub c: &'a [T],
    /// `[E]`
    pub d: &'a [T],
}

impl<T: Float> ScanInputs<'_, T> {
    fn validate(&self) -> Result<()> {
        let ScanDims {
            seqs,
            len,
            channels,
            state,
        } = self.dims;
        if len == 0 {
            return Err(Error::contract("selective scan over an empty sequence"));
        }
        let checks = [
            ("u", self.u.len(), seqs * len * channels),
            ("delta", self.delta.len(), seqs * len * channels),
            ("A", self.a.len(), channels * state),
            ("B", self.b.len(), seqs * len * state),
            ("C", self.c.len(), seqs * len * state),
            ("D", self.d.len(), channels),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::shape(
                    "selective_scan",
                    format!("{name} has {got} elements, expected {want} for {:?}", self.dims),
                ));
            }
        }
        if let Some(bad) = self.delta.iter().find(|&&v| !(v > T::zero())) {
            return Err(Error::contract(format!("step size must be positive, got {bad}")));
        }
        Ok(())
    }

    /// Advances one channel lane over `t0..t1`, updating `h` in place and
    /// writing outputs into `y_out[t - t0]`.
    #[inline]
    fn run_lane(&self, s: usize, e: usize, t0: usize, t1: usize, h: &mut [T], y_out: &mut [T]) {
        let ScanDims {
            len,
            channels,
            state,
            ..
        } = self.dims;
        let a_row = &self.a[e * state..(e + 1) * state];
        let inv: Vec<T> = a_row.iter().map(|&a| a.recip()).collect();
        for t in t0..t1 {
            let row = s * len + t;
            let dt = self.delta[row * channels + e];
            let ut = self.u[row * channels + e];
            let bt = &self.b[row * state..(row + 1) * state];
            let ct = &self.c[row * state..(row + 1) * state];
            let mut y = T::zero();
            for n in 0..state {
                let (abar, gain) = gains_with_recip(a_row[n], inv[n], dt);
                h[n] = abar * h[n] + gain * bt[n] * ut;
                y += ct[n] * h[n];
            }
            y_out[t - t0] = y + self.d[e] * ut;
        }
    }
}

/// Per-step values saved by a forward pass, each `[S, L, E, N]`.
pub struct ScanTape<T> {
    pub states: Vec<T>,
    pub abar: Vec<T>,
    pub gain: Vec<T>,
}

/// [`zoh_gains`] with `1/a` supplied by the caller.
#[inline(always)]
fn gains_with_recip<T: Float>(a: T, inv_a: T, delta: T) -> (T, T) {
    let x = delta * a;
    let em1 = x.exp_m1();
    let gain = if x.abs() < T::of(ZOH_SERIES_THRESHOLD) {
        delta
    } else {
        em1 * inv_a
    };
    (T::one() + em1, gain)
}

/// Forward scan. Returns `y: [S, L, E]` and, when requested, the tape the
/// backward pass needs.
pub fn scan_forward<T: Float>(
    inp: &ScanInputs<'_, T>,
    schedule: ScanSchedule,
    keep_states: bool,
) -> Result<(Vec<T>, Option<ScanTape<T>>)> {
    inp.validate()?;
    let ScanDims {
        seqs,
        len,
        channels,
        state,
    } = inp.dims;
    let mut y = vec![T::zero(); seqs * len * channels];
    match schedule {
        ScanSchedule::Sequential => {
            let inv: Vec<T> = inp.a.iter().map(|&a| a.recip()).collect();
            let size = seqs * len * channels * state;
            let mut tape = keep_states.then(|| ScanTape {
                states: vec![T::zero(); size],
                abar: vec![T::zero(); size],
                gain: vec![T::zero(); size],
            });
            let mut h = vec![T::zero(); channels * state];
            for s in 0..seqs {
                h.iter_mut().for_each(|v| *v = T::zero());
                for t in 0..len {
                    let row = s * len + t;
                    let bt = &inp.b[row * state..(row + 1) * state];
                    let ct = &inp.c[row * state..(row + 1) * state];
                    for e in 0..channels {
                        let idx = row * channels + e;
                        let (dt, ut) = (inp.delta[idx], inp.u[idx]);
                        let base = e * state;
                        let mut acc = T::zero();
                        for n in 0..state {
                            let k = base + n;
                            let (abar, gain) = gains_with_recip(inp.a[k], inv[k], dt);
                            h[k] = abar * h[k] + gain * bt[n] * ut;
                            acc += ct[n] * h[k];
                            if let Some(tp) = tape.as_mut() {
                                let o = idx * state + n;
                                tp.abar[o] = abar;
                                tp.gain[o] = gain;
                            }
                        }
                        y[idx] = acc + inp.d[e] * ut;
                    }
                    if let Some(tp) = tape.as_mut() {
                        let o = row * channels * state;
                        tp.states[o..o + channels * state].copy_from_slice(&h);
                    }
                }
            }
            Ok((y, tape))
        }
        ScanSchedule::Chunked(chunk) => {
            if chunk == 0 {
                return Err(Error::contract("chunk length must be at least 1"));
            }
            if keep_states {
                return Err(Error::contract("chunked schedule is forward-only"));
            }
            let mut h = vec![T::zero(); seqs * channels * state];
            let mut lane_out = vec![T::zero(); seqs * channels * chunk];
            for t0 in (0..len).step_by(chunk) {
                let t1 = (t0 + chunk).min(len);
                h.par_chunks_mut(state)
                    .zip(lane_out.par_chunks_mut(chunk))
                    .enumerate()
                    .for_each(|(lane, (hl, out))| {
                        let (s, e) = (lane / channels, lane % channels);
                        inp.run_lane(s, e, t0, t1, hl, out);
                    });
                for lane in 0..seqs * channels {
                    let (s, e) = (lane / channels, lane % channels);
                    for t in t0..t1 {
                        y[(s * len + t) * channels + e] = lane_out[lane * chunk + t - t0];
                    }
                }
            }
            Ok((y, None))
        }
    }
}

/// Gradients of a scan w.r.t. every operand.
pub struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

/// Reverse-time pass given the forward tape and `dL/dy`.
pub fn scan_backward<T: Float>(inp: &ScanInputs<'_, T>, tape: &ScanTape<T>, dy: &[T]) -> ScanGrads<T> {
    let states = &tape.states[..];
    let inv: Vec<T> = inp.a.iter().map(|&a| a.recip()).collect();
    let ScanDims {
        seqs,
        len,
        channels,
        state,
    } = inp.dims;
    let mut gr = ScanGrads {
        u: vec![T::zero(); inp.u.len()],
        delta: vec![T::zero(); inp.delta.len()],
        a: vec![T::zero(); inp.a.len()],
        b: vec![T::zero(); inp.b.len()],
        c: vec![T::zero(); inp.c.len()],
        d: vec![T::zero(); inp.d.len()],
    };
    let mut dh = vec![T::zero(); channels * state];
    for s in 0..seqs {
        dh.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..len).rev() {
            let row = s * len + t;
            let h_now = &states[row * channels * state..(row + 1) * channels * state];
            let h_prev = (t > 0).then(|| &states[(row - 1) * channels * state..row * channels * state]);
            let bt = &inp.b[row * state..(row + 1) * state];
            let ct = &inp.c[row * state..(row + 1) * state];
            for e in 0..channels {
                let idx = row * channels + e;
                let gy = dy[idx];
                let ut = inp.u[idx];
                let dt = inp.delta[idx];
                gr.d[e] += gy * ut;
                let mut du = gy * inp.d[e];
                let mut ddelta = T::zero();
                for n in 0..state {
                    let k = e * state + n;
                    gr.c[row * state + n] += gy * h_now[k];
                    let dhk = dh[k] + gy * ct[n];
                    let a = inp.a[k];
                    let (abar, gain) = (tape.abar[idx * state + n], tape.gain[idx * state + n]);
                    let hp = h_prev.map_or(T::zero(), |p| p[k]);
                    let d_abar = dhk * hp;
                    let d_gain = dhk * bt[n] * ut;
                    gr.b[row * state + n] += dhk * gain * ut;
                    du += dhk * gain * bt[n];
                    ddelta += d_abar * a * abar + d_gain * abar;
                    gr.a[k] += d_abar * dt * abar + d_gain * zoh_gain_da(a, inv[k], dt, abar, gain);
                    dh[k] = dhk * abar;
                }
                gr.u[idx] += du;
                gr.delta[idx] += ddelta;
            }
        }
    }
    gr
}

fn dims_of(
    u: &[usize],
    a: &[usize],
    b: &[usize],
    c: &[usize],
    d: &[usize],
    delta: &[usize],
) -> Result<ScanDims> {
    let (&[s, l, e], &[ea, n]) = (u, a) else {
        return Err(Error::shape(
            "selective_scan",
            format!("u {u:?} must be [S, L, E] and A {a:?} must be [E, N]"),
        ));
    };
    if ea != e || b != [s, l, n] || c != [s, l, n] || d != [e] || delta != u {
        return Err(Error::shape(
            "selective_scan",
            format!("u {u:?}, delta {delta:?}, A {a:?}, B {b:?}, C {c:?}, D {d:?}"),
        ));
    }
    Ok(ScanDims {
        seqs: s,
        len: l,
        channels: e,
        state: n,
    })
}

impl<T: Float> Graph<'_, T> {
    /// Selective scan as a differentiable primitive. Shapes: `u, delta:
    /// [S, L, E]`, `a: [E, N]`, `b, c: [S, L, N]`, `d: [E]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        schedule: ScanSchedule,
    ) -> Result<Var> {
        let dims = dims_of(
            self.shape(u),
            self.shape(a),
            self.shape(b),
            self.shape(c),
            self.shape(d),
            self.shape(delta),
        )?;
        let parents = [u, delta, a, b, c, d];
        let needs_grad = self.grad_enabled() && parents.iter().any(|&p| self.requires_grad(p));
        let inputs = ScanInputs {
            dims,
            u: self.value(u).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
        };
        let schedule = if needs_grad { ScanSchedule::Sequential } else { schedule };
        let (y, tape) = scan_forward(&inputs, schedule, needs_grad)?;
        let value = Tensor::new(vec![dims.seqs, dims.len, dims.channels], y)?;
        self.push("selective_scan", value, &parents, move |ctx| {
            let inputs = ScanInputs {
                dims,
                u: ctx.value(u).data(),
                delta: ctx.value(delta).data(),
                a: ctx.value(a).data(),
                b: ctx.value(b).data(),
                c: ctx.value(c).data(),
                d: ctx.value(d).data(),
            };
            let tape = tape.as_ref().expect("forward kept its tape");
            let gr = scan_backward(&inputs, tape, ctx.grad_out());
            ctx.add_grad(u, &gr.u);
            ctx.add_grad(delta, &gr.delta);
            ctx.add_grad(a, &gr.a);
            ctx.add_grad(b, &gr.b);
            ctx.add_grad(c, &gr.c);
            ctx.add_grad(d, &gr.d);
        })
    }
}

/// Convolution kernel of a time-invariant SSM: `K[d, k] = Σ_n C[d,n]·Ā[d,n]^k·B̄[d,n]`
/// for `k < len`. All operands are `[D, N]`; the result is `[D, len]`.
pub fn lti_kernel<T: Float>(
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c: &Tensor<T>,
    len: usize,
) -> Result<Tensor<T>> {
    if len < 1 {
        return Err(Error::contract("kernel length must be at least 1"));
    }
    let &[d, n] = a_bar.shape() else {
        return Err(Error::shape("lti_kernel", format!("A_bar {:?}", a_bar.shape())));
    };
    if b_bar.shape() != [d, n] || c.shape() != [d, n] {
        return Err(Error::shape(
            "lti_kernel",
            format!("A_bar {:?}, B_bar {:?}, C {:?}", a_bar.shape(), b_bar.shape(), c.shape()),
        ));
    }
    let mut out = vec![T::zero(); d * len];
    for ch in 0..d {
        for s in 0..n {
            let i = ch * n + s;
            let mut power = T::one();
            for k in 0..len {
                out[ch * len + k] += c.data()[i] * power * b_bar.data()[i];
                power *= a_bar.data()[i];
            }
        }
    }
    Tensor::new(vec![d, len], out)
}

/// Causal convolution `y[t, d] = Σ_{k ≤ t} K[d, k]·x[t−k, d]` of `x: [L, D]`
/// with `kernel: [D, L]`.
pub fn causal_conv<T: Float>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let &[l, d] = x.shape() else {
        return Err(Error::shape("causal_conv", format!("x {:?}", x.shape())));
    };
    if kernel.shape() != [d, l] {
        return Err(Error::shape(
            "causal_conv",
            format!("x {:?} with kernel {:?}", x.shape(), kernel.shape()),
        ));
    }
    let mut out = vec![T::zero(); l * d];
    for t in 0..l {
        for ch in 0..d {
            let mut acc = T::zero();
            for k in 0..=t {
                acc += kernel.data()[ch * l + k] * x.data()[(t - k) * d + ch];
            }
            out[t * d + ch] = acc;
        }
    }
    Tensor::new(vec![l, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_recurrence_with_half_decay() {
        // exp(ln2 · −1) = 0.5 and g = 0.5, so B = 2 gives B̄ = 1.
        let ln2 = std::f64::consts::LN_2;
        let inp = ScanInputs {
            dims: ScanDims { seqs: 1, len: 3, channels: 1, state: 1 },
            u: &[1.0, 1.0, 1.0],
            delta: &[ln2; 3],
            a: &[-1.0],
            b: &[2.0; 3],
            c: &[1.0; 3],
            d: &[0.0],
        };
        let (y, h) = scan_forward(&inp, ScanSchedule::Sequential, true).unwrap();
        for (got, want) in y.iter().zip([1.0, 1.5, 1.75]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(h.unwrap().states.len(), 3);
    }

    #[test]
    fn empty_sequence_is_a_contract_error() {
        let inp = ScanInputs::<f32> {
            dims: ScanDims { seqs: 1, len: 0, channels: 1, state: 1 },
            u: &[],
            delta: &[],
            a: &[-1.0],
            b: &[],
            c: &[],
            d: &[0.0],
        };
        assert!(matches!(
            scan_forward(&inp, ScanSchedule::Sequential, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn geometric_kernel() {
        let k = lti_kernel(
            &Tensor::<f64>::from_f64(vec![1, 1], &[0.5]).unwrap(),
            &Tensor::from_f64(vec![1, 1], &[1.0]).unwrap(),
            &Tensor::from_f64(vec![1, 1], &[1.0]).unwrap(),
            3,
        )
        .unwrap();
        assert_eq!(k.data(), &[1.0, 0.5, 0.25]);
        let k = lti_kernel(
            &Tensor::<f64>::from_f64(vec![1, 1], &[0.0]).unwrap(),
            &Tensor::from_f64(vec![1, 1], &[3.0]).unwrap(),
            &Tensor::from_f64(vec![1, 1], &[2.0]).unwrap(),
            4,
        )
        .unwrap();
        assert_eq!(k.data(), &[6.0, 0.0, 0.0, 0.0]);
        assert!(lti_kernel(&k.clone().reshape(vec![1, 4]).unwrap(), &k, &k, 0).is_err());
    }
}
