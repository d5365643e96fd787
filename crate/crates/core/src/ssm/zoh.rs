//! Zero-order-hold discretisation of a diagonal state matrix.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Below this `|Δ·A|` the input gain falls back to its series limit `Δ`.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// `(Ā, g)` for one diagonal entry, with `B̄ = g·B`:
/// `Ā = exp(ΔA)`, `g = (exp(ΔA) − 1) / A`.
#[inline]
pub fn zoh_gains<T: Float>(a: T, delta: T) -> (T, T) {
    let x = delta * a;
    let em1 = x.exp_m1();
    let gain = if x.abs() < T::of(ZOH_SERIES_THRESHOLD) {
        delta
    } else {
        em1 / a
    };
    (T::one() + em1, gain)
}

/// `∂g/∂A` for the gain above, given `1/A`; `abar` and `gain` as returned by
/// [`zoh_gains`].
#[inline]
pub(crate) fn zoh_gain_da<T: Float>(a: T, inv_a: T, delta: T, abar: T, gain: T) -> T {
    let x = delta * a;
    if x.abs() < T::of(1e-4) {
        // dt²·(1/2 + x/3 + x²/8)
        delta * delta * (T::of(0.5) + x / T::of(3.0) + x * x / T::of(8.0))
    } else {
        (delta * abar - gain) * inv_a
    }
}

/// Discretises `A: [D, N]` with per-step `Δ: [L, D]` and input matrices
/// `B: [L, N]`, returning `(Ā, B̄)`, each `[L, D, N]`.
pub fn zoh_discretize<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    delta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (&[d, n], &[l, nb], &[ld, dd]) = (a.shape(), b.shape(), delta.shape()) else {
        return Err(Error::shape(
            "zoh_discretize",
            format!("A {:?}, B {:?}, delta {:?}", a.shape(), b.shape(), delta.shape()),
        ));
    };
    if nb != n || ld != l || dd != d {
        return Err(Error::shape(
            "zoh_discretize",
            format!("A {:?}, B {:?}, delta {:?}", a.shape(), b.shape(), delta.shape()),
        ));
    }
    if let Some(bad) = delta.data().iter().find(|&&v| !(v > T::zero())) {
        return Err(Error::contract(format!("step size must be positive, got {bad}")));
    }
    let mut abar = Vec::with_capacity(l * d * n);
    let mut bbar = Vec::with_capacity(l * d * n);
    for t in 0..l {
        for c in 0..d {
            let dt = delta.data()[t * d + c];
            for s in 0..n {
                let (ab, gain) = zoh_gains(a.data()[c * n + s], dt);
                abar.push(ab);
                bbar.push(gain * b.data()[t * n + s]);
            }
        }
    }
    Ok((
        Tensor::new(vec![l, d, n], abar)?,
        Tensor::new(vec![l, d, n], bbar)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(a: f64, delta: f64, b: f64) -> (f64, f64) {
        let (ab, bb) = zoh_discretize(
            &Tensor::<f64>::from_f64(vec![1, 1], &[a]).unwrap(),
            &Tensor::from_f64(vec![1, 1], &[b]).unwrap(),
            &Tensor::from_f64(vec![1, 1], &[delta]).unwrap(),
        )
        .unwrap();
        (ab.data()[0], bb.data()[0])
    }

    #[test]
    fn scalar_closed_forms() {
        let (ab, bb) = one(-1.0, 0.1, 1.0);
        assert!((ab - 0.904837).abs() < 1e-6);
        assert!((bb - 0.095163).abs() < 1e-6);

        let (ab, bb) = one(-2.0, 0.5, 3.0);
        assert!((ab - 0.367879).abs() < 1e-6);
        assert!((bb - 0.948181).abs() < 1e-6);
    }

    #[test]
    fn identity_dynamics_limit() {
        let (ab, bb) = one(-1e-9, 0.1, 1.0);
        assert!((ab - 1.0).abs() < 1e-9);
        assert!((bb - 0.1).abs() < 1e-9);
        let (ab, bb) = one(0.0, 0.1, 1.0);
        assert_eq!((ab, bb), (1.0, 0.1));
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let a = Tensor::<f64>::from_f64(vec![1, 1], &[-1.0]).unwrap();
        let b = Tensor::from_f64(vec![1, 1], &[1.0]).unwrap();
        let d = Tensor::from_f64(vec![1, 1], &[0.0]).unwrap();
        assert!(matches!(zoh_discretize(&a, &b, &d), Err(Error::Contract(_))));
    }

    #[test]
    fn gain_derivative_matches_difference_quotient() {
        for &(a, dt) in &[(-1.0f64, 0.1f64), (-3.0, 0.02), (-1e-3, 0.05), (-8.0, 0.9)] {
            let (ab, g) = zoh_gains(a, dt);
            let h = 1e-6;
            let fd = (zoh_gains(a + h, dt).1 - zoh_gains(a - h, dt).1) / (2.0 * h);
            let an = zoh_gain_da(a, 1.0 / a, dt, ab, g);
            assert!((an - fd).abs() < 1e-8 * (1.0 + fd.abs()), "a={a} dt={dt}: {an} vs {fd}");
        }
    }
}
