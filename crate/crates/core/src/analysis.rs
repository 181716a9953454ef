//! Closed-form ergodic-rate analysis under quantized feedback.
//!
//! Everything here is expressed through three SNR-like link coefficients
//! per user:
//!
//! * `S1 = cnr · Σ_{j ≤ k} P_{n,j}` — own-cluster power through position k,
//! * `S2 = cnr · Σ_{j < k} P_{n,j}` — residual intra-cluster interference
//!   after successive cancellation (zero for the cluster head),
//! * `S3 = cnr · Σ_{i ≠ n, l} P_{i,l}` — total other-cluster power,
//!
//! together with the quantization-cell scale `δ = 2^{-B/(M-1)}`.
//!
//! The lower bound `LB1` is an exact expectation over the cell-model
//! mixture: with `z ~ Beta(1, M-1)`, `X ~ Exp(1)`, `Y ~ Gamma(M-1, 1)` and
//! `b = S3·δ/(M-1)`,
//!
//! ```text
//! LB1(S, b) = E[ log₂( (1 + μ₁X + ν₁Y) / (1 + μ₂X + ν₂Y) ) ],
//! μᵢ = Sⁱz,  νᵢ = Sⁱz + b      (for the head, the denominator is 1 + bY)
//! ```
//!
//! evaluated through the closed-form `Θ` of the special-function layer,
//! falling back to direct quadrature when the closed form loses precision
//! (the alternating series cancels catastrophically for large `S/b`); the
//! fallback is recorded in [`NumericsFlags`], never silent.
//!
//! The companion results: `ΔR^{UB1}` bounds the rate *loss* against perfect
//! CSI from above, `R̃^{LB2}` is the optimizer-friendly log-form bound, and
//! the ideal rate has the exact closed form
//! `log₂(e)·[e^{1/S1}E₁(1/S1) − e^{1/S2}E₁(1/S2)]` because
//! `‖h‖²·|h̃w|²` is exactly `Exp(1)` distributed.

use crate::scalar::FloatT;
use crate::specfun::{
    e1_scaled, exp_int_en_scaled, gamma, theta, theta_b_zero, theta_quad, SpecFunError,
};
use crate::system::ClusteredScenario;

/// Per-link SNR-like coefficients (see module docs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkCoefficients<F> {
    pub s1: F,
    pub s2: F,
    pub s3: F,
    /// Quantization-cell scale `2^{-B/(M-1)}`; 0 means perfect CSI.
    pub delta: F,
}

impl<F: FloatT> LinkCoefficients<F> {
    /// Build from raw ingredients: per-user CNR, own-cluster power prefix
    /// sums, aggregate other-cluster power and the user's feedback bits.
    pub fn new(cnr: F, own_through_k: F, own_below_k: F, other_total: F, bits: F, m: usize) -> Self {
        let delta = F::c(2.0).powf(-bits / F::of(m - 1));
        LinkCoefficients {
            s1: cnr * own_through_k,
            s2: cnr * own_below_k,
            s3: cnr * other_total,
            delta,
        }
    }
}

/// Coefficients for user (n, k) of a scenario under a concrete power grid
/// `powers[n][k]` (mW) and a per-user bit budget.
pub fn coeffs_for_user(
    scen: &ClusteredScenario,
    powers: &[Vec<f64>],
    bits: f64,
    n: usize,
    k: usize,
) -> LinkCoefficients<f64> {
    let own_through: f64 = powers[n][..=k].iter().sum();
    let own_below: f64 = powers[n][..k].iter().sum();
    let other: f64 = powers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != n)
        .flat_map(|(_, row)| row.iter())
        .sum();
    LinkCoefficients::new(scen.cnr[n][k], own_through, own_below, other, bits, scen.m)
}

/// Which bound a [`RateBound`] value represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Lb1,
    Lb2,
    UbLoss,
    Ideal,
}

/// Numerical provenance of a computed bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NumericsFlags {
    /// The closed-form Θ series lost precision and the value came from
    /// direct quadrature instead.
    pub quadrature_fallback: bool,
    /// The bound came out (slightly) negative; reported as-is, not clamped.
    pub negative: bool,
}

/// A rate bound in bits/s/Hz with provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBound<F> {
    pub value: F,
    pub kind: BoundKind,
    pub flags: NumericsFlags,
}

/// Γ((2M-1)/(M-1)) — the constant multiplying `δ·S3` in the loss and LB2
/// bounds.
pub fn quantization_gamma<F: FloatT>(m: usize) -> F {
    F::c(gamma((2.0 * m as f64 - 1.0) / (m as f64 - 1.0)))
}

/// Θ with graceful degradation: exact series first, quadrature when the
/// series cancels, analytic `b → 0` continuation for the degenerate case.
fn theta_value<F: FloatT>(
    a: F,
    b: F,
    m: usize,
    flags: &mut NumericsFlags,
) -> Result<F, SpecFunError> {
    if a <= F::zero() {
        return Ok(F::zero());
    }
    // Below this, the b-correction is beneath double rounding; use the
    // closed b → 0 limit instead of grinding the quadrature.
    if b <= F::c(1e-14) * (F::one() + a) {
        return theta_b_zero(a, m);
    }
    match theta(a, b, m) {
        Ok(r) => Ok(r.value),
        Err(SpecFunError::LossOfPrecision { .. }) | Err(SpecFunError::Overflow(_)) => {
            flags.quadrature_fallback = true;
            theta_quad(a, b, m)
        }
        Err(e) => Err(e),
    }
}

/// `E[log₂(1 + bY)]`, `Y ~ Gamma(M-1,1)` — the head user's denominator
/// term, `log₂(e)·e^{1/b}Σ_{q=1}^{M-1} E_q(1/b)`.
fn log_one_plus_gamma<F: FloatT>(b: F, m: usize) -> Result<F, SpecFunError> {
    if b <= F::zero() {
        return Ok(F::zero());
    }
    let x = b.recip();
    let mut s = F::zero();
    for q in 1..m {
        s += exp_int_en_scaled(q, x)?;
    }
    Ok(F::log2_e() * s)
}

/// Ergodic-rate lower bound LB1 for a position-`k` user (zero-based `k`).
pub fn rate_lb1<F: FloatT>(
    c: &LinkCoefficients<F>,
    m: usize,
    k: usize,
) -> Result<RateBound<F>, SpecFunError> {
    let mut flags = NumericsFlags::default();
    let b = c.s3 * c.delta / F::of(m - 1);
    let value = if c.s1 <= F::zero() {
        F::zero()
    } else if k == 0 {
        theta_value(c.s1, b, m, &mut flags)? - log_one_plus_gamma(b, m)?
    } else {
        theta_value(c.s1, b, m, &mut flags)? - theta_value(c.s2, b, m, &mut flags)?
    };
    flags.negative = value < F::zero();
    Ok(RateBound {
        value,
        kind: BoundKind::Lb1,
        flags,
    })
}

/// Upper bound on the ergodic-rate loss relative to perfect CSI.
pub fn rate_loss_ub<F: FloatT>(c: &LinkCoefficients<F>, m: usize) -> RateBound<F> {
    let tau: F = quantization_gamma(m);
    let first = (F::one() + c.s2 + tau * c.delta * c.s3).log2();
    let second = if c.s2 > F::zero() {
        F::log2_e() * e1_scaled(c.s2.recip())
    } else {
        F::zero()
    };
    let value = first - second;
    RateBound {
        value,
        kind: BoundKind::UbLoss,
        flags: NumericsFlags {
            negative: value < F::zero(),
            ..Default::default()
        },
    }
}

/// Ideal-CSI ergodic rate: `log₂(e)·[e^{1/S1}E₁(1/S1) − e^{1/S2}E₁(1/S2)]`
/// (`‖h‖²|h̃w|² ~ Exp(1)` exactly).
pub fn rate_ideal<F: FloatT>(c: &LinkCoefficients<F>) -> RateBound<F> {
    let term = |s: F| {
        if s > F::zero() {
            F::log2_e() * e1_scaled(s.recip())
        } else {
            F::zero()
        }
    };
    let value = term(c.s1) - term(c.s2);
    RateBound {
        value,
        kind: BoundKind::Ideal,
        flags: NumericsFlags::default(),
    }
}

/// Optimizer-friendly lower bound R̃^{LB2} for user (n, k) under equal
/// intra-cluster power split `P_{n,k} = φ_n P / K`.
///
/// `k` is zero-based; `bits` is the user's feedback budget.
pub fn rate_lb2_tilde<F: FloatT>(
    cnr: F,
    p_total: F,
    phi_n: F,
    k_users: usize,
    k: usize,
    bits: F,
    m: usize,
) -> RateBound<F> {
    if phi_n <= F::zero() {
        return RateBound {
            value: F::zero(),
            kind: BoundKind::Lb2,
            flags: NumericsFlags::default(),
        };
    }
    let p_n = phi_n * p_total;
    let per_user = cnr * p_n / F::of(k_users);
    let s2_bar = per_user * F::of(k);
    let s3_bar = cnr * (p_total - p_n);
    let delta = F::c(2.0).powf(-bits / F::of(m - 1));
    let tau: F = quantization_gamma(m);
    let noise = F::of(m) / F::of(m - 1) + s2_bar + tau * delta * s3_bar;
    RateBound {
        value: (F::one() + per_user / noise).log2(),
        kind: BoundKind::Lb2,
        flags: NumericsFlags::default(),
    }
}
