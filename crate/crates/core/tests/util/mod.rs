//! Independent numerical oracles shared by the integration tests.
//!
//! Everything here is deliberately written from scratch — plain adaptive
//! Simpson quadrature, defining series, and seeded Monte Carlo — so the
//! library's closed forms are checked against a second, structurally
//! different route rather than against themselves.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

// ---------------------------------------------------------------------------
// Adaptive Simpson quadrature
// ---------------------------------------------------------------------------

fn simpson_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    atol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * atol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * atol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * atol, depth - 1)
}

/// Adaptive Simpson integral of `f` on `[a, b]` to absolute tolerance
/// `atol` scaled by a relative tolerance `rtol` against a coarse estimate
/// of the integral's magnitude.
pub fn quad(f: impl Fn(f64) -> f64, a: f64, b: f64, atol: f64, rtol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    // Coarse magnitude estimate over a fixed grid to set the tolerance.
    let mut scale = 0.0f64;
    let coarse = 64;
    for i in 0..=coarse {
        let x = a + (b - a) * i as f64 / coarse as f64;
        scale = scale.max(f(x).abs());
    }
    let tol = atol.max(rtol * scale * (b - a).abs());
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&f, a, b, fa, fm, fb, whole, tol, 48)
}

// ---------------------------------------------------------------------------
// Exponential-integral oracles
// ---------------------------------------------------------------------------

/// Eᵢ(x) for x > 0 by the everywhere-convergent defining series
/// γ + ln x + Σ xᵏ/(k·k!). All terms positive — no cancellation.
pub fn ei_pos_series(x: f64) -> f64 {
    assert!(x > 0.0 && x <= 705.0);
    let mut sum = 0.0f64;
    let mut term = 1.0f64;
    for k in 1..3000 {
        term *= x / k as f64;
        let contrib = term / k as f64;
        sum += contrib;
        if contrib < sum.abs() * 1e-18 && k as f64 > x {
            break;
        }
    }
    EULER_GAMMA + x.ln() + sum
}

/// Eᵢ(−y) for small y > 0 by the alternating series (safe up to y ≈ 7,
/// where the largest term is still ≤ ~10² of the result's scale).
pub fn ei_neg_series(y: f64) -> f64 {
    assert!(y > 0.0 && y <= 7.5);
    let mut sum = 0.0f64;
    let mut term = 1.0f64;
    for k in 1..200 {
        term *= -y / k as f64;
        sum += term / k as f64;
    }
    EULER_GAMMA + y.ln() + sum
}

/// e^y·Eᵢ(−y) via the cancellation-free integral −∫₀^∞ e^{−s}/(y+s) ds,
/// used where the alternating series loses digits (y ≳ 7).
pub fn exei_neg_quad(y: f64) -> f64 {
    assert!(y > 1.0);
    -quad(|s| (-s).exp() / (y + s), 0.0, 60.0, 0.0, 1e-14)
}

/// e^y·Eᵢ(−y) over the whole positive axis (series below 7, quadrature
/// above).
pub fn exei_neg(y: f64) -> f64 {
    if y <= 7.0 {
        y.exp() * ei_neg_series(y)
    } else {
        exei_neg_quad(y)
    }
}

/// Eᵢ(x) oracle for any x ≠ 0 in [−700, 700].
pub fn ei_oracle(x: f64) -> f64 {
    if x > 0.0 {
        ei_pos_series(x)
    } else if -x <= 7.0 {
        ei_neg_series(-x)
    } else {
        x.exp() * exei_neg_quad(-x)
    }
}

/// E_q(x) = ∫₁^∞ t^{−q} e^{−xt} dt by quadrature after t = 1/s.
pub fn en_oracle(q: usize, x: f64) -> f64 {
    assert!(x > 0.0);
    if q == 1 {
        return -ei_oracle(-x);
    }
    quad(
        |s| {
            if s <= 0.0 {
                0.0
            } else {
                s.powi(q as i32 - 2) * (-x / s).exp()
            }
        },
        0.0,
        1.0,
        0.0,
        1e-14,
    )
}

/// ₂F₁(s, p; p+1; z) for z ≤ 0 via its Euler integral
/// p·∫₀¹ t^{p−1}(1−zt)^{−s} dt, desingularized with v = t^p.
pub fn f21_oracle(s: f64, p: f64, z: f64) -> f64 {
    assert!(z <= 0.0 && p > 0.0);
    quad(
        |v| {
            if v <= 0.0 {
                1.0 // limit of (1 − z·v^{1/p})^{−s} as v → 0⁺
            } else {
                (1.0 - z * v.powf(1.0 / p)).powf(-s)
            }
        },
        0.0,
        1.0,
        0.0,
        1e-14,
    )
}

// ---------------------------------------------------------------------------
// Ψ and Θ oracles
// ---------------------------------------------------------------------------

/// ∫ᵤᵛ xⁿ eˣ Eᵢ(−x) dx by direct quadrature (finite v).
pub fn psi_oracle(n: i32, u: f64, v: f64) -> f64 {
    assert!(u > 0.0 && v >= u);
    quad(|x| x.powi(n) * exei_neg(x), u, v, 1e-13, 1e-13)
}

/// ∫ᵤ^∞ xⁿ eˣ Eᵢ(−x) dx for n ≤ −2: quadrature to X plus the analytic
/// tail from the asymptotic expansion eˣEᵢ(−x) ≈ −Σ (−1)^{j−1}(j−1)!/xʲ.
pub fn psi_tilde_oracle(n: i32, u: f64) -> f64 {
    assert!(n <= -2 && u > 0.0);
    let x_max = 80.0f64.max(4.0 * u);
    let head = psi_oracle(n, u, x_max);
    let mut tail = 0.0f64;
    let mut fact = 1.0f64; // (j−1)!
    for j in 1..=8i32 {
        if j > 1 {
            fact *= (j - 1) as f64;
        }
        // ∫_X^∞ x^{n−j} dx = X^{n−j+1}/(j−1−n)  (converges since j−n > 1)
        let piece = fact * x_max.powi(n - j + 1) / (j - 1 - n) as f64;
        tail -= if j % 2 == 1 { piece } else { -piece };
    }
    head + tail
}

/// Seeded Monte Carlo oracle for Θ(a, b) = E[log₂(1 + aZX + (aZ+b)Y)]
/// with Z ~ Beta(1, M−1), X ~ Exp(1), Y ~ Gamma(M−1, 1).
/// Returns `(mean, standard_error)`.
pub fn theta_mc(a: f64, b: f64, m: usize, samples: u64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m1 = (m - 1) as f64;
    let (mut sum, mut comp, mut sumsq) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..samples {
        let z = 1.0 - rng.gen_range(0.0f64..1.0).max(1e-300).powf(1.0 / m1);
        let x = -rng.gen_range(0.0f64..1.0).max(1e-300).ln();
        let mut y = 0.0;
        for _ in 0..m - 1 {
            y -= rng.gen_range(0.0f64..1.0).max(1e-300).ln();
        }
        let val = (1.0 + a * z * x + (a * z + b) * y).log2();
        // Neumaier-compensated accumulation.
        let t = sum + val;
        comp += if sum.abs() >= val.abs() { (sum - t) + val } else { (val - t) + sum };
        sum = t;
        sumsq += val * val;
    }
    let nf = samples as f64;
    let mean = (sum + comp) / nf;
    let var = (sumsq / nf - mean * mean).max(0.0);
    (mean, (var / nf).sqrt())
}

/// `linear_fit(xs, ys)` → (slope, intercept) by least squares.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxy / sxx, my - sxy / sxx * mx)
}
