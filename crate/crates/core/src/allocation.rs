//! Joint feedback-bit and power allocation.
//!
//! Bits: minimizing the sum of per-user rate-loss upper bounds over a total
//! feedback budget `B` has the water-filling-like relaxed solution
//!
//! ```text
//! B*_{n,k} = B/|A| + (M-1)·log₂(S³/(1+S²))
//!          + (M-1)/|A| · Σ_{(p,q) ∈ A} log₂((1+S²)/S³)
//! ```
//!
//! over the active set `A`. Negative entries are pinned to zero and the
//! formula re-run on the survivors until nonnegative; the fractional
//! remainder `B - Σ⌊B*⌋` is then distributed as 0/1 single-bit increments
//! by dynamic programming, each increment valued by the loss-bound
//! reduction it buys.
//!
//! Power: cluster fractions come from the stationary form
//! `φ*_n = 1/N − (K/N)[M/((M-1)P) + Γ((2M-1)/(M-1))·2^{-B/(NK(M-1))}·G·C/P]·Δ_n`
//! where `G` is the geometric-mean CNR, `Δ_n` the head-noise imbalance,
//! and `C` solves a scalar fixed-point equation (damped iteration with a
//! bracketed root search as fallback; among multiple feasible roots the one
//! maximizing the head-user sum bound wins). When the power cannot support
//! all `N` clusters (`φ_N ≤ 0`) the cluster count is reduced and the users
//! re-clustered.

use crate::analysis::{coeffs_for_user, quantization_gamma, rate_lb2_tilde};
use crate::scalar::FloatT;
use crate::system::{cluster_users, ClusteredScenario};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("numerical failure: {0}")]
    Numerics(String),
}

/// Integer bit allocation with its relaxed (pre-rounding) origin.
#[derive(Debug, Clone, PartialEq)]
pub struct BitAllocation {
    /// Integer bits per user, `[cluster][position]`.
    pub bits: Vec<Vec<u32>>,
    /// Relaxed solution the integers were rounded from.
    pub relaxed: Vec<Vec<f64>>,
    pub total_used: u32,
}

/// Cluster power split under equal intra-cluster sharing.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    /// Fraction of total power per cluster; sums to 1 over active clusters.
    pub phi: Vec<f64>,
    /// Per-user power `φ_n·P/K` in mW.
    pub per_user_mw: Vec<Vec<f64>>,
    /// Fixed-point value of the scalar equation (1.0 for N = 1).
    pub c_star: f64,
    pub n_active_clusters: usize,
}

/// Everything the joint optimizer decides, including the scenario it ended
/// up with (cluster reduction may re-cluster the users).
#[derive(Debug, Clone)]
pub struct JointSolution {
    pub scenario: ClusteredScenario,
    pub power: PowerAllocation,
    pub bits: BitAllocation,
}

/// Interference coefficients (S², S³) for every user under a power grid.
pub fn interference_coeffs(
    scen: &ClusteredScenario,
    powers: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut s2 = vec![vec![0.0; scen.k]; scen.n];
    let mut s3 = vec![vec![0.0; scen.k]; scen.n];
    for n in 0..scen.n {
        for k in 0..scen.k {
            let c = coeffs_for_user(scen, powers, 0.0, n, k);
            s2[n][k] = c.s2;
            s3[n][k] = c.s3;
        }
    }
    (s2, s3)
}

/// One pass of the relaxed closed form over the active set.
///
/// `active[n][k] = false` pins the user at zero bits; the budget is shared
/// by `|A|` active users. Returns `None` when no user is active.
fn relaxed_pass<F: FloatT>(
    b_total: F,
    s2: &[Vec<F>],
    s3: &[Vec<F>],
    m: usize,
    active: &[Vec<bool>],
) -> Option<Vec<Vec<F>>> {
    let count = active.iter().flatten().filter(|&&a| a).count();
    if count == 0 {
        return None;
    }
    let card = F::of(count);
    let m1 = F::of(m - 1);
    let mut correction = F::zero();
    for (n, row) in active.iter().enumerate() {
        for (k, &a) in row.iter().enumerate() {
            if a {
                correction += ((F::one() + s2[n][k]) / s3[n][k]).log2();
            }
        }
    }
    let shared = b_total / card + m1 / card * correction;
    let mut out = vec![vec![F::zero(); s2[0].len()]; s2.len()];
    for (n, row) in active.iter().enumerate() {
        for (k, &a) in row.iter().enumerate() {
            if a {
                out[n][k] = shared + m1 * (s3[n][k] / (F::one() + s2[n][k])).log2();
            }
        }
    }
    Some(out)
}

/// Relaxed bit allocation with the nonnegativity recurrence: negative users
/// are pinned at zero and the closed form re-solved on the remainder until
/// every active user is nonnegative. Users with `S³ = 0` (no inter-cluster
/// interference to suppress) get zero bits outright; an all-zero grid is
/// returned when nobody has interference (single cluster).
pub fn bits_relaxed_nonneg<F: FloatT>(
    b_total: F,
    s2: &[Vec<F>],
    s3: &[Vec<F>],
    m: usize,
) -> Vec<Vec<F>> {
    let (n, k) = (s2.len(), s2[0].len());
    let mut active: Vec<Vec<bool>> = s3
        .iter()
        .map(|row| row.iter().map(|&v| v > F::zero()).collect())
        .collect();
    for _round in 0..n * k {
        let Some(relaxed) = relaxed_pass(b_total, s2, s3, m, &active) else {
            return vec![vec![F::zero(); k]; n];
        };
        let mut any_negative = false;
        for (rn, row) in relaxed.iter().enumerate() {
            for (rk, &v) in row.iter().enumerate() {
                if active[rn][rk] && v < F::zero() {
                    active[rn][rk] = false;
                    any_negative = true;
                }
            }
        }
        if !any_negative {
            return relaxed;
        }
    }
    unreachable!("recurrence removes at least one user per round");
}

/// Single pass of the closed form over all interference-bearing users,
/// without the nonnegativity recurrence (entries may be negative). Used for
/// asymptotic-slope diagnostics.
pub fn bits_relaxed_raw<F: FloatT>(b_total: F, s2: &[Vec<F>], s3: &[Vec<F>], m: usize) -> Vec<Vec<F>> {
    let active: Vec<Vec<bool>> = s3
        .iter()
        .map(|row| row.iter().map(|&v| v > F::zero()).collect())
        .collect();
    relaxed_pass(b_total, s2, s3, m, &active)
        .unwrap_or_else(|| vec![vec![F::zero(); s2[0].len()]; s2.len()])
}

/// Flattened user index: heads of all clusters first, then position 2, etc.
/// Ties in every allocator break toward the lower flat index.
fn flat_index(n_clusters: usize, n: usize, k: usize) -> usize {
    k * n_clusters + n
}

/// 0/1 knapsack with unit weights: choose `capacity` of the `values` items
/// maximizing total value; ties resolve toward lower indices. Returns the
/// chosen indices.
pub fn unit_knapsack(values: &[f64], capacity: usize) -> Vec<usize> {
    let n = values.len();
    let cap = capacity.min(n);
    // D[i][j]: best value using the first i items with j increments.
    let mut d = vec![vec![0.0f64; cap + 1]; n + 1];
    for i in 1..=n {
        for j in 0..=cap {
            let skip = d[i - 1][j];
            d[i][j] = if j > 0 {
                let take = d[i - 1][j - 1] + values[i - 1];
                if take > skip { take } else { skip }
            } else {
                skip
            };
        }
    }
    let mut chosen = Vec::new();
    let mut j = cap;
    for i in (1..=n).rev() {
        if j > 0 && d[i][j] > d[i - 1][j] {
            chosen.push(i - 1);
            j -= 1;
        }
    }
    chosen.reverse();
    chosen
}

/// Integer-feasible allocation: floor the relaxed solution, then spend the
/// remaining `B - Σ⌊·⌋` bits as single-bit increments chosen by knapsack,
/// each valued by the rate-loss reduction `Δ(⌊b⌋) - Δ(⌊b⌋+1)` it buys.
pub fn bits_integerize(
    b_total: u32,
    relaxed: &[Vec<f64>],
    s2: &[Vec<f64>],
    s3: &[Vec<f64>],
    m: usize,
) -> BitAllocation {
    let (n, k) = (relaxed.len(), relaxed[0].len());
    let tau: f64 = quantization_gamma(m);
    let loss = |s2: f64, s3: f64, b: f64| {
        (1.0 + s2 + tau * 2f64.powf(-b / (m as f64 - 1.0)) * s3).log2()
    };
    let mut bits = vec![vec![0u32; k]; n];
    let mut values = vec![0.0; n * k];
    let mut used: u32 = 0;
    for nn in 0..n {
        for kk in 0..k {
            // Tolerance absorbs roundoff on exactly-integer relaxed values.
            let fl = (relaxed[nn][kk] + 1e-9).floor().max(0.0);
            bits[nn][kk] = fl as u32;
            used += bits[nn][kk];
            values[flat_index(n, nn, kk)] = loss(s2[nn][kk], s3[nn][kk], fl)
                - loss(s2[nn][kk], s3[nn][kk], fl + 1.0);
        }
    }
    assert!(used <= b_total, "floors exceed the budget");
    let remaining = (b_total - used) as usize;
    for i in unit_knapsack(&values, remaining) {
        let (kk, nn) = (i / n, i % n);
        bits[nn][kk] += 1;
        used += 1;
    }
    BitAllocation {
        bits,
        relaxed: relaxed.to_vec(),
        total_used: used,
    }
}

/// The proposed bit allocator for a scenario under a given power grid.
pub fn bits_optimize(scen: &ClusteredScenario, powers: &[Vec<f64>]) -> BitAllocation {
    let (s2, s3) = interference_coeffs(scen, powers);
    let relaxed = bits_relaxed_nonneg(scen.b_total, &s2, &s3, scen.m);
    bits_integerize(scen.b_total.round() as u32, &relaxed, &s2, &s3, scen.m)
}

/// Reference allocator minimizing `Σ 2^{-B/(M-1)}·S³` (quantization-error
/// power alone, ignoring intra-cluster interference): relaxed form
/// `B/(NK) + (M-1)log₂S³ − (M-1)/(NK)·ΣΣlog₂S³`, same recurrence and
/// integerization driven by its own objective.
pub fn bits_reference(scen: &ClusteredScenario, powers: &[Vec<f64>]) -> BitAllocation {
    let (_, s3) = interference_coeffs(scen, powers);
    // Reuse the recurrence with S² ≡ 0, which reduces the closed form to
    // the reference scheme's.
    let zeros = vec![vec![0.0; scen.k]; scen.n];
    let relaxed = bits_relaxed_nonneg(scen.b_total, &zeros, &s3, scen.m);
    bits_integerize(scen.b_total.round() as u32, &relaxed, &zeros, &s3, scen.m)
}

/// Equal split of the budget, remainder to the lowest flat indices.
pub fn bits_equal(scen: &ClusteredScenario) -> BitAllocation {
    let total = scen.b_total.round() as u32;
    let nk = (scen.n * scen.k) as u32;
    let (each, rem) = (total / nk, (total % nk) as usize);
    let mut bits = vec![vec![each; scen.k]; scen.n];
    for i in 0..rem {
        let (kk, nn) = (i / scen.n, i % scen.n);
        bits[nn][kk] += 1;
    }
    BitAllocation {
        relaxed: bits
            .iter()
            .map(|r| r.iter().map(|&b| b as f64).collect())
            .collect(),
        bits,
        total_used: total,
    }
}

/// The linearized bit-allocation objective `Σ τ·2^{-B/(M-1)}·S³/(1+S²)`
/// that the relaxed closed form minimizes; used for cross-scheme
/// comparisons (lower is better).
pub fn bits_objective(bits: &[Vec<f64>], s2: &[Vec<f64>], s3: &[Vec<f64>], m: usize) -> f64 {
    let tau: f64 = quantization_gamma(m);
    let mut sum = 0.0;
    for n in 0..s2.len() {
        for k in 0..s2[0].len() {
            sum += tau * 2f64.powf(-bits[n][k] / (m as f64 - 1.0)) * s3[n][k] / (1.0 + s2[n][k]);
        }
    }
    sum
}

/// Cluster fractions as a function of the fixed-point variable `C`.
fn phi_of_c(scen: &ClusteredScenario, c: f64) -> Vec<f64> {
    let (m, n, k) = (scen.m as f64, scen.n, scen.k as f64);
    let p = scen.p_total_mw;
    let tau: f64 = quantization_gamma(scen.m);
    let g = scen.cnr_geometric_mean();
    let accuracy = 2f64.powf(-scen.b_total / ((scen.n as f64) * k * (m - 1.0)));
    let bracket = m / ((m - 1.0) * p) + tau * accuracy * g * c / p;
    (0..n)
        .map(|i| 1.0 / n as f64 - k / n as f64 * bracket * scen.head_noise_imbalance(i))
        .collect()
}

/// Right-hand side of the scalar equation for `C` given the fractions.
fn c_rhs(scen: &ClusteredScenario, phi: &[f64]) -> f64 {
    let (n, k) = (scen.n as f64, scen.k as f64);
    let p = scen.p_total_mw;
    let mut ln = p.ln() / k;
    for &f in phi {
        ln += (1.0 - f).ln() / n;
    }
    for (pn, row) in scen.cnr.iter().enumerate() {
        for (q, &cnr) in row.iter().enumerate().skip(1) {
            ln -= (1.0 / p + cnr * q as f64 * phi[pn] / k).ln() / (n * k);
        }
    }
    ln.exp()
}

fn c_residual(scen: &ClusteredScenario, c: f64) -> f64 {
    let phi = phi_of_c(scen, c);
    if phi.iter().any(|&f| f >= 1.0) {
        // RHS undefined (log of non-positive); steer the search away.
        return f64::NAN;
    }
    c - c_rhs(scen, &phi)
}

/// Head-user sum bound used to rank multiple fixed-point roots.
fn head_sum_bound(scen: &ClusteredScenario, phi: &[f64]) -> f64 {
    let equal_bits = scen.b_total / (scen.n * scen.k) as f64;
    (0..scen.n)
        .map(|n| {
            rate_lb2_tilde(
                scen.cnr[n][0],
                scen.p_total_mw,
                phi[n],
                scen.k,
                0,
                equal_bits,
                scen.m,
            )
            .value
        })
        .sum()
}

/// Solve the scalar equation for one cluster count. Returns the best
/// feasible root's `(C, φ)`, or the least-negative `φ_N` diagnosis when no
/// root supports all clusters.
fn solve_c(scen: &ClusteredScenario) -> Result<(f64, Vec<f64>), SolveOutcome> {
    let c0 = scen.p_total_mw.powf(1.0 / scen.k as f64);
    let mut candidates: Vec<f64> = Vec::new();

    // Damped fixed-point iteration from the natural scale.
    let mut c = c0;
    for _ in 0..200 {
        let phi = phi_of_c(scen, c);
        if phi.iter().any(|&f| f >= 1.0) {
            break;
        }
        let next = 0.5 * c + 0.5 * c_rhs(scen, &phi);
        if !next.is_finite() || next <= 0.0 {
            break;
        }
        if (next - c).abs() <= 1e-12 * c.abs() {
            c = next;
            if c_residual(scen, c).abs() <= 1e-9 * c {
                candidates.push(c);
            }
            break;
        }
        c = next;
    }

    // Bracketed sweep for further roots; the fixed point can sit above the
    // natural scale, so the upper end expands adaptively.
    let mut hi = c0 * 10.0;
    for _expand in 0..8 {
        let lo = c0 * 1e-9;
        let pts = 96;
        let mut prev: Option<(f64, f64)> = None;
        for i in 0..=pts {
            let x = lo * (hi / lo).powf(i as f64 / pts as f64);
            let f = c_residual(scen, x);
            if !f.is_finite() {
                prev = None;
                continue;
            }
            if let Some((xp, fp)) = prev {
                if fp == 0.0 {
                    candidates.push(xp);
                } else if fp * f < 0.0 {
                    // Bisection refinement.
                    let (mut a, mut b, mut fa) = (xp, x, fp);
                    for _ in 0..200 {
                        let mid = 0.5 * (a + b);
                        let fm = c_residual(scen, mid);
                        if !fm.is_finite() {
                            break;
                        }
                        if fa * fm <= 0.0 {
                            b = mid;
                        } else {
                            a = mid;
                            fa = fm;
                        }
                        if (b - a) <= 1e-13 * b {
                            break;
                        }
                    }
                    candidates.push(0.5 * (a + b));
                }
            }
            prev = Some((x, f));
        }
        if !candidates.is_empty() {
            break;
        }
        hi *= 10.0;
    }

    if candidates.is_empty() {
        // No root found. If the fractions are already infeasible at the
        // natural scale (cluster N starved, or the equation's RHS undefined
        // because some φ ≥ 1), the power cannot support N clusters — that
        // is a reduction case, not a solver failure.
        let phi0 = phi_of_c(scen, c0);
        let min0 = phi0.iter().cloned().fold(f64::INFINITY, f64::min);
        let max0 = phi0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min0 <= 0.0 || max0 >= 1.0 {
            return Err(SolveOutcome::PhiNonPositive(min0));
        }
        return Err(SolveOutcome::NoRoot);
    }
    // Rank feasible roots by the head-user sum bound.
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut best_min_phi = f64::NEG_INFINITY;
    for &c in &candidates {
        let phi = phi_of_c(scen, c);
        let min_phi = phi.iter().cloned().fold(f64::INFINITY, f64::min);
        best_min_phi = best_min_phi.max(min_phi);
        if min_phi > 0.0 && phi.iter().all(|&f| f <= 1.0) {
            let obj = head_sum_bound(scen, &phi);
            if best.as_ref().map_or(true, |(_, _, bo)| obj > *bo) {
                best = Some((c, phi, obj));
            }
        }
    }
    match best {
        Some((c, phi, _)) => Ok((c, phi)),
        None => Err(SolveOutcome::PhiNonPositive(best_min_phi)),
    }
}

enum SolveOutcome {
    /// Roots exist but none keeps every cluster's fraction positive;
    /// carries the least-negative minimum fraction for diagnostics.
    #[allow(dead_code)]
    PhiNonPositive(f64),
    NoRoot,
}

/// Power allocation by the scalar fixed point, with cluster reduction when
/// the power cannot support all clusters: the user population is
/// re-clustered into fewer, larger clusters until `φ > 0` throughout.
///
/// Returns the allocation together with the scenario it applies to (which
/// differs from the input when reduction occurred).
pub fn power_fixed_point(
    scen: &ClusteredScenario,
) -> Result<(PowerAllocation, ClusteredScenario), AllocError> {
    let total_users = scen.n * scen.k;
    let mut current = scen.clone();
    loop {
        if current.n == 1 {
            let per = current.p_total_mw / current.k as f64;
            return Ok((
                PowerAllocation {
                    phi: vec![1.0],
                    per_user_mw: vec![vec![per; current.k]],
                    c_star: 1.0,
                    n_active_clusters: 1,
                },
                current,
            ));
        }
        match solve_c(&current) {
            Ok((c_star, phi)) => {
                let per_user_mw = phi
                    .iter()
                    .map(|f| vec![f * current.p_total_mw / current.k as f64; current.k])
                    .collect();
                return Ok((
                    PowerAllocation {
                        n_active_clusters: current.n,
                        phi,
                        per_user_mw,
                        c_star,
                    },
                    current,
                ));
            }
            Err(SolveOutcome::NoRoot) => {
                return Err(AllocError::Numerics(
                    "no root of the power fixed-point equation".into(),
                ))
            }
            Err(SolveOutcome::PhiNonPositive(_)) => {
                // Reduce the cluster count and re-cluster the same users.
                let n_next = current.n - 1;
                if total_users % n_next != 0 {
                    return Err(AllocError::Infeasible(format!(
                        "power supports only {n_next} clusters but {total_users} users \
                         do not split evenly"
                    )));
                }
                let k_next = total_users / n_next;
                if current.m <= (n_next - 1) * k_next {
                    return Err(AllocError::Infeasible(format!(
                        "reduction to {n_next} clusters of {k_next} violates M > (N-1)K"
                    )));
                }
                let pop: Vec<_> = current.users.iter().flatten().cloned().collect();
                current = cluster_users(
                    &pop,
                    current.m,
                    n_next,
                    k_next,
                    current.alpha,
                    current.p_total_mw,
                    current.b_total,
                );
            }
        }
    }
}

/// Equal power split across clusters (and users within them).
pub fn power_equal(scen: &ClusteredScenario) -> PowerAllocation {
    let per = scen.p_total_mw / (scen.n * scen.k) as f64;
    PowerAllocation {
        phi: vec![1.0 / scen.n as f64; scen.n],
        per_user_mw: vec![vec![per; scen.k]; scen.n],
        c_star: 1.0,
        n_active_clusters: scen.n,
    }
}

/// The joint scheme: power fixed point, then the bit allocator under the
/// resulting power grid.
pub fn joint_optimize(scen: &ClusteredScenario) -> Result<JointSolution, AllocError> {
    let (power, scenario) = power_fixed_point(scen)?;
    let bits = bits_optimize(&scenario, &power.per_user_mw);
    Ok(JointSolution {
        scenario,
        power,
        bits,
    })
}

/// High-power asymptotes of the relaxed bit allocation under equal power.
#[derive(Debug, Clone)]
pub struct AsymptoticBits {
    /// `B̃*_{n,k}`: the P-scaling approximation (grows for heads, shrinks
    /// for the others).
    pub tilde: Vec<Vec<f64>>,
    /// `B̂*_{n,1}`: the finite `P → ∞` cap for the heads; sums to B.
    pub hat_head: Vec<f64>,
}

/// Evaluate the asymptotic forms at transmit power `p_mw`.
pub fn bits_asymptotic(scen: &ClusteredScenario, p_mw: f64) -> AsymptoticBits {
    let (nf, kf, m1) = (scen.n as f64, scen.k as f64, scen.m as f64 - 1.0);
    let nk = nf * kf;
    let head_log_sum: f64 = (0..scen.n).map(|i| scen.cnr[i][0].log2()).sum();
    let stirling: f64 = (1..scen.k).map(|l| (l as f64).log2()).sum();
    let lp = (p_mw / nk).log2();
    let mut tilde = vec![vec![0.0; scen.k]; scen.n];
    for n in 0..scen.n {
        for k in 0..scen.k {
            tilde[n][k] = if k == 0 {
                scen.b_total / nk + m1 * (1.0 - 1.0 / kf) * lp + m1 * scen.cnr[n][0].log2()
                    - m1 / nk * head_log_sum
                    + m1 / kf * stirling
            } else {
                scen.b_total / nk - m1 / kf * lp - m1 / nk * head_log_sum + m1 / kf * stirling
                    - m1 * (k as f64).log2()
            };
        }
    }
    let hat_head = (0..scen.n)
        .map(|n| scen.b_total / nf + m1 * scen.cnr[n][0].log2() - m1 / nf * head_log_sum)
        .collect();
    AsymptoticBits { tilde, hat_head }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{cluster_users, UserLink};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn paper_scenario(p_dbm: f64, b: f64) -> ClusteredScenario {
        let users: Vec<UserLink> = [25.0, 35.0, 27.0, 37.0, 29.0, 39.0]
            .iter()
            .map(|&d| UserLink { distance_m: d, noise_mw: 1e-5 })
            .collect();
        cluster_users(&users, 6, 3, 2, 4.0, 10f64.powf(p_dbm / 10.0), b)
    }

    #[test]
    fn relaxed_symmetric_is_equal_split() {
        let s2: Vec<Vec<f64>> = vec![vec![0.0, 1.5]; 3];
        let s3: Vec<Vec<f64>> = vec![vec![4.0, 4.0]; 3];
        let r = bits_relaxed_nonneg(42.0, &s2, &s3, 6);
        // Symmetry only within a position; heads share one value.
        for n in 0..3 {
            assert!((r[n][0] - r[0][0]).abs() < 1e-9);
            assert!((r[n][1] - r[0][1]).abs() < 1e-9);
        }
        let sum: f64 = r.iter().flatten().sum();
        assert!((sum - 42.0).abs() < 1e-9, "budget not exhausted: {sum}");

        // Fully symmetric: exact B/(NK) each.
        let s2 = vec![vec![1.0, 1.0]; 3];
        let r = bits_relaxed_nonneg(42.0, &s2, &s3, 6);
        for v in r.iter().flatten() {
            assert!((v - 7.0).abs() < 1e-9);
        }
    }

    #[test]
    fn recurrence_matches_active_set_enumeration() {
        // Strongly asymmetric instance driving some users negative; oracle
        // enumerates every active set and checks KKT feasibility: entries
        // nonnegative on the set, and no pinned user would come out
        // positive if the set were grown (pinned users have lower
        // water-level merit).
        let s2 = vec![vec![0.0, 20.0], vec![0.0, 50.0]];
        let s3 = vec![vec![500.0, 0.3], vec![200.0, 0.05]];
        let (m, b) = (6usize, 12.0f64);
        let got = bits_relaxed_nonneg(b, &s2, &s3, m);

        let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
        for mask in 1u32..16 {
            let active: Vec<Vec<bool>> = (0..2)
                .map(|n| (0..2).map(|k| mask >> (n * 2 + k) & 1 == 1).collect())
                .collect();
            let Some(cand) = relaxed_pass(b, &s2, &s3, m, &active) else {
                continue;
            };
            if cand.iter().flatten().any(|&v| v < -1e-12) {
                continue;
            }
            let obj = bits_objective(&cand, &s2, &s3, m);
            if best.as_ref().map_or(true, |(bo, _)| obj < *bo) {
                best = Some((obj, cand));
            }
        }
        let (_, oracle) = best.unwrap();
        for n in 0..2 {
            for k in 0..2 {
                assert!(
                    (got[n][k] - oracle[n][k]).abs() < 1e-9,
                    "({n},{k}): {} vs {}",
                    got[n][k],
                    oracle[n][k]
                );
            }
        }
    }

    #[test]
    fn knapsack_equals_top_m_selection_and_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = 6;
            let cap = rng.gen_range(0..=n);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let got = unit_knapsack(&values, cap);
            // Unit weights: optimum is the top-`cap` values.
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
            let mut want: Vec<usize> = idx[..cap].to_vec();
            want.sort();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn integerization_respects_budget_and_floor_ceiling() {
        let scen = paper_scenario(20.0, 42.0);
        let powers = power_equal(&scen).per_user_mw;
        let alloc = bits_optimize(&scen, &powers);
        assert_eq!(alloc.total_used, 42);
        assert_eq!(alloc.bits.iter().flatten().sum::<u32>(), 42);
        for n in 0..3 {
            for k in 0..2 {
                let fl = alloc.relaxed[n][k].floor().max(0.0) as u32;
                assert!(alloc.bits[n][k] == fl || alloc.bits[n][k] == fl + 1);
            }
        }
    }

    #[test]
    fn proposed_objective_beats_reference() {
        // The relaxed proposed allocation minimizes the linearized
        // objective, so it can be no worse than the reference scheme's.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let users: Vec<UserLink> = (0..6)
                .map(|_| UserLink {
                    distance_m: rng.gen_range(10.0..60.0),
                    noise_mw: 1e-5,
                })
                .collect();
            let p = 10f64.powf(rng.gen_range(10.0..30.0) / 10.0);
            let scen = cluster_users(&users, 6, 3, 2, 4.0, p, 48.0);
            let powers = power_equal(&scen).per_user_mw;
            let (s2, s3) = interference_coeffs(&scen, &powers);
            let ours = bits_relaxed_nonneg(48.0, &s2, &s3, 6);
            let zeros = vec![vec![0.0; 2]; 3];
            let reference = bits_relaxed_nonneg(48.0, &zeros, &s3, 6);
            let a = bits_objective(&ours, &s2, &s3, 6);
            let b = bits_objective(&reference, &s2, &s3, 6);
            assert!(a <= b + 1e-12, "{a} > {b}");
        }
    }

    #[test]
    fn power_symmetric_is_equal_split() {
        let users = vec![UserLink { distance_m: 30.0, noise_mw: 1e-5 }; 6];
        let scen = cluster_users(&users, 6, 3, 2, 4.0, 100.0, 42.0);
        let (alloc, _) = power_fixed_point(&scen).unwrap();
        for &f in &alloc.phi {
            assert!((f - 1.0 / 3.0).abs() < 1e-12);
        }
        let c = alloc.c_star;
        assert!(c_residual(&scen, c).abs() <= 1e-9 * c);
    }

    #[test]
    fn power_ordering_and_residual_on_paper_config() {
        let scen = paper_scenario(20.0, 42.0);
        let (alloc, _) = power_fixed_point(&scen).unwrap();
        assert_eq!(alloc.n_active_clusters, 3);
        let sum: f64 = alloc.phi.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for w in alloc.phi.windows(2) {
            assert!(w[0] >= w[1] - 1e-12, "φ not nonincreasing: {:?}", alloc.phi);
        }
        assert!(c_residual(&scen, alloc.c_star).abs() <= 1e-9 * alloc.c_star);
    }

    #[test]
    fn power_limits_match_corollary() {
        // B → ∞: water-filling form.
        let scen = paper_scenario(20.0, 1e4);
        let (alloc, _) = power_fixed_point(&scen).unwrap();
        let (m, n, k, p) = (6.0, 3.0, 2.0, scen.p_total_mw);
        for i in 0..3 {
            let want =
                1.0 / n - k / (n * p) * m / (m - 1.0) * scen.head_noise_imbalance(i);
            assert!((alloc.phi[i] - want).abs() < 1e-6, "{} vs {want}", alloc.phi[i]);
        }
        // P → ∞: equal split.
        let scen = paper_scenario(70.0, 42.0);
        let (alloc, _) = power_fixed_point(&scen).unwrap();
        for &f in &alloc.phi {
            assert!((f - 1.0 / 3.0).abs() < 2e-3, "{f}");
        }
    }

    #[test]
    fn cluster_reduction_at_low_power() {
        // Extremely imbalanced heads at low power force φ_3 ≤ 0; the users
        // must be re-clustered into fewer clusters (6 = 2 x 3 works with
        // M = 6 > (2-1)·3).
        let users: Vec<UserLink> = [5.0, 80.0, 6.0, 90.0, 7.0, 100.0]
            .iter()
            .map(|&d| UserLink { distance_m: d, noise_mw: 1e-5 })
            .collect();
        let scen = cluster_users(&users, 6, 3, 2, 4.0, 1e-3, 42.0);
        let (alloc, reduced) = power_fixed_point(&scen).unwrap();
        assert!(alloc.n_active_clusters < 3);
        assert_eq!(reduced.n * reduced.k, 6);
        assert!(alloc.phi.iter().all(|&f| f > 0.0));
    }

    #[test]
    fn joint_scheme_is_deterministic_and_budget_tight() {
        let scen = paper_scenario(25.0, 60.0);
        let a = joint_optimize(&scen).unwrap();
        let b = joint_optimize(&scen).unwrap();
        assert_eq!(a.bits, b.bits);
        assert_eq!(a.power, b.power);
        assert_eq!(a.bits.total_used, 60);
        // Heads of stronger clusters get at least as many bits at this P.
        assert!(a.bits.bits[0][0] >= a.bits.bits[2][0]);
    }

    #[test]
    fn asymptotic_caps_sum_to_budget() {
        let scen = paper_scenario(30.0, 60.0);
        let asy = bits_asymptotic(&scen, scen.p_total_mw);
        let sum: f64 = asy.hat_head.iter().sum();
        assert!((sum - 60.0).abs() < 1e-9);
        // Head slope in log₂ P is (M-1)(1-1/K) = 2.5; far slope -(M-1)/K.
        let lo = bits_asymptotic(&scen, 1e3);
        let hi = bits_asymptotic(&scen, 2e3);
        let head_slope = hi.tilde[0][0] - lo.tilde[0][0];
        let far_slope = hi.tilde[0][1] - lo.tilde[0][1];
        assert!((head_slope - 2.5).abs() < 1e-9);
        assert!((far_slope + 2.5).abs() < 1e-9);
    }
}
