//! Fast-fading channel generation, random-vector-quantization feedback and
//! zero-forcing beamformers.
//!
//! Each user's channel `h` has i.i.d. `CN(0,1)` entries. The user quantizes
//! its direction `h̃ = h/‖h‖` against a fresh random codebook of `2^B`
//! isotropic unit vectors and feeds back the index; the decomposition
//!
//! ```text
//! h̃ = cosθ · ĥ + sinθ · ẽ,   ẽ ⟂ ĥ,  ‖ĥ‖ = ‖ẽ‖ = 1
//! ```
//!
//! is tracked exactly (the codeword is phase-rotated so that `cosθ` is real
//! and non-negative). The base station builds one beamformer per cluster,
//! drawn isotropically within the null space of every *other* cluster's
//! quantized directions, so that quantization error is the only source of
//! inter-cluster interference.
//!
//! For large bit budgets the exponential codebook is replaced by sampling
//! the quantization-cell statistics directly: `(‖h‖² sin²θ, ‖h‖² cos²θ)`
//! is distributed as `(δY, X + (1-δ)Y)` with `X ~ Exp(1)`,
//! `Y ~ Gamma(M-1, 1)` and `δ = 2^{-B/(M-1)}`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use thiserror::Error;

/// Complex column vector.
pub type CVec = Vec<Complex64>;

/// Codebooks above this bit count are refused; callers should switch to the
/// cell-statistics model instead.
pub const MAX_CODEBOOK_BITS: u32 = 30;

/// Orthogonality / rank tolerance used throughout the beamformer builder.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("codebook of 2^{0} entries exceeds the {MAX_CODEBOOK_BITS}-bit cap")]
    CodebookTooLarge(u32),
    #[error("constraint matrix is numerically rank deficient")]
    RankDeficient,
}

/// Hermitian inner product `⟨a, b⟩ = Σ a_j conj(b_j)`.
pub fn ip(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

/// Squared Euclidean norm.
pub fn norm_sq(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

fn scale(a: &mut [Complex64], s: f64) {
    for x in a {
        *x *= s;
    }
}

/// Draw a vector with i.i.d. `CN(0,1)` entries.
pub fn draw_cn<R: Rng>(rng: &mut R, m: usize) -> CVec {
    (0..m)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        })
        .collect()
}

/// Draw a unit vector uniformly on the complex `(M-1)`-sphere.
pub fn draw_unit<R: Rng>(rng: &mut R, m: usize) -> CVec {
    loop {
        let mut v = draw_cn(rng, m);
        let n = norm_sq(&v).sqrt();
        if n > 1e-150 {
            scale(&mut v, 1.0 / n);
            return v;
        }
    }
}

/// Draw the fast-fading channels for all `N x K` users.
pub fn draw_channels<R: Rng>(rng: &mut R, m: usize, n: usize, k: usize) -> Vec<Vec<CVec>> {
    (0..n)
        .map(|_| (0..k).map(|_| draw_cn(rng, m)).collect())
        .collect()
}

/// Outcome of quantizing one user's channel direction.
#[derive(Debug, Clone)]
pub struct QuantizedCsi {
    /// Quantized direction ĥ (unit norm, phase-aligned so cosθ is real).
    pub h_hat: CVec,
    /// Error direction ẽ (unit norm, orthogonal to ĥ).
    pub e_tilde: CVec,
    pub cos2_theta: f64,
    pub sin2_theta: f64,
}

/// Any unit vector orthogonal to `v` (used when the error direction is
/// undefined because sinθ = 0).
fn any_orthogonal<R: Rng>(rng: &mut R, v: &[Complex64]) -> CVec {
    loop {
        let mut g = draw_unit(rng, v.len());
        let c = ip(&g, v);
        for (gj, vj) in g.iter_mut().zip(v) {
            *gj -= c * vj;
        }
        let n = norm_sq(&g).sqrt();
        if n > RANK_TOL {
            scale(&mut g, 1.0 / n);
            return g;
        }
    }
}

/// Quantize the direction of `h` against a fresh random codebook of
/// `2^bits` isotropic unit vectors (streamed, never materialized).
///
/// `bits = 0` degenerates to a single random codeword.
pub fn rvq_quantize<R: Rng>(
    h: &[Complex64],
    bits: u32,
    rng: &mut R,
) -> Result<QuantizedCsi, ChannelError> {
    if bits > MAX_CODEBOOK_BITS {
        return Err(ChannelError::CodebookTooLarge(bits));
    }
    let m = h.len();
    let hn = norm_sq(h).sqrt();
    let h_dir: CVec = h.iter().map(|x| x / hn).collect();

    let mut best: Option<(f64, CVec, Complex64)> = None;
    for _ in 0..(1u64 << bits) {
        let c = draw_unit(rng, m);
        let a = ip(&h_dir, &c);
        let g = a.norm_sqr();
        if best.as_ref().map_or(true, |(bg, _, _)| g > *bg) {
            best = Some((g, c, a));
        }
    }
    let (cos2, mut h_hat, a) = best.expect("codebook has at least one entry");
    // Rotate the codeword so the decomposition coefficient cosθ is real.
    let phase = a / a.norm();
    for x in h_hat.iter_mut() {
        *x *= phase;
    }
    let cos = cos2.sqrt();
    let sin2 = (1.0 - cos2).max(0.0);
    let e_tilde = if sin2.sqrt() > RANK_TOL {
        let inv = 1.0 / sin2.sqrt();
        h_dir
            .iter()
            .zip(&h_hat)
            .map(|(hd, hh)| (hd - cos * hh) * inv)
            .collect()
    } else {
        any_orthogonal(rng, &h_hat)
    };
    Ok(QuantizedCsi {
        h_hat,
        e_tilde,
        cos2_theta: cos2,
        sin2_theta: sin2,
    })
}

/// Draw a channel together with its quantization outcome from the
/// quantization-cell statistics, bypassing the codebook.
///
/// Returns `(h, csi)`; the decomposition invariant holds by construction.
pub fn cell_model_draw<R: Rng>(m: usize, bits: f64, rng: &mut R) -> (CVec, QuantizedCsi) {
    let delta = 2f64.powf(-bits / (m as f64 - 1.0));
    let x: f64 = Exp1.sample(rng);
    let y = if m >= 2 {
        Gamma::new(m as f64 - 1.0, 1.0).unwrap().sample(rng)
    } else {
        0.0
    };
    let h_norm_sq = x + y;
    let sin2 = (delta * y / h_norm_sq).min(1.0);
    let cos2 = 1.0 - sin2;
    let h_hat = draw_unit(rng, m);
    let e_tilde = any_orthogonal(rng, &h_hat);
    let (c, s, hn) = (cos2.sqrt(), sin2.sqrt(), h_norm_sq.sqrt());
    let h = h_hat
        .iter()
        .zip(&e_tilde)
        .map(|(hh, et)| (hh * c + et * s) * hn)
        .collect();
    (
        h,
        QuantizedCsi {
            h_hat,
            e_tilde,
            cos2_theta: cos2,
            sin2_theta: sin2,
        },
    )
}

/// Perfect-CSI "quantization": the fed-back direction is exact.
pub fn perfect_csi<R: Rng>(h: &[Complex64], rng: &mut R) -> QuantizedCsi {
    let hn = norm_sq(h).sqrt();
    let h_hat: CVec = h.iter().map(|x| x / hn).collect();
    let e_tilde = any_orthogonal(rng, &h_hat);
    QuantizedCsi {
        h_hat,
        e_tilde,
        cos2_theta: 1.0,
        sin2_theta: 0.0,
    }
}

/// Orthonormalize `vs` by double-pass modified Gram–Schmidt.
///
/// Errors if the set is numerically rank deficient (residual below
/// [`RANK_TOL`] relative to the vector's norm).
fn orthonormalize(vs: &[&CVec]) -> Result<Vec<CVec>, ChannelError> {
    let mut basis: Vec<CVec> = Vec::with_capacity(vs.len());
    for v in vs {
        let mut u = (*v).clone();
        for _pass in 0..2 {
            for q in &basis {
                let c = ip(&u, q);
                for (uj, qj) in u.iter_mut().zip(q) {
                    *uj -= c * qj;
                }
            }
        }
        let n = norm_sq(&u).sqrt();
        if n < RANK_TOL * norm_sq(v).sqrt().max(1.0) {
            return Err(ChannelError::RankDeficient);
        }
        scale(&mut u, 1.0 / n);
        basis.push(u);
    }
    Ok(basis)
}

/// Build the `N` zero-forcing beamformers.
///
/// `w_n` is uniformly distributed on the unit sphere of the orthogonal
/// complement of `span{ ĥ_{i,k} : i ≠ n }`, obtained by projecting an
/// isotropic Gaussian vector onto that complement. Independence from
/// cluster `n`'s own channels is what the rate analysis relies on.
pub fn zf_beamformers<R: Rng>(
    h_hat: &[Vec<CVec>],
    rng: &mut R,
    m: usize,
) -> Result<Vec<CVec>, ChannelError> {
    let n = h_hat.len();
    let mut out = Vec::with_capacity(n);
    for c in 0..n {
        let constraints: Vec<&CVec> = h_hat
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != c)
            .flat_map(|(_, row)| row.iter())
            .collect();
        debug_assert!(constraints.len() < m, "ZF needs M > (N-1)K");
        let basis = orthonormalize(&constraints)?;
        loop {
            let mut g = draw_cn(rng, m);
            for _pass in 0..2 {
                for q in &basis {
                    let a = ip(&g, q);
                    for (gj, qj) in g.iter_mut().zip(q) {
                        *gj -= a * qj;
                    }
                }
            }
            let nn = norm_sq(&g).sqrt();
            if nn > RANK_TOL {
                scale(&mut g, 1.0 / nn);
                out.push(g);
                break;
            }
        }
    }
    Ok(out)
}

/// One complete channel realization for a scenario: fading vectors,
/// quantized feedback and beamformers, indexed `[cluster][position]`.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub h: Vec<Vec<CVec>>,
    pub h_hat: Vec<Vec<CVec>>,
    pub e_tilde: Vec<Vec<CVec>>,
    pub cos2_theta: Vec<Vec<f64>>,
    pub sin2_theta: Vec<Vec<f64>>,
    /// One beamformer per cluster.
    pub w: Vec<CVec>,
}

/// Binary trace I/O for regression tests. Layout: magic `NLFT`, version,
/// dims `(M, N, K)` as little-endian `u32`, then the arrays of
/// [`ChannelRealization`] in declaration order; complex numbers are pairs
/// of little-endian `f64` (re, im).
pub mod trace {
    use super::*;
    use std::io::{self, Read, Write};

    const MAGIC: &[u8; 4] = b"NLFT";
    const VERSION: u32 = 1;

    fn write_cvecs(w: &mut impl Write, vs: &[CVec]) -> io::Result<()> {
        for v in vs {
            for z in v {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn read_f64(r: &mut impl Read) -> io::Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn read_cvecs(r: &mut impl Read, count: usize, m: usize) -> io::Result<Vec<CVec>> {
        (0..count)
            .map(|_| {
                (0..m)
                    .map(|_| Ok(Complex64::new(read_f64(r)?, read_f64(r)?)))
                    .collect()
            })
            .collect()
    }

    pub fn write(w: &mut impl Write, r: &ChannelRealization) -> io::Result<()> {
        let (n, k) = (r.h.len(), r.h[0].len());
        let m = r.h[0][0].len();
        w.write_all(MAGIC)?;
        for dim in [VERSION, m as u32, n as u32, k as u32] {
            w.write_all(&dim.to_le_bytes())?;
        }
        for field in [&r.h, &r.h_hat, &r.e_tilde] {
            for row in field.iter() {
                write_cvecs(w, row)?;
            }
        }
        for field in [&r.cos2_theta, &r.sin2_theta] {
            for row in field.iter() {
                for &x in row {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        write_cvecs(w, &r.w)
    }

    pub fn read(rd: &mut impl Read) -> io::Result<ChannelRealization> {
        let mut hdr = [0u8; 4];
        rd.read_exact(&mut hdr)?;
        if &hdr != MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad magic"));
        }
        let mut dims = [0u32; 4];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            rd.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b);
        }
        if dims[0] != VERSION {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad version"));
        }
        let (m, n, k) = (dims[1] as usize, dims[2] as usize, dims[3] as usize);
        let mut grids = Vec::new();
        for _ in 0..3 {
            let mut g = Vec::with_capacity(n);
            for _ in 0..n {
                g.push(read_cvecs(rd, k, m)?);
            }
            grids.push(g);
        }
        let mut angles = Vec::new();
        for _ in 0..2 {
            let mut g = Vec::with_capacity(n);
            for _ in 0..n {
                g.push((0..k).map(|_| read_f64(rd)).collect::<io::Result<Vec<_>>>()?);
            }
            angles.push(g);
        }
        let w = read_cvecs(rd, n, m)?;
        let mut it = grids.into_iter();
        let (h, h_hat, e_tilde) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        let mut it = angles.into_iter();
        Ok(ChannelRealization {
            h,
            h_hat,
            e_tilde,
            cos2_theta: it.next().unwrap(),
            sin2_theta: it.next().unwrap(),
            w,
        })
    }
}
