//! Closed-form divergences between a cactus density and its shifts.
//!
//! For a shift by an exact number of cells the KL divergence between the
//! density and its translate is a doubly-infinite sum over cells,
//! `B_k = sum_i p_i log(p_i / p_{i+k})` with `p_i` the extended cell
//! weights. Symmetry of the weights gives `B_k = B_{-k}`, and splitting the
//! sum at the core edges collapses the two infinite tails into closed
//! geometric forms, leaving three finite pieces:
//!
//! * core-core: cells where both `|i|` and `|i+k|` are inside the core,
//! * core-tail: cells of the core mapped into the geometric tail,
//! * tail-tail: the remaining series, summable in closed form.
//!
//! Shifts that are not cell-aligned interpolate linearly between the two
//! neighbouring aligned shifts (the KL integral is piecewise linear in the
//! shift because the densities are piecewise constant on a common grid),
//! which makes the worst shift over `|a| <= 1` attainable on the grid.
//! The same cell decomposition yields the log-moment-generating values
//! used by the composition accountant and the exact single-composition
//! hockey-stick curve.

use crate::density::CactusDensity;
use crate::{Error, Result};

/// Cell-aligned decomposition of a shift `a`: the unique cell index `k`
/// with `a + 1/(2n)` in cell `k`, and the interpolation weight
/// `frac = k - a*n` in `[0, 1]` toward the previous aligned shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftDecomposition {
    pub cell: i64,
    pub frac: f64,
}

/// Decompose a shift into (cell, interpolation weight); `a = (cell - frac)/n`.
pub fn decompose_shift(a: f64, n: u32) -> ShiftDecomposition {
    let nf = n as f64;
    let half = 0.5 / nf;
    let x = a + half;
    // Same half-open cell convention as CactusShape::index_of.
    let cell = if x > half {
        (nf * x - 0.5).ceil() as i64
    } else if x < -half {
        (nf * x + 0.5).floor() as i64
    } else {
        0
    };
    let frac = (cell as f64 - a * nf).clamp(0.0, 1.0);
    ShiftDecomposition { cell, frac }
}

fn require_positive(d: &CactusDensity) -> Result<()> {
    for (i, &w) in d.weights().iter().enumerate() {
        if w <= 0.0 {
            return Err(Error::InfeasibleDensity(format!(
                "weight p_{i} = {w} must be strictly positive for divergence evaluation"
            )));
        }
    }
    Ok(())
}

/// Natural log of the extended cell weight, safe far into the tail where
/// the linear-domain weight would underflow.
fn log_extended_weight(d: &CactusDensity, i: i64) -> f64 {
    let idx = i.unsigned_abs();
    let core = d.shape().core_cells() as u64;
    let p = d.weights();
    if idx <= core {
        p[idx as usize].ln()
    } else {
        p[core as usize].ln() + (idx - core) as f64 * d.shape().tail_ratio().ln()
    }
}

/// Symmetrized KL divergence term for a shift of `k` cells:
/// `(B_k + B_{-k})/2`, equal to either one-sided sum for these symmetric
/// densities. Requires `k <= n` so the core straddles the shift.
pub fn bk_symmetric(d: &CactusDensity, k: u32) -> Result<f64> {
    let shape = d.shape();
    if k > shape.n() {
        return Err(Error::InvalidParameter(format!(
            "cell shift k={k} exceeds the grid resolution n={}",
            shape.n()
        )));
    }
    require_positive(d)?;
    if k == 0 {
        return Ok(0.0);
    }
    let p = d.weights();
    let core = shape.core_cells() as i64;
    let last = shape.core_cells() as usize;
    let r = shape.tail_ratio();
    let k = k as i64;

    // Core-core: both cells individually weighted. Coefficient 1/2 because
    // the mirrored half of the full sum is folded in.
    let mut core_core = 0.0;
    for i in (-core + 1)..(core - k) {
        let u = p[i.unsigned_abs() as usize];
        let v = p[(i + k).unsigned_abs() as usize];
        core_core += (u - v) * (u / v).ln();
    }
    core_core *= 0.5;

    // Core-tail: cells N-k..N-1 land in the geometric tail after the shift.
    let mut core_tail = 0.0;
    for i in (core - k)..core {
        let rho = r.powi((i + k - core) as i32);
        let u = p[i as usize];
        let v = p[last] * rho;
        core_tail += (u - v) * (u / v).ln();
    }

    // Tail-tail: the remaining series in closed form.
    let tail_tail =
        p[last] * (1.0 - r.powi(k as i32)) / (1.0 - r) * k as f64 * (1.0 / r).ln();

    Ok(core_core + core_tail + tail_tail)
}

/// Worst-case KL divergence over all shift magnitudes up to one unit:
/// piecewise linearity in the shift means the supremum is attained at a
/// cell-aligned shift, so this is just the max of `B_k` over `k = 1..n`.
pub fn sup_kl(d: &CactusDensity) -> Result<f64> {
    let mut best = 0.0f64;
    for k in 1..=d.shape().n() {
        best = best.max(bk_symmetric(d, k)?);
    }
    Ok(best)
}

/// KL divergence `D(P || P shifted by a)` for any `|a| <= 1`, by linear
/// interpolation between the two neighbouring cell-aligned shifts.
pub fn kl_at_shift(d: &CactusDensity, a: f64) -> Result<f64> {
    if !a.is_finite() || a.abs() > 1.0 {
        return Err(Error::ShiftOutOfRange(format!(
            "shift a={a} outside the sensitivity interval [-1, 1]"
        )));
    }
    let dec = decompose_shift(a, d.shape().n());
    let mut v = 0.0;
    if dec.frac > 0.0 {
        v += dec.frac * bk_symmetric(d, (dec.cell - 1).unsigned_abs() as u32)?;
    }
    if dec.frac < 1.0 {
        v += (1.0 - dec.frac) * bk_symmetric(d, dec.cell.unsigned_abs() as u32)?;
    }
    Ok(v)
}

/// Log of `E_P[(P/Q)^lambda]` where `Q` is `P` shifted by `a = k/n` cells
/// (`a` must be grid-aligned). Evaluated as a log-sum-exp over cells with
/// the two geometric tails in closed form, so large `lambda * k` cannot
/// overflow. The result is the order-(lambda+1) Renyi numerator used by the
/// moments accountant.
pub fn log_mgf(d: &CactusDensity, a: f64, lambda: u32) -> Result<f64> {
    if lambda == 0 {
        return Err(Error::InvalidParameter(
            "moment order lambda must be a positive integer".into(),
        ));
    }
    let n = d.shape().n() as f64;
    let kf = a * n;
    let k = kf.round();
    if !a.is_finite() || (kf - k).abs() > 1e-9 * kf.abs().max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "shift a={a} is not grid-aligned (a*n = {kf} is not an integer)"
        )));
    }
    let k = k.abs() as i64;
    require_positive(d)?;
    if k == 0 {
        return Ok(0.0);
    }
    let core = d.shape().core_cells() as i64;
    let last = d.shape().core_cells() as usize;
    let r = d.shape().tail_ratio();
    let lam = lambda as f64;
    let ln_r = r.ln();
    let p_edge = d.weights()[last];

    let mut terms = Vec::with_capacity((2 * core + k) as usize + 2);
    for i in (-core - k + 1)..core {
        let lu = log_extended_weight(d, i);
        let lv = log_extended_weight(d, i + k);
        terms.push((lam + 1.0) * lu - lam * lv);
    }
    let ln_tail_mass = (p_edge / (1.0 - r)).ln();
    // Right tail (i >= N): the weight ratio is the constant r^{-k}.
    terms.push(ln_tail_mass - k as f64 * lam * ln_r);
    // Left tail (i <= -N-k): constant ratio r^{k}, mass shrunk by r^k.
    terms.push(ln_tail_mass + k as f64 * (lam + 1.0) * ln_r);

    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - m).exp()).sum();
    let v = m + sum.ln();
    if !v.is_finite() {
        return Err(Error::MomentUnbounded(format!(
            "log moment at order lambda={lambda}, shift {a} did not evaluate to a finite value"
        )));
    }
    // Jensen gives E[(P/Q)^lambda] >= 1; clip the few ulps of rounding.
    Ok(v.max(0.0))
}

/// Exact single-composition privacy curve `delta(eps)` for a grid-aligned
/// shift: the hockey-stick integral `sum_i (p_i - e^eps * p_{i-k})^+`
/// with the positive part of the left tail in closed form.
pub fn delta_of_epsilon_single(d: &CactusDensity, a: f64, eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be non-negative, got {eps}"
        )));
    }
    let n = d.shape().n() as f64;
    let kf = a * n;
    let kr = kf.round();
    if !a.is_finite() || (kf - kr).abs() > 1e-9 * kf.abs().max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "shift a={a} is not grid-aligned (a*n = {kf} is not an integer)"
        )));
    }
    let k = kr.abs() as i64;
    require_positive(d)?;
    if k == 0 {
        return Ok(0.0);
    }
    let core = d.shape().core_cells() as i64;
    let last = d.shape().core_cells() as usize;
    let r = d.shape().tail_ratio();
    let e_eps = eps.exp();

    // Middle cells: everything where either side is individually weighted.
    let mut total = 0.0;
    for i in (-core + 1)..(core + k) {
        let u = d.extended_weight(i);
        let v = d.extended_weight(i - k);
        let t = u - e_eps * v;
        if t > 0.0 {
            total += t;
        }
    }
    // Left tail (i <= -N): each term is p_i * (1 - e^eps r^k), one sign.
    let factor = 1.0 - (eps + k as f64 * r.ln()).exp();
    if factor > 0.0 {
        total += d.weights()[last] / (1.0 - r) * factor;
    }
    // Right tail (i >= N+k): ratio r^k < 1 <= e^eps, never positive.
    Ok(total.max(0.0))
}

/// KL divergence between a Gaussian and its shift by the sensitivity:
/// `s^2 / (2 sigma^2)`. The continuous baseline the synthesized densities
/// are compared against.
pub fn gaussian_kl(s: f64, sigma: f64) -> Result<f64> {
    for (name, v) in [("s", s), ("sigma", sigma)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    Ok(s * s / (2.0 * sigma * sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{CactusDensity, CactusShape};

    fn tiny() -> CactusDensity {
        let shape = CactusShape::new(1, 2, 0.5).unwrap();
        CactusDensity::new(shape, vec![0.4, 0.2, 0.05]).unwrap()
    }

    /// Brute-force one-sided B_k over extended indices |i| <= m, skipping
    /// underflowed tail terms (they contribute below 1e-300).
    fn bk_brute(d: &CactusDensity, k: i64, m: i64) -> f64 {
        let mut s = 0.0;
        for i in -m..=m {
            let u = d.extended_weight(i);
            let v = d.extended_weight(i + k);
            if u > 0.0 && v > 0.0 {
                s += u * (u / v).ln();
            }
        }
        s
    }

    fn random_density(seed: u64, n: u32, core: u32, r: f64) -> CactusDensity {
        let shape = CactusShape::new(n, core, r).unwrap();
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).max(1);
        let raw: Vec<f64> = (0..=core)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state as f64 / u64::MAX as f64 * 2.0 - 1.0).exp()
            })
            .collect();
        CactusDensity::from_unnormalized(shape, raw).unwrap()
    }

    #[test]
    fn bk_matches_reference_value() {
        // n=1, N=2, r=1/2, p=(0.4, 0.2, 0.05): B_1 computed independently.
        let v = bk_symmetric(&tiny(), 1).unwrap();
        assert!((v - 0.38123094930796997).abs() < 1e-13, "{v}");
    }

    #[test]
    fn bk_zero_shift_and_bounds() {
        let d = tiny();
        assert_eq!(bk_symmetric(&d, 0).unwrap(), 0.0);
        assert!(bk_symmetric(&d, 2).is_err()); // k > n
    }

    #[test]
    fn bk_rejects_zero_weights() {
        let shape = CactusShape::new(1, 2, 0.5).unwrap();
        let d = CactusDensity::new(shape, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(bk_symmetric(&d, 1), Err(Error::InfeasibleDensity(_))));
    }

    #[test]
    fn bk_matches_brute_force_on_random_densities() {
        for seed in 1..=8u64 {
            let n = 1 + (seed % 4) as u32;
            let core = n + 3 + (seed % 13) as u32;
            let r = 0.2 + 0.09 * (seed % 8) as f64;
            let d = random_density(seed, n, core, r);
            for k in 0..=n {
                let closed = bk_symmetric(&d, k).unwrap();
                let fwd = bk_brute(&d, k as i64, core as i64 + 2200);
                let bwd = bk_brute(&d, -(k as i64), core as i64 + 2200);
                assert!((closed - fwd).abs() < 1e-12, "seed {seed} k {k}: {closed} vs {fwd}");
                assert!((closed - 0.5 * (fwd + bwd)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bk_is_nonnegative() {
        for seed in 1..=20u64 {
            let d = random_density(seed, 3, 9, 0.6);
            for k in 0..=3 {
                assert!(bk_symmetric(&d, k).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn decompose_shift_edges() {
        let dec = decompose_shift(1.0, 4);
        assert_eq!((dec.cell, dec.frac), (4, 0.0));
        let dec = decompose_shift(-1.0, 4);
        assert_eq!((dec.cell, dec.frac), (-3, 1.0));
        let dec = decompose_shift(0.0, 4);
        assert_eq!((dec.cell, dec.frac), (0, 0.0));
        // Half-cell shift: a = 1/(2n).
        let dec = decompose_shift(0.125, 4);
        assert_eq!((dec.cell, dec.frac), (1, 0.5));
        // Reconstruction a = (cell - frac)/n over a sweep.
        for j in -40..=40 {
            let a = j as f64 / 40.0;
            let dec = decompose_shift(a, 4);
            assert!(((dec.cell as f64 - dec.frac) / 4.0 - a).abs() < 1e-12, "a={a}");
            assert!((0.0..=1.0).contains(&dec.frac));
        }
    }

    #[test]
    fn kl_at_shift_interpolates_between_aligned_shifts() {
        let d = random_density(3, 4, 15, 0.55);
        // Aligned shifts give exactly B_k, both signs.
        for k in 0..=4u32 {
            let b = bk_symmetric(&d, k).unwrap();
            let a = k as f64 / 4.0;
            assert!((kl_at_shift(&d, a).unwrap() - b).abs() < 1e-13);
            assert!((kl_at_shift(&d, -a).unwrap() - b).abs() < 1e-13);
        }
        // Random shifts against brute-force B values.
        let mut state = 0xabcdef12345u64;
        for _ in 0..100 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let a = state as f64 / u64::MAX as f64 * 2.0 - 1.0;
            let dec = decompose_shift(a, 4);
            let expect = dec.frac * bk_brute(&d, dec.cell - 1, 2000)
                + (1.0 - dec.frac) * bk_brute(&d, dec.cell, 2000);
            let got = kl_at_shift(&d, a).unwrap();
            assert!((got - expect).abs() < 1e-9, "a={a}: {got} vs {expect}");
        }
    }

    #[test]
    fn kl_at_shift_rejects_out_of_range() {
        let d = tiny();
        assert!(matches!(kl_at_shift(&d, 1.2), Err(Error::ShiftOutOfRange(_))));
        assert!(matches!(kl_at_shift(&d, -1.0001), Err(Error::ShiftOutOfRange(_))));
        assert!(kl_at_shift(&d, 1.0).is_ok());
    }

    #[test]
    fn sup_kl_dominates_every_aligned_shift() {
        let d = random_density(11, 5, 17, 0.7);
        let sup = sup_kl(&d).unwrap();
        for k in 1..=5 {
            assert!(sup >= bk_symmetric(&d, k).unwrap());
        }
    }

    fn log_mgf_brute(d: &CactusDensity, k: i64, lam: f64, m: i64) -> f64 {
        let mut s = 0.0;
        for i in -m..=m {
            let u = d.extended_weight(i);
            let v = d.extended_weight(i + k);
            if u > 0.0 && v > 0.0 {
                s += u * (u / v).powf(lam);
            }
        }
        s.ln()
    }

    #[test]
    fn log_mgf_matches_brute_force() {
        let d = tiny();
        for lam in [1u32, 2, 3, 5, 8] {
            let got = log_mgf(&d, 1.0, lam).unwrap();
            let want = log_mgf_brute(&d, 1, lam as f64, 300);
            assert!((got - want).abs() < 1e-12, "lam={lam}: {got} vs {want}");
        }
        for seed in 1..=6u64 {
            let d = random_density(seed, 3, 10, 0.5);
            for k in 1..=3i64 {
                let got = log_mgf(&d, k as f64 / 3.0, 4).unwrap();
                let want = log_mgf_brute(&d, k, 4.0, 400);
                assert!((got - want).abs() < 1e-11, "seed={seed} k={k}");
            }
        }
    }

    #[test]
    fn log_mgf_zero_shift_and_validation() {
        let d = tiny();
        for lam in [1, 2, 7, 32] {
            assert_eq!(log_mgf(&d, 0.0, lam).unwrap(), 0.0);
        }
        assert!(log_mgf(&d, 0.37, 2).is_err()); // not grid-aligned
        assert!(log_mgf(&d, 1.0, 0).is_err());
    }

    #[test]
    fn log_mgf_handles_large_orders_without_overflow() {
        // k * lambda * ln(1/r) is hundreds of nats here; the log-sum-exp
        // must stay finite and the value keeps growing with lambda.
        let d = random_density(5, 6, 24, 0.35);
        let mut prev = 0.0;
        for lam in [1u32, 4, 16, 64, 256] {
            let v = log_mgf(&d, 1.0, lam).unwrap();
            assert!(v.is_finite() && v > prev);
            prev = v;
        }
    }

    #[test]
    fn log_mgf_direction_symmetric_at_unit_shift() {
        // E_P[(P/Q)^lam] with Q the right shift equals the same moment with
        // the left shift, by evenness of the weights.
        for seed in 1..=5u64 {
            let d = random_density(seed, 4, 13, 0.45);
            for lam in [1u32, 3, 9] {
                let fwd = log_mgf(&d, 1.0, lam).unwrap();
                let mut s = 0.0;
                for i in -500..=500i64 {
                    let u = d.extended_weight(i);
                    let v = d.extended_weight(i - 4); // opposite direction
                    if u > 0.0 && v > 0.0 {
                        s += u * (u / v).powf(lam as f64);
                    }
                }
                assert!((fwd - s.ln()).abs() < 1e-10, "seed={seed} lam={lam}");
            }
        }
    }

    #[test]
    fn renyi_order_monotonicity() {
        let d = random_density(9, 4, 16, 0.6);
        let mut prev = f64::NEG_INFINITY;
        for lam in 1..=24u32 {
            let v = log_mgf(&d, 1.0, lam).unwrap() / lam as f64;
            assert!(v >= prev - 1e-12, "order {lam}");
            prev = v;
        }
    }

    fn tv_brute(d: &CactusDensity, k: i64, m: i64) -> f64 {
        let mut s = 0.0;
        for i in -m..=m {
            s += (d.extended_weight(i) - d.extended_weight(i - k)).abs();
        }
        0.5 * s
    }

    #[test]
    fn delta_at_zero_eps_is_total_variation() {
        for seed in 1..=6u64 {
            let d = random_density(seed, 3, 11, 0.5);
            for k in 1..=3i64 {
                let got = delta_of_epsilon_single(&d, k as f64 / 3.0, 0.0).unwrap();
                let want = tv_brute(&d, k, 1500);
                assert!((got - want).abs() < 1e-12, "seed={seed} k={k}");
            }
        }
    }

    #[test]
    fn delta_is_monotone_and_vanishes_for_large_eps() {
        let d = random_density(4, 4, 14, 0.55);
        let mut prev = f64::INFINITY;
        for j in 0..=50 {
            let eps = j as f64 * 0.2;
            let v = delta_of_epsilon_single(&d, 1.0, eps).unwrap();
            assert!(v <= prev + 1e-15);
            assert!((0.0..=1.0).contains(&v));
            prev = v;
        }
        // Once e^eps dominates every density ratio, delta is exactly 0.
        let max_ratio: f64 = (-60..60i64)
            .map(|i| d.extended_weight(i) / d.extended_weight(i - 4))
            .fold(0.0, f64::max);
        let v = delta_of_epsilon_single(&d, 1.0, max_ratio.ln() + 0.01).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn delta_validation() {
        let d = tiny();
        assert!(delta_of_epsilon_single(&d, 1.0, -0.1).is_err());
        assert!(delta_of_epsilon_single(&d, 0.4, 0.1).is_err()); // off-grid shift
    }

    #[test]
    fn gaussian_kl_closed_form() {
        assert_eq!(gaussian_kl(1.0, 0.5).unwrap(), 2.0);
        assert_eq!(gaussian_kl(2.0, 1.0).unwrap(), 2.0);
        assert!((gaussian_kl(1.0, 0.316227766016838).unwrap() - 5.0).abs() < 1e-12);
        assert!(gaussian_kl(0.0, 1.0).is_err());
        assert!(gaussian_kl(1.0, 0.0).is_err());
    }
}
