//! Moments-accountant composition.
//!
//! A mechanism's privacy loss after `T` adaptive compositions is bounded
//! through the log-moment-generating values of a single step: with
//! `alpha(lambda) = log E[(P/Q)^lambda]` for the worst neighboring pair,
//! the accountant yields
//!
//! ```text
//! epsilon(delta) = min_lambda ( T * alpha(lambda) + log(1/delta) ) / lambda
//! ```
//!
//! over a grid of positive integer orders. For cactus densities the
//! per-order moments are exact closed-form sums (see [`crate::divergence`]);
//! Poisson subsampling at rate `q` replaces the shifted law by the mixture
//! `(1-q) P + q T_1 P`, whose moments are again cell-wise exact with
//! geometric tails folded in closed form. The Gaussian baseline gets its
//! textbook closed form `lambda (lambda + 1) / (2 sigma^2)`, and a
//! quadrature fallback when subsampled (no closed form exists there).
//!
//! The worst shift for accounting is fixed at the full sensitivity
//! `a = 1`, which is grid-aligned (`n` cells) for every cactus density;
//! by symmetry of the weights the two likelihood-ratio directions agree
//! there, and for the subsampled mixture the worse of the two directions
//! is taken per order.

use crate::density::CactusDensity;
use crate::divergence::log_mgf;
use crate::{Error, Result};
use rayon::prelude::*;

/// Per-order log-moments of one mechanism step.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentsCurve {
    /// Moment orders, always `1..=lambda_max` in order.
    pub lambdas: Vec<u32>,
    /// `alpha(lambda)` in nats, parallel to `lambdas`.
    pub alphas: Vec<f64>,
    /// The shift the moments were evaluated at (the sensitivity, 1).
    pub shift: f64,
    /// Subsampling rate baked into the curve, if any.
    pub subsampling_q: Option<f64>,
}

impl MomentsCurve {
    fn from_alphas(alphas: Vec<f64>, shift: f64, subsampling_q: Option<f64>) -> Self {
        let lambdas = (1..=alphas.len() as u32).collect();
        Self { lambdas, alphas, shift, subsampling_q }
    }
}

/// One (epsilon, delta) composition question.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositionQuery {
    /// Failure probability; `1.0` is the degenerate pure-moments case.
    pub delta: f64,
    /// Number of compositions `T`.
    pub compositions: u64,
    /// Subsampling rate; `1.0` means no subsampling.
    pub q: f64,
    /// Largest moment order the minimization may use.
    pub lambda_max: u32,
}

impl CompositionQuery {
    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        if self.compositions == 0 {
            return Err(Error::InvalidParameter(
                "number of compositions must be at least 1".into(),
            ));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "subsampling rate must lie in (0, 1], got {}",
                self.q
            )));
        }
        if self.lambda_max == 0 {
            return Err(Error::InvalidParameter(
                "lambda_max must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Composition answer: the optimal epsilon and the order that attains it.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyReport {
    pub query: CompositionQuery,
    pub epsilon: f64,
    pub argmin_lambda: u32,
    /// The moments curve the answer was computed from.
    pub curve: MomentsCurve,
}

fn validate_lambda_max(lambda_max: u32) -> Result<()> {
    if lambda_max == 0 {
        return Err(Error::InvalidParameter(
            "lambda_max must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Log-moments of the mechanism at the full unit shift, orders
/// `1..=lambda_max`.
///
/// If some order past the first fails to evaluate finitely, the curve is
/// truncated at the last finite order (shorter `lambdas` than requested);
/// an unbounded first moment makes the mechanism unaccountable and is an
/// error.
pub fn mechanism_moments(d: &CactusDensity, lambda_max: u32) -> Result<MomentsCurve> {
    validate_lambda_max(lambda_max)?;
    let evaluated: Vec<Result<f64>> = (1..=lambda_max)
        .into_par_iter()
        .map(|lam| log_mgf(d, 1.0, lam))
        .collect();
    let mut alphas = Vec::with_capacity(lambda_max as usize);
    for (i, v) in evaluated.into_iter().enumerate() {
        match v {
            Ok(a) => alphas.push(a),
            Err(e) if i == 0 => {
                return Err(Error::MomentUnbounded(format!(
                    "first log-moment does not exist; the mechanism cannot be \
                     composed by the moments accountant ({e})"
                )))
            }
            Err(_) => break,
        }
    }
    Ok(MomentsCurve::from_alphas(alphas, 1.0, None))
}

/// Log-moments of the Poisson-subsampled mechanism: the base law `P`
/// against the mixture `(1-q) P + q T_1 P`, worst of the two directions
/// per order. `q = 1` degenerates to [`mechanism_moments`].
pub fn subsampled_moments(d: &CactusDensity, q: f64, lambda_max: u32) -> Result<MomentsCurve> {
    validate_lambda_max(lambda_max)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "subsampling rate must lie in (0, 1], got {q}"
        )));
    }
    for (i, &w) in d.weights().iter().enumerate() {
        if w <= 0.0 {
            return Err(Error::InfeasibleDensity(format!(
                "weight p_{i} = {w} must be strictly positive for moment evaluation"
            )));
        }
    }
    let shape = d.shape();
    let n = shape.n() as i64;
    let core = shape.core_cells() as i64;
    let last = shape.core_cells() as usize;
    let r = shape.tail_ratio();
    let ln_r = r.ln();
    let p_edge = d.weights()[last];

    // Middle cells where the mixture ratio is not yet constant; beyond
    // them both tails have fixed ratio and sum geometrically:
    //   i >= N + n: m_i / p_i = (1-q) + q r^{-n}   (mass p_N r^n / (1-r))
    //   i <= -N:    m_i / p_i = (1-q) + q r^{ n}   (mass p_N / (1-r))
    let middles: Vec<(f64, f64)> = ((-core + 1)..(core + n))
        .map(|i| {
            let pi = d.extended_weight(i);
            let mi = (1.0 - q) * pi + q * d.extended_weight(i - n);
            (pi.ln(), mi.ln())
        })
        .collect();
    let log_add = |a: f64, b: f64| {
        let m = a.max(b);
        if m == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        m + ((a - m).exp() + (b - m).exp()).ln()
    };
    let ln_1mq = if q < 1.0 { (1.0 - q).ln() } else { f64::NEG_INFINITY };
    let ln_g_plus = log_add(ln_1mq, q.ln() - n as f64 * ln_r);
    let ln_g_minus = log_add(ln_1mq, q.ln() + n as f64 * ln_r);
    let ln_right_mass = (p_edge / (1.0 - r)).ln() + n as f64 * ln_r;
    let ln_left_mass = (p_edge / (1.0 - r)).ln();

    let alphas: Vec<f64> = (1..=lambda_max)
        .into_par_iter()
        .map(|lam| {
            let lam = lam as f64;
            let lse = |terms: &mut dyn Iterator<Item = f64>| -> f64 {
                let all: Vec<f64> = terms.collect();
                let m = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + all.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
            };
            // E over the mixture of (mixture / base)^lambda.
            let a_mix = lse(&mut middles
                .iter()
                .map(|&(lp, lm)| (lam + 1.0) * lm - lam * lp)
                .chain([
                    ln_right_mass + (lam + 1.0) * ln_g_plus,
                    ln_left_mass + (lam + 1.0) * ln_g_minus,
                ]));
            // E over the base of (base / mixture)^lambda.
            let a_base = lse(&mut middles
                .iter()
                .map(|&(lp, lm)| (lam + 1.0) * lp - lam * lm)
                .chain([
                    ln_right_mass - lam * ln_g_plus,
                    ln_left_mass - lam * ln_g_minus,
                ]));
            a_mix.max(a_base).max(0.0)
        })
        .collect();
    if let Some(bad) = alphas.iter().position(|a| !a.is_finite()) {
        if bad == 0 {
            return Err(Error::MomentUnbounded(
                "first subsampled log-moment does not evaluate finitely".into(),
            ));
        }
        let alphas = alphas[..bad].to_vec();
        return Ok(MomentsCurve::from_alphas(alphas, 1.0, Some(q)));
    }
    Ok(MomentsCurve::from_alphas(alphas, 1.0, Some(q)))
}

/// Closed-form Gaussian log-moments at sensitivity 1:
/// `alpha(lambda) = lambda (lambda + 1) / (2 sigma^2)`.
pub fn gaussian_moments(sigma: f64, lambda_max: u32) -> Result<MomentsCurve> {
    validate_lambda_max(lambda_max)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    let alphas = (1..=lambda_max)
        .map(|lam| {
            let l = lam as f64;
            l * (l + 1.0) / (2.0 * sigma * sigma)
        })
        .collect();
    Ok(MomentsCurve::from_alphas(alphas, 1.0, None))
}

/// Log-moments of the Poisson-subsampled Gaussian at sensitivity 1, by
/// log-domain composite Simpson quadrature (no closed form exists).
/// Worst of the two likelihood-ratio directions per order, matching the
/// cactus convention.
pub fn gaussian_subsampled_moments(
    sigma: f64,
    q: f64,
    lambda_max: u32,
) -> Result<MomentsCurve> {
    validate_lambda_max(lambda_max)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "subsampling rate must lie in (0, 1], got {q}"
        )));
    }
    let s2 = sigma * sigma;
    let ln_norm = -(0.5 * (2.0 * std::f64::consts::PI * s2).ln());
    let ln_1mq = if q < 1.0 { (1.0 - q).ln() } else { f64::NEG_INFINITY };
    let log_add = |a: f64, b: f64| {
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    };
    let alphas: Vec<f64> = (1..=lambda_max)
        .into_par_iter()
        .map(|lam| {
            let lamf = lam as f64;
            // The mixture-direction integrand concentrates between the two
            // component modes spread out to x ~ lambda + 1; the base
            // direction is bounded by (1-q)^-lambda and concentrates at 0.
            let lo = -1.0 - 14.0 * sigma;
            let hi = lamf + 1.0 + 14.0 * sigma;
            let steps = 1 << 15; // even count for Simpson
            let h = (hi - lo) / steps as f64;
            let ln_mix = |x: f64| log_add(ln_1mq, q.ln() + (x - 0.5) / s2);
            let log_simpson = |f: &dyn Fn(f64) -> f64| -> f64 {
                let mut vals = Vec::with_capacity(steps + 1);
                for j in 0..=steps {
                    vals.push(f(lo + j as f64 * h));
                }
                let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut acc = 0.0;
                for (j, v) in vals.iter().enumerate() {
                    let w = if j == 0 || j == steps {
                        1.0
                    } else if j % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    acc += w * (v - m).exp();
                }
                m + (acc * h / 3.0).ln()
            };
            let ln_phi = |x: f64| ln_norm - x * x / (2.0 * s2);
            let a_mix = log_simpson(&|x| ln_phi(x) + (lamf + 1.0) * ln_mix(x));
            let a_base = log_simpson(&|x| ln_phi(x) - lamf * ln_mix(x));
            a_mix.max(a_base).max(0.0)
        })
        .collect();
    Ok(MomentsCurve::from_alphas(alphas, 1.0, Some(q)))
}

/// Optimal accountant epsilon for the query:
/// `min over lambda <= lambda_max of (T alpha(lambda) + log(1/delta)) / lambda`,
/// ties broken toward the smallest order.
pub fn compose_epsilon(curve: &MomentsCurve, query: &CompositionQuery) -> Result<PrivacyReport> {
    query.validate()?;
    if (curve.lambdas.len() as u32) < query.lambda_max {
        return Err(Error::InvalidParameter(format!(
            "curve covers lambda <= {}, query needs lambda_max = {}",
            curve.lambdas.len(),
            query.lambda_max
        )));
    }
    let curve_q = curve.subsampling_q.unwrap_or(1.0);
    if (curve_q - query.q).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "query subsampling rate {} does not match the curve's {curve_q}",
            query.q
        )));
    }
    let ln_inv_delta = (1.0 / query.delta).ln();
    let t = query.compositions as f64;
    let mut best = f64::INFINITY;
    let mut arg = 1u32;
    for i in 0..query.lambda_max as usize {
        let lam = curve.lambdas[i] as f64;
        let eps = (t * curve.alphas[i] + ln_inv_delta) / lam;
        if eps < best {
            best = eps;
            arg = curve.lambdas[i];
        }
    }
    Ok(PrivacyReport {
        query: *query,
        epsilon: best,
        argmin_lambda: arg,
        curve: curve.clone(),
    })
}

/// Smallest delta for which the accountant certifies `epsilon` after
/// `compositions` steps, by bisection on the monotone epsilon(delta) map
/// to absolute tolerance 1e-12 in delta. Returns 1.0 when even the
/// degenerate delta = 1 cannot certify the requested epsilon.
pub fn compose_delta(curve: &MomentsCurve, epsilon: f64, compositions: u64) -> Result<f64> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be nonnegative and finite, got {epsilon}"
        )));
    }
    let q = curve.subsampling_q.unwrap_or(1.0);
    let eps_at = |delta: f64| -> Result<f64> {
        let query = CompositionQuery {
            delta,
            compositions,
            q,
            lambda_max: curve.lambdas.len() as u32,
        };
        Ok(compose_epsilon(curve, &query)?.epsilon)
    };
    if eps_at(1.0)? > epsilon {
        return Ok(1.0);
    }
    let mut lo = 0.0f64; // infeasible side (epsilon(delta) too big)
    let mut hi = 1.0f64; // feasible side
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if eps_at(mid)? <= epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
