//! Moment cost models and per-cell expected costs.
//!
//! A cost model is `c(x) = beta * |x|^alpha` together with a budget `C` and
//! a sensitivity `s`. Sensitivity is handled purely by rescaling: the
//! synthesis problem for sensitivity `s` equals the unit-sensitivity problem
//! with `beta` replaced by `beta * s^alpha`, so everything downstream works
//! on normalized models.
//!
//! For a cactus density the expected cost decomposes over cells. With
//! `c_{n,i}` the average of `c` over cell `i` (times the cell width this is
//! the integral of `n*c` over the cell),
//!
//! ```text
//! E[c] = p_0 c_{n,0} + 2 * sum_{i=1}^{N-1} p_i c_{n,i}
//!        + 2 p_N * sum_{i>=N} c_{n,i} r^{i-N}
//! ```
//!
//! and every piece has a closed form because `|x|^alpha` has an elementary
//! antiderivative.

use crate::density::{CactusDensity, CactusShape};
use crate::{Error, Result};
use statrs::function::gamma::gamma;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostFamily {
    /// `c(x) = x^2` (alpha = 2, beta = 1).
    Quadratic,
    /// `c(x) = beta * |x|^alpha`.
    Power,
}

/// Cost model with budget and sensitivity.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    family: CostFamily,
    alpha: f64,
    beta: f64,
    budget: f64,
    sensitivity: f64,
}

impl CostModel {
    /// Quadratic cost `E[x^2] <= budget` at the given sensitivity.
    pub fn quadratic(budget: f64, sensitivity: f64) -> Result<Self> {
        Self::validated(CostFamily::Quadratic, 2.0, 1.0, budget, sensitivity)
    }

    /// Power cost `E[beta * |x|^alpha] <= budget` at the given sensitivity.
    pub fn power(alpha: f64, beta: f64, budget: f64, sensitivity: f64) -> Result<Self> {
        Self::validated(CostFamily::Power, alpha, beta, budget, sensitivity)
    }

    fn validated(
        family: CostFamily,
        alpha: f64,
        beta: f64,
        budget: f64,
        sensitivity: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("alpha", alpha),
            ("beta", beta),
            ("budget", budget),
            ("sensitivity", sensitivity),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "cost {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(CostModel { family, alpha, beta, budget, sensitivity })
    }

    pub fn family(&self) -> CostFamily {
        self.family
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn budget(&self) -> f64 {
        self.budget
    }
    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn is_normalized(&self) -> bool {
        self.sensitivity == 1.0
    }

    /// Fold the sensitivity into the coefficient: `beta <- beta * s^alpha`,
    /// `s <- 1`. A quadratic model with `s != 1` becomes a power model
    /// because its coefficient is no longer 1.
    pub fn normalize(&self) -> CostModel {
        if self.sensitivity == 1.0 {
            return self.clone();
        }
        CostModel {
            family: CostFamily::Power,
            alpha: self.alpha,
            beta: self.beta * self.sensitivity.powf(self.alpha),
            budget: self.budget,
            sensitivity: 1.0,
        }
    }

    fn require_normalized(&self) -> Result<()> {
        if !self.is_normalized() {
            return Err(Error::InvalidParameter(format!(
                "cost model must be normalized (s=1) here, got s={}",
                self.sensitivity
            )));
        }
        Ok(())
    }
}

/// Integral of `n * c(x)` over cell `i` (`c` averaged over the cell):
/// exact closed form from the antiderivative of `|x|^alpha`.
pub fn cell_cost(m: &CostModel, shape: &CactusShape, i: u32) -> Result<f64> {
    m.require_normalized()?;
    let n = shape.n() as f64;
    Ok(cell_cost_raw(m.alpha, m.beta, n, i as f64))
}

fn cell_cost_raw(alpha: f64, beta: f64, n: f64, i: f64) -> f64 {
    if alpha == 2.0 {
        // Avoid the cancellation in the general form for large i.
        return beta * (i * i + 1.0 / 12.0) / (n * n);
    }
    let scale = beta / ((alpha + 1.0) * n.powf(alpha));
    if i == 0.0 {
        // Two symmetric halves of [-1/(2n), 1/(2n)].
        2.0 * scale * 0.5f64.powf(alpha + 1.0)
    } else {
        scale * ((i + 0.5).powf(alpha + 1.0) - (i - 0.5).powf(alpha + 1.0))
    }
}

/// `sum_{i>=N} c_{n,i} r^{i-N}`: closed form for integer alpha in 1..=4,
/// guarded truncated summation otherwise.
pub fn tail_cost_sum(m: &CostModel, shape: &CactusShape) -> Result<f64> {
    m.require_normalized()?;
    let n = shape.n() as f64;
    let big_n = shape.core_cells() as f64;
    let r = shape.tail_ratio();
    let alpha = m.alpha;
    if alpha.fract() == 0.0 && (1.0..=4.0).contains(&alpha) {
        return Ok(tail_sum_closed(alpha as u32, m.beta, n, big_n, r));
    }
    Ok(tail_sum_truncated(alpha, m.beta, n, big_n, r))
}

/// Closed form via the binomial expansion of
/// `(N+k+1/2)^{a+1} - (N+k-1/2)^{a+1}` in powers of `k` and the weighted
/// geometric sums `G_j = sum_{k>=0} k^j r^k`.
fn tail_sum_closed(alpha: u32, beta: f64, n: f64, big_n: f64, r: f64) -> f64 {
    let m = alpha + 1;
    let mut total = 0.0;
    for j in 0..=alpha {
        let e = (m - j) as i32;
        let d = (big_n + 0.5).powi(e) - (big_n - 0.5).powi(e);
        total += binomial(m, j) * d * geometric_moment(j, r);
    }
    beta / (m as f64 * n.powi(alpha as i32)) * total
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut v = 1.0;
    for i in 0..k {
        v = v * (n - i) as f64 / (i + 1) as f64;
    }
    v
}

/// `G_j = sum_{k>=0} k^j r^k` for j = 0..=4.
fn geometric_moment(j: u32, r: f64) -> f64 {
    let q = 1.0 - r;
    match j {
        0 => 1.0 / q,
        1 => r / (q * q),
        2 => r * (1.0 + r) / (q * q * q),
        3 => r * (1.0 + 4.0 * r + r * r) / (q * q * q * q),
        4 => r * (1.0 + r * (11.0 + r * (11.0 + r))) / (q * q * q * q * q),
        _ => unreachable!("geometric_moment only implemented for j <= 4"),
    }
}

/// Truncated summation with an explicit geometric-majorant remainder bound:
/// stop once the current term is below 1e-15 of the running sum *and* the
/// majorant for everything after it is below 1e-12 of the running sum.
fn tail_sum_truncated(alpha: f64, beta: f64, n: f64, big_n: f64, r: f64) -> f64 {
    let mut sum = 0.0;
    let mut i = big_n;
    loop {
        let term = cell_cost_raw(alpha, beta, n, i) * r.powf(i - big_n);
        sum += term;
        // For j >= i the term ratio is at most r * ((i+3/2)/(i-1/2))^alpha,
        // decreasing in i; once below 1 it majorizes the remainder.
        let q = r * ((i + 1.5) / (i - 0.5)).powf(alpha);
        if q < 1.0 {
            let remainder = term * q / (1.0 - q);
            if term < 1e-15 * sum && remainder <= 1e-12 * sum {
                return sum;
            }
        }
        i += 1.0;
    }
}

/// Upper bound on [`tail_cost_sum`] from the closed-form tail-cost lemma:
/// with `w = (N-1/2)/n` the edge abscissa and `l_a = max(1, 2^(alpha-1))`,
///
/// ```text
/// beta * l_a * ( w^alpha / (1-r)
///   + (2 (alpha/e)^alpha ln(1/r) + Gamma(alpha+1)) / (r n^alpha ln(1/r)^(alpha+1)) )
/// ```
///
/// Exposed as a validation oracle; the exact series must never exceed it.
pub fn tail_cost_bound(m: &CostModel, shape: &CactusShape) -> Result<f64> {
    m.require_normalized()?;
    let n = shape.n() as f64;
    let big_n = shape.core_cells() as f64;
    let r = shape.tail_ratio();
    let alpha = m.alpha;
    let w = (big_n - 0.5) / n;
    let l_a = 1.0f64.max(2.0f64.powf(alpha - 1.0));
    let log_inv_r = (1.0 / r).ln();
    let poly = 2.0 * (alpha / std::f64::consts::E).powf(alpha) * log_inv_r + gamma(alpha + 1.0);
    Ok(m.beta * l_a * (w.powf(alpha) / (1.0 - r) + poly / (r * n.powf(alpha) * log_inv_r.powf(alpha + 1.0))))
}

/// Pre-computed per-cell costs for one (model, shape) pair: `c_{n,0}` ..
/// `c_{n,N-1}` plus the geometric tail series seeded at the core edge.
#[derive(Debug, Clone)]
pub struct CellCostTable {
    shape: CactusShape,
    values: Vec<f64>,
    tail_sum: f64,
}

impl CellCostTable {
    pub fn new(m: &CostModel, shape: &CactusShape) -> Result<Self> {
        m.require_normalized()?;
        let n = shape.n() as f64;
        let values = (0..shape.core_cells())
            .map(|i| cell_cost_raw(m.alpha, m.beta, n, i as f64))
            .collect();
        let tail_sum = tail_cost_sum(m, shape)?;
        Ok(CellCostTable { shape: *shape, values, tail_sum })
    }

    pub fn shape(&self) -> &CactusShape {
        &self.shape
    }

    /// `c_{n,i}` for `i < N`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `sum_{i>=N} c_{n,i} r^{i-N}`.
    pub fn tail_sum(&self) -> f64 {
        self.tail_sum
    }
}

/// Expected cost of `d` under `m` (normalized models only).
pub fn expected_cost(d: &CactusDensity, m: &CostModel) -> Result<f64> {
    let table = CellCostTable::new(m, d.shape())?;
    expected_cost_with_table(d, &table)
}

/// Expected cost against a pre-computed table (must share the grid).
pub fn expected_cost_with_table(d: &CactusDensity, table: &CellCostTable) -> Result<f64> {
    if d.shape() != &table.shape {
        return Err(Error::ShapeMismatch(format!(
            "density grid (n={}, N={}, r={}) differs from cost table grid (n={}, N={}, r={})",
            d.shape().n(),
            d.shape().core_cells(),
            d.shape().tail_ratio(),
            table.shape.n(),
            table.shape.core_cells(),
            table.shape.tail_ratio(),
        )));
    }
    let p = d.weights();
    let last = p.len() - 1;
    let mut total = p[0] * table.values[0];
    for i in 1..last {
        total += 2.0 * p[i] * table.values[i];
    }
    Ok(total + 2.0 * p[last] * table.tail_sum)
}
