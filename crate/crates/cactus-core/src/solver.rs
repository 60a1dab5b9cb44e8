//! Convex minimax synthesis of cactus weights.
//!
//! The synthesis problem is: over weight vectors `p = (p_0, ..., p_N)`,
//! minimize the worst KL divergence across cell shifts,
//! `max_{k=1..n} F_k(p)`, subject to the normalization equality
//! `sum_i w_i p_i = 1`, the budget inequality `sum_i d_i p_i <= C`, and
//! `p >= floor > 0`, where `w` and `d` fold the mirrored core cells and the
//! closed-form geometric tails into per-coordinate coefficients. Every
//! `F_k` is jointly convex in `p` (each term is of the form
//! `(u - v) log(u/v)`), so this is a convex program with linear
//! constraints.
//!
//! The solver is a smoothed-max first-order method:
//!
//! 1. warm start from a budget-matched Gaussian profile,
//! 2. for a decreasing temperature schedule, minimize the log-sum-exp
//!    softmax of the `F_k` by projected descent with a backtracking line
//!    search, projecting in the variable metric `diag(w_i / p_i)` (the
//!    metric that makes pure normalization violations project to exact
//!    rescalings and keeps the many orders of magnitude between core and
//!    tail weights well conditioned),
//! 3. finish with subgradient polish steps on the exact max,
//!
//! always tracking the best iterate under the exact objective, so the
//! reported value never regresses. The returned certificate is the full
//! per-shift value vector at the solution.

use crate::cost::{CellCostTable, CostModel};
use crate::density::{CactusDensity, CactusShape};
use crate::{Error, Result};
use rayon::prelude::*;

/// A synthesis instance: the density family and a normalized cost model.
///
/// Construction folds the cost model to sensitivity 1 and precomputes the
/// linear coefficient rows of the two constraints.
#[derive(Debug, Clone)]
pub struct SynthesisProblem {
    shape: CactusShape,
    cost: CostModel,
    /// Normalization row: `w = (1, 2, ..., 2, 2/(1-r))`.
    norm_coeff: Vec<f64>,
    /// Budget row: per-coordinate expected-cost coefficients, tails folded.
    cost_coeff: Vec<f64>,
}

impl SynthesisProblem {
    /// Build a problem from a shape and cost model. The model is
    /// normalized to sensitivity 1; the budget must exceed the origin cell
    /// cost `c_{n,0}`, the cheapest any normalized density can be.
    pub fn new(shape: CactusShape, cost: CostModel) -> Result<Self> {
        let cost = cost.normalize();
        let table = CellCostTable::new(&cost, &shape)?;
        let c0 = table.values()[0];
        if !(c0 < cost.budget()) {
            return Err(Error::InfeasibleBudget(format!(
                "budget C = {} does not exceed the origin cell cost c_(n,0) = {c0}; \
                 even a density with all mass in the central cell costs more than C",
                cost.budget()
            )));
        }
        let core = shape.core_cells() as usize;
        let r = shape.tail_ratio();
        let mut norm_coeff = vec![2.0; core + 1];
        norm_coeff[0] = 1.0;
        norm_coeff[core] = 2.0 / (1.0 - r);
        let mut cost_coeff = Vec::with_capacity(core + 1);
        cost_coeff.push(table.values()[0]);
        for i in 1..core {
            cost_coeff.push(2.0 * table.values()[i]);
        }
        cost_coeff.push(2.0 * table.tail_sum());
        Ok(Self { shape, cost, norm_coeff, cost_coeff })
    }

    pub fn shape(&self) -> &CactusShape {
        &self.shape
    }

    /// The normalized (sensitivity-1) cost model.
    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    /// Coefficients of the normalization equality `w . p = 1`.
    pub fn normalization_coefficients(&self) -> &[f64] {
        &self.norm_coeff
    }

    /// Coefficients of the budget inequality `d . p <= C`.
    pub fn cost_coefficients(&self) -> &[f64] {
        &self.cost_coeff
    }
}

/// Tuning knobs for [`synthesize`]. The defaults reproduce the published
/// figure-scale instances in well under their time budgets.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Total accepted-step budget across all smoothing stages and polish.
    pub max_iterations: usize,
    /// Relative objective-change tolerance for the stage stopping rule.
    pub tolerance: f64,
    /// Hard minimum weight; the working floor is `max(floor, 1e-12 * p_0)`.
    pub floor: f64,
    /// Strictly decreasing softmax temperatures, in nats.
    pub smoothing_schedule: Vec<f64>,
    /// Warm-start Gaussian width; `None` uses `sqrt(C)`.
    pub seed_sigma: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 6000,
            tolerance: 1e-6,
            floor: 1e-300,
            smoothing_schedule: vec![0.1, 0.03, 0.01, 3e-3, 1e-3, 3e-4, 1e-4],
            seed_sigma: None,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "solver tolerance must be positive and finite, got {}",
                self.tolerance
            )));
        }
        if !(self.floor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "weight floor must be strictly positive, got {}",
                self.floor
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter(
                "max_iterations must be at least 1".into(),
            ));
        }
        if self.smoothing_schedule.is_empty() {
            return Err(Error::InvalidParameter(
                "smoothing schedule must contain at least one temperature".into(),
            ));
        }
        for pair in self.smoothing_schedule.windows(2) {
            if !(pair[1] < pair[0]) {
                return Err(Error::InvalidParameter(format!(
                    "smoothing schedule must be strictly decreasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if self.smoothing_schedule.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::InvalidParameter(
                "smoothing temperatures must be positive and finite".into(),
            ));
        }
        if let Some(s) = self.seed_sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "seed_sigma must be positive and finite, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of a synthesis run.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    /// The synthesized density (best iterate under the exact objective).
    pub density: CactusDensity,
    /// `max_k F_k` at the solution, in nats.
    pub achieved_kl: f64,
    /// Expected cost of the solution under the normalized model.
    pub achieved_cost: f64,
    /// Accepted iterations consumed (all stages plus polish).
    pub iterations: usize,
    /// Per-shift objective values `F_1..F_n` at the solution.
    pub certificate: Vec<f64>,
    /// Whether the final smoothing stage reached its stopping rule before
    /// exhausting the iteration budget.
    pub converged: bool,
    /// Coordinates of the solution sitting on the weight floor.
    pub floor_hits: usize,
    /// Norm of the projected smoothed-gradient displacement at the
    /// solution (diagnostic, not an optimality guarantee).
    pub kkt_residual: f64,
    /// Best exact objective value recorded after each smoothing stage.
    pub stage_objectives: Vec<f64>,
    /// Non-fatal advisories (e.g. parameter-regime warnings).
    pub warnings: Vec<String>,
}

/// Evaluate every per-shift objective value `F_k(p)`, `k = 1..n`.
///
/// Each `F_k` splits into a core-core sum, a core-tail sum and a
/// closed-form tail-tail series; `ln_p` must hold the logs of `p`.
fn objective_terms(prob: &SynthesisProblem, p: &[f64], ln_p: &[f64]) -> Vec<f64> {
    let n = prob.shape.n() as i64;
    let core = prob.shape.core_cells() as i64;
    let r = prob.shape.tail_ratio();
    let ln_r = r.ln();
    let last = core as usize;
    (1..=n)
        .into_par_iter()
        .map(|k| {
            let mut core_core = 0.0;
            for i in (-core + 1)..(core - k) {
                let a = i.unsigned_abs() as usize;
                let b = (i + k).unsigned_abs() as usize;
                core_core += (p[a] - p[b]) * (ln_p[a] - ln_p[b]);
            }
            let mut core_tail = 0.0;
            for i in (core - k)..core {
                let j = (i + k - core) as i32;
                let v = p[last] * r.powi(j);
                let lv = ln_p[last] + j as f64 * ln_r;
                core_tail += (p[i as usize] - v) * (ln_p[i as usize] - lv);
            }
            let tail_tail =
                p[last] * (1.0 - r.powi(k as i32)) / (1.0 - r) * k as f64 * (-ln_r);
            0.5 * core_core + core_tail + tail_tail
        })
        .collect()
}

/// Gradient of a single `F_k` with respect to `p`, dense length `N + 1`.
fn term_gradient(prob: &SynthesisProblem, p: &[f64], ln_p: &[f64], k: i64) -> Vec<f64> {
    let core = prob.shape.core_cells() as i64;
    let r = prob.shape.tail_ratio();
    let ln_r = r.ln();
    let last = core as usize;
    let mut g = vec![0.0; last + 1];
    // d/du (u-v)log(u/v) = log(u/v) + 1 - v/u;  d/dv = -log(u/v) + 1 - u/v.
    for i in (-core + 1)..(core - k) {
        let a = i.unsigned_abs() as usize;
        let b = (i + k).unsigned_abs() as usize;
        let u = p[a];
        let v = p[b];
        let l = ln_p[a] - ln_p[b];
        g[a] += 0.5 * (l + 1.0 - v / u);
        g[b] += 0.5 * (-l + 1.0 - u / v);
    }
    for i in (core - k)..core {
        let j = (i + k - core) as i32;
        let rho = r.powi(j);
        let u = p[i as usize];
        let v = p[last] * rho;
        let l = ln_p[i as usize] - (ln_p[last] + j as f64 * ln_r);
        g[i as usize] += l + 1.0 - v / u;
        g[last] += rho * (-l + 1.0 - u / v);
    }
    g[last] += (1.0 - r.powi(k as i32)) / (1.0 - r) * k as f64 * (-ln_r);
    g
}

fn ln_of(p: &[f64]) -> Vec<f64> {
    p.iter().map(|&x| x.ln()).collect()
}

/// Exact objective value and one subgradient at `p`.
///
/// The value is `max_k F_k(p)`; the subgradient is the gradient of the
/// smallest shift index attaining the max (a deterministic tie-break).
pub fn objective_and_subgradient(
    prob: &SynthesisProblem,
    p: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let expected = prob.shape.core_cells() as usize + 1;
    if p.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "weight vector has length {}, problem expects {expected}",
            p.len()
        )));
    }
    for (i, &x) in p.iter().enumerate() {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::InfeasibleDensity(format!(
                "objective requires strictly positive weights; p_{i} = {x}"
            )));
        }
    }
    let ln_p = ln_of(p);
    let terms = objective_terms(prob, p, &ln_p);
    let (mut k_act, mut best) = (0usize, f64::NEG_INFINITY);
    for (idx, &v) in terms.iter().enumerate() {
        if v > best {
            best = v;
            k_act = idx;
        }
    }
    let g = term_gradient(prob, p, &ln_p, k_act as i64 + 1);
    Ok((best, g))
}

/// Projection in the variable metric `diag(w_i / rho_i)` onto the set
/// `{ w.p = 1, d.p <= C, p >= floor }`.
///
/// Stationarity gives `p_i = max(floor, q_i - A rho_i - B rho_i d_i/w_i)`
/// with `B >= 0` zero unless the budget binds. `A` is found by a
/// descending scan over the clamp breakpoints (the normalization residual
/// is piecewise linear in `A`); when the budget binds, `B` is bracketed
/// and bisected, then the pair is re-solved exactly on the settled active
/// set.
fn project_metric(
    prob: &SynthesisProblem,
    q: &[f64],
    floor: f64,
    rho: &[f64],
) -> Result<Vec<f64>> {
    let w = &prob.norm_coeff;
    let d = &prob.cost_coeff;
    let budget = prob.cost.budget();
    let m = q.len();
    let rho: Vec<f64> = rho.iter().map(|&x| x.max(floor).max(1e-300)).collect();

    let floor_norm: f64 = w.iter().map(|wi| wi * floor).sum();
    let floor_cost: f64 = d.iter().map(|di| di * floor).sum();
    if floor_norm > 1.0 || floor_cost > budget {
        return Err(Error::InfeasibleBudget(format!(
            "weight floor {floor} alone exceeds the constraints \
             (floor normalization {floor_norm}, floor cost {floor_cost})"
        )));
    }

    // Solve w.p(A) = 1 for fixed B, where q_eff_i = q_i - B rho_i d_i/w_i.
    // Returns the clamped vector. Descending scan: above the largest
    // breakpoint everything is floored; walking down, coordinates unclamp
    // one by one and the residual is linear on each segment.
    let solve_a = |q_eff: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..m).collect();
        let bp = |i: usize| (q_eff[i] - floor) / rho[i];
        order.sort_by(|&a, &b| bp(b).partial_cmp(&bp(a)).unwrap_or(std::cmp::Ordering::Equal));
        // All clamped: norm = floor_norm (< 1). Unclamp in breakpoint order.
        let mut s_wq = 0.0; // sum over free coords of w_i q_eff_i
        let mut s_wr = 0.0; // sum over free coords of w_i rho_i
        let mut s_wf = floor_norm; // floor mass of still-clamped coords
        let mut a_star = f64::NEG_INFINITY;
        let mut found = false;
        for (pos, &i) in order.iter().enumerate() {
            s_wq += w[i] * q_eff[i];
            s_wr += w[i] * rho[i];
            s_wf -= w[i] * floor;
            // On this segment A ranges down from bp(i) to the next
            // breakpoint; residual(A) = s_wf + s_wq - A*s_wr = 1.
            let a = (s_wf + s_wq - 1.0) / s_wr;
            let lo = if pos + 1 < m { bp(order[pos + 1]) } else { f64::NEG_INFINITY };
            if a <= bp(i) && a >= lo {
                a_star = a;
                found = true;
                break;
            }
        }
        if !found {
            // Numerical fallthrough (ties at breakpoints): fully free solve.
            a_star = (s_wq + 0.0 - 1.0) / s_wr;
        }
        (0..m)
            .map(|i| (q_eff[i] - a_star * rho[i]).max(floor))
            .collect()
    };

    let p0 = solve_a(q);
    let cost0: f64 = d.iter().zip(&p0).map(|(di, pi)| di * pi).sum();
    if cost0 <= budget {
        return Ok(p0);
    }

    // Budget binds: bisect B on the (decreasing) cost of the A-solved point.
    let q_eff = |b: f64| -> Vec<f64> {
        (0..m).map(|i| q[i] - b * rho[i] * d[i] / w[i]).collect()
    };
    let cost_at = |b: f64| -> (Vec<f64>, f64) {
        let p = solve_a(&q_eff(b));
        let c = d.iter().zip(&p).map(|(di, pi)| di * pi).sum();
        (p, c)
    };
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut p_hi;
    loop {
        let (p, c) = cost_at(hi);
        p_hi = p;
        if c <= budget {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > 1e30 {
            return Err(Error::InfeasibleBudget(
                "projection could not reach the budget; the feasible set is empty \
                 or numerically degenerate"
                    .into(),
            ));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let (p, c) = cost_at(mid);
        if c <= budget {
            hi = mid;
            p_hi = p;
        } else {
            lo = mid;
        }
    }

    // Exact polish: fix the active set implied by the bisection point and
    // solve the 2x2 system for (A, B) with both constraints tight.
    let free: Vec<usize> = (0..m).filter(|&i| p_hi[i] > floor).collect();
    if !free.is_empty() {
        let (mut sww, mut swd, mut sdd) = (0.0, 0.0, 0.0);
        let (mut rhs_w, mut rhs_d) = (1.0, budget);
        for i in 0..m {
            if p_hi[i] > floor {
                sww += w[i] * rho[i];
                swd += d[i] * rho[i];
                sdd += d[i] * d[i] * rho[i] / w[i];
                rhs_w -= 0.0;
                rhs_d -= 0.0;
            } else {
                rhs_w -= w[i] * floor;
                rhs_d -= d[i] * floor;
            }
        }
        let (mut bw, mut bd) = (0.0, 0.0);
        for &i in &free {
            bw += w[i] * q[i];
            bd += d[i] * q[i];
        }
        let det = sww * sdd - swd * swd;
        if det.abs() > 1e-30 * sww.max(sdd).max(1.0) {
            let a = ((bw - rhs_w) * sdd - (bd - rhs_d) * swd) / det;
            let b = (sww * (bd - rhs_d) - swd * (bw - rhs_w)) / det;
            if b >= 0.0 {
                let cand: Vec<f64> = (0..m)
                    .map(|i| (q[i] - a * rho[i] - b * rho[i] * d[i] / w[i]).max(floor))
                    .collect();
                let norm: f64 = w.iter().zip(&cand).map(|(wi, pi)| wi * pi).sum();
                let cost: f64 = d.iter().zip(&cand).map(|(di, pi)| di * pi).sum();
                if (norm - 1.0).abs() <= 1e-12 && cost <= budget + 1e-12 * budget.max(1.0) {
                    return Ok(cand);
                }
            }
        }
    }
    Ok(p_hi)
}

/// Project a nonnegative weight vector onto the feasible set of `prob`
/// (normalization exactly 1, cost within budget, weights at least a tiny
/// positive floor), in the variable metric induced by the normalization
/// coefficients at the input point. Pure scale violations project to exact
/// rescalings; feasible inputs are returned unchanged.
pub fn feasibility_project(p: &[f64], prob: &SynthesisProblem) -> Result<Vec<f64>> {
    let expected = prob.shape.core_cells() as usize + 1;
    if p.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "weight vector has length {}, problem expects {expected}",
            p.len()
        )));
    }
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InfeasibleDensity(
            "projection input must be nonnegative and finite".into(),
        ));
    }
    project_metric(prob, p, 1e-300, p)
}

fn log_sum_exp_scaled(values: &[f64], tau: f64) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.iter().map(|v| ((v - m) / tau).exp()).sum();
    m + tau * s.ln()
}

/// Synthesize the minimax-optimal cactus weights for `prob`.
pub fn synthesize(prob: &SynthesisProblem, opts: &SolverOptions) -> Result<SynthesisResult> {
    opts.validate()?;
    let shape = *prob.shape();
    let core = shape.core_cells() as usize;
    let budget = prob.cost.budget();

    let mut warnings = Vec::new();
    let theta = (1.0 - shape.tail_ratio()) * shape.core_cells() as f64;
    if !(0.1..=1e3).contains(&theta) {
        warnings.push(format!(
            "decay parameter (1 - r) * N = {theta:.3e} is far outside [1e-1, 1e3]; \
             tail ratios near 1 - c/N for moderate c are the regime with \
             near-optimality guidance"
        ));
    }

    let sigma = opts.seed_sigma.unwrap_or_else(|| budget.sqrt());
    let init = CactusDensity::gaussian_init(shape, sigma)?;
    let mut p = init.weights().to_vec();
    // Working floor: keep logs finite at ~1e-12 of the center weight, but
    // never so high that the all-floor point violates a constraint (the
    // folded tail coefficients can be enormous when r is close to 1).
    let floor_cap = {
        let sum_d: f64 = prob.cost_coeff.iter().sum();
        let sum_w: f64 = prob.norm_coeff.iter().sum();
        (0.5 * budget / sum_d).min(0.5 / sum_w)
    };
    let eff_floor = |p0: f64| opts.floor.max((1e-12 * p0).min(floor_cap));
    p = project_metric(prob, &p.clone(), eff_floor(p[0]), &p)?;

    let stages = opts.smoothing_schedule.len();
    let stage_budget = (opts.max_iterations / (stages + 1)).max(1);
    let mut iterations = 0usize;
    let mut best_p = p.clone();
    let mut best_v = f64::INFINITY;
    let mut stage_objectives = Vec::with_capacity(stages);
    let mut converged = false;

    for (si, &tau) in opts.smoothing_schedule.iter().enumerate() {
        let is_last = si + 1 == stages;
        let mut eta = 0.1f64;
        let mut last_lse: Option<f64> = None;
        let mut stall = 0usize;
        let mut stage_iter = 0usize;
        while stage_iter < stage_budget && iterations < opts.max_iterations {
            let ln_p = ln_of(&p);
            let terms = objective_terms(prob, &p, &ln_p);
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m < best_v {
                best_v = m;
                best_p.copy_from_slice(&p);
            }
            let lse = log_sum_exp_scaled(&terms, tau);
            // Softmax-weighted gradient; per-k gradients are combined in
            // ascending k order so the sum is deterministic.
            let weights: Vec<f64> = {
                let s: f64 = terms.iter().map(|v| ((v - m) / tau).exp()).sum();
                terms.iter().map(|v| ((v - m) / tau).exp() / s).collect()
            };
            let grads: Vec<Vec<f64>> = (1..=prob.shape.n() as i64)
                .into_par_iter()
                .map(|k| term_gradient(prob, &p, &ln_p, k))
                .collect();
            let mut g = vec![0.0; core + 1];
            for (wk, gk) in weights.iter().zip(&grads) {
                for (gi, gki) in g.iter_mut().zip(gk) {
                    *gi += wk * gki;
                }
            }
            // Step along -g, preconditioned by p/w, then project in the
            // same metric so the update is a true scaled projected step.
            let step: Vec<f64> = (0..=core).map(|i| g[i] * p[i] / prob.norm_coeff[i]).collect();
            let fl = eff_floor(p[0]);
            let mut accepted = false;
            let mut e = eta;
            for _ in 0..40 {
                let moved: Vec<f64> = (0..=core).map(|i| p[i] - e * step[i]).collect();
                let cand = project_metric(prob, &moved, fl, &p)?;
                let ln_c = ln_of(&cand);
                let cand_terms = objective_terms(prob, &cand, &ln_c);
                if log_sum_exp_scaled(&cand_terms, tau) < lse - 1e-15 {
                    p = cand;
                    eta = (e * 1.5).min(1e6);
                    accepted = true;
                    break;
                }
                e *= 0.5;
            }
            if !accepted {
                // Line search exhausted: smoothed-stationary at this
                // temperature.
                if is_last {
                    converged = true;
                }
                break;
            }
            iterations += 1;
            stage_iter += 1;
            if let Some(prev) = last_lse {
                if (prev - lse).abs() < opts.tolerance * lse.abs().max(1.0) {
                    stall += 1;
                    if stall >= 20 {
                        if is_last {
                            converged = true;
                        }
                        break;
                    }
                } else {
                    stall = 0;
                }
            }
            last_lse = Some(lse);
        }
        stage_objectives.push(best_v);
    }

    // Exact-max subgradient polish from the best iterate found so far.
    p.copy_from_slice(&best_p);
    let polish_budget = opts.max_iterations.saturating_sub(iterations).clamp(1, 500);
    let eta0 = 1e-3f64;
    for t in 0..polish_budget {
        let ln_p = ln_of(&p);
        let terms = objective_terms(prob, &p, &ln_p);
        let (mut k_act, mut m) = (0usize, f64::NEG_INFINITY);
        for (idx, &v) in terms.iter().enumerate() {
            if v > m {
                m = v;
                k_act = idx;
            }
        }
        if m < best_v {
            best_v = m;
            best_p.copy_from_slice(&p);
        }
        let g = term_gradient(prob, &p, &ln_p, k_act as i64 + 1);
        let scale = eta0 / (1.0 + t as f64).sqrt();
        let moved: Vec<f64> = (0..=core)
            .map(|i| p[i] - scale * g[i] * p[i] / prob.norm_coeff[i])
            .collect();
        let fl = eff_floor(p[0]);
        p = project_metric(prob, &moved, fl, &p)?;
        iterations += 1;
        if iterations >= opts.max_iterations {
            break;
        }
    }
    {
        let ln_p = ln_of(&p);
        let terms = objective_terms(prob, &p, &ln_p);
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m < best_v {
            best_p.copy_from_slice(&p);
        }
    }

    // KKT-style diagnostic: displacement of a small projected smoothed-
    // gradient step at the solution, per unit step.
    let kkt_residual = {
        let tau = *opts.smoothing_schedule.last().expect("validated non-empty");
        let ln_p = ln_of(&best_p);
        let terms = objective_terms(prob, &best_p, &ln_p);
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = terms.iter().map(|v| ((v - m) / tau).exp()).sum();
        let weights: Vec<f64> = terms.iter().map(|v| ((v - m) / tau).exp() / s).collect();
        let grads: Vec<Vec<f64>> = (1..=prob.shape.n() as i64)
            .into_par_iter()
            .map(|k| term_gradient(prob, &best_p, &ln_p, k))
            .collect();
        let mut g = vec![0.0; core + 1];
        for (wk, gk) in weights.iter().zip(&grads) {
            for (gi, gki) in g.iter_mut().zip(gk) {
                *gi += wk * gki;
            }
        }
        let probe = 1e-7;
        let moved: Vec<f64> = (0..=core)
            .map(|i| best_p[i] - probe * g[i] * best_p[i] / prob.norm_coeff[i])
            .collect();
        let proj = project_metric(prob, &moved, eff_floor(best_p[0]), &best_p)?;
        proj.iter()
            .zip(&best_p)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
            / probe
    };

    let fl = eff_floor(best_p[0]);
    let floor_hits = best_p.iter().filter(|&&x| x <= fl * (1.0 + 1e-9)).count();
    let density = CactusDensity::from_unnormalized(shape, best_p)?;
    let ln_p = ln_of(density.weights());
    let certificate = objective_terms(prob, density.weights(), &ln_p);
    let achieved_kl = certificate.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let achieved_cost = crate::cost::expected_cost(&density, &prob.cost)?;

    Ok(SynthesisResult {
        density,
        achieved_kl,
        achieved_cost,
        iterations,
        certificate,
        converged,
        floor_hits,
        kkt_residual,
        stage_objectives,
        warnings,
    })
}
