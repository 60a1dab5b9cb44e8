//! The cactus density family.
//!
//! A *cactus density* is a symmetric probability density on the real line
//! that is piecewise constant on a regular grid of cells of width `1/n` and
//! decays geometrically past a finite core. Cell `i` covers
//! `((i-1/2)/n, (i+1/2)/n]` for `i > 0`, the mirrored half-open interval for
//! `i < 0`, and `[-1/(2n), 1/(2n)]` for `i = 0`. The density value on cell
//! `i` is `n * p_{|i|}` while `|i| < N` and `n * p_N * r^{|i|-N}` from the
//! core edge outward, so a density is fully described by the grid resolution
//! `n`, the core half-width `N` (in cells), the tail ratio `r` and the
//! weight vector `p_0..p_N`.
//!
//! Normalization ties the weights together: the total mass
//! `S = p_0 + 2*sum(p_1..p_{N-1}) + 2*p_N/(1-r)` must equal one.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;

/// Tolerance on `|S - 1|` accepted by [`CactusDensity::new`].
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Grid geometry of a cactus density: resolution, core half-width and tail
/// decay ratio. Weights are not part of the shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CactusShape {
    /// Cells per unit length.
    pub(crate) n: u32,
    /// Half-width of the individually weighted core, in cells.
    pub(crate) core_cells: u32,
    /// Per-cell geometric decay ratio past the core, in (0, 1).
    pub(crate) tail_ratio: f64,
}

impl CactusShape {
    pub fn new(n: u32, core_cells: u32, tail_ratio: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        if core_cells <= n {
            return Err(Error::InvalidParameter(format!(
                "core half-width N={core_cells} must exceed the resolution n={n}"
            )));
        }
        if !(tail_ratio > 0.0 && tail_ratio < 1.0) || !tail_ratio.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "tail ratio must lie strictly inside (0,1), got {tail_ratio}"
            )));
        }
        Ok(CactusShape { n, core_cells, tail_ratio })
    }

    /// Cells per unit length.
    pub fn n(&self) -> u32 {
        self.n
    }

    /// Core half-width in cells.
    pub fn core_cells(&self) -> u32 {
        self.core_cells
    }

    /// Geometric tail decay ratio per cell.
    pub fn tail_ratio(&self) -> f64 {
        self.tail_ratio
    }

    /// Width of one cell, `1/n`.
    pub fn cell_width(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Index of the cell containing `x` under the half-open convention
    /// above. Every real belongs to exactly one cell.
    pub fn index_of(&self, x: f64) -> i64 {
        let n = self.n as f64;
        let half = 0.5 / n;
        if x > half {
            (n * x - 0.5).ceil() as i64
        } else if x < -half {
            (n * x + 0.5).floor() as i64
        } else {
            0
        }
    }

    /// Tail ratio of a cell-averaged Gaussian: mass of core cell `N` over
    /// mass of cell `N-1`. Useful for choosing an `r` when quantizing a
    /// Gaussian without a target shape in hand.
    pub fn gaussian_tail_ratio(n: u32, core_cells: u32, sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive and finite, got {sigma}"
            )));
        }
        let n = n as f64;
        let mass = |i: f64| gauss_cell_mass(i, n, sigma);
        let ratio = mass(core_cells as f64) / mass(core_cells as f64 - 1.0);
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "Gaussian cell masses at the core edge underflow for sigma={sigma}; \
                 cannot fit a tail ratio"
            )));
        }
        Ok(ratio)
    }
}

/// Mass of cell `i >= 0` under a centered Gaussian with std `sigma`,
/// computed from the upper tail so that distant cells keep full relative
/// accuracy instead of cancelling to zero.
fn gauss_cell_mass(i: f64, n: f64, sigma: f64) -> f64 {
    let phi_c = |x: f64| 0.5 * erfc(x / std::f64::consts::SQRT_2);
    if i == 0.0 {
        1.0 - 2.0 * phi_c(0.5 / (n * sigma))
    } else {
        phi_c((i - 0.5) / (n * sigma)) - phi_c((i + 0.5) / (n * sigma))
    }
}

/// A concrete cactus density: shape plus normalized weights `p_0..p_N`.
///
/// Weights are validated at construction (length `N+1`, finite,
/// non-negative, unit total mass) and never mutated afterwards; all
/// evaluation routines may rely on those invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct CactusDensity {
    shape: CactusShape,
    weights: Vec<f64>,
    /// right_cum[j] = mass of (0, (j+1/2)/n], i.e. p_0/2 + p_1 + .. + p_j.
    right_cum: Vec<f64>,
}

impl CactusDensity {
    /// Build from already-normalized weights. Rejects wrong length,
    /// non-finite or negative entries, and total mass off by more than
    /// [`NORMALIZATION_TOL`].
    pub fn new(shape: CactusShape, weights: Vec<f64>) -> Result<Self> {
        let expect = shape.core_cells as usize + 1;
        if weights.len() != expect {
            return Err(Error::InvalidParameter(format!(
                "weight vector has length {}, expected N+1 = {expect}",
                weights.len()
            )));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "weight p_{i} = {w} is not a finite non-negative value"
                )));
            }
        }
        let s = normalization_sum(&weights, shape.tail_ratio);
        if (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidParameter(format!(
                "weights sum to total mass {s}, which is further than {NORMALIZATION_TOL} from 1"
            )));
        }
        Ok(Self::new_unchecked(shape, weights))
    }

    /// Build from raw positive weights, rescaling them to unit total mass.
    pub fn from_unnormalized(shape: CactusShape, raw: Vec<f64>) -> Result<Self> {
        let expect = shape.core_cells as usize + 1;
        if raw.len() != expect {
            return Err(Error::InvalidParameter(format!(
                "weight vector has length {}, expected N+1 = {expect}",
                raw.len()
            )));
        }
        let s = normalization_sum(&raw, shape.tail_ratio);
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "raw weights have non-positive or non-finite total mass {s}"
            )));
        }
        let weights: Vec<f64> = raw.iter().map(|w| w / s).collect();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(
                "raw weights contain negative or non-finite entries".into(),
            ));
        }
        Ok(Self::new_unchecked(shape, weights))
    }

    pub(crate) fn new_unchecked(shape: CactusShape, weights: Vec<f64>) -> Self {
        let mut right_cum = Vec::with_capacity(weights.len().saturating_sub(1));
        let mut acc = 0.5 * weights[0];
        right_cum.push(acc);
        for &w in &weights[1..weights.len() - 1] {
            acc += w;
            right_cum.push(acc);
        }
        CactusDensity { shape, weights, right_cum }
    }

    pub fn shape(&self) -> &CactusShape {
        &self.shape
    }

    /// The core weights `p_0..p_N`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Total mass `S = p_0 + 2*sum(p_1..p_{N-1}) + 2*p_N/(1-r)`.
    pub fn normalization(&self) -> f64 {
        normalization_sum(&self.weights, self.shape.tail_ratio)
    }

    /// Weight of an arbitrary cell: `p_{|i|}` inside the core and
    /// `p_N * r^{|i|-N}` outside. The tail is evaluated by repeated
    /// multiplication so consecutive cells relate by an exact factor `r`
    /// (far past any practical range it switches to a log-domain form).
    pub fn extended_weight(&self, i: i64) -> f64 {
        let idx = i.unsigned_abs();
        let core = self.shape.core_cells as u64;
        if idx <= core {
            return self.weights[idx as usize];
        }
        let k = idx - core;
        let p_edge = self.weights[core as usize];
        let r = self.shape.tail_ratio;
        if k <= 4096 {
            let mut w = p_edge;
            for _ in 0..k {
                w *= r;
                if w == 0.0 {
                    break;
                }
            }
            w
        } else {
            p_edge * (r.ln() * k as f64).exp()
        }
    }

    /// Density value at `x`.
    pub fn pdf(&self, x: f64) -> f64 {
        if !x.is_finite() {
            return 0.0;
        }
        self.shape.n as f64 * self.extended_weight(self.shape.index_of(x))
    }

    /// Cumulative distribution at `x`, evaluated in closed form: prefix
    /// sums across the core, a geometric series across the tail, linear
    /// within the cell containing `x`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        if x < 0.0 {
            return 1.0 - self.cdf(-x);
        }
        let n = self.shape.n as f64;
        let core = self.shape.core_cells as i64;
        let k = self.shape.index_of(x);
        if k < core {
            // Mass between 0 and the left edge of cell k, plus the partial
            // cell; grouped so that F(0) = 1/2 holds exactly.
            let left_edge = (k as f64 - 0.5) / n;
            let w = self.weights[k as usize];
            let through_left = self.right_cum[k as usize] - w;
            0.5 + (through_left + (x - left_edge) * n * w)
        } else {
            // Tail cell: everything at or beyond x, geometric.
            let w_k = self.extended_weight(k);
            let edge = (k as f64 + 0.5) / n;
            let beyond = (edge - x) * n * w_k
                + w_k * self.shape.tail_ratio / (1.0 - self.shape.tail_ratio);
            1.0 - beyond
        }
    }

    /// Draw `count` samples, reproducibly from `seed`. Cell selection uses
    /// an inverse-CDF search over per-cell masses; within the selected cell
    /// the position is uniform, and tail cells are picked by a geometric
    /// draw so no series truncation is involved.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = &self.shape;
        let n = shape.n as f64;
        let core = shape.core_cells as usize;
        let r = shape.tail_ratio;
        let tail_mass = self.weights[core] / (1.0 - r);

        // Cumulative per-category masses in CDF order:
        // [left tail, cells -(N-1)..-1, cell 0, cells 1..N-1, right tail].
        let mut cum = Vec::with_capacity(2 * core + 1);
        let mut acc = tail_mass;
        cum.push(acc);
        for i in (1..core).rev() {
            acc += self.weights[i];
            cum.push(acc);
        }
        acc += self.weights[0];
        cum.push(acc);
        for i in 1..core {
            acc += self.weights[i];
            cum.push(acc);
        }
        cum.push(acc + tail_mass);

        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let u: f64 = rng.gen();
            let cat = cum.partition_point(|&c| c < u);
            let x = if cat == 0 || cat >= 2 * core {
                // Tail side: geometric cell index, then uniform in the cell.
                let v: f64 = rng.gen();
                let g = ((1.0 - v).ln() / r.ln()).floor().max(0.0);
                let cell = core as f64 + g;
                let lo = (cell - 0.5) / n;
                let pos = lo + rng.gen::<f64>() / n;
                if cat == 0 {
                    -pos
                } else {
                    pos
                }
            } else {
                // Core cell; categories 1..=core-1 are cells -(N-1)..-1,
                // category core is cell 0, core+1.. are cells 1..N-1.
                let cell = cat as i64 - core as i64;
                let lo = (cell as f64 - 0.5) / n;
                lo + rng.gen::<f64>() / n
            };
            out.push(x);
        }
        out
    }

    /// Cell-averaged Gaussian weights on `shape`, renormalized. Used as the
    /// solver warm start; the Gaussian has no geometric tail, so the tail
    /// implied by `shape.tail_ratio` simply replaces everything past the
    /// core edge before renormalization.
    pub fn gaussian_init(shape: CactusShape, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive and finite, got {sigma}"
            )));
        }
        let n = shape.n as f64;
        let raw: Vec<f64> = (0..=shape.core_cells)
            .map(|i| gauss_cell_mass(i as f64, n, sigma).max(1e-300))
            .collect();
        Self::from_unnormalized(shape, raw)
    }
}

/// `S = p_0 + 2*sum(p_1..p_{N-1}) + 2*p_N/(1-r)`.
pub(crate) fn normalization_sum(weights: &[f64], tail_ratio: f64) -> f64 {
    let last = weights.len() - 1;
    let mut s = weights[0];
    for &w in &weights[1..last] {
        s += 2.0 * w;
    }
    s + 2.0 * weights[last] / (1.0 - tail_ratio)
}
