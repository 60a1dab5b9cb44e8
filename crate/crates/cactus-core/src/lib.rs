//! Synthesis and analysis of near-optimal additive noise for differential
//! privacy.
//!
//! The noise laws handled here are symmetric piecewise-constant densities on
//! a regular 1/n grid whose weights decay geometrically past a finite core
//! ("cactus" densities). The crate covers the full pipeline:
//!
//! * [`density`] — the density family itself: evaluation, CDF, sampling,
//!   Gaussian-derived initial weights.
//! * [`cost`] — moment cost models (quadratic / power), per-cell costs and
//!   the geometric tail series, expected cost of a density.
//! * [`divergence`] — closed-form KL divergence between a density and its
//!   shifts, the worst-shift supremum, log-moment-generating values and the
//!   exact single-composition hockey-stick curve.
//! * [`solver`] — the convex minimax synthesis: minimize the worst-shift KL
//!   subject to a cost budget over the weight vector.
//! * [`accountant`] — moments-accountant composition: per-order log-moments
//!   of the synthesized mechanism (optionally subsampled) and the resulting
//!   (epsilon, delta) trade-off after T compositions.
//! * [`mechanism`] — the on-disk mechanism description (JSON) shared by the
//!   CLI and downstream tooling.

pub mod accountant;
pub mod cost;
pub mod density;
pub mod divergence;
mod error;
pub mod mechanism;
pub mod quad;
pub mod solver;

pub use error::{Error, Result};
