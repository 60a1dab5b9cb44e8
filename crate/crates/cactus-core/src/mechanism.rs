//! Mechanism persistence and report serialization.
//!
//! A mechanism file is a versioned JSON document carrying everything needed
//! to reuse a synthesized density: the grid, the weights, the cost model it
//! was synthesized under, and a free-form provenance object. Field order is
//! fixed and floats are written with 17 significant digits so that a
//! write/read cycle reproduces every `f64` bit-exactly.
//!
//! ```text
//! { "format_version": 1, "n": ..., "N": ..., "r": ..., "p": [...],
//!   "cost": { "family": ..., "alpha": ..., "beta": ..., "C": ..., "s": ... },
//!   "provenance": { ... } }
//! ```
//!
//! Readers validate field by field and report the first offending field by
//! name. Writers for the solver sidecar report, the privacy report, and the
//! moments-curve CSV live here too, since they share the same formatting
//! contract (17 significant digits, `.` decimal separator, LF line endings).

use crate::accountant::{MomentsCurve, PrivacyReport};
use crate::cost::{CostFamily, CostModel};
use crate::density::{CactusDensity, CactusShape};
use crate::solver::SynthesisResult;
use crate::{Error, Result};
use serde_json::Value;
use std::path::Path;

/// Version written by this crate and the only one it accepts.
pub const FORMAT_VERSION: u64 = 1;

/// A persisted mechanism: density plus the cost model it answers to.
#[derive(Debug, Clone)]
pub struct Mechanism {
    pub density: CactusDensity,
    pub cost: CostModel,
    /// Free-form JSON object describing how the mechanism was produced.
    pub provenance: Value,
}

/// Formats a float with 17 significant digits, enough for f64 round-trips.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl Mechanism {
    pub fn new(density: CactusDensity, cost: CostModel, provenance: Value) -> Result<Self> {
        if !provenance.is_object() {
            return Err(Error::schema("provenance", "must be a JSON object"));
        }
        Ok(Self { density, cost, provenance })
    }

    /// Serializes with fixed field order and 17-significant-digit floats.
    pub fn to_json(&self) -> String {
        let shape = self.density.shape();
        let mut out = String::with_capacity(32 * self.density.weights().len() + 512);
        out.push_str("{\n");
        out.push_str(&format!("  \"format_version\": {FORMAT_VERSION},\n"));
        out.push_str(&format!("  \"n\": {},\n", shape.n()));
        out.push_str(&format!("  \"N\": {},\n", shape.core_cells()));
        out.push_str(&format!("  \"r\": {},\n", fmt_float(shape.tail_ratio())));
        out.push_str("  \"p\": [");
        for (i, w) in self.density.weights().iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(&fmt_float(*w));
        }
        out.push_str("],\n");
        let family = match self.cost.family() {
            CostFamily::Quadratic => "quadratic",
            CostFamily::Power => "power",
        };
        out.push_str("  \"cost\": {");
        out.push_str(&format!("\"family\": \"{family}\", "));
        out.push_str(&format!("\"alpha\": {}, ", fmt_float(self.cost.alpha())));
        out.push_str(&format!("\"beta\": {}, ", fmt_float(self.cost.beta())));
        out.push_str(&format!("\"C\": {}, ", fmt_float(self.cost.budget())));
        out.push_str(&format!("\"s\": {}", fmt_float(self.cost.sensitivity())));
        out.push_str("},\n");
        out.push_str(&format!(
            "  \"provenance\": {}\n",
            serde_json::to_string(&self.provenance).expect("provenance serializes")
        ));
        out.push_str("}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text)?;
        let obj = root
            .as_object()
            .ok_or_else(|| Error::schema("<root>", "mechanism file must be a JSON object"))?;

        let version = require_u64(obj, "format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::schema(
                "format_version",
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        let n = require_u64(obj, "n")?;
        let core = require_u64(obj, "N")?;
        let r = require_f64(obj, "r")?;
        let n = u32::try_from(n)
            .map_err(|_| Error::schema("n", format!("{n} does not fit a 32-bit grid count")))?;
        let core = u32::try_from(core)
            .map_err(|_| Error::schema("N", format!("{core} does not fit a 32-bit cell count")))?;
        let shape = CactusShape::new(n, core, r)
            .map_err(|e| Error::schema("r", format!("invalid shape parameters: {e}")))?;

        let p = obj
            .get("p")
            .ok_or_else(|| Error::schema("p", "missing"))?
            .as_array()
            .ok_or_else(|| Error::schema("p", "must be an array of numbers"))?;
        if p.len() != core as usize + 1 {
            return Err(Error::schema(
                "p",
                format!("expected N + 1 = {} weights, found {}", core + 1, p.len()),
            ));
        }
        let mut weights = Vec::with_capacity(p.len());
        for (i, v) in p.iter().enumerate() {
            let w = v
                .as_f64()
                .ok_or_else(|| Error::schema("p", format!("entry {i} is not a number")))?;
            weights.push(w);
        }
        let density = CactusDensity::new(shape, weights)
            .map_err(|e| Error::schema("p", format!("invalid weight vector: {e}")))?;

        let cost_obj = obj
            .get("cost")
            .ok_or_else(|| Error::schema("cost", "missing"))?
            .as_object()
            .ok_or_else(|| Error::schema("cost", "must be a JSON object"))?;
        let family = cost_obj
            .get("family")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::schema("cost.family", "missing or not a string"))?;
        let alpha = require_f64(cost_obj, "alpha").map_err(prefix_cost)?;
        let beta = require_f64(cost_obj, "beta").map_err(prefix_cost)?;
        let budget = require_f64(cost_obj, "C").map_err(prefix_cost)?;
        let s = require_f64(cost_obj, "s").map_err(prefix_cost)?;
        let cost = match family {
            "quadratic" => {
                if alpha != 2.0 || beta != 1.0 {
                    return Err(Error::schema(
                        "cost.family",
                        format!("quadratic family requires alpha = 2, beta = 1, found {alpha}, {beta}"),
                    ));
                }
                CostModel::quadratic(budget, s)
            }
            "power" => CostModel::power(alpha, beta, budget, s),
            other => {
                return Err(Error::schema(
                    "cost.family",
                    format!("unknown family `{other}`"),
                ))
            }
        }
        .map_err(|e| Error::schema("cost", format!("invalid cost parameters: {e}")))?;

        let provenance = obj
            .get("provenance")
            .ok_or_else(|| Error::schema("provenance", "missing"))?;
        if !provenance.is_object() {
            return Err(Error::schema("provenance", "must be a JSON object"));
        }

        Ok(Self {
            density,
            cost,
            provenance: provenance.clone(),
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("writing mechanism file {}: {e}", path.display()),
            ))
        })
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("reading mechanism file {}: {e}", path.display()),
            ))
        })?;
        Self::from_json(&text)
    }
}

fn require_u64(obj: &serde_json::Map<String, Value>, field: &str) -> Result<u64> {
    obj.get(field)
        .ok_or_else(|| Error::schema(field, "missing"))?
        .as_u64()
        .ok_or_else(|| Error::schema(field, "must be a nonnegative integer"))
}

fn require_f64(obj: &serde_json::Map<String, Value>, field: &str) -> Result<f64> {
    obj.get(field)
        .ok_or_else(|| Error::schema(field, "missing"))?
        .as_f64()
        .ok_or_else(|| Error::schema(field, "must be a number"))
}

fn prefix_cost(e: Error) -> Error {
    match e {
        Error::Schema { field, reason } => Error::Schema {
            field: format!("cost.{field}"),
            reason,
        },
        other => other,
    }
}

/// Serializes the solver sidecar report: iteration count, final objective,
/// the per-shift certificate vector, and the convergence flag.
pub fn solve_report_to_json(result: &SynthesisResult) -> String {
    let mut out = String::with_capacity(32 * result.certificate.len() + 256);
    out.push_str("{\n");
    out.push_str(&format!("  \"iterations\": {},\n", result.iterations));
    out.push_str(&format!(
        "  \"final_objective\": {},\n",
        fmt_float(result.achieved_kl)
    ));
    out.push_str("  \"certificate\": [");
    for (i, v) in result.certificate.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&fmt_float(*v));
    }
    out.push_str("],\n");
    out.push_str(&format!("  \"converged\": {}\n", result.converged));
    out.push_str("}\n");
    out
}

/// Serializes a privacy report with the fixed field order
/// `delta, T, q, lambda_max, epsilon, argmin_lambda`.
pub fn privacy_report_to_json(report: &PrivacyReport) -> String {
    format!(
        "{{\"delta\": {}, \"T\": {}, \"q\": {}, \"lambda_max\": {}, \"epsilon\": {}, \"argmin_lambda\": {}}}\n",
        fmt_float(report.query.delta),
        report.query.compositions,
        fmt_float(report.query.q),
        report.query.lambda_max,
        fmt_float(report.epsilon),
        report.argmin_lambda
    )
}

/// Serializes a moments curve as CSV with header `lambda,alpha`.
pub fn moments_curve_to_csv(curve: &MomentsCurve) -> String {
    let mut out = String::from("lambda,alpha\n");
    for (lam, alpha) in curve.lambdas.iter().zip(&curve.alphas) {
        out.push_str(&format!("{lam},{}\n", fmt_float(*alpha)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accountant::{compose_epsilon, mechanism_moments, CompositionQuery};
    use crate::solver::{synthesize, SolverOptions, SynthesisProblem};
    use serde_json::json;

    fn sample_mechanism() -> Mechanism {
        let shape = CactusShape::new(2, 6, 0.5).unwrap();
        let raw = vec![0.5, 0.4, 0.25, 0.12, 0.06, 0.03, 0.015];
        let density = CactusDensity::from_unnormalized(shape, raw).unwrap();
        let cost = CostModel::quadratic(0.8, 1.0).unwrap();
        Mechanism::new(density, cost, json!({"tool": "test"})).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample_mechanism();
        let text = m.to_json();
        let back = Mechanism::from_json(&text).unwrap();
        assert_eq!(m.density.weights(), back.density.weights());
        assert_eq!(m.density.shape().n(), back.density.shape().n());
        assert_eq!(
            m.density.shape().tail_ratio().to_bits(),
            back.density.shape().tail_ratio().to_bits()
        );
        assert_eq!(m.cost.budget().to_bits(), back.cost.budget().to_bits());
        assert_eq!(m.provenance, back.provenance);
        // And a second cycle is textually identical.
        assert_eq!(text, back.to_json());
    }

    #[test]
    fn round_trip_survives_awkward_floats() {
        let shape = CactusShape::new(3, 5, 1.0 - 1.0 / 3.0).unwrap();
        let raw = vec![
            0.1 + 0.2,
            1.0 / 7.0,
            std::f64::consts::PI / 30.0,
            1e-13,
            2.2250738585072014e-305,
            1.0 / 3.0,
        ];
        let density = CactusDensity::from_unnormalized(shape, raw).unwrap();
        let cost = CostModel::power(1.5, 0.7, 2.0, 3.0).unwrap();
        let m = Mechanism::new(density, cost, json!({})).unwrap();
        let back = Mechanism::from_json(&m.to_json()).unwrap();
        for (a, b) in m.density.weights().iter().zip(back.density.weights()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(m.cost.alpha().to_bits(), back.cost.alpha().to_bits());
        assert_eq!(m.cost.beta().to_bits(), back.cost.beta().to_bits());
    }

    #[test]
    fn field_order_is_fixed() {
        let text = sample_mechanism().to_json();
        let pos = |needle: &str| text.find(needle).unwrap_or_else(|| panic!("missing {needle}"));
        let order = [
            pos("\"format_version\""),
            pos("\"n\""),
            pos("\"N\""),
            pos("\"r\""),
            pos("\"p\""),
            pos("\"cost\""),
            pos("\"provenance\""),
        ];
        assert!(order.windows(2).all(|w| w[0] < w[1]), "field order drifted");
        let cost_section = &text[pos("\"cost\"")..pos("\"provenance\"")];
        let cpos = |needle: &str| cost_section.find(needle).unwrap();
        let cost_order = [
            cpos("\"family\""),
            cpos("\"alpha\""),
            cpos("\"beta\""),
            cpos("\"C\""),
            cpos("\"s\""),
        ];
        assert!(cost_order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let good = sample_mechanism().to_json();
        let cases: Vec<(Value, &str)> = vec![
            (json!(99), "format_version"),
            (json!("one"), "format_version"),
        ];
        for (bad, field) in cases {
            let mut v: Value = serde_json::from_str(&good).unwrap();
            v["format_version"] = bad;
            let err = Mechanism::from_json(&v.to_string()).unwrap_err();
            match err {
                Error::Schema { field: f, .. } => assert_eq!(f, field),
                other => panic!("expected schema error, got {other}"),
            }
        }

        let mutations: Vec<(&str, Value, &str)> = vec![
            ("r", json!(1.5), "r"),
            ("n", json!(-1), "n"),
            ("p", json!([0.1, 0.2]), "p"),
            ("p", json!(null), "p"),
            ("provenance", json!("free text"), "provenance"),
        ];
        for (key, bad, field) in mutations {
            let mut v: Value = serde_json::from_str(&good).unwrap();
            v[key] = bad;
            let err = Mechanism::from_json(&v.to_string()).unwrap_err();
            match err {
                Error::Schema { field: f, .. } => assert_eq!(f, field, "mutating {key}"),
                other => panic!("expected schema error mutating {key}, got {other}"),
            }
        }

        let mut v: Value = serde_json::from_str(&good).unwrap();
        v["cost"]["family"] = json!("cubic");
        match Mechanism::from_json(&v.to_string()).unwrap_err() {
            Error::Schema { field, .. } => assert_eq!(field, "cost.family"),
            other => panic!("expected schema error, got {other}"),
        }
        let mut v: Value = serde_json::from_str(&good).unwrap();
        v["cost"]["C"] = json!("a lot");
        match Mechanism::from_json(&v.to_string()).unwrap_err() {
            Error::Schema { field, .. } => assert_eq!(field, "cost.C"),
            other => panic!("expected schema error, got {other}"),
        }

        // A denormalized weight vector is a p-field problem.
        let mut v: Value = serde_json::from_str(&good).unwrap();
        v["p"][0] = json!(0.9);
        match Mechanism::from_json(&v.to_string()).unwrap_err() {
            Error::Schema { field, .. } => assert_eq!(field, "p"),
            other => panic!("expected schema error, got {other}"),
        }

        assert!(matches!(
            Mechanism::from_json("not json").unwrap_err(),
            Error::Json(_)
        ));
    }

    #[test]
    fn file_round_trip() {
        let m = sample_mechanism();
        let dir = std::env::temp_dir().join("cactus-mechanism-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.json");
        m.write_to(&path).unwrap();
        let back = Mechanism::read_from(&path).unwrap();
        assert_eq!(m.density.weights(), back.density.weights());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn solve_report_carries_certificate() {
        let shape = CactusShape::new(2, 5, 0.5).unwrap();
        let cost = CostModel::quadratic(1.0, 1.0).unwrap();
        let prob = SynthesisProblem::new(shape, cost).unwrap();
        let opts = SolverOptions {
            max_iterations: 300,
            ..SolverOptions::default()
        };
        let result = synthesize(&prob, &opts).unwrap();
        let text = solve_report_to_json(&result);
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["iterations"].as_u64().unwrap(), result.iterations as u64);
        assert_eq!(v["converged"].as_bool().unwrap(), result.converged);
        let cert = v["certificate"].as_array().unwrap();
        assert_eq!(cert.len(), 2);
        for (a, b) in cert.iter().zip(&result.certificate) {
            assert_eq!(a.as_f64().unwrap().to_bits(), b.to_bits());
        }
        assert_eq!(
            v["final_objective"].as_f64().unwrap().to_bits(),
            result.achieved_kl.to_bits()
        );
    }

    #[test]
    fn privacy_report_layout() {
        let shape = CactusShape::new(1, 2, 0.5).unwrap();
        let density = CactusDensity::new(shape, vec![0.4, 0.2, 0.05]).unwrap();
        let curve = mechanism_moments(&density, 4).unwrap();
        let query = CompositionQuery {
            delta: 1e-3,
            compositions: 7,
            q: 1.0,
            lambda_max: 4,
        };
        let report = compose_epsilon(&curve, &query).unwrap();
        let text = privacy_report_to_json(&report);
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["T"].as_u64().unwrap(), 7);
        assert_eq!(v["lambda_max"].as_u64().unwrap(), 4);
        assert_eq!(v["delta"].as_f64().unwrap().to_bits(), 1e-3f64.to_bits());
        assert_eq!(
            v["epsilon"].as_f64().unwrap().to_bits(),
            report.epsilon.to_bits()
        );
        assert_eq!(
            v["argmin_lambda"].as_u64().unwrap(),
            report.argmin_lambda as u64
        );
        // Fixed key order in the raw text.
        let keys = ["delta", "T", "q", "lambda_max", "epsilon", "argmin_lambda"];
        let positions: Vec<usize> = keys
            .iter()
            .map(|k| text.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn curve_csv_layout() {
        let shape = CactusShape::new(1, 2, 0.5).unwrap();
        let density = CactusDensity::new(shape, vec![0.4, 0.2, 0.05]).unwrap();
        let curve = mechanism_moments(&density, 3).unwrap();
        let csv = moments_curve_to_csv(&curve);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "lambda,alpha");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 3);
        for (i, row) in rows.iter().enumerate() {
            let (lam, alpha) = row.split_once(',').unwrap();
            assert_eq!(lam.parse::<u32>().unwrap(), i as u32 + 1);
            let parsed: f64 = alpha.parse().unwrap();
            assert_eq!(parsed.to_bits(), curve.alphas[i].to_bits());
        }
        assert!(!csv.contains('\r'), "CSV must use LF line endings");
    }

    #[test]
    fn fmt_float_round_trips_extremes() {
        for &x in &[
            0.1,
            1.0 / 3.0,
            f64::MIN_POSITIVE,
            1e300,
            9.999999999999999e-5,
            2.0_f64.powi(-1074),
        ] {
            let parsed: f64 = fmt_float(x).parse().unwrap();
            assert_eq!(parsed.to_bits(), x.to_bits(), "{x}");
        }
    }
}
