//! Named fixture cases and the oracle dispatcher that re-derives them.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::formulas;
use crate::rank::{brute_force_rank, cmc_curve, mean_average_precision, OracleItem, RankedList};
use crate::simplex::grid_project;

/// Where a case's expected value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Quoted from the reference text.
    Paper,
    /// Follows from the definition with no computation.
    Trivial,
    /// Computed by the named oracle.
    Derived,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCase {
    pub name: String,
    /// Oracle that regenerates `expected` from `inputs`.
    pub oracle: String,
    pub inputs: Value,
    /// Hand-written expectation, when one exists; always cross-checked
    /// against the oracle's own output.
    #[serde(default)]
    pub expected: Option<Value>,
    pub provenance: Provenance,
    pub tolerance: f64,
}

impl OracleCase {
    pub fn validate(&self) -> Result<(), String> {
        if self.name.is_empty() {
            return Err("case without a name".into());
        }
        if self.provenance == Provenance::Derived && !(self.tolerance > 0.0) {
            return Err(format!("{}: derived cases need a positive tolerance", self.name));
        }
        if !(self.tolerance >= 0.0) {
            return Err(format!("{}: negative tolerance", self.name));
        }
        Ok(())
    }

    /// Output of this case's oracle.
    pub fn regenerate(&self) -> Result<Value, String> {
        run_oracle(&self.oracle, &self.inputs).map_err(|e| format!("{}: {e}", self.name))
    }
}

const CASES_JSON: &str = include_str!("../fixtures/cases.json");

/// All fixture cases, validated.
pub fn load_cases() -> Result<Vec<OracleCase>, String> {
    let cases: Vec<OracleCase> = serde_json::from_str(CASES_JSON).map_err(|e| e.to_string())?;
    for c in &cases {
        c.validate()?;
    }
    Ok(cases)
}

fn field<T: serde::de::DeserializeOwned>(inputs: &Value, key: &str) -> Result<T, String> {
    let v = inputs.get(key).ok_or_else(|| format!("missing input {key:?}"))?;
    serde_json::from_value(v.clone()).map_err(|e| format!("input {key:?}: {e}"))
}

fn items(inputs: &Value, key: &str) -> Result<Vec<OracleItem>, String> {
    let raw: Vec<(Vec<f64>, usize, usize)> = field(inputs, key)?;
    Ok(raw.into_iter().map(|(embedding, identity, camera)| OracleItem { embedding, identity, camera }).collect())
}

/// Evaluates oracle `name` on `inputs`.
pub fn run_oracle(name: &str, inputs: &Value) -> Result<Value, String> {
    let out = match name {
        "average_precision" => {
            let matches: Vec<bool> = field(inputs, "matches")?;
            let n = matches.len();
            json!(RankedList { gallery: (0..n).collect(), matches }.average_precision())
        }
        "euclidean" => json!(formulas::euclidean(&field::<Vec<f64>>(inputs, "a")?, &field::<Vec<f64>>(inputs, "b")?)),
        "grid_project" => json!(grid_project(&field::<Vec<f64>>(inputs, "v")?, field(inputs, "step")?)),
        "nmi" => json!(formulas::nmi(&field::<Vec<usize>>(inputs, "a")?, &field::<Vec<usize>>(inputs, "b")?)),
        "silhouette" => {
            json!(formulas::silhouette(&field::<Vec<Vec<f64>>>(inputs, "points")?, &field::<Vec<usize>>(inputs, "assign")?))
        }
        "mean_row_entropy" => json!(formulas::mean_row_entropy(&field::<Vec<Vec<f64>>>(inputs, "rows")?)),
        "column_stats" => {
            let (mu, sigma) = formulas::column_stats(&field::<Vec<Vec<f64>>>(inputs, "rows")?);
            json!({ "mu": mu, "sigma": sigma })
        }
        "restyle" => json!(formulas::restyle(
            &field::<Vec<Vec<f64>>>(inputs, "rows")?,
            &field::<Vec<f64>>(inputs, "mu")?,
            &field::<Vec<f64>>(inputs, "sigma")?,
            field(inputs, "eps")?,
        )),
        "adam_first_step" => {
            json!(formulas::adam_first_step(field(inputs, "theta")?, field(inputs, "g")?, field(inputs, "lr")?, field(inputs, "eps")?))
        }
        "retrieval" => {
            let gallery = items(inputs, "gallery")?;
            let ranks = brute_force_rank(&items(inputs, "query")?, &gallery);
            json!({ "cmc": cmc_curve(&ranks, gallery.len()), "map": mean_average_precision(&ranks) })
        }
        "mean" => {
            let v: Vec<f64> = field(inputs, "values")?;
            json!(v.iter().sum::<f64>() / v.len() as f64)
        }
        other => return Err(format!("unknown oracle {other:?}")),
    };
    Ok(out)
}

/// Largest absolute difference between two JSON values of the same shape
/// (numbers compared numerically, everything else must match exactly).
pub fn max_abs_diff(a: &Value, b: &Value) -> Result<f64, String> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => Ok((x.as_f64().unwrap_or(f64::NAN) - y.as_f64().unwrap_or(f64::NAN)).abs()),
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            x.iter().zip(y).try_fold(0.0, |m, (p, q)| Ok(f64::max(m, max_abs_diff(p, q)?)))
        }
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x.iter().try_fold(0.0, |m, (k, p)| {
            let q = y.get(k).ok_or_else(|| format!("key {k:?} missing"))?;
            Ok(f64::max(m, max_abs_diff(p, q)?))
        }),
        _ if a == b => Ok(0.0),
        _ => Err(format!("shape mismatch: {a} vs {b}")),
    }
}
