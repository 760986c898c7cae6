//! Machine-readable verification reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::mc::Estimate;

pub const SCHEMA: &str = "stein-embed/1";

/// Where a recorded number came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Exact,
    Mc,
    PaperFormula,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Exact => "exact",
            Provenance::Mc => "mc",
            Provenance::PaperFormula => "paper-formula",
        }
    }
}

/// Pass rule applied to `(value, target, tolerance, stderr)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// `|value − target| ≤ tolerance`
    Abs,
    /// `|value − target| ≤ tolerance·|target|`
    Rel,
    /// `|value − target| ≤ tolerance·stderr`
    Sigma,
    /// `value ≤ target + tolerance`
    AtMost,
}

impl Rule {
    pub fn as_str(&self) -> &'static str {
        match self {
            Rule::Abs => "abs",
            Rule::Rel => "rel",
            Rule::Sigma => "sigma",
            Rule::AtMost => "at_most",
        }
    }
}

/// JSON has no NaN or infinity; store those as strings.
mod lossless {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v)
        } else {
            Repr::Text(v.to_string())
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    #[serde(with = "lossless")]
    pub target: f64,
    #[serde(with = "lossless")]
    pub value: f64,
    #[serde(with = "lossless")]
    pub stderr: f64,
    #[serde(with = "lossless")]
    pub tolerance: f64,
    pub rule: Rule,
    pub pass: bool,
    pub provenance: Provenance,
}

impl Check {
    pub fn new(name: &str, value: f64, target: f64, tolerance: f64, rule: Rule, provenance: Provenance) -> Self {
        let mut c = Check {
            name: name.to_string(),
            target,
            value,
            stderr: 0.0,
            tolerance,
            rule,
            pass: false,
            provenance,
        };
        c.pass = c.evaluate();
        c
    }

    /// `|estimate − target| ≤ k·stderr`.
    pub fn sigma(name: &str, est: &Estimate, target: f64, k: f64) -> Self {
        Self::sigma_raw(name, est.mean, est.stderr, target, k)
    }

    pub fn sigma_raw(name: &str, value: f64, stderr: f64, target: f64, k: f64) -> Self {
        let mut c = Check::new(name, value, target, k, Rule::Sigma, Provenance::Mc);
        c.stderr = stderr;
        c.pass = c.evaluate();
        c
    }

    /// `value ≤ bound + k·stderr` for a Monte Carlo value.
    pub fn dominated(name: &str, value: f64, stderr: f64, bound: f64, k: f64, provenance: Provenance) -> Self {
        let mut c = Check::new(name, value, bound, k * stderr, Rule::AtMost, provenance);
        c.stderr = stderr;
        c.pass = c.evaluate();
        c
    }

    /// Recomputes the verdict from the recorded numbers.
    pub fn evaluate(&self) -> bool {
        let diff = (self.value - self.target).abs();
        if self.value.is_nan() || self.target.is_nan() {
            return false;
        }
        match self.rule {
            Rule::Abs => diff <= self.tolerance,
            Rule::Rel => diff <= self.tolerance * self.target.abs(),
            Rule::Sigma => diff == 0.0 || diff <= self.tolerance * self.stderr,
            Rule::AtMost => self.value <= self.target + self.tolerance,
        }
    }
}

/// A computed bound and the pieces it was assembled from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub name: String,
    #[serde(with = "lossless")]
    pub value: f64,
    pub provenance: Provenance,
    pub parts: BTreeMap<String, Value>,
}

impl BoundRecord {
    pub fn new(name: &str, value: f64, provenance: Provenance) -> Self {
        BoundRecord {
            name: name.to_string(),
            value,
            provenance,
            parts: BTreeMap::new(),
        }
    }

    pub fn part(mut self, key: &str, v: impl Serialize) -> Self {
        self.parts.insert(key.to_string(), to_value(v));
        self
    }
}

fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub parameters: BTreeMap<String, Value>,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub bounds: Vec<BoundRecord>,
    pub values: BTreeMap<String, Value>,
    pub notes: Vec<String>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

impl Report {
    pub fn new(command: &str, seed: u64) -> Self {
        Report {
            schema: SCHEMA.to_string(),
            command: command.to_string(),
            parameters: BTreeMap::new(),
            seed,
            checks: Vec::new(),
            bounds: Vec::new(),
            values: BTreeMap::new(),
            notes: Vec::new(),
            pass: true,
            wall_clock_secs: None,
        }
    }

    pub fn param(&mut self, key: &str, v: impl Serialize) -> &mut Self {
        self.parameters.insert(key.to_string(), to_value(v));
        self
    }

    pub fn value(&mut self, key: &str, v: impl Serialize) -> &mut Self {
        self.values.insert(key.to_string(), to_value(v));
        self
    }

    pub fn check(&mut self, c: Check) -> &mut Self {
        self.pass &= c.pass;
        self.checks.push(c);
        self
    }

    pub fn bound(&mut self, b: BoundRecord) -> &mut Self {
        self.bounds.push(b);
        self
    }

    pub fn note(&mut self, s: impl Into<String>) -> &mut Self {
        self.notes.push(s.into());
        self
    }

    /// Re-derives every verdict and the overall flag; true when they all
    /// match what is recorded.
    pub fn verdicts_consistent(&self) -> bool {
        let each = self.checks.iter().all(|c| c.evaluate() == c.pass);
        each && self.pass == self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// One row per check record.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("command,name,target,value,stderr,tolerance,rule,pass,provenance\n");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e},{},{},{}",
                self.command,
                c.name,
                c.target,
                c.value,
                c.stderr,
                c.tolerance,
                c.rule.as_str(),
                c.pass,
                c.provenance.as_str()
            );
        }
        s
    }
}
