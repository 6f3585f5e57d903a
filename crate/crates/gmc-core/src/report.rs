//! Pass/fail reports for the verification harness, serialized as JSON lines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub name: String,
    pub estimate: f64,
    pub target: f64,
    /// Standard error; 0 for deterministic tests.
    pub se: f64,
    pub replicas: u64,
    pub verdict: Verdict,
    pub metadata: BTreeMap<String, String>,
}

impl TestReport {
    /// Statistical comparison: pass iff |estimate - target| <= z * se.
    pub fn statistical(
        name: impl Into<String>,
        estimate: f64,
        target: f64,
        se: f64,
        replicas: u64,
        z: f64,
    ) -> Self {
        let verdict = if (estimate - target).abs() <= z * se {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        let mut metadata = BTreeMap::new();
        metadata.insert("z".into(), z.to_string());
        TestReport {
            name: name.into(),
            estimate,
            target,
            se,
            replicas,
            verdict,
            metadata,
        }
    }

    /// Deterministic comparison: pass iff |estimate - target| <= abs_tol.
    pub fn deterministic(
        name: impl Into<String>,
        estimate: f64,
        target: f64,
        abs_tol: f64,
    ) -> Self {
        let verdict = if (estimate - target).abs() <= abs_tol {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        let mut metadata = BTreeMap::new();
        metadata.insert("abs_tol".into(), abs_tol.to_string());
        TestReport {
            name: name.into(),
            estimate,
            target,
            se: 0.0,
            replicas: 0,
            verdict,
            metadata,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// Informational reports always pass; findings live in the metadata.
    pub fn informational(name: impl Into<String>, estimate: f64, target: f64) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("informational".into(), "true".into());
        TestReport {
            name: name.into(),
            estimate,
            target,
            se: 0.0,
            replicas: 0,
            verdict: Verdict::Pass,
            metadata,
        }
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialization cannot fail")
    }

    /// One human-readable row.
    pub fn table_row(&self) -> String {
        format!(
            "{:<42} {:>14.6e} {:>14.6e} {:>12.3e} {:>9} {}",
            self.name,
            self.estimate,
            self.target,
            self.se,
            self.replicas,
            match self.verdict {
                Verdict::Pass => "PASS",
                Verdict::Fail => "FAIL",
            }
        )
    }
}
