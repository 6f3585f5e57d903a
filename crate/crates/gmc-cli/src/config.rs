//! Run configuration: defaults, JSON config file, flag merging, and the
//! config hash embedded in every output file.

use serde::{Deserialize, Serialize};

/// Full resolved configuration for one command invocation. Serializes to
/// JSON with a stable field order; parse -> emit -> parse is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// kernel family: "kahane", "log", or "zero"
    pub kernel: String,
    /// Kahane-family cutoff C
    pub c: f64,
    pub gamma: f64,
    /// cells per axis
    pub n: usize,
    pub dim: usize,
    pub replicas: u64,
    pub seed: u64,
    pub suites: Vec<String>,
    /// mollifier profile: "box" or "triangle"
    pub mollifier: String,
    pub eps_ladder: Vec<f64>,
    pub gamma_ladder: Vec<f64>,
    /// cell-index pairs for second-moment summaries
    pub pairs: Vec<(usize, usize)>,
    pub out: String,
    /// z-threshold for statistical verdicts
    pub z: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kernel: "kahane".into(),
            c: 16.0,
            gamma: 1.0,
            n: 64,
            dim: 1,
            replicas: 10,
            seed: 7,
            suites: vec!["all".into()],
            mollifier: "box".into(),
            eps_ladder: vec![],
            gamma_ladder: vec![],
            pairs: vec![],
            out: "out".into(),
            z: 3.0,
        }
    }
}

/// File-side view of the config where every field is optional, so flag/file
/// conflicts can be detected instead of silently overridden.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub kernel: Option<String>,
    pub c: Option<f64>,
    pub gamma: Option<f64>,
    pub n: Option<usize>,
    pub dim: Option<usize>,
    pub replicas: Option<u64>,
    pub seed: Option<u64>,
    pub suites: Option<Vec<String>>,
    pub mollifier: Option<String>,
    pub eps_ladder: Option<Vec<f64>>,
    pub gamma_ladder: Option<Vec<f64>>,
    pub pairs: Option<Vec<(usize, usize)>>,
    pub out: Option<String>,
    pub z: Option<f64>,
}

/// Merge defaults <- config file <- flags, refusing any field set in both
/// the file and on the command line.
pub fn merge(file: PartialConfig, flags: PartialConfig) -> Result<RunConfig, String> {
    let mut out = RunConfig::default();
    macro_rules! field {
        ($name:ident) => {
            match (file.$name, flags.$name) {
                (Some(_), Some(_)) => {
                    return Err(format!(
                        "field '{}' is set both in the config file and as a flag",
                        stringify!($name)
                    ))
                }
                (Some(v), None) | (None, Some(v)) => out.$name = v,
                (None, None) => {}
            }
        };
    }
    field!(kernel);
    field!(c);
    field!(gamma);
    field!(n);
    field!(dim);
    field!(replicas);
    field!(seed);
    field!(suites);
    field!(mollifier);
    field!(eps_ladder);
    field!(gamma_ladder);
    field!(pairs);
    field!(out);
    field!(z);
    Ok(out)
}

/// FNV-1a hash of the canonical JSON form, as fixed-width hex.
pub fn config_hash(config: &RunConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
