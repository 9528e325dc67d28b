//! Experiment configuration: one JSON document, with dotted-path overrides.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, Result};
use crate::geometry::LatticeBox;
use crate::loops::CompositeLoop;
use crate::model::{ModelParams, Potential, PotentialKind, PotentialRecord, QlVariant};
use crate::oracle::Boundary;
use crate::pathint::Truncation;

/// Fugacity as a real number or a [re, im] pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ZValue {
    Real(f64),
    Complex([f64; 2]),
}

impl ZValue {
    pub fn to_c64(self) -> C64 {
        match self {
            ZValue::Real(x) => C64::new(x, 0.0),
            ZValue::Complex([a, b]) => C64::new(a, b),
        }
    }
}

/// Physics parameters; every field is required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub beta: f64,
    pub z: ZValue,
    pub l: f64,
    pub pi: Vec<PotentialRecord>,
    pub psi: Vec<PotentialRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Box extents a_i; empty means all ones.
    pub extents: Vec<i32>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { extents: Vec::new(), r: vec![2.0, 3.0, 4.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksConfig {
    pub which: Vec<String>,
    pub j: Vec<u32>,
    pub lemma2_radii: Vec<f64>,
    /// Annulus widths r for Assumption 4 and D_m.
    pub r: Vec<f64>,
    pub prop1_radii: Vec<f64>,
    pub remainder_radii: Vec<f64>,
    /// Radius R of the ball containing the test loops; unset means the
    /// smallest integer radius that holds each loop.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ball_radius: Option<f64>,
    pub dm_orders: Vec<usize>,
    /// Test loops X; empty means staircase loops at the origin with
    /// windings taken from `j`.
    pub loops: Vec<CompositeLoop>,
    pub ql_variant: QlVariant,
}

pub const ALL_CHECKS: [&str; 9] =
    ["lemma1", "lemma2", "assumption3", "assumption4", "prop1", "prop3", "remainder", "dm", "twopoint"];

impl Default for ChecksConfig {
    fn default() -> Self {
        ChecksConfig {
            which: ALL_CHECKS.iter().map(|s| s.to_string()).collect(),
            j: vec![1, 2, 3],
            lemma2_radii: vec![0.0, 1.0, 2.0, 3.0],
            r: vec![1.0, 2.0, 4.0],
            prop1_radii: vec![1.0, 2.0, 4.0, 8.0],
            remainder_radii: vec![4.0, 8.0, 16.0],
            ball_radius: None,
            dm_orders: vec![0, 1, 2],
            loops: Vec::new(),
            ql_variant: QlVariant::Corrected,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub boundary: Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub truncation: Truncation,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub checks: ChecksConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Sets `path` (dot-separated) in a JSON tree. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let val: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return invalid(format!("bad override path '{path}'"));
    }
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let Value::Object(map) = cur else {
            return invalid(format!("'{}' is not an object", keys[..i].join(".")));
        };
        if i + 1 == keys.len() {
            map.insert(k.to_string(), val);
            return Ok(());
        }
        cur = map.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses `key=value` override strings.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => invalid(format!("override '{s}' is not key=value")),
    }
}

impl ExperimentConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_value(v)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(text: &str, overrides: &[(String, String)]) -> Result<(Self, Value)> {
        let mut v: Value = serde_json::from_str(text)?;
        for (k, x) in overrides {
            apply_override(&mut v, k, x)?;
        }
        let c = Self::from_value(v.clone())?;
        Ok((c, v))
    }

    pub fn validate(&self) -> Result<()> {
        self.params()?;
        self.truncation.validate()?;
        self.lattice_box(1.0)?;
        if self.geometry.r.iter().any(|&r| !(r > 0.0)) {
            return invalid("geometry.R values must be positive");
        }
        for w in &self.checks.which {
            if !ALL_CHECKS.contains(&w.as_str()) {
                return invalid(format!("unknown check '{w}'"));
            }
        }
        for lp in &self.checks.loops {
            if lp.d() != self.model.d || lp.beta() != self.model.beta {
                return invalid("test loops must match the model dimension and β");
            }
        }
        if let Some(rad) = self.checks.ball_radius {
            if !(rad >= 0.0) {
                return invalid("checks.ball_radius must be non-negative");
            }
            if self.test_loops().iter().any(|x| x.sup_radius() > rad) {
                return invalid(format!("a test loop leaves the ball of radius {rad}"));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ModelParams> {
        let m = &self.model;
        if !(1..=3).contains(&m.d) {
            return invalid(format!("dimension {} not in 1..=3", m.d));
        }
        let pi = Potential::from_records(m.d, PotentialKind::Transverse, &m.pi)?;
        let psi = Potential::from_records(m.d, PotentialKind::Longitudinal, &m.psi)?;
        ModelParams::new(m.d, m.beta, m.z.to_c64(), pi, psi, m.l)
    }

    pub fn extents(&self) -> Vec<i32> {
        if self.geometry.extents.is_empty() {
            vec![1; self.model.d]
        } else {
            self.geometry.extents.clone()
        }
    }

    pub fn lattice_box(&self, scale: f64) -> Result<LatticeBox> {
        LatticeBox::new(self.model.d, self.extents(), scale)
    }

    /// The configured test loops, or staircase loops at the origin.
    pub fn test_loops(&self) -> Vec<CompositeLoop> {
        if !self.checks.loops.is_empty() {
            return self.checks.loops.clone();
        }
        self.checks.j.iter().map(|&j| CompositeLoop::staircase(self.model.d, self.model.beta, [0, 0, 0], j)).collect()
    }
}
