//! Run configuration: a flat JSON object whose keys are the fields below.

use pnp_core::analysis::ProblemSetup;
use pnp_core::linalg::SolverOptions;
use pnp_core::model::{Formulation, InitialData, PhysicalParams};
use pnp_core::time::{step_count, SchemeId};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `primitive` or `quasi_neutral`.
    pub formulation: String,
    /// `I1` … `I6` or `split`.
    pub scheme: String,
    pub epsilon: f64,
    /// Cells per side of the unit square.
    pub n: usize,
    pub circle_center: [f64; 2],
    /// Radius of the hole; 0 gives the plain square.
    pub circle_radius: f64,
    pub dt_over_h: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub d_plus: f64,
    pub d_minus: f64,
    pub m_plus: f64,
    pub m_minus: f64,
    pub v0: f64,
    pub sigma: f64,
    pub x_plus_in: f64,
    pub x_minus_in: f64,
    pub y_in: f64,
    pub output: PathBuf,
    /// Field dump interval in steps; 0 disables field output.
    pub emit_fields_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PhysicalParams::table1(1e-4);
        let d = InitialData::default();
        Self {
            formulation: "quasi_neutral".into(),
            scheme: "I2".into(),
            epsilon: p.epsilon,
            n: 100,
            circle_center: [0.5, 0.5],
            circle_radius: 0.15,
            dt_over_h: 1.0,
            t_final: 0.1,
            d_plus: p.d_plus,
            d_minus: p.d_minus,
            m_plus: p.m_plus,
            m_minus: p.m_minus,
            v0: d.v0,
            sigma: d.sigma,
            x_plus_in: d.x_plus,
            x_minus_in: d.x_minus,
            y_in: d.y_plus,
            output: PathBuf::from("out"),
            emit_fields_every: 10,
        }
    }
}

/// Invalid fields, each with its key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<(String, String)>,
}

impl ConfigError {
    fn single(key: &str, msg: impl Into<String>) -> Self {
        Self { problems: vec![(key.to_string(), msg.into())] }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, m)) in self.problems.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{k}: {m}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

pub fn parse_formulation(s: &str) -> Result<Formulation, String> {
    match s {
        "primitive" | "Primitive" => Ok(Formulation::Primitive),
        "quasi_neutral" | "QuasiNeutral" | "cq" => Ok(Formulation::QuasiNeutral),
        other => Err(format!("unknown formulation `{other}` (valid: primitive, quasi_neutral)")),
    }
}

pub fn parse_scheme(s: &str) -> Result<SchemeId, String> {
    s.parse::<SchemeId>().map_err(|e| e.to_string())
}

impl RunConfig {
    /// Parses a JSON object; an empty input gives the defaults.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let text = if text.trim().is_empty() { "{}" } else { text };
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "config".to_string() } else { path };
            ConfigError::single(&key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::single("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides; values are JSON, or bare strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut obj = match serde_json::to_value(self).expect("config serializes") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::single("set", format!("expected key=value, got `{o}`")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
            obj.insert(k.to_string(), value);
        }
        Self::from_json(&serde_json::Value::Object(obj).to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn formulation(&self) -> Formulation {
        parse_formulation(&self.formulation).expect("validated")
    }

    pub fn scheme(&self) -> SchemeId {
        parse_scheme(&self.scheme).expect("validated")
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn dt(&self) -> f64 {
        self.dt_over_h * self.h()
    }

    pub fn params(&self) -> PhysicalParams {
        PhysicalParams {
            epsilon: self.epsilon,
            d_plus: self.d_plus,
            d_minus: self.d_minus,
            m_plus: self.m_plus,
            m_minus: self.m_minus,
        }
    }

    pub fn initial(&self) -> InitialData {
        InitialData {
            v0: self.v0,
            sigma: self.sigma,
            x_plus: self.x_plus_in,
            y_plus: self.y_in,
            x_minus: self.x_minus_in,
            y_minus: self.y_in,
        }
    }

    pub fn setup(&self) -> ProblemSetup {
        ProblemSetup {
            n_cells: self.n,
            obstacle: (self.circle_radius > 0.0).then_some((self.circle_center, self.circle_radius)),
            params: self.params(),
            initial: self.initial(),
            t_final: self.t_final,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let mut bad = |k: &str, m: String| problems.push((k.to_string(), m));
        let form = parse_formulation(&self.formulation);
        if let Err(m) = &form {
            bad("formulation", m.clone());
        }
        match parse_scheme(&self.scheme) {
            Err(m) => bad("scheme", m),
            Ok(SchemeId::Split) if form == Ok(Formulation::QuasiNeutral) => {
                bad("scheme", "the split scheme requires formulation = primitive".into())
            }
            Ok(_) => {}
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            bad("epsilon", format!("must be finite and ≥ 0, got {}", self.epsilon));
        } else if self.epsilon == 0.0 && form == Ok(Formulation::Primitive) {
            bad("epsilon", "ε = 0 requires formulation = quasi_neutral".into());
        }
        if self.n < 4 {
            bad("n", format!("must be at least 4, got {}", self.n));
        }
        let [cx, cy] = self.circle_center;
        let r = self.circle_radius;
        if !(r >= 0.0 && r.is_finite()) {
            bad("circle_radius", format!("must be finite and ≥ 0, got {r}"));
        } else if r > 0.0 && !(cx - r > 0.0 && cx + r < 1.0 && cy - r > 0.0 && cy + r < 1.0) {
            bad("circle_center", format!("circle ({cx}, {cy}) with radius {r} must lie inside the unit square"));
        }
        let positive = [
            ("dt_over_h", self.dt_over_h),
            ("d_plus", self.d_plus),
            ("d_minus", self.d_minus),
            ("m_plus", self.m_plus),
            ("m_minus", self.m_minus),
            ("sigma", self.sigma),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                bad(k, format!("must be finite and > 0, got {v}"));
            }
        }
        if !(self.v0 >= 0.0 && self.v0.is_finite()) {
            bad("v0", format!("must be finite and ≥ 0, got {}", self.v0));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            bad("T", format!("must be finite and ≥ 0, got {}", self.t_final));
        } else if self.n >= 4 && self.dt_over_h > 0.0 && self.dt_over_h.is_finite() {
            if let Err(e) = step_count(self.t_final, self.dt()) {
                bad("T", e.to_string());
            }
        }
        let in_fluid = |x: f64, y: f64| {
            (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) && (r <= 0.0 || (x - cx).hypot(y - cy) > r)
        };
        for (k, x) in [("x_plus_in", self.x_plus_in), ("x_minus_in", self.x_minus_in)] {
            if !in_fluid(x, self.y_in) {
                bad(k, format!("initial center ({x}, {}) lies outside the domain", self.y_in));
            }
        }
        if !(0.0..=1.0).contains(&self.y_in) {
            bad("y_in", format!("must lie in [0, 1], got {}", self.y_in));
        }
        if self.output.as_os_str().is_empty() {
            bad("output", "must not be empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_gives_defaults() {
        let c = RunConfig::from_json("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.n, 100);
        assert_eq!((c.x_plus_in, c.x_minus_in, c.y_in), (0.4, 0.6, 0.2));
        assert_eq!((c.d_plus, c.d_minus, c.m_plus, c.m_minus), (1.5, 0.5, 23.0, 265.0));
        assert_eq!((c.v0, c.sigma, c.dt_over_h), (1e-6, 0.05, 1.0));
    }

    #[test]
    fn negative_epsilon_names_the_key() {
        let e = RunConfig::from_json(r#"{"epsilon": -1}"#).unwrap_err();
        assert_eq!(e.problems[0].0, "epsilon");
    }

    #[test]
    fn unknown_scheme_lists_valid_ids() {
        let e = RunConfig::from_json(r#"{"scheme": "I7"}"#).unwrap_err();
        assert_eq!(e.problems[0].0, "scheme");
        assert!(e.problems[0].1.contains("I1, I2, I3, I4, I5, I6, split"));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = RunConfig::from_json(r#"{"epsilonn": 1e-4}"#).unwrap_err();
        assert!(e.to_string().contains("epsilonn"));
    }

    #[test]
    fn type_error_names_the_key() {
        let e = RunConfig::from_json(r#"{"sigma": "wide"}"#).unwrap_err();
        assert_eq!(e.problems[0].0, "sigma");
    }

    #[test]
    fn final_time_must_be_a_multiple_of_dt() {
        let e = RunConfig::from_json(r#"{"T": 0.105}"#).unwrap_err();
        assert_eq!(e.problems[0].0, "T");
    }

    #[test]
    fn split_needs_primitive() {
        assert!(RunConfig::from_json(r#"{"scheme": "split"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"scheme": "split", "formulation": "primitive"}"#).is_ok());
    }

    #[test]
    fn center_inside_hole_rejected() {
        let e = RunConfig::from_json(r#"{"x_plus_in": 0.5, "y_in": 0.5}"#).unwrap_err();
        assert!(e.problems.iter().any(|(k, _)| k == "x_plus_in"));
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig { epsilon: 1e-11, scheme: "I5".into(), circle_radius: 0.0, ..RunConfig::default() };
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_are_parsed_as_json() {
        let c = RunConfig::default().with_overrides(&["epsilon=1e-9".into(), "scheme=I4".into()]).unwrap();
        assert_eq!(c.epsilon, 1e-9);
        assert_eq!(c.scheme, "I4");
        assert!(RunConfig::default().with_overrides(&["n".into()]).is_err());
    }
}
