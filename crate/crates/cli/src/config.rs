//! Scenario configuration: a JSON document selecting a model, a parameter
//! space, metric and solver settings, and output locations. The parsed form
//! round-trips through serialization losslessly, and its canonical rendering
//! is hashed into every artifact for provenance.

use serde::{Deserialize, Serialize};

use recobound::hybrid_model::ParameterSpace;
use recobound::models::ModelBundle;
use recobound::{Error, IntegrationConfig, Method, RecoveryConfig, SolverConfig, StateMask};

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub overrides: serde_json::Value,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ParameterSection {
    /// Active subset of the model's parameter catalog (all parameters when
    /// omitted).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select: Option<Vec<String>>,
    /// Per-parameter box bounds, advisory metadata for sweeps and traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<std::collections::BTreeMap<String, (f64, f64)>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_time_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_events: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_threshold: Option<f64>,
}

impl IntegrationSection {
    fn apply(&self, base: &mut IntegrationConfig) {
        if let Some(v) = self.method {
            base.method = v;
        }
        if let Some(v) = self.rel_tol {
            base.rel_tol = v;
        }
        if let Some(v) = self.abs_tol {
            base.abs_tol = v;
        }
        if let Some(v) = self.event_time_tolerance {
            base.event_time_tolerance = v;
        }
        if self.max_step.is_some() {
            base.max_step = self.max_step;
        }
        if let Some(v) = self.horizon {
            base.horizon = v;
            base.output_dt = v / 400.0;
        }
        if let Some(v) = self.output_dt {
            base.output_dt = v;
        }
        if let Some(v) = self.max_events {
            base.max_events = v;
        }
        if let Some(v) = self.divergence_threshold {
            base.divergence_threshold = v;
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RecoverySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ball_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settling_window: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl RecoverySection {
    fn apply(&self, base: &mut RecoveryConfig) {
        if let Some(v) = self.horizon {
            base.horizon = v;
        }
        if let Some(v) = self.ball_radius {
            base.ball_radius = v;
        }
        if self.settling_window.is_some() {
            base.settling_window = self.settling_window;
        }
        if self.g_horizon.is_some() {
            base.g_horizon = self.g_horizon;
        }
        if let Some(v) = self.epsilon {
            base.epsilon = v;
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    /// Predictor step length for the 2-D trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_points: Option<usize>,
    /// `"positive"` or `"negative"` first tangent direction for the trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<String>,
    /// Starting point (scalar for boundary1d, boundary point for trace2d,
    /// initial parameter vector for margin); nominal values when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
    /// Dense rows of the margin weight matrix A (identity when omitted).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: String,
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub parameters: ParameterSection,
    /// Dynamic-state names entering the sensitivity norm (all states when
    /// omitted).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_mask: Option<Vec<String>>,
    #[serde(default)]
    pub integration: IntegrationSection,
    #[serde(default)]
    pub recovery: RecoverySection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl ScenarioConfig {
    pub fn parse_json(text: &str) -> Result<Self, Error> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))
    }

    /// Canonical rendering used for the provenance hash.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// FNV-1a 64-bit hash of the canonical config rendering.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

/// Everything a command needs, resolved from the config.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub bundle: ModelBundle,
    pub space: ParameterSpace,
    pub mask: StateMask,
    pub integration: IntegrationConfig,
    pub recovery: RecoveryConfig,
    pub solver: SolverConfig,
}

impl Scenario {
    pub fn resolve(config: ScenarioConfig) -> Result<Self, Error> {
        let bundle = recobound::models::build(&config.model.name, &config.model.overrides)?;

        let mut space = match &config.parameters.select {
            Some(names) => {
                let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
                bundle.space.restrict(&refs)?
            }
            None => bundle.space.clone(),
        };
        if let Some(bounds) = &config.parameters.bounds {
            for (name, (lo, hi)) in bounds {
                space = space.with_bounds(name, *lo, *hi)?;
            }
        }

        let mask = match &config.state_mask {
            Some(names) => {
                let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
                StateMask::from_names(&bundle.definition, &refs)?
            }
            None => StateMask::all(bundle.definition.n()),
        };

        let mut integration = bundle.integration.clone();
        config.integration.apply(&mut integration);
        let mut recovery = bundle.recovery.clone();
        config.recovery.apply(&mut recovery);
        recovery.validate()?;

        let mut solver = SolverConfig::default();
        if let Some(v) = config.solver.epsilon {
            solver.epsilon = v;
        }
        if let Some(v) = config.solver.max_iterations {
            solver.max_iterations = v;
        }

        Ok(Self {
            config,
            bundle,
            space,
            mask,
            integration,
            recovery,
            solver,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_losslessly() {
        let text = r#"{
            "model": {"name": "smib", "overrides": {"p_m": 0.65}},
            "parameters": {"select": ["p_m", "t_clear"]},
            "state_mask": ["delta", "omega"],
            "integration": {"rel_tol": 1e-9},
            "recovery": {"horizon": 25.0},
            "solver": {"epsilon": 1e-5, "kappa": 0.02, "n_points": 40},
            "sweep": {"parameter": "p_m", "min": 0.4, "max": 1.0, "points": 11},
            "output_dir": "out"
        }"#;
        let cfg = ScenarioConfig::parse_json(text).unwrap();
        let rendered = cfg.canonical();
        let cfg2 = ScenarioConfig::parse_json(&rendered).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(cfg.hash(), cfg2.hash());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = r#"{"model": {"name": "smib"}, "tolerance": 1.0}"#;
        assert!(ScenarioConfig::parse_json(text).is_err());
    }
}
