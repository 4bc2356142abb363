//! Built-in desk-scale parameterized models: a single machine infinite bus
//! and a three-machine network with an exciter limiter. Both are returned
//! validated, with analytic Jacobians registered and the canonical
//! pre / fault / post disturbance schedule.

pub mod smib;
pub mod three_machine;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::hybrid_model::{HybridSystemDefinition, ParameterSpace, PhaseSchedule};
use crate::integrator::IntegrationConfig;
use crate::recovery_metrics::RecoveryConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub nominal: f64,
    pub unit: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub name: String,
    pub state_names: Vec<String>,
    pub algebraic_names: Vec<String>,
    pub parameters: Vec<ParamInfo>,
}

/// A validated model plus its disturbance schedule, full parameter space, and
/// recommended integration / recovery settings.
pub struct ModelBundle {
    pub definition: HybridSystemDefinition,
    pub schedule: PhaseSchedule,
    pub space: ParameterSpace,
    pub integration: IntegrationConfig,
    pub recovery: RecoveryConfig,
    pub metadata: ModelMetadata,
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::BadOverride(format!("override `{key}` must be a number")))
}

/// Builds a model by name with a structured override document. Parameter
/// overrides are keyed by parameter name; `three_machine` additionally accepts
/// `fault_bus` (1..=3) and `x_fault`.
pub fn build(name: &str, overrides: &Value) -> Result<ModelBundle> {
    let map = match overrides {
        Value::Null => serde_json::Map::new(),
        Value::Object(m) => m.clone(),
        _ => {
            return Err(Error::BadOverride(
                "overrides must be a JSON object".into(),
            ))
        }
    };
    match name {
        "smib" => {
            let mut nominal: Vec<f64> = smib::PARAMS.iter().map(|(_, v, _)| *v).collect();
            for (key, value) in &map {
                let idx = smib::PARAMS
                    .iter()
                    .position(|(n, _, _)| n == key)
                    .ok_or_else(|| Error::BadOverride(format!("unknown smib override `{key}`")))?;
                nominal[idx] = as_f64(key, value)?;
            }
            if nominal[smib::IDX_T_CLEAR] < 0.0 {
                return Err(Error::BadOverride("t_clear must be >= 0".into()));
            }
            smib::build(nominal)
        }
        "three_machine" => {
            let mut nominal: Vec<f64> =
                three_machine::PARAMS.iter().map(|(_, v, _)| *v).collect();
            let mut fault_bus = 2usize;
            let mut x_fault = 0.001;
            for (key, value) in &map {
                match key.as_str() {
                    "fault_bus" => {
                        fault_bus = value.as_u64().ok_or_else(|| {
                            Error::BadOverride("fault_bus must be an integer".into())
                        })? as usize;
                    }
                    "x_fault" => x_fault = as_f64(key, value)?,
                    _ => {
                        let idx = three_machine::PARAMS
                            .iter()
                            .position(|(n, _, _)| n == key)
                            .ok_or_else(|| {
                                Error::BadOverride(format!(
                                    "unknown three_machine override `{key}`"
                                ))
                            })?;
                        nominal[idx] = as_f64(key, value)?;
                    }
                }
            }
            if nominal[three_machine::IDX_T_CLEAR] < 0.0 {
                return Err(Error::BadOverride("t_clear must be >= 0".into()));
            }
            three_machine::build(nominal, fault_bus, x_fault)
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}
