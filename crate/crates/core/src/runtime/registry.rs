use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::RuntimeError;
use crate::oracle::{CostCurve, CostSource, ModelProfile, ModelZoo};
use crate::quality::DeviceClass;

/// Batch sizes measured when an inference function is registered.
pub const PROFILE_BATCHES: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionKind {
    Decode,
    Encode,
    Preprocess,
    Infer,
    Postprocess,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub function_id: String,
    pub kind: FunctionKind,
    pub device_class: DeviceClass,
    pub cost: CostCurve,
    #[serde(default = "one")]
    pub replicas: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum Trigger {
    CloudUnreachable,
    CloudReachable,
    QueueDepthAbove(f64),
    QueueDepthBelow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    UseCloud,
    UseBackup,
    /// Keep chunks on the fog until the cloud answers again.
    HoldForCloud,
    ScaleUp,
    ScaleDown,
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub trigger: Trigger,
    pub action: Action,
}

/// What a policy is evaluated against.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Observation {
    pub cloud_reachable: bool,
    pub queue_depth: f64,
}

impl Trigger {
    fn fires(&self, obs: &Observation) -> bool {
        match *self {
            Trigger::CloudUnreachable => !obs.cloud_reachable,
            Trigger::CloudReachable => obs.cloud_reachable,
            Trigger::QueueDepthAbove(k) => obs.queue_depth > k,
            Trigger::QueueDepthBelow(k) => obs.queue_depth < k,
        }
    }
}

/// Declarative trigger → action rules; first match wins, else the default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub policy_id: String,
    pub rules: Vec<Rule>,
    pub default_action: Option<Action>,
}

impl Policy {
    /// Cloud outage → backup detector on the fog.
    pub fn backup_failover() -> Self {
        Policy {
            policy_id: "backup_failover".into(),
            rules: vec![Rule {
                trigger: Trigger::CloudUnreachable,
                action: Action::UseBackup,
            }],
            default_action: Some(Action::UseCloud),
        }
    }

    /// Cloud outage → wait for the cloud.
    pub fn hold_for_cloud() -> Self {
        Policy {
            policy_id: "hold_for_cloud".into(),
            rules: vec![Rule {
                trigger: Trigger::CloudUnreachable,
                action: Action::HoldForCloud,
            }],
            default_action: Some(Action::UseCloud),
        }
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.default_action.is_none() {
            return Err(RuntimeError::NoDefaultAction(self.policy_id.clone()));
        }
        Ok(())
    }

    pub fn decide(&self, obs: &Observation) -> Action {
        self.rules
            .iter()
            .find(|r| r.trigger.fires(obs))
            .map(|r| r.action)
            .or(self.default_action)
            .unwrap_or(Action::Continue)
    }
}

/// Function and policy registry. Registering an inference function profiles
/// it into the model zoo.
#[derive(Debug, Default)]
pub struct FunctionRegistry {
    functions: BTreeMap<String, FunctionSpec>,
    policies: BTreeMap<String, Policy>,
    zoo: Arc<ModelZoo>,
}

impl CostSource for FunctionRegistry {
    fn cost_curve(&self, model_id: &str, device: DeviceClass) -> Option<CostCurve> {
        self.functions
            .get(model_id)
            .filter(|f| f.device_class == device)
            .map(|f| f.cost)
    }
}

impl FunctionRegistry {
    pub fn new(zoo: Arc<ModelZoo>) -> Self {
        FunctionRegistry {
            functions: BTreeMap::new(),
            policies: BTreeMap::new(),
            zoo,
        }
    }

    pub fn zoo(&self) -> &ModelZoo {
        &self.zoo
    }

    pub fn register_function(&mut self, spec: FunctionSpec) -> Result<String, RuntimeError> {
        if self.functions.contains_key(&spec.function_id) {
            return Err(RuntimeError::Duplicate(spec.function_id));
        }
        if !(spec.cost.fixed_ms >= 0.0 && spec.cost.per_item_ms >= 0.0) {
            return Err(RuntimeError::Config(format!(
                "function `{}` cost curve must be non-negative",
                spec.function_id
            )));
        }
        let id = spec.function_id.clone();
        let (kind, device) = (spec.kind, spec.device_class);
        self.functions.insert(id.clone(), spec);
        if kind == FunctionKind::Infer {
            if let Err(e) = self.zoo.profile_model(&*self, &id, device, &PROFILE_BATCHES) {
                self.functions.remove(&id);
                return Err(e.into());
            }
        }
        Ok(id)
    }

    pub fn register_policy(&mut self, policy: Policy) -> Result<String, RuntimeError> {
        policy.validate()?;
        if self.policies.contains_key(&policy.policy_id) {
            return Err(RuntimeError::Duplicate(policy.policy_id));
        }
        let id = policy.policy_id.clone();
        self.policies.insert(id.clone(), policy);
        Ok(id)
    }

    pub fn function(&self, id: &str) -> Option<&FunctionSpec> {
        self.functions.get(id)
    }

    pub fn policy(&self, id: &str) -> Option<&Policy> {
        self.policies.get(id)
    }

    pub fn profile(&self, id: &str) -> Option<ModelProfile> {
        let f = self.functions.get(id)?;
        self.zoo.get(id, f.device_class)
    }

    pub fn set_replicas(&mut self, id: &str, replicas: u32) -> Result<(), RuntimeError> {
        let f = self
            .functions
            .get_mut(id)
            .ok_or_else(|| RuntimeError::Unknown(id.to_string()))?;
        f.replicas = replicas;
        Ok(())
    }
}
