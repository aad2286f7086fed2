use serde::{Deserialize, Serialize};

use crate::baselines::Strategy;
use crate::coordinator::{ModelCosts, ProtocolConfig};
use crate::datamodel::{ChunkingConfig, DatasetSpec};
use crate::hitl::LearnerConfig;
use crate::metrics::MetricsConfig;
use crate::oracle::{BackupConfig, DetectorProfile, FeatureConfig};
use crate::quality::{EncodeTimeModel, SizeModel};
use crate::runtime::{AutoscaleConfig, HeartbeatConfig, NetworkLink, Outage, Policy};

/// Where an experiment's video comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated from a spec; the experiment seed is used unless given.
    Generate {
        #[serde(default)]
        spec: DatasetSpec,
        #[serde(default)]
        seed: Option<u64>,
    },
    Path { path: String },
    /// A dataset registered with the gateway.
    Id { id: String },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Generate {
            spec: DatasetSpec::default(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub wan_mbps: f64,
    pub wan_delay_ms: f64,
    /// Applies to both WAN directions.
    pub outages: Vec<Outage>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            wan_mbps: 10.0,
            wan_delay_ms: 20.0,
            outages: Vec::new(),
        }
    }
}

impl NetworkConfig {
    pub fn wan(&self) -> NetworkLink {
        let mut l = NetworkLink::new("fog_cloud", self.wan_mbps * 1e6, self.wan_delay_ms);
        l.outages = self.outages.clone();
        l
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorMode {
    /// Labels from ground truth, for unattended runs.
    Scripted,
    /// Labels arrive through the annotation API.
    External,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorConfig {
    pub mode: AnnotatorMode,
    /// Scripted labels per finished chunk; older leftovers are dismissed.
    pub labels_per_chunk: usize,
    /// Time a scripted label takes.
    pub label_delay_s: f64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig {
            mode: AnnotatorMode::Scripted,
            labels_per_chunk: 2,
            label_delay_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Batch,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailoverConfig {
    pub heartbeat: HeartbeatConfig,
    pub policy: Policy,
    /// Backup detections at or above this score become labels.
    pub backup_accept: f64,
}

impl Default for FailoverConfig {
    fn default() -> Self {
        FailoverConfig {
            heartbeat: HeartbeatConfig::default(),
            policy: Policy::backup_failover(),
            backup_accept: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub strategy: Strategy,
    pub protocol: ProtocolConfig,
    pub detector: DetectorProfile,
    pub backup: BackupConfig,
    pub features: FeatureConfig,
    pub size_model: SizeModel,
    pub encode_time: EncodeTimeModel,
    pub costs: ModelCosts,
    pub chunking: ChunkingConfig,
    pub network: NetworkConfig,
    pub failover: FailoverConfig,
    pub autoscale: AutoscaleConfig,
    pub learner: LearnerConfig,
    pub annotator: AnnotatorConfig,
    pub metrics: MetricsConfig,
    pub monitor_period_s: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Simulated seconds per wall-clock second in live mode.
    pub pacing: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            strategy: Strategy::Vpaas,
            protocol: ProtocolConfig::default(),
            detector: DetectorProfile::default(),
            backup: BackupConfig::default(),
            features: FeatureConfig::default(),
            size_model: SizeModel::default(),
            encode_time: EncodeTimeModel::default(),
            costs: ModelCosts::default(),
            chunking: ChunkingConfig::default(),
            network: NetworkConfig::default(),
            failover: FailoverConfig::default(),
            autoscale: AutoscaleConfig::default(),
            learner: LearnerConfig::default(),
            annotator: AnnotatorConfig::default(),
            metrics: MetricsConfig::default(),
            monitor_period_s: 1.0,
            seed: 0,
            mode: Mode::Batch,
            pacing: 1.0,
        }
    }
}

/// One invalid field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl ExperimentConfig {
    /// Checks every section; returns all failures, not just the first.
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        let mut push = |field: &str, r: Result<(), String>| {
            if let Err(message) = r {
                errs.push(FieldError {
                    field: field.to_string(),
                    message,
                });
            }
        };
        if let DatasetSource::Generate { spec, .. } = &self.dataset {
            push("dataset.spec", spec.validate().map_err(|e| e.to_string()));
        }
        if let Err((field, message)) = self.strategy.validate() {
            push(&field, Err(message));
        }
        push("size_model", self.size_model.validate().map_err(|e| e.to_string()));
        push("protocol", self.protocol.validate(&self.size_model));
        push("detector", self.detector.validate().map_err(|e| e.to_string()));
        push("encode_time", self.encode_time.validate().map_err(|e| e.to_string()));
        push(
            "features",
            if self.features.dim == 0 || !(self.features.noise_sigma >= 0.0) {
                Err("dim must be positive and noise_sigma non-negative".into())
            } else {
                Ok(())
            },
        );
        push(
            "backup",
            if (0.0..=1.0).contains(&self.backup.cls_penalty) && self.backup.fp_multiplier >= 0.0 {
                Ok(())
            } else {
                Err("cls_penalty must be in [0,1] and fp_multiplier non-negative".into())
            },
        );
        push(
            "chunking",
            if self.chunking.keyframe_interval >= 1 && self.chunking.keyframes_per_chunk >= 1 {
                Ok(())
            } else {
                Err("keyframe_interval and keyframes_per_chunk must be positive".into())
            },
        );
        push("network", self.network.wan().validate().map_err(|e| e.to_string()));
        push(
            "failover.heartbeat",
            self.failover.heartbeat.validate().map_err(|e| e.to_string()),
        );
        push("failover.policy", self.failover.policy.validate().map_err(|e| e.to_string()));
        push(
            "failover.backup_accept",
            if (0.0..=1.0).contains(&self.failover.backup_accept) {
                Ok(())
            } else {
                Err("must be in [0,1]".into())
            },
        );
        push("autoscale", self.autoscale.validate().map_err(|e| e.to_string()));
        push("learner", self.learner.validate().map_err(|e| e.to_string()));
        push(
            "metrics.matching.iou_threshold",
            if self.metrics.matching.iou_threshold > 0.0 && self.metrics.matching.iou_threshold < 1.0 {
                Ok(())
            } else {
                Err("must be in (0,1)".into())
            },
        );
        push(
            "metrics.price_per_frame",
            if self.metrics.price_per_frame >= 0.0 {
                Ok(())
            } else {
                Err("must be non-negative".into())
            },
        );
        push(
            "monitor_period_s",
            if self.monitor_period_s > 0.0 {
                Ok(())
            } else {
                Err("must be positive".into())
            },
        );
        push(
            "pacing",
            if self.pacing > 0.0 && self.pacing.is_finite() {
                Ok(())
            } else {
                Err("must be positive".into())
            },
        );
        push(
            "annotator.label_delay_s",
            if self.annotator.label_delay_s >= 0.0 {
                Ok(())
            } else {
                Err("must be non-negative".into())
            },
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}
