//! Deterministic stand-ins for the cloud detector, the fog feature
//! backbone and the fog backup detector, plus the model profiler.
//!
//! Confidence degrades linearly with QP and downscaling. Location
//! confidence degrades much more slowly than classification confidence,
//! which is what lets a low-quality stream still localize objects.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::RngExt;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{BBox, Detection, Frame, QualityLevel, SimTime, VideoChunk, MAX_QP};
use crate::quality::DeviceClass;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("invalid detector profile: {0}")]
    InvalidProfile(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("batch size list is empty")]
    EmptyBatchList,
    #[error("batch size must be positive")]
    ZeroBatch,
}

/// Per-device simulated milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceCosts {
    pub client: f64,
    pub fog: f64,
    pub cloud: f64,
}

impl DeviceCosts {
    pub fn get(&self, device: DeviceClass) -> f64 {
        match device {
            DeviceClass::Client => self.client,
            DeviceClass::Fog => self.fog,
            DeviceClass::Cloud => self.cloud,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorProfile {
    pub base_loc: f64,
    pub base_cls: f64,
    /// QP sensitivity of the classification score.
    pub lambda_q: f64,
    /// QP sensitivity of the location score.
    pub lambda_q_loc: f64,
    /// Resolution sensitivity.
    pub lambda_r: f64,
    /// QP at which no quality penalty applies.
    pub qp_ref: u8,
    /// Expected false proposals per frame.
    pub fp_rate: f64,
    /// Location score range of false proposals.
    pub fp_loc_range: [f64; 2],
    /// Area range of false proposals, as a fraction of the frame.
    pub fp_area_range: [f64; 2],
    pub infer_ms_per_frame: DeviceCosts,
}

impl Default for DetectorProfile {
    fn default() -> Self {
        DetectorProfile {
            base_loc: 0.95,
            base_cls: 0.9,
            lambda_q: 0.6,
            lambda_q_loc: 0.15,
            lambda_r: 0.5,
            qp_ref: 26,
            fp_rate: 0.3,
            fp_loc_range: [0.35, 0.65],
            fp_area_range: [0.005, 0.6],
            infer_ms_per_frame: DeviceCosts {
                client: 2500.0,
                fog: 180.0,
                cloud: 20.0,
            },
        }
    }
}

impl DetectorProfile {
    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: &str| Err(OracleError::InvalidProfile(m.to_string()));
        if !(self.lambda_q_loc < self.lambda_q) {
            return bad("lambda_q_loc must be smaller than lambda_q");
        }
        let rates = [
            self.lambda_q,
            self.lambda_q_loc,
            self.lambda_r,
            self.fp_rate,
            self.infer_ms_per_frame.client,
            self.infer_ms_per_frame.fog,
            self.infer_ms_per_frame.cloud,
        ];
        if rates.iter().any(|r| !(*r >= 0.0)) {
            return bad("all rates must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.base_loc) || !(0.0..=1.0).contains(&self.base_cls) {
            return bad("base scores must be in [0,1]");
        }
        if self.qp_ref >= MAX_QP {
            return bad("qp_ref must be below 51");
        }
        let [l0, l1] = self.fp_loc_range;
        let [a0, a1] = self.fp_area_range;
        if !(0.0 <= l0 && l0 <= l1 && l1 <= 1.0) || !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return bad("false-proposal ranges must be ordered within [0,1]");
        }
        Ok(())
    }

    fn qp_penalty(&self, qp: u8) -> f64 {
        (qp as f64 - self.qp_ref as f64).max(0.0) / (MAX_QP as f64 - self.qp_ref as f64)
    }

    /// Classification confidence for an object of `difficulty` seen at `q`.
    /// `extra_lambda_r` adds to the resolution sensitivity.
    pub fn cls_score(&self, difficulty: f64, q: &QualityLevel, extra_lambda_r: f64) -> f64 {
        let r = q.resolution_scale;
        (self.base_cls
            - difficulty
            - self.lambda_q * self.qp_penalty(q.qp)
            - (self.lambda_r + extra_lambda_r) * (1.0 - r))
            .clamp(0.0, 1.0)
    }

    pub fn loc_score(&self, difficulty: f64, q: &QualityLevel, extra_lambda_r: f64) -> f64 {
        let r = q.resolution_scale;
        (self.base_loc
            - 0.5 * difficulty
            - self.lambda_q_loc * self.qp_penalty(q.qp)
            - 0.3 * (self.lambda_r + extra_lambda_r) * (1.0 - r))
            .clamp(0.0, 1.0)
    }

    pub fn infer_time(&self, frames: usize, device: DeviceClass) -> SimTime {
        SimTime::from_millis_f64(frames as f64 * self.infer_ms_per_frame.get(device))
    }
}

/// Options for one detector pass.
#[derive(Debug, Clone, Copy)]
pub struct DetectPass {
    pub quality: QualityLevel,
    pub extra_lambda_r: f64,
    pub fp_multiplier: f64,
    pub cls_penalty: f64,
}

impl DetectPass {
    pub fn at(quality: QualityLevel) -> Self {
        DetectPass {
            quality,
            extra_lambda_r: 0.0,
            fp_multiplier: 1.0,
            cls_penalty: 0.0,
        }
    }
}

fn jitter(bbox: &BBox, r: f64, rng: &mut impl rand::Rng, width: u32, height: u32) -> BBox {
    let amp = (1.0 - r).max(0.0) * 0.1;
    if amp == 0.0 {
        return *bbox;
    }
    let dx = rng.random_range(-amp..=amp) * bbox.w;
    let dy = rng.random_range(-amp..=amp) * bbox.h;
    let dw = rng.random_range(-amp..=amp) * bbox.w;
    let dh = rng.random_range(-amp..=amp) * bbox.h;
    BBox::new(bbox.x + dx, bbox.y + dy, bbox.w + dw, bbox.h + dh)
        .clamp_to(width, height)
        .unwrap_or(*bbox)
}

fn object_detection(
    frame: &Frame,
    obj: &crate::datamodel::GroundTruthObject,
    profile: &DetectorProfile,
    pass: &DetectPass,
    seed_value: u64,
) -> Detection {
    let mut rng = seed::rng(
        seed_value,
        &[seed::TAG_DETECT, frame.frame_index, obj.object_id],
    );
    let cls_score = (profile.cls_score(obj.difficulty, &pass.quality, pass.extra_lambda_r)
        - pass.cls_penalty)
        .clamp(0.0, 1.0);
    let loc_score = profile.loc_score(obj.difficulty, &pass.quality, pass.extra_lambda_r);
    Detection {
        bbox: jitter(
            &obj.bbox,
            pass.quality.resolution_scale,
            &mut rng,
            frame.width,
            frame.height,
        ),
        class_id: (cls_score > 0.0).then_some(obj.class_id),
        loc_score,
        cls_score,
    }
}

fn false_proposals(
    frame: &Frame,
    profile: &DetectorProfile,
    pass: &DetectPass,
    seed_value: u64,
) -> Vec<Detection> {
    let rate = profile.fp_rate * pass.fp_multiplier;
    if rate <= 0.0 {
        return Vec::new();
    }
    let mut rng = seed::rng(seed_value, &[seed::TAG_FALSE_PROPOSAL, frame.frame_index]);
    let count = Poisson::new(rate).map(|p| p.sample(&mut rng)).unwrap_or(0.0) as usize;
    let [l0, l1] = profile.fp_loc_range;
    let [a0, a1] = profile.fp_area_range;
    (0..count)
        .map(|_| {
            let area = rng.random_range(a0..=a1) * frame.area();
            let aspect: f64 = rng.random_range(0.5..=2.0);
            let w = (area * aspect).sqrt().min(frame.width as f64);
            let h = (area / w).min(frame.height as f64);
            let x = rng.random_range(0.0..=(frame.width as f64 - w).max(0.0));
            let y = rng.random_range(0.0..=(frame.height as f64 - h).max(0.0));
            Detection {
                bbox: BBox::new(x, y, w, h),
                class_id: None,
                loc_score: rng.random_range(l0..=l1),
                cls_score: 0.0,
            }
        })
        .collect()
}

/// Runs one detector pass over every frame.
pub fn detect_frames(
    frames: &[Frame],
    profile: &DetectorProfile,
    pass: &DetectPass,
    seed_value: u64,
) -> Vec<(u64, Vec<Detection>)> {
    frames
        .iter()
        .map(|f| {
            let mut dets: Vec<Detection> = f
                .objects
                .iter()
                .map(|o| object_detection(f, o, profile, pass, seed_value))
                .collect();
            dets.extend(false_proposals(f, profile, pass, seed_value));
            (f.frame_index, dets)
        })
        .collect()
}

/// Cloud detector on a chunk at the chunk's own quality.
pub fn cloud_detect(
    chunk: &VideoChunk,
    profile: &DetectorProfile,
    seed_value: u64,
) -> Vec<(u64, Vec<Detection>)> {
    detect_frames(&chunk.keyframes, profile, &DetectPass::at(chunk.quality), seed_value)
}

/// Detector restricted to the given regions: each region yields the
/// detection of the object it mostly covers, if any.
pub fn detect_in_regions(
    frame: &Frame,
    regions: &[BBox],
    profile: &DetectorProfile,
    pass: &DetectPass,
    seed_value: u64,
) -> Vec<Detection> {
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for region in regions {
        if let Some(obj) = frame.dominant_object(region) {
            if seen.contains(&obj.object_id) {
                continue;
            }
            seen.push(obj.object_id);
            out.push(object_detection(frame, obj, profile, pass, seed_value));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackupConfig {
    /// Subtracted from the classification score.
    pub cls_penalty: f64,
    /// Multiplies the false-proposal rate.
    pub fp_multiplier: f64,
    pub infer_ms_per_frame: f64,
}

impl Default for BackupConfig {
    fn default() -> Self {
        BackupConfig {
            cls_penalty: 0.25,
            fp_multiplier: 3.0,
            infer_ms_per_frame: 30.0,
        }
    }
}

/// Small detector on the fog node, used while the cloud is unreachable.
pub fn backup_detect(
    chunk: &VideoChunk,
    profile: &DetectorProfile,
    backup: &BackupConfig,
    seed_value: u64,
) -> Vec<(u64, Vec<Detection>)> {
    let pass = DetectPass {
        quality: chunk.quality,
        extra_lambda_r: 0.0,
        fp_multiplier: backup.fp_multiplier,
        cls_penalty: backup.cls_penalty,
    };
    detect_frames(&chunk.keyframes, profile, &pass, seed_value)
}

pub fn backup_infer_time(backup: &BackupConfig, frames: usize) -> SimTime {
    SimTime::from_millis_f64(frames as f64 * backup.infer_ms_per_frame)
}

// ---------------------------------------------------------------------------
// Features

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub dim: usize,
    pub noise_sigma: f64,
    /// Shift per unit of drift phase along each class's drift direction.
    pub drift_scale: f64,
    /// Expected norm of each class prototype.
    pub prototype_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            dim: 64,
            noise_sigma: 0.3,
            drift_scale: 1.0,
            prototype_scale: 2.0,
        }
    }
}

/// Generates backbone feature vectors for cropped regions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSynthesizer {
    pub config: FeatureConfig,
    pub prototypes: Vec<Vec<f64>>,
    pub drift_directions: Vec<Vec<f64>>,
}

impl FeatureSynthesizer {
    pub fn new(config: FeatureConfig, classes: usize, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, &[seed::TAG_PROTOTYPE]);
        let std = config.prototype_scale / (config.dim as f64).sqrt();
        let normal = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("finite std");
        let prototypes = (0..classes)
            .map(|_| (0..config.dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let drift_directions = (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..config.dim).map(|_| unit.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        FeatureSynthesizer {
            config,
            prototypes,
            drift_directions,
        }
    }

    /// Length of produced vectors, bias coordinate included.
    pub fn feature_len(&self) -> usize {
        self.config.dim + 1
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    /// Class mean at a given drift phase, without the bias coordinate.
    pub fn class_mean(&self, class_id: usize, drift_phase: f64) -> Vec<f64> {
        let shift = self.config.drift_scale * drift_phase;
        self.prototypes[class_id]
            .iter()
            .zip(&self.drift_directions[class_id])
            .map(|(m, u)| m + shift * u)
            .collect()
    }

    /// Features of the crop `region` of `frame`; a constant 1 is appended.
    pub fn extract(&self, region: &BBox, frame: &Frame, seed_value: u64) -> Vec<f64> {
        let sigma = self.config.noise_sigma;
        let (mut x, mut rng) = match frame.dominant_object(region) {
            Some(obj) => (
                self.class_mean(obj.class_id, obj.drift_phase),
                seed::rng(
                    seed_value,
                    &[seed::TAG_FEATURE, frame.frame_index, obj.object_id],
                ),
            ),
            None => (
                vec![0.0; self.config.dim],
                seed::rng(
                    seed_value,
                    &[
                        seed::TAG_BACKGROUND,
                        frame.frame_index,
                        region.x.to_bits(),
                        region.y.to_bits(),
                        region.w.to_bits(),
                        region.h.to_bits(),
                    ],
                ),
            ),
        };
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("finite sigma");
            for v in x.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        x.push(1.0);
        x
    }
}

pub fn extract_features(
    region: &BBox,
    frame: &Frame,
    synth: &FeatureSynthesizer,
    seed_value: u64,
) -> Vec<f64> {
    synth.extract(region, frame, seed_value)
}

// ---------------------------------------------------------------------------
// Profiling

/// Linear batch cost: `fixed_ms + per_item_ms * batch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub fixed_ms: f64,
    pub per_item_ms: f64,
}

impl CostCurve {
    pub fn latency_ms(&self, batch: usize) -> f64 {
        self.fixed_ms + self.per_item_ms * batch as f64
    }

    pub fn latency(&self, batch: usize) -> SimTime {
        SimTime::from_millis_f64(self.latency_ms(batch))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    pub device_class: DeviceClass,
    /// Batch size to total simulated milliseconds.
    pub latency_ms: BTreeMap<usize, f64>,
    pub accuracy_note: String,
}

/// Anything that can tell the profiler a model's cost curve.
pub trait CostSource {
    fn cost_curve(&self, model_id: &str, device: DeviceClass) -> Option<CostCurve>;
}

/// Persistent store of model profiles keyed by (model, device).
#[derive(Debug, Default)]
pub struct ModelZoo {
    profiles: Mutex<BTreeMap<(String, DeviceClass), ModelProfile>>,
    runs: Mutex<usize>,
}

impl ModelZoo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, model_id: &str, device: DeviceClass) -> Option<ModelProfile> {
        self.profiles
            .lock()
            .expect("zoo lock")
            .get(&(model_id.to_string(), device))
            .cloned()
    }

    /// Number of profiles actually measured, cache hits excluded.
    pub fn profiling_runs(&self) -> usize {
        *self.runs.lock().expect("zoo lock")
    }

    /// All stored profiles as JSON records.
    pub fn to_json(&self) -> serde_json::Value {
        let profiles = self.profiles.lock().expect("zoo lock");
        serde_json::Value::Array(
            profiles
                .values()
                .map(|p| serde_json::to_value(p).expect("profile serializes"))
                .collect(),
        )
    }

    pub fn profile_model(
        &self,
        source: &dyn CostSource,
        model_id: &str,
        device: DeviceClass,
        batch_sizes: &[usize],
    ) -> Result<ModelProfile, OracleError> {
        if batch_sizes.is_empty() {
            return Err(OracleError::EmptyBatchList);
        }
        if batch_sizes.contains(&0) {
            return Err(OracleError::ZeroBatch);
        }
        let curve = source
            .cost_curve(model_id, device)
            .ok_or_else(|| OracleError::UnknownModel(model_id.to_string()))?;
        let key = (model_id.to_string(), device);
        let mut profiles = self.profiles.lock().expect("zoo lock");
        if let Some(p) = profiles.get_mut(&key) {
            let missing: Vec<usize> = batch_sizes
                .iter()
                .copied()
                .filter(|b| !p.latency_ms.contains_key(b))
                .collect();
            if missing.is_empty() {
                return Ok(p.clone());
            }
            for b in missing {
                p.latency_ms.insert(b, curve.latency_ms(b));
            }
            *self.runs.lock().expect("zoo lock") += 1;
            return Ok(p.clone());
        }
        let profile = ModelProfile {
            model_id: model_id.to_string(),
            device_class: device,
            latency_ms: batch_sizes.iter().map(|b| (*b, curve.latency_ms(*b))).collect(),
            accuracy_note: format!("linear cost curve {curve:?}"),
        };
        profiles.insert(key, profile.clone());
        *self.runs.lock().expect("zoo lock") += 1;
        Ok(profile)
    }
}
