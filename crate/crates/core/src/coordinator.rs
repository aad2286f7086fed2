//! High/low quality streaming between fog and cloud.
//!
//! Per chunk: the fog re-encodes the camera stream to a low quality and
//! uploads it; the cloud runs its detector once; confident detections come
//! back as labels and the remaining plausible regions come back as bare
//! coordinates; the fog crops those regions from its high-quality copy and
//! classifies them with its one-vs-all head, in dynamic batches.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use rand::RngExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{BBox, Detection, Frame, LabelResult, LabelSource, QualityLevel, SimTime, VideoChunk};
use crate::hitl::{HitlState, RegionCandidate, TaskPrediction};
use crate::oracle::{
    backup_detect, backup_infer_time, cloud_detect, BackupConfig, CostCurve, DetectorProfile,
    FeatureSynthesizer,
};
use crate::quality::{reencode, DeviceClass, EncodeTimeModel, SizeModel};
use crate::runtime::{LinkState, NetworkLink, RuntimeError, Worker};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("cloud unavailable for chunk {chunk_id} at {at}")]
    CloudUnavailable { chunk_id: u64, at: SimTime },
    #[error("quality error: {0}")]
    Quality(#[from] crate::quality::QualityError),
    #[error("classifier error: {0}")]
    Learn(#[from] crate::hitl::LearnError),
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterThresholds {
    /// Minimum location confidence of an uncertain region.
    pub loc: f64,
    /// Regions overlapping a label by more than this are dropped.
    pub iou: f64,
    /// Regions larger than this fraction of the frame are background.
    pub back: f64,
    /// Classification confidence at which a detection is a label outright.
    pub cls_accept: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            loc: 0.5,
            iou: 0.3,
            back: 0.4,
            cls_accept: 0.8,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("loc", self.loc),
            ("iou", self.iou),
            ("back", self.back),
            ("cls_accept", self.cls_accept),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(format!("threshold `{name}` must be in (0,1)"));
            }
        }
        Ok(())
    }
}

/// Splits detections into confident labels and uncertain regions. Stages run
/// in a fixed order: location threshold, overlap with labels, background size.
pub fn filter_regions(
    dets: &[Detection],
    frame_area: f64,
    t: &FilterThresholds,
) -> (Vec<Detection>, Vec<BBox>) {
    let labels: Vec<Detection> = dets
        .iter()
        .filter(|d| d.cls_score >= t.cls_accept)
        .copied()
        .collect();
    let uncertain = dets
        .iter()
        .filter(|d| d.cls_score < t.cls_accept)
        .filter(|d| d.loc_score >= t.loc)
        .filter(|d| {
            let max_iou = labels.iter().map(|l| iou(&l.bbox, &d.bbox)).fold(0.0, f64::max);
            max_iou <= t.iou
        })
        .filter(|d| d.bbox.area() / frame_area <= t.back)
        .map(|d| d.bbox)
        .collect();
    (labels, uncertain)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatcherConfig {
    pub max_batch: usize,
    pub max_wait_ms: f64,
}

impl Default for BatcherConfig {
    fn default() -> Self {
        BatcherConfig {
            max_batch: 8,
            max_wait_ms: 20.0,
        }
    }
}

impl BatcherConfig {
    pub fn max_wait(&self) -> SimTime {
        SimTime::from_millis_f64(self.max_wait_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub dispatch: SimTime,
    /// Items with their arrival times, FIFO.
    pub items: Vec<(T, SimTime)>,
}

/// Size-or-timeout batcher: a batch leaves when it is full or when its
/// oldest item has waited `max_wait`.
#[derive(Debug, Clone)]
pub struct DynamicBatcher<T> {
    cfg: BatcherConfig,
    queue: VecDeque<(T, SimTime)>,
}

impl<T> DynamicBatcher<T> {
    pub fn new(cfg: BatcherConfig) -> Self {
        DynamicBatcher {
            cfg: BatcherConfig {
                max_batch: cfg.max_batch.max(1),
                ..cfg
            },
            queue: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// When the oldest queued item times out.
    pub fn deadline(&self) -> Option<SimTime> {
        self.queue.front().map(|(_, t)| *t + self.cfg.max_wait())
    }

    /// Flushes a timed-out batch if one is due at `now`.
    pub fn poll(&mut self, now: SimTime) -> Option<Batch<T>> {
        let deadline = self.deadline()?;
        (now >= deadline).then(|| self.take(deadline))
    }

    /// Queues an item; returns a batch if it filled up.
    pub fn push(&mut self, item: T, now: SimTime) -> Option<Batch<T>> {
        self.queue.push_back((item, now));
        (self.queue.len() >= self.cfg.max_batch).then(|| self.take(now))
    }

    pub fn flush(&mut self) -> Option<Batch<T>> {
        let deadline = self.deadline()?;
        Some(self.take(deadline))
    }

    fn take(&mut self, dispatch: SimTime) -> Batch<T> {
        let n = self.queue.len().min(self.cfg.max_batch);
        Batch {
            dispatch,
            items: self.queue.drain(..n).collect(),
        }
    }
}

/// Batches a stream whose arrival times are known up front.
pub fn dynamic_batch<T>(arrivals: Vec<(T, SimTime)>, cfg: BatcherConfig) -> Vec<Batch<T>> {
    let mut b = DynamicBatcher::new(cfg);
    let mut out = Vec::new();
    for (item, at) in arrivals {
        while let Some(batch) = b.poll(at) {
            if batch.dispatch < at || b.is_empty() {
                out.push(batch);
            } else {
                out.push(batch);
            }
        }
        out.extend(b.push(item, at));
    }
    while let Some(batch) = b.flush() {
        out.push(batch);
    }
    out
}

/// Which regions are sent to a human.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewPolicy {
    /// Fog predictions scoring below this are queued for annotation.
    pub below_score: f64,
    /// Fraction of the remaining fog predictions sampled for annotation.
    pub sample_rate: f64,
}

impl Default for ReviewPolicy {
    fn default() -> Self {
        ReviewPolicy {
            below_score: 2.5,
            sample_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    /// Quality uploaded to the cloud.
    pub low_quality: QualityLevel,
    /// Quality of region re-sends for the two-round baseline.
    pub high_quality: QualityLevel,
    pub thresholds: FilterThresholds,
    pub batcher: BatcherConfig,
    /// Fog predictions below this score are not emitted as labels.
    pub fog_min_score: f64,
    /// Same cut once the classifier answers with its snapshot ensemble,
    /// whose outputs are fitted to 0/1 targets.
    pub fog_min_ensemble_score: f64,
    /// Wire size of one returned region or label.
    pub region_bytes: u64,
    pub review: ReviewPolicy,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            low_quality: QualityLevel {
                resolution_scale: 0.8,
                qp: 36,
            },
            high_quality: QualityLevel {
                resolution_scale: 0.8,
                qp: 26,
            },
            thresholds: FilterThresholds::default(),
            batcher: BatcherConfig::default(),
            fog_min_score: 1.0,
            fog_min_ensemble_score: 0.5,
            region_bytes: 16,
            review: ReviewPolicy::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self, size: &SizeModel) -> Result<(), String> {
        self.low_quality.validate()?;
        self.high_quality.validate()?;
        self.thresholds.validate()?;
        if self.batcher.max_batch == 0 || !(self.batcher.max_wait_ms >= 0.0) {
            return Err("batcher needs max_batch >= 1 and max_wait_ms >= 0".into());
        }
        let lo = size.bytes_for_pixels(1.0, &self.low_quality);
        let hi = size.bytes_for_pixels(1.0, &self.high_quality);
        if !(lo < hi) {
            return Err("low_quality must encode smaller than high_quality".into());
        }
        if !(0.0..=1.0).contains(&self.review.sample_rate) {
            return Err("review.sample_rate must be in [0,1]".into());
        }
        Ok(())
    }
}

/// Latency knobs for models the coordinator and baselines run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelCosts {
    /// Fog one-vs-all classifier per batch, backbone included.
    pub fog_classifier: CostCurve,
    /// Cloud super-resolution per frame.
    pub sr_ms_per_frame: f64,
    /// One incremental update on the fog GPU.
    pub train_ms_per_label: f64,
}

impl Default for ModelCosts {
    fn default() -> Self {
        ModelCosts {
            fog_classifier: CostCurve {
                fixed_ms: 6.0,
                per_item_ms: 2.0,
            },
            sr_ms_per_frame: 30.0,
            train_ms_per_label: 120.0,
        }
    }
}

/// A cloud model call and the frames it processed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudInvocation {
    pub model: String,
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkOutcome {
    Labeled,
    LabeledByBackup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMark {
    pub stage: String,
    pub at: SimTime,
}

/// Everything one chunk did on the wire and in the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkTrace {
    pub scene: usize,
    pub chunk_id: u64,
    pub strategy: String,
    /// First frame of the chunk's window.
    pub window_start: u64,
    pub keyframe_indices: Vec<u64>,
    /// Size of the chunk at camera quality.
    pub original_bytes: u64,
    pub bytes_client_to_fog: u64,
    /// WAN upload (fog or client to cloud).
    pub bytes_to_cloud: u64,
    pub bytes_cloud_to_fog: u64,
    pub cloud_invocations: Vec<CloudInvocation>,
    pub uncertain_regions: usize,
    pub stages: Vec<StageMark>,
    pub labels: Vec<LabelResult>,
    pub outcome: ChunkOutcome,
}

impl ChunkTrace {
    pub fn new(strategy: &str, chunk: &VideoChunk) -> Self {
        ChunkTrace {
            scene: 0,
            chunk_id: chunk.chunk_id,
            strategy: strategy.to_string(),
            window_start: chunk.window_start,
            keyframe_indices: chunk.keyframes.iter().map(|f| f.frame_index).collect(),
            original_bytes: chunk.encoded_bytes,
            bytes_client_to_fog: 0,
            bytes_to_cloud: 0,
            bytes_cloud_to_fog: 0,
            cloud_invocations: Vec::new(),
            uncertain_regions: 0,
            stages: Vec::new(),
            labels: Vec::new(),
            outcome: ChunkOutcome::Labeled,
        }
    }

    pub fn mark(&mut self, stage: &str, at: SimTime) {
        self.stages.push(StageMark {
            stage: stage.to_string(),
            at,
        });
    }

    pub fn cloud_frames(&self) -> usize {
        self.cloud_invocations.iter().map(|c| c.frames).sum()
    }

    pub fn stage(&self, name: &str) -> Option<SimTime> {
        self.stages.iter().find(|s| s.stage == name).map(|s| s.at)
    }
}

/// Writes traces as JSON lines.
pub fn write_traces<W: std::io::Write>(traces: &[ChunkTrace], mut out: W) -> std::io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Network, devices and models a chunk runs against.
#[derive(Debug)]
pub struct SimEnv {
    pub lan: LinkState,
    pub uplink: LinkState,
    pub downlink: LinkState,
    pub size: SizeModel,
    pub encode: EncodeTimeModel,
    pub detector: DetectorProfile,
    pub backup: BackupConfig,
    pub synth: FeatureSynthesizer,
    pub costs: ModelCosts,
    pub fog_encoder: Worker,
    pub fog_gpu: Worker,
    pub cloud_gpu: Worker,
    pub hitl: Arc<Mutex<HitlState>>,
    /// Earliest time work on the next chunk may start.
    pub clock: SimTime,
    pub seed: u64,
}

impl SimEnv {
    pub fn new(
        wan: NetworkLink,
        detector: DetectorProfile,
        synth: FeatureSynthesizer,
        hitl: HitlState,
        seed: u64,
    ) -> Self {
        let mut down = wan.clone();
        down.name = "cloud_fog".into();
        SimEnv {
            lan: LinkState::new(NetworkLink::lan()),
            uplink: LinkState::new(wan),
            downlink: LinkState::new(down),
            size: SizeModel::default(),
            encode: EncodeTimeModel::default(),
            detector,
            backup: BackupConfig::default(),
            synth,
            costs: ModelCosts::default(),
            fog_encoder: Worker::default(),
            fog_gpu: Worker::default(),
            cloud_gpu: Worker::default(),
            hitl: Arc::new(Mutex::new(hitl)),
            clock: SimTime::ZERO,
            seed,
        }
    }

    pub fn cloud_down(&mut self, chunk_id: u64, at: SimTime) -> ProtocolError {
        ProtocolError::CloudUnavailable { chunk_id, at }
    }

    /// Uploads to the cloud, mapping an outage to `CloudUnavailable`.
    pub fn upload(&mut self, chunk_id: u64, bytes: u64, at: SimTime) -> Result<SimTime, ProtocolError> {
        self.uplink.send(bytes, at).map_err(|e| match e {
            RuntimeError::LinkDown { at, .. } => ProtocolError::CloudUnavailable { chunk_id, at },
            _ => ProtocolError::CloudUnavailable { chunk_id, at },
        })
    }

    pub fn download(&mut self, chunk_id: u64, bytes: u64, at: SimTime) -> Result<SimTime, ProtocolError> {
        self.downlink.send(bytes, at).map_err(|_| ProtocolError::CloudUnavailable { chunk_id, at })
    }

    /// Checks both WAN directions before committing any cloud work.
    pub fn cloud_reachable(&self, at: SimTime) -> bool {
        self.uplink.link.is_up(at) && self.downlink.link.is_up(at)
    }
}

fn keyframe<'a>(chunk: &'a VideoChunk, frame_index: u64) -> &'a Frame {
    chunk
        .keyframes
        .iter()
        .find(|f| f.frame_index == frame_index)
        .expect("detections refer to chunk keyframes")
}

/// Classifies regions on the fog in dynamic batches. Returns labels and the
/// time the last batch finished.
pub fn classify_on_fog(
    chunk: &VideoChunk,
    regions: Vec<(u64, BBox)>,
    arrival: SimTime,
    cfg: &ProtocolConfig,
    env: &mut SimEnv,
) -> Result<(Vec<LabelResult>, SimTime), ProtocolError> {
    let mut labels = Vec::new();
    let mut last = arrival;
    let arrivals = regions.into_iter().map(|r| (r, arrival)).collect();
    for batch in dynamic_batch(arrivals, cfg.batcher) {
        let (_, done) = env
            .fog_gpu
            .reserve(batch.dispatch, env.costs.fog_classifier.latency(batch.items.len()));
        last = last.max(done);
        let mut hitl = env.hitl.lock().expect("hitl lock");
        let min_score = if hitl.learner.ensemble.is_some() {
            cfg.fog_min_ensemble_score
        } else {
            cfg.fog_min_score
        };
        for ((frame_index, region), _) in batch.items {
            let frame = keyframe(chunk, frame_index);
            let x = env.synth.extract(&region, frame, env.seed);
            let pred = hitl.learner.predict(&x)?;
            let score = pred.score();
            let mut rng = seed::rng(
                env.seed,
                &[seed::TAG_SAMPLING, frame_index, region.x.to_bits(), region.y.to_bits()],
            );
            let sampled = rng.random::<f64>() < cfg.review.sample_rate;
            if score < cfg.review.below_score || sampled {
                // a full queue just means no more human labels this run
                let _ = hitl.enqueue_for_annotation(RegionCandidate {
                    chunk_id: chunk.chunk_id,
                    frame_index,
                    frame_width: frame.width,
                    frame_height: frame.height,
                    region,
                    features: x,
                    prediction: TaskPrediction {
                        class_id: pred.class_id,
                        score,
                    },
                });
            }
            if score >= min_score {
                labels.push(LabelResult {
                    frame_index,
                    bbox: region,
                    class_id: pred.class_id,
                    confidence: score,
                    source: LabelSource::Fog,
                    timestamp: done,
                });
            }
        }
    }
    Ok((labels, last))
}

/// Confident detections as labels stamped at `at`.
pub fn detections_to_labels(
    frame_index: u64,
    dets: &[Detection],
    source: LabelSource,
    at: SimTime,
) -> Vec<LabelResult> {
    dets.iter()
        .filter_map(|d| {
            d.class_id.map(|class_id| LabelResult {
                frame_index,
                bbox: d.bbox,
                class_id,
                confidence: d.cls_score,
                source,
                timestamp: at,
            })
        })
        .collect()
}

/// Runs one chunk through the high/low protocol.
pub fn run_chunk(
    chunk: &VideoChunk,
    cfg: &ProtocolConfig,
    env: &mut SimEnv,
) -> Result<(Vec<LabelResult>, ChunkTrace), ProtocolError> {
    let mut trace = ChunkTrace::new("vpaas", chunk);
    let t0 = chunk.ready_at.max(env.clock);
    trace.mark("ready", t0);
    if !env.cloud_reachable(t0) {
        return Err(env.cloud_down(chunk.chunk_id, t0));
    }

    // camera stream to the co-located fog node
    let at_fog = env.lan.send(chunk.encoded_bytes, t0).expect("LAN never fails");
    trace.bytes_client_to_fog = chunk.encoded_bytes;
    trace.mark("at_fog", at_fog);

    let (low, elapsed) = reencode(chunk, cfg.low_quality, DeviceClass::Fog, &env.size, &env.encode)?;
    let (_, encoded) = env.fog_encoder.reserve(at_fog, elapsed);
    trace.mark("encoded", encoded);

    let at_cloud = env.upload(chunk.chunk_id, low.encoded_bytes, encoded)?;
    trace.bytes_to_cloud = low.encoded_bytes;
    trace.mark("at_cloud", at_cloud);

    let infer = env.detector.infer_time(low.keyframes.len(), DeviceClass::Cloud);
    let (_, detected) = env.cloud_gpu.reserve(at_cloud, infer);
    let per_frame = cloud_detect(&low, &env.detector, env.seed);
    trace.cloud_invocations.push(CloudInvocation {
        model: "cloud_detector".into(),
        frames: low.keyframes.len(),
    });
    trace.mark("detected", detected);

    let mut cloud_labels: Vec<(u64, Vec<Detection>)> = Vec::new();
    let mut uncertain: Vec<(u64, BBox)> = Vec::new();
    for (frame_index, dets) in &per_frame {
        let area = keyframe(chunk, *frame_index).area();
        let (labels, regions) = filter_regions(dets, area, &cfg.thresholds);
        uncertain.extend(regions.into_iter().map(|r| (*frame_index, r)));
        cloud_labels.push((*frame_index, labels));
    }
    let n_labels: usize = cloud_labels.iter().map(|(_, l)| l.len()).sum();
    trace.uncertain_regions = uncertain.len();

    let returned = (n_labels + uncertain.len()) as u64 * cfg.region_bytes;
    let back_at_fog = env.download(chunk.chunk_id, returned, detected)?;
    trace.bytes_cloud_to_fog = returned;
    trace.mark("results_at_fog", back_at_fog);

    let mut labels: Vec<LabelResult> = cloud_labels
        .iter()
        .flat_map(|(fi, dets)| detections_to_labels(*fi, dets, LabelSource::Cloud, back_at_fog))
        .collect();

    // crops come from the high-quality copy the fog already holds
    let (fog_labels, classified) = classify_on_fog(chunk, uncertain, back_at_fog, cfg, env)?;
    labels.extend(fog_labels);
    trace.mark("classified", classified);
    trace.labels = labels.clone();
    Ok((labels, trace))
}

/// Fallback path while the cloud is unreachable: the small detector runs on
/// the fog against the camera-quality chunk.
pub fn run_chunk_backup(
    chunk: &VideoChunk,
    accept: f64,
    env: &mut SimEnv,
    start: SimTime,
) -> (Vec<LabelResult>, ChunkTrace) {
    let mut trace = ChunkTrace::new("vpaas", chunk);
    let t0 = chunk.ready_at.max(start);
    trace.mark("ready", t0);
    let at_fog = env.lan.send(chunk.encoded_bytes, t0).expect("LAN never fails");
    trace.bytes_client_to_fog = chunk.encoded_bytes;
    trace.mark("at_fog", at_fog);
    let (_, detected) = env
        .fog_gpu
        .reserve(at_fog, backup_infer_time(&env.backup, chunk.keyframes.len()));
    trace.mark("detected", detected);
    let labels: Vec<LabelResult> = backup_detect(chunk, &env.detector, &env.backup, env.seed)
        .into_iter()
        .flat_map(|(fi, dets)| {
            let kept: Vec<Detection> = dets.into_iter().filter(|d| d.cls_score >= accept).collect();
            detections_to_labels(fi, &kept, LabelSource::Backup, detected)
        })
        .collect();
    trace.labels = labels.clone();
    trace.outcome = ChunkOutcome::LabeledByBackup;
    (labels, trace)
}
