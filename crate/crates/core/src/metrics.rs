//! Bandwidth, accuracy, cloud cost and freshness latency from chunk traces.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{iou, ChunkOutcome, ChunkTrace};
use crate::datamodel::{Frame, LabelResult, LabelSource, Scene};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("duration must be positive")]
    ZeroDuration,
    #[error("trace refers to unknown scene {0}")]
    UnknownScene(usize),
}

/// Linear-interpolated percentile, `p` in [0,100]. Empty input gives 0.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = (p.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    pub bytes_per_sec: f64,
    /// WAN bytes over the bytes of sending every chunk at camera quality.
    pub normalized: f64,
}

pub fn bandwidth(traces: &[ChunkTrace], duration_s: f64) -> Result<Bandwidth, MetricsError> {
    if !(duration_s > 0.0) {
        return Err(MetricsError::ZeroDuration);
    }
    let sent: u64 = traces.iter().map(|t| t.bytes_to_cloud).sum();
    let original: u64 = traces.iter().map(|t| t.original_bytes).sum();
    Ok(Bandwidth {
        bytes_per_sec: sent as f64 / duration_s,
        normalized: if original == 0 {
            0.0
        } else {
            sent as f64 / original as f64
        },
    })
}

/// Price per frame processed by a cloud model, summed over invocations.
pub fn cloud_cost(traces: &[ChunkTrace], price_per_frame: f64) -> f64 {
    price_per_frame * traces.iter().map(|t| t.cloud_frames()).sum::<usize>() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub per_class: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            iou_threshold: 0.5,
            per_class: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    pub fn add(&mut self, o: MatchCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// A true positive: label index and the object it matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    pub label: usize,
    pub object_id: u64,
}

/// Greedy matching on one frame: labels in descending confidence (stable),
/// each taking the unmatched object with the highest IoU at or above the
/// threshold.
pub fn match_frame(labels: &[(usize, &LabelResult)], frame: &Frame, cfg: &MatchConfig) -> (MatchCounts, Vec<Match>) {
    let mut order: Vec<&(usize, &LabelResult)> = labels.iter().collect();
    order.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    let mut taken = vec![false; frame.objects.len()];
    let mut matches = Vec::new();
    for (idx, label) in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, obj) in frame.objects.iter().enumerate() {
            if taken[j] || (cfg.per_class && obj.class_id != label.class_id) {
                continue;
            }
            let v = iou(&label.bbox, &obj.bbox);
            if v >= cfg.iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            matches.push(Match {
                label: *idx,
                object_id: frame.objects[j].object_id,
            });
        }
    }
    let tp = matches.len();
    (
        MatchCounts {
            tp,
            fp: labels.len() - tp,
            fn_: frame.objects.len() - tp,
        },
        matches,
    )
}

/// Matches labels against the ground truth of `frames`. Labels for frames
/// outside the set count as false positives.
pub fn match_labels(labels: &[LabelResult], frames: &[&Frame], cfg: &MatchConfig) -> (MatchCounts, Vec<Match>) {
    let mut by_frame: BTreeMap<u64, Vec<(usize, &LabelResult)>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_frame.entry(l.frame_index).or_default().push((i, l));
    }
    let mut counts = MatchCounts::default();
    let mut matches = Vec::new();
    for frame in frames {
        let ls = by_frame.remove(&frame.frame_index).unwrap_or_default();
        let (c, m) = match_frame(&ls, frame, cfg);
        counts.add(c);
        matches.extend(m);
    }
    counts.fp += by_frame.values().map(Vec::len).sum::<usize>();
    (counts, matches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(labels: &[LabelResult], frames: &[&Frame], cfg: &MatchConfig) -> F1 {
    let (c, _) = match_labels(labels, frames, cfg);
    F1 {
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyPercentiles {
    pub p50_s: f64,
    pub p90_s: f64,
    pub p99_s: f64,
}

impl LatencyPercentiles {
    pub fn of(values: &[f64]) -> Self {
        LatencyPercentiles {
            p50_s: percentile(values, 50.0),
            p90_s: percentile(values, 90.0),
            p99_s: percentile(values, 99.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub matching: MatchConfig,
    pub price_per_frame: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            matching: MatchConfig::default(),
            price_per_frame: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkMetrics {
    pub scene: usize,
    pub chunk_id: u64,
    pub normalized_bandwidth: f64,
    pub f1: f64,
    pub cloud_cost: f64,
    pub latency_p50_s: f64,
    pub outcome: ChunkOutcome,
    /// Source of the majority of this chunk's labels, if any.
    pub label_source: Option<LabelSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub chunks: usize,
    pub duration_s: f64,
    pub bytes_per_sec: f64,
    pub normalized_bandwidth: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: MatchCounts,
    pub cloud_frames: usize,
    pub cloud_invocations: usize,
    pub cloud_cost: f64,
    pub latency: LatencyPercentiles,
    pub labeled_objects: usize,
    pub unlabeled_objects: usize,
    pub per_chunk: Vec<ChunkMetrics>,
}

/// Stream duration: frames of every scene at their frame rate.
pub fn stream_duration_s(scenes: &[Scene]) -> f64 {
    scenes
        .iter()
        .map(|s| s.frames.last().map_or(0.0, |f| (f.frame_index + 1) as f64 / s.fps))
        .sum()
}

/// Start time of each scene when scenes are streamed back to back.
pub fn scene_offsets(scenes: &[Scene]) -> Vec<f64> {
    let mut t = 0.0;
    scenes
        .iter()
        .map(|s| {
            let start = t;
            t += stream_duration_s(std::slice::from_ref(s));
            start
        })
        .collect()
}

fn frame_of(scene: &Scene, index: u64) -> Option<&Frame> {
    scene
        .frames
        .binary_search_by_key(&index, |f| f.frame_index)
        .ok()
        .map(|i| &scene.frames[i])
}

fn first_appearances(scene: &Scene) -> HashMap<u64, u64> {
    let mut first = HashMap::new();
    for f in &scene.frames {
        for o in &f.objects {
            first.entry(o.object_id).or_insert(f.frame_index);
        }
    }
    first
}

fn majority_source(labels: &[LabelResult]) -> Option<LabelSource> {
    let mut counts: Vec<(LabelSource, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(s, _)| *s == l.source) {
            Some((_, n)) => *n += 1,
            None => counts.push((l.source, 1)),
        }
    }
    // first-seen wins ties
    let mut best: Option<(LabelSource, usize)> = None;
    for (s, n) in counts {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((s, n));
        }
    }
    best.map(|(s, _)| s)
}

/// Per-chunk scores and freshness latencies of one trace.
fn score_chunk(
    scene: &Scene,
    offset_s: f64,
    first: &HashMap<u64, u64>,
    trace: &ChunkTrace,
    cfg: &MetricsConfig,
) -> (MatchCounts, Vec<f64>, usize) {
    let frames: Vec<&Frame> = trace
        .keyframe_indices
        .iter()
        .filter_map(|&i| frame_of(scene, i))
        .collect();
    let (counts, matches) = match_labels(&trace.labels, &frames, &cfg.matching);

    // earliest correct label per object within this chunk
    let mut labeled: BTreeMap<u64, f64> = BTreeMap::new();
    for m in &matches {
        let t = trace.labels[m.label].timestamp.as_secs_f64();
        labeled
            .entry(m.object_id)
            .and_modify(|v| *v = v.min(t))
            .or_insert(t);
    }
    let latencies = labeled
        .iter()
        .map(|(id, t)| {
            let appear = first.get(id).copied().unwrap_or(trace.window_start).max(trace.window_start);
            (t - offset_s - appear as f64 / scene.fps).max(0.0)
        })
        .collect();
    let mut present: Vec<u64> = frames.iter().flat_map(|f| f.objects.iter().map(|o| o.object_id)).collect();
    present.sort_unstable();
    present.dedup();
    let unlabeled = present.len() - labeled.len();
    (counts, latencies, unlabeled)
}

/// All four metrics for one strategy's traces.
pub fn evaluate(scenes: &[Scene], traces: &[ChunkTrace], cfg: &MetricsConfig) -> Result<MetricsReport, MetricsError> {
    let duration_s = stream_duration_s(scenes);
    let bw = if traces.is_empty() {
        Bandwidth {
            bytes_per_sec: 0.0,
            normalized: 0.0,
        }
    } else {
        bandwidth(traces, duration_s)?
    };
    let firsts: Vec<HashMap<u64, u64>> = scenes.iter().map(first_appearances).collect();
    let offsets = scene_offsets(scenes);
    let mut total = MatchCounts::default();
    let mut all_latencies = Vec::new();
    let mut unlabeled_objects = 0;
    let mut per_chunk = Vec::with_capacity(traces.len());
    for t in traces {
        let scene = scenes.get(t.scene).ok_or(MetricsError::UnknownScene(t.scene))?;
        let (counts, lat, unlabeled) = score_chunk(scene, offsets[t.scene], &firsts[t.scene], t, cfg);
        total.add(counts);
        unlabeled_objects += unlabeled;
        per_chunk.push(ChunkMetrics {
            scene: t.scene,
            chunk_id: t.chunk_id,
            normalized_bandwidth: ratio_u64(t.bytes_to_cloud, t.original_bytes),
            f1: counts.f1(),
            cloud_cost: cloud_cost(std::slice::from_ref(t), cfg.price_per_frame),
            latency_p50_s: percentile(&lat, 50.0),
            outcome: t.outcome,
            label_source: majority_source(&t.labels),
        });
        all_latencies.extend(lat);
    }
    Ok(MetricsReport {
        strategy: traces.first().map(|t| t.strategy.clone()).unwrap_or_default(),
        chunks: traces.len(),
        duration_s,
        bytes_per_sec: bw.bytes_per_sec,
        normalized_bandwidth: bw.normalized,
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        counts: total,
        cloud_frames: traces.iter().map(|t| t.cloud_frames()).sum(),
        cloud_invocations: traces.iter().map(|t| t.cloud_invocations.len()).sum(),
        cloud_cost: cloud_cost(traces, cfg.price_per_frame),
        latency: LatencyPercentiles::of(&all_latencies),
        labeled_objects: all_latencies.len(),
        unlabeled_objects,
        per_chunk,
    })
}

fn ratio_u64(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{BBox, GroundTruthObject, SimTime};

    fn obj(id: u64, class_id: usize, bbox: BBox) -> GroundTruthObject {
        GroundTruthObject {
            object_id: id,
            class_id,
            bbox,
            difficulty: 0.0,
            drift_phase: 0.0,
        }
    }

    fn label(class_id: usize, bbox: BBox, confidence: f64) -> LabelResult {
        LabelResult {
            frame_index: 0,
            bbox,
            class_id,
            confidence,
            source: LabelSource::Cloud,
            timestamp: SimTime::ZERO,
        }
    }

    fn frame(objects: Vec<GroundTruthObject>) -> Frame {
        Frame {
            frame_index: 0,
            width: 1280,
            height: 720,
            objects,
        }
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[], 50.0), 0.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&[1.0, 2.0], 50.0), 1.5);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 100.0), 5.0);
    }

    #[test]
    fn perfect_labels_score_one() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(100.0, 0.0, 10.0, 10.0);
        let f = frame(vec![obj(1, 2, a), obj(2, 3, b)]);
        let s = f1_score(&[label(2, a, 0.9), label(3, b, 0.9)], &[&f], &MatchConfig::default());
        assert_eq!(s.f1, 1.0);
    }

    #[test]
    fn one_tp_one_fp_is_half() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(100.0, 0.0, 10.0, 10.0);
        let f = frame(vec![obj(1, 2, a), obj(2, 3, b)]);
        let s = f1_score(
            &[label(2, a, 0.9), label(3, BBox::new(500.0, 500.0, 10.0, 10.0), 0.9)],
            &[&f],
            &MatchConfig::default(),
        );
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn no_predictions_is_zero() {
        let f = frame(vec![obj(1, 2, BBox::new(0.0, 0.0, 10.0, 10.0))]);
        assert_eq!(f1_score(&[], &[&f], &MatchConfig::default()).f1, 0.0);
    }

    #[test]
    fn class_mismatch_is_not_a_match() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let f = frame(vec![obj(1, 2, a)]);
        let cfg = MatchConfig::default();
        assert_eq!(f1_score(&[label(5, a, 0.9)], &[&f], &cfg).f1, 0.0);
        let any = MatchConfig {
            per_class: false,
            ..cfg
        };
        assert_eq!(f1_score(&[label(5, a, 0.9)], &[&f], &any).f1, 1.0);
    }

    #[test]
    fn zero_duration_rejected() {
        assert_eq!(bandwidth(&[], 0.0), Err(MetricsError::ZeroDuration));
        assert_eq!(bandwidth(&[], 10.0).unwrap().bytes_per_sec, 0.0);
        assert_eq!(cloud_cost(&[], 0.0), 0.0);
    }
}
