//! Comparison strategies. All of them consume the same chunk stream and emit
//! the same trace schema as the coordinator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coordinator::{
    detections_to_labels, filter_regions, run_chunk, ChunkTrace, CloudInvocation, ProtocolConfig,
    ProtocolError, SimEnv,
};
use crate::datamodel::{BBox, Detection, Frame, LabelResult, LabelSource, QualityLevel, SimTime, VideoChunk};
use crate::oracle::{detect_frames, detect_in_regions, DetectPass};
use crate::quality::{chunk_size_bytes, reencode, DeviceClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlimpseConfig {
    /// Fraction of changed objects above which a frame is sent.
    pub diff_threshold: f64,
    /// Center displacement in pixels that counts as movement.
    pub motion_epsilon_px: f64,
}

impl Default for GlimpseConfig {
    fn default() -> Self {
        GlimpseConfig {
            diff_threshold: 0.5,
            motion_epsilon_px: 32.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdsConfig {
    /// Round-two detections at or above this score become labels.
    pub round2_accept: f64,
}

impl Default for DdsConfig {
    fn default() -> Self {
        DdsConfig { round2_accept: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudSegConfig {
    pub quality: QualityLevel,
    pub upscale: f64,
    /// Added to the detector's resolution sensitivity on recovered frames.
    pub recovery_penalty: f64,
    /// Detections at or above this score become labels.
    pub accept: f64,
}

impl Default for CloudSegConfig {
    fn default() -> Self {
        CloudSegConfig {
            quality: QualityLevel {
                resolution_scale: 0.35,
                qp: 20,
            },
            upscale: 2.0,
            recovery_penalty: 0.15,
            accept: 0.5,
        }
    }
}

impl CloudSegConfig {
    pub fn effective_quality(&self) -> QualityLevel {
        QualityLevel {
            resolution_scale: (self.quality.resolution_scale * self.upscale).min(1.0),
            qp: self.quality.qp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Strategy {
    Mpeg,
    GlimpseLike(GlimpseConfig),
    DdsLike(DdsConfig),
    CloudsegLike(CloudSegConfig),
    Vpaas,
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::Vpaas
    }
}

impl Strategy {
    pub const NAMES: [&'static str; 5] = ["mpeg", "glimpse_like", "dds_like", "cloudseg_like", "vpaas"];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Mpeg => "mpeg",
            Strategy::GlimpseLike(_) => "glimpse_like",
            Strategy::DdsLike(_) => "dds_like",
            Strategy::CloudsegLike(_) => "cloudseg_like",
            Strategy::Vpaas => "vpaas",
        }
    }

    /// Strategy with default parameters.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "mpeg" => Strategy::Mpeg,
            "glimpse_like" => Strategy::GlimpseLike(GlimpseConfig::default()),
            "dds_like" => Strategy::DdsLike(DdsConfig::default()),
            "cloudseg_like" => Strategy::CloudsegLike(CloudSegConfig::default()),
            "vpaas" => Strategy::Vpaas,
            _ => return None,
        })
    }

    pub fn all() -> Vec<Strategy> {
        Self::NAMES.iter().filter_map(|n| Self::from_name(n)).collect()
    }

    pub fn validate(&self) -> Result<(), (String, String)> {
        let bad = |field: &str, msg: &str| Err((format!("strategy.{field}"), msg.to_string()));
        match self {
            Strategy::GlimpseLike(g) => {
                if !(0.0..=1.0).contains(&g.diff_threshold) {
                    return bad("diff_threshold", "must be in [0,1]");
                }
                if !(g.motion_epsilon_px >= 0.0) {
                    return bad("motion_epsilon_px", "must be non-negative");
                }
            }
            Strategy::DdsLike(d) => {
                if !(d.round2_accept > 0.0 && d.round2_accept <= 1.0) {
                    return bad("round2_accept", "must be in (0,1]");
                }
            }
            Strategy::CloudsegLike(c) => {
                if let Err(e) = c.quality.validate() {
                    return bad("quality", &e);
                }
                if !(c.upscale >= 1.0) {
                    return bad("upscale", "must be at least 1");
                }
                if !(c.recovery_penalty >= 0.0) {
                    return bad("recovery_penalty", "must be non-negative");
                }
                if !(c.accept > 0.0 && c.accept <= 1.0) {
                    return bad("accept", "must be in (0,1]");
                }
            }
            Strategy::Mpeg | Strategy::Vpaas => {}
        }
        Ok(())
    }
}

/// State carried across chunks of one scene.
#[derive(Debug, Clone, Default)]
pub struct StrategyState {
    glimpse_last_sent: Option<Frame>,
    glimpse_last_labels: Vec<LabelResult>,
}

pub fn run_strategy(
    strategy: &Strategy,
    chunk: &VideoChunk,
    cfg: &ProtocolConfig,
    env: &mut SimEnv,
    state: &mut StrategyState,
) -> Result<(Vec<LabelResult>, ChunkTrace), ProtocolError> {
    match strategy {
        Strategy::Vpaas => run_chunk(chunk, cfg, env),
        Strategy::Mpeg => run_mpeg(chunk, cfg, env),
        Strategy::GlimpseLike(g) => run_glimpse_like(chunk, cfg, env, g, state),
        Strategy::DdsLike(d) => run_dds_like(chunk, cfg, env, d),
        Strategy::CloudsegLike(c) => run_cloudseg_like(chunk, cfg, env, c),
    }
}

fn start(trace: &mut ChunkTrace, chunk: &VideoChunk, env: &mut SimEnv) -> Result<SimTime, ProtocolError> {
    let t0 = chunk.ready_at.max(env.clock);
    trace.mark("ready", t0);
    if !env.cloud_reachable(t0) {
        return Err(env.cloud_down(chunk.chunk_id, t0));
    }
    Ok(t0)
}

/// Confident detections per frame.
fn confident(per_frame: &[(u64, Vec<Detection>)], accept: f64, at: SimTime) -> Vec<LabelResult> {
    per_frame
        .iter()
        .flat_map(|(fi, dets)| {
            let keep: Vec<Detection> = dets.iter().filter(|d| d.cls_score >= accept).copied().collect();
            detections_to_labels(*fi, &keep, LabelSource::Cloud, at)
        })
        .collect()
}

fn finish_download(
    trace: &mut ChunkTrace,
    chunk: &VideoChunk,
    labels: &mut [LabelResult],
    cfg: &ProtocolConfig,
    env: &mut SimEnv,
    detected: SimTime,
) -> Result<SimTime, ProtocolError> {
    let bytes = labels.len() as u64 * cfg.region_bytes;
    let back = env.download(chunk.chunk_id, bytes, detected)?;
    trace.bytes_cloud_to_fog += bytes;
    trace.mark("results_at_fog", back);
    for l in labels.iter_mut() {
        l.timestamp = back;
    }
    Ok(back)
}

/// Sends the camera-quality chunk to the cloud.
pub fn run_mpeg(
    chunk: &VideoChunk,
    cfg: &ProtocolConfig,
    env: &mut SimEnv,
) -> Result<(Vec<LabelResult>, ChunkTrace), ProtocolError> {
    let mut trace = ChunkTrace::new("mpeg", chunk);
    let t0 = start(&mut trace, chunk, env)?;
    let at_cloud = env.upload(chunk.chunk_id, chunk.encoded_bytes, t0)?;
    trace.bytes_to_cloud = chunk.encoded_bytes;
    trace.mark("at_cloud", at_cloud);
    let infer = env.detector.infer_time(chunk.keyframes.len(), DeviceClass::Cloud);
    let (_, detected) = env.cloud_gpu.reserve(at_cloud, infer);
    trace.cloud_invocations.push(CloudInvocation {
        model: "cloud_detector".into(),
        frames: chunk.keyframes.len(),
    });
    trace.mark("detected", detected);
    let per_frame = detect_frames(&chunk.keyframes, &env.detector, &DetectPass::at(chunk.quality), env.seed);
    let mut labels = confident(&per_frame, cfg.thresholds.cls_accept, detected);
    finish_download(&mut trace, chunk, &mut labels, cfg, env, detected)?;
    trace.labels = labels.clone();
    Ok((labels, trace))
}

/// Fraction of objects that appeared, vanished or moved more than `eps`.
pub fn frame_difference(prev: &Frame, cur: &Frame, eps: f64) -> f64 {
    let mut ids: Vec<u64> = prev
        .objects
        .iter()
        .chain(&cur.objects)
        .map(|o| o.object_id)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return 0.0;
    }
    let changed = ids
        .iter()
        .filter(|id| {
            let a = prev.objects.iter().find(|o| o.object_id == **id);
            let b = cur.objects.iter().find(|o| o.object_id == **id);
            match (a, b) {
                (Some(a), Some(b)) => {
                    let (ax, ay) = a.bbox.center();
                    let (bx, by) = b.bbox.center();
                    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() > eps
                }
                _ => true,
            }
        })
        .count();
    changed as f64 / ids.len() as f64
}

/// Client-side frame filtering: changed frames go to the cloud at camera
/// quality; the others reuse the previous result.
pub fn run_glimpse_like(
    chunk: &VideoChunk,
    cfg: &ProtocolConfig,
    env: &mut SimEnv,
    g: &GlimpseConfig,
    state: &mut StrategyState,
) -> Result<(Vec<LabelResult>, ChunkTrace), ProtocolError> {
    let mut trace = ChunkTrace::new("glimpse_like", chunk);
    let t0 = start(&mut trace, chunk, env)?;

    let mut send = vec![false; chunk.keyframes.len()];
    let mut reference = state.glimpse_last_sent.clone();
    for (i, f) in chunk.keyframes.iter().enumerate() {
        send[i] = i == 0
            || reference
                .as_ref()
                .is_none_or(|r| frame_difference(r, f, g.motion_epsilon_px) > g.diff_threshold);
        if send[i] {
            reference = Some(f.clone());
        }
    }
    let sent: Vec<Frame> = chunk
        .keyframes
        .iter()
        .zip(&send)
        .filter(|(_, s)| **s)
        .map(|(f, _)| f.clone())
        .collect();
    let bytes = chunk_size_bytes(&sent, &chunk.quality, &env.size);
    let at_cloud = env.upload(chunk.chunk_id, bytes, t0)?;
    trace.bytes_to_cloud = bytes;
    trace.mark("at_cloud", at_cloud);
    let (_, detected) = env
        .cloud_gpu
        .reserve(at_cloud, env.detector.infer_time(sent.len(), DeviceClass::Cloud));
    trace.cloud_invocations.push(CloudInvocation {
        model: "cloud_detector".into(),
        frames: sent.len(),
    });
    trace.mark("detected", detected);
    let per_frame = detect_frames(&sent, &env.detector, &DetectPass::at(chunk.quality), env.seed);
    let fresh = confident(&per_frame, cfg.thresholds.cls_accept, detected);
    let mut sent_labels = fresh.clone();
    finish_download(&mut trace, chunk, &mut sent_labels, cfg, env, detected)?;
    let back = trace.stage("results_at_fog").unwrap_or(detected);

    // unsent frames repeat the newest earlier result
    let mut by_frame: BTreeMap<u64, Vec<LabelResult>> = BTreeMap::new();
    for l in sent_labels {
        by_frame.entry(l.frame_index).or_default().push(l);
    }
    let mut last = std::mem::take(&mut state.glimpse_last_labels);
    let mut labels = Vec::new();
    for (f, s) in chunk.keyframes.iter().zip(&send) {
        if *s {
            last = by_frame.remove(&f.frame_index).unwrap_or_default();
            labels.extend(last.iter().cloned());
        } else {
            labels.extend(last.iter().map(|l| LabelResult {
                frame_index: f.frame_index,
                timestamp: back,
                ..l.clone()
            }));
        }
    }
    state.glimpse_last_labels = last;
    state.glimpse_last_sent = reference;
    trace.labels = labels.clone();
    Ok((labels, trace))
}

/// Wire size of `region` from a frame re-encoded at `q`.
pub fn region_bytes(region: &BBox, q: &QualityLevel, env: &SimEnv) -> f64 {
    env.size.bytes_for_pixels(region.area(), q)
}

/// Two rounds: low quality everywhere, then the uncertain regions again at
/// high quality. Results are merged after the second round.
pub fn run_dds_like(
    chunk: &VideoChunk,
    cfg: &ProtocolConfig,
    env: &mut SimEnv,
    d: &DdsConfig,
) -> Result<(Vec<LabelResult>, ChunkTrace), ProtocolError> {
    let mut trace = ChunkTrace::new("dds_like", chunk);
    let t0 = start(&mut trace, chunk, env)?;
    let at_fog = env.lan.send(chunk.encoded_bytes, t0).expect("LAN never fails");
    trace.bytes_client_to_fog = chunk.encoded_bytes;
    trace.mark("at_fog", at_fog);
    let (low, elapsed) = reencode(chunk, cfg.low_quality, DeviceClass::Fog, &env.size, &env.encode)?;
    let (_, encoded) = env.fog_encoder.reserve(at_fog, elapsed);
    trace.mark("encoded", encoded);
    let at_cloud = env.upload(chunk.chunk_id, low.encoded_bytes, encoded)?;
    trace.bytes_to_cloud = low.encoded_bytes;
    trace.mark("at_cloud", at_cloud);
    let (_, detected) = env
        .cloud_gpu
        .reserve(at_cloud, env.detector.infer_time(low.keyframes.len(), DeviceClass::Cloud));
    trace.cloud_invocations.push(CloudInvocation {
        model: "cloud_detector".into(),
        frames: low.keyframes.len(),
    });
    trace.mark("detected", detected);

    let per_frame = detect_frames(&low.keyframes, &env.detector, &DetectPass::at(low.quality), env.seed);
    let mut labels = Vec::new();
    let mut regions: Vec<(u64, Vec<BBox>)> = Vec::new();
    for (fi, dets) in &per_frame {
        let frame = chunk.keyframes.iter().find(|f| f.frame_index == *fi).expect("keyframe");
        let (l, u) = filter_regions(dets, frame.area(), &cfg.thresholds);
        labels.extend(detections_to_labels(*fi, &l, LabelSource::Cloud, detected));
        if !u.is_empty() {
            regions.push((*fi, u));
        }
    }
    let n_regions: usize = regions.iter().map(|(_, r)| r.len()).sum();
    trace.uncertain_regions = n_regions;

    // round one feedback: region coordinates back to the fog
    let feedback = n_regions as u64 * cfg.region_bytes;
    let fb_at = env.download(chunk.chunk_id, feedback, detected)?;
    trace.bytes_cloud_to_fog += feedback;
    trace.mark("feedback_at_fog", fb_at);

    let mut done = detected;
    if n_regions > 0 {
        let pixels: f64 = regions.iter().flat_map(|(_, r)| r.iter().map(BBox::area)).sum();
        let bytes: u64 = regions
            .iter()
            .flat_map(|(_, r)| r.iter())
            .map(|r| region_bytes(r, &cfg.high_quality, env))
            .sum::<f64>()
            .round() as u64;
        let enc = SimTime::from_secs_f64(pixels / 1e6 * env.encode.per_megapixel(DeviceClass::Fog));
        let (_, enc_done) = env.fog_encoder.reserve(fb_at, enc);
        let at_cloud2 = env.upload(chunk.chunk_id, bytes, enc_done)?;
        trace.bytes_to_cloud += bytes;
        trace.mark("round2_at_cloud", at_cloud2);
        let (_, det2) = env
            .cloud_gpu
            .reserve(at_cloud2, env.detector.infer_time(regions.len(), DeviceClass::Cloud));
        trace.cloud_invocations.push(CloudInvocation {
            model: "cloud_detector".into(),
            frames: regions.len(),
        });
        trace.mark("round2_detected", det2);
        let pass = DetectPass::at(cfg.high_quality);
        for (fi, rs) in &regions {
            let frame = chunk.keyframes.iter().find(|f| f.frame_index == *fi).expect("keyframe");
            let dets: Vec<Detection> = detect_in_regions(frame, rs, &env.detector, &pass, env.seed)
                .into_iter()
                .filter(|x| x.cls_score >= d.round2_accept)
                .collect();
            labels.extend(detections_to_labels(*fi, &dets, LabelSource::Cloud, det2));
        }
        done = det2;
    }
    finish_download(&mut trace, chunk, &mut labels, cfg, env, done)?;
    trace.labels = labels.clone();
    Ok((labels, trace))
}

/// Heavily downscaled upload; the cloud super-resolves, then detects.
pub fn run_cloudseg_like(
    chunk: &VideoChunk,
    cfg: &ProtocolConfig,
    env: &mut SimEnv,
    c: &CloudSegConfig,
) -> Result<(Vec<LabelResult>, ChunkTrace), ProtocolError> {
    let mut trace = ChunkTrace::new("cloudseg_like", chunk);
    let t0 = start(&mut trace, chunk, env)?;
    let at_fog = env.lan.send(chunk.encoded_bytes, t0).expect("LAN never fails");
    trace.bytes_client_to_fog = chunk.encoded_bytes;
    trace.mark("at_fog", at_fog);
    let (low, elapsed) = reencode(chunk, c.quality, DeviceClass::Fog, &env.size, &env.encode)?;
    let (_, encoded) = env.fog_encoder.reserve(at_fog, elapsed);
    trace.mark("encoded", encoded);
    let at_cloud = env.upload(chunk.chunk_id, low.encoded_bytes, encoded)?;
    trace.bytes_to_cloud = low.encoded_bytes;
    trace.mark("at_cloud", at_cloud);
    let n = low.keyframes.len();
    let sr = SimTime::from_millis_f64(env.costs.sr_ms_per_frame * n as f64);
    let infer = env.detector.infer_time(n, DeviceClass::Cloud);
    let (_, detected) = env.cloud_gpu.reserve(at_cloud, sr + infer);
    trace.cloud_invocations.push(CloudInvocation {
        model: "super_resolution".into(),
        frames: n,
    });
    trace.cloud_invocations.push(CloudInvocation {
        model: "cloud_detector".into(),
        frames: n,
    });
    trace.mark("detected", detected);
    let pass = DetectPass {
        extra_lambda_r: c.recovery_penalty,
        ..DetectPass::at(c.effective_quality())
    };
    let per_frame = detect_frames(&chunk.keyframes, &env.detector, &pass, env.seed);
    let mut labels = confident(&per_frame, c.accept, detected);
    finish_download(&mut trace, chunk, &mut labels, cfg, env, detected)?;
    trace.labels = labels.clone();
    Ok((labels, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_round_trips_by_name() {
        for s in Strategy::all() {
            let json = serde_json::to_string(&s).unwrap();
            let back: Strategy = serde_json::from_str(&json).unwrap();
            assert_eq!(back, s);
            assert_eq!(Strategy::from_name(s.name()), Some(s));
        }
        let s: Strategy = serde_json::from_str(r#"{"name":"dds_like"}"#).unwrap();
        assert_eq!(s, Strategy::DdsLike(DdsConfig::default()));
        assert!(serde_json::from_str::<Strategy>(r#"{"name":"nope"}"#).is_err());
    }

    #[test]
    fn cloudseg_effective_resolution() {
        let q = CloudSegConfig::default().effective_quality();
        assert!((q.resolution_scale - 0.7).abs() < 1e-12);
        assert_eq!(q.qp, 20);
    }
}
