//! Domain types and the synthetic JSON-lines dataset format.
//!
//! Frames carry ground-truth annotations instead of pixels. Cropping a
//! region means selecting the annotated objects that intersect it.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::{Add, Sub};

use rand::RngExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quality::{chunk_size_bytes, SizeModel};
use crate::seed;

pub const DEFAULT_CLASSES: usize = 10;
pub const DEFAULT_KEYFRAME_INTERVAL: u64 = 15;
pub const DEFAULT_KEYFRAMES_PER_CHUNK: usize = 15;
pub const MAX_QP: u8 = 51;
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid field `{field}`: {message}")]
    Invalid {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Simulated time in integer microseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s.max(0.0) * 1e6).round() as u64)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        SimTime((ms.max(0.0) * 1e3).round() as u64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

/// Encoding quality: resolution scale and quantization parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityLevel {
    pub resolution_scale: f64,
    pub qp: u8,
}

impl QualityLevel {
    pub fn new(resolution_scale: f64, qp: u8) -> Result<Self, String> {
        let q = QualityLevel {
            resolution_scale,
            qp,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.resolution_scale > 0.0 && self.resolution_scale <= 1.0) {
            return Err(format!(
                "resolution_scale {} out of range (0,1]",
                self.resolution_scale
            ));
        }
        if self.qp > MAX_QP {
            return Err(format!("qp out of range [0,{MAX_QP}]"));
        }
        Ok(())
    }

    /// The untouched camera stream.
    pub fn original() -> Self {
        QualityLevel {
            resolution_scale: 1.0,
            qp: 26,
        }
    }
}

/// Axis-aligned box in pixels, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Clips to `[0,width]×[0,height]`; `None` when nothing is left.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BBox> {
        if self.within(width, height) {
            return Some(*self);
        }
        let x0 = self.x.clamp(0.0, width as f64);
        let y0 = self.y.clamp(0.0, height as f64);
        let x1 = self.right().clamp(0.0, width as f64);
        let y1 = self.bottom().clamp(0.0, height as f64);
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.right() <= width as f64 + 1e-9
            && self.bottom() <= height as f64 + 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub object_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
    pub difficulty: f64,
    pub drift_phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_index: u64,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<GroundTruthObject>,
}

impl Frame {
    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    /// Object with the highest IoU against `region`, if any overlaps.
    /// IoU rather than raw overlap so a crop of a small object nested in a
    /// larger one resolves to the small one.
    pub fn dominant_object(&self, region: &BBox) -> Option<&GroundTruthObject> {
        self.objects
            .iter()
            .map(|o| {
                let inter = o.bbox.intersection_area(region);
                (o, inter / (o.bbox.area() + region.area() - inter))
            })
            .filter(|(_, a)| *a > 0.0)
            .fold(None, |best: Option<(&GroundTruthObject, f64)>, (o, a)| match best {
                Some((_, ba)) if ba >= a => best,
                _ => Some((o, a)),
            })
            .map(|(o, _)| o)
    }
}

/// One camera stream with its dataset header values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    pub fps: f64,
    pub source_quality: QualityLevel,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn frame_time(&self, frame_index: u64) -> SimTime {
        SimTime::from_secs_f64(frame_index as f64 / self.fps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoChunk {
    pub chunk_id: u64,
    pub keyframes: Vec<Frame>,
    pub quality: QualityLevel,
    pub encoded_bytes: u64,
    /// First raw frame index covered by the chunk window.
    pub window_start: u64,
    /// Capture time of the last keyframe; the chunk can be shipped from here.
    pub ready_at: SimTime,
}

impl VideoChunk {
    pub fn frame_width(&self) -> u32 {
        self.keyframes.first().map_or(0, |f| f.width)
    }

    pub fn frame_height(&self) -> u32 {
        self.keyframes.first().map_or(0, |f| f.height)
    }
}

/// Cloud or backup model output for one proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: Option<usize>,
    pub loc_score: f64,
    pub cls_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Cloud,
    Fog,
    Backup,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub frame_index: u64,
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
    pub source: LabelSource,
    pub timestamp: SimTime,
}

// ---------------------------------------------------------------------------
// Dataset file format

#[derive(Debug, Serialize, Deserialize)]
struct HeaderRecord {
    version: u32,
    width: u32,
    height: u32,
    classes: usize,
    fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resolution_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qp: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectRecord {
    id: u64,
    class: usize,
    bbox: [f64; 4],
    difficulty: f64,
    drift_phase: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    frame: u64,
    objects: Vec<ObjectRecord>,
}

fn invalid(line: usize, field: &'static str, message: impl Into<String>) -> DatasetError {
    DatasetError::Invalid {
        line,
        field,
        message: message.into(),
    }
}

/// Parses a JSON-lines dataset. A header line opens a new scene.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<Scene>, DatasetError> {
    let mut scenes: Vec<Scene> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DatasetError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        if value.get("version").is_some() {
            let h: HeaderRecord = serde_json::from_value(value).map_err(|e| DatasetError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            scenes.push(scene_from_header(&h, lineno)?);
            continue;
        }
        let scene = scenes
            .last_mut()
            .ok_or_else(|| invalid(lineno, "version", "frame record before header"))?;
        let rec: FrameRecord = serde_json::from_value(value).map_err(|e| DatasetError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let frame = frame_from_record(rec, scene, lineno)?;
        if let Some(prev) = scene.frames.last() {
            if frame.frame_index <= prev.frame_index {
                return Err(invalid(
                    lineno,
                    "frame",
                    format!(
                        "frame index {} not ascending after {}",
                        frame.frame_index, prev.frame_index
                    ),
                ));
            }
        }
        scene.frames.push(frame);
    }
    Ok(scenes)
}

fn scene_from_header(h: &HeaderRecord, line: usize) -> Result<Scene, DatasetError> {
    if h.version != DATASET_VERSION {
        return Err(invalid(line, "version", format!("unsupported version {}", h.version)));
    }
    if h.width == 0 || h.height == 0 {
        return Err(invalid(line, "width", "frame dimensions must be positive"));
    }
    if h.classes < 2 {
        return Err(invalid(line, "classes", "at least 2 classes required"));
    }
    if !(h.fps > 0.0) {
        return Err(invalid(line, "fps", "fps must be positive"));
    }
    let qp = h.qp.unwrap_or(QualityLevel::original().qp as i64);
    if !(0..=MAX_QP as i64).contains(&qp) {
        return Err(invalid(line, "qp", format!("qp out of range [0,{MAX_QP}]")));
    }
    let rs = h.resolution_scale.unwrap_or(1.0);
    let quality = QualityLevel::new(rs, qp as u8).map_err(|m| invalid(line, "resolution_scale", m))?;
    Ok(Scene {
        width: h.width,
        height: h.height,
        classes: h.classes,
        fps: h.fps,
        source_quality: quality,
        frames: Vec::new(),
    })
}

fn frame_from_record(rec: FrameRecord, scene: &Scene, line: usize) -> Result<Frame, DatasetError> {
    let mut objects = Vec::with_capacity(rec.objects.len());
    for o in rec.objects {
        if o.class >= scene.classes {
            return Err(invalid(
                line,
                "class",
                format!("class {} out of range [0,{})", o.class, scene.classes),
            ));
        }
        if !(0.0..=1.0).contains(&o.difficulty) {
            return Err(invalid(line, "difficulty", "difficulty must be in [0,1]"));
        }
        if !o.drift_phase.is_finite() {
            return Err(invalid(line, "drift_phase", "drift_phase must be finite"));
        }
        let [x, y, w, h] = o.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(invalid(line, "bbox", "bbox width and height must be positive"));
        }
        let bbox = BBox::new(x, y, w, h)
            .clamp_to(scene.width, scene.height)
            .ok_or_else(|| invalid(line, "bbox", "bbox lies outside the frame"))?;
        objects.push(GroundTruthObject {
            object_id: o.id,
            class_id: o.class,
            bbox,
            difficulty: o.difficulty,
            drift_phase: o.drift_phase,
        });
    }
    Ok(Frame {
        frame_index: rec.frame,
        width: scene.width,
        height: scene.height,
        objects,
    })
}

pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<Vec<Scene>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::Io(e.to_string()))?;
    read_dataset(std::io::BufReader::new(file))
}

pub fn write_dataset<W: Write>(scenes: &[Scene], mut out: W) -> Result<(), DatasetError> {
    let io = |e: std::io::Error| DatasetError::Io(e.to_string());
    let ser = |e: serde_json::Error| DatasetError::Io(e.to_string());
    for scene in scenes {
        let header = HeaderRecord {
            version: DATASET_VERSION,
            width: scene.width,
            height: scene.height,
            classes: scene.classes,
            fps: scene.fps,
            resolution_scale: Some(scene.source_quality.resolution_scale),
            qp: Some(scene.source_quality.qp as i64),
        };
        serde_json::to_writer(&mut out, &header).map_err(ser)?;
        out.write_all(b"\n").map_err(io)?;
        for f in &scene.frames {
            let rec = FrameRecord {
                frame: f.frame_index,
                objects: f
                    .objects
                    .iter()
                    .map(|o| ObjectRecord {
                        id: o.object_id,
                        class: o.class_id,
                        bbox: [o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h],
                        difficulty: o.difficulty,
                        drift_phase: o.drift_phase,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &rec).map_err(ser)?;
            out.write_all(b"\n").map_err(io)?;
        }
    }
    Ok(())
}

pub fn save_dataset(scenes: &[Scene], path: impl AsRef<std::path::Path>) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(|e| DatasetError::Io(e.to_string()))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(scenes, &mut w)?;
    w.flush().map_err(|e| DatasetError::Io(e.to_string()))
}

// ---------------------------------------------------------------------------
// Synthetic generation

/// Parameters of the synthetic stream generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub frames: u64,
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    pub fps: f64,
    /// Concurrent objects per frame, drawn per scene from this inclusive range.
    pub min_objects: usize,
    pub max_objects: usize,
    /// drift_phase grows by this much per frame.
    pub drift_rate: f64,
    pub min_difficulty: f64,
    pub max_difficulty: f64,
    /// Max speed along each axis, pixels per frame.
    pub max_speed: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Track lifetime range in frames; an expired track is replaced by a new object.
    pub min_lifetime: u64,
    pub max_lifetime: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            scenes: 1,
            frames: 2250,
            width: 1280,
            height: 720,
            classes: DEFAULT_CLASSES,
            fps: 30.0,
            min_objects: 4,
            max_objects: 6,
            drift_rate: 0.0,
            min_difficulty: 0.0,
            max_difficulty: 0.4,
            max_speed: 2.0,
            min_size: 40.0,
            max_size: 160.0,
            min_lifetime: 300,
            max_lifetime: 900,
        }
    }
}

impl DatasetSpec {
    /// Frame count for `chunks` chunks at the default keyframe cadence.
    pub fn frames_for_chunks(chunks: u64) -> u64 {
        chunks * DEFAULT_KEYFRAME_INTERVAL * DEFAULT_KEYFRAMES_PER_CHUNK as u64
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Spec(m.to_string()));
        if self.classes < 2 {
            return bad("classes must be >= 2 for one-vs-all classification");
        }
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects must not exceed max_objects");
        }
        if !(0.0 <= self.min_difficulty
            && self.min_difficulty <= self.max_difficulty
            && self.max_difficulty <= 1.0)
        {
            return bad("difficulty range must satisfy 0 <= min <= max <= 1");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("size range must satisfy 0 < min <= max");
        }
        if self.max_size > self.width.min(self.height) as f64 {
            return bad("max_size must fit inside the frame");
        }
        if !(self.drift_rate >= 0.0 && self.max_speed >= 0.0) {
            return bad("drift_rate and max_speed must be non-negative");
        }
        if self.min_lifetime == 0 || self.min_lifetime > self.max_lifetime {
            return bad("lifetime range must satisfy 0 < min <= max");
        }
        Ok(())
    }
}

struct Track {
    id: u64,
    class_id: usize,
    difficulty: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
    expires: u64,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Deterministic synthetic streams: objects move on straight, edge-bouncing
/// trajectories and are replaced when their lifetime ends.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<Scene>, DatasetError> {
    spec.validate()?;
    let mut scenes = Vec::with_capacity(spec.scenes);
    let mut next_id = 0u64;
    for s in 0..spec.scenes {
        let mut rng = seed::rng(seed, &[seed::TAG_DATASET, s as u64]);
        let n = rng.random_range(spec.min_objects..=spec.max_objects);
        let mut spawn = |rng: &mut rand_chacha::ChaCha8Rng, start: u64| {
            let w = rng.random_range(spec.min_size..=spec.max_size);
            let h = rng.random_range(spec.min_size..=spec.max_size);
            let speed = |rng: &mut rand_chacha::ChaCha8Rng| {
                if spec.max_speed > 0.0 {
                    rng.random_range(-spec.max_speed..=spec.max_speed)
                } else {
                    0.0
                }
            };
            let t = Track {
                id: next_id,
                class_id: rng.random_range(0..spec.classes),
                difficulty: if spec.max_difficulty > spec.min_difficulty {
                    rng.random_range(spec.min_difficulty..=spec.max_difficulty)
                } else {
                    spec.min_difficulty
                },
                x: rng.random_range(0.0..=(spec.width as f64 - w)),
                y: rng.random_range(0.0..=(spec.height as f64 - h)),
                vx: speed(rng),
                vy: speed(rng),
                w,
                h,
                expires: start + rng.random_range(spec.min_lifetime..=spec.max_lifetime),
            };
            next_id += 1;
            t
        };
        let mut tracks: Vec<Track> = (0..n).map(|_| spawn(&mut rng, 0)).collect();
        let mut frames = Vec::with_capacity(spec.frames as usize);
        for fi in 0..spec.frames {
            for t in tracks.iter_mut() {
                if fi >= t.expires {
                    *t = spawn(&mut rng, fi);
                }
            }
            let objects = tracks
                .iter()
                .map(|t| GroundTruthObject {
                    object_id: t.id,
                    class_id: t.class_id,
                    bbox: BBox::new(round2(t.x), round2(t.y), round2(t.w), round2(t.h)),
                    difficulty: t.difficulty,
                    drift_phase: spec.drift_rate * fi as f64,
                })
                .collect();
            frames.push(Frame {
                frame_index: fi,
                width: spec.width,
                height: spec.height,
                objects,
            });
            for t in tracks.iter_mut() {
                advance(t, spec.width as f64, spec.height as f64);
            }
        }
        scenes.push(Scene {
            width: spec.width,
            height: spec.height,
            classes: spec.classes,
            fps: spec.fps,
            source_quality: QualityLevel::original(),
            frames,
        });
    }
    Ok(scenes)
}

fn advance(t: &mut Track, width: f64, height: f64) {
    t.x += t.vx;
    t.y += t.vy;
    if t.x < 0.0 {
        t.x = -t.x;
        t.vx = -t.vx;
    }
    if t.x + t.w > width {
        t.x = 2.0 * (width - t.w) - t.x;
        t.vx = -t.vx;
    }
    if t.y < 0.0 {
        t.y = -t.y;
        t.vy = -t.vy;
    }
    if t.y + t.h > height {
        t.y = 2.0 * (height - t.h) - t.y;
        t.vy = -t.vy;
    }
    t.x = t.x.clamp(0.0, width - t.w);
    t.y = t.y.clamp(0.0, height - t.h);
}

/// How raw frames are sampled into chunks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    pub keyframe_interval: u64,
    pub keyframes_per_chunk: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        ChunkingConfig {
            keyframe_interval: DEFAULT_KEYFRAME_INTERVAL,
            keyframes_per_chunk: DEFAULT_KEYFRAMES_PER_CHUNK,
        }
    }
}

impl ChunkingConfig {
    pub fn window_frames(&self) -> u64 {
        self.keyframe_interval * self.keyframes_per_chunk as u64
    }

    pub fn period(&self, fps: f64) -> SimTime {
        SimTime::from_secs_f64(self.window_frames() as f64 / fps)
    }
}

/// Splits a scene into chunks of keyframes at the scene's source quality.
/// The trailing chunk may hold fewer keyframes at end of stream.
pub fn chunk_scene(scene: &Scene, cfg: &ChunkingConfig, size: &SizeModel) -> Vec<VideoChunk> {
    let interval = cfg.keyframe_interval.max(1);
    let window = interval * cfg.keyframes_per_chunk.max(1) as u64;
    let mut chunks: Vec<VideoChunk> = Vec::new();
    let mut current: Vec<Frame> = Vec::new();
    let mut current_window = None;
    let flush = |chunks: &mut Vec<VideoChunk>, frames: Vec<Frame>, window_idx: u64| {
        if frames.is_empty() {
            return;
        }
        let ready_at = scene.frame_time(frames.last().map_or(0, |f| f.frame_index));
        let encoded_bytes = chunk_size_bytes(&frames, &scene.source_quality, size);
        chunks.push(VideoChunk {
            chunk_id: chunks.len() as u64,
            keyframes: frames,
            quality: scene.source_quality,
            encoded_bytes,
            window_start: window_idx * window,
            ready_at,
        });
    };
    for f in &scene.frames {
        if f.frame_index % interval != 0 {
            continue;
        }
        let w = f.frame_index / window;
        if current_window.is_some_and(|cw| cw != w) {
            flush(&mut chunks, std::mem::take(&mut current), current_window.unwrap());
        }
        current_window = Some(w);
        current.push(f.clone());
    }
    if let Some(w) = current_window {
        flush(&mut chunks, current, w);
    }
    chunks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            frames: 30,
            min_objects: 2,
            max_objects: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert_eq!(read_dataset(&b""[..]).unwrap(), Vec::<Scene>::new());
    }

    #[test]
    fn qp_out_of_range_is_rejected() {
        let text = r#"{"version":1,"width":1280,"height":720,"classes":10,"fps":30,"qp":60}"#;
        let err = read_dataset(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("qp out of range [0,51]"), "{err}");
    }

    #[test]
    fn class_out_of_range_names_field() {
        let text = concat!(
            r#"{"version":1,"width":100,"height":100,"classes":3,"fps":30}"#,
            "\n",
            r#"{"frame":0,"objects":[{"id":1,"class":3,"bbox":[0,0,10,10],"difficulty":0,"drift_phase":0}]}"#
        );
        match read_dataset(text.as_bytes()).unwrap_err() {
            DatasetError::Invalid { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "class");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"version\":1,\"width\":100,\"height\":100,\"classes\":3,\"fps\":30}\n{nope";
        match read_dataset(text.as_bytes()).unwrap_err() {
            DatasetError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn descending_frames_rejected() {
        let text = concat!(
            r#"{"version":1,"width":100,"height":100,"classes":3,"fps":30}"#,
            "\n",
            r#"{"frame":2,"objects":[]}"#,
            "\n",
            r#"{"frame":1,"objects":[]}"#
        );
        assert!(matches!(
            read_dataset(text.as_bytes()),
            Err(DatasetError::Invalid { field: "frame", .. })
        ));
    }

    #[test]
    fn boxes_are_clamped_into_frame() {
        let text = concat!(
            r#"{"version":1,"width":100,"height":100,"classes":3,"fps":30}"#,
            "\n",
            r#"{"frame":0,"objects":[{"id":1,"class":0,"bbox":[90,-5,20,20],"difficulty":0,"drift_phase":0}]}"#
        );
        let scenes = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(scenes[0].frames[0].objects[0].bbox, BBox::new(90.0, 0.0, 10.0, 15.0));
    }

    #[test]
    fn one_scene_thirty_frames_round_trips() {
        let scenes = generate_dataset(&small_spec(), 7).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].frames.len(), 30);
        let mut buf = Vec::new();
        write_dataset(&scenes, &mut buf).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, scenes);
        // both objects are present in every frame and carry a trajectory
        let ids: Vec<u64> = back[0].frames[0].objects.iter().map(|o| o.object_id).collect();
        assert_eq!(ids.len(), 2);
        for f in &back[0].frames {
            let fids: Vec<u64> = f.objects.iter().map(|o| o.object_id).collect();
            assert_eq!(fids, ids);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset(&generate_dataset(&spec, 1).unwrap(), &mut a).unwrap();
        write_dataset(&generate_dataset(&spec, 1).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        write_dataset(&generate_dataset(&spec, 2).unwrap(), &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_drift_rate_gives_zero_phase() {
        let scenes = generate_dataset(&small_spec(), 3).unwrap();
        assert!(scenes[0]
            .frames
            .iter()
            .flat_map(|f| &f.objects)
            .all(|o| o.drift_phase == 0.0));
    }

    #[test]
    fn drift_phase_linear_in_frame_index() {
        let spec = DatasetSpec {
            drift_rate: 0.01,
            ..small_spec()
        };
        let scenes = generate_dataset(&spec, 3).unwrap();
        for f in &scenes[0].frames {
            for o in &f.objects {
                assert!((o.drift_phase - 0.01 * f.frame_index as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn object_count_matches_density() {
        let spec = DatasetSpec {
            frames: 100,
            min_objects: 3,
            max_objects: 7,
            ..DatasetSpec::default()
        };
        // average over several scenes so the per-scene draw of the count evens out
        let spec = DatasetSpec { scenes: 20, ..spec };
        let scenes = generate_dataset(&spec, 11).unwrap();
        let total: usize = scenes
            .iter()
            .flat_map(|s| &s.frames)
            .map(|f| f.objects.len())
            .sum();
        let per_scene = total as f64 / scenes.len() as f64;
        assert!((per_scene - 500.0).abs() <= 100.0, "{per_scene}");
    }

    #[test]
    fn fewer_than_two_classes_rejected() {
        let spec = DatasetSpec {
            classes: 1,
            ..small_spec()
        };
        assert!(matches!(generate_dataset(&spec, 0), Err(DatasetError::Spec(_))));
    }

    #[test]
    fn generated_boxes_stay_in_frame() {
        let spec = DatasetSpec {
            frames: 600,
            max_speed: 12.0,
            ..DatasetSpec::default()
        };
        for s in generate_dataset(&spec, 5).unwrap() {
            for f in &s.frames {
                for o in &f.objects {
                    assert!(o.bbox.within(f.width, f.height), "{:?}", o.bbox);
                }
            }
        }
    }

    #[test]
    fn chunking_takes_every_fifteenth_frame() {
        let spec = DatasetSpec {
            frames: 2 * 225 + 30,
            ..DatasetSpec::default()
        };
        let scene = &generate_dataset(&spec, 1).unwrap()[0];
        let chunks = chunk_scene(scene, &ChunkingConfig::default(), &SizeModel::default());
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0].keyframes.len(), 15);
        assert_eq!(chunks[1].keyframes.len(), 15);
        assert_eq!(chunks[2].keyframes.len(), 2);
        assert_eq!(chunks[1].keyframes[0].frame_index, 225);
        assert_eq!(chunks[0].ready_at, scene.frame_time(210));
        assert_eq!(
            chunks[0].encoded_bytes,
            chunk_size_bytes(&chunks[0].keyframes, &scene.source_quality, &SizeModel::default())
        );
    }
}
