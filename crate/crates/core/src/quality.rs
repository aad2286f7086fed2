//! Parametric stand-in for the video encoder: byte size and processing time
//! as functions of resolution scale and QP.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Frame, QualityLevel, SimTime, VideoChunk};

#[derive(Debug, Error, PartialEq)]
pub enum QualityError {
    #[error("upscaling from resolution scale {from} to {to} is not supported")]
    Upscale { from: f64, to: f64 },
    #[error("invalid quality model: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceClass {
    Client,
    Fog,
    Cloud,
}

/// Size of an encoded frame: bytes per pixel at `qp_ref`, halving every
/// `qp_halving` QP steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SizeModel {
    pub base_bytes_per_pixel: f64,
    pub qp_ref: u8,
    pub qp_halving: u8,
}

impl Default for SizeModel {
    fn default() -> Self {
        SizeModel {
            base_bytes_per_pixel: 0.1,
            qp_ref: 26,
            qp_halving: 6,
        }
    }
}

impl SizeModel {
    pub fn validate(&self) -> Result<(), QualityError> {
        if !(self.base_bytes_per_pixel > 0.0) {
            return Err(QualityError::Invalid(
                "base_bytes_per_pixel must be positive".into(),
            ));
        }
        if self.qp_halving == 0 {
            return Err(QualityError::Invalid("qp_halving must be positive".into()));
        }
        Ok(())
    }

    /// Multiplier applied to `base_bytes_per_pixel` at a given QP.
    pub fn qp_factor(&self, qp: u8) -> f64 {
        (-(qp as f64 - self.qp_ref as f64) / self.qp_halving as f64).exp2()
    }

    /// Unrounded bytes for `source_pixels` pixels of full-resolution content.
    pub fn bytes_for_pixels(&self, source_pixels: f64, q: &QualityLevel) -> f64 {
        let r = q.resolution_scale;
        self.base_bytes_per_pixel * source_pixels * r * r * self.qp_factor(q.qp)
    }
}

/// Encoded size of a run of frames at quality `q`.
pub fn chunk_size_bytes(frames: &[Frame], q: &QualityLevel, m: &SizeModel) -> u64 {
    let r = q.resolution_scale;
    let total: f64 = frames
        .iter()
        .map(|f| {
            let w = r * f.width as f64;
            let h = r * f.height as f64;
            m.base_bytes_per_pixel * w * h
        })
        .sum();
    (total * m.qp_factor(q.qp)).round() as u64
}

/// Seconds per megapixel of source content to decode and re-encode, per device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeTimeModel {
    pub client: f64,
    pub fog: f64,
    pub cloud: f64,
}

impl Default for EncodeTimeModel {
    fn default() -> Self {
        // A Pi-class client cannot keep up; a Jetson-class fog node and a
        // datacenter GPU can.
        EncodeTimeModel {
            client: 0.08,
            fog: 0.004,
            cloud: 0.002,
        }
    }
}

impl EncodeTimeModel {
    pub fn validate(&self) -> Result<(), QualityError> {
        if !(self.client > self.fog && self.fog >= self.cloud && self.cloud >= 0.0) {
            return Err(QualityError::Invalid(
                "encode cost must satisfy client > fog >= cloud >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn per_megapixel(&self, device: DeviceClass) -> f64 {
        match device {
            DeviceClass::Client => self.client,
            DeviceClass::Fog => self.fog,
            DeviceClass::Cloud => self.cloud,
        }
    }

    pub fn elapsed(&self, frames: &[Frame], source: &QualityLevel, device: DeviceClass) -> SimTime {
        let r = source.resolution_scale;
        let megapixels: f64 = frames
            .iter()
            .map(|f| r * f.width as f64 * r * f.height as f64 / 1e6)
            .sum();
        SimTime::from_secs_f64(megapixels * self.per_megapixel(device))
    }
}

/// Re-encodes a chunk to `target`, returning the new chunk and the time the
/// device spent on it. Annotations are untouched.
pub fn reencode(
    chunk: &VideoChunk,
    target: QualityLevel,
    device: DeviceClass,
    size: &SizeModel,
    time: &EncodeTimeModel,
) -> Result<(VideoChunk, SimTime), QualityError> {
    if target.resolution_scale > chunk.quality.resolution_scale {
        return Err(QualityError::Upscale {
            from: chunk.quality.resolution_scale,
            to: target.resolution_scale,
        });
    }
    let elapsed = time.elapsed(&chunk.keyframes, &chunk.quality, device);
    let mut out = chunk.clone();
    out.quality = target;
    out.encoded_bytes = chunk_size_bytes(&chunk.keyframes, &target, size);
    Ok((out, elapsed))
}
