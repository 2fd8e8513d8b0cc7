//! Per-epoch flow container.
//!
//! Layout (little-endian): `b"EEGF"`, version `u16`, then `bands`, `pairs`,
//! `height`, `width` as `u16`, then `f32` planes ordered band, pair,
//! component (dx before dy), row, column, then the epoch's `min` and `max`
//! as `f32`.

use std::path::Path;

use ndarray::Array5;

use super::Reader;
use crate::error::{Error, Result};
use crate::optflow::FlowVideo;

pub const MAGIC: &[u8; 4] = b"EEGF";
pub const VERSION: u16 = 1;
const MAX_VALUES: usize = 1 << 26;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowFile {
    /// `bands × pairs × 2 × h × w`.
    pub data: Array5<f32>,
    pub min: f32,
    pub max: f32,
}

impl FlowFile {
    pub fn from_video(video: &FlowVideo) -> Self {
        FlowFile {
            data: video.data.mapv(|v| v as f32),
            min: video.u8_encoding.min as f32,
            max: video.u8_encoding.max as f32,
        }
    }

    /// Container for raw flow data, skipping the visual encodings.
    pub fn from_flow_data(data: &Array5<f64>) -> Self {
        let min = data.iter().copied().fold(f64::INFINITY, f64::min);
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        FlowFile {
            data: data.mapv(|v| v as f32),
            min: min as f32,
            max: max as f32,
        }
    }

    pub fn to_video(&self) -> Result<FlowVideo> {
        FlowVideo::from_data(self.data.mapv(f64::from))
    }

    pub fn encode(&self) -> Vec<u8> {
        let (b, p, _, h, w) = self.data.dim();
        let mut out = Vec::with_capacity(16 + self.data.len() * 4 + 8);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, b as u16, p as u16, h as u16, w as u16] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.min.to_le_bytes());
        out.extend_from_slice(&self.max.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "flow container");
        r.expect_magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::malformed("flow container", format!("unsupported version {version}")));
        }
        let dims = [r.u16()?, r.u16()?, r.u16()?, r.u16()?].map(usize::from);
        let n = dims.iter().product::<usize>() * 2;
        if n == 0 || n > MAX_VALUES {
            return Err(Error::malformed("flow container", format!("bad dimensions {dims:?}")));
        }
        let values = r.f32s(n)?;
        let (min, max) = (r.f32()?, r.f32()?);
        r.finish()?;
        if values.iter().any(|v| !v.is_finite()) || !min.is_finite() || !max.is_finite() || min > max {
            return Err(Error::malformed("flow container", "non-finite or inconsistent values"));
        }
        let data = Array5::from_shape_vec((dims[0], dims[1], 2, dims[2], dims[3]), values).expect("size checked");
        Ok(FlowFile { data, min, max })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
