use crate::detector::ActionInstance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub start_s: f64,
    pub end_s: f64,
    pub label: usize,
}

impl Annotation {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn as_instance(&self) -> ActionInstance {
        ActionInstance::new(self.start_s, self.end_s, self.label, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Video {
    pub id: String,
    pub duration_s: f64,
    pub fps: f64,
    pub annotations: Vec<Annotation>,
}

impl Video {
    /// Frame count implied by duration and rate.
    pub fn frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub version: u32,
    pub videos: Vec<Video>,
}

impl AnnotationFile {
    pub const VERSION: u32 = 1;

    pub fn new(videos: Vec<Video>) -> Self {
        Self {
            version: Self::VERSION,
            videos,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != Self::VERSION {
            return Err(Error::Format(format!("annotation version {} (expected {})", self.version, Self::VERSION)));
        }
        for v in &self.videos {
            if !(v.duration_s > 0.0) || !(v.fps > 0.0) {
                return Err(Error::Format(format!("video {}: duration and fps must be positive", v.id)));
            }
            for a in &v.annotations {
                if !(a.start_s >= 0.0 && a.start_s < a.end_s) {
                    return Err(Error::Format(format!("video {}: invalid segment [{}, {}]", v.id, a.start_s, a.end_s)));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        f.validate()?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Videos whose id starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self::new(self.videos.iter().filter(|v| v.id.starts_with(prefix)).cloned().collect())
    }

    pub fn num_instances(&self) -> usize {
        self.videos.iter().map(|v| v.annotations.len()).sum()
    }
}

pub const FEATURE_MAGIC: &[u8; 4] = b"MTAD";
pub const FEATURE_VERSION: u32 = 1;

/// Serializes time-major `[t, c]` features.
pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(Error::shape("write_features", format!("want [t, c], got {s:?}")));
    }
    let mut buf = Vec::with_capacity(16 + 4 * features.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    for d in s {
        let d = u32::try_from(*d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if buf.len() < 16 || &buf[..4] != FEATURE_MAGIC {
        return Err(bad("missing MTAD header"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != FEATURE_VERSION {
        return Err(bad(&format!("unsupported version {}", word(4))));
    }
    let (t, c) = (word(8) as usize, word(12) as usize);
    let body = &buf[16..];
    if body.len() != 4 * t * c {
        return Err(bad(&format!("expected {} payload bytes, found {}", 4 * t * c, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&[t, c], data)
}
