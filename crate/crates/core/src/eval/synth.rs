use super::{read_features, write_features, Annotation, AnnotationFile, Video};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Synthetic dataset parameters. Class `k` raises channel `k` by `shift`
/// and adds a sinusoid of period `4 + 2k` frames over each instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_train: usize,
    pub num_test: usize,
    pub fps: f64,
    pub duration_s: [f64; 2],
    pub channels: usize,
    pub num_classes: usize,
    pub noise: f64,
    pub shift: f64,
    pub sine_amp: f64,
    /// Inclusive range of instances per video.
    pub instances: [usize; 2],
    pub min_frames: usize,
    /// Instance lengths are drawn from a uniformly chosen `(lo, hi]` band.
    pub length_bands_s: Vec<[f64; 2]>,
    pub min_gap_s: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_train: 200,
            num_test: 50,
            fps: 4.0,
            duration_s: [64.0, 128.0],
            channels: 8,
            num_classes: 5,
            noise: 0.5,
            shift: 1.5,
            sine_amp: 1.0,
            instances: [2, 6],
            min_frames: 8,
            length_bands_s: vec![[1.5, 3.0], [3.0, 6.0], [6.0, 12.0], [12.0, 18.0], [18.0, 30.0]],
            min_gap_s: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.num_classes == 0 || self.channels < self.num_classes {
            return bad("channels must be >= num_classes >= 1");
        }
        if !(self.fps > 0.0) || !(self.duration_s[0] > 0.0) || self.duration_s[0] > self.duration_s[1] {
            return bad("fps and duration range must be positive and ordered");
        }
        if self.instances[0] > self.instances[1] || self.instances[1] == 0 {
            return bad("instances range must be ordered and nonempty");
        }
        if self.length_bands_s.is_empty() || self.length_bands_s.iter().any(|b| !(b[0] >= 0.0 && b[0] < b[1])) {
            return bad("length_bands_s must be nonempty ordered pairs");
        }
        if self.noise < 0.0 || self.min_frames == 0 {
            return bad("noise must be >= 0 and min_frames >= 1");
        }
        let longest = self.length_bands_s.iter().map(|b| b[1]).fold(0.0, f64::max);
        if longest + 2.0 * self.min_gap_s > self.duration_s[0] {
            return bad("longest instance does not fit in the shortest video");
        }
        Ok(())
    }

    /// Period in frames of the class sinusoid.
    pub fn period(&self, class: usize) -> f64 {
        4.0 + 2.0 * class as f64
    }
}

/// Annotations plus per-video time-major features `[t, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub annotations: AnnotationFile,
    pub features: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Videos whose id starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        let (videos, features) = self
            .annotations
            .videos
            .iter()
            .zip(&self.features)
            .filter(|(v, _)| v.id.starts_with(prefix))
            .map(|(v, f)| (v.clone(), f.clone()))
            .unzip();
        Self {
            annotations: AnnotationFile::new(videos),
            features,
        }
    }

    /// Writes `annotations.json` and `features/<id>.bin` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let fdir = dir.join("features");
        std::fs::create_dir_all(&fdir)?;
        self.annotations.save(&dir.join("annotations.json"))?;
        for (v, f) in self.annotations.videos.iter().zip(&self.features) {
            write_features(&fdir.join(format!("{}.bin", v.id)), f)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let annotations = AnnotationFile::load(&dir.join("annotations.json"))?;
        let features = annotations
            .videos
            .iter()
            .map(|v| {
                let f = read_features(&dir.join("features").join(format!("{}.bin", v.id)))?;
                if f.shape()[0] != v.frames() {
                    return Err(Error::Format(format!(
                        "video {}: {} feature frames for {} annotated frames",
                        v.id,
                        f.shape()[0],
                        v.frames()
                    )));
                }
                Ok(f)
            })
            .collect::<Result<_>>()?;
        Ok(Self { annotations, features })
    }
}

fn generate_video(cfg: &SynthConfig, id: String, rng: &mut ChaCha8Rng) -> (Video, Tensor<f32>) {
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise level");
    let duration_frames = rng.random_range(cfg.duration_s[0] * cfg.fps..=cfg.duration_s[1] * cfg.fps).round() as usize;
    let t = duration_frames;
    let c = cfg.channels;
    let mut x: Vec<f64> = (0..t * c).map(|_| noise.sample(rng)).collect();
    let want = rng.random_range(cfg.instances[0]..=cfg.instances[1]);
    let gap = (cfg.min_gap_s * cfg.fps).ceil() as usize;
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    for _ in 0..want {
        let band = cfg.length_bands_s[rng.random_range(0..cfg.length_bands_s.len())];
        let lo = ((band[0] * cfg.fps).floor() as usize + 1).max(cfg.min_frames);
        let hi = (band[1] * cfg.fps).floor() as usize;
        if lo > hi {
            continue;
        }
        let len = rng.random_range(lo..=hi);
        let label = rng.random_range(0..cfg.num_classes);
        for _attempt in 0..50 {
            if len + 2 * gap > t {
                break;
            }
            let s = rng.random_range(gap..=t - len - gap);
            let e = s + len;
            if placed.iter().all(|&(ps, pe, _)| e + gap <= ps || pe + gap <= s) {
                placed.push((s, e, label));
                break;
            }
        }
    }
    placed.sort_unstable();
    for &(s, e, label) in &placed {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let w = std::f64::consts::TAU / cfg.period(label);
        for i in s..e {
            x[i * c + label] += cfg.shift + cfg.sine_amp * (w * (i - s) as f64 + phase).sin();
        }
    }
    let annotations = placed
        .iter()
        .map(|&(s, e, label)| Annotation {
            start_s: s as f64 / cfg.fps,
            end_s: e as f64 / cfg.fps,
            label,
        })
        .collect();
    let video = Video {
        id,
        duration_s: t as f64 / cfg.fps,
        fps: cfg.fps,
        annotations,
    };
    let feats = Tensor::new(&[t, c], x.into_iter().map(|v| v as f32).collect()).expect("sized above");
    (video, feats)
}

/// Deterministic dataset: ids `train_NNNN` then `test_NNNN`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut videos = Vec::with_capacity(cfg.num_train + cfg.num_test);
    let mut features = Vec::with_capacity(videos.capacity());
    let ids = (0..cfg.num_train)
        .map(|i| format!("train_{i:04}"))
        .chain((0..cfg.num_test).map(|i| format!("test_{i:04}")));
    for id in ids {
        let (v, f) = generate_video(cfg, id, &mut rng);
        videos.push(v);
        features.push(f);
    }
    Ok(Dataset {
        annotations: AnnotationFile::new(videos),
        features,
    })
}
