use super::{AnnotationFile, SynthConfig};
use crate::detector::{ActionInstance, ResultsFile};
use crate::tensor::Tensor;

/// Box-filter detector that knows which channel carries each class.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedFilterConfig {
    /// Odd window length in frames.
    pub window: usize,
    /// Detection level as a fraction of the class mean shift.
    pub threshold: f64,
    pub shift: f64,
    pub min_frames: usize,
    pub num_classes: usize,
}

impl MatchedFilterConfig {
    pub fn for_synth(cfg: &SynthConfig) -> Self {
        Self {
            window: 9,
            threshold: 0.5,
            shift: cfg.shift,
            min_frames: cfg.min_frames / 2,
            num_classes: cfg.num_classes,
        }
    }
}

fn box_filter(x: &[f64], window: usize) -> Vec<f64> {
    let h = window / 2;
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Cross-correlates each class channel with a box template and reports
/// above-threshold runs. Scores are the run's mean response over the
/// shift, capped at 1.
pub fn matched_filter(gts: &AnnotationFile, features: &[Tensor<f32>], cfg: &MatchedFilterConfig) -> ResultsFile {
    let mut out = ResultsFile::default();
    for (v, f) in gts.videos.iter().zip(features) {
        let (t, c) = (f.shape()[0], f.shape()[1]);
        let mut dets = Vec::new();
        for k in 0..cfg.num_classes.min(c) {
            let col: Vec<f64> = (0..t).map(|i| f.data()[i * c + k] as f64).collect();
            let r = box_filter(&col, cfg.window);
            let level = cfg.threshold * cfg.shift;
            let mut i = 0;
            while i < t {
                if r[i] <= level {
                    i += 1;
                    continue;
                }
                let s = i;
                while i < t && r[i] > level {
                    i += 1;
                }
                if i - s >= cfg.min_frames {
                    let mean = col[s..i].iter().sum::<f64>() / (i - s) as f64;
                    let score = (mean / cfg.shift).clamp(0.0, 1.0);
                    dets.push(ActionInstance::new(s as f64 / v.fps, i as f64 / v.fps, k, score));
                }
            }
        }
        out.results.insert(v.id.clone(), dets);
    }
    out
}
