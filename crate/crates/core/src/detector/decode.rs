use super::LevelLayout;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// A scored, labelled temporal segment in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub start_s: f64,
    pub end_s: f64,
    pub label: usize,
    pub score: f64,
}

impl ActionInstance {
    pub fn new(start_s: f64, end_s: f64, label: usize, score: f64) -> Self {
        Self {
            start_s,
            end_s,
            label,
            score,
        }
    }

    pub fn segment(&self) -> [f64; 2] {
        [self.start_s, self.end_s]
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Intersection over union of two intervals; 0 when either is empty.
pub(crate) fn interval_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub pre_nms_topk: usize,
    pub nms_sigma: f64,
    pub min_score: f64,
    pub max_per_video: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.01,
            pre_nms_topk: 2000,
            nms_sigma: 0.5,
            min_score: 0.001,
            max_per_video: 200,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_sigma > 0.0) {
            return Err(Error::Config(format!("eval.decode.nms_sigma must be positive, got {}", self.nms_sigma)));
        }
        if !(0.0..1.0).contains(&self.score_thresh) || !(0.0..1.0).contains(&self.min_score) {
            return Err(Error::Config("eval.decode thresholds must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Turns per-position probabilities `[T, C]` and offsets `[T, 2]` into
/// candidate segments for a sequence of `t` frames sampled at `fps`.
pub fn decode<T: Scalar>(
    probs: &Tensor<T>,
    offsets: &Tensor<T>,
    layout: &LevelLayout,
    t: usize,
    fps: f64,
    score_thresh: f64,
    pre_nms_topk: usize,
) -> Result<Vec<ActionInstance>> {
    let total = layout.total();
    let ps = probs.shape();
    if ps.len() != 2 || ps[0] != total || offsets.shape() != [total, 2] {
        return Err(Error::shape(
            "decode",
            format!("probs {ps:?}, offsets {:?} for {total} positions", offsets.shape()),
        ));
    }
    let nc = ps[1];
    let (pd, od) = (probs.data(), offsets.data());
    let tf = t as f64;
    let mut out = Vec::new();
    for pos in 0..total {
        let (l, p) = layout.point(pos);
        let s = layout.strides[l] as f64;
        let start = (p - od[2 * pos].f64() * s).clamp(0.0, tf);
        let end = (p + od[2 * pos + 1].f64() * s).clamp(0.0, tf);
        if end <= start {
            continue;
        }
        for k in 0..nc {
            let score = pd[pos * nc + k].f64();
            if score > score_thresh {
                out.push(ActionInstance::new(start / fps, end / fps, k, score));
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(pre_nms_topk);
    Ok(out)
}

/// Per-class Gaussian soft-NMS: each selected candidate decays the scores of
/// the remaining ones by `exp(-iou² / sigma)`. Output is ordered by
/// descending score.
pub fn soft_nms(cands: &[ActionInstance], sigma: f64, min_score: f64) -> Vec<ActionInstance> {
    let mut by_class: BTreeMap<usize, Vec<ActionInstance>> = BTreeMap::new();
    for c in cands {
        by_class.entry(c.label).or_default().push(*c);
    }
    let mut out = Vec::with_capacity(cands.len());
    for (_, mut pool) in by_class {
        while !pool.is_empty() {
            let mut best = 0;
            for (i, c) in pool.iter().enumerate() {
                if c.score > pool[best].score {
                    best = i;
                }
            }
            let top = pool.remove(best);
            for c in &mut pool {
                let iou = interval_iou(top.segment(), c.segment());
                c.score *= (-iou * iou / sigma).exp();
            }
            pool.retain(|c| c.score >= min_score);
            out.push(top);
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResultEntry {
    segment: [f64; 2],
    label: usize,
    score: f64,
}

/// Detections for a set of videos, in the common results JSON layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsFile {
    pub results: BTreeMap<String, Vec<ActionInstance>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultsJson {
    results: BTreeMap<String, Vec<ResultEntry>>,
}

impl ResultsFile {
    pub fn to_json(&self) -> Result<String> {
        let doc = ResultsJson {
            results: self
                .results
                .iter()
                .map(|(k, v)| {
                    let entries = v
                        .iter()
                        .map(|a| ResultEntry {
                            segment: a.segment(),
                            label: a.label,
                            score: a.score,
                        })
                        .collect();
                    (k.clone(), entries)
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ResultsJson = serde_json::from_str(s)?;
        let mut results = BTreeMap::new();
        for (k, v) in doc.results {
            let mut list = Vec::with_capacity(v.len());
            for e in v {
                if !(e.segment[0] < e.segment[1]) || e.segment[0] < 0.0 {
                    return Err(Error::Format(format!("video {k}: invalid segment {:?}", e.segment)));
                }
                list.push(ActionInstance::new(e.segment[0], e.segment[1], e.label, e.score));
            }
            results.insert(k, list);
        }
        Ok(Self { results })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
