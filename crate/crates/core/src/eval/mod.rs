//! Detection metrics, characteristic bins, dataset I/O and a synthetic
//! dataset generator.

mod bins;
mod data;
mod oracle;
mod synth;

pub use bins::{assign_bins, fn_profile, coverage_bin, instance_bin, length_bin, Bin, BinReport, FnProfile, GtBins};
pub use data::{read_features, write_features, Annotation, AnnotationFile, Video, FEATURE_MAGIC, FEATURE_VERSION};
pub use oracle::{matched_filter, MatchedFilterConfig};
pub use synth::{synth_generate, Dataset, SynthConfig};

use crate::detector::{interval_iou, ActionInstance, ResultsFile};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Temporal IoU of two segments `[start, end]`.
pub fn iou_1d(a: [f64; 2], b: [f64; 2]) -> Result<f64> {
    for s in [a, b] {
        if !(s[0] < s[1]) || !s[0].is_finite() || !s[1].is_finite() {
            return Err(Error::Invalid(format!("degenerate segment {s:?}")));
        }
    }
    Ok(interval_iou(a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
    /// Ground truths of different classes may overlap in time.
    pub multi_label: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tiou_thresholds: thumos_thresholds(),
            multi_label: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiou_thresholds.is_empty() {
            return Err(Error::Config("eval.tiou_thresholds must not be empty".into()));
        }
        if self.tiou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::Config("eval.tiou_thresholds must lie in (0, 1]".into()));
        }
        if self.tiou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval.tiou_thresholds must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// `0.3, 0.4, …, 0.7`.
pub fn thumos_thresholds() -> Vec<f64> {
    (3..=7).map(|i| i as f64 / 10.0).collect()
}

/// `0.5, 0.55, …, 0.95`.
pub fn anet_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// A segment tagged with the video it belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tagged {
    pub video: usize,
    pub segment: [f64; 2],
    pub score: f64,
}

/// Indices of `preds` in descending score order; ties keep input order.
fn score_order(preds: &[Tagged]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Greedy one-to-one matching in score order. Returns, per prediction in
/// the input order, the matched ground-truth index.
pub fn greedy_match(preds: &[Tagged], gts: &[Tagged], tiou: f64) -> Vec<Option<usize>> {
    let mut used = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for i in score_order(preds) {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.video != p.video {
                continue;
            }
            let iou = interval_iou(p.segment, g.segment);
            if iou >= tiou && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// Enumerates every partial injective assignment and keeps the ones that
/// satisfy the greedy rule at each step; the rule admits exactly one.
pub fn match_bruteforce(preds: &[Tagged], gts: &[Tagged], tiou: f64) -> Vec<Option<usize>> {
    let order = score_order(preds);
    let n = preds.len();
    let choices = gts.len() + 1;
    let total = choices.checked_pow(n as u32).expect("brute-force instance too large");
    let iou = |i: usize, j: usize| {
        if preds[i].video == gts[j].video {
            interval_iou(preds[i].segment, gts[j].segment)
        } else {
            0.0
        }
    };
    let mut found: Vec<Vec<Option<usize>>> = Vec::new();
    for code in 0..total {
        let mut c = code;
        let assign: Vec<Option<usize>> = (0..n)
            .map(|_| {
                let d = c % choices;
                c /= choices;
                (d > 0).then(|| d - 1)
            })
            .collect();
        let mut used = vec![false; gts.len()];
        let mut ok = true;
        for &i in &order {
            let free: Vec<usize> = (0..gts.len()).filter(|&j| !used[j]).collect();
            match assign[i] {
                Some(j) => {
                    let admissible = !used[j]
                        && iou(i, j) >= tiou
                        && free.iter().all(|&k| iou(i, k) < iou(i, j) || (iou(i, k) == iou(i, j) && k >= j));
                    if !admissible {
                        ok = false;
                        break;
                    }
                    used[j] = true;
                }
                None => {
                    if free.iter().any(|&k| iou(i, k) >= tiou) {
                        ok = false;
                        break;
                    }
                }
            }
        }
        if ok {
            found.push(assign);
        }
    }
    assert_eq!(found.len(), 1, "greedy rule must determine a unique assignment");
    found.pop().expect("one assignment")
}

/// All-point interpolated AP from true-positive flags in score order.
pub fn ap_from_flags(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// AP of tagged predictions against tagged ground truths of one class.
pub fn tagged_ap(preds: &[Tagged], gts: &[Tagged], tiou: f64) -> f64 {
    let m = greedy_match(preds, gts, tiou);
    let tp: Vec<bool> = score_order(preds).into_iter().map(|i| m[i].is_some()).collect();
    ap_from_flags(&tp, gts.len())
}

/// AP of one class within one video. Predictions and ground truths of
/// other labels than the first ground truth's are ignored.
pub fn average_precision(preds: &[ActionInstance], gts: &[ActionInstance], tiou: f64) -> f64 {
    let Some(label) = gts.first().map(|g| g.label) else {
        return 0.0;
    };
    let tag = |a: &ActionInstance| Tagged {
        video: 0,
        segment: a.segment(),
        score: a.score,
    };
    let p: Vec<Tagged> = preds.iter().filter(|a| a.label == label).map(tag).collect();
    let g: Vec<Tagged> = gts.iter().filter(|a| a.label == label).map(tag).collect();
    tagged_ap(&p, &g, tiou)
}

/// Per-threshold and averaged mAP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapTable {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub average: f64,
    /// `per_class[k][i]`: AP of class `k` at threshold `i`; classes without
    /// ground truth are absent.
    pub per_class: BTreeMap<usize, Vec<f64>>,
}

impl MapTable {
    pub fn at(&self, tiou: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| (t - tiou).abs() < 1e-9).map(|i| self.map[i])
    }

    /// `threshold,mAP` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,mAP\n");
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            s.push_str(&format!("{t:.2},{m:.6}\n"));
        }
        s
    }
}

/// Splits results and annotations into per-class tagged lists.
fn by_class(results: &ResultsFile, gts: &AnnotationFile) -> BTreeMap<usize, (Vec<Tagged>, Vec<Tagged>)> {
    let mut classes: BTreeMap<usize, (Vec<Tagged>, Vec<Tagged>)> = BTreeMap::new();
    for (vi, v) in gts.videos.iter().enumerate() {
        for a in &v.annotations {
            classes.entry(a.label).or_default().1.push(Tagged {
                video: vi,
                segment: [a.start_s, a.end_s],
                score: 1.0,
            });
        }
        if let Some(preds) = results.results.get(&v.id) {
            for p in preds {
                classes.entry(p.label).or_default().0.push(Tagged {
                    video: vi,
                    segment: p.segment(),
                    score: p.score,
                });
            }
        }
    }
    classes.retain(|_, (_, g)| !g.is_empty());
    classes
}

/// mAP over the classes that have ground truth, at each threshold.
pub fn mean_ap(results: &ResultsFile, gts: &AnnotationFile, cfg: &EvalConfig) -> Result<MapTable> {
    cfg.validate()?;
    let classes = by_class(results, gts);
    let per_class: BTreeMap<usize, Vec<f64>> = classes
        .iter()
        .map(|(&k, (p, g))| (k, cfg.tiou_thresholds.iter().map(|&t| tagged_ap(p, g, t)).collect()))
        .collect();
    let map: Vec<f64> = (0..cfg.tiou_thresholds.len())
        .map(|i| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.values().map(|v| v[i]).sum::<f64>() / per_class.len() as f64
            }
        })
        .collect();
    let average = map.iter().sum::<f64>() / map.len() as f64;
    Ok(MapTable {
        thresholds: cfg.tiou_thresholds.clone(),
        map,
        average,
        per_class,
    })
}
