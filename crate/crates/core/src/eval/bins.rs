use super::{greedy_match, AnnotationFile, Tagged};
use crate::detector::ResultsFile;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;

/// Size class of a ground truth under one characteristic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bin {
    XS,
    S,
    M,
    L,
    XL,
}

impl fmt::Display for Bin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Right-closed bins `(0, 0.02]`, `(0.02, 0.04]`, `(0.04, 0.06]`,
/// `(0.06, 0.08]`, `(0.08, 1]` of the fraction of the video covered.
pub fn coverage_bin(coverage: f64) -> Bin {
    match coverage {
        c if c <= 0.02 => Bin::XS,
        c if c <= 0.04 => Bin::S,
        c if c <= 0.06 => Bin::M,
        c if c <= 0.08 => Bin::L,
        _ => Bin::XL,
    }
}

/// Right-closed length bins in seconds: `(0, 3]`, `(3, 6]`, `(6, 12]`,
/// `(12, 18]`, `> 18`.
pub fn length_bin(seconds: f64) -> Bin {
    match seconds {
        s if s <= 3.0 => Bin::XS,
        s if s <= 6.0 => Bin::S,
        s if s <= 12.0 => Bin::M,
        s if s <= 18.0 => Bin::L,
        _ => Bin::XL,
    }
}

/// Instances of the same class in one video: `1`, `[2, 40]`, `(40, 80]`,
/// `> 80`. The shared endpoint 40 goes to `S`.
pub fn instance_bin(count: usize) -> Bin {
    match count {
        0 | 1 => Bin::XS,
        2..=40 => Bin::S,
        41..=80 => Bin::M,
        _ => Bin::L,
    }
}

/// Bins of one ground truth, addressed by video and annotation index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtBins {
    pub video: usize,
    pub index: usize,
    pub coverage: Bin,
    pub length: Bin,
    pub instances: Bin,
}

pub fn assign_bins(gts: &AnnotationFile) -> Vec<GtBins> {
    let mut out = Vec::new();
    for (vi, v) in gts.videos.iter().enumerate() {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for a in &v.annotations {
            *counts.entry(a.label).or_default() += 1;
        }
        for (ai, a) in v.annotations.iter().enumerate() {
            out.push(GtBins {
                video: vi,
                index: ai,
                coverage: coverage_bin(a.duration() / v.duration_s),
                length: length_bin(a.duration()),
                instances: instance_bin(counts[&a.label]),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCount {
    pub total: usize,
    pub missed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub bins: BTreeMap<Bin, BinCount>,
}

impl BinReport {
    fn record(&mut self, bin: Bin, missed: bool) {
        let e = self.bins.entry(bin).or_default();
        e.total += 1;
        e.missed += usize::from(missed);
    }

    /// Fraction of ground truths in `bin` left unmatched; `None` if empty.
    pub fn miss_rate(&self, bin: Bin) -> Option<f64> {
        self.bins
            .get(&bin)
            .filter(|c| c.total > 0)
            .map(|c| c.missed as f64 / c.total as f64)
    }
}

/// False-negative rates per characteristic bin.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FnProfile {
    pub tiou: f64,
    pub coverage: BinReport,
    pub length: BinReport,
    pub instances: BinReport,
}

/// Matches predictions to ground truths per class (greedy, score order)
/// and reports which ground truths stay unmatched, by bin.
pub fn fn_profile(results: &ResultsFile, gts: &AnnotationFile, tiou: f64) -> FnProfile {
    let bins = assign_bins(gts);
    let mut matched: HashMap<(usize, usize), bool> = HashMap::new();
    let labels: std::collections::BTreeSet<usize> =
        gts.videos.iter().flat_map(|v| v.annotations.iter().map(|a| a.label)).collect();
    for label in labels {
        let mut g = Vec::new();
        let mut keys = Vec::new();
        let mut p = Vec::new();
        for (vi, v) in gts.videos.iter().enumerate() {
            for (ai, a) in v.annotations.iter().enumerate().filter(|(_, a)| a.label == label) {
                g.push(Tagged {
                    video: vi,
                    segment: [a.start_s, a.end_s],
                    score: 1.0,
                });
                keys.push((vi, ai));
            }
            for r in results.results.get(&v.id).into_iter().flatten().filter(|r| r.label == label) {
                p.push(Tagged {
                    video: vi,
                    segment: r.segment(),
                    score: r.score,
                });
            }
        }
        let m = greedy_match(&p, &g, tiou);
        for k in &keys {
            matched.insert(*k, false);
        }
        for j in m.into_iter().flatten() {
            matched.insert(keys[j], true);
        }
    }
    let mut prof = FnProfile {
        tiou,
        ..FnProfile::default()
    };
    for b in bins {
        let missed = !matched[&(b.video, b.index)];
        prof.coverage.record(b.coverage, missed);
        prof.length.record(b.length, missed);
        prof.instances.record(b.instances, missed);
    }
    prof
}
