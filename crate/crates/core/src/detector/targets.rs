use super::LevelLayout;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Label assignment rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    /// Half-width of the center region, in strides of the level.
    pub center_radius: f64,
    /// Base of the geometric regression ranges, in strides.
    pub r0: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            center_radius: 1.5,
            r0: 2.0,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.center_radius > 0.0) || !(self.r0 > 0.0) {
            return Err(Error::Config(format!(
                "targets.center_radius and targets.r0 must be positive, got {} and {}",
                self.center_radius, self.r0
            )));
        }
        Ok(())
    }

    /// Allowed max-offset range of a level, in frames. The finest level has
    /// no lower bound and the coarsest none above.
    pub fn range(&self, level: usize, levels: usize) -> (f64, f64) {
        let s = (1usize << level) as f64;
        let lo = if level == 0 { 0.0 } else { self.r0 * s };
        let hi = if level + 1 == levels { f64::INFINITY } else { 2.0 * self.r0 * s };
        (lo, hi)
    }
}

/// Ground truth expressed in frame coordinates of the input sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameSegment {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

impl FrameSegment {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// What a positive position should predict.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionTarget {
    pub label: usize,
    pub d_start: f64,
    pub d_end: f64,
    /// Index of the assigned ground truth.
    pub gt: usize,
}

fn clip(gts: &[FrameSegment], t: usize) -> Vec<Option<FrameSegment>> {
    let tf = t as f64;
    gts.iter()
        .map(|g| {
            let c = FrameSegment {
                start: g.start.max(0.0),
                end: g.end.min(tf),
                label: g.label,
            };
            if c.start != g.start || c.end != g.end {
                log::warn!("ground truth [{}, {}] clipped to sequence extent [0, {tf}]", g.start, g.end);
            }
            (!c.is_empty()).then_some(c)
        })
        .collect()
}

fn better(a: &FrameSegment, ai: usize, b: Option<(usize, &FrameSegment)>) -> bool {
    match b {
        None => true,
        Some((bi, b)) => a.len() < b.len() || (a.len() == b.len() && ai < bi),
    }
}

/// Per-position targets for one sequence of `t` frames. `None` marks a
/// negative position.
pub fn assign_targets(gts: &[FrameSegment], layout: &LevelLayout, t: usize, cfg: &TargetConfig) -> Vec<Option<PositionTarget>> {
    let gts = clip(gts, t);
    let levels = layout.lengths.len();
    let mut best: Vec<Option<usize>> = vec![None; layout.total()];
    for (gi, g) in gts.iter().enumerate() {
        let Some(g) = g else { continue };
        for l in 0..levels {
            let s = layout.strides[l] as f64;
            let (lo_m, hi_m) = cfg.range(l, levels);
            let r = cfg.center_radius * s;
            let lo = (g.start.max(g.center() - r) / s).ceil().max(0.0) as usize;
            let hi = (g.end.min(g.center() + r) / s).floor();
            if hi < 0.0 {
                continue;
            }
            let hi = (hi as usize).min(layout.lengths[l] - 1);
            for i in lo..=hi {
                let p = i as f64 * s;
                if p < g.start || p > g.end || (p - g.center()).abs() > r {
                    continue;
                }
                let m = (p - g.start).max(g.end - p);
                if m < lo_m || m >= hi_m {
                    continue;
                }
                let pos = layout.position(l, i);
                let cur = best[pos].map(|bi| (bi, gts[bi].as_ref().expect("assigned gts exist")));
                if better(g, gi, cur) {
                    best[pos] = Some(gi);
                }
            }
        }
    }
    best.iter()
        .enumerate()
        .map(|(pos, b)| {
            b.map(|gi| {
                let g = gts[gi].expect("assigned gts exist");
                let (l, p) = layout.point(pos);
                let s = layout.strides[l] as f64;
                PositionTarget {
                    label: g.label,
                    d_start: (p - g.start) / s,
                    d_end: (g.end - p) / s,
                    gt: gi,
                }
            })
        })
        .collect()
}

/// Reference assignment that evaluates the rule for every
/// (position, ground truth) pair.
pub fn assign_targets_bruteforce(
    gts: &[FrameSegment],
    layout: &LevelLayout,
    t: usize,
    cfg: &TargetConfig,
) -> Vec<Option<PositionTarget>> {
    let gts = clip(gts, t);
    let levels = layout.lengths.len();
    (0..layout.total())
        .map(|pos| {
            let (l, p) = layout.point(pos);
            let s = layout.strides[l] as f64;
            let (lo_m, hi_m) = cfg.range(l, levels);
            let mut pick: Option<(usize, &FrameSegment)> = None;
            for (gi, g) in gts.iter().enumerate() {
                let Some(g) = g else { continue };
                let inside = g.start <= p && p <= g.end;
                let central = (p - g.center()).abs() <= cfg.center_radius * s;
                let m = (p - g.start).max(g.end - p);
                if inside && central && lo_m <= m && m < hi_m && better(g, gi, pick) {
                    pick = Some((gi, g));
                }
            }
            pick.map(|(gi, g)| PositionTarget {
                label: g.label,
                d_start: (p - g.start) / s,
                d_end: (g.end - p) / s,
                gt: gi,
            })
        })
        .collect()
}

/// Dense training targets for a batch.
#[derive(Clone, Debug)]
pub struct BatchTargets<T: Scalar> {
    /// `[b, T, C]` one-hot labels, zero rows for negatives.
    pub cls: Tensor<T>,
    /// `[b, T, 2]` offsets in stride units, zero for negatives.
    pub offsets: Tensor<T>,
    /// `[b, T]` 1 on positives.
    pub positive: Tensor<T>,
    pub num_pos: usize,
}

impl<T: Scalar> BatchTargets<T> {
    pub fn new(per_video: &[Vec<Option<PositionTarget>>], num_classes: usize) -> Result<Self> {
        let b = per_video.len();
        let total = per_video.first().map_or(0, Vec::len);
        if per_video.iter().any(|v| v.len() != total) {
            return Err(Error::shape("targets", "videos in a batch have different layouts"));
        }
        let mut cls = vec![T::zero(); b * total * num_classes];
        let mut offsets = vec![T::zero(); b * total * 2];
        let mut positive = vec![T::zero(); b * total];
        let mut num_pos = 0;
        for (bi, v) in per_video.iter().enumerate() {
            for (pos, tgt) in v.iter().enumerate() {
                let Some(tgt) = tgt else { continue };
                if tgt.label >= num_classes {
                    return Err(Error::Invalid(format!("label {} >= {num_classes} classes", tgt.label)));
                }
                let row = bi * total + pos;
                cls[row * num_classes + tgt.label] = T::one();
                offsets[row * 2] = T::of(tgt.d_start);
                offsets[row * 2 + 1] = T::of(tgt.d_end);
                positive[row] = T::one();
                num_pos += 1;
            }
        }
        Ok(Self {
            cls: Tensor::new(&[b, total, num_classes], cls)?,
            offsets: Tensor::new(&[b, total, 2], offsets)?,
            positive: Tensor::new(&[b, total], positive)?,
            num_pos,
        })
    }
}
