//! One-stage anchor-free temporal action detector.
//!
//! Input features `[b, c_in, t]` pass through a small convolutional
//! embedding, a pyramid of pre-norm DMBSS layers with stride-2 max pooling,
//! and a global fusion layer that runs one more DMBSS over the concatenation
//! of every level. Shared convolutional heads then predict per-position class
//! logits and boundary offsets.
//!
//! Internally every sequence tensor is time-major, `[b, t, c]`.

mod decode;
mod loss;
mod targets;

pub use decode::{decode, soft_nms, ActionInstance, DecodeConfig, ResultsFile};
pub(crate) use decode::interval_iou;
pub use loss::{detection_loss, LossParts, FOCAL_ALPHA, FOCAL_GAMMA};
pub use targets::{assign_targets, assign_targets_bruteforce, BatchTargets, FrameSegment, PositionTarget, TargetConfig};

use crate::dmbss::{Dmbss, DmbssConfig};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub c: usize,
    pub embed_layers: usize,
    pub levels: usize,
    pub num_classes: usize,
    pub head_kernel: usize,
    pub ln_eps: f64,
    /// Initial foreground probability encoded in the class-head bias.
    pub prior_prob: f64,
    pub dmbss: DmbssConfig,
    pub targets: TargetConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            in_channels: 8,
            c: 16,
            embed_layers: 2,
            levels: 6,
            num_classes: 5,
            head_kernel: 3,
            ln_eps: 1e-5,
            prior_prob: 0.01,
            dmbss: DmbssConfig {
                c: 16,
                n: 4,
                ..DmbssConfig::default()
            },
            targets: TargetConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.c == 0 || self.num_classes == 0 {
            return bad("in_channels, c and num_classes must be positive".into());
        }
        if self.embed_layers == 0 {
            return bad("embed_layers must be >= 1".into());
        }
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        if self.head_kernel.is_multiple_of(2) {
            return bad(format!("head_kernel must be odd, got {}", self.head_kernel));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad(format!("prior_prob must lie in (0, 1), got {}", self.prior_prob));
        }
        self.dmbss.with_width(self.c).validate()?;
        self.targets.validate()
    }

    /// Shortest input the pyramid accepts.
    pub fn min_len(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Lengths, strides and concatenation offsets of the pyramid levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelLayout {
    pub lengths: Vec<usize>,
    pub strides: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl LevelLayout {
    pub fn new(t: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Invalid("pyramid needs at least one level".into()));
        }
        if t < 1 << (levels - 1) {
            return Err(Error::Invalid(format!(
                "sequence of length {t} is too short for {levels} pyramid levels (need {})",
                1usize << (levels - 1)
            )));
        }
        let mut lengths = vec![t];
        for _ in 1..levels {
            let prev = *lengths.last().expect("nonempty");
            lengths.push(prev.div_ceil(2));
        }
        let strides = (0..levels).map(|l| 1usize << l).collect();
        let mut offsets = Vec::with_capacity(levels);
        let mut acc = 0;
        for &len in &lengths {
            offsets.push(acc);
            acc += len;
        }
        Ok(Self { lengths, strides, offsets })
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// `(level, index)` of a position in the concatenated sequence.
    pub fn locate(&self, pos: usize) -> Option<(usize, usize)> {
        if pos >= self.total() {
            return None;
        }
        let level = self.offsets.partition_point(|&o| o <= pos) - 1;
        Some((level, pos - self.offsets[level]))
    }

    pub fn position(&self, level: usize, index: usize) -> usize {
        self.offsets[level] + index
    }

    /// Frame coordinate of the point a position predicts from.
    pub fn point(&self, pos: usize) -> (usize, f64) {
        let (l, i) = self.locate(pos).expect("position in range");
        (l, (i * self.strides[l]) as f64)
    }
}

/// Per-level features, each `[b, t_l, c]`.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub levels: Vec<Var>,
    pub layout: LevelLayout,
}

/// Concatenated multi-level sequence `[b, Σ t_l, c]`.
#[derive(Clone, Debug)]
pub struct GlobalSequence {
    pub features: Var,
    pub layout: LevelLayout,
}

/// Raw head outputs on the graph.
#[derive(Clone, Debug)]
pub struct DetectorOutput {
    /// `[b, T, C]` pre-sigmoid class scores.
    pub cls_logits: Var,
    /// `[b, T, 2]` nonnegative `(d_start, d_end)` in stride units.
    pub offsets: Var,
    pub layout: LevelLayout,
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct PyramidLevel {
    norm: NormIds,
    block: Dmbss,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    embed: Vec<ConvIds>,
    pyramid: Vec<PyramidLevel>,
    global_in: NormIds,
    global: Dmbss,
    global_out: NormIds,
    trunk: ConvIds,
    cls: ConvIds,
    reg: ConvIds,
}

fn add_conv<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, k: usize, rng: &mut R) -> ConvIds {
    let bound = 1.0 / ((cin * k) as f64).sqrt();
    ConvIds {
        w: store.add_uniform(format!("{name}.w"), &[cout, cin, k], bound, rng),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
    }
}

fn add_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> NormIds {
    NormIds {
        gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
    }
}

impl Detector {
    pub fn init<T: Scalar, R: Rng>(config: &DetectorConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.c;
        let block_cfg = config.dmbss.with_width(c);
        let embed = (0..config.embed_layers)
            .map(|i| {
                let cin = if i == 0 { config.in_channels } else { c };
                add_conv(store, &format!("detector.embed{i}"), c, cin, 3, rng)
            })
            .collect();
        let mut pyramid = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let norm = add_norm(store, &format!("detector.level{l}.norm"), c);
            let block = Dmbss::init(&block_cfg, store, &format!("detector.level{l}.dmbss"), rng)?;
            pyramid.push(PyramidLevel { norm, block });
        }
        let global_in = add_norm(store, "detector.global.norm_in", c);
        let global = Dmbss::init(&block_cfg, store, "detector.global.dmbss", rng)?;
        let global_out = add_norm(store, "detector.global.norm_out", c);
        let k = config.head_kernel;
        let trunk = add_conv(store, "detector.head.trunk", c, c, k, rng);
        let cls = add_conv(store, "detector.head.cls", config.num_classes, c, k, rng);
        let prior = -((1.0 - config.prior_prob) / config.prior_prob).ln();
        store.set(cls.b, Tensor::full(&[config.num_classes], T::of(prior)))?;
        let reg = add_conv(store, "detector.head.reg", 2, c, k, rng);
        Ok(Self {
            config: config.clone(),
            embed,
            pyramid,
            global_in,
            global,
            global_out,
            trunk,
            cls,
            reg,
        })
    }

    /// Every DMBSS block, pyramid levels first and the global block last.
    pub fn blocks(&self) -> impl Iterator<Item = &Dmbss> {
        self.pyramid.iter().map(|l| &l.block).chain(std::iter::once(&self.global))
    }

    pub fn set_exec(&mut self, exec: crate::par::Exec) {
        for l in &mut self.pyramid {
            l.block.exec = exec;
        }
        self.global.exec = exec;
    }

    /// `[b, c_in, t] → [b, c, t]`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 3 || xs[1] != self.config.in_channels {
            return Err(Error::shape(
                "embed",
                format!("input {xs:?} for {} channels", self.config.in_channels),
            ));
        }
        let mut h = x;
        for (i, conv) in self.embed.iter().enumerate() {
            if i > 0 {
                h = g.gelu(h)?;
            }
            h = g.conv1d(h, bind.var(conv.w), Some(bind.var(conv.b)))?;
        }
        Ok(h)
    }

    /// `f0: [b, c, t]` to per-level `[b, t_l, c]` features.
    pub fn pyramid_forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, f0: Var) -> Result<PyramidFeatures> {
        let t = g.shape(f0)[2];
        let layout = LevelLayout::new(t, self.config.levels)?;
        let eps = self.config.ln_eps;
        let mut f = g.transpose_last(f0)?;
        let mut levels = Vec::with_capacity(self.pyramid.len());
        for (l, level) in self.pyramid.iter().enumerate() {
            let z = g.layer_norm(f, bind.var(level.norm.gamma), bind.var(level.norm.beta), eps)?;
            let z = level.block.mix(g, bind, z)?;
            let mut out = g.add(f, z)?;
            if l > 0 {
                let ct = g.transpose_last(out)?;
                let pooled = g.maxpool1d(ct, 2, 2)?;
                out = g.transpose_last(pooled)?;
            }
            levels.push(out);
            f = out;
        }
        Ok(PyramidFeatures { levels, layout })
    }

    /// `F_G = LN(mix(LN F) + F)` over the concatenated levels.
    pub fn global_fusion<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, p: &PyramidFeatures) -> Result<GlobalSequence> {
        let eps = self.config.ln_eps;
        let f = g.concat(&p.levels, 1)?;
        let z = g.layer_norm(f, bind.var(self.global_in.gamma), bind.var(self.global_in.beta), eps)?;
        let z = self.global.mix(g, bind, z)?;
        let z = g.add(z, f)?;
        let features = g.layer_norm(z, bind.var(self.global_out.gamma), bind.var(self.global_out.beta), eps)?;
        Ok(GlobalSequence {
            features,
            layout: p.layout.clone(),
        })
    }

    pub fn heads_forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, s: &GlobalSequence) -> Result<DetectorOutput> {
        let ct = g.transpose_last(s.features)?;
        let h = g.conv1d(ct, bind.var(self.trunk.w), Some(bind.var(self.trunk.b)))?;
        let h = g.gelu(h)?;
        let cls = g.conv1d(h, bind.var(self.cls.w), Some(bind.var(self.cls.b)))?;
        let cls_logits = g.transpose_last(cls)?;
        let reg = g.conv1d(h, bind.var(self.reg.w), Some(bind.var(self.reg.b)))?;
        let reg = g.softplus(reg)?;
        let offsets = g.transpose_last(reg)?;
        Ok(DetectorOutput {
            cls_logits,
            offsets,
            layout: s.layout.clone(),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<DetectorOutput> {
        let f0 = self.embed(g, bind, x)?;
        let p = self.pyramid_forward(g, bind, f0)?;
        let s = self.global_fusion(g, bind, &p)?;
        self.heads_forward(g, bind, &s)
    }

    /// Inference on one video's time-major features `[t, c_in]`.
    /// Returns class probabilities `[T, C]`, offsets `[T, 2]` and the layout.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, features: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, LevelLayout)> {
        let s = features.shape();
        if s.len() != 2 {
            return Err(Error::shape("predict", format!("want [t, c_in], got {s:?}")));
        }
        let x = features.transpose_last()?.reshape(&[1, s[1], s[0]])?;
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let xv = g.constant(x);
        let out = self.forward(&mut g, &bind, xv)?;
        let total = out.layout.total();
        let probs = g
            .value(out.cls_logits)
            .map(crate::tensor::sigmoid_value)
            .reshape(&[total, self.config.num_classes])?;
        let offsets = g.value(out.offsets).reshape(&[total, 2])?;
        Ok((probs, offsets, out.layout))
    }

    /// Full inference: forward, decode and soft-NMS for one video.
    pub fn detect<T: Scalar>(&self, store: &ParamStore<T>, features: &Tensor<T>, fps: f64, cfg: &DecodeConfig) -> Result<Vec<ActionInstance>> {
        let t = features.shape()[0];
        let (probs, offsets, layout) = self.predict(store, features)?;
        let cands = decode(&probs, &offsets, &layout, t, fps, cfg.score_thresh, cfg.pre_nms_topk)?;
        let mut out = soft_nms(&cands, cfg.nms_sigma, cfg.min_score);
        out.truncate(cfg.max_per_video);
        Ok(out)
    }
}
