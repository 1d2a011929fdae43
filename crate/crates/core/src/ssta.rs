//! State-space temporal adapter and a small frozen backbone to host it.
//!
//! ```text
//! x̂  = W_downᵀ x
//! x̄  = GELU(x̂)
//! x′ = DMBSS(x̂) + x̂ + x̄
//! x″ = W_upᵀ x′ + x
//! ```
//!
//! `W_up` starts at zero, so a freshly adapted backbone computes exactly
//! what the frozen one does.

use crate::dmbss::{Dmbss, DmbssConfig};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamCount, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SstaConfig {
    /// Bottleneck reduction factor, must exceed 1.
    pub lambda: usize,
    /// An adapter follows every `insert_every`-th backbone block.
    pub insert_every: usize,
    /// Inner block settings; its width is replaced by `d / lambda`.
    pub dmbss: DmbssConfig,
}

impl Default for SstaConfig {
    fn default() -> Self {
        Self {
            lambda: 4,
            insert_every: 1,
            dmbss: DmbssConfig::default(),
        }
    }
}

impl SstaConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.lambda <= 1 {
            return Err(Error::Config(format!(
                "ssta.lambda must be > 1 for a parameter reduction, got {}",
                self.lambda
            )));
        }
        if !d.is_multiple_of(self.lambda) {
            return Err(Error::Config(format!(
                "width {d} is not divisible by ssta.lambda {}",
                self.lambda
            )));
        }
        if self.insert_every == 0 {
            return Err(Error::Config("ssta.insert_every must be >= 1".into()));
        }
        self.inner(d).validate()
    }

    fn inner(&self, d: usize) -> DmbssConfig {
        self.dmbss.with_width(d / self.lambda)
    }

    /// Parameters of one adapter at width `d`, counted from the layout.
    pub fn adapter_param_count(&self, d: usize) -> usize {
        let r = d / self.lambda;
        2 * d * r + dmbss_param_count(&self.inner(d))
    }
}

/// Closed-form parameter count of a DMBSS block.
pub fn dmbss_param_count(cfg: &DmbssConfig) -> usize {
    let (c, n, k) = (cfg.c, cfg.n, cfg.conv_k);
    let w = cfg.branch_width();
    let nb = if cfg.dual_branch { 2 } else { 1 };
    let direction = w * k + 2 * w * n + w * w + w + w * n;
    let dirs = if cfg.share_params { 1 } else { 2 };
    let branch = c * w + w + dirs * direction;
    c * nb * w + nb * branch + 2 * w * c + c
}

#[derive(Clone, Debug)]
pub struct Ssta {
    pub d: usize,
    pub lambda: usize,
    pub w_down: ParamId,
    pub w_up: ParamId,
    pub block: Dmbss,
}

impl Ssta {
    pub fn init<T: Scalar, R: Rng>(d: usize, cfg: &SstaConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate(d)?;
        let r = d / cfg.lambda;
        let w_down = store.add_uniform(format!("{prefix}.w_down"), &[d, r], 1.0 / (d as f64).sqrt(), rng);
        let w_up = store.add(format!("{prefix}.w_up"), Tensor::zeros(&[r, d]));
        let block = Dmbss::init(&cfg.inner(d), store, &format!("{prefix}.dmbss"), rng)?;
        Ok(Self {
            d,
            lambda: cfg.lambda,
            w_down,
            w_up,
            block,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_down, self.w_up];
        ids.extend(self.block.param_ids());
        ids
    }

    /// Applies the adapter to `[b, t, d]` or `[b, t, h, w, d]`; spatial
    /// positions are folded into the batch for the temporal pass.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        match xs.len() {
            3 => self.forward_seq(g, bind, x),
            5 => {
                let (b, t, h, w, d) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
                let p = g.permute(x, &[0, 2, 3, 1, 4])?;
                let flat = g.reshape(p, &[b * h * w, t, d])?;
                let y = self.forward_seq(g, bind, flat)?;
                let y = g.reshape(y, &[b, h, w, t, d])?;
                g.permute(y, &[0, 3, 1, 2, 4])
            }
            _ => Err(Error::shape("ssta", format!("want [b, t, d] or [b, t, h, w, d], got {xs:?}"))),
        }
    }

    fn forward_seq<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.d) {
            return Err(Error::shape("ssta", format!("input {:?} for width {}", g.shape(x), self.d)));
        }
        let xh = g.linear(x, bind.var(self.w_down), None)?;
        let xb = g.gelu(xh)?;
        let m = self.block.mix(g, bind, xh)?;
        let xp = g.add(m, xh)?;
        let xp = g.add(xp, xb)?;
        let up = g.linear(xp, bind.var(self.w_up), None)?;
        g.add(up, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d: usize,
    pub blocks: usize,
    /// Width of the raw per-frame input projected to `d`.
    pub in_channels: usize,
    pub conv_k: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d: 256,
            blocks: 4,
            in_channels: 8,
            conv_k: 3,
            seed: 20_240_917,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.blocks == 0 || self.in_channels == 0 {
            return Err(Error::Config("backbone d, blocks and in_channels must be positive".into()));
        }
        if self.conv_k.is_multiple_of(2) {
            return Err(Error::Config(format!("backbone.conv_k must be odd, got {}", self.conv_k)));
        }
        Ok(())
    }

    /// MLP `d → 4d → d` plus a depthwise temporal kernel.
    pub fn block_param_count(&self) -> usize {
        let d = self.d;
        d * 4 * d + 4 * d + 4 * d * d + d + d * self.conv_k
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    conv: ParamId,
}

/// Frozen stack of `x + MLP(x)` then `h + DWConv_t(h)` blocks.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    pub config: BackboneConfig,
    input_w: ParamId,
    input_b: ParamId,
    blocks: Vec<BlockIds>,
}

pub const BACKBONE_PREFIX: &str = "backbone.";

impl ToyBackbone {
    /// Random frozen weights drawn from `config.seed`.
    pub fn init<T: Scalar>(config: &BackboneConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let input_w = store.add_uniform("backbone.input.w", &[config.in_channels, d], 1.0 / (config.in_channels as f64).sqrt(), &mut rng);
        let input_b = store.add("backbone.input.b", Tensor::zeros(&[d]));
        let blocks = (0..config.blocks)
            .map(|i| {
                let p = format!("backbone.block{i}");
                BlockIds {
                    w1: store.add_uniform(format!("{p}.w1"), &[d, 4 * d], 1.0 / (d as f64).sqrt(), &mut rng),
                    b1: store.add(format!("{p}.b1"), Tensor::zeros(&[4 * d])),
                    w2: store.add_uniform(format!("{p}.w2"), &[4 * d, d], 0.5 / ((4 * d) as f64).sqrt(), &mut rng),
                    b2: store.add(format!("{p}.b2"), Tensor::zeros(&[d])),
                    conv: store.add_uniform(format!("{p}.conv"), &[d, config.conv_k], 0.5 / config.conv_k as f64, &mut rng),
                }
            })
            .collect();
        store.set_trainable_prefix(BACKBONE_PREFIX, false);
        Ok(Self {
            config: config.clone(),
            input_w,
            input_b,
            blocks,
        })
    }

    pub fn input<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Var> {
        g.linear(x, bind.var(self.input_w), Some(bind.var(self.input_b)))
    }

    /// One block on `[b, t, d]`.
    pub fn block<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, i: usize, x: Var) -> Result<Var> {
        let ids = &self.blocks[i];
        let h = g.linear(x, bind.var(ids.w1), Some(bind.var(ids.b1)))?;
        let h = g.gelu(h)?;
        let h = g.linear(h, bind.var(ids.w2), Some(bind.var(ids.b2)))?;
        let h = g.add(x, h)?;
        let ht = g.transpose_last(h)?;
        let c = g.conv1d_depthwise(ht, bind.var(ids.conv), false)?;
        let c = g.transpose_last(c)?;
        g.add(h, c)
    }

    /// `[b, t, in_channels] → [b, t, d]` without adapters.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Var> {
        let mut h = self.input(g, bind, x)?;
        for i in 0..self.blocks.len() {
            h = self.block(g, bind, i, h)?;
        }
        Ok(h)
    }
}

/// Backbone with adapters after selected blocks.
#[derive(Clone, Debug)]
pub struct AdaptedBackbone {
    pub backbone: ToyBackbone,
    pub adapters: Vec<Option<Ssta>>,
}

/// Inserts an adapter after every `cfg.insert_every`-th block. Backbone
/// parameters are frozen; the new adapter parameters are trainable.
pub fn adapt_backbone<T: Scalar>(bb: ToyBackbone, store: &mut ParamStore<T>, cfg: &SstaConfig, seed: u64) -> Result<AdaptedBackbone> {
    cfg.validate(bb.config.d)?;
    store.set_trainable_prefix(BACKBONE_PREFIX, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapters = (0..bb.config.blocks)
        .map(|i| {
            if (i + 1) % cfg.insert_every == 0 {
                Ssta::init(bb.config.d, cfg, store, &format!("ssta.block{i}"), &mut rng).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    Ok(AdaptedBackbone { backbone: bb, adapters })
}

impl AdaptedBackbone {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Var> {
        let mut h = self.backbone.input(g, bind, x)?;
        for (i, a) in self.adapters.iter().enumerate() {
            h = self.backbone.block(g, bind, i, h)?;
            if let Some(a) = a {
                h = a.forward(g, bind, h)?;
            }
        }
        Ok(h)
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters.iter().flatten().count()
    }

    /// Drops every adapter, leaving the frozen backbone.
    pub fn strip(self) -> ToyBackbone {
        self.backbone
    }
}

/// Trainable and frozen element counts of a store.
pub fn count_trainable<T: Scalar>(store: &ParamStore<T>) -> ParamCount {
    store.count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small_cfg() -> SstaConfig {
        SstaConfig {
            lambda: 2,
            insert_every: 1,
            dmbss: DmbssConfig {
                lambda: 2,
                n: 3,
                conv_k: 3,
                ..DmbssConfig::default()
            },
        }
    }

    fn small_backbone() -> BackboneConfig {
        BackboneConfig {
            d: 8,
            blocks: 2,
            in_channels: 3,
            ..BackboneConfig::default()
        }
    }

    fn run<F: Fn(&mut Graph<f64>, &Binding, Var) -> Result<Var>>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Tensor<f64> {
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = f(&mut g, &bind, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let mut store = ParamStore::new();
        let a = Ssta::init(8, &small_cfg(), &mut store, "a", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = input(&[2, 9, 8], 2);
        assert_eq!(run(&store, &x, |g, b, v| a.forward(g, b, v)), x);
    }

    #[test]
    fn spatial_input_keeps_shape() {
        let mut store = ParamStore::new();
        let a = Ssta::init(8, &small_cfg(), &mut store, "a", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        store.set(a.w_up, input(&[4, 8], 3)).unwrap();
        let x = input(&[2, 5, 3, 2, 8], 4);
        let y = run(&store, &x, |g, b, v| a.forward(g, b, v));
        assert_eq!(y.shape(), x.shape());
        // Each spatial site is an independent sequence.
        let site = |t: &Tensor<f64>, h: usize, w: usize| -> Vec<f64> {
            (0..5).flat_map(|ti| (0..8).map(move |c| (ti, c))).map(|(ti, c)| t.get(&[1, ti, h, w, c])).collect()
        };
        let seq = Tensor::new(&[1, 5, 8], site(&x, 2, 1)).unwrap();
        let ys = run(&store, &seq, |g, b, v| a.forward(g, b, v));
        let diff = ys.data().iter().zip(site(&y, 2, 1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-14, "{diff}");
    }

    #[test]
    fn lambda_one_and_indivisible_widths_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = SstaConfig { lambda: 1, ..small_cfg() };
        assert!(Ssta::init(8, &one, &mut store, "a", &mut rng).is_err());
        let three = SstaConfig { lambda: 3, ..small_cfg() };
        assert!(Ssta::init(8, &three, &mut store, "a", &mut rng).is_err());
    }

    #[test]
    fn only_adapters_receive_gradients() {
        let mut store = ParamStore::new();
        let bb = ToyBackbone::init(&small_backbone(), &mut store).unwrap();
        let ad = adapt_backbone(bb, &mut store, &small_cfg(), 5).unwrap();
        for a in ad.adapters.iter().flatten() {
            store.set(a.w_up, input(&[4, 8], 6)).unwrap();
        }
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let x = g.constant(input(&[1, 6, 3], 7));
        let y = ad.forward(&mut g, &bind, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let per = bind.gradients(&store, &mut grads);
        for id in store.ids() {
            let frozen = store.name(id).starts_with(BACKBONE_PREFIX);
            assert_eq!(per[id.index()].is_none(), frozen, "{}", store.name(id));
        }
    }

    #[test]
    fn stripping_adapters_recovers_backbone() {
        let mut store = ParamStore::new();
        let bb = ToyBackbone::init(&small_backbone(), &mut store).unwrap();
        let x = input(&[2, 6, 3], 8);
        let frozen = run(&store, &x, |g, b, v| bb.forward(g, b, v));
        let ad = adapt_backbone(bb, &mut store, &small_cfg(), 9).unwrap();
        assert_eq!(run(&store, &x, |g, b, v| ad.forward(g, b, v)), frozen);
        let bb = ad.strip();
        assert_eq!(run(&store, &x, |g, b, v| bb.forward(g, b, v)), frozen);
    }

    #[test]
    fn closed_form_counts() {
        let cfg = SstaConfig::default();
        let mut store = ParamStore::<f32>::new();
        let bcfg = BackboneConfig::default();
        let bb = ToyBackbone::init(&bcfg, &mut store).unwrap();
        assert_eq!(count_trainable(&store).trainable, 0);
        assert_eq!(store.count_prefix("backbone.block0"), bcfg.block_param_count());
        let ad = adapt_backbone(bb, &mut store, &cfg, 1).unwrap();
        assert_eq!(ad.adapter_count(), 4);
        let per = cfg.adapter_param_count(256);
        assert_eq!(store.count_prefix("ssta.block0."), per);
        let c = count_trainable(&store);
        assert_eq!(c.trainable, 4 * per);
        assert_eq!(c.frozen, 4 * bcfg.block_param_count() + 8 * 256 + 256);
        assert!((per as f64) < 0.35 * bcfg.block_param_count() as f64, "{per}");
        let shrink: Vec<_> = [2usize, 4, 8, 16].iter().map(|&l| SstaConfig { lambda: l, ..cfg.clone() }.adapter_param_count(256)).collect();
        assert!(shrink.windows(2).all(|w| w[1] < w[0]), "{shrink:?}");
    }
}
