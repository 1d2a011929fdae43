//! Diagonal-masked bidirectional state-space block.
//!
//! The input `[b, t, c]` is projected to `λc` channels and split into one
//! half per branch. Each branch runs three pathways on its half `v` with the
//! block input `x` as gate source:
//!
//! ```text
//! X1 = SSM_fw(σ(DWConv(v)))
//! X2 = flip(SSM_bw(σ(DWConv(flip v))))
//! X3 = σ(Linear(x))
//! out = (X1 ⊙ X3) ⊕ (X2 ⊙ X3)
//! ```
//!
//! The second branch sees the whole sequence reversed and its output is
//! flipped back before the branches are summed; a final linear layer maps
//! `λc → c`. [`Dmbss::forward`] adds the residual; [`Dmbss::mix`] is the
//! residual-free sequence mixer used by the pre-norm layers around it.

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::par::Exec;
use crate::ssm::{MaskMode, ScanSpec};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which scans the diagonal mask applies to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskTarget {
    /// The backward direction inside each branch.
    Directions,
    /// The forward direction of the reversed second branch.
    Branch,
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmbssConfig {
    pub c: usize,
    pub lambda: usize,
    pub n: usize,
    pub conv_k: usize,
    pub share_params: bool,
    pub dual_branch: bool,
    pub diag_mask: bool,
    pub mask_mode: MaskMode,
    pub mask_target: MaskTarget,
}

impl Default for DmbssConfig {
    fn default() -> Self {
        Self {
            c: 64,
            lambda: 4,
            n: 16,
            conv_k: 4,
            share_params: true,
            dual_branch: true,
            diag_mask: true,
            mask_mode: MaskMode::Semantic,
            mask_target: MaskTarget::Both,
        }
    }
}

impl DmbssConfig {
    pub fn with_width(&self, c: usize) -> Self {
        Self { c, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.n == 0 {
            return Err(Error::Config("dmbss.c and dmbss.n must be positive".into()));
        }
        if self.lambda < 1 {
            return Err(Error::Config("dmbss.lambda must be at least 1".into()));
        }
        if !(self.lambda * self.c).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "dmbss expanded width lambda*c = {} must be even",
                self.lambda * self.c
            )));
        }
        if self.conv_k == 0 {
            return Err(Error::Config("dmbss.conv_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Per-branch pathway width `λc/2`.
    pub fn branch_width(&self) -> usize {
        self.lambda * self.c / 2
    }

    fn masks(&self, branch: usize) -> (bool, bool) {
        if !self.diag_mask {
            return (false, false);
        }
        let dirs = matches!(self.mask_target, MaskTarget::Directions | MaskTarget::Both);
        let br = matches!(self.mask_target, MaskTarget::Branch | MaskTarget::Both);
        let fw = branch == 1 && br;
        (fw, dirs)
    }
}

/// One row of the toggle ablation: sharing, mask on directions, second
/// branch, mask on the branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub share_params: bool,
    pub mask_directions: bool,
    pub dual_branch: bool,
    pub mask_branch: bool,
}

impl AblationRow {
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.share_params {
            parts.push("bps");
        }
        if self.mask_directions {
            parts.push("dm");
        }
        if self.dual_branch {
            parts.push("db");
        }
        if self.mask_branch {
            parts.push("dm-db");
        }
        parts.join("+")
    }

    pub fn apply(&self, base: &DmbssConfig) -> DmbssConfig {
        let mask_target = match (self.mask_directions, self.mask_branch) {
            (true, false) => MaskTarget::Directions,
            (false, true) => MaskTarget::Branch,
            _ => MaskTarget::Both,
        };
        DmbssConfig {
            share_params: self.share_params,
            dual_branch: self.dual_branch,
            diag_mask: self.mask_directions || self.mask_branch,
            mask_target,
            ..base.clone()
        }
    }
}

/// The eight toggle combinations of the ablation table, in table order.
pub fn ablation_matrix() -> Vec<AblationRow> {
    const ROWS: [(bool, bool, bool, bool); 8] = [
        (true, false, false, false),
        (false, false, true, false),
        (true, false, true, false),
        (true, true, false, false),
        (false, false, true, true),
        (true, false, true, true),
        (true, true, true, false),
        (true, true, true, true),
    ];
    ROWS.iter()
        .map(|&(share_params, mask_directions, dual_branch, mask_branch)| AblationRow {
            share_params,
            mask_directions,
            dual_branch,
            mask_branch,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectionIds {
    pub conv: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub delta_bias: ParamId,
    pub a_log: ParamId,
}

impl DirectionIds {
    fn all(&self) -> [ParamId; 6] {
        [self.conv, self.w_b, self.w_c, self.w_delta, self.delta_bias, self.a_log]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BranchIds {
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub fw: DirectionIds,
    pub bw: DirectionIds,
}

/// Direction of a pathway scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// The three pathway outputs of one branch, each `[b, t, λc/2]`.
#[derive(Clone, Copy, Debug)]
pub struct Pathways {
    pub x1: Var,
    pub x2: Var,
    pub x3: Var,
}

/// Parameter layout of one block inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Dmbss {
    pub config: DmbssConfig,
    pub in_proj: ParamId,
    pub branches: Vec<BranchIds>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub exec: Exec,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn init_direction<T: Scalar, R: Rng>(
    cfg: &DmbssConfig,
    store: &mut ParamStore<T>,
    prefix: &str,
    rng: &mut R,
) -> DirectionIds {
    let (w, n, k) = (cfg.branch_width(), cfg.n, cfg.conv_k);
    let conv = store.add_uniform(format!("{prefix}.conv"), &[w, k], 1.0 / (k as f64).sqrt(), rng);
    let w_b = store.add_uniform(format!("{prefix}.w_b"), &[w, n], 1.0 / (w as f64).sqrt(), rng);
    let w_c = store.add_uniform(format!("{prefix}.w_c"), &[w, n], 1.0 / (w as f64).sqrt(), rng);
    let w_delta = store.add_uniform(format!("{prefix}.w_delta"), &[w, w], 0.1 / (w as f64).sqrt(), rng);
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    let bias: Vec<T> = (0..w)
        .map(|_| T::of(inverse_softplus(rng.random_range(lo..hi).exp())))
        .collect();
    let delta_bias = store.add(format!("{prefix}.delta_bias"), Tensor::from_parts(vec![w], bias));
    let a: Vec<T> = (0..w * n).map(|i| T::of(((i % n) as f64 + 1.0).ln())).collect();
    let a_log = store.add(format!("{prefix}.a_log"), Tensor::from_parts(vec![w, n], a));
    DirectionIds {
        conv,
        w_b,
        w_c,
        w_delta,
        delta_bias,
        a_log,
    }
}

impl Dmbss {
    /// Registers a freshly initialized block under `prefix`.
    pub fn init<T: Scalar, R: Rng>(config: &DmbssConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.c;
        let w = config.branch_width();
        let nb = if config.dual_branch { 2 } else { 1 };
        let in_proj = store.add_uniform(format!("{prefix}.in_proj"), &[c, nb * w], 1.0 / (c as f64).sqrt(), rng);
        let mut branches = Vec::with_capacity(nb);
        for bi in 0..nb {
            let p = format!("{prefix}.branch{bi}");
            let gate_w = store.add_uniform(format!("{p}.gate_w"), &[c, w], 1.0 / (c as f64).sqrt(), rng);
            let gate_b = store.add(format!("{p}.gate_b"), Tensor::zeros(&[w]));
            let fw = init_direction(config, store, &format!("{p}.fw"), rng);
            let bw = if config.share_params {
                fw
            } else {
                init_direction(config, store, &format!("{p}.bw"), rng)
            };
            branches.push(BranchIds { gate_w, gate_b, fw, bw });
        }
        let out_w = store.add_uniform(format!("{prefix}.out_w"), &[2 * w, c], 1.0 / ((2 * w) as f64).sqrt(), rng);
        let out_b = store.add(format!("{prefix}.out_b"), Tensor::zeros(&[c]));
        Ok(Self {
            config: config.clone(),
            in_proj,
            branches,
            out_w,
            out_b,
            exec: Exec::Parallel,
        })
    }

    /// Builds a standalone block and its parameters from a seed.
    pub fn init_seeded<T: Scalar>(config: &DmbssConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = Self::init(config, &mut store, "dmbss", &mut rng)?;
        Ok((block, store))
    }

    /// Every parameter id used by the block, without duplicates.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.in_proj, self.out_w, self.out_b];
        for b in &self.branches {
            ids.push(b.gate_w);
            ids.push(b.gate_b);
            ids.extend(b.fw.all());
            ids.extend(b.bw.all());
        }
        ids.sort();
        ids.dedup();
        ids
    }

    /// Distinct state-space parameter elements (conv, projections, `A`) of
    /// one branch.
    pub fn ssm_param_count<T: Scalar>(&self, store: &ParamStore<T>, branch: usize) -> usize {
        let b = &self.branches[branch];
        let mut ids: Vec<ParamId> = b.fw.all().into_iter().chain(b.bw.all()).collect();
        ids.sort();
        ids.dedup();
        ids.iter().map(|&id| store.get(id).len()).sum()
    }

    fn scan<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, v: Var, ids: &DirectionIds, masked: bool) -> Result<Var> {
        let vt = g.transpose_last(v)?;
        let conv = g.conv1d_depthwise(vt, bind.var(ids.conv), true)?;
        let conv = g.transpose_last(conv)?;
        let s = g.silu(conv)?;
        let sel = g.selective_params(
            s,
            bind.var(ids.w_b),
            bind.var(ids.w_c),
            bind.var(ids.w_delta),
            bind.var(ids.delta_bias),
        )?;
        let mut p = bind.var(ids.a_log);
        if masked && self.config.mask_mode == MaskMode::Literal {
            p = g.mask_diagonal(p)?;
        }
        let a = g.exp(p)?;
        let a = g.neg(a)?;
        let spec = ScanSpec {
            subtract_self: masked && self.config.mask_mode == MaskMode::Semantic,
            exec: self.exec,
        };
        g.selective_scan(s, sel.delta, a, sel.b, sel.c, spec)
    }

    /// One direction of a branch on the branch input `v: [b, t, λc/2]`,
    /// returned in the original time order.
    pub fn direction_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        v: Var,
        branch: usize,
        dir: Direction,
    ) -> Result<Var> {
        let b = self.branches.get(branch).ok_or_else(|| Error::Invalid(format!("no branch {branch}")))?;
        let (mask_fw, mask_bw) = self.config.masks(branch);
        match dir {
            Direction::Forward => self.scan(g, bind, v, &b.fw, mask_fw),
            Direction::Backward => {
                let vf = g.flip_time(v)?;
                let y = self.scan(g, bind, vf, &b.bw, mask_bw)?;
                g.flip_time(y)
            }
        }
    }

    /// The three pathways of `branch` for branch input `v` and gate source `x`.
    pub fn pathway_forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, v: Var, x: Var, branch: usize) -> Result<Pathways> {
        let w = self.config.branch_width();
        let vs = g.shape(v);
        if vs.len() != 3 || vs[2] != w {
            return Err(Error::shape("pathway", format!("branch input {vs:?}, width {w}")));
        }
        let b = self.branches.get(branch).ok_or_else(|| Error::Invalid(format!("no branch {branch}")))?;
        let gate = g.linear(x, bind.var(b.gate_w), Some(bind.var(b.gate_b)))?;
        let x3 = g.silu(gate)?;
        let x1 = self.direction_forward(g, bind, v, branch, Direction::Forward)?;
        let x2 = self.direction_forward(g, bind, v, branch, Direction::Backward)?;
        Ok(Pathways { x1, x2, x3 })
    }

    /// Sequence mixing without the residual: `[b, t, c] → [b, t, c]`.
    pub fn mix<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != self.config.c {
            return Err(Error::shape("dmbss", format!("input {xs:?} for width {}", self.config.c)));
        }
        let w = self.config.branch_width();
        let e = g.linear(x, bind.var(self.in_proj), None)?;
        let total = if self.config.dual_branch {
            let v0 = g.slice(e, 2, 0, w)?;
            let v1 = g.slice(e, 2, w, 2 * w)?;
            let p0 = self.pathway_forward(g, bind, v0, x, 0)?;
            let out0 = fuse_pathways(g, p0)?;
            let v1f = g.flip_time(v1)?;
            let xf = g.flip_time(x)?;
            let p1 = self.pathway_forward(g, bind, v1f, xf, 1)?;
            let out1 = fuse_pathways(g, p1)?;
            let out1 = g.flip_time(out1)?;
            g.add(out0, out1)?
        } else {
            let p0 = self.pathway_forward(g, bind, e, x, 0)?;
            fuse_pathways(g, p0)?
        };
        g.linear(total, bind.var(self.out_w), Some(bind.var(self.out_b)))
    }

    /// `mix(x) + x`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Var> {
        let y = self.mix(g, bind, x)?;
        g.add(y, x)
    }
}

/// `(X1 ⊙ X3) ⊕ (X2 ⊙ X3)` along channels.
pub fn fuse_pathways<T: Scalar>(g: &mut Graph<T>, p: Pathways) -> Result<Var> {
    let a = g.mul(p.x1, p.x3)?;
    let b = g.mul(p.x2, p.x3)?;
    g.concat(&[a, b], 2)
}

/// Standalone block evaluation on plain tensors.
pub fn dmbss_forward<T: Scalar>(block: &Dmbss, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bind = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, &bind, xv)?;
    Ok(g.value(y).clone())
}
