//! Finite-difference cases for every differentiable graph operation.

use crate::detector::{FOCAL_ALPHA, FOCAL_GAMMA};
use crate::error::Result;
use crate::par::Exec;
use crate::ssm::ScanSpec;
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tolerance class of an operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpClass {
    /// Pointwise maps and pure data movement.
    Elementwise,
    /// Affine maps and normalization.
    Linear,
    /// Composite kernels: scans, pooling, losses.
    Composite,
}

impl OpClass {
    /// Relative-error bound under central differences with `eps = 1e-5`.
    pub fn tolerance(self) -> f64 {
        match self {
            OpClass::Elementwise | OpClass::Linear => 1e-6,
            OpClass::Composite => 1e-4,
        }
    }
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A scalar loss built from one op applied to random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub class: OpClass,
    pub inputs: Vec<Tensor<f64>>,
    build: Builder,
}

impl OpCase {
    pub fn check(&self) -> Result<GradCheckReport> {
        grad_check(&self.build, &self.inputs, 1e-5)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches length")
}

/// Values bounded away from zero, for kinks at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("shape matches length")
}

/// Distinct values at least 0.05 apart, so finite differences never cross
/// an argmax tie.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("shape matches length")
}

/// `Σ w ⊙ y` with a fixed random weight, so every output element matters.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn case<F>(name: &'static str, class: OpClass, inputs: Vec<Tensor<f64>>, f: F) -> OpCase
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
{
    OpCase {
        name,
        class,
        inputs,
        build: Box::new(move |g, p| {
            let y = f(g, p)?;
            if g.value(y).len() == 1 {
                Ok(y)
            } else {
                weighted(g, y, 97)
            }
        }),
    }
}

/// One case per registered op, drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    use OpClass::*;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let x = |r: &mut ChaCha8Rng| uniform(r, &[2, 5, 3], -1.5, 1.5);
    let mut cases = vec![
        case("add", Elementwise, vec![x(r), uniform(r, &[3], -1.0, 1.0)], |g, p| g.add(p[0], p[1])),
        case("sub", Elementwise, vec![x(r), uniform(r, &[5, 1], -1.0, 1.0)], |g, p| g.sub(p[0], p[1])),
        case("mul", Elementwise, vec![x(r), x(r)], |g, p| g.mul(p[0], p[1])),
        case("exp", Elementwise, vec![x(r)], |g, p| g.exp(p[0])),
        case("neg", Elementwise, vec![x(r)], |g, p| g.neg(p[0])),
        case("softplus", Elementwise, vec![x(r)], |g, p| g.softplus(p[0])),
        case("silu", Elementwise, vec![x(r)], |g, p| g.silu(p[0])),
        case("gelu", Elementwise, vec![x(r)], |g, p| g.gelu(p[0])),
        case("sigmoid", Elementwise, vec![x(r)], |g, p| g.sigmoid(p[0])),
        case("relu", Elementwise, vec![away_from_zero(r, &[2, 5, 3])], |g, p| g.relu(p[0])),
        case("scale", Elementwise, vec![x(r)], |g, p| g.scale(p[0], -0.7)),
        case("flip_time", Elementwise, vec![x(r)], |g, p| g.flip_time(p[0])),
        case("flip", Elementwise, vec![x(r)], |g, p| g.flip(p[0], 2)),
        case("permute", Elementwise, vec![x(r)], |g, p| g.permute(p[0], &[2, 0, 1])),
        case("transpose_last", Elementwise, vec![x(r)], |g, p| g.transpose_last(p[0])),
        case("reshape", Elementwise, vec![x(r)], |g, p| g.reshape(p[0], &[10, 3])),
        case("concat", Elementwise, vec![x(r), uniform(r, &[2, 2, 3], -1.0, 1.0)], |g, p| g.concat(&[p[0], p[1]], 1)),
        case("slice", Elementwise, vec![x(r)], |g, p| g.slice(p[0], 1, 1, 4)),
        case("sum_all", Elementwise, vec![x(r)], |g, p| {
            let e = g.exp(p[0])?;
            g.sum_all(e)
        }),
        case("mean_all", Elementwise, vec![x(r)], |g, p| {
            let s = g.silu(p[0])?;
            g.mean_all(s)
        }),
        case("mask_diagonal", Elementwise, vec![uniform(r, &[4, 5], -1.0, 1.0)], |g, p| g.mask_diagonal(p[0])),
        case(
            "linear",
            Linear,
            vec![x(r), uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            |g, p| g.linear(p[0], p[1], Some(p[2])),
        ),
        case(
            "conv1d_depthwise_causal",
            Linear,
            vec![uniform(r, &[2, 3, 7], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
            |g, p| g.conv1d_depthwise(p[0], p[1], true),
        ),
        case(
            "conv1d_depthwise_centred",
            Linear,
            vec![uniform(r, &[2, 3, 7], -1.0, 1.0), uniform(r, &[3, 3], -1.0, 1.0)],
            |g, p| g.conv1d_depthwise(p[0], p[1], false),
        ),
        case(
            "conv1d",
            Linear,
            vec![uniform(r, &[2, 3, 6], -1.0, 1.0), uniform(r, &[4, 3, 3], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            |g, p| g.conv1d(p[0], p[1], Some(p[2])),
        ),
        case(
            "layer_norm",
            Linear,
            vec![x(r), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -1.0, 1.0)],
            |g, p| g.layer_norm(p[0], p[1], p[2], 1e-5),
        ),
        case("maxpool1d", Composite, vec![spaced(r, &[2, 3, 9])], |g, p| g.maxpool1d(p[0], 2, 2)),
        case(
            "maxpool1d_overlapping",
            Composite,
            vec![spaced(r, &[1, 2, 8])],
            |g, p| g.maxpool1d(p[0], 3, 1),
        ),
    ];
    for subtract_self in [false, true] {
        let (b, t, c, n) = (2, 6, 3, 4);
        cases.push(case(
            if subtract_self { "selective_scan_masked" } else { "selective_scan" },
            Composite,
            vec![
                uniform(r, &[b, t, c], -1.0, 1.0),
                uniform(r, &[b, t, c], 0.05, 1.0),
                uniform(r, &[c, n], -1.5, -0.2),
                uniform(r, &[b, t, n], -1.0, 1.0),
                uniform(r, &[b, t, n], -1.0, 1.0),
            ],
            move |g, p| {
                let spec = ScanSpec {
                    subtract_self,
                    exec: Exec::Sequential,
                };
                g.selective_scan(p[0], p[1], p[2], p[3], p[4], spec)
            },
        ));
    }
    cases.push(case(
        "selective_params",
        Composite,
        vec![
            x(r),
            uniform(r, &[3, 4], -1.0, 1.0),
            uniform(r, &[3, 4], -1.0, 1.0),
            uniform(r, &[3, 3], -1.0, 1.0),
            uniform(r, &[3], -1.0, 1.0),
        ],
        |g, p| {
            let s = g.selective_params(p[0], p[1], p[2], p[3], p[4])?;
            let bc = g.mul(s.b, s.c)?;
            let l1 = weighted(g, bc, 5)?;
            let l2 = weighted(g, s.delta, 6)?;
            g.add(l1, l2)
        },
    ));
    let mut target = vec![0.0; 2 * 5 * 3];
    for (i, v) in target.iter_mut().enumerate() {
        if i % 4 == 0 {
            *v = 1.0;
        }
    }
    let target = Tensor::new(&[2, 5, 3], target).expect("shape matches length");
    cases.push(case("sigmoid_focal_sum", Composite, vec![x(r)], move |g, p| {
        g.sigmoid_focal_sum(p[0], &target, FOCAL_ALPHA, FOCAL_GAMMA)
    }));
    let to = uniform(r, &[6, 2], 0.5, 3.0);
    let w = Tensor::from_f64(&[6], &[1.0, 0.0, 1.0, 0.5, 1.0, 2.0]).expect("six weights");
    cases.push(case("diou_sum", Composite, vec![uniform(r, &[6, 2], 0.3, 3.0)], move |g, p| {
        g.diou_sum(p[0], &to, &w)
    }));
    cases
}
