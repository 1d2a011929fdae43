//! Verification suites: every oracle comparison in one place, runnable
//! from tests and from the command line.
//!
//! Each suite reports one or more checks, each with the largest observed
//! error and its bound. A [`Fault`] deliberately breaks one component so
//! the suites themselves can be shown to detect failures.

mod registry;

pub use registry::{op_cases, OpCase, OpClass};

use crate::dmbss::{Dmbss, DmbssConfig, MaskTarget};
use crate::detector::ActionInstance;
use crate::error::{Error, Result};
use crate::eval::{
    average_precision, coverage_bin, greedy_match, instance_bin, length_bin, match_bruteforce, Bin, Tagged,
};
use crate::par::Exec;
use crate::ssm::{
    bidirectional_compose, discretize_zoh, lti_apply, lti_kernel, materialize_mixing_matrix, scan_parallel,
    scan_recurrent, BackwardScan, DiscreteSsm, MaskMode, MixingMatrix, SsmParams,
};
use crate::tensor::gradcheck::grad_check;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::time::{Duration, Instant};

/// Suite names in execution order.
pub const SUITES: [&str; 7] = [
    "dense-equivalence",
    "gradient-check",
    "palindrome",
    "mask",
    "lti-kernel",
    "ap-oracle",
    "bin-assignment",
];

/// Constructed faults for testing the suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The semantic diagonal mask is silently skipped.
    DiagMask,
    /// The parallel scan output is perturbed.
    ParallelScan,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag-mask" => Ok(Fault::DiagMask),
            "parallel-scan" => Ok(Fault::ParallelScan),
            other => Err(Error::Invalid(format!(
                "unknown fault `{other}` (expected diag-mask or parallel-scan)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub what: String,
    pub max_err: f64,
    pub tol: f64,
}

impl Check {
    fn new(what: impl Into<String>, max_err: f64, tol: f64) -> Self {
        Self {
            what: what.into(),
            max_err,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_err <= self.tol
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(Check::passed)
    }

    /// Largest error over all checks (NaN if any check produced NaN).
    pub fn max_err(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_err)
            .fold(0.0, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
    }

    pub fn check(&self, what: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.what == what)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<18} max_err={:.3e} checks={} time={:.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_err(),
            self.checks.len(),
            self.elapsed.as_secs_f64()
        )?;
        for c in self.checks.iter().filter(|c| !c.passed()) {
            write!(f, "\n     failed {}: {:.3e} > {:.1e}", c.what, c.max_err, c.tol)?;
        }
        Ok(())
    }
}

pub fn run_suite(name: &str, fault: Option<Fault>) -> Result<SuiteReport> {
    let start = Instant::now();
    let (name, checks) = match name {
        "dense-equivalence" => (SUITES[0], dense_equivalence(fault)?),
        "gradient-check" => (SUITES[1], gradient_check()?),
        "palindrome" => (SUITES[2], palindrome(fault)?),
        "mask" => (SUITES[3], mask(fault)?),
        "lti-kernel" => (SUITES[4], lti()?),
        "ap-oracle" => (SUITES[5], ap_oracle()),
        "bin-assignment" => (SUITES[6], bin_assignment()),
        other => return Err(Error::Invalid(format!("unknown suite `{other}`"))),
    };
    Ok(SuiteReport {
        name,
        checks,
        elapsed: start.elapsed(),
    })
}

pub fn run_all(fault: Option<Fault>) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|s| run_suite(s, fault)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches length")
}

/// Random selective instance and its input.
pub fn random_scan_instance(seed: u64, b: usize, t: usize, c: usize, n: usize) -> (SsmParams<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_raw = uniform(&mut rng, &[c, n], -1.0, 1.0);
    let bm = uniform(&mut rng, &[b, t, n], -1.0, 1.0);
    let cm = uniform(&mut rng, &[b, t, n], -1.0, 1.0);
    let delta = uniform(&mut rng, &[b, t, c], 0.01, 1.0);
    let x = uniform(&mut rng, &[b, t, c], -1.0, 1.0);
    (SsmParams::new(a_raw, bm, cm, delta).expect("consistent shapes"), x)
}

fn parallel_with_fault<T: Scalar>(d: &DiscreteSsm<T>, c: &Tensor<T>, x: &Tensor<T>, fault: Option<Fault>) -> Result<Tensor<T>> {
    let mut y = scan_parallel(Exec::Parallel, d, c, x)?;
    if fault == Some(Fault::ParallelScan) {
        let last = y.len() - 1;
        y.data_mut()[last] += T::of(1e-3);
    }
    Ok(y)
}

/// Recurrence, parallel scan and dense mixing matrix on 200 random
/// instances with `t ≤ 64, n ≤ 8, c ≤ 4`.
fn dense_equivalence(fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut pick = ChaCha8Rng::seed_from_u64(0xD15E);
    let mut errs = [0.0f64; 4];
    for i in 0..200u64 {
        let b = pick.random_range(1..=2);
        let t = pick.random_range(1..=64);
        let c = pick.random_range(1..=4);
        let n = pick.random_range(1..=8);
        let (p, x) = random_scan_instance(1000 + i, b, t, c, n);
        let d = discretize_zoh(&p)?;
        let rec = scan_recurrent(&d, &p.c, &x)?;
        let par = parallel_with_fault(&d, &p.c, &x, fault)?;
        let dense = materialize_mixing_matrix(&d, &p.c)?.apply(&x)?;
        errs[0] = errs[0].max(rec.max_abs_diff(&dense));
        errs[1] = errs[1].max(par.max_abs_diff(&rec));
        let d32 = DiscreteSsm::from_parts(d.a_bar.cast::<f32>(), d.b_bar.cast::<f32>())?;
        let (c32, x32) = (p.c.cast::<f32>(), x.cast::<f32>());
        let rec32 = scan_recurrent(&d32, &c32, &x32)?;
        let par32 = parallel_with_fault(&d32, &c32, &x32, fault)?;
        let dense32 = materialize_mixing_matrix(&d32, &c32)?.apply(&x32)?;
        errs[2] = errs[2].max(rec32.max_abs_diff(&dense32));
        errs[3] = errs[3].max(par32.max_abs_diff(&rec32));
    }
    Ok(vec![
        Check::new("f64 recurrent vs dense", errs[0], 1e-12),
        Check::new("f64 parallel vs recurrent", errs[1], 1e-12),
        Check::new("f32 recurrent vs dense", errs[2], 1e-5),
        Check::new("f32 parallel vs recurrent", errs[3], 1e-5),
    ])
}

fn small_block(share: bool, dual: bool, mask: bool, mode: MaskMode) -> DmbssConfig {
    DmbssConfig {
        c: 4,
        lambda: 2,
        n: 3,
        conv_k: 3,
        share_params: share,
        dual_branch: dual,
        diag_mask: mask,
        mask_mode: mode,
        mask_target: MaskTarget::Both,
    }
}

/// Relative gradient error of a full DMBSS block at a random point.
pub fn dmbss_block_grad_err(cfg: &DmbssConfig, seed: u64) -> Result<f64> {
    let (blk, mut store) = Dmbss::init_seeded::<f64>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10C);
    let ids = blk.param_ids();
    for &id in &ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, uniform(&mut rng, &shape, -1.0, 1.0))?;
    }
    let x = uniform(&mut rng, &[1, 6, cfg.c], -1.0, 1.0);
    let w = uniform(&mut rng, &[1, 6, cfg.c], -1.0, 1.0);
    let mut params: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
    params.push(x);
    let r = grad_check(
        |g, p| {
            let mut bind = store.bind(g);
            bind.rebind(&ids, &p[..ids.len()]);
            let y = blk.forward(g, &bind, p[ids.len()])?;
            let wv = g.constant(w.clone());
            let yw = g.mul(y, wv)?;
            g.sum_all(yw)
        },
        &params,
        1e-5,
    )?;
    Ok(r.max_rel_err)
}

/// Every registered op, then the full block in three configurations.
fn gradient_check() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for case in op_cases(2024) {
        let r = case.check()?;
        checks.push(Check::new(case.name, r.max_rel_err, case.class.tolerance()));
    }
    for (name, cfg) in [
        ("dmbss shared+dual+semantic", small_block(true, true, true, MaskMode::Semantic)),
        ("dmbss separate+dual+literal", small_block(false, true, true, MaskMode::Literal)),
        ("dmbss single-branch unmasked", small_block(true, false, false, MaskMode::Semantic)),
    ] {
        checks.push(Check::new(name, dmbss_block_grad_err(&cfg, 31)?, 1e-4));
    }
    Ok(checks)
}

struct Bidir {
    fw: DiscreteSsm<f64>,
    c_fw: Tensor<f64>,
    bw: DiscreteSsm<f64>,
    c_bw: Tensor<f64>,
}

impl Bidir {
    /// Runtime bidirectional composition; the diag-mask fault drops the
    /// mask whenever it is requested.
    fn compose(&self, x: &Tensor<f64>, semantic: bool, fault: Option<Fault>) -> Result<Tensor<f64>> {
        let semantic = semantic && fault != Some(Fault::DiagMask);
        let y_fw = scan_recurrent(&self.fw, &self.c_fw, x)?;
        let xb = x.flip(1)?;
        let y_bw = scan_recurrent(&self.bw, &self.c_bw, &xb)?;
        bidirectional_compose(
            &y_fw,
            BackwardScan {
                y: &y_bw,
                ssm: &self.bw,
                c: &self.c_bw,
                x: &xb,
            },
            semantic,
        )
    }

    /// Materializes the runtime composition column by column from unit
    /// impulses. Entry `[c][i][j]` is `∂y_i / ∂x_j` on channel `c`.
    fn impulse_matrix(&self, t: usize, ch: usize, semantic: bool, fault: Option<Fault>) -> Result<Vec<f64>> {
        let mut m = vec![0.0; ch * t * t];
        for j in 0..t {
            for c in 0..ch {
                let mut e = Tensor::zeros(&[1, t, ch]);
                e.data_mut()[j * ch + c] = 1.0;
                let y = self.compose(&e, semantic, fault)?;
                for i in 0..t {
                    m[(c * t + i) * t + j] = y.get(&[0, i, c]);
                    for c2 in (0..ch).filter(|&c2| c2 != c) {
                        if y.get(&[0, i, c2]) != 0.0 {
                            return Err(Error::Invalid("composition mixes channels".into()));
                        }
                    }
                }
            }
        }
        Ok(m)
    }
}

fn bidir_instance(seed: u64, t: usize, ch: usize) -> Result<(Bidir, Tensor<f64>)> {
    let (pf, x) = random_scan_instance(seed, 1, t, ch, 3);
    let (pb, _) = random_scan_instance(seed + 7919, 1, t, ch, 3);
    Ok((
        Bidir {
            fw: discretize_zoh(&pf)?,
            c_fw: pf.c,
            bw: discretize_zoh(&pb)?,
            c_bw: pb.c,
        },
        x,
    ))
}

/// Composed-matrix semantics of the diagonal mask, checked on the
/// runtime path against dense mixing matrices.
fn mask(fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut errs = [0.0f64; 4];
    for i in 0..20u64 {
        let t = 4 + (i as usize % 13);
        let ch = 2;
        let (s, x) = bidir_instance(500 + i, t, ch)?;
        let m_fw = materialize_mixing_matrix(&s.fw, &s.c_fw)?;
        let m_bw = materialize_mixing_matrix(&s.bw, &s.c_bw)?;
        let plain = MixingMatrix::compose_bidirectional(&m_fw, &m_bw)?;
        let masked = MixingMatrix::compose_bidirectional(&m_fw, &m_bw.without_diagonal())?;
        let rt_masked = s.impulse_matrix(t, ch, true, fault)?;
        let rt_plain = s.impulse_matrix(t, ch, false, fault)?;
        for c in 0..ch {
            for k in 0..t {
                let fw = m_fw.entry(0, c, k, k);
                let bw = m_bw.entry(0, c, t - 1 - k, t - 1 - k);
                errs[0] = errs[0].max((rt_masked[(c * t + k) * t + k] - fw).abs());
                errs[1] = errs[1].max((rt_plain[(c * t + k) * t + k] - (fw + bw)).abs());
                for j in 0..t {
                    errs[2] = errs[2].max((rt_masked[(c * t + k) * t + j] - masked.entry(0, c, k, j)).abs());
                    errs[2] = errs[2].max((rt_plain[(c * t + k) * t + j] - plain.entry(0, c, k, j)).abs());
                }
            }
        }
        errs[3] = errs[3].max(s.compose(&x, true, fault)?.max_abs_diff(&masked.apply(&x)?));
    }
    Ok(vec![
        Check::new("masked backward diagonal contribution", errs[0], 1e-12),
        Check::new("unmasked diagonal = fw + bw", errs[1], 1e-12),
        Check::new("runtime vs dense composed matrix", errs[2], 1e-12),
        Check::new("masked apply vs dense", errs[3], 1e-12),
    ])
}

/// A `[1, t, k]` tensor symmetric under time reversal.
fn palindromic(rng: &mut ChaCha8Rng, t: usize, k: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let half = uniform(rng, &[1, t.div_ceil(2), k], lo, hi);
    let mut v = vec![0.0; t * k];
    for i in 0..t {
        let src = i.min(t - 1 - i);
        v[i * k..(i + 1) * k].copy_from_slice(&half.data()[src * k..(src + 1) * k]);
    }
    Tensor::new(&[1, t, k], v).expect("shape matches length")
}

/// Shared-parameter bidirectional composition maps palindromes to
/// palindromes, with and without the mask, over 50 instances.
fn palindrome(fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut errs = [0.0f64; 2];
    for i in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + i);
        let t = rng.random_range(2..=32);
        let (ch, n) = (rng.random_range(1..=3), rng.random_range(1..=4));
        let p = SsmParams::new(
            uniform(&mut rng, &[ch, n], -1.0, 1.0),
            palindromic(&mut rng, t, n, -1.0, 1.0),
            palindromic(&mut rng, t, n, -1.0, 1.0),
            palindromic(&mut rng, t, ch, 0.05, 1.0),
        )?;
        let x = palindromic(&mut rng, t, ch, -1.0, 1.0);
        let d = discretize_zoh(&p)?;
        let s = Bidir {
            fw: d.clone(),
            c_fw: p.c.clone(),
            bw: d,
            c_bw: p.c,
        };
        for (k, semantic) in [false, true].into_iter().enumerate() {
            let y = s.compose(&x, semantic, fault)?;
            errs[k] = errs[k].max(y.flip(1)?.max_abs_diff(&y));
        }
    }
    Ok(vec![
        Check::new("unmasked palindrome", errs[0], 1e-10),
        Check::new("masked palindrome", errs[1], 1e-10),
    ])
}

/// Convolution form of constant-parameter systems against the recurrence.
fn lti() -> Result<Vec<Check>> {
    let mut err = 0.0f64;
    for i in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + i);
        let t = rng.random_range(1..=64);
        let (ch, n) = (rng.random_range(1..=4), rng.random_range(1..=8));
        let a_raw = uniform(&mut rng, &[ch, n], -1.0, 1.0);
        let brow = uniform(&mut rng, &[n], -1.0, 1.0);
        let crow = uniform(&mut rng, &[n], -1.0, 1.0);
        let drow = uniform(&mut rng, &[ch], 0.05, 0.8);
        let rep = |row: &Tensor<f64>, shape: &[usize]| {
            let v: Vec<f64> = row.data().iter().copied().cycle().take(shape.iter().product()).collect();
            Tensor::new(shape, v).expect("shape matches length")
        };
        let p = SsmParams::new(a_raw, rep(&brow, &[2, t, n]), rep(&crow, &[2, t, n]), rep(&drow, &[2, t, ch]))?;
        let x = uniform(&mut rng, &[2, t, ch], -1.0, 1.0);
        let d = discretize_zoh(&p)?;
        let k = lti_kernel(&d, &p.c, t)?;
        err = err.max(lti_apply(&k, &x)?.max_abs_diff(&scan_recurrent(&d, &p.c, &x)?));
    }
    Ok(vec![Check::new("convolution vs recurrence", err, 1e-12)])
}

fn tagged_case(rng: &mut ChaCha8Rng) -> (Vec<Tagged>, Vec<Tagged>, f64) {
    let seg = |rng: &mut ChaCha8Rng| {
        let s: f64 = rng.random_range(0..10) as f64;
        [s, s + rng.random_range(1..=5) as f64]
    };
    let np = rng.random_range(0..=6);
    let ng = rng.random_range(0..=4);
    let preds = (0..np)
        .map(|_| Tagged {
            video: rng.random_range(0..2),
            segment: seg(rng),
            score: f64::from(rng.random_range(0u8..5)) / 4.0,
        })
        .collect();
    let gts = (0..ng)
        .map(|_| Tagged {
            video: rng.random_range(0..2),
            segment: seg(rng),
            score: 1.0,
        })
        .collect();
    let t = [0.1, 0.3, 0.5, 0.7][rng.random_range(0..4)];
    (preds, gts, t)
}

/// Hand AP cases and greedy-versus-exhaustive matching.
fn ap_oracle() -> Vec<Check> {
    let i = |s, e, score| ActionInstance::new(s, e, 0, score);
    let gt = [i(0.0, 10.0, 1.0)];
    let mut hand = 0.0f64;
    for t in [0.3, 0.5, 0.7] {
        hand = hand.max((average_precision(&[i(0.0, 10.0, 0.7)], &gt, t) - 1.0).abs());
    }
    hand = hand.max((average_precision(&[i(0.0, 4.0, 0.9), i(0.0, 10.0, 0.8)], &gt, 0.5) - 0.5).abs());
    hand = hand.max((average_precision(&[i(0.0, 10.0, 0.9), i(0.0, 10.0, 0.8)], &gt, 0.5) - 1.0).abs());
    let mut rng = ChaCha8Rng::seed_from_u64(0xA9);
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let (p, g, t) = tagged_case(&mut rng);
        if greedy_match(&p, &g, t) != match_bruteforce(&p, &g, t) {
            mismatches += 1;
        }
    }
    vec![
        Check::new("hand AP cases", hand, 0.0),
        Check::new("greedy vs brute-force mismatches", mismatches as f64, 0.0),
    ]
}

/// Boundary fixtures for the characteristic bins.
fn bin_assignment() -> Vec<Check> {
    use Bin::*;
    let cov = [(0.02, XS), (0.04, S), (0.06, M), (0.08, L), (0.0801, XL), (0.0201, S)];
    let len = [(3.0, XS), (6.0, S), (12.0, M), (18.0, L), (18.01, XL), (3.01, S)];
    let cnt = [(1, XS), (2, S), (40, S), (41, M), (80, M), (81, L)];
    let wrong = |n: usize| n as f64;
    vec![
        Check::new("coverage", wrong(cov.iter().filter(|(v, b)| coverage_bin(*v) != *b).count()), 0.0),
        Check::new("length", wrong(len.iter().filter(|(v, b)| length_bin(*v) != *b).count()), 0.0),
        Check::new("instances", wrong(cnt.iter().filter(|(v, b)| instance_bin(*v) != *b).count()), 0.0),
    ]
}
