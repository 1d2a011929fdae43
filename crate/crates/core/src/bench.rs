//! Wall-clock scaling measurements for the scan evaluators.

use crate::dmbss::{dmbss_forward, Dmbss, DmbssConfig};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::ssm::{discretize_zoh, materialize_mixing_matrix_capped, scan_parallel, scan_recurrent, DiscreteSsm};
use crate::tensor::Tensor;
use crate::verify::random_scan_instance;
use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

pub const CSV_HEADER: &str = "length,evaluator,ns,reps";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Evaluator {
    Recurrent,
    Parallel,
    /// Materialized mixing matrix applied to the input.
    Dense,
    /// A full bidirectional block, forward only.
    Dmbss,
}

impl Evaluator {
    pub const ALL: [Evaluator; 4] = [Evaluator::Recurrent, Evaluator::Parallel, Evaluator::Dense, Evaluator::Dmbss];

    pub fn name(self) -> &'static str {
        match self {
            Evaluator::Recurrent => "scan_recurrent",
            Evaluator::Parallel => "scan_parallel",
            Evaluator::Dense => "dense",
            Evaluator::Dmbss => "dmbss",
        }
    }
}

impl fmt::Display for Evaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Evaluator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Evaluator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown evaluator `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub evaluators: Vec<Evaluator>,
    /// Timed repetitions per point; the minimum is reported.
    pub reps: usize,
    pub channels: usize,
    pub state: usize,
    pub exec: Exec,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![1024, 2048, 4096],
            evaluators: Evaluator::ALL.to_vec(),
            reps: 5,
            channels: 16,
            state: 16,
            exec: Exec::Parallel,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchRecord {
    pub length: usize,
    pub evaluator: Evaluator,
    pub ns: u128,
    pub reps: usize,
}

fn min_ns(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<u128> {
    f()?;
    let mut best = u128::MAX;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        f()?;
        best = best.min(start.elapsed().as_nanos());
    }
    Ok(best)
}

struct Instance {
    d: DiscreteSsm<f64>,
    c: Tensor<f64>,
    x: Tensor<f64>,
}

impl Instance {
    fn new(t: usize, channels: usize, state: usize, seed: u64) -> Result<Self> {
        let (p, x) = random_scan_instance(seed, 1, t, channels, state);
        Ok(Self {
            d: discretize_zoh(&p)?,
            c: p.c,
            x,
        })
    }

    /// Single channel: the matrix grows as `t²`.
    fn first_channel(&self) -> Result<Self> {
        let pick = |src: &Tensor<f64>| {
            let s = src.shape();
            let (t, ch) = (s[1], s[2]);
            let inner: usize = s[3..].iter().product();
            let mut v = Vec::with_capacity(t * inner);
            for i in 0..t {
                let at = i * ch * inner;
                v.extend_from_slice(&src.data()[at..at + inner]);
            }
            let mut shape = vec![1, t, 1];
            shape.extend_from_slice(&s[3..]);
            Tensor::new(&shape, v)
        };
        Ok(Self {
            d: DiscreteSsm::from_parts(pick(&self.d.a_bar)?, pick(&self.d.b_bar)?)?,
            c: self.c.clone(),
            x: pick(&self.x)?,
        })
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.lengths.is_empty() || cfg.evaluators.is_empty() {
        return Err(Error::Invalid("bench needs at least one length and one evaluator".into()));
    }
    let mut out = Vec::new();
    for &t in &cfg.lengths {
        let inst = Instance::new(t, cfg.channels, cfg.state, cfg.seed ^ t as u64)?;
        for &e in &cfg.evaluators {
            let ns = match e {
                Evaluator::Recurrent => min_ns(cfg.reps, || {
                    black_box(scan_recurrent(&inst.d, &inst.c, &inst.x)?);
                    Ok(())
                })?,
                Evaluator::Parallel => min_ns(cfg.reps, || {
                    black_box(scan_parallel(cfg.exec, &inst.d, &inst.c, &inst.x)?);
                    Ok(())
                })?,
                Evaluator::Dense => {
                    let one = inst.first_channel()?;
                    min_ns(cfg.reps, || {
                        let m = materialize_mixing_matrix_capped(&one.d, &one.c, t)?;
                        black_box(m.apply(&one.x)?);
                        Ok(())
                    })?
                }
                Evaluator::Dmbss => {
                    let bc = DmbssConfig {
                        c: cfg.channels,
                        n: cfg.state,
                        ..DmbssConfig::default()
                    };
                    let (mut blk, store) = Dmbss::init_seeded::<f64>(&bc, cfg.seed)?;
                    blk.exec = cfg.exec;
                    min_ns(cfg.reps, || {
                        black_box(dmbss_forward(&blk, &store, &inst.x)?);
                        Ok(())
                    })?
                }
            };
            log::info!("bench t={t} {e}: {ns} ns");
            out.push(BenchRecord {
                length: t,
                evaluator: e,
                ns,
                reps: cfg.reps,
            });
        }
    }
    Ok(out)
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in records {
        s.push_str(&format!("{},{},{},{}\n", r.length, r.evaluator, r.ns, r.reps));
    }
    s
}

/// `(t, time(t) / time(t / 2))` for every length whose half was also measured.
pub fn doubling_ratios(records: &[BenchRecord], evaluator: Evaluator) -> Vec<(usize, f64)> {
    let time = |t: usize| {
        records
            .iter()
            .find(|r| r.evaluator == evaluator && r.length == t)
            .map(|r| r.ns as f64)
    };
    let mut lengths: Vec<usize> = records
        .iter()
        .filter(|r| r.evaluator == evaluator)
        .map(|r| r.length)
        .collect();
    lengths.sort_unstable();
    lengths
        .into_iter()
        .filter(|t| t % 2 == 0)
        .filter_map(|t| Some((t, time(t)? / time(t / 2)?)))
        .collect()
}
