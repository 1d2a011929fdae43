//! AdamW training over random fixed-length crops.

use crate::config::{RunConfig, TrainConfig};
use crate::detector::{assign_targets, detection_loss, BatchTargets, FrameSegment};
use crate::error::{Error, Result};
use crate::eval::Dataset;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Decoupled-weight-decay Adam. Moments are created lazily on the first
/// gradient a parameter receives.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![None; num_params],
            v: vec![None; num_params],
            t: 0,
        }
    }

    /// Applies one update with learning rate `lr`. Weight decay acts on
    /// matrices and kernels only, never on biases, norms or SSM vectors.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64, cfg: &TrainConfig) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Invalid("optimizer state does not match the parameter store".into()));
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let decay = if store.get(id).rank() >= 2 { cfg.weight_decay } else { 0.0 };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id);
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let gf = g.f64();
                let mf = b1 * m.f64() + (1.0 - b1) * gf;
                let vf = b2 * v.f64() + (1.0 - b2) * gf * gf;
                *m = T::of(mf);
                *v = T::of(vf);
                let mut pf = p.f64();
                pf -= lr * decay * pf;
                pf -= lr * (mf / c1) / ((vf / c2).sqrt() + cfg.adam_eps);
                *p = T::of(pf);
            }
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
pub fn lr_at(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales gradients so their global L2 norm is at most `max_norm` (no-op
/// for `max_norm == 0`). Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// One training sequence: time-major features and ground truth in frames.
#[derive(Clone, Debug)]
pub struct TrainVideo<T: Scalar> {
    pub id: String,
    pub features: Tensor<T>,
    pub segments: Vec<FrameSegment>,
}

impl<T: Scalar> TrainVideo<T> {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Videos of `dataset` whose id starts with `prefix`.
pub fn training_videos<T: Scalar>(dataset: &Dataset, prefix: &str) -> Vec<TrainVideo<T>> {
    dataset
        .annotations
        .videos
        .iter()
        .zip(&dataset.features)
        .filter(|(v, _)| v.id.starts_with(prefix))
        .map(|(v, f)| TrainVideo {
            id: v.id.clone(),
            features: f.cast(),
            segments: v
                .annotations
                .iter()
                .map(|a| FrameSegment {
                    start: a.start_s * v.fps,
                    end: a.end_s * v.fps,
                    label: a.label,
                })
                .collect(),
        })
        .collect()
}

/// Ground truth of `segs` seen through the window `[start, start + len)`.
/// Instances that keep less than half their length are dropped.
pub fn crop_segments(segs: &[FrameSegment], start: usize, len: usize) -> Vec<FrameSegment> {
    let (lo, hi) = (start as f64, (start + len) as f64);
    segs.iter()
        .filter_map(|s| {
            let a = s.start.max(lo);
            let b = s.end.min(hi);
            (b - a >= 0.5 * s.len() && b > a).then_some(FrameSegment {
                start: a - lo,
                end: b - lo,
                label: s.label,
            })
        })
        .collect()
}

/// Copies frames `[start, start + len)` of a `[t, c]` tensor.
fn crop_frames<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Vec<T> {
    let c = x.shape()[1];
    x.data()[start * c..(start + len) * c].to_vec()
}

/// One optimizer step's record, also a row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub num_pos: usize,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,epoch,loss,cls,reg,lr,grad_norm,num_pos";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            self.step, self.epoch, self.loss, self.cls, self.reg, self.lr, self.grad_norm, self.num_pos
        )
    }
}

/// Serializable state of the sampling RNG.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Model, parameters, optimizer and sampler state of a training run.
///
/// Epoch orders are derived from the seed and epoch index; crop offsets
/// come from a single running RNG whose state is checkpointed.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub opt: AdamW<T>,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub crop_len: usize,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    /// Where a diagnostic dump goes when the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
    videos: Vec<TrainVideo<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &RunConfig, model: Model, store: ParamStore<T>, videos: Vec<TrainVideo<T>>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::Invalid("no training videos".into()));
        }
        let c_in = model.input_channels();
        if let Some(v) = videos.iter().find(|v| v.features.shape()[1] != c_in) {
            return Err(Error::Config(format!(
                "video {} has {} channels, model expects {c_in}",
                v.id,
                v.features.shape()[1]
            )));
        }
        let unit = config.model.min_len();
        let shortest = videos.iter().map(TrainVideo::frames).min().unwrap_or(0);
        let crop_len = config.train.crop_len.min(shortest) / unit * unit;
        if crop_len == 0 {
            return Err(Error::Config(format!(
                "shortest training video ({shortest} frames) is below the pyramid minimum {unit}"
            )));
        }
        let steps_per_epoch = videos.len().div_ceil(config.train.batch_size);
        let n = store.len();
        Ok(Self {
            config: config.clone(),
            model,
            store,
            opt: AdamW::new(n),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.train.seed),
            crop_len,
            steps_per_epoch,
            total_steps: steps_per_epoch * config.train.epochs,
            dump_dir: None,
            videos,
        })
    }

    /// Builds a fresh model from the config and wraps it.
    pub fn from_config(config: &RunConfig, videos: Vec<TrainVideo<T>>) -> Result<Self> {
        let (model, store) = Model::build(config)?;
        Self::new(config, model, store, videos)
    }

    pub fn videos(&self) -> &[TrainVideo<T>] {
        &self.videos
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.videos.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn lr(&self, step: usize) -> f64 {
        let tc = &self.config.train;
        lr_at(tc.lr, step, self.total_steps, tc.warmup_for(self.total_steps))
    }

    /// Video indices and crop starts for the next step; advances the RNG.
    fn next_batch(&mut self) -> Vec<(usize, usize)> {
        let epoch = self.step / self.steps_per_epoch;
        let k = self.step % self.steps_per_epoch;
        let order = self.epoch_order(epoch);
        let bs = self.config.train.batch_size;
        let chosen = order[k * bs..((k + 1) * bs).min(order.len())].to_vec();
        chosen
            .into_iter()
            .map(|i| {
                let slack = self.videos[i].frames() - self.crop_len;
                (i, self.rng.random_range(0..=slack))
            })
            .collect()
    }

    /// Runs one optimizer step. Any non-finite value aborts the step and,
    /// with `dump_dir` set, writes a diagnostic dump.
    pub fn train_step(&mut self) -> Result<StepLog> {
        match self.try_step() {
            Err(Error::NonFinite { stage }) => Err(self.non_finite(&stage)),
            other => other,
        }
    }

    fn try_step(&mut self) -> Result<StepLog> {
        let batch = self.next_batch();
        let (len, c) = (self.crop_len, self.model.input_channels());
        let mut data = Vec::with_capacity(batch.len() * len * c);
        let mut crops = Vec::with_capacity(batch.len());
        for &(i, start) in &batch {
            let v = &self.videos[i];
            data.extend(crop_frames(&v.features, start, len));
            crops.push(crop_segments(&v.segments, start, len));
        }
        let mut g = Graph::new();
        let bind = self.store.bind(&mut g);
        let x = g.constant(Tensor::new(&[batch.len(), len, c], data)?);
        let out = self.model.forward(&mut g, &bind, x)?;
        let tcfg = &self.model.detector.config.targets;
        let per_video: Vec<_> = crops.iter().map(|s| assign_targets(s, &out.layout, len, tcfg)).collect();
        let targets = BatchTargets::<T>::new(&per_video, self.model.detector.config.num_classes)?;
        let parts = detection_loss(&mut g, &out, &targets)?;
        let loss = g.value(parts.total).data()[0].f64();
        let lr = self.lr(self.step);
        let mut log = StepLog {
            step: self.step,
            epoch: self.step / self.steps_per_epoch,
            loss,
            cls: parts.cls,
            reg: parts.reg,
            lr,
            grad_norm: f64::NAN,
            num_pos: parts.num_pos,
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: format!("loss ({log:?})") });
        }
        let mut grads = g.backward(parts.total)?;
        let mut grads = bind.gradients(&self.store, &mut grads);
        if grads.iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite { stage: "gradient".into() });
        }
        log.grad_norm = clip_grad_norm(&mut grads, self.config.train.grad_clip);
        self.opt.update(&mut self.store, &grads, lr, &self.config.train)?;
        self.step += 1;
        Ok(log)
    }

    /// Trains until `until` steps (capped at the schedule length), calling
    /// `on_step` after each one.
    pub fn run<F>(&mut self, until: usize, mut on_step: F) -> Result<Vec<StepLog>>
    where
        F: FnMut(&Self, &StepLog) -> Result<()>,
    {
        let until = until.min(self.total_steps);
        let mut logs = Vec::with_capacity(until.saturating_sub(self.step));
        while self.step < until {
            let log = self.train_step()?;
            on_step(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    fn non_finite(&self, stage: &str) -> Error {
        if let Some(dir) = &self.dump_dir {
            if let Err(e) = self.write_dump(dir, stage) {
                log::error!("could not write diagnostic dump: {e}");
            }
        }
        Error::NonFinite {
            stage: format!("{stage} at step {}", self.step),
        }
    }

    fn write_dump(&self, dir: &Path, stage: &str) -> Result<()> {
        let params: Vec<_> = self
            .store
            .ids()
            .map(|id| {
                let t = self.store.get(id);
                serde_json::json!({
                    "name": self.store.name(id),
                    "max_abs": t.max_abs().f64(),
                    "finite": t.all_finite(),
                })
            })
            .collect();
        let dump = serde_json::json!({ "stage": stage, "step": self.step, "lr": self.lr(self.step), "params": params });
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("nonfinite_dump.json"), serde_json::to_string_pretty(&dump)?)?;
        Ok(())
    }
}

/// Appends step rows to a CSV file, writing the header on creation.
pub struct CsvLog {
    file: std::io::BufWriter<std::fs::File>,
}

impl CsvLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)?;
        let mut file = std::io::BufWriter::new(file);
        if !exists {
            writeln!(file, "{}", StepLog::CSV_HEADER)?;
        }
        Ok(Self { file })
    }

    pub fn write(&mut self, log: &StepLog) -> Result<()> {
        writeln!(self.file, "{}", log.csv_row())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}
