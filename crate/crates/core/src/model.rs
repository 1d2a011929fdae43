//! The trainable model for either run mode: the detector alone, or the
//! frozen toy backbone with adapters in front of it.

use crate::config::{Mode, RunConfig};
use crate::detector::{decode, soft_nms, ActionInstance, DecodeConfig, Detector, DetectorOutput, LevelLayout, ResultsFile};
use crate::eval::Dataset;
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::params::{Binding, ParamStore};
use crate::ssta::{adapt_backbone, AdaptedBackbone, ToyBackbone};
use crate::tensor::{sigmoid_value, Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Model {
    pub detector: Detector,
    pub backbone: Option<AdaptedBackbone>,
}

impl Model {
    /// Builds the model and its parameters from `cfg`, seeded by
    /// `cfg.train.seed`.
    pub fn build<T: Scalar>(cfg: &RunConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = match cfg.mode {
            Mode::FeatureInput => None,
            Mode::E2e => {
                let bb = ToyBackbone::init(&cfg.backbone, &mut store)?;
                Some(adapt_backbone(bb, &mut store, &cfg.ssta, cfg.train.seed.wrapping_add(1))?)
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let detector = Detector::init(&cfg.model, &mut store, &mut rng)?;
        Ok((Self { detector, backbone }, store))
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.detector.set_exec(exec);
        if let Some(bb) = &mut self.backbone {
            for a in bb.adapters.iter_mut().flatten() {
                a.block.exec = exec;
            }
        }
    }

    /// Width of each input frame.
    pub fn input_channels(&self) -> usize {
        match &self.backbone {
            Some(bb) => bb.backbone.config.in_channels,
            None => self.detector.config.in_channels,
        }
    }

    /// Time-major input `[b, t, c_in]` to raw head outputs.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<DetectorOutput> {
        let h = match &self.backbone {
            Some(bb) => bb.forward(g, bind, x)?,
            None => x,
        };
        let h = g.transpose_last(h)?;
        self.detector.forward(g, bind, h)
    }

    /// Class probabilities `[T, C]`, offsets `[T, 2]` and the layout for one
    /// video's features `[t, c_in]`.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, features: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, LevelLayout)> {
        let s = features.shape();
        if s.len() != 2 || s[1] != self.input_channels() {
            return Err(Error::shape(
                "predict",
                format!("want [t, {}], got {s:?}", self.input_channels()),
            ));
        }
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let x = g.constant(features.reshape(&[1, s[0], s[1]])?);
        let out = self.forward(&mut g, &bind, x)?;
        let total = out.layout.total();
        let c = self.detector.config.num_classes;
        let probs = g.value(out.cls_logits).map(sigmoid_value).reshape(&[total, c])?;
        let offsets = g.value(out.offsets).reshape(&[total, 2])?;
        Ok((probs, offsets, out.layout))
    }

    /// Forward, decode and soft-NMS for one video.
    pub fn detect<T: Scalar>(&self, store: &ParamStore<T>, features: &Tensor<T>, fps: f64, cfg: &DecodeConfig) -> Result<Vec<ActionInstance>> {
        let t = features.shape()[0];
        let (probs, offsets, layout) = self.predict(store, features)?;
        let cands = decode(&probs, &offsets, &layout, t, fps, cfg.score_thresh, cfg.pre_nms_topk)?;
        let mut out = soft_nms(&cands, cfg.nms_sigma, cfg.min_score);
        out.truncate(cfg.max_per_video);
        Ok(out)
    }

    /// Detections for every video of `dataset` whose id starts with `prefix`.
    pub fn detect_dataset<T: Scalar>(&self, store: &ParamStore<T>, dataset: &Dataset, prefix: &str, cfg: &DecodeConfig) -> Result<ResultsFile> {
        let mut out = ResultsFile::default();
        for (v, f) in dataset.annotations.videos.iter().zip(&dataset.features) {
            if v.id.starts_with(prefix) {
                out.results.insert(v.id.clone(), self.detect(store, &f.cast::<T>(), v.fps, cfg)?);
            }
        }
        Ok(out)
    }
}
