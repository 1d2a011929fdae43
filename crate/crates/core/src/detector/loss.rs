use super::{BatchTargets, DetectorOutput};
use crate::error::{Error, Result};
use crate::tensor::{softplus_value, sigmoid_value, Graph, Scalar, Tensor, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Sigmoid focal loss of one logit against a 0/1 target and its derivative.
pub fn focal_term(z: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid_value(z);
    let log_p = -softplus_value(-z);
    let log_q = -softplus_value(z);
    let pos = {
        let w = (1.0 - p).powf(gamma);
        (-alpha * w * log_p, alpha * w * (gamma * p * log_p - (1.0 - p)))
    };
    let neg = {
        let w = p.powf(gamma);
        (
            -(1.0 - alpha) * w * log_q,
            (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log_q),
        )
    };
    (y * pos.0 + (1.0 - y) * neg.0, y * pos.1 + (1.0 - y) * neg.1)
}

/// Distance-IoU loss between segments `[-a1, b1]` and `[-a2, b2]` sharing an
/// anchor point, with its gradient in `(a1, b1)`.
pub fn diou_term(a1: f64, b1: f64, a2: f64, b2: f64) -> (f64, [f64; 2]) {
    let inter = a1.min(a2) + b1.min(b2);
    let union = a1 + b1 + a2 + b2 - inter;
    let enc = a1.max(a2) + b1.max(b2);
    if union <= 0.0 || enc <= 0.0 {
        return (1.0, [0.0, 0.0]);
    }
    let iou = inter / union;
    let dc = (b1 - a1) - (b2 - a2);
    let dist = 0.25 * dc * dc;
    let loss = 1.0 - iou + dist / (enc * enc);
    let di = [f64::from(u8::from(a1 <= a2)), f64::from(u8::from(b1 <= b2))];
    let de = [f64::from(u8::from(a1 > a2)), f64::from(u8::from(b1 > b2))];
    let dd = [-0.5 * dc, 0.5 * dc];
    let mut grad = [0.0; 2];
    for k in 0..2 {
        let du = 1.0 - di[k];
        let diou = (di[k] * union - inter * du) / (union * union);
        let dr = dd[k] / (enc * enc) - 2.0 * dist * de[k] / (enc * enc * enc);
        grad[k] = -diou + dr;
    }
    (loss, grad)
}

impl<T: Scalar> Graph<T> {
    /// Summed sigmoid focal loss of `logits` against a same-shape 0/1 target.
    pub fn sigmoid_focal_sum(&mut self, logits: Var, target: &Tensor<T>, alpha: f64, gamma: f64) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::shape(
                "focal",
                format!("logits {:?} vs target {:?}", self.shape(logits), target.shape()),
            ));
        }
        let (sum, grad): (f64, Vec<T>) = {
            let z = self.value(logits).data();
            let mut sum = 0.0;
            let grad = z
                .iter()
                .zip(target.data())
                .map(|(&z, &y)| {
                    let (l, d) = focal_term(z.f64(), y.f64(), alpha, gamma);
                    sum += l;
                    T::of(d)
                })
                .collect();
            (sum, grad)
        };
        let shape = target.shape().to_vec();
        self.push_op("sigmoid_focal_sum", &[logits], Tensor::scalar(T::of(sum)), move |ctx| {
            let g = ctx.grad.data()[0];
            vec![Some(Tensor::from_parts(shape.clone(), grad.iter().map(|&d| d * g).collect()))]
        })
    }

    /// Weighted sum of DIoU losses between predicted offsets `[.., 2]` and
    /// target offsets; `weight` has the same shape minus the last axis.
    pub fn diou_sum(&mut self, pred: Var, target: &Tensor<T>, weight: &Tensor<T>) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        if ps != target.shape() || ps.last() != Some(&2) || weight.len() * 2 != target.len() {
            return Err(Error::shape(
                "diou",
                format!("pred {ps:?}, target {:?}, weight {:?}", target.shape(), weight.shape()),
            ));
        }
        let (sum, grad) = {
            let p = self.value(pred).data();
            let t = target.data();
            let mut sum = 0.0;
            let mut grad = vec![T::zero(); p.len()];
            for (r, &w) in weight.data().iter().enumerate() {
                let w = w.f64();
                if w == 0.0 {
                    continue;
                }
                let (l, d) = diou_term(p[2 * r].f64(), p[2 * r + 1].f64(), t[2 * r].f64(), t[2 * r + 1].f64());
                sum += w * l;
                grad[2 * r] = T::of(w * d[0]);
                grad[2 * r + 1] = T::of(w * d[1]);
            }
            (sum, grad)
        };
        self.push_op("diou_sum", &[pred], Tensor::scalar(T::of(sum)), move |ctx| {
            let g = ctx.grad.data()[0];
            vec![Some(Tensor::from_parts(ps.clone(), grad.iter().map(|&d| d * g).collect()))]
        })
    }
}

/// Total loss and its parts, normalized by the positive count.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: f64,
    pub reg: f64,
    pub num_pos: usize,
}

pub fn detection_loss<T: Scalar>(g: &mut Graph<T>, out: &DetectorOutput, targets: &BatchTargets<T>) -> Result<LossParts> {
    let norm = T::of(1.0 / targets.num_pos.max(1) as f64);
    let cls = g.sigmoid_focal_sum(out.cls_logits, &targets.cls, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let cls = g.scale(cls, norm)?;
    let reg = g.diou_sum(out.offsets, &targets.offsets, &targets.positive)?;
    let reg = g.scale(reg, norm)?;
    let total = g.add(cls, reg)?;
    Ok(LossParts {
        total,
        cls: g.value(cls).data()[0].f64(),
        reg: g.value(reg).data()[0].f64(),
        num_pos: targets.num_pos,
    })
}
