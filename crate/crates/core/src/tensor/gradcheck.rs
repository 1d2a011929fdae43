//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all parameters of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_err: f64,
    /// Parameter index and flat element index where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Max over parameter tensors of `‖analytic - numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-12)`.
    pub max_tensor_rel_err: f64,
    pub evaluations: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>], trainable: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if trainable {
                g.param(p.clone())
            } else {
                g.constant(p.clone())
            }
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape("grad_check", "graph builder must return a scalar"));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` builds a scalar loss from the given parameter handles. It is evaluated
/// twice at the base point first; any difference means the builder is not
/// deterministic and the check is refused.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, vars, loss) = evaluate(&f, params, true)?;
    let base = g.value(loss).data()[0];
    let (g2, _, loss2) = evaluate(&f, params, false)?;
    if g2.value(loss2).data()[0].to_bits() != base.to_bits() {
        return Err(Error::Invalid("graph builder is not deterministic".into()));
    }
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        max_tensor_rel_err: 0.0,
        evaluations: 2,
    };
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].len()]);
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for (ei, &a) in analytic.iter().enumerate() {
            let orig = params[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + eps;
            let (gp, _, lp) = evaluate(&f, &probe, false)?;
            probe[pi].data_mut()[ei] = orig - eps;
            let (gm, _, lm) = evaluate(&f, &probe, false)?;
            probe[pi].data_mut()[ei] = orig;
            report.evaluations += 2;
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * eps);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        let tensor_rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12);
        report.max_tensor_rel_err = report.max_tensor_rel_err.max(tensor_rel);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_sum_is_accurate() {
        let x = Tensor::from_f64(&[5], &[-1.0, -0.3, 0.0, 0.4, 1.2]).unwrap();
        let r = grad_check(
            |g, p| {
                let e = g.exp(p[0])?;
                g.sum_all(e)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-7, "{r:?}");
    }

    #[test]
    fn linear_maps_are_near_exact() {
        let x = Tensor::from_f64(&[1, 2, 3], &[0.5, -1.0, 2.0, 0.25, 1.5, -0.75]).unwrap();
        let w = Tensor::from_f64(&[3, 2], &[1.0, -2.0, 0.5, 0.25, -1.5, 3.0]).unwrap();
        let r = grad_check(
            move |g, p| {
                let wv = g.constant(w.clone());
                let y = g.linear(p[0], wv, None)?;
                g.sum_all(y)
            },
            &[x],
            1.0 / 1024.0,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-10, "{r:?}");
    }

    #[test]
    fn non_deterministic_builder_is_refused() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let r = grad_check(
            |g, p| {
                let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
                let y = g.scale(p[0], 1.0 + k)?;
                g.sum_all(y)
            },
            &[x],
            1e-5,
        );
        assert!(r.is_err());
    }
}
