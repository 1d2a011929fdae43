use super::{discretize_unchecked, phi, psi, scan_with_states};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use std::sync::Arc;

/// Options for [`Graph::selective_scan`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ScanSpec {
    /// Remove the self-contribution `⟨C_t, B̄_t⟩ u_t` from the output.
    pub subtract_self: bool,
    pub exec: Exec,
}

struct Saved<T> {
    a_bar: Tensor<T>,
    b_bar: Tensor<T>,
    states: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    /// Differentiable discretize-and-scan.
    ///
    /// `u, delta: [b, t, c]`, `a: [c, n]` (the state matrix itself, expected
    /// negative), `b, c: [b, t, n]`. Output `[b, t, c]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, spec: ScanSpec) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let (ash, bsh, csh) = (self.shape(a), self.shape(b), self.shape(c));
        let ok = us.len() == 3
            && self.shape(delta) == us.as_slice()
            && ash.len() == 2
            && ash[0] == us[2]
            && bsh == [us[0], us[1], ash[1]]
            && csh == bsh;
        if !ok {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "u {us:?}, Δ {:?}, A {ash:?}, B {bsh:?}, C {csh:?}",
                    self.shape(delta)
                ),
            ));
        }
        let d = discretize_unchecked(self.value(a), self.value(b), self.value(delta));
        let (y, states) = scan_with_states(spec.exec, &d, self.value(c), self.value(u), spec.subtract_self);
        let saved = Arc::new(Saved {
            a_bar: d.a_bar,
            b_bar: d.b_bar,
            states,
        });
        let out = Tensor::new(&us, y)?;
        self.push_op("selective_scan", &[u, delta, a, b, c], out, move |ctx| {
            scan_backward(ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.inputs[3], ctx.inputs[4], ctx.grad, &saved, spec)
        })
    }
}

struct BatchGrads<T> {
    du: Vec<T>,
    ddelta: Vec<T>,
    db: Vec<T>,
    dc: Vec<T>,
    da: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
fn scan_backward<T: Scalar>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    grad: &Tensor<T>,
    saved: &Saved<T>,
    spec: ScanSpec,
) -> Vec<Option<Tensor<T>>> {
    let s = u.shape();
    let (bsz, t, ch) = (s[0], s[1], s[2]);
    let n = a.shape()[1];
    let ud = u.data();
    let dd = delta.data();
    let ad = a.data();
    let bd = b.data();
    let cd = c.data();
    let gd = grad.data();
    let ab = saved.a_bar.data();
    let bb = saved.b_bar.data();
    let hs = &saved.states;
    let skip = spec.subtract_self;

    let per: Vec<BatchGrads<T>> = par::map_range(spec.exec, bsz, |bi| {
        let mut g = BatchGrads {
            du: vec![T::zero(); t * ch],
            ddelta: vec![T::zero(); t * ch],
            db: vec![T::zero(); t * n],
            dc: vec![T::zero(); t * n],
            da: vec![T::zero(); ch * n],
        };
        // `carry` is the adjoint reaching h_t from step t + 1; `rho` adds the
        // direct read-out of h_t at step t when the self term is kept.
        let mut carry = vec![T::zero(); ch * n];
        for ti in (0..t).rev() {
            let row = bi * t + ti;
            let crow = &cd[row * n..(row + 1) * n];
            let brow = &bd[row * n..(row + 1) * n];
            for cc in 0..ch {
                let gy = gd[row * ch + cc];
                let uu = ud[row * ch + cc];
                let dt = dd[row * ch + cc];
                let base = (row * ch + cc) * n;
                let car = &mut carry[cc * n..(cc + 1) * n];
                let mut du = T::zero();
                let mut ddt = T::zero();
                for k in 0..n {
                    let bbar = bb[base + k];
                    let abar = ab[base + k];
                    let h_prev = if ti > 0 { hs[base - ch * n + k] } else { T::zero() };
                    let (rho, through_a) = if skip {
                        (car[k], car[k] + gy * crow[k])
                    } else {
                        let r = car[k] + gy * crow[k];
                        (r, r)
                    };
                    du += rho * bbar;
                    let dbbar = rho * uu;
                    let dabar = through_a * h_prev;
                    let read = if skip { abar * h_prev } else { hs[base + k] };
                    g.dc[ti * n + k] += gy * read;
                    let av = ad[cc * n + k];
                    let z = dt * av;
                    ddt += dabar * av * abar + dbbar * brow[k] * abar;
                    g.da[cc * n + k] += dabar * dt * abar + dbbar * brow[k] * dt * dt * psi(z);
                    g.db[ti * n + k] += dbbar * dt * phi(z);
                    car[k] = abar * through_a;
                }
                g.du[ti * ch + cc] = du;
                g.ddelta[ti * ch + cc] = ddt;
            }
        }
        g
    });

    let mut du = Vec::with_capacity(bsz * t * ch);
    let mut ddelta = Vec::with_capacity(bsz * t * ch);
    let mut db = Vec::with_capacity(bsz * t * n);
    let mut dc = Vec::with_capacity(bsz * t * n);
    let mut da = vec![T::zero(); ch * n];
    for g in per {
        du.extend(g.du);
        ddelta.extend(g.ddelta);
        db.extend(g.db);
        dc.extend(g.dc);
        da.iter_mut().zip(&g.da).for_each(|(a, &b)| *a += b);
    }
    vec![
        Some(Tensor::from_parts(vec![bsz, t, ch], du)),
        Some(Tensor::from_parts(vec![bsz, t, ch], ddelta)),
        Some(Tensor::from_parts(vec![ch, n], da)),
        Some(Tensor::from_parts(vec![bsz, t, n], db)),
        Some(Tensor::from_parts(vec![bsz, t, n], dc)),
    ]
}

/// Input-dependent SSM parameters on a graph, all `[b, t, ·]`.
#[derive(Clone, Copy, Debug)]
pub struct Selective {
    pub b: Var,
    pub c: Var,
    pub delta: Var,
}

impl<T: Scalar> Graph<T> {
    /// `B = x W_B`, `C = x W_C`, `Δ = softplus(x W_Δ + bias)`.
    pub fn selective_params(&mut self, x: Var, w_b: Var, w_c: Var, w_delta: Var, delta_bias: Var) -> Result<Selective> {
        let b = self.linear(x, w_b, None)?;
        let c = self.linear(x, w_c, None)?;
        if self.shape(b) != self.shape(c) {
            return Err(Error::shape(
                "selective_params",
                format!("W_B {:?} vs W_C {:?}", self.shape(w_b), self.shape(w_c)),
            ));
        }
        let pre = self.linear(x, w_delta, Some(delta_bias))?;
        let delta = self.softplus(pre)?;
        Ok(Selective { b, c, delta })
    }
}
