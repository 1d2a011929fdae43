//! Layer primitives: affine maps, convolutions, normalization, pooling.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Output length of [`Graph::maxpool1d`]: `ceil(t / stride)`.
pub fn maxpool_output_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

/// Left padding used by the depthwise convolution.
fn conv_left_pad(k: usize, causal: bool) -> usize {
    if causal {
        k - 1
    } else {
        (k - 1) / 2
    }
}

/// Forward depthwise convolution on raw values, `x: [b, c, t]`, `kernel: [c, k]`.
pub fn conv1d_depthwise_values<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, causal: bool) -> Result<Tensor<T>> {
    let (b, c, t, k) = depthwise_dims(x.shape(), kernel.shape())?;
    let left = conv_left_pad(k, causal);
    let xd = x.data();
    let w = kernel.data();
    let mut out = vec![T::zero(); b * c * t];
    for bc in 0..b * c {
        let ch = bc % c;
        let xs = &xd[bc * t..(bc + 1) * t];
        let ys = &mut out[bc * t..(bc + 1) * t];
        for j in 0..k {
            let wj = w[ch * k + j];
            // y[i] += w[j] * x[i - left + j]
            let shift = j as isize - left as isize;
            let (lo, hi) = valid_range(t, shift);
            for i in lo..hi {
                ys[i] += wj * xs[(i as isize + shift) as usize];
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, t], out))
}

/// Output indices `i` in `[0, t)` with `i + shift` also in `[0, t)`.
fn valid_range(t: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (t as isize - shift).clamp(0, t as isize) as usize;
    (lo.min(hi), hi)
}

fn depthwise_dims(x: &[usize], kernel: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if x.len() != 3 || kernel.len() != 2 || kernel[0] != x[1] {
        return Err(Error::shape(
            "conv1d_depthwise",
            format!("x {x:?} (want [b,c,t]) with kernel {kernel:?} (want [c,k])"),
        ));
    }
    Ok((x[0], x[1], x[2], kernel[1]))
}

impl<T: Scalar> Graph<T> {
    /// Affine map over the last axis: `x: [..., c_in]`, `w: [c_in, c_out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::shape("linear", format!("x {xs:?} with w {ws:?}")));
        }
        let (cin, cout) = (ws[0], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for c_out {cout}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / cin;
        let mut out = vec![T::zero(); rows * cout];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = bias.map(|b| self.value(b).data());
            let exec = if rows * cin * cout > 1 << 16 { Exec::Parallel } else { Exec::Sequential };
            let rows_per = 64;
            par::for_each_chunk(exec, &mut out, rows_per * cout, |ci, chunk| {
                for (ri, orow) in chunk.chunks_mut(cout).enumerate() {
                    let r = ci * rows_per + ri;
                    if let Some(bd) = bd {
                        orow.copy_from_slice(bd);
                    }
                    let xrow = &xd[r * cin..(r + 1) * cin];
                    for (kk, &a) in xrow.iter().enumerate() {
                        if a == T::zero() {
                            continue;
                        }
                        let wrow = &wd[kk * cout..(kk + 1) * cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += a * wv;
                        }
                    }
                }
            });
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("rank >= 1") = cout;
        let inputs: Vec<Var> = match bias {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push_op("linear", &inputs, Tensor::from_parts(out_shape, out), move |ctx| {
            let g = ctx.grad.data();
            let xd = ctx.inputs[0].data();
            let wd = ctx.inputs[1].data();
            let dx = ctx.needs(0).then(|| {
                let mut dx = vec![T::zero(); rows * cin];
                for r in 0..rows {
                    let grow = &g[r * cout..(r + 1) * cout];
                    for kk in 0..cin {
                        let wrow = &wd[kk * cout..(kk + 1) * cout];
                        dx[r * cin + kk] = grow.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                    }
                }
                Tensor::from_parts(xs.clone(), dx)
            });
            let dw = ctx.needs(1).then(|| {
                let mut dw = vec![T::zero(); cin * cout];
                for r in 0..rows {
                    let grow = &g[r * cout..(r + 1) * cout];
                    for kk in 0..cin {
                        let a = xd[r * cin + kk];
                        if a == T::zero() {
                            continue;
                        }
                        for (d, &gv) in dw[kk * cout..(kk + 1) * cout].iter_mut().zip(grow) {
                            *d += a * gv;
                        }
                    }
                }
                Tensor::from_parts(vec![cin, cout], dw)
            });
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    let mut db = vec![T::zero(); cout];
                    for grow in g.chunks(cout) {
                        for (d, &gv) in db.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                    Tensor::from_parts(vec![cout], db)
                }));
            }
            grads
        })
    }

    /// Channel-wise temporal convolution, `x: [b, c, t]`, `kernel: [c, k]`.
    ///
    /// With `causal` the input is left-padded by `k - 1` zeros, so output `i`
    /// only sees inputs `i - k + 1 ..= i`; otherwise padding is centred.
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var, causal: bool) -> Result<Var> {
        let out = conv1d_depthwise_values(self.value(x), self.value(kernel), causal)?;
        let (b, c, t, k) = depthwise_dims(self.shape(x), self.shape(kernel))?;
        let left = conv_left_pad(k, causal);
        self.push_op("conv1d_depthwise", &[x, kernel], out, move |ctx| {
            let g = ctx.grad.data();
            let xd = ctx.inputs[0].data();
            let w = ctx.inputs[1].data();
            let mut dx = ctx.needs(0).then(|| vec![T::zero(); b * c * t]);
            let mut dw = ctx.needs(1).then(|| vec![T::zero(); c * k]);
            for bc in 0..b * c {
                let ch = bc % c;
                let gs = &g[bc * t..(bc + 1) * t];
                let xs = &xd[bc * t..(bc + 1) * t];
                for j in 0..k {
                    let shift = j as isize - left as isize;
                    let (lo, hi) = valid_range(t, shift);
                    if let Some(dx) = dx.as_mut() {
                        let wj = w[ch * k + j];
                        let dxs = &mut dx[bc * t..(bc + 1) * t];
                        for i in lo..hi {
                            dxs[(i as isize + shift) as usize] += wj * gs[i];
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        let mut acc = T::zero();
                        for i in lo..hi {
                            acc += gs[i] * xs[(i as isize + shift) as usize];
                        }
                        dw[ch * k + j] += acc;
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_parts(vec![b, c, t], d)),
                dw.map(|d| Tensor::from_parts(vec![c, k], d)),
            ]
        })
    }

    /// Dense temporal convolution with centred ("same") padding.
    /// `x: [b, c_in, t]`, `w: [c_out, c_in, k]`, `bias: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] {
            return Err(Error::shape("conv1d", format!("x {xs:?} with w {ws:?}")));
        }
        let (b, cin, t) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::shape("conv1d", format!("bias {:?}", self.shape(bv))));
            }
        }
        let left = conv_left_pad(k, false);
        let mut out = vec![T::zero(); b * cout * t];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = bias.map(|bv| self.value(bv).data());
            for bi in 0..b {
                for o in 0..cout {
                    let ys = &mut out[(bi * cout + o) * t..(bi * cout + o + 1) * t];
                    if let Some(bd) = bd {
                        ys.iter_mut().for_each(|y| *y = bd[o]);
                    }
                    for i in 0..cin {
                        let xs_ = &xd[(bi * cin + i) * t..(bi * cin + i + 1) * t];
                        for j in 0..k {
                            let wv = wd[(o * cin + i) * k + j];
                            let shift = j as isize - left as isize;
                            let (lo, hi) = valid_range(t, shift);
                            for p in lo..hi {
                                ys[p] += wv * xs_[(p as isize + shift) as usize];
                            }
                        }
                    }
                }
            }
        }
        let inputs: Vec<Var> = match bias {
            Some(bv) => vec![x, w, bv],
            None => vec![x, w],
        };
        self.push_op("conv1d", &inputs, Tensor::from_parts(vec![b, cout, t], out), move |ctx| {
            let g = ctx.grad.data();
            let xd = ctx.inputs[0].data();
            let wd = ctx.inputs[1].data();
            let mut dx = ctx.needs(0).then(|| vec![T::zero(); b * cin * t]);
            let mut dw = ctx.needs(1).then(|| vec![T::zero(); cout * cin * k]);
            for bi in 0..b {
                for o in 0..cout {
                    let gs = &g[(bi * cout + o) * t..(bi * cout + o + 1) * t];
                    for i in 0..cin {
                        let xrange = (bi * cin + i) * t..(bi * cin + i + 1) * t;
                        for j in 0..k {
                            let shift = j as isize - left as isize;
                            let (lo, hi) = valid_range(t, shift);
                            let widx = (o * cin + i) * k + j;
                            if let Some(dx) = dx.as_mut() {
                                let wv = wd[widx];
                                let dxs = &mut dx[xrange.clone()];
                                for p in lo..hi {
                                    dxs[(p as isize + shift) as usize] += wv * gs[p];
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                let xs_ = &xd[xrange.clone()];
                                let mut acc = T::zero();
                                for p in lo..hi {
                                    acc += gs[p] * xs_[(p as isize + shift) as usize];
                                }
                                dw[widx] += acc;
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(vec![b, cin, t], d)),
                dw.map(|d| Tensor::from_parts(vec![cout, cin, k], d)),
            ];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    let mut db = vec![T::zero(); cout];
                    for (row, gs) in g.chunks(t).enumerate() {
                        db[row % cout] += gs.iter().copied().sum();
                    }
                    Tensor::from_parts(vec![cout], db)
                }));
            }
            grads
        })
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().expect("tensor rank >= 1");
        if c == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {xs:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::of(eps);
        let rows = self.value(x).len() / c;
        let cf = T::of(c as f64);
        let mut xhat = vec![T::zero(); rows * c];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                let mean = row.iter().copied().sum::<T>() / cf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * gd[j] + bd[j];
                }
            }
        }
        self.push_op(
            "layer_norm",
            &[x, gamma, beta],
            Tensor::from_parts(xs.clone(), out),
            move |ctx| {
                let g = ctx.grad.data();
                let gd = ctx.inputs[1].data();
                let dx = ctx.needs(0).then(|| {
                    let mut dx = vec![T::zero(); rows * c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gd[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / cf;
                        m2 = m2 / cf;
                        for j in 0..c {
                            let dh = gr[j] * gd[j];
                            dx[r * c + j] = inv_std[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    Tensor::from_parts(xs.clone(), dx)
                });
                let dgamma = ctx.needs(1).then(|| {
                    let mut d = vec![T::zero(); c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                    Tensor::from_parts(vec![c], d)
                });
                let dbeta = ctx.needs(2).then(|| {
                    let mut d = vec![T::zero(); c];
                    for gr in g.chunks(c) {
                        for j in 0..c {
                            d[j] += gr[j];
                        }
                    }
                    Tensor::from_parts(vec![c], d)
                });
                vec![dx, dgamma, dbeta]
            },
        )
    }

    /// Max pooling over the last axis with `-inf` same-style padding.
    ///
    /// Output length is `ceil(t / stride)`. The subgradient goes to the first
    /// index attaining the maximum.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        if window == 0 || stride == 0 {
            return Err(Error::Invalid(format!(
                "maxpool1d window {window} / stride {stride} must be >= 1"
            )));
        }
        let xs = self.shape(x).to_vec();
        let t = *xs.last().expect("rank >= 1");
        let rows = self.value(x).len() / t;
        let tout = maxpool_output_len(t, stride);
        let total_pad = ((tout - 1) * stride + window).saturating_sub(t);
        let left = total_pad / 2;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * tout);
        let mut argmax = Vec::with_capacity(rows * tout);
        for r in 0..rows {
            let row = &xd[r * t..(r + 1) * t];
            for i in 0..tout {
                let start = (i * stride) as isize - left as isize;
                let lo = start.max(0) as usize;
                let hi = ((start + window as isize) as usize).min(t);
                let mut best = lo;
                for j in lo + 1..hi {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push(r * t + best);
            }
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("rank >= 1") = tout;
        self.push_op("maxpool1d", &[x], Tensor::from_parts(out_shape, out), move |ctx| {
            let mut dx = vec![T::zero(); rows * t];
            for (&src, &g) in argmax.iter().zip(ctx.grad.data()) {
                dx[src] += g;
            }
            vec![Some(Tensor::from_parts(xs.clone(), dx))]
        })
    }

    /// Zeroes entries `(i, i)` for `i < min(rows, cols)` of a matrix.
    pub fn mask_diagonal(&mut self, mat: Var) -> Result<Var> {
        let out = mask_diagonal_values(self.value(mat))?;
        self.push_op("mask_diagonal", &[mat], out, |ctx| {
            vec![Some(mask_diagonal_values(ctx.grad).expect("same shape as forward"))]
        })
    }
}

/// Value-level diagonal mask; see [`Graph::mask_diagonal`].
pub(crate) fn mask_diagonal_values<T: Scalar>(mat: &Tensor<T>) -> Result<Tensor<T>> {
    let s = mat.shape();
    if s.len() != 2 {
        return Err(Error::shape("mask_diagonal", format!("want a matrix, got {s:?}")));
    }
    let (r, c) = (s[0], s[1]);
    let mut d = mat.data().to_vec();
    for i in 0..r.min(c) {
        d[i * c + i] = T::zero();
    }
    Ok(Tensor::from_parts(vec![r, c], d))
}
