//! Elementwise and structural operations.

use super::{strides, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Right-aligned broadcasting of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Materializes `t` broadcast to `shape`.
fn expand<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Vec<T> {
    if t.shape() == shape {
        return t.data().to_vec();
    }
    let rank = shape.len();
    let src = t.shape();
    let src_strides = strides(src);
    let mut bstride = vec![0usize; rank];
    for i in 0..src.len() {
        let ax = rank - src.len() + i;
        if src[i] != 1 {
            bstride[ax] = src_strides[i];
        }
    }
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let data = t.data();
    for _ in 0..n {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += bstride[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= bstride[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sums `grad` (of broadcast shape) back down to `shape`.
pub(crate) fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let gshape = grad.shape();
    let rank = gshape.len();
    let dst_strides = strides(shape);
    let mut bstride = vec![0usize; rank];
    for i in 0..shape.len() {
        let ax = rank - shape.len() + i;
        if shape[i] != 1 {
            bstride[ax] = dst_strides[i];
        }
    }
    let mut out = vec![T::zero(); shape.iter().product()];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad.data() {
        out[off] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += bstride[ax];
            if idx[ax] < gshape[ax] {
                break;
            }
            off -= bstride[ax] * gshape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    T::of(0.5) * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let th = (k * (x + c * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::of(3.0) * c * x * x)
}

/// Elementwise operation kinds exposed through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Neg,
    Softplus,
    Silu,
    Gelu,
    /// Reverses the time axis (axis 1 of a `[batch, time, channel]` tensor).
    FlipTime,
}

impl<T: Scalar> Graph<T> {
    /// Dispatches one of the named elementwise kinds; binary kinds need `b`.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::Invalid(format!("{kind:?} needs two operands")));
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Exp => self.exp(a),
            Elementwise::Neg => self.neg(a),
            Elementwise::Softplus => self.softplus(a),
            Elementwise::Silu => self.silu(a),
            Elementwise::Gelu => self.gelu(a),
            Elementwise::FlipTime => self.flip_time(a),
        }
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| {
            Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)))
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("add", a, b)?;
        let ea = expand(self.value(a), &shape);
        let eb = expand(self.value(b), &shape);
        let out: Vec<T> = ea.iter().zip(&eb).map(|(&x, &y)| x + y).collect();
        self.push_op("add", &[a, b], Tensor::from_parts(shape, out), |ctx| {
            vec![
                ctx.needs(0).then(|| reduce_to(ctx.grad, ctx.inputs[0].shape())),
                ctx.needs(1).then(|| reduce_to(ctx.grad, ctx.inputs[1].shape())),
            ]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("sub", a, b)?;
        let ea = expand(self.value(a), &shape);
        let eb = expand(self.value(b), &shape);
        let out: Vec<T> = ea.iter().zip(&eb).map(|(&x, &y)| x - y).collect();
        self.push_op("sub", &[a, b], Tensor::from_parts(shape, out), |ctx| {
            vec![
                ctx.needs(0).then(|| reduce_to(ctx.grad, ctx.inputs[0].shape())),
                ctx.needs(1).then(|| reduce_to(&ctx.grad.map(|g| -g), ctx.inputs[1].shape())),
            ]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("mul", a, b)?;
        let ea = expand(self.value(a), &shape);
        let eb = expand(self.value(b), &shape);
        let out: Vec<T> = ea.iter().zip(&eb).map(|(&x, &y)| x * y).collect();
        self.push_op("mul", &[a, b], Tensor::from_parts(shape.clone(), out), move |ctx| {
            let g = ctx.grad.data();
            let da = ctx.needs(0).then(|| {
                let eb = expand(ctx.inputs[1], &shape);
                let d: Vec<T> = g.iter().zip(&eb).map(|(&g, &y)| g * y).collect();
                reduce_to(&Tensor::from_parts(shape.clone(), d), ctx.inputs[0].shape())
            });
            let db = ctx.needs(1).then(|| {
                let ea = expand(ctx.inputs[0], &shape);
                let d: Vec<T> = g.iter().zip(&ea).map(|(&g, &x)| g * x).collect();
                reduce_to(&Tensor::from_parts(shape.clone(), d), ctx.inputs[1].shape())
            });
            vec![da, db]
        })
    }

    /// `f` is the forward map, `df(x, y)` its derivative given input and output.
    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: fn(T) -> T,
        df: fn(T, T) -> T,
    ) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push_op(name, &[a], out, move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let d: Vec<T> = ctx
                .grad
                .data()
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), d))]
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), |_, y| y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, |_, _| -T::one())
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, |x, _| sigmoid(x))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, silu, |x, _| silu_grad(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "relu",
            a,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        self.push_op("scale", &[a], out, move |ctx| vec![Some(ctx.grad.map(|g| g * k))])
    }

    /// Reverses axis 1 of a `[batch, time, ...]` tensor.
    pub fn flip_time(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() < 2 {
            return Err(Error::shape("flip_time", "tensor has no time axis"));
        }
        self.flip(a, 1)
    }

    pub fn flip(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).flip(axis)?;
        self.push_op("flip", &[a], out, move |ctx| {
            vec![Some(ctx.grad.flip(axis).expect("axis validated in forward"))]
        })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push_op("permute", &[a], out, move |ctx| {
            vec![Some(ctx.grad.permute(&inverse).expect("inverse permutation"))]
        })
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let orig = self.shape(a).to_vec();
        self.push_op("reshape", &[a], out, move |ctx| {
            vec![Some(ctx.grad.reshape(&orig).expect("same element count"))]
        })
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&sizes) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push_op("concat", parts, Tensor::from_parts(shape, out), move |ctx| {
            let g = ctx.grad.data();
            let mut grads = Vec::with_capacity(sizes.len());
            let mut start = 0;
            for (i, &len) in sizes.iter().enumerate() {
                if ctx.needs(i) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(ctx.inputs[i].shape().to_vec(), d)));
                } else {
                    grads.push(None);
                }
                start += len;
            }
            grads
        })
    }

    /// Takes `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let take = end - start;
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&d[base..base + take * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = take;
        self.push_op("slice", &[a], Tensor::from_parts(out_shape, out), move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                let base = (o * len + start) * inner;
                d[base..base + take * inner]
                    .copy_from_slice(&g[o * take * inner..(o + 1) * take * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push_op("sum", &[a], Tensor::scalar(s), |ctx| {
            let g = ctx.grad.data()[0];
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = T::of(self.value(a).len() as f64);
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / n)
    }
}
