//! Selective state-space kernels.
//!
//! Continuous parameters `(A, B, C, Δ)` are discretized with a zero-order
//! hold and evaluated by one of three interchangeable evaluators:
//!
//! * [`scan_recurrent`]: the plain recurrence `h_t = Ā_t h_{t-1} + B̄_t x_t`,
//! * [`scan_parallel`]: the same recurrence as an associative prefix scan,
//! * [`materialize_mixing_matrix`]: the explicit `t × t` mixing matrix, for
//!   small-`t` verification only.
//!
//! Time-constant parameters additionally admit a convolution kernel
//! ([`lti_kernel`]). Bidirectional composition and both flavours of diagonal
//! masking live here as well.

mod op;
pub mod prefix;

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::{Scalar, Tensor};
use prefix::{Affine, Monoid};
use serde::{Deserialize, Serialize};

pub use op::{ScanSpec, Selective};

/// Default upper bound on `t` for [`materialize_mixing_matrix`].
pub const ORACLE_CAP: usize = 512;

/// How the diagonal of the backward direction is removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Zero the diagonal of the raw backward state parameter before `A = -exp(P)`.
    Literal,
    /// Drop the self-contribution `C_t B̄_t x_t` from the backward scan output.
    #[default]
    Semantic,
}

/// `expm1(z) / z`, equal to 1 at the origin.
#[inline]
pub(crate) fn phi<T: Scalar>(z: T) -> T {
    if z == T::zero() {
        T::one()
    } else {
        z.exp_m1() / z
    }
}

/// `d/dz [z φ(z)] / z` rearranged: `(z e^z - e^z + 1) / z²`.
#[inline]
pub(crate) fn psi<T: Scalar>(z: T) -> T {
    if z.abs() < T::of(0.1) {
        // Σ z^m (m+1)/(m+2)!
        let mut term = T::of(0.5);
        let mut sum = term;
        for m in 1..12 {
            let mf = m as f64;
            term = term * z * T::of((mf + 1.0) / (mf * (mf + 2.0)));
            sum += term;
        }
        sum
    } else {
        let e = z.exp();
        (z * e - e + T::one()) / (z * z)
    }
}

/// Continuous state-space parameters for one scan.
///
/// `a_raw` is the unconstrained parameter `P`; the state matrix is
/// `A = -exp(P)`, strictly negative by construction.
#[derive(Clone, Debug)]
pub struct SsmParams<T: Scalar> {
    /// `[c, n]`
    pub a_raw: Tensor<T>,
    /// `[b, t, n]`
    pub b: Tensor<T>,
    /// `[b, t, n]`
    pub c: Tensor<T>,
    /// `[b, t, c]`, strictly positive.
    pub delta: Tensor<T>,
}

impl<T: Scalar> SsmParams<T> {
    pub fn new(a_raw: Tensor<T>, b: Tensor<T>, c: Tensor<T>, delta: Tensor<T>) -> Result<Self> {
        let p = Self { a_raw, b, c, delta };
        p.dims()?;
        Ok(p)
    }

    /// `(batch, time, channels, state)`
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let (ash, bsh, csh, dsh) = (self.a_raw.shape(), self.b.shape(), self.c.shape(), self.delta.shape());
        if ash.len() != 2 || bsh.len() != 3 || dsh.len() != 3 {
            return Err(Error::shape("ssm", format!("A {ash:?}, B {bsh:?}, Δ {dsh:?}")));
        }
        let (c, n) = (ash[0], ash[1]);
        let (b, t) = (dsh[0], dsh[1]);
        if dsh[2] != c || bsh != [b, t, n] || csh != bsh {
            return Err(Error::shape(
                "ssm",
                format!("A {ash:?}, B {bsh:?}, C {csh:?}, Δ {dsh:?}"),
            ));
        }
        Ok((b, t, c, n))
    }

    /// `A = -exp(P)`.
    pub fn a(&self) -> Tensor<T> {
        self.a_raw.map(|p| -p.exp())
    }
}

/// Discretized transition and input tensors, both `[b, t, c, n]`.
#[derive(Clone, Debug)]
pub struct DiscreteSsm<T: Scalar> {
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
}

impl<T: Scalar> DiscreteSsm<T> {
    /// Wraps precomputed `Ā`, `B̄` without checking `0 < Ā < 1`, so that
    /// limiting cases (`Ā = 0`, `Ā = 1`) can be expressed directly.
    pub fn from_parts(a_bar: Tensor<T>, b_bar: Tensor<T>) -> Result<Self> {
        if a_bar.rank() != 4 || a_bar.shape() != b_bar.shape() {
            return Err(Error::shape(
                "discrete ssm",
                format!("Ā {:?}, B̄ {:?}", a_bar.shape(), b_bar.shape()),
            ));
        }
        Ok(Self { a_bar, b_bar })
    }

    /// `(batch, time, channels, state)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.a_bar.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn check(&self, c: &Tensor<T>, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let (b, t, ch, n) = self.dims();
        if c.shape() != [b, t, n] || x.shape() != [b, t, ch] {
            return Err(Error::shape(
                "scan",
                format!(
                    "Ā {:?} with C {:?} and x {:?}",
                    self.a_bar.shape(),
                    c.shape(),
                    x.shape()
                ),
            ));
        }
        Ok((b, t, ch, n))
    }
}

/// Zero-order-hold discretization.
///
/// `Ā = exp(ΔA)` and `B̄ = (exp(ΔA) - 1)/A · B = Δ φ(ΔA) B` with
/// `φ(z) = expm1(z)/z`, which stays accurate as `ΔA → 0`.
pub fn discretize_zoh<T: Scalar>(params: &SsmParams<T>) -> Result<DiscreteSsm<T>> {
    params.dims()?;
    if params.delta.data().iter().any(|&d| !(d > T::zero())) {
        return Err(Error::Invalid("Δ must be strictly positive".into()));
    }
    Ok(discretize_unchecked(&params.a(), &params.b, &params.delta))
}

/// Discretization without the positivity check; `a` is `A` itself.
pub(crate) fn discretize_unchecked<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, delta: &Tensor<T>) -> DiscreteSsm<T> {
    let (c, n) = (a.shape()[0], a.shape()[1]);
    let (bsz, t) = (delta.shape()[0], delta.shape()[1]);
    let ad = a.data();
    let bd = b.data();
    let dd = delta.data();
    let mut abar = vec![T::zero(); bsz * t * c * n];
    let mut bbar = vec![T::zero(); bsz * t * c * n];
    for row in 0..bsz * t {
        let brow = &bd[row * n..(row + 1) * n];
        for ch in 0..c {
            let dt = dd[row * c + ch];
            let base = (row * c + ch) * n;
            for k in 0..n {
                let z = dt * ad[ch * n + k];
                abar[base + k] = z.exp();
                bbar[base + k] = dt * phi(z) * brow[k];
            }
        }
    }
    let shape = vec![bsz, t, c, n];
    DiscreteSsm {
        a_bar: Tensor::from_parts(shape.clone(), abar),
        b_bar: Tensor::from_parts(shape, bbar),
    }
}

/// Runs the recurrence for batch entry `bi`, writing `y[t, c]` and, when
/// given, the hidden states `[t, c, n]`. With `skip_self` the output reads
/// `⟨C_t, Ā_t h_{t-1}⟩`, i.e. the state before the current input arrives.
fn recur_batch<T: Scalar>(
    d: &DiscreteSsm<T>,
    (c, x): (&Tensor<T>, &Tensor<T>),
    bi: usize,
    skip_self: bool,
    y: &mut [T],
    mut states: Option<&mut [T]>,
) {
    let (_, t, ch, n) = d.dims();
    let ab = d.a_bar.data();
    let bb = d.b_bar.data();
    let cd = c.data();
    let xd = x.data();
    let mut h = vec![T::zero(); ch * n];
    for ti in 0..t {
        let row = bi * t + ti;
        let crow = &cd[row * n..(row + 1) * n];
        for cc in 0..ch {
            let u = xd[row * ch + cc];
            let base = (row * ch + cc) * n;
            let hs = &mut h[cc * n..(cc + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                let carried = ab[base + k] * hs[k];
                hs[k] = carried + bb[base + k] * u;
                acc += crow[k] * if skip_self { carried } else { hs[k] };
            }
            y[ti * ch + cc] = acc;
        }
        if let Some(s) = states.as_deref_mut() {
            s[ti * ch * n..(ti + 1) * ch * n].copy_from_slice(&h);
        }
    }
}

/// Sequential recurrence `h_t = Ā_t ⊙ h_{t-1} + B̄_t x_t`, `y_t = ⟨C_t, h_t⟩`,
/// from `h_0 = 0`. `c: [b, t, n]`, `x: [b, t, c]`.
pub fn scan_recurrent<T: Scalar>(d: &DiscreteSsm<T>, c: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    scan_recurrent_with(Exec::Sequential, d, c, x)
}

/// [`scan_recurrent`] with batch entries distributed according to `exec`.
pub fn scan_recurrent_with<T: Scalar>(
    exec: Exec,
    d: &DiscreteSsm<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, t, ch, _) = d.check(c, x)?;
    let mut y = vec![T::zero(); b * t * ch];
    par::for_each_chunk(exec, &mut y, t * ch, |bi, yb| recur_batch(d, (c, x), bi, false, yb, None));
    Ok(Tensor::from_parts(vec![b, t, ch], y))
}

/// Recurrence that also returns every hidden state, `[b, t, c, n]`.
pub(crate) fn scan_with_states<T: Scalar>(
    exec: Exec,
    d: &DiscreteSsm<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
    skip_self: bool,
) -> (Vec<T>, Vec<T>) {
    let (b, t, ch, n) = d.dims();
    let per: Vec<(Vec<T>, Vec<T>)> = par::map_range(exec, b, |bi| {
        let mut y = vec![T::zero(); t * ch];
        let mut s = vec![T::zero(); t * ch * n];
        recur_batch(d, (c, x), bi, skip_self, &mut y, Some(&mut s));
        (y, s)
    });
    let mut y = Vec::with_capacity(b * t * ch);
    let mut s = Vec::with_capacity(b * t * ch * n);
    for (yb, sb) in per {
        y.extend(yb);
        s.extend(sb);
    }
    (y, s)
}

/// Evaluates the recurrence as a work-efficient prefix scan over affine
/// maps, one independent scan per `(batch, channel, state)` triple.
///
/// With `Exec::Parallel` the `(batch, channel)` pairs are spread across the
/// thread pool; each tree has a fixed combine order, so the result does not
/// depend on thread count.
pub fn scan_parallel<T: Scalar>(exec: Exec, d: &DiscreteSsm<T>, c: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, t, ch, n) = d.check(c, x)?;
    let ab = d.a_bar.data();
    let bb = d.b_bar.data();
    let cd = c.data();
    let xd = x.data();
    let columns: Vec<Vec<T>> = par::map_range(exec, b * ch, |pair| {
        let (bi, cc) = (pair / ch, pair % ch);
        // State-major: one contiguous length-t sequence per state.
        let mut seq: Vec<Affine<T>> = vec![Affine::identity(); n * t];
        for ti in 0..t {
            let row = bi * t + ti;
            let base = (row * ch + cc) * n;
            let xv = xd[row * ch + cc];
            for k in 0..n {
                seq[k * t + ti] = Affine {
                    a: ab[base + k],
                    b: bb[base + k] * xv,
                };
            }
        }
        for s in seq.chunks_mut(t.max(1)) {
            prefix::inclusive_scan(s);
        }
        (0..t)
            .map(|ti| {
                let crow = &cd[(bi * t + ti) * n..(bi * t + ti + 1) * n];
                crow.iter().enumerate().map(|(k, &cv)| cv * seq[k * t + ti].b).sum()
            })
            .collect::<Vec<T>>()
    });
    let mut y = vec![T::zero(); b * t * ch];
    for (pair, col) in columns.iter().enumerate() {
        let (bi, cc) = (pair / ch, pair % ch);
        for (ti, &v) in col.iter().enumerate() {
            y[(bi * t + ti) * ch + cc] = v;
        }
    }
    Ok(Tensor::from_parts(vec![b, t, ch], y))
}

/// Explicit per-(batch, channel) mixing matrices, `y = M x`.
#[derive(Clone, Debug)]
pub struct MixingMatrix<T: Scalar> {
    batch: usize,
    channels: usize,
    t: usize,
    data: Vec<T>,
    lower_triangular: bool,
}

impl<T: Scalar> MixingMatrix<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn is_lower_triangular(&self) -> bool {
        self.lower_triangular
    }

    fn index(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        ((b * self.channels + c) * self.t + i) * self.t + j
    }

    pub fn entry(&self, b: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.index(b, c, i, j)]
    }

    /// Largest magnitude strictly above the diagonal.
    pub fn max_upper(&self) -> T {
        let mut m = T::zero();
        for b in 0..self.batch {
            for c in 0..self.channels {
                for i in 0..self.t {
                    for j in i + 1..self.t {
                        m = m.max(self.entry(b, c, i, j).abs());
                    }
                }
            }
        }
        m
    }

    /// `y[b, i, c] = Σ_j M[b, c][i][j] x[b, j, c]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t, ch) = (self.batch, self.t, self.channels);
        if x.shape() != [b, t, ch] {
            return Err(Error::shape(
                "mixing apply",
                format!("matrix for [{b}, {t}, {ch}] applied to {:?}", x.shape()),
            ));
        }
        let xd = x.data();
        let mut y = vec![T::zero(); b * t * ch];
        for bi in 0..b {
            for cc in 0..ch {
                for i in 0..t {
                    let mut acc = T::zero();
                    for j in 0..t {
                        acc += self.entry(bi, cc, i, j) * xd[(bi * t + j) * ch + cc];
                    }
                    y[(bi * t + i) * ch + cc] = acc;
                }
            }
        }
        Ok(Tensor::from_parts(vec![b, t, ch], y))
    }

    /// Copy with every diagonal entry set to zero.
    pub fn without_diagonal(&self) -> Self {
        let mut m = self.clone();
        for b in 0..m.batch {
            for c in 0..m.channels {
                for i in 0..m.t {
                    let at = m.index(b, c, i, i);
                    m.data[at] = T::zero();
                }
            }
        }
        m
    }

    /// `M_fw + J M_bw J`: the matrix of `y_fw + flip(y_bw)` when the backward
    /// scan ran over the flipped input.
    pub fn compose_bidirectional(fw: &Self, bw: &Self) -> Result<Self> {
        if (fw.batch, fw.channels, fw.t) != (bw.batch, bw.channels, bw.t) {
            return Err(Error::shape("compose", "forward and backward matrices differ in size"));
        }
        let t = fw.t;
        let mut out = fw.clone();
        out.lower_triangular = false;
        for b in 0..fw.batch {
            for c in 0..fw.channels {
                for i in 0..t {
                    for j in 0..t {
                        let at = out.index(b, c, i, j);
                        out.data[at] += bw.entry(b, c, t - 1 - i, t - 1 - j);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Dense oracle with the default cap of [`ORACLE_CAP`] time steps.
pub fn materialize_mixing_matrix<T: Scalar>(d: &DiscreteSsm<T>, c: &Tensor<T>) -> Result<MixingMatrix<T>> {
    materialize_mixing_matrix_capped(d, c, ORACLE_CAP)
}

/// `M[i][j] = Σ_k C_i[k] Ā_i[k] ⋯ Ā_{j+1}[k] B̄_j[k]` for `i ≥ j`, zero above.
/// Costs O(t² n) per channel; refuses `t > cap`.
pub fn materialize_mixing_matrix_capped<T: Scalar>(
    d: &DiscreteSsm<T>,
    c: &Tensor<T>,
    cap: usize,
) -> Result<MixingMatrix<T>> {
    let (b, t, ch, n) = d.dims();
    if c.shape() != [b, t, n] {
        return Err(Error::shape("mixing matrix", format!("C {:?}", c.shape())));
    }
    if t > cap {
        return Err(Error::OracleCap(format!("t = {t} exceeds mixing-matrix cap {cap}")));
    }
    let ab = d.a_bar.data();
    let bb = d.b_bar.data();
    let cd = c.data();
    let at = |bi: usize, ti: usize, cc: usize| ((bi * t + ti) * ch + cc) * n;
    let mut m = MixingMatrix {
        batch: b,
        channels: ch,
        t,
        data: vec![T::zero(); b * ch * t * t],
        lower_triangular: true,
    };
    let mut prod = vec![T::zero(); n];
    for bi in 0..b {
        for cc in 0..ch {
            for j in 0..t {
                prod.copy_from_slice(&bb[at(bi, j, cc)..at(bi, j, cc) + n]);
                for i in j..t {
                    if i > j {
                        let a = &ab[at(bi, i, cc)..at(bi, i, cc) + n];
                        prod.iter_mut().zip(a).for_each(|(p, &a)| *p *= a);
                    }
                    let crow = &cd[(bi * t + i) * n..(bi * t + i + 1) * n];
                    let v: T = crow.iter().zip(&prod).map(|(&c, &p)| c * p).sum();
                    let idx = m.index(bi, cc, i, j);
                    m.data[idx] = v;
                }
            }
        }
    }
    Ok(m)
}

/// Convolution kernel `K̄[c][τ] = Σ_k C_k Ā_k^τ B̄_k`, `τ < len`, for a
/// system whose `Ā`, `B̄`, `C` do not vary over batch or time. Returns `[c, len]`.
pub fn lti_kernel<T: Scalar>(d: &DiscreteSsm<T>, c: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    let (b, t, ch, n) = d.dims();
    if c.shape() != [b, t, n] {
        return Err(Error::shape("lti kernel", format!("C {:?}", c.shape())));
    }
    if len == 0 {
        return Err(Error::Invalid("kernel length must be positive".into()));
    }
    let per = ch * n;
    let constant = |data: &[T], row: usize| data.chunks(row).all(|r| r == &data[..row]);
    if !constant(d.a_bar.data(), per) || !constant(d.b_bar.data(), per) || !constant(c.data(), n) {
        return Err(Error::Invalid(
            "convolution kernel requires time-constant parameters; selective scans have none".into(),
        ));
    }
    let ab = &d.a_bar.data()[..per];
    let bb = &d.b_bar.data()[..per];
    let cv = &c.data()[..n];
    let mut k = vec![T::zero(); ch * len];
    for cc in 0..ch {
        let mut p: Vec<T> = (0..n).map(|s| cv[s] * bb[cc * n + s]).collect();
        for tau in 0..len {
            if tau > 0 {
                p.iter_mut().zip(&ab[cc * n..(cc + 1) * n]).for_each(|(p, &a)| *p *= a);
            }
            k[cc * len + tau] = p.iter().copied().sum();
        }
    }
    Ok(Tensor::from_parts(vec![ch, len], k))
}

/// Causal convolution `y[b, t, c] = Σ_{τ ≤ t} K[c][τ] x[b, t - τ, c]`.
pub fn lti_apply<T: Scalar>(kernel: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (kc, len) = match kernel.shape() {
        [c, l] => (*c, *l),
        s => return Err(Error::shape("lti apply", format!("kernel {s:?}"))),
    };
    let (b, t, ch) = match x.shape() {
        [b, t, c] => (*b, *t, *c),
        s => return Err(Error::shape("lti apply", format!("x {s:?}"))),
    };
    if kc != ch || len < t {
        return Err(Error::shape(
            "lti apply",
            format!("kernel {:?} for x {:?}", kernel.shape(), x.shape()),
        ));
    }
    let kd = kernel.data();
    let xd = x.data();
    let mut y = vec![T::zero(); b * t * ch];
    for bi in 0..b {
        for ti in 0..t {
            for cc in 0..ch {
                let mut acc = T::zero();
                for tau in 0..=ti {
                    acc += kd[cc * len + tau] * xd[(bi * t + ti - tau) * ch + cc];
                }
                y[(bi * t + ti) * ch + cc] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, t, ch], y))
}

/// Zeroes entries `(i, i)` of a matrix; everything else is untouched.
pub fn mask_diagonal<T: Scalar>(mat: &Tensor<T>) -> Result<Tensor<T>> {
    crate::tensor::mask_diagonal_values(mat)
}

/// Self-contribution `Σ_k C_t[k] B̄_t[c, k]`, the diagonal of the mixing
/// matrix, as `[b, t, c]`.
pub fn mixing_diagonal<T: Scalar>(d: &DiscreteSsm<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, t, ch, n) = d.dims();
    if c.shape() != [b, t, n] {
        return Err(Error::shape("mixing diagonal", format!("C {:?}", c.shape())));
    }
    let bb = d.b_bar.data();
    let cd = c.data();
    let mut out = vec![T::zero(); b * t * ch];
    for row in 0..b * t {
        let crow = &cd[row * n..(row + 1) * n];
        for cc in 0..ch {
            let base = (row * ch + cc) * n;
            out[row * ch + cc] = crow.iter().zip(&bb[base..base + n]).map(|(&c, &b)| c * b).sum();
        }
    }
    Ok(Tensor::from_parts(vec![b, t, ch], out))
}

/// `y_bw - diag(M_bw) ⊙ x_bw` in O(t n), without forming `M_bw`.
///
/// Not idempotent: each call removes the self-contribution once more.
pub fn subtract_self_term<T: Scalar>(
    y_bw: &Tensor<T>,
    d_bw: &DiscreteSsm<T>,
    c_bw: &Tensor<T>,
    x_bw: &Tensor<T>,
) -> Result<Tensor<T>> {
    d_bw.check(c_bw, x_bw)?;
    if y_bw.shape() != x_bw.shape() {
        return Err(Error::shape(
            "subtract self term",
            format!("y {:?} vs x {:?}", y_bw.shape(), x_bw.shape()),
        ));
    }
    let diag = mixing_diagonal(d_bw, c_bw)?;
    let yd = y_bw.data();
    let out = diag
        .data()
        .iter()
        .zip(x_bw.data())
        .zip(yd)
        .map(|((&m, &x), &y)| y - m * x)
        .collect();
    Ok(Tensor::from_parts(y_bw.shape().to_vec(), out))
}

/// Backward-direction scan result together with what produced it.
pub struct BackwardScan<'a, T: Scalar> {
    /// Scan output over the flipped input.
    pub y: &'a Tensor<T>,
    pub ssm: &'a DiscreteSsm<T>,
    pub c: &'a Tensor<T>,
    /// The flipped input itself.
    pub x: &'a Tensor<T>,
}

/// `Y = Y_fw + flip_time(Y_bw')` where `Y_bw'` is the backward result with
/// its self-term removed when `semantic_mask` is set.
pub fn bidirectional_compose<T: Scalar>(y_fw: &Tensor<T>, bw: BackwardScan<'_, T>, semantic_mask: bool) -> Result<Tensor<T>> {
    if y_fw.shape() != bw.y.shape() || y_fw.rank() != 3 {
        return Err(Error::shape(
            "bidirectional compose",
            format!("{:?} vs {:?}", y_fw.shape(), bw.y.shape()),
        ));
    }
    let y_bw = if semantic_mask {
        subtract_self_term(bw.y, bw.ssm, bw.c, bw.x)?
    } else {
        bw.y.clone()
    };
    y_fw.zip_map(&y_bw.flip(1)?, |a, b| a + b)
}

#[cfg(test)]
mod tests;
