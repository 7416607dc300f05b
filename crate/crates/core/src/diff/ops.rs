//! Differentiable operations on tape variables.
//!
//! Every operation computes its forward value eagerly and, on a recording
//! tape, stores a closure mapping the upstream gradient to per-parent
//! gradients.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{BackwardFn, Var};
use super::tensor::Tensor;

type TensorPair<T> = (Rc<Tensor<T>>, Rc<Tensor<T>>);

/// Lower bound applied to the target-class probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn same_tape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.tape, b.tape), "variables belong to different tapes");
}

fn boxed<T, F>(f: F) -> Option<BackwardFn<T>>
where
    F: Fn(&Tensor<T>) -> Vec<Tensor<T>> + 'static,
{
    Some(Box::new(f))
}

fn t<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data).expect("kernel produced consistent shape")
}

// ----- dense kernels -------------------------------------------------------

/// `a[n,k] · b[k,m]`
fn mm<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[n,k] · b[m,k]ᵀ`
fn mm_nt<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * m + j] = s;
        }
    }
    out
}

/// `a[n,k]ᵀ · g[n,m]` giving `[k,m]`
fn mm_tn<T: Scalar>(a: &[T], g: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Maps each softmax row to the block of the validity mask it uses.
struct MaskLayout {
    n: usize,
    rows_per_block: usize,
}

impl MaskLayout {
    fn new(total: usize, n: usize, mask_len: usize) -> Result<Self> {
        if n == 0 || mask_len == 0 || !mask_len.is_multiple_of(n) {
            return shape_err(format!("mask length {mask_len} incompatible with last dim {n}"));
        }
        let rows = total / n;
        let blocks = mask_len / n;
        if !rows.is_multiple_of(blocks) {
            return shape_err(format!("{rows} rows cannot be split into {blocks} mask blocks"));
        }
        Ok(Self { n, rows_per_block: rows / blocks })
    }

    fn row_mask<'m>(&self, valid: &'m [bool], row: usize) -> &'m [bool] {
        let b = row / self.rows_per_block;
        &valid[b * self.n..(b + 1) * self.n]
    }
}

/// Masked softmax over the last axis, evaluated without a tape.
///
/// `valid` has length `n` (one mask for all rows) or a multiple of `n`; in
/// the latter case consecutive row groups share one mask block. Invalid
/// positions come out exactly zero and their logits are never read.
pub fn softmax_masked_values<T: Scalar>(
    logits: &Tensor<T>,
    valid: &[bool],
    allow_all_masked: bool,
) -> Result<Tensor<T>> {
    let n = logits.last_dim();
    let layout = MaskLayout::new(logits.len(), n, valid.len())?;
    let x = logits.data();
    let mut out = vec![T::zero(); x.len()];
    for r in 0..x.len() / n {
        let mask = layout.row_mask(valid, r);
        let row = &x[r * n..(r + 1) * n];
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if mask[j] && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            if mask.iter().any(|&m| m) {
                return Err(Error::Numeric(format!("masked softmax row {r} has no finite logit")));
            }
            if allow_all_masked {
                continue;
            }
            return Err(Error::AllMaskedRow { row: r });
        }
        let o = &mut out[r * n..(r + 1) * n];
        let mut sum = T::zero();
        for j in 0..n {
            if mask[j] {
                let e = (row[j] - max).exp();
                o[j] = e;
                sum += e;
            }
        }
        for j in 0..n {
            if mask[j] {
                o[j] /= sum;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Layer normalisation over the last axis (population variance), without a tape.
pub fn layer_norm_values<T: Scalar>(x: &Tensor<T>, gain: &[T], bias: &[T], eps: T) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return shape_err(format!("layer norm over {d} features with gain {} / bias {}", gain.len(), bias.len()));
    }
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let (mean, inv) = row_stats(row, eps);
        for j in 0..d {
            o[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let d = T::c(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
    (mean, T::one() / (var + eps).sqrt())
}

const GELU_K: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-form GELU.
pub fn gelu_value<T: Scalar>(x: T) -> T {
    let u = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_K) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = T::c(SQRT_2_OVER_PI);
    let u = s * (x + T::c(GELU_K) * x * x * x);
    let th = u.tanh();
    T::c(0.5) * (T::one() + th) + T::c(0.5) * x * (T::one() - th * th) * s * (T::one() + T::c(3.0 * GELU_K) * x * x)
}

/// Cell boundaries of an average-pooling grid along one axis.
fn pool_bounds(len: usize, cells: usize) -> Vec<(usize, usize)> {
    (0..cells).map(|i| (i * len / cells, (i + 1) * len / cells)).collect()
}

// ----- operations ----------------------------------------------------------

impl<'t, T: Scalar> Var<'t, T> {
    fn unary<F>(&self, value: Tensor<T>, backward: F) -> Var<'t, T>
    where
        F: FnOnce() -> Option<BackwardFn<T>>,
    {
        self.tape.push(value, vec![self.id], backward)
    }

    fn check_same_shape(&self, other: &Var<'t, T>, op: &str) -> Result<TensorPair<T>> {
        same_tape(self, other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return shape_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.check_same_shape(other, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let value = t(a.shape(), data);
        Ok(self.tape.push(value, vec![self.id, other.id], || boxed(|g: &Tensor<T>| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.check_same_shape(other, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let value = t(a.shape(), data);
        Ok(self.tape.push(value, vec![self.id, other.id], || {
            boxed(|g: &Tensor<T>| {
                let neg = g.data().iter().map(|&v| -v).collect();
                vec![g.clone(), t(g.shape(), neg)]
            })
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.check_same_shape(other, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let value = t(a.shape(), data);
        Ok(self.tape.push(value, vec![self.id, other.id], || {
            boxed(move |g: &Tensor<T>| {
                let ga = g.data().iter().zip(b.data()).map(|(&u, &y)| u * y).collect();
                let gb = g.data().iter().zip(a.data()).map(|(&u, &x)| u * x).collect();
                vec![t(g.shape(), ga), t(g.shape(), gb)]
            })
        }))
    }

    /// Adds `other`, whose shape must be a trailing suffix of this shape, repeated over the leading axes.
    pub fn add_broadcast(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(format!("add_broadcast: {:?} is not a suffix of {:?}", sb, sa));
        }
        let inner = b.len().max(1);
        let data = a.data().iter().enumerate().map(|(i, &x)| x + b.data()[i % inner]).collect();
        let value = t(sa, data);
        let b_shape = sb.to_vec();
        Ok(self.tape.push(value, vec![self.id, other.id], || {
            boxed(move |g: &Tensor<T>| {
                let mut gb = vec![T::zero(); inner];
                for chunk in g.data().chunks(inner) {
                    for (acc, &v) in gb.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                vec![g.clone(), t(&b_shape, gb)]
            })
        }))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let a = self.value();
        let value = t(a.shape(), a.data().iter().map(|&x| x * c).collect());
        self.unary(value, || {
            boxed(move |g: &Tensor<T>| vec![t(g.shape(), g.data().iter().map(|&v| v * c).collect())])
        })
    }

    /// Multiplies each slice along the first axis by a constant factor.
    pub fn mul_rows(&self, factors: &[T]) -> Result<Var<'t, T>> {
        let a = self.value();
        let rows = a.shape().first().copied().unwrap_or(1);
        if rows != factors.len() {
            return shape_err(format!("mul_rows: {} factors for {} rows", factors.len(), rows));
        }
        let inner = a.len() / rows.max(1);
        let f: Rc<Vec<T>> = Rc::new(factors.to_vec());
        let apply = |src: &[T], f: &[T]| -> Vec<T> { src.iter().enumerate().map(|(i, &x)| x * f[i / inner]).collect() };
        let value = t(a.shape(), apply(a.data(), &f));
        Ok(self.unary(value, || {
            boxed(move |g: &Tensor<T>| {
                let data = g.data().iter().enumerate().map(|(i, &x)| x * f[i / inner]).collect();
                vec![t(g.shape(), data)]
            })
        }))
    }

    /// 2-D matrix product `[n,k]·[k,m]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: {:?} x {:?}", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let value = t(&[n, m], mm(a.data(), b.data(), n, k, m));
        Ok(self.tape.push(value, vec![self.id, other.id], || {
            boxed(move |g: &Tensor<T>| {
                let ga = mm_nt(g.data(), b.data(), n, m, k);
                let gb = mm_tn(a.data(), g.data(), n, k, m);
                vec![t(&[n, k], ga), t(&[k, m], gb)]
            })
        }))
    }

    /// Batched product `[B,n,k]·[B,k,m]`, or `[B,n,k]·[B,m,k]ᵀ` when `transpose_rhs`.
    pub fn bmm(&self, other: &Var<'t, T>, transpose_rhs: bool) -> Result<Var<'t, T>> {
        same_tape(self, other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("bmm: {:?} x {:?}", sa, sb));
        }
        let (bs, n, k) = (sa[0], sa[1], sa[2]);
        let m = if transpose_rhs { sb[1] } else { sb[2] };
        let kb = if transpose_rhs { sb[2] } else { sb[1] };
        if kb != k {
            return shape_err(format!("bmm: inner dims {k} and {kb} differ"));
        }
        let mut out = Vec::with_capacity(bs * n * m);
        for i in 0..bs {
            let ai = &a.data()[i * n * k..(i + 1) * n * k];
            let bi = &b.data()[i * k * m..(i + 1) * k * m];
            out.extend(if transpose_rhs { mm_nt(ai, bi, n, k, m) } else { mm(ai, bi, n, k, m) });
        }
        let value = t(&[bs, n, m], out);
        Ok(self.tape.push(value, vec![self.id, other.id], || {
            boxed(move |g: &Tensor<T>| {
                let mut ga = Vec::with_capacity(bs * n * k);
                let mut gb = Vec::with_capacity(bs * k * m);
                for i in 0..bs {
                    let ai = &a.data()[i * n * k..(i + 1) * n * k];
                    let bi = &b.data()[i * k * m..(i + 1) * k * m];
                    let gi = &g.data()[i * n * m..(i + 1) * n * m];
                    if transpose_rhs {
                        ga.extend(mm(gi, bi, n, m, k));
                        gb.extend(mm_tn(gi, ai, n, m, k));
                    } else {
                        ga.extend(mm_nt(gi, bi, n, m, k));
                        gb.extend(mm_tn(ai, gi, n, k, m));
                    }
                }
                vec![t(&sa, ga), t(&sb, gb)]
            })
        }))
    }

    /// Affine map over the last axis: `x[..., k] · w[k, n] + bias[n]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let k = *shape.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let ws = weight.shape();
        if ws.len() != 2 || ws[0] != k {
            return shape_err(format!("linear: input {:?} with weight {:?}", shape, ws));
        }
        let rows = shape.iter().product::<usize>() / k.max(1);
        let mut y = self.reshape(&[rows, k])?.matmul(weight)?;
        if let Some(b) = bias {
            y = y.add_broadcast(b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = ws[1];
        y.reshape(&out_shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let original = a.shape().to_vec();
        let value = (*a).clone().reshaped(shape)?;
        Ok(self.unary(value, || {
            boxed(move |g: &Tensor<T>| vec![g.clone().reshaped(&original).expect("same element count")])
        }))
    }

    /// Swaps axes 1 and 2 of a rank-4 tensor.
    pub fn permute_0213(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        let s = a.shape().to_vec();
        if s.len() != 4 {
            return shape_err(format!("permute_0213 needs rank 4, got {:?}", s));
        }
        let value = t(&[s[0], s[2], s[1], s[3]], swap12(a.data(), s[0], s[1], s[2], s[3]));
        Ok(self.unary(value, || {
            boxed(move |g: &Tensor<T>| vec![t(&s, swap12(g.data(), s[0], s[2], s[1], s[3]))])
        }))
    }

    /// Row `index` along axis 1 of a `[B, m, d]` tensor, giving `[B, d]`.
    pub fn select_axis1(&self, index: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let s = a.shape().to_vec();
        if s.len() != 3 || index >= s[1] {
            return shape_err(format!("select_axis1({index}) on {:?}", s));
        }
        let (b, m, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            let off = (i * m + index) * d;
            out.extend_from_slice(&a.data()[off..off + d]);
        }
        let value = t(&[b, d], out);
        Ok(self.unary(value, || {
            boxed(move |g: &Tensor<T>| {
                let mut ga = vec![T::zero(); b * m * d];
                for i in 0..b {
                    let off = (i * m + index) * d;
                    ga[off..off + d].copy_from_slice(&g.data()[i * d..(i + 1) * d]);
                }
                vec![t(&s, ga)]
            })
        }))
    }

    /// Repeats this tensor `batch` times along a new leading axis.
    pub fn expand(&self, batch: usize) -> Var<'t, T> {
        let a = self.value();
        let inner = a.len();
        let mut shape = vec![batch];
        shape.extend_from_slice(a.shape());
        let mut out = Vec::with_capacity(batch * inner);
        for _ in 0..batch {
            out.extend_from_slice(a.data());
        }
        let value = t(&shape, out);
        let inner_shape = a.shape().to_vec();
        self.unary(value, || {
            boxed(move |g: &Tensor<T>| {
                let mut acc = vec![T::zero(); inner];
                for chunk in g.data().chunks(inner.max(1)) {
                    for (s, &v) in acc.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                vec![t(&inner_shape, acc)]
            })
        })
    }

    /// Row-wise select: row `i` of a `[B, d]` tensor where `use_self[i]`, otherwise `fallback[d]`.
    pub fn where_rows(&self, fallback: &Var<'t, T>, use_self: &[bool]) -> Result<Var<'t, T>> {
        same_tape(self, fallback);
        let (a, f) = (self.value(), fallback.value());
        let s = a.shape().to_vec();
        if s.len() != 2 || s[0] != use_self.len() || f.shape() != [s[1]] {
            return shape_err(format!("where_rows: {:?} / fallback {:?} / {} flags", s, f.shape(), use_self.len()));
        }
        let d = s[1];
        let mut out = Vec::with_capacity(a.len());
        for (i, &keep) in use_self.iter().enumerate() {
            if keep {
                out.extend_from_slice(&a.data()[i * d..(i + 1) * d]);
            } else {
                out.extend_from_slice(f.data());
            }
        }
        let value = t(&s, out);
        let flags: Vec<bool> = use_self.to_vec();
        Ok(self.tape.push(value, vec![self.id, fallback.id], || {
            boxed(move |g: &Tensor<T>| {
                let mut ga = vec![T::zero(); g.len()];
                let mut gf = vec![T::zero(); d];
                for (i, &keep) in flags.iter().enumerate() {
                    let gi = &g.data()[i * d..(i + 1) * d];
                    if keep {
                        ga[i * d..(i + 1) * d].copy_from_slice(gi);
                    } else {
                        for (acc, &v) in gf.iter_mut().zip(gi) {
                            *acc += v;
                        }
                    }
                }
                vec![t(&s, ga), t(&[d], gf)]
            })
        }))
    }

    /// Softmax over the last axis restricted to valid positions.
    ///
    /// See [`softmax_masked_values`] for the mask layout. With
    /// `allow_all_masked`, a row without valid positions yields all zeros
    /// instead of [`Error::AllMaskedRow`].
    pub fn softmax_masked(&self, valid: &[bool], allow_all_masked: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let p = Rc::new(softmax_masked_values(&x, valid, allow_all_masked)?);
        let n = x.last_dim();
        let value = (*p).clone();
        Ok(self.unary(value, || {
            boxed(move |g: &Tensor<T>| {
                let mut gx = vec![T::zero(); g.len()];
                for ((pr, gr), out) in p.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        out[j] = pr[j] * (gr[j] - dot);
                    }
                }
                vec![t(p.shape(), gx)]
            })
        }))
    }

    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let n = self.value().last_dim();
        self.softmax_masked(&vec![true; n], false)
    }

    pub fn layer_norm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        same_tape(self, gain);
        same_tape(self, bias);
        let (x, gn, bs) = (self.value(), gain.value(), bias.value());
        let value = layer_norm_values(&x, gn.data(), bs.data(), eps)?;
        let d = x.last_dim();
        Ok(self.tape.push(value, vec![self.id, gain.id, bias.id], || {
            boxed(move |g: &Tensor<T>| {
                let mut gx = vec![T::zero(); x.len()];
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                let df = T::c(d as f64);
                for ((row, grow), out) in x.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let (mean, inv) = row_stats(row, eps);
                    let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dy: Vec<T> = grow.iter().zip(gn.data()).map(|(&a, &b)| a * b).collect();
                    let mean_dy = dy.iter().copied().sum::<T>() / df;
                    let mean_dyx = dy.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / df;
                    for j in 0..d {
                        out[j] = inv * (dy[j] - mean_dy - xhat[j] * mean_dyx);
                        ggain[j] += grow[j] * xhat[j];
                        gbias[j] += grow[j];
                    }
                }
                vec![t(x.shape(), gx), t(&[d], ggain), t(&[d], gbias)]
            })
        }))
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let x = self.value();
        let value = t(x.shape(), x.data().iter().map(|&v| gelu_value(v)).collect());
        self.unary(value, || {
            boxed(move |g: &Tensor<T>| {
                let data = g.data().iter().zip(x.data()).map(|(&u, &v)| u * gelu_grad(v)).collect();
                vec![t(x.shape(), data)]
            })
        })
    }

    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar(x.data().iter().copied().sum());
        self.unary(value, || boxed(move |g: &Tensor<T>| vec![Tensor::full(&shape, g.item())]))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::c(self.value().len().max(1) as f64);
        self.sum().scale(T::one() / n)
    }

    /// Per-feature numeric tokens: `out[b, j, :] = bias[j, :] + x[b, j] * weight[j, :]`.
    pub fn feature_tokens(&self, weight: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, weight);
        same_tape(self, bias);
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let sx = x.shape().to_vec();
        if sx.len() != 2 || w.rank() != 2 || w.shape()[0] != sx[1] || w.shape() != b.shape() {
            return shape_err(format!("feature_tokens: x {:?}, weight {:?}, bias {:?}", sx, w.shape(), b.shape()));
        }
        let (bs, n, d) = (sx[0], sx[1], w.shape()[1]);
        let mut out = Vec::with_capacity(bs * n * d);
        for i in 0..bs {
            for j in 0..n {
                let xv = x.data()[i * n + j];
                let wr = &w.data()[j * d..(j + 1) * d];
                let br = &b.data()[j * d..(j + 1) * d];
                out.extend(wr.iter().zip(br).map(|(&wv, &bv)| bv + xv * wv));
            }
        }
        let value = t(&[bs, n, d], out);
        Ok(self.tape.push(value, vec![self.id, weight.id, bias.id], || {
            boxed(move |g: &Tensor<T>| {
                let mut gx = vec![T::zero(); bs * n];
                let mut gw = vec![T::zero(); n * d];
                let mut gb = vec![T::zero(); n * d];
                for i in 0..bs {
                    for j in 0..n {
                        let xv = x.data()[i * n + j];
                        let gr = &g.data()[(i * n + j) * d..(i * n + j + 1) * d];
                        let wr = &w.data()[j * d..(j + 1) * d];
                        gx[i * n + j] = gr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
                        for k in 0..d {
                            gw[j * d + k] += gr[k] * xv;
                            gb[j * d + k] += gr[k];
                        }
                    }
                }
                vec![t(&[bs, n], gx), t(&[n, d], gw), t(&[n, d], gb)]
            })
        }))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&self, indices: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        if table.rank() != 2 {
            return shape_err(format!("embedding table must be rank 2, got {:?}", table.shape()));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Schema(format!("embedding index {bad} out of range for {v} rows")));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let value = t(&[indices.len(), d], out);
        let idx = indices.to_vec();
        Ok(self.unary(value, || {
            boxed(move |g: &Tensor<T>| {
                let mut gt = vec![T::zero(); v * d];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..d {
                        gt[i * d + k] += g.data()[r * d + k];
                    }
                }
                vec![t(&[v, d], gt)]
            })
        }))
    }

    /// Mean of valid members of each token group: `[B, m, d]` to `[B, G, d]`.
    ///
    /// `valid` has length `B*m`. A group without valid members yields zeros.
    /// Returns the pooled tensor and the per-(batch, group) validity.
    pub fn pool_groups(&self, groups: &[Vec<usize>], valid: &[bool]) -> Result<(Var<'t, T>, Vec<bool>)> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 3 || valid.len() != s[0] * s[1] || groups.iter().flatten().any(|&j| j >= s[1]) {
            return shape_err(format!("pool_groups on {:?} with {} flags", s, valid.len()));
        }
        let (bs, m, d) = (s[0], s[1], s[2]);
        let ng = groups.len();
        let mut out = vec![T::zero(); bs * ng * d];
        let mut counts = vec![0usize; bs * ng];
        for b in 0..bs {
            for (gi, members) in groups.iter().enumerate() {
                let o = &mut out[(b * ng + gi) * d..(b * ng + gi + 1) * d];
                let mut c = 0;
                for &j in members {
                    if valid[b * m + j] {
                        c += 1;
                        let row = &x.data()[(b * m + j) * d..(b * m + j + 1) * d];
                        for (acc, &v) in o.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if c > 0 {
                    let inv = T::one() / T::c(c as f64);
                    o.iter_mut().for_each(|v| *v *= inv);
                }
                counts[b * ng + gi] = c;
            }
        }
        let pooled_valid: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
        let value = t(&[bs, ng, d], out);
        let groups = groups.to_vec();
        let valid = valid.to_vec();
        let var = self.unary(value, || {
            boxed(move |g: &Tensor<T>| {
                let mut gx = vec![T::zero(); bs * m * d];
                for b in 0..bs {
                    for (gi, members) in groups.iter().enumerate() {
                        let c = counts[b * ng + gi];
                        if c == 0 {
                            continue;
                        }
                        let inv = T::one() / T::c(c as f64);
                        let gr = &g.data()[(b * ng + gi) * d..(b * ng + gi + 1) * d];
                        for &j in members {
                            if valid[b * m + j] {
                                let o = &mut gx[(b * m + j) * d..(b * m + j + 1) * d];
                                for (acc, &v) in o.iter_mut().zip(gr) {
                                    *acc += v * inv;
                                }
                            }
                        }
                    }
                }
                vec![t(&s, gx)]
            })
        });
        Ok((var, pooled_valid))
    }

    /// Average pooling of `[B, X, Y, Z]` volumes over a `cells³` grid, giving `[B, cells³]`.
    pub fn avg_pool3d(&self, cells: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let s = v.shape().to_vec();
        if s.len() != 4 || cells == 0 || s[1..].iter().any(|&n| n < cells) {
            return shape_err(format!("avg_pool3d({cells}) on {:?}", s));
        }
        let (bs, nx, ny, nz) = (s[0], s[1], s[2], s[3]);
        let (bx, by, bz) = (pool_bounds(nx, cells), pool_bounds(ny, cells), pool_bounds(nz, cells));
        let nc = cells * cells * cells;
        let cell_iter = move || {
            let (bx, by, bz) = (bx.clone(), by.clone(), bz.clone());
            (0..nc).map(move |c| {
                let (i, j, k) = (c / (cells * cells), (c / cells) % cells, c % cells);
                (bx[i], by[j], bz[k])
            })
        };
        let vol = nx * ny * nz;
        let mut out = Vec::with_capacity(bs * nc);
        for b in 0..bs {
            let data = &v.data()[b * vol..(b + 1) * vol];
            for ((x0, x1), (y0, y1), (z0, z1)) in cell_iter() {
                let mut sum = T::zero();
                for x in x0..x1 {
                    for y in y0..y1 {
                        for z in z0..z1 {
                            sum += data[(x * ny + y) * nz + z];
                        }
                    }
                }
                out.push(sum / T::c(((x1 - x0) * (y1 - y0) * (z1 - z0)) as f64));
            }
        }
        let value = t(&[bs, nc], out);
        Ok(self.unary(value, || {
            boxed(move |g: &Tensor<T>| {
                let mut gv = vec![T::zero(); bs * vol];
                for b in 0..bs {
                    for (c, ((x0, x1), (y0, y1), (z0, z1))) in cell_iter().enumerate() {
                        let share = g.data()[b * nc + c] / T::c(((x1 - x0) * (y1 - y0) * (z1 - z0)) as f64);
                        for x in x0..x1 {
                            for y in y0..y1 {
                                for z in z0..z1 {
                                    gv[b * vol + (x * ny + y) * nz + z] = share;
                                }
                            }
                        }
                    }
                }
                vec![t(&s, gv)]
            })
        }))
    }

    /// Mean class-weighted focal loss of `[B, C]` logits.
    ///
    /// Per sample: `-w[y] * (1 - p_y)^gamma * ln(max(p_y, PROB_FLOOR))` with `p = softmax(logits)`.
    pub fn focal_loss(&self, labels: &[usize], class_weights: &[T], gamma: T) -> Result<Var<'t, T>> {
        let z = self.value();
        let s = z.shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[1] != class_weights.len() || labels.is_empty() {
            return shape_err(format!(
                "focal_loss: logits {:?}, {} labels, {} weights",
                s,
                labels.len(),
                class_weights.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return shape_err(format!("focal_loss: label {bad} out of range"));
        }
        let (bs, c) = (s[0], s[1]);
        let probs = softmax_masked_values(&z, &vec![true; c], false)?;
        let floor = T::c(PROB_FLOOR);
        let mut total = T::zero();
        let mut clamped = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            let p = probs.data()[i * c + y];
            if p < floor {
                clamped += 1;
            }
            total += -class_weights[y] * (T::one() - p).powf(gamma) * p.max(floor).ln();
        }
        if clamped > 0 {
            log::warn!("focal loss clamped {clamped} target probabilities at {PROB_FLOOR:e}");
        }
        let inv_b = T::one() / T::c(bs as f64);
        let value = Tensor::scalar(total * inv_b);
        let labels = labels.to_vec();
        let weights = class_weights.to_vec();
        Ok(self.unary(value, || {
            boxed(move |g: &Tensor<T>| {
                let up = g.item() * inv_b;
                let mut gz = vec![T::zero(); bs * c];
                for (i, &y) in labels.iter().enumerate() {
                    let pr = &probs.data()[i * c..(i + 1) * c];
                    let p = pr[y];
                    let dl_dp = focal_dl_dp(p, weights[y], gamma);
                    for j in 0..c {
                        let delta = if j == y { T::one() } else { T::zero() };
                        gz[i * c + j] = up * dl_dp * p * (delta - pr[j]);
                    }
                }
                vec![t(&[bs, c], gz)]
            })
        }))
    }
}

/// Derivative of `-w (1-p)^gamma ln(max(p, floor))` with respect to `p`.
fn focal_dl_dp<T: Scalar>(p: T, w: T, gamma: T) -> T {
    let floor = T::c(PROB_FLOOR);
    let q = T::one() - p;
    let pc = p.max(floor);
    let decay = if gamma == T::zero() || q <= T::zero() { T::zero() } else { gamma * q.powf(gamma - T::one()) * pc.ln() };
    let log_term = if p < floor { T::zero() } else { q.powf(gamma) / pc };
    -w * (log_term - decay)
}

/// Concatenates variables along `axis`; all other dimensions must agree.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| {
        same_tape(first, p);
        p.value()
    }).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return shape_err(format!("concat axis {axis} out of range for {:?}", base));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return shape_err(format!("concat: {:?} incompatible with {:?}", s, base));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
    let total_w: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total_w);
    for o in 0..outer {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    let value = t(&shape, out);
    Ok(tape.push(value, parts.iter().map(|p| p.id).collect(), || {
        boxed(move |g: &Tensor<T>| {
            let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
            for o in 0..outer {
                let mut off = o * total_w;
                for (gv, &w) in grads.iter_mut().zip(&widths) {
                    gv.extend_from_slice(&g.data()[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().zip(&shapes).map(|(d, s)| t(s, d)).collect()
        })
    }))
}

fn swap12<T: Scalar>(x: &[T], a: usize, b: usize, c: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}
