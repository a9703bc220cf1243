//! Elementwise, reduction, layout and matrix ops.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{gemm, numel, split_axis, Element, Tensor};
use crate::error::{shape_err, Result};

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Strides of a row-major layout.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (laid out as `shape`) into the axis order `perm`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    let last = rank - 1;
    let (inner_n, inner_s) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if inner_s == 1 {
            out.extend_from_slice(&src[base..base + inner_n]);
        } else {
            out.extend((0..inner_n).map(|i| src[base + i * inner_s]));
        }
        // advance the multi-index over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Element> Tensor<T> {
    fn zip_op(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        back: impl Fn(&[T], &[T], &[T], &[bool]) -> super::InputGrads<T> + 'static,
    ) -> Result<Tensor<T>> {
        same_shape(op, self, other)?;
        let data: Vec<T> = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let (sa, sb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            op,
            &[self, other],
            move |g, needs| back(g, &sa.data(), &sb.data(), needs),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_op(
            other,
            "add",
            |a, b| a + b,
            |g, _, _, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.to_vec()),
                ]
            },
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_op(
            other,
            "sub",
            |a, b| a - b,
            |g, _, _, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|&v| -v).collect()),
                ]
            },
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_op(
            other,
            "mul",
            |a, b| a * b,
            |g, a, b, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect()),
                ]
            },
        )
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_op(
            other,
            "div",
            |a, b| a / b,
            |g, a, b, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b).map(|(&g, &b)| g / b).collect()),
                    needs[1].then(|| {
                        g.iter()
                            .zip(a.iter().zip(b))
                            .map(|(&g, (&a, &b))| -g * a / (b * b))
                            .collect()
                    }),
                ]
            },
        )
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let src = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), op, &[self], move |g, _| {
            let x = src.data();
            vec![Some(g.iter().zip(x.iter()).map(|(&g, &x)| g * df(x)).collect())]
        })
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.unary("scale", |x| x * s, move |_| s)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.unary("add_scalar", |x| x + s, |_| T::one())
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x| x + x)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Tensor<T> {
        self.unary(
            "gelu",
            |x| T::cast(gelu_f64(x.wide())),
            |x| T::cast(gelu_grad_f64(x.wide())),
        )
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary("ln", |x| x.ln(), |x| x.recip())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |x| x.exp())
    }

    /// Clamp into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let total: f64 = self.data().iter().map(|v| v.wide()).sum();
        let n = self.numel();
        Tensor::from_op(vec![T::cast(total)], vec![1], "sum", &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let total: f64 = self.data().iter().map(|v| v.wide()).sum();
        Tensor::from_op(
            vec![T::cast(total / n as f64)],
            vec![1],
            "mean",
            &[self],
            move |g, _| vec![Some(vec![T::cast(g[0].wide() / n as f64); n])],
        )
    }

    /// Sums over every axis except `axis`; result has shape `[shape[axis]]`.
    pub fn sum_except(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(shape_err!("sum_except: axis {axis} out of range for {:?}", self.shape()));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut acc = vec![0f64; n];
        {
            let x = self.data();
            for o in 0..outer {
                for (c, a) in acc.iter_mut().enumerate() {
                    let base = (o * n + c) * inner;
                    *a += x[base..base + inner].iter().map(|v| v.wide()).sum::<f64>();
                }
            }
        }
        let total = self.numel();
        Ok(Tensor::from_op(
            acc.into_iter().map(T::cast).collect(),
            vec![n],
            "sum_except",
            &[self],
            move |g, _| {
                let mut out = vec![T::zero(); total];
                for o in 0..outer {
                    for (c, &gc) in g.iter().enumerate() {
                        let base = (o * n + c) * inner;
                        out[base..base + inner].fill(gc);
                    }
                }
                vec![Some(out)]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            &[self],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for rank {rank}"));
        }
        let shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(&self.data(), &shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op(data, out_shape, "permute", &[self], move |g, _| {
            vec![Some(permute_data(g, &grad_shape, &inverse))]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {:?}", self.shape()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Batched matrix product over matching leading axes:
    /// `[..., M, K] × [..., K, N] → [..., M, N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.batched_matmul(other, false)
    }

    /// `self × otherᵀ` with `other` laid out as `[..., N, K]`.
    pub fn matmul_t(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.batched_matmul(other, true)
    }

    fn batched_matmul(&self, other: &Tensor<T>, b_t: bool) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let err = || {
            shape_err!(
                "matmul{}: incompatible shapes {sa:?} and {sb:?}",
                if b_t { "_t" } else { "" }
            )
        };
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if b_t { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (a, b) = (self.data(), other.data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a[i * m * k..],
                    false,
                    &b[i * k * n..],
                    b_t,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let (ta, tb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            shape,
            if b_t { "matmul_t" } else { "matmul" },
            &[self, other],
            move |g, needs| {
                let (a, b) = (ta.data(), tb.data());
                let ga = needs[0].then(|| {
                    // dA = dC · Bᵀ  (or dC · B when B is stored transposed)
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &b[i * k * n..],
                            !b_t,
                            &mut ga[i * m * k..],
                            false,
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        if b_t {
                            // dB[N×K] = dCᵀ · A
                            gemm(n, m, k, &g[i * m * n..], true, &a[i * m * k..], false, &mut gb[i * k * n..], false);
                        } else {
                            // dB[K×N] = Aᵀ · dC
                            gemm(k, m, n, &a[i * m * k..], true, &g[i * m * n..], false, &mut gb[i * k * n..], false);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Affine map over the last axis: `x · Wᵀ + b` with `W` shaped
    /// `[out, in]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let ws = weight.shape();
        let xs = self.shape();
        let cin = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != cin {
            return Err(shape_err!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let cout = ws[0];
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_err!("linear: bias {:?} for {cout} outputs", b.shape()));
            }
        }
        let rows = self.numel() / cin;
        let mut out = vec![T::zero(); rows * cout];
        {
            let (x, w) = (self.data(), weight.data());
            gemm(rows, cin, cout, &x, false, &w, true, &mut out, false);
            if let Some(b) = bias {
                let b = b.data();
                for row in out.chunks_exact_mut(cout) {
                    row.iter_mut().zip(b.iter()).for_each(|(o, &b)| *o = *o + b);
                }
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = cout;
        let (tx, tw) = (self.clone(), weight.clone());
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(out, shape, "linear", &inputs, move |g, needs| {
            let mut grads = Vec::with_capacity(3);
            grads.push(needs[0].then(|| {
                let mut gx = vec![T::zero(); rows * cin];
                gemm(rows, cout, cin, g, false, &tw.data(), false, &mut gx, false);
                gx
            }));
            grads.push(needs[1].then(|| {
                let mut gw = vec![T::zero(); cout * cin];
                gemm(cout, rows, cin, g, true, &tx.data(), false, &mut gw, false);
                gw
            }));
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut acc = vec![0f64; cout];
                    for row in g.chunks_exact(cout) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.wide());
                    }
                    acc.into_iter().map(T::cast).collect()
                }));
            }
            grads
        }))
    }

    /// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(shape_err!("softmax: axis {axis} out of range for {:?}", self.shape()));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut out = vec![T::zero(); self.numel()];
        {
            let x = self.data();
            let mut buf = vec![0f64; n];
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + r;
                    let max = (0..n).map(|i| x[at(i)].wide()).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b = (x[at(i)].wide() - max).exp();
                        total += *b;
                    }
                    for (i, b) in buf.iter().enumerate() {
                        out[at(i)] = T::cast(b / total);
                    }
                }
            }
        }
        let saved = out.clone();
        Ok(Tensor::from_op(out, self.shape().to_vec(), "softmax", &[self], move |g, _| {
            let mut gx = vec![T::zero(); saved.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + r;
                    let dot: f64 = (0..n).map(|i| g[at(i)].wide() * saved[at(i)].wide()).sum();
                    for i in 0..n {
                        let y = saved[at(i)].wide();
                        gx[at(i)] = T::cast(y * (g[at(i)].wide() - dot));
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(tensors: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = tensors
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(shape_err!("concat: axis {axis} out of range for rank {rank}"));
        }
        for t in tensors {
            let ok = t.rank() == rank
                && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(shape_err!(
                    "concat along {axis}: {:?} incompatible with {:?}",
                    t.shape(),
                    first.shape()
                ));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        {
            let datas: Vec<_> = tensors.iter().map(|t| t.data()).collect();
            for o in 0..outer {
                for (d, &w) in datas.iter().zip(&widths) {
                    out.extend_from_slice(&d[o * w..(o + 1) * w]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = row / inner;
        Ok(Tensor::from_op(out, shape, "concat", tensors, move |g, needs| {
            let mut offset = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let start = offset;
                    offset += w;
                    need.then(|| {
                        let mut gi = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            gi.extend_from_slice(&g[o * row + start..o * row + start + w]);
                        }
                        gi
                    })
                })
                .collect()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[1., 2., 3., 4.], &[2, 2]);
        let eye = t(&[1., 0., 0., 1.], &[2, 2]);
        assert_eq!(eye.matmul(&a).unwrap().to_vec(), vec![1., 2., 3., 4.]);
        let b = t(&[5., 6., 7., 8.], &[2, 2]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![19., 22., 43., 50.]);
        let z = Tensor::<f64>::zeros(&[2, 2]);
        let any = t(&[1., -2., 3., 9., 4., 5.], &[2, 3]);
        assert!(z.matmul(&any).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn matmul_t_matches_explicit_transpose() {
        let a = t(&[1., 2., 3., 4., 5., 6.], &[1, 2, 3]);
        let b = t(&[0.5, -1., 2., 1., 0., 3., -2., 1., 1., 4., 4., 0.], &[1, 4, 3]);
        let direct = a.matmul_t(&b).unwrap().to_vec();
        let via = a.matmul(&b.transpose_last().unwrap()).unwrap().to_vec();
        assert_eq!(direct, via);
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[0., 0., 0.], &[3]).softmax(0).unwrap().to_vec();
        s.iter().for_each(|v| assert!((v - 1.0 / 3.0).abs() < 1e-12));
        let s = Tensor::<f32>::from_f64(&[1000., 0., 0.], &[3]).unwrap().softmax(0).unwrap().to_vec();
        assert!((s[0] - 1.0).abs() < 1e-6 && s[1] < 1e-30 && s.iter().all(|v| v.is_finite()));
        let s = t(&[1f64.ln(), 2f64.ln(), 3f64.ln()], &[3]).softmax(0).unwrap().to_vec();
        for (v, e) in s.iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn activations() {
        let x = t(&[-3., 0., 3., 1.], &[4]);
        assert_eq!(x.relu().to_vec(), vec![0., 0., 3., 1.]);
        let g = x.gelu().to_vec();
        assert_eq!(g[1], 0.0);
        // Φ(1) from the standard normal table
        assert!((g[3] - 0.841_344_746).abs() < 1e-8);
    }

    #[test]
    fn permute_roundtrip_and_values() {
        let x = t(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 3, 4]);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] == x[i, j, k]
        let (pd, xd) = (p.to_vec(), x.to_vec());
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(pd[(k * 2 + i) * 3 + j], xd[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_sum_except() {
        let a = t(&[1., 2., 3., 4.], &[1, 2, 2]);
        let b = t(&[5., 6.], &[1, 1, 2]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 3, 2]);
        assert_eq!(c.to_vec(), vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(c.sum_except(1).unwrap().to_vec(), vec![3., 7., 11.]);
        assert!(Tensor::concat(&[&a, &t(&[1., 2., 3.], &[1, 1, 3])], 1).is_err());
    }
}
