//! Spatial ops on `[B, C, H, W]` tensors: grouped 2-D convolution,
//! non-overlapping transposed convolution and bilinear ×2 upsampling.

use super::{gemm, Element, Tensor};
use crate::error::{shape_err, Error, Result};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds `x` (`cin×h×w`) into `col` (`cin·k·k × ho·wo`).
fn im2col<T: Element>(x: &[T], g: Geom, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im<T: Element>(col: &[T], g: Geom, dx: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: Geom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

impl<T: Element> Tensor<T> {
    /// Grouped 2-D convolution with zero padding. `weight` is
    /// `[C_out, C_in / groups, K, K]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: Conv2dSpec,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err!("conv2d: input {xs:?} and weight {ws:?} must be rank 4"));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d: {cin} input / {cout} output channels not divisible into {groups} groups"
            )));
        }
        if k == 0 || spec.stride == 0 {
            return Err(Error::Config("conv2d: kernel and stride must be >= 1".into()));
        }
        if ws[3] != k || cin_g != cin / groups {
            return Err(shape_err!(
                "conv2d: weight {ws:?} does not match {cin} input channels in {groups} groups"
            ));
        }
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return Err(shape_err!("conv2d: bias {:?} for {cout} channels", bt.shape()));
            }
        }
        let (Some(ho), Some(wo)) = (
            conv_out_len(h, k, spec.stride, spec.padding),
            conv_out_len(w, k, spec.stride, spec.padding),
        ) else {
            return Err(shape_err!(
                "conv2d: input {h}x{w} smaller than kernel {k} after padding {}",
                spec.padding
            ));
        };
        let geom = Geom {
            cin: cin_g,
            h,
            w,
            k,
            stride: spec.stride,
            pad: spec.padding,
            ho,
            wo,
        };
        let cout_g = cout / groups;
        let depthwise = cin_g == 1 && cout_g == 1;
        let mut out = vec![T::zero(); b * cout * ho * wo];
        {
            let x = self.data();
            let wt = weight.data();
            if depthwise {
                depthwise_forward(&x, &wt, &mut out, b * cin, geom);
            } else {
                let mut col = vec![T::zero(); if is_pointwise(geom) { 0 } else { geom.col_rows() * geom.col_cols() }];
                for bi in 0..b {
                    for gi in 0..groups {
                        let xin = &x[(bi * cin + gi * cin_g) * h * w..];
                        let src: &[T] = if is_pointwise(geom) {
                            &xin[..cin_g * h * w]
                        } else {
                            im2col(xin, geom, &mut col);
                            &col
                        };
                        let wg = &wt[gi * cout_g * geom.col_rows()..];
                        let dst = &mut out[(bi * cout + gi * cout_g) * ho * wo..];
                        gemm(cout_g, geom.col_rows(), ho * wo, wg, false, src, false, dst, false);
                    }
                }
            }
            if let Some(bt) = bias {
                let bd = bt.data();
                for plane in 0..b * cout {
                    let v = bd[plane % cout];
                    out[plane * ho * wo..(plane + 1) * ho * wo]
                        .iter_mut()
                        .for_each(|o| *o = *o + v);
                }
            }
        }
        let (tx, tw) = (self.clone(), weight.clone());
        let mut inputs = vec![self, weight];
        if let Some(bt) = bias {
            inputs.push(bt);
        }
        let has_bias = bias.is_some();
        let hw_out = ho * wo;
        Ok(Tensor::from_op(
            out,
            vec![b, cout, ho, wo],
            "conv2d",
            &inputs,
            move |g, needs| {
                let x = tx.data();
                let wt = tw.data();
                let mut gx = needs[0].then(|| vec![T::zero(); b * cin * h * w]);
                let mut gw = needs[1].then(|| vec![T::zero(); wt.len()]);
                if depthwise {
                    depthwise_backward(&x, &wt, g, gx.as_deref_mut(), gw.as_deref_mut(), b * cin, geom);
                } else {
                    let rows = geom.col_rows();
                    let mut col = vec![T::zero(); rows * hw_out];
                    for bi in 0..b {
                        for gi in 0..groups {
                            let x_off = (bi * cin + gi * cin_g) * h * w;
                            let gy = &g[(bi * cout + gi * cout_g) * hw_out..];
                            let w_off = gi * cout_g * rows;
                            if let Some(gw) = gw.as_mut() {
                                // dW = dY · colᵀ
                                let src: &[T] = if is_pointwise(geom) {
                                    &x[x_off..x_off + cin_g * h * w]
                                } else {
                                    im2col(&x[x_off..], geom, &mut col);
                                    &col
                                };
                                gemm(cout_g, hw_out, rows, gy, false, src, true, &mut gw[w_off..], true);
                            }
                            if let Some(gx) = gx.as_mut() {
                                // dcol = Wᵀ · dY
                                if is_pointwise(geom) {
                                    gemm(rows, cout_g, hw_out, &wt[w_off..], true, gy, false, &mut gx[x_off..], true);
                                } else {
                                    gemm(rows, cout_g, hw_out, &wt[w_off..], true, gy, false, &mut col, false);
                                    col2im(&col, geom, &mut gx[x_off..]);
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let mut acc = vec![0f64; cout];
                        for (plane, chunk) in g.chunks_exact(hw_out).enumerate() {
                            acc[plane % cout] += chunk.iter().map(|v| v.wide()).sum::<f64>();
                        }
                        acc.into_iter().map(T::cast).collect()
                    }));
                }
                grads
            },
        ))
    }

    /// Non-overlapping transposed convolution (kernel == stride == `factor`),
    /// the learned "up-convolution". `weight` is `[C_in, C_out, f, f]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        factor: usize,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != factor || ws[3] != factor {
            return Err(shape_err!(
                "conv_transpose2d: input {xs:?} incompatible with weight {ws:?} at factor {factor}"
            ));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[1];
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return Err(shape_err!("conv_transpose2d: bias {:?}", bt.shape()));
            }
        }
        let f = factor;
        let rows = cout * f * f;
        let hw = h * w;
        let (ho, wo) = (h * f, w * f);
        let mut out = vec![T::zero(); b * cout * ho * wo];
        let mut tmp = vec![T::zero(); rows * hw];
        {
            let x = self.data();
            let wt = weight.data();
            let bd = bias.map(|bt| bt.to_vec());
            for bi in 0..b {
                gemm(rows, cin, hw, &wt, true, &x[bi * cin * hw..], false, &mut tmp, false);
                for co in 0..cout {
                    let add = bd.as_ref().map_or(T::zero(), |v| v[co]);
                    for a in 0..f {
                        for c in 0..f {
                            let src = &tmp[((co * f + a) * f + c) * hw..];
                            for i in 0..h {
                                for j in 0..w {
                                    out[((bi * cout + co) * ho + i * f + a) * wo + j * f + c] =
                                        src[i * w + j] + add;
                                }
                            }
                        }
                    }
                }
            }
        }
        let (tx, tw) = (self.clone(), weight.clone());
        let mut inputs = vec![self, weight];
        if let Some(bt) = bias {
            inputs.push(bt);
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            out,
            vec![b, cout, ho, wo],
            "conv_transpose2d",
            &inputs,
            move |g, needs| {
                let x = tx.data();
                let wt = tw.data();
                let mut gx = needs[0].then(|| vec![T::zero(); b * cin * hw]);
                let mut gw = needs[1].then(|| vec![T::zero(); wt.len()]);
                let mut dtmp = vec![T::zero(); rows * hw];
                for bi in 0..b {
                    for co in 0..cout {
                        for a in 0..f {
                            for c in 0..f {
                                let dst = &mut dtmp[((co * f + a) * f + c) * hw..];
                                for i in 0..h {
                                    for j in 0..w {
                                        dst[i * w + j] =
                                            g[((bi * cout + co) * ho + i * f + a) * wo + j * f + c];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(cin, rows, hw, &wt, false, &dtmp, false, &mut gx[bi * cin * hw..], false);
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(cin, hw, rows, &x[bi * cin * hw..], false, &dtmp, true, gw, true);
                    }
                }
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let mut acc = vec![0f64; cout];
                        for (plane, chunk) in g.chunks_exact(ho * wo).enumerate() {
                            acc[plane % cout] += chunk.iter().map(|v| v.wide()).sum::<f64>();
                        }
                        acc.into_iter().map(T::cast).collect()
                    }));
                }
                grads
            },
        ))
    }

    /// Bilinear ×2 upsampling with half-pixel centres (`align_corners =
    /// false`), edge-clamped.
    pub fn upsample2x_bilinear(&self) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(shape_err!("upsample: expected [B, C, H, W], got {xs:?}"));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let ty = bilinear_taps(h, ho);
        let tx = bilinear_taps(w, wo);
        let mut out = vec![T::zero(); planes * ho * wo];
        {
            let x = self.data();
            for p in 0..planes {
                let src = &x[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let top = src[y0 * w + x0].wide() * (1.0 - lx) + src[y0 * w + x1].wide() * lx;
                        let bot = src[y1 * w + x0].wide() * (1.0 - lx) + src[y1 * w + x1].wide() * lx;
                        dst[oy * wo + ox] = T::cast(top * (1.0 - ly) + bot * ly);
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![xs[0], xs[1], ho, wo],
            "upsample2x_bilinear",
            &[self],
            move |g, _| {
                let mut gx = vec![0f64; planes * h * w];
                for p in 0..planes {
                    let gsrc = &g[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let v = gsrc[oy * wo + ox].wide();
                            dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                            dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                            dst[y1 * w + x0] += v * ly * (1.0 - lx);
                            dst[y1 * w + x1] += v * ly * lx;
                        }
                    }
                }
                vec![Some(gx.into_iter().map(T::cast).collect())]
            },
        ))
    }
}

/// Source taps `(i0, i1, λ)` for each output index of a half-pixel resize.
fn bilinear_taps(len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn depthwise_forward<T: Element>(x: &[T], w: &[T], out: &mut [T], planes: usize, g: Geom) {
    let channels = w.len() / (g.k * g.k);
    for p in 0..planes {
        let c = p % channels;
        let kern = &w[c * g.k * g.k..(c + 1) * g.k * g.k];
        let src = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        let dst = &mut out[p * g.ho * g.wo..(p + 1) * g.ho * g.wo];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = 0f64;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            acc += kern[ky * g.k + kx].wide() * src[iy as usize * g.w + ix as usize].wide();
                        }
                    }
                }
                dst[oy * g.wo + ox] = T::cast(acc);
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    planes: usize,
    g: Geom,
) {
    let kk = g.k * g.k;
    let channels = w.len() / kk;
    let mut gw_acc = vec![0f64; w.len()];
    for p in 0..planes {
        let c = p % channels;
        let kern = &w[c * kk..(c + 1) * kk];
        let src = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        let grad = &gy[p * g.ho * g.wo..(p + 1) * g.ho * g.wo];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let go = grad[oy * g.wo + ox];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let at = iy as usize * g.w + ix as usize;
                        gw_acc[c * kk + ky * g.k + kx] += go.wide() * src[at].wide();
                        if let Some(gx) = gx.as_deref_mut() {
                            let slot = &mut gx[p * g.h * g.w + at];
                            *slot = *slot + go * kern[ky * g.k + kx];
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        gw.iter_mut().zip(gw_acc).for_each(|(d, v)| *d = T::cast(v));
    }
}
