use super::{Element, Tensor};
use crate::error::{shape_err, Error, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Running statistics tracked by batch normalization.
pub struct RunningStats<'a, T: Element> {
    pub mean: &'a Tensor<T>,
    pub var: &'a Tensor<T>,
}

impl<T: Element> Tensor<T> {
    /// Per-channel batch normalization of `[B, C, H, W]`.
    ///
    /// Training mode normalizes with the biased batch variance and folds the
    /// unbiased variance into the running estimate; eval mode uses the
    /// running estimates only.
    pub fn batchnorm2d(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running: RunningStats<'_, T>,
        training: bool,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(shape_err!("batchnorm2d: expected [B, C, H, W], got {xs:?}"));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        for (name, t) in [("gamma", gamma), ("beta", beta), ("running mean", running.mean), ("running var", running.var)] {
            if t.shape() != [c] {
                return Err(shape_err!("batchnorm2d: {name} {:?} for {c} channels", t.shape()));
            }
        }
        let n = b * hw;
        if training && n < 2 {
            return Err(Error::Degenerate(format!(
                "batchnorm2d needs at least 2 values per channel in training, got {n}"
            )));
        }
        let x = self.data();
        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            let mut mean = vec![0f64; c];
            let mut sq = vec![0f64; c];
            for bi in 0..b {
                for ch in 0..c {
                    let plane = &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                    mean[ch] += plane.iter().map(|v| v.wide()).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for bi in 0..b {
                for ch in 0..c {
                    let plane = &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                    sq[ch] += plane.iter().map(|v| (v.wide() - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
            {
                let mut rm = running.mean.data_mut();
                let mut rv = running.var.data_mut();
                let m = BATCH_NORM_MOMENTUM;
                for ch in 0..c {
                    rm[ch] = T::cast((1.0 - m) * rm[ch].wide() + m * mean[ch]);
                    let unbiased = sq[ch] / (n - 1) as f64;
                    rv[ch] = T::cast((1.0 - m) * rv[ch].wide() + m * unbiased);
                }
            }
            (mean, var)
        } else {
            (running.mean.to_f64_vec(), running.var.to_f64_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let (gd, bd) = (gamma.to_f64_vec(), beta.to_f64_vec());
        let mut xhat = vec![0f64; x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let nx = (x[i].wide() - mean[ch]) * inv_std[ch];
                    xhat[i] = nx;
                    out[i] = T::cast(gd[ch] * nx + bd[ch]);
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            xs.to_vec(),
            "batchnorm2d",
            &[self, gamma, beta],
            move |g, needs| {
                let mut sum_g = vec![0f64; c];
                let mut sum_gx = vec![0f64; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            let gv = g[i].wide();
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * xhat[i];
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            let scale = gd[ch] * inv_std[ch];
                            for i in base..base + hw {
                                let v = if training {
                                    scale
                                        * (g[i].wide()
                                            - sum_g[ch] / n as f64
                                            - xhat[i] * sum_gx[ch] / n as f64)
                                } else {
                                    scale * g[i].wide()
                                };
                                gx[i] = T::cast(v);
                            }
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    needs[1].then(|| sum_gx.iter().map(|&v| T::cast(v)).collect()),
                    needs[2].then(|| sum_g.iter().map(|&v| T::cast(v)).collect()),
                ]
            },
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&self, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        let c = *self.shape().last().unwrap();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err!(
                "layernorm: gamma {:?} / beta {:?} for last axis {c}",
                gamma.shape(),
                beta.shape()
            ));
        }
        let rows = self.numel() / c;
        let (gd, bd) = (gamma.to_f64_vec(), beta.to_f64_vec());
        let mut xhat = vec![0f64; rows * c];
        let mut inv_std = vec![0f64; rows];
        let mut out = vec![T::zero(); rows * c];
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * c..(r + 1) * c];
                let mean = row.iter().map(|v| v.wide()).sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v.wide() - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[r] = is;
                for (j, v) in row.iter().enumerate() {
                    let nx = (v.wide() - mean) * is;
                    xhat[r * c + j] = nx;
                    out[r * c + j] = T::cast(gd[j] * nx + bd[j]);
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "layernorm",
            &[self, gamma, beta],
            move |g, needs| {
                let mut ggamma = vec![0f64; c];
                let mut gbeta = vec![0f64; c];
                let mut gx = needs[0].then(|| vec![T::zero(); rows * c]);
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..c {
                        let gv = gr[j].wide();
                        ggamma[j] += gv * xr[j];
                        gbeta[j] += gv;
                        let dxh = gv * gd[j];
                        s1 += dxh;
                        s2 += dxh * xr[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        for j in 0..c {
                            let dxh = gr[j].wide() * gd[j];
                            gx[r * c + j] =
                                T::cast(inv_std[r] * (dxh - s1 / c as f64 - xr[j] * s2 / c as f64));
                        }
                    }
                }
                vec![
                    gx,
                    needs[1].then(|| ggamma.into_iter().map(T::cast).collect()),
                    needs[2].then(|| gbeta.into_iter().map(T::cast).collect()),
                ]
            },
        ))
    }
}
