//! Convolution, pooling and normalisation over `[C, B, H, W]` activations.
//!
//! Channel-major layout lets a whole batch go through a single GEMM per
//! convolution. A 3-D `[C, H, W]` input is treated as a batch of one.

use super::array::Array;
use super::fault::{self, Fault};
use super::gemm::{gemm, View};
use super::tape::{BackwardArgs, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geom {
    c: usize,
    b: usize,
    h: usize,
    w: usize,
}

impl Geom {
    fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [c, h, w] => Ok(Geom { c, b: 1, h, w }),
            [c, b, h, w] => Ok(Geom { c, b, h, w }),
            _ => Err(Error::Dimension(format!(
                "expected [C, B, H, W] or [C, H, W], got {shape:?}"
            ))),
        }
    }

    fn shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.c, self.b, self.h, self.w]
        } else {
            vec![self.c, self.h, self.w]
        }
    }
}

/// Output extent and leading pad under same-style padding.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

#[derive(Clone, Copy)]
struct ConvPlan {
    inp: Geom,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl ConvPlan {
    fn k(&self) -> usize {
        self.inp.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.inp.b * self.out_h * self.out_w
    }

    /// Source offset in the input for (channel, batch, out row, kernel row, ...),
    /// or None inside the padding.
    #[inline]
    fn src_row(&self, oh: usize, ki: usize) -> Option<usize> {
        (oh * self.sh + ki).checked_sub(self.ph).filter(|&r| r < self.inp.h)
    }

    /// Global output rows `(batch, out_row)` per chunk, sized so the column
    /// buffer stays cache resident.
    fn rows_per_chunk(&self) -> usize {
        const CHUNK: usize = 1 << 16;
        (CHUNK / (self.k() * self.out_w).max(1)).max(1)
    }

    /// Columns for global output rows `r0..r1` into `cols` (`k × n`, where
    /// `n = (r1 - r0) * out_w`).
    fn im2col(&self, x: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
        let n = (r1 - r0) * self.out_w;
        let Geom { c, b, h, w } = self.inp;
        for ci in 0..c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for gr in r0..r1 {
                        let (bi, oh) = (gr / self.out_h, gr % self.out_h);
                        let out = &mut dst[(gr - r0) * self.out_w..(gr - r0 + 1) * self.out_w];
                        let Some(r) = self.src_row(oh, ki) else {
                            out.fill(0.0);
                            continue;
                        };
                        let src = &x[((ci * b + bi) * h + r) * w..][..w];
                        let (lo, hi) = self.valid_cols(kj);
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        if lo < hi {
                            let first = lo * self.sw + kj - self.pw;
                            if self.sw == 1 {
                                out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (o, s) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(self.sw)) {
                                    *o = *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output columns `lo..hi` whose tap `kj` lands inside the input row.
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let w = self.inp.w;
        let lo = if self.pw > kj {
            (self.pw - kj).div_ceil(self.sw)
        } else {
            0
        };
        let hi = if w + self.pw > kj {
            ((w - 1 + self.pw - kj) / self.sw + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Scatter-adds columns of rows `r0..r1` back onto the input gradient.
    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, x: &mut [f64]) {
        let n = (r1 - r0) * self.out_w;
        let Geom { c, b, h, w } = self.inp;
        for ci in 0..c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src_row = &cols[row * n..(row + 1) * n];
                    for gr in r0..r1 {
                        let (bi, oh) = (gr / self.out_h, gr % self.out_h);
                        let Some(r) = self.src_row(oh, ki) else { continue };
                        let dst = &mut x[((ci * b + bi) * h + r) * w..][..w];
                        let src = &src_row[(gr - r0) * self.out_w..(gr - r0 + 1) * self.out_w];
                        let (lo, hi) = self.valid_cols(kj);
                        if lo < hi {
                            let first = lo * self.sw + kj - self.pw;
                            if self.sw == 1 {
                                for (d, v) in dst[first..first + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                    *d += v;
                                }
                            } else {
                                for (d, v) in dst[first..].iter_mut().step_by(self.sw).zip(&src[lo..hi]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = self.inp.b * self.out_h;
        let step = self.rows_per_chunk();
        (0..rows).step_by(step).map(move |r0| (r0, (r0 + step).min(rows)))
    }
}

impl<'t> Var<'t> {
    /// Same-padded 2-D cross-correlation; `w` is `[C_out, C_in, kH, kW]`.
    pub fn conv2d(self, w: Var<'t>, stride: (usize, usize)) -> Result<Var<'t>> {
        let prec = self.tape.precision();
        let (plan, c_out, batched, out) = {
            let x = self.value();
            let wv = w.value();
            let inp = Geom::of(x.shape())?;
            let &[c_out, c_in, kh, kw] = wv.shape() else {
                return Err(Error::Dimension(format!(
                    "conv2d weight must be 4-D, got {:?}",
                    wv.shape()
                )));
            };
            if c_in != inp.c {
                return Err(Error::Dimension(format!(
                    "conv2d: input {:?} vs weight {:?}",
                    x.shape(),
                    wv.shape()
                )));
            }
            if stride.0 == 0 || stride.1 == 0 {
                return Err(Error::Dimension("conv2d: zero stride".into()));
            }
            let (out_h, ph) = same_padding(inp.h, kh, stride.0);
            let (out_w, pw) = same_padding(inp.w, kw, stride.1);
            let plan = ConvPlan {
                inp,
                out_h,
                out_w,
                kh,
                kw,
                sh: stride.0,
                sw: stride.1,
                ph,
                pw,
            };
            let (k, p) = (plan.k(), plan.p());
            let mut out = vec![0.0; c_out * p];
            let mut cols = vec![0.0; k * plan.rows_per_chunk() * plan.out_w];
            for (r0, r1) in plan.chunks() {
                let n = (r1 - r0) * plan.out_w;
                plan.im2col(x.data(), r0, r1, &mut cols);
                gemm(
                    prec,
                    c_out,
                    k,
                    n,
                    View::row_major(wv.data(), k),
                    View::row_major(&cols[..k * n], n),
                    0.0,
                    &mut out[r0 * plan.out_w..],
                    p,
                );
            }
            (plan, c_out, x.ndim() == 4, out)
        };
        let og = Geom {
            c: c_out,
            b: plan.inp.b,
            h: plan.out_h,
            w: plan.out_w,
        };
        let out = Array::new(&og.shape(batched), out)?;
        Ok(self.tape.push_op(
            "conv2d",
            out,
            &[self, w],
            Box::new(move |a: &BackwardArgs<'_>| {
                let (x, wv, g) = (a.inputs[0], a.inputs[1], a.grad.data());
                let (k, p) = (plan.k(), plan.p());
                let mut gw = a.needs[1].then(|| vec![0.0; c_out * k]);
                let mut gx = a.needs[0].then(|| vec![0.0; x.len()]);
                let mut cols = vec![0.0; k * plan.rows_per_chunk() * plan.out_w];
                for (r0, r1) in plan.chunks() {
                    let n = (r1 - r0) * plan.out_w;
                    let gv = View {
                        data: &g[r0 * plan.out_w..],
                        rs: p,
                        cs: 1,
                    };
                    if let Some(d) = gw.as_mut() {
                        plan.im2col(x.data(), r0, r1, &mut cols);
                        gemm(prec, c_out, n, k, gv, View::transposed(&cols[..k * n], n), 1.0, d, k);
                    }
                    if let Some(d) = gx.as_mut() {
                        gemm(
                            prec,
                            k,
                            c_out,
                            n,
                            View::transposed(wv.data(), k),
                            gv,
                            0.0,
                            &mut cols[..k * n],
                            n,
                        );
                        plan.col2im(&cols[..k * n], r0, r1, d);
                    }
                }
                let gw = gw.map(|mut d| {
                    let bad = fault::factor(Fault::Conv2d);
                    if bad != 1.0 {
                        d.iter_mut().for_each(|v| *v *= bad);
                    }
                    Array::new(wv.shape(), d).unwrap()
                });
                let gx = gx.map(|d| Array::new(x.shape(), d).unwrap());
                vec![gx, gw]
            }),
        ))
    }

    /// Same-padded windowed maximum. Gradient goes to the first maximum in
    /// row-major window order.
    pub fn maxpool2d(self, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var<'t>> {
        let (out, arg) = {
            let x = self.value();
            let g = Geom::of(x.shape())?;
            if stride.0 == 0 || stride.1 == 0 || kernel.0 == 0 || kernel.1 == 0 {
                return Err(Error::Dimension("maxpool2d: zero kernel or stride".into()));
            }
            let (oh, ph) = same_padding(g.h, kernel.0, stride.0);
            let (ow, pw) = same_padding(g.w, kernel.1, stride.1);
            let d = x.data();
            // Clipped input range of every window, per axis.
            let span = |n: usize, k: usize, s: usize, pad: usize, len: usize| -> Vec<(usize, usize)> {
                (0..n)
                    .map(|i| ((i * s).saturating_sub(pad), (i * s + k).saturating_sub(pad).min(len)))
                    .collect()
            };
            let rows = span(oh, kernel.0, stride.0, ph, g.h);
            let cols = span(ow, kernel.1, stride.1, pw, g.w);
            let mut out = Vec::with_capacity(g.c * g.b * oh * ow);
            let mut arg: Vec<u64> = Vec::with_capacity(out.capacity());
            for plane in 0..g.c * g.b {
                let p = &d[plane * g.h * g.w..(plane + 1) * g.h * g.w];
                for &(r0, r1) in &rows {
                    for &(c0, c1) in &cols {
                        let mut bi = r0 * g.w + c0;
                        let mut bv = p[bi];
                        for r in r0..r1 {
                            let row = &p[r * g.w..(r + 1) * g.w];
                            for (c, &v) in row.iter().enumerate().take(c1).skip(c0) {
                                if v > bv {
                                    bv = v;
                                    bi = r * g.w + c;
                                }
                            }
                        }
                        out.push(bv);
                        arg.push((plane * g.h * g.w + bi) as u64);
                    }
                }
            }
            let og = Geom {
                c: g.c,
                b: g.b,
                h: oh,
                w: ow,
            };
            (Array::new(&og.shape(x.ndim() == 4), out)?, arg)
        };
        self.tape.record_branch(&arg);
        Ok(self.tape.push_op(
            "maxpool2d",
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                let mut d = Array::zeros(a.inputs[0].shape());
                let dd = d.data_mut();
                for (&i, &g) in arg.iter().zip(a.grad.data()) {
                    dd[i as usize] += g;
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Per-channel batch normalisation followed by the affine map `gamma * xhat + beta`.
    pub fn batchnorm2d(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running: BnRunning<'_>,
    ) -> Result<Var<'t>> {
        let (out, xhat, inv_std, geom, train) = {
            let x = self.value();
            let g = Geom::of(x.shape())?;
            let (gv, bv) = (gamma.value(), beta.value());
            if gv.shape() != [g.c] || bv.shape() != [g.c] {
                return Err(Error::Dimension(format!(
                    "batchnorm2d: {} channels vs gamma {:?} / beta {:?}",
                    g.c,
                    gv.shape(),
                    bv.shape()
                )));
            }
            let l = g.b * g.h * g.w;
            let d = x.data();
            let mut xhat = vec![0.0; d.len()];
            let mut inv_std = vec![0.0; g.c];
            let train = matches!(running, BnRunning::Train(_));
            let (mean, var) = match running {
                BnRunning::Train(stats) => {
                    if stats.mean.len() != g.c {
                        return Err(Error::Dimension("batchnorm2d: running stats width".into()));
                    }
                    let mut means = vec![0.0; g.c];
                    let mut vars = vec![0.0; g.c];
                    for c in 0..g.c {
                        let block = &d[c * l..(c + 1) * l];
                        let m = lane_sum(block, |x| x) / l as f64;
                        let v = lane_sum(block, |x| (x - m) * (x - m)) / l as f64;
                        means[c] = m;
                        vars[c] = v;
                        let unbiased = if l > 1 { v * l as f64 / (l - 1) as f64 } else { v };
                        stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * m;
                        stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * unbiased;
                    }
                    (means, vars)
                }
                BnRunning::Eval(stats) => {
                    if stats.mean.len() != g.c {
                        return Err(Error::Dimension("batchnorm2d: running stats width".into()));
                    }
                    (stats.mean.clone(), stats.var.clone())
                }
            };
            let mut out = vec![0.0; d.len()];
            for c in 0..g.c {
                let s = 1.0 / (var[c] + BN_EPS).sqrt();
                inv_std[c] = s;
                let (m, ga, be) = (mean[c], gv.data()[c], bv.data()[c]);
                let r = c * l..(c + 1) * l;
                for ((xh, o), &x) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&d[r]) {
                    *xh = (x - m) * s;
                    *o = ga * *xh + be;
                }
            }
            (Array::new(x.shape(), out)?, xhat, inv_std, g, train)
        };
        Ok(self.tape.push_op(
            "batchnorm2d",
            out,
            &[self, gamma, beta],
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let gam = a.inputs[1].data();
                let l = geom.b * geom.h * geom.w;
                let mut dgam = vec![0.0; geom.c];
                let mut dbeta = vec![0.0; geom.c];
                for c in 0..geom.c {
                    let r = c * l..(c + 1) * l;
                    dgam[c] = lane_dot(&g[r.clone()], &xhat[r.clone()]);
                    dbeta[c] = lane_sum(&g[r], |x| x);
                }
                let gx = a.needs[0].then(|| {
                    let bad = fault::factor(Fault::BatchNorm);
                    let mut d = vec![0.0; g.len()];
                    for c in 0..geom.c {
                        let k = bad * gam[c] * inv_std[c];
                        let r = c * l..(c + 1) * l;
                        let (dc, gc) = (&mut d[r.clone()], &g[r.clone()]);
                        if train {
                            let n = l as f64;
                            let (kn, db, dg) = (k / n, dbeta[c], dgam[c]);
                            for ((o, &gi), &xh) in dc.iter_mut().zip(gc).zip(&xhat[r]) {
                                *o = kn * (n * gi - db - xh * dg);
                            }
                        } else {
                            for (o, &gi) in dc.iter_mut().zip(gc) {
                                *o = k * gi;
                            }
                        }
                    }
                    Array::new(a.inputs[0].shape(), d).unwrap()
                });
                vec![
                    gx,
                    Some(Array::from_vec(dgam)),
                    Some(Array::from_vec(dbeta)),
                ]
            }),
        ))
    }
}

/// Sum of `f(x)` with eight interleaved accumulators (vectorisable, fixed order).
fn lane_sum(xs: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += f(x);
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|&x| f(x)).sum();
    acc.iter().sum::<f64>() + tail
}

fn lane_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Running mean and (unbiased) variance per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Which statistics a batchnorm forward uses.
pub enum BnRunning<'a> {
    /// Normalise by batch statistics and update the running estimates.
    Train(&'a mut BnStats),
    /// Normalise by the running estimates.
    Eval(&'a BnStats),
}
