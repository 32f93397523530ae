use super::array::{axis_split, without_axis, Array};
use super::fault::{self, Fault};
use super::gemm::{gemm, View};
use super::tape::{BackwardArgs, Var};
use crate::error::{Error, Result};

/// Guard added under the square root of every L2 norm.
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy)]
enum NormGuard {
    Eps(f64),
    Floor(f64),
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    /// right operand is a single value
    Right,
    /// left operand is a single value
    Left,
}

fn bcast_mode(a: &Array, b: &Array, op: &str) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.len() == 1 {
        Ok(Bcast::Right)
    } else if a.len() == 1 {
        Ok(Bcast::Left)
    } else {
        Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} do not match",
            a.shape(),
            b.shape()
        )))
    }
}

fn reduce_to(g: Vec<f64>, target: &Array) -> Array {
    if target.len() == 1 && g.len() != 1 {
        Array::new(target.shape(), vec![g.iter().sum()]).unwrap()
    } else {
        Array::new(target.shape(), g).unwrap()
    }
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, op: Bin, name: &'static str) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let b = other.value();
            let mode = bcast_mode(&a, &b, name)?;
            let shape = if mode == Bcast::Left { b.shape() } else { a.shape() };
            let n = a.len().max(b.len());
            let (ad, bd) = (a.data(), b.data());
            let data = (0..n)
                .map(|i| {
                    let x = if ad.len() == 1 { ad[0] } else { ad[i] };
                    let y = if bd.len() == 1 { bd[0] } else { bd[i] };
                    match op {
                        Bin::Add => x + y,
                        Bin::Sub => x - y,
                        Bin::Mul => x * y,
                    }
                })
                .collect();
            Array::new(shape, data)?
        };
        Ok(self.tape.push_op(
            name,
            out,
            &[self, other],
            Box::new(move |a: &BackwardArgs<'_>| {
                let (x, y, g) = (a.inputs[0], a.inputs[1], a.grad.data());
                let at = |v: &Array, i: usize| if v.len() == 1 { v.data()[0] } else { v.data()[i] };
                let gx = a.needs[0].then(|| {
                    let v: Vec<f64> = match op {
                        Bin::Add | Bin::Sub => g.to_vec(),
                        Bin::Mul => g.iter().enumerate().map(|(i, gi)| gi * at(y, i)).collect(),
                    };
                    reduce_to(v, x)
                });
                let gy = a.needs[1].then(|| {
                    let v: Vec<f64> = match op {
                        Bin::Add => g.to_vec(),
                        Bin::Sub => g.iter().map(|gi| -gi).collect(),
                        Bin::Mul => g.iter().enumerate().map(|(i, gi)| gi * at(x, i)).collect(),
                    };
                    reduce_to(v, y)
                });
                vec![gx, gy]
            }),
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Bin::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Bin::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Bin::Mul, "mul")
    }

    fn pointwise(
        self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push_op(
            name,
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                let (x, y, g) = (a.inputs[0].data(), a.output.data(), a.grad.data());
                let d = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                vec![Some(Array::new(a.grad.shape(), d).unwrap())]
            }),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.pointwise("scale", move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.pointwise("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        let mask: Vec<u64> = self
            .value()
            .data()
            .chunks(64)
            .map(|c| c.iter().enumerate().fold(0u64, |m, (i, &x)| m | (((x > 0.0) as u64) << i)))
            .collect();
        self.tape.record_branch(&mask);
        let k = fault::factor(Fault::Relu);
        self.pointwise(
            "relu",
            |x| x.max(0.0),
            move |x, _| if x > 0.0 { k } else { 0.0 },
        )
    }

    pub fn tanh(self) -> Var<'t> {
        let k = fault::factor(Fault::Tanh);
        self.pointwise("tanh", f64::tanh, move |_, y| k * (1.0 - y * y))
    }

    pub fn exp(self) -> Var<'t> {
        self.pointwise("exp", f64::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.pointwise("log", f64::ln, |x, _| 1.0 / x))
    }

    /// Matrix product of two 2-D operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let prec = self.tape.precision();
        let (m, k, n, out) = {
            let a = self.value();
            let b = other.value();
            if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
                return Err(Error::Dimension(format!(
                    "matmul: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            gemm(
                prec,
                m,
                k,
                n,
                View::row_major(a.data(), k),
                View::row_major(b.data(), n),
                0.0,
                &mut out,
                n,
            );
            (m, k, n, out)
        };
        let out = Array::new(&[m, n], out)?;
        Ok(self.tape.push_op(
            "matmul",
            out,
            &[self, other],
            Box::new(move |a: &BackwardArgs<'_>| {
                let (x, y, g) = (a.inputs[0], a.inputs[1], a.grad.data());
                let bad = fault::factor(Fault::Matmul);
                let gx = a.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(
                        prec,
                        m,
                        n,
                        k,
                        View::row_major(g, n),
                        View::transposed(y.data(), n),
                        0.0,
                        &mut d,
                        k,
                    );
                    if bad != 1.0 {
                        d.iter_mut().for_each(|v| *v *= bad);
                    }
                    Array::new(&[m, k], d).unwrap()
                });
                let gy = a.needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(
                        prec,
                        k,
                        m,
                        n,
                        View::transposed(x.data(), k),
                        View::row_major(g, n),
                        0.0,
                        &mut d,
                        n,
                    );
                    Array::new(&[k, n], d).unwrap()
                });
                vec![gx, gy]
            }),
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if a.ndim() != 2 {
                return Err(Error::Dimension(format!(
                    "transpose needs 2-D, got {:?}",
                    a.shape()
                )));
            }
            a.transpose()
        };
        Ok(self.tape.push_op(
            "transpose",
            out,
            &[self],
            Box::new(|a: &BackwardArgs<'_>| vec![Some(a.grad.transpose())]),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().clone().reshape(shape)?;
        Ok(self.tape.push_op(
            "reshape",
            out,
            &[self],
            Box::new(|a: &BackwardArgs<'_>| {
                vec![Some(a.grad.clone().reshape(a.inputs[0].shape()).unwrap())]
            }),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let mut seen = vec![false; a.ndim()];
            if axes.len() != a.ndim()
                || axes.iter().any(|&x| x >= a.ndim() || std::mem::replace(&mut seen[x], true))
            {
                return Err(Error::Dimension(format!(
                    "permute {axes:?} invalid for shape {:?}",
                    a.shape()
                )));
            }
            permute_array(&a, axes)
        };
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.tape.push_op(
            "permute",
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| vec![Some(permute_array(a.grad, &inverse))]),
        ))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_linear(axis, 1.0, "sum")
    }

    /// Mean over `axis`, removing it.
    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        let n = {
            let a = self.value();
            axis_split(a.shape(), axis)?.1
        };
        self.reduce_linear(axis, 1.0 / n as f64, "mean")
    }

    fn reduce_linear(self, axis: usize, w: f64, name: &'static str) -> Result<Var<'t>> {
        let (out, (outer, n, inner)) = {
            let a = self.value();
            let split = axis_split(a.shape(), axis)?;
            let (outer, n, inner) = split;
            let d = a.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let row = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += x;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= w);
            (Array::new(&without_axis(a.shape(), axis), out)?, split)
        };
        Ok(self.tape.push_op(
            name,
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let dst = &mut d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (v, &gi) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *v = w * gi;
                        }
                    }
                }
                vec![Some(Array::new(a.inputs[0].shape(), d).unwrap())]
            }),
        ))
    }

    /// sqrt(sum x^2 + eps) over `axis`, removing it.
    pub fn l2norm(self, axis: usize) -> Result<Var<'t>> {
        self.norm(axis, NormGuard::Eps(L2_EPS))
    }

    /// `max(sqrt(Σx²), floor)` along `axis`. Exactly homogeneous under
    /// power-of-two scaling, unlike the ε-inside form.
    pub fn l2norm_floor(self, axis: usize, floor: f64) -> Result<Var<'t>> {
        self.norm(axis, NormGuard::Floor(floor))
    }

    fn norm(self, axis: usize, guard: NormGuard) -> Result<Var<'t>> {
        let (out, (outer, n, inner)) = {
            let a = self.value();
            let split = axis_split(a.shape(), axis)?;
            let (outer, n, inner) = split;
            let d = a.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        let x = d[(o * n + j) * inner + i];
                        out[o * inner + i] += x * x;
                    }
                }
            }
            out.iter_mut().for_each(|v| {
                *v = match guard {
                    NormGuard::Eps(e) => (*v + e).sqrt(),
                    NormGuard::Floor(f) => v.sqrt().max(f),
                }
            });
            (Array::new(&without_axis(a.shape(), axis), out)?, split)
        };
        let clamped = move |y: f64| matches!(guard, NormGuard::Floor(f) if y <= f);
        Ok(self.tape.push_op(
            "l2norm",
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                let (x, y, g) = (a.inputs[0].data(), a.output.data(), a.grad.data());
                let mut d = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            let idx = (o * n + j) * inner + i;
                            let yo = y[o * inner + i];
                            d[idx] = if clamped(yo) { 0.0 } else { g[o * inner + i] * x[idx] / yo };
                        }
                    }
                }
                vec![Some(Array::new(a.inputs[0].shape(), d).unwrap())]
            }),
        ))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(self) -> Var<'t> {
        let out = Array::scalar(self.value().sum());
        self.tape.push_op(
            "sum_all",
            out,
            &[self],
            Box::new(|a: &BackwardArgs<'_>| {
                vec![Some(Array::full(a.inputs[0].shape(), a.grad.item()))]
            }),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let (out, split) = {
            let a = self.value();
            let split = axis_split(a.shape(), axis)?;
            let mut out = a.data().to_vec();
            for_each_lane(split, |idx| {
                let m = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in idx.clone() {
                    out[i] = (out[i] - m).exp();
                    s += out[i];
                }
                for i in idx {
                    out[i] /= s;
                }
            });
            (Array::new(a.shape(), out)?, split)
        };
        Ok(self.tape.push_op(
            "softmax",
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                let (y, g) = (a.output.data(), a.grad.data());
                let bad = fault::factor(Fault::Softmax);
                let mut d = vec![0.0; y.len()];
                for_each_lane(split, |idx| {
                    let dot: f64 = idx.clone().map(|i| g[i] * y[i]).sum();
                    for i in idx {
                        d[i] = bad * y[i] * (g[i] - dot);
                    }
                });
                vec![Some(Array::new(a.output.shape(), d).unwrap())]
            }),
        ))
    }

    /// Log-softmax along `axis`, with max subtraction.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let (out, split) = {
            let a = self.value();
            let split = axis_split(a.shape(), axis)?;
            let mut out = a.data().to_vec();
            for_each_lane(split, |idx| {
                let m = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + idx.clone().map(|i| (out[i] - m).exp()).sum::<f64>().ln();
                for i in idx {
                    out[i] -= lse;
                }
            });
            (Array::new(a.shape(), out)?, split)
        };
        Ok(self.tape.push_op(
            "log_softmax",
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                let (y, g) = (a.output.data(), a.grad.data());
                let mut d = vec![0.0; y.len()];
                for_each_lane(split, |idx| {
                    let gs: f64 = idx.clone().map(|i| g[i]).sum();
                    for i in idx {
                        d[i] = g[i] - y[i].exp() * gs;
                    }
                });
                vec![Some(Array::new(a.output.shape(), d).unwrap())]
            }),
        ))
    }

    /// `self + v` with `v` repeated along `axis` (v's shape is self's without `axis`).
    pub fn add_along(self, v: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.along(v, axis, Along::Add)
    }

    pub fn mul_along(self, v: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.along(v, axis, Along::Mul)
    }

    pub fn div_along(self, v: Var<'t>, axis: usize) -> Result<Var<'t>> {
        self.along(v, axis, Along::Div)
    }

    fn along(self, v: Var<'t>, axis: usize, op: Along) -> Result<Var<'t>> {
        let (out, (outer, n, inner)) = {
            let a = self.value();
            let b = v.value();
            let split = axis_split(a.shape(), axis)?;
            if b.shape() != without_axis(a.shape(), axis).as_slice() {
                return Err(Error::Dimension(format!(
                    "broadcast of {:?} along axis {axis} of {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            if op == Along::Div && b.data().iter().any(|&x| x == 0.0) {
                return Err(Error::Domain("division by zero".into()));
            }
            let (outer, n, inner) = split;
            let (x, y) = (a.data(), b.data());
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        let idx = (o * n + j) * inner + i;
                        let w = y[o * inner + i];
                        out[idx] = match op {
                            Along::Add => x[idx] + w,
                            Along::Mul => x[idx] * w,
                            Along::Div => x[idx] / w,
                        };
                    }
                }
            }
            (Array::new(a.shape(), out)?, split)
        };
        Ok(self.tape.push_op(
            "along",
            out,
            &[self, v],
            Box::new(move |a: &BackwardArgs<'_>| {
                let (x, y, g) = (a.inputs[0].data(), a.inputs[1].data(), a.grad.data());
                let mut gx = vec![0.0; x.len()];
                let mut gy = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            let idx = (o * n + j) * inner + i;
                            let vi = o * inner + i;
                            match op {
                                Along::Add => {
                                    gx[idx] = g[idx];
                                    gy[vi] += g[idx];
                                }
                                Along::Mul => {
                                    gx[idx] = g[idx] * y[vi];
                                    gy[vi] += g[idx] * x[idx];
                                }
                                Along::Div => {
                                    gx[idx] = g[idx] / y[vi];
                                    gy[vi] -= g[idx] * x[idx] / (y[vi] * y[vi]);
                                }
                            }
                        }
                    }
                }
                vec![
                    a.needs[0].then(|| Array::new(a.inputs[0].shape(), gx).unwrap()),
                    a.needs[1].then(|| Array::new(a.inputs[1].shape(), gy).unwrap()),
                ]
            }),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let (out, (outer, n, inner)) = {
            let a = self.value();
            let split = axis_split(a.shape(), axis)?;
            if start >= end || end > split.1 {
                return Err(Error::Dimension(format!(
                    "slice {start}..{end} of axis {axis} in {:?}",
                    a.shape()
                )));
            }
            let (outer, n, inner) = split;
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&a.data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = end - start;
            (Array::new(&shape, out)?, split)
        };
        Ok(self.tape.push_op(
            "slice",
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let w = (end - start) * inner;
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    d[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(Array::new(a.inputs[0].shape(), d).unwrap())]
            }),
        ))
    }

    /// Row-wise gather on a 2-D array: `out[r] = self[r, indices[r]]`.
    pub fn pick(self, indices: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if a.ndim() != 2 || a.rows() != indices.len() {
                return Err(Error::Dimension(format!(
                    "pick of {} indices from {:?}",
                    indices.len(),
                    a.shape()
                )));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= a.cols()) {
                return Err(Error::Contract(format!(
                    "index {bad} out of range for {} columns",
                    a.cols()
                )));
            }
            let c = a.cols();
            Array::from_vec(indices.iter().enumerate().map(|(r, &i)| a.data()[r * c + i]).collect())
        };
        let indices = indices.to_vec();
        Ok(self.tape.push_op(
            "pick",
            out,
            &[self],
            Box::new(move |a: &BackwardArgs<'_>| {
                let c = a.inputs[0].cols();
                let mut d = Array::zeros(a.inputs[0].shape());
                for (r, &i) in indices.iter().enumerate() {
                    d.data_mut()[r * c + i] = a.grad.data()[r];
                }
                vec![Some(d)]
            }),
        ))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Along {
    Add,
    Mul,
    Div,
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
    let tape = first.tape;
    let (out, outer, inner, widths) = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        axis_split(&base, axis)?;
        for v in &vals {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat along {axis}: {base:?} vs {s:?}"
                )));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        (Array::new(&shape, out)?, outer, inner, widths)
    };
    Ok(tape.push_op(
        "concat",
        out,
        parts,
        Box::new(move |a: &BackwardArgs<'_>| {
            let g = a.grad.data();
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            let mut res = Vec::with_capacity(widths.len());
            for (k, &w) in widths.iter().enumerate() {
                if !a.needs[k] {
                    res.push(None);
                    offset += w;
                    continue;
                }
                let mut d = Vec::with_capacity(outer * w * inner);
                for o in 0..outer {
                    let s = (o * total + offset) * inner;
                    d.extend_from_slice(&g[s..s + w * inner]);
                }
                res.push(Some(Array::new(a.inputs[k].shape(), d).unwrap()));
                offset += w;
            }
            res
        }),
    ))
}

/// Stacks equally shaped values along a new leading axis.
pub fn stack<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let lifted = parts
        .iter()
        .map(|p| {
            let mut s = vec![1];
            s.extend(p.shape());
            p.reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&lifted, 0)
}

fn for_each_lane(
    (outer, n, inner): (usize, usize, usize),
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            f((base..base + n * inner).step_by(inner));
        }
    }
}

pub(crate) fn permute_array(a: &Array, axes: &[usize]) -> Array {
    let shape = a.shape();
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&x| strides[x]).collect();
    let mut out = Vec::with_capacity(a.len());
    let mut idx = vec![0; nd];
    let src = a.data();
    if nd == 0 {
        return a.clone();
    }
    let last = nd - 1;
    loop {
        let base: usize = idx[..last].iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        let s = out_strides[last];
        for j in 0..out_shape[last] {
            out.push(src[base + j * s]);
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return Array::new(&out_shape, out).unwrap();
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}
