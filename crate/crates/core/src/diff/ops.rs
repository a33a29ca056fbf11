//! Forward and reverse kernels for every recorded operation.

use super::graph::OpKind;
use super::tensor::numel;
use super::{DiffError, Scalar, Tensor};

/// Sums in `f64` and rounds once, so reductions do not accumulate error in
/// standard precision.
fn wide_sum<S: Scalar>(values: impl Iterator<Item = S>) -> S {
    S::of(values.map(|v| v.f64()).sum())
}

type Grads<S> = Vec<Option<Vec<S>>>;

fn mismatch<S: Scalar>(op: &'static str, inputs: &[&Tensor<S>]) -> DiffError {
    DiffError::ShapeMismatch { op, shapes: inputs.iter().map(|t| t.shape().to_vec()).collect() }
}

fn arity<S: Scalar>(op: &OpKind, inputs: &[&Tensor<S>]) -> Result<(), DiffError> {
    let ok = match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => inputs.len() == 2,
        OpKind::Conv2d { .. } => inputs.len() == 2 || inputs.len() == 3,
        OpKind::Concat { .. } => !inputs.is_empty(),
        _ => inputs.len() == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(DiffError::InvalidArgument {
            op: op.name(),
            msg: format!("wrong number of inputs: {}", inputs.len()),
        })
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast input.
fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let lead = rank - inp.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (lead..rank).rev() {
        let dim = inp[d - lead];
        strides[d] = if dim == 1 { 0 } else { s };
        s *= dim;
    }
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        offsets.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    offsets
}

pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new<S: Scalar>(
        x: &Tensor<S>,
        w: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self, DiffError> {
        let bad = || {
            let mut shapes = vec![x.shape().to_vec(), w.shape().to_vec()];
            if let Some(b) = bias {
                shapes.push(b.shape().to_vec());
            }
            DiffError::ShapeMismatch { op: "conv2d", shapes }
        };
        if stride == 0 {
            return Err(DiffError::InvalidArgument { op: "conv2d", msg: "stride must be positive".into() });
        }
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(bad());
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(bad());
            }
        }
        let (h, wd) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if h < ws[2] || wd < ws[3] {
            return Err(bad());
        }
        Ok(ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (h - ws[2]) / stride + 1,
            wo: (wd - ws[3]) / stride + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let plane = self.plane();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(S::zero());
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix >= 0 && ix < self.w as isize { src[ix as usize] } else { S::zero() };
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], x: &mut [S]) {
        let plane = self.plane();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn unary<S: Scalar>(x: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    x.map(f)
}

fn last_two(op: &'static str, x: &Tensor<impl Scalar>, min_rank: usize) -> Result<(usize, usize, usize), DiffError> {
    let s = x.shape();
    if s.len() < min_rank {
        return Err(DiffError::ShapeMismatch { op, shapes: vec![s.to_vec()] });
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((numel(&s[..s.len() - 2]), h, w))
}

pub(crate) fn forward<S: Scalar>(op: &OpKind, inputs: &[&Tensor<S>]) -> Result<(Tensor<S>, Vec<S>), DiffError> {
    arity(op, inputs)?;
    let x = inputs[0];
    let none = Vec::new();
    let out = match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let b = inputs[1];
            let f = |p: S, q: S| match op {
                OpKind::Add => p + q,
                OpKind::Sub => p - q,
                _ => p * q,
            };
            if x.shape() == b.shape() {
                let data = x.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
                Tensor::new(x.shape().to_vec(), data)?
            } else {
                let shape = broadcast_shape(x.shape(), b.shape()).ok_or_else(|| mismatch(op.name(), inputs))?;
                let oa = broadcast_offsets(&shape, x.shape());
                let ob = broadcast_offsets(&shape, b.shape());
                let data = oa.iter().zip(&ob).map(|(&i, &j)| f(x.data()[i], b.data()[j])).collect();
                Tensor::new(shape, data)?
            }
        }
        OpKind::Scale(c) => {
            let c = S::of(*c);
            unary(x, |v| v * c)
        }
        OpKind::AddScalar(c) => {
            let c = S::of(*c);
            unary(x, |v| v + c)
        }
        OpKind::MatMul => {
            let b = inputs[1];
            let (xs, bs) = (x.shape(), b.shape());
            if xs.len() != 2 || bs.len() != 2 || xs[1] != bs[0] {
                return Err(mismatch("matmul", inputs));
            }
            let (m, k, n) = (xs[0], xs[1], bs[1]);
            let mut data = vec![S::zero(); m * n];
            S::gemm(m, k, n, x.data(), false, b.data(), false, &mut data, false);
            Tensor::new(vec![m, n], data)?
        }
        OpKind::Transpose => {
            let s = x.shape();
            if s.len() != 2 {
                return Err(mismatch("transpose", inputs));
            }
            let (r, c) = (s[0], s[1]);
            let mut data = vec![S::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], data)?
        }
        OpKind::Conv2d { stride, pad } => {
            let g = ConvGeom::new(x, inputs[1], inputs.get(2).copied(), *stride, *pad)?;
            let (ckk, plane) = (g.ckk(), g.plane());
            let mut cols = vec![S::zero(); g.n * ckk * plane];
            let mut data = vec![S::zero(); g.n * g.o * plane];
            let in_sz = g.c * g.h * g.w;
            for n in 0..g.n {
                let cn = &mut cols[n * ckk * plane..(n + 1) * ckk * plane];
                g.im2col(&x.data()[n * in_sz..(n + 1) * in_sz], cn);
                let on = &mut data[n * g.o * plane..(n + 1) * g.o * plane];
                S::gemm(g.o, ckk, plane, inputs[1].data(), false, cn, false, on, false);
                if let Some(b) = inputs.get(2) {
                    for (o, row) in on.chunks_mut(plane).enumerate() {
                        let bo = b.data()[o];
                        row.iter_mut().for_each(|v| *v = *v + bo);
                    }
                }
            }
            return Ok((Tensor::new(vec![g.n, g.o, g.ho, g.wo], data)?, cols));
        }
        OpKind::Relu => unary(x, |v| if v > S::zero() { v } else { S::zero() }),
        OpKind::LeakyRelu(slope) => {
            let a = S::of(*slope);
            unary(x, |v| if v > S::zero() { v } else { a * v })
        }
        OpKind::Sigmoid => unary(x, |v| {
            if v >= S::zero() {
                S::one() / (S::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (S::one() + e)
            }
        }),
        OpKind::Tanh => unary(x, |v| v.tanh()),
        OpKind::Atanh => {
            if let Some(i) = x.data().iter().position(|v| v.abs() >= S::one()) {
                return Err(DiffError::Domain { op: "atanh", index: i, value: x.data()[i].f64() });
            }
            unary(x, |v| v.atanh())
        }
        OpKind::Softmax => {
            let s = x.shape();
            if s.is_empty() {
                return Err(mismatch("softmax", inputs));
            }
            let d = s[s.len() - 1];
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(d) {
                let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                row.iter_mut().for_each(|v| *v = (*v - m).exp());
                let z = wide_sum(row.iter().copied());
                row.iter_mut().for_each(|v| *v = *v / z);
            }
            Tensor::new(s.to_vec(), data)?
        }
        OpKind::Square => unary(x, |v| v * v),
        OpKind::Abs => unary(x, |v| v.abs()),
        OpKind::Log => {
            if let Some(i) = x.data().iter().position(|v| *v <= S::zero()) {
                return Err(DiffError::Domain { op: "log", index: i, value: x.data()[i].f64() });
            }
            unary(x, |v| v.ln())
        }
        OpKind::Clamp { lo, hi } => {
            if lo > hi {
                return Err(DiffError::InvalidArgument { op: "clamp", msg: format!("lo {lo} > hi {hi}") });
            }
            let (l, h) = (S::of(*lo), S::of(*hi));
            unary(x, |v| v.max(l).min(h))
        }
        OpKind::Sum => Tensor::scalar(wide_sum(x.data().iter().copied())),
        OpKind::Mean => {
            let n = S::of(x.len() as f64);
            Tensor::scalar(wide_sum(x.data().iter().copied()) / n)
        }
        OpKind::Concat { axis } => {
            let first = x.shape();
            let axis = *axis;
            if axis >= first.len() {
                return Err(mismatch("concat", inputs));
            }
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                let same = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !same {
                    return Err(mismatch("concat", inputs));
                }
                total += s[axis];
            }
            let outer = numel(&first[..axis]);
            let inner = numel(&first[axis + 1..]);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.to_vec();
            shape[axis] = total;
            Tensor::new(shape, data)?
        }
        OpKind::Pad { pad } => {
            let (lead, h, w) = last_two("pad", x, 2)?;
            let p = *pad;
            let (hp, wp) = (h + 2 * p, w + 2 * p);
            let mut data = vec![S::zero(); lead * hp * wp];
            for l in 0..lead {
                for y in 0..h {
                    let src = &x.data()[(l * h + y) * w..][..w];
                    data[(l * hp + y + p) * wp + p..][..w].copy_from_slice(src);
                }
            }
            let mut shape = x.shape().to_vec();
            let r = shape.len();
            shape[r - 2] = hp;
            shape[r - 1] = wp;
            Tensor::new(shape, data)?
        }
        OpKind::UpsampleNearest { factor } => {
            let f = *factor;
            if f == 0 {
                return Err(DiffError::InvalidArgument { op: "upsample_nearest", msg: "factor must be positive".into() });
            }
            let (lead, h, w) = last_two("upsample_nearest", x, 2)?;
            let (hu, wu) = (h * f, w * f);
            let mut data = vec![S::zero(); lead * hu * wu];
            for l in 0..lead {
                for y in 0..hu {
                    let src = &x.data()[(l * h + y / f) * w..][..w];
                    let dst = &mut data[(l * hu + y) * wu..][..wu];
                    for (xo, v) in dst.iter_mut().enumerate() {
                        *v = src[xo / f];
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            let r = shape.len();
            shape[r - 2] = hu;
            shape[r - 1] = wu;
            Tensor::new(shape, data)?
        }
        OpKind::InstanceNorm { eps } => {
            let (lead, h, w) = last_two("instance_norm", x, 3)?;
            let plane = h * w;
            // Statistics and the normalized values stay in f64 so each output rounds once.
            let n = plane as f64;
            let mut data = x.data().to_vec();
            let mut inv = Vec::with_capacity(lead);
            for chunk in data.chunks_mut(plane) {
                let mean = chunk.iter().map(|v| v.f64()).sum::<f64>() / n;
                let var = chunk.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
                let is = 1.0 / (var + *eps).sqrt();
                chunk.iter_mut().for_each(|v| *v = S::of((v.f64() - mean) * is));
                inv.push(S::of(is));
            }
            return Ok((Tensor::new(x.shape().to_vec(), data)?, inv));
        }
        OpKind::Reshape(shape) => x.clone().reshape(shape.clone())?,
        OpKind::GlobalAvgPool => {
            let (lead, h, w) = last_two("global_avg_pool", x, 3)?;
            let n = S::of((h * w) as f64);
            let data = x.data().chunks(h * w).map(|c| wide_sum(c.iter().copied()) / n).collect::<Vec<_>>();
            debug_assert_eq!(data.len(), lead);
            Tensor::new(x.shape()[..x.rank() - 2].to_vec(), data)?
        }
    };
    Ok((out, none))
}

fn reduce_into<S: Scalar>(g: &[S], offsets: &[usize], len: usize, scale: impl Fn(usize) -> S) -> Vec<S> {
    let mut out = vec![S::zero(); len];
    for (i, (&o, &gv)) in offsets.iter().zip(g).enumerate() {
        out[o] = out[o] + gv * scale(i);
    }
    out
}

fn zip_grad<S: Scalar>(x: &[S], g: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    x.iter().zip(g).map(|(&a, &b)| f(a, b)).collect()
}

pub(crate) fn backward<S: Scalar>(
    op: &OpKind,
    inputs: &[&Tensor<S>],
    out: &Tensor<S>,
    aux: &[S],
    g: &[S],
    needs: &[bool],
) -> Result<Grads<S>, DiffError> {
    let x = inputs[0];
    let xd = x.data();
    let y = out.data();
    let one = S::one();
    let zero = S::zero();
    let single = |v: Vec<S>| vec![Some(v)];
    let res = match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let b = inputs[1];
            let sign = if matches!(op, OpKind::Sub) { -one } else { one };
            let mul = matches!(op, OpKind::Mul);
            if x.shape() == b.shape() {
                let ga = needs[0].then(|| {
                    if mul {
                        zip_grad(b.data(), g, |bv, gv| bv * gv)
                    } else {
                        g.to_vec()
                    }
                });
                let gb = needs[1].then(|| {
                    if mul {
                        zip_grad(xd, g, |av, gv| av * gv)
                    } else {
                        g.iter().map(|&v| v * sign).collect()
                    }
                });
                vec![ga, gb]
            } else {
                let shape = out.shape();
                let oa = broadcast_offsets(shape, x.shape());
                let ob = broadcast_offsets(shape, b.shape());
                let ga = needs[0].then(|| {
                    if mul {
                        reduce_into(g, &oa, x.len(), |i| b.data()[ob[i]])
                    } else {
                        reduce_into(g, &oa, x.len(), |_| one)
                    }
                });
                let gb = needs[1].then(|| {
                    if mul {
                        reduce_into(g, &ob, b.len(), |i| xd[oa[i]])
                    } else {
                        reduce_into(g, &ob, b.len(), |_| sign)
                    }
                });
                vec![ga, gb]
            }
        }
        OpKind::Scale(c) => {
            let c = S::of(*c);
            single(g.iter().map(|&v| v * c).collect())
        }
        OpKind::AddScalar(_) | OpKind::Reshape(_) => single(g.to_vec()),
        OpKind::MatMul => {
            let b = inputs[1];
            let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
            let ga = needs[0].then(|| {
                let mut ga = vec![zero; m * k];
                S::gemm(m, n, k, g, false, b.data(), true, &mut ga, false);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![zero; k * n];
                S::gemm(k, m, n, xd, true, g, false, &mut gb, false);
                gb
            });
            vec![ga, gb]
        }
        OpKind::Transpose => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut gx = vec![zero; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            single(gx)
        }
        OpKind::Conv2d { stride, pad } => {
            let w = inputs[1];
            let geo = ConvGeom::new(x, w, inputs.get(2).copied(), *stride, *pad)?;
            let (ckk, plane) = (geo.ckk(), geo.plane());
            let in_sz = geo.c * geo.h * geo.w;
            let gw = needs[1].then(|| {
                let mut gw = vec![zero; geo.o * ckk];
                for n in 0..geo.n {
                    let gn = &g[n * geo.o * plane..(n + 1) * geo.o * plane];
                    let cn = &aux[n * ckk * plane..(n + 1) * ckk * plane];
                    S::gemm(geo.o, plane, ckk, gn, false, cn, true, &mut gw, true);
                }
                gw
            });
            let gx = needs[0].then(|| {
                let mut gx = vec![zero; geo.n * in_sz];
                let mut dcols = vec![zero; ckk * plane];
                for n in 0..geo.n {
                    let gn = &g[n * geo.o * plane..(n + 1) * geo.o * plane];
                    S::gemm(ckk, geo.o, plane, w.data(), true, gn, false, &mut dcols, false);
                    geo.col2im(&dcols, &mut gx[n * in_sz..(n + 1) * in_sz]);
                }
                gx
            });
            let mut res = vec![gx, gw];
            if inputs.len() == 3 {
                let gb = needs[2].then(|| {
                    let mut gb = vec![zero; geo.o];
                    for n in 0..geo.n {
                        for (o, acc) in gb.iter_mut().enumerate() {
                            let row = &g[(n * geo.o + o) * plane..][..plane];
                            *acc = *acc + wide_sum(row.iter().copied());
                        }
                    }
                    gb
                });
                res.push(gb);
            }
            res
        }
        OpKind::Relu => single(zip_grad(xd, g, |v, gv| if v > zero { gv } else { zero })),
        OpKind::LeakyRelu(slope) => {
            let a = S::of(*slope);
            single(zip_grad(xd, g, |v, gv| if v > zero { gv } else { a * gv }))
        }
        OpKind::Sigmoid => single(zip_grad(y, g, |s, gv| gv * s * (one - s))),
        OpKind::Tanh => single(zip_grad(y, g, |t, gv| gv * (one - t * t))),
        OpKind::Atanh => single(zip_grad(xd, g, |v, gv| gv / (one - v * v))),
        OpKind::Softmax => {
            let d = x.shape()[x.rank() - 1];
            let mut gx = vec![zero; x.len()];
            for ((gr, yr), gxr) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot = wide_sum(gr.iter().zip(yr).map(|(&a, &b)| a * b));
                for ((o, &gv), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            single(gx)
        }
        OpKind::Square => single(zip_grad(xd, g, |v, gv| gv * (v + v))),
        OpKind::Abs => single(zip_grad(xd, g, |v, gv| {
            if v > zero {
                gv
            } else if v < zero {
                -gv
            } else {
                zero
            }
        })),
        OpKind::Log => single(zip_grad(xd, g, |v, gv| gv / v)),
        OpKind::Clamp { lo, hi } => {
            let (l, h) = (S::of(*lo), S::of(*hi));
            single(zip_grad(xd, g, |v, gv| if v >= l && v <= h { gv } else { zero }))
        }
        OpKind::Sum => single(vec![g[0]; x.len()]),
        OpKind::Mean => {
            let v = g[0] / S::of(x.len() as f64);
            single(vec![v; x.len()])
        }
        OpKind::Concat { axis } => {
            let axis = *axis;
            let first = x.shape();
            let outer = numel(&first[..axis]);
            let inner = numel(&first[axis + 1..]);
            let total = out.shape()[axis];
            let mut res = Vec::with_capacity(inputs.len());
            let mut start = 0;
            for (t, &need) in inputs.iter().zip(needs) {
                let width = t.shape()[axis];
                if need {
                    let mut gt = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gt.extend_from_slice(&g[base..base + width * inner]);
                    }
                    res.push(Some(gt));
                } else {
                    res.push(None);
                }
                start += width;
            }
            res
        }
        OpKind::Pad { pad } => {
            let (lead, h, w) = last_two("pad", x, 2)?;
            let p = *pad;
            let (hp, wp) = (h + 2 * p, w + 2 * p);
            let mut gx = Vec::with_capacity(x.len());
            for l in 0..lead {
                for yy in 0..h {
                    gx.extend_from_slice(&g[(l * hp + yy + p) * wp + p..][..w]);
                }
            }
            single(gx)
        }
        OpKind::UpsampleNearest { factor } => {
            let f = *factor;
            let (lead, h, w) = last_two("upsample_nearest", x, 2)?;
            let (hu, wu) = (h * f, w * f);
            let mut gx = vec![zero; x.len()];
            for l in 0..lead {
                for yy in 0..hu {
                    let src = &g[(l * hu + yy) * wu..][..wu];
                    let dst = &mut gx[(l * h + yy / f) * w..][..w];
                    for (xo, &gv) in src.iter().enumerate() {
                        dst[xo / f] = dst[xo / f] + gv;
                    }
                }
            }
            single(gx)
        }
        OpKind::InstanceNorm { .. } => {
            let (_, h, w) = last_two("instance_norm", x, 3)?;
            let plane = h * w;
            let n = plane as f64;
            let mut gx = vec![zero; x.len()];
            for (((gr, yr), gxr), &is) in g.chunks(plane).zip(y.chunks(plane)).zip(gx.chunks_mut(plane)).zip(aux) {
                let mg = gr.iter().map(|v| v.f64()).sum::<f64>() / n;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() / n;
                for ((o, &gv), &yv) in gxr.iter_mut().zip(gr).zip(yr) {
                    *o = S::of(is.f64() * (gv.f64() - mg - yv.f64() * mgy));
                }
            }
            single(gx)
        }
        OpKind::GlobalAvgPool => {
            let (_, h, w) = last_two("global_avg_pool", x, 3)?;
            let plane = h * w;
            let inv = one / S::of(plane as f64);
            let mut gx = Vec::with_capacity(x.len());
            for &gv in g {
                gx.extend(std::iter::repeat_n(gv * inv, plane));
            }
            single(gx)
        }
    };
    Ok(res)
}
