//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! nodes in reverse and accumulates adjoints. Layers are written once against
//! the tape and serve both plain evaluation and training.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;
use super::NnError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` repeated cyclically over `a`.
    AddTiled(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Silu(Var),
    Transpose(Var),
    Reshape(Var),
    Permute3(Var, [usize; 3]),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Sinusoid(Var, Rc<[f64]>),
    Sum(Var),
    Mse(Var, Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn mismatch(msg: String) -> NnError {
    NnError::ShapeMismatch(msg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(format!("elementwise {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new_allow_empty(va.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.zip_same(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.zip_same(a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.zip_same(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a + b` with `b` tiled over `a`; the trailing dims of `a` must equal
    /// the shape of `b` (a row bias, or a per-frame table over tokens).
    pub fn add_tiled(&self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        let tail = &va.shape()[va.rank().saturating_sub(vb.rank())..];
        if va.rank() < vb.rank() || tail != vb.shape() {
            return Err(mismatch(format!("tile {:?} over {:?}", vb.shape(), va.shape())));
        }
        let n = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data()[i % n])
            .collect();
        let out = Tensor::new_allow_empty(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddTiled(a, b)))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = *va.shape().last().expect("tensor rank >= 1");
        let mut data = va.data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        let out = Tensor::new_allow_empty(va.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        self.push(out, Op::Silu(a))
    }

    pub fn transpose(&self, a: Var) -> Result<Var, NnError> {
        let out = self.value(a).transpose2()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Axis permutation of a rank-3 tensor: output axis `i` is input axis
    /// `perm[i]`.
    pub fn permute3(&self, a: Var, perm: [usize; 3]) -> Result<Var, NnError> {
        let va = self.value(a);
        let mut sorted = perm;
        sorted.sort_unstable();
        if va.rank() != 3 || sorted != [0, 1, 2] {
            return Err(mismatch(format!("permute {perm:?} of {:?}", va.shape())));
        }
        let out = permute3_data(&va, perm);
        Ok(self.push(out, Op::Permute3(a, perm)))
    }

    /// Concatenate along axis 0; the remaining axes must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var, NnError> {
        let first = parts.first().ok_or_else(|| mismatch("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(mismatch(format!("concat {:?} onto [_, {:?}]", v.shape(), tail)));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new_allow_empty(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let out = self.value(a).slice_rows(start, len)?;
        Ok(self.push(out, Op::Slice(a, start)))
    }

    /// 2-D convolution of a `(C_in, H, W)` input with `(C_out, C_in, K, K)`
    /// weights, zero padding `pad` and stride `stride`.
    pub fn conv2d(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NnError> {
        let (x, w) = (self.value(input), self.value(weight));
        let b = bias.map(|b| self.value(b));
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
        if let Some(b) = &b {
            if b.shape() != [geom.c_out] {
                return Err(mismatch(format!("conv bias {:?} for {} channels", b.shape(), geom.c_out)));
            }
        }
        let mut out = vec![0.0; geom.c_out * geom.h_out * geom.w_out];
        geom.for_each_tap(|o, xi, wi| out[o] += x.data()[xi] * w.data()[wi]);
        if let Some(b) = &b {
            let plane = geom.h_out * geom.w_out;
            for (i, v) in out.iter_mut().enumerate() {
                *v += b.data()[i / plane];
            }
        }
        let out = Tensor::new(vec![geom.c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// Interleaved `[sin(v w0), cos(v w0), sin(v w1), ...]` for every element
    /// `v` of `a`; output shape `(numel(a), 2 * freqs.len())`.
    pub fn sinusoid(&self, a: Var, freqs: &[f64]) -> Result<Var, NnError> {
        let va = self.value(a);
        let mut data = Vec::with_capacity(va.numel() * freqs.len() * 2);
        for &v in va.data() {
            for &w in freqs {
                data.push((v * w).sin());
                data.push((v * w).cos());
            }
        }
        let out = Tensor::new(vec![va.numel(), 2 * freqs.len()], data)?;
        Ok(self.push(out, Op::Sinusoid(a, freqs.into())))
    }

    pub fn sum(&self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var, NnError> {
        let diff = self.zip_same(a, b, |x, y| x - y)?;
        let n = diff.numel().max(1) as f64;
        let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b)))
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(mismatch(format!(
                "backward from non-scalar {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, delta: Tensor| accumulate(&mut grads, v, delta);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, g.matmul(&vb.transpose2()?)?);
                    acc(*b, va.transpose2()?.matmul(&g)?);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, zip(&g, vb, |x, y| x * y));
                    acc(*b, zip(&g, va, |x, y| x * y));
                }
                Op::AddTiled(a, b) => {
                    let vb = val(*b);
                    let n = vb.numel();
                    let mut gb = Tensor::zeros(vb.shape());
                    for (k, x) in g.data().iter().enumerate() {
                        gb.data_mut()[k % n] += x;
                    }
                    acc(*a, g.clone());
                    acc(*b, gb);
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let n = *y.shape().last().expect("rank >= 1");
                    let mut ga = vec![0.0; y.numel()];
                    if n > 0 {
                        for ((gr, yr), out) in g
                            .data()
                            .chunks(n)
                            .zip(y.data().chunks(n))
                            .zip(ga.chunks_mut(n))
                        {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                                *o = yv * (gv - dot);
                            }
                        }
                    }
                    acc(*a, Tensor::new_allow_empty(y.shape().to_vec(), ga)?);
                }
                Op::Silu(a) => {
                    acc(*a, zip(&g, val(*a), |gv, x| gv * silu_grad(x)));
                }
                Op::Transpose(a) => acc(*a, g.transpose2()?),
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
                Op::Permute3(a, perm) => {
                    let mut inverse = [0; 3];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    acc(*a, permute3_data(&g, inverse));
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = val(p).shape()[0];
                        acc(p, g.slice_rows(start, rows)?);
                        start += rows;
                    }
                }
                Op::Slice(a, start) => {
                    let va = val(*a);
                    let mut ga = Tensor::zeros(va.shape());
                    let stride = va.numel() / va.shape()[0].max(1);
                    ga.data_mut()[start * stride..start * stride + g.numel()]
                        .copy_from_slice(g.data());
                    acc(*a, ga);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let (x, w) = (val(*input), val(*weight));
                    let geom = ConvGeom::new(x.shape(), w.shape(), *stride, *pad)?;
                    let mut gx = Tensor::zeros(x.shape());
                    let mut gw = Tensor::zeros(w.shape());
                    {
                        let (gxd, gwd) = (gx.data_mut(), gw.data_mut());
                        geom.for_each_tap(|o, xi, wi| {
                            gxd[xi] += g.data()[o] * w.data()[wi];
                            gwd[wi] += g.data()[o] * x.data()[xi];
                        });
                    }
                    if let Some(b) = bias {
                        let plane = geom.h_out * geom.w_out;
                        let gb: Vec<f64> = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                        acc(*b, Tensor::new(vec![geom.c_out], gb)?);
                    }
                    acc(*input, gx);
                    acc(*weight, gw);
                }
                Op::Sinusoid(a, freqs) => {
                    let va = val(*a);
                    let d = 2 * freqs.len();
                    let ga: Vec<f64> = va
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            freqs
                                .iter()
                                .enumerate()
                                .map(|(k, &w)| {
                                    let (gs, gc) = (g.data()[i * d + 2 * k], g.data()[i * d + 2 * k + 1]);
                                    w * (gs * (v * w).cos() - gc * (v * w).sin())
                                })
                                .sum()
                        })
                        .collect();
                    acc(*a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let k = 2.0 * g.item() / va.numel().max(1) as f64;
                    let ga = zip(va, vb, |x, y| k * (x - y));
                    acc(*b, ga.map(|x| -x));
                    acc(*a, ga);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new_allow_empty(a.shape().to_vec(), data).expect("zip of equal shapes")
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn permute3_data(t: &Tensor, perm: [usize; 3]) -> Tensor {
    let src = t.shape();
    let shape = [src[perm[0]], src[perm[1]], src[perm[2]]];
    let src_strides = [src[1] * src[2], src[2], 1];
    let mut data = Vec::with_capacity(t.numel());
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let idx = [i, j, k];
                let mut flat = 0;
                for axis in 0..3 {
                    flat += idx[axis] * src_strides[perm[axis]];
                }
                data.push(t.data()[flat]);
            }
        }
    }
    Tensor::new_allow_empty(shape.to_vec(), data).expect("permutation preserves size")
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self, NnError> {
        let (&[c_in, h, width], &[c_out, c_in_w, k, k2]) = (x, w) else {
            return Err(mismatch(format!("conv input {x:?} with weight {w:?}")));
        };
        if c_in != c_in_w || k != k2 || stride == 0 || h + 2 * pad < k || width + 2 * pad < k {
            return Err(mismatch(format!("conv input {x:?} with weight {w:?}")));
        }
        Ok(Self {
            c_in,
            h,
            w: width,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (width + 2 * pad - k) / stride + 1,
        })
    }

    /// Calls `f(out_index, input_index, weight_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for co in 0..self.c_out {
            for oy in 0..self.h_out {
                for ox in 0..self.w_out {
                    let o = (co * self.h_out + oy) * self.w_out + ox;
                    for ci in 0..self.c_in {
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let xi = (ci * self.h + iy as usize) * self.w + ix as usize;
                                let wi = ((co * self.c_in + ci) * self.k + ky) * self.k + kx;
                                f(o, xi, wi);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 1000.0, 1000.0, -1000.0]));
        let y = tape.value(tape.softmax_rows(x));
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((y.at(&[1, 0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matmul_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.5, -2.0]));
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = tape.permute3(x, [1, 0, 2]).unwrap();
        let v = tape.value(p);
        assert_eq!(v.shape(), &[3, 2, 4]);
        assert_eq!(v.at(&[2, 1, 3]), tape.value(x).at(&[1, 2, 3]));
        let back = tape.permute3(p, [1, 0, 2]).unwrap();
        assert_eq!(*tape.value(back), *tape.value(x));
        assert!(tape.permute3(x, [0, 0, 2]).is_err());
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }
}
