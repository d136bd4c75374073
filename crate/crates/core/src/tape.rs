//! Reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. [`Tape::backward`] walks the nodes in exact reverse order of
//! recording, accumulating gradients into each input; a value that feeds
//! several consumers receives the sum of their contributions.
//!
//! Values read back with [`Tape::value`] are plain data and carry no link to
//! the tape, which is how guidance maps are detached from the graph.

use crate::error::{Error, Result};

/// Lower clamp applied to `sqrt` and `log` arguments.
pub const LOG_EPS: f64 = 1e-7;

/// Row-major dense tensor. Feature maps use shape `[channels, height, width]`,
/// convolution kernels `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch { left: shape, right: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims3(&self) -> (usize, usize, usize) {
        match self.shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            _ => (1, 1, self.data.len()),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Sqrt,
    Sigmoid,
    Log,
    Clamp { lo: f64, hi: f64 },
    ScalarMul(f64),
    Relu,
    Exp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sqrt(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Sum(Var),
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    Upsample2x(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in application order for a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when nothing flowed into it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A tracked leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { left: sa.to_vec(), right: sb.to_vec() });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor { shape: src.shape.clone(), data: src.data.iter().map(|&v| f(v)).collect() };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    /// Dispatches one of the elementwise kinds; binary kinds require `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::Config(format!("{op:?} needs two operands")));
        Ok(match op {
            ElementwiseOp::Add => self.add(a, need_b()?)?,
            ElementwiseOp::Mul => self.mul(a, need_b()?)?,
            ElementwiseOp::Sqrt => self.sqrt(a),
            ElementwiseOp::Sigmoid => self.sigmoid(a),
            ElementwiseOp::Log => self.log(a),
            ElementwiseOp::Clamp { lo, hi } => self.clamp(a, lo, hi),
            ElementwiseOp::ScalarMul(k) => self.scale(a, k),
            ElementwiseOp::Relu => self.relu(a),
            ElementwiseOp::Exp => self.exp(a),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let value = Tensor { shape: va.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let value = Tensor { shape: va.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_EPS).sqrt(), Op::Sqrt(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_EPS).ln(), Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Sum of all elements, as a one-element tensor. Accumulates in input order.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// 2D convolution of a `[c_in, h, w]` input with a `[c_out, c_in, k, k]`
    /// kernel and `[c_out]` bias, zero padding `pad` on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let (c_in, h, wd) = x.dims3();
        let [c_out, wc_in, k, k2] = w.shape[..] else {
            return Err(Error::ShapeMismatch { left: w.shape.clone(), right: vec![0, c_in, 0, 0] });
        };
        if wc_in != c_in || k != k2 || b.data.len() != c_out || stride == 0 {
            return Err(Error::ShapeMismatch { left: w.shape.clone(), right: x.shape.clone() });
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::ShapeMismatch { left: w.shape.clone(), right: x.shape.clone() });
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { c_in, h, w: wd, c_out, k, stride, pad, oh, ow };
        let mut out = vec![0.0; c_out * oh * ow];
        conv_forward(&geom, &x.data, &w.data, &b.data, &mut out);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor { shape: vec![c_out, oh, ow], data: out };
        Ok(self.push(value, Op::Conv2d { input, weight, bias, stride, pad }, rg))
    }

    /// Nearest-neighbour 2× spatial upsampling of a `[c, h, w]` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let src = &self.nodes[x.0].value;
        let (c, h, w) = src.dims3();
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let row = &src.data[ch * h * w + (y / 2) * w..][..w];
                let dst = &mut data[ch * oh * ow + y * ow..][..ow];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = row[xo / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor { shape: vec![c, oh, ow], data }, Op::Upsample2x(x), rg)
    }

    /// Backward pass from a one-element loss node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.backward_with(vec![(loss, Tensor::scalar(1.0))])
    }

    /// Backward pass seeded with explicit upstream gradients on any set of
    /// nodes. Used when a loss supplies its own analytic derivative with
    /// respect to network outputs.
    pub fn backward_with(&mut self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        for (v, g) in seeds {
            if g.data.len() != self.nodes[v.0].value.data.len() {
                return Err(Error::ShapeMismatch {
                    left: self.nodes[v.0].value.shape.clone(),
                    right: g.shape,
                });
            }
            accumulate(&mut grads[v.0], g.data, &self.nodes[v.0].value.shape);
        }
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value.data;
        let val = |v: Var| &self.nodes[v.0].value;
        let send = |v: Var, data: Vec<f64>, grads: &mut [Option<Tensor>]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], data, &self.nodes[v.0].value.shape);
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(a, g.data.clone(), grads);
                send(b, g.data.clone(), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&val(a).data, &val(b).data);
                if self.rg(a) {
                    send(a, g.data.iter().zip(vb).map(|(g, y)| g * y).collect(), grads);
                }
                if self.rg(b) {
                    send(b, g.data.iter().zip(va).map(|(g, x)| g * x).collect(), grads);
                }
            }
            Op::Sqrt(x) => {
                let vx = &val(x).data;
                let d = g.data.iter().zip(vx).zip(out)
                    .map(|((g, &xi), &yi)| if xi > LOG_EPS { g * 0.5 / yi } else { 0.0 })
                    .collect();
                send(x, d, grads);
            }
            Op::Sigmoid(x) => {
                let d = g.data.iter().zip(out).map(|(g, &s)| g * s * (1.0 - s)).collect();
                send(x, d, grads);
            }
            Op::Log(x) => {
                let vx = &val(x).data;
                let d = g.data.iter().zip(vx)
                    .map(|(g, &xi)| if xi > LOG_EPS { g / xi } else { 0.0 })
                    .collect();
                send(x, d, grads);
            }
            Op::Clamp { x, lo, hi } => {
                let vx = &val(x).data;
                let d = g.data.iter().zip(vx)
                    .map(|(g, &xi)| if xi >= lo && xi <= hi { *g } else { 0.0 })
                    .collect();
                send(x, d, grads);
            }
            Op::Scale(x, k) => send(x, g.data.iter().map(|g| g * k).collect(), grads),
            Op::Relu(x) => {
                let vx = &val(x).data;
                let d = g.data.iter().zip(vx).map(|(g, &xi)| if xi > 0.0 { *g } else { 0.0 }).collect();
                send(x, d, grads);
            }
            Op::Exp(x) => {
                let d = g.data.iter().zip(out).map(|(g, y)| g * y).collect();
                send(x, d, grads);
            }
            Op::Sum(x) => {
                let n = val(x).data.len();
                send(x, vec![g.data[0]; n], grads);
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = val(x).dims3();
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        let src = &g.data[ch * oh * ow + y * ow..][..ow];
                        let dst = &mut d[ch * h * w + (y / 2) * w..][..w];
                        for (xo, gv) in src.iter().enumerate() {
                            dst[xo / 2] += gv;
                        }
                    }
                }
                send(x, d, grads);
            }
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let x = val(input);
                let w = val(weight);
                let (c_in, h, wd) = x.dims3();
                let (c_out, k) = (w.shape[0], w.shape[2]);
                let (_, oh, ow) = node.value.dims3();
                let geom = ConvGeom { c_in, h, w: wd, c_out, k, stride, pad, oh, ow };
                if self.rg(bias) {
                    let db = (0..c_out).map(|co| g.data[co * oh * ow..][..oh * ow].iter().sum()).collect();
                    send(bias, db, grads);
                }
                if self.rg(weight) {
                    let mut dw = vec![0.0; w.data.len()];
                    conv_backward_weight(&geom, &x.data, &g.data, &mut dw);
                    send(weight, dw, grads);
                }
                if self.rg(input) {
                    let mut dx = vec![0.0; x.data.len()];
                    conv_backward_input(&geom, &w.data, &g.data, &mut dx);
                    send(input, dx, grads);
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, data: Vec<f64>, shape: &[usize]) {
    match slot {
        Some(t) => t.data.iter_mut().zip(data).for_each(|(a, b)| *a += b),
        None => *slot = Some(Tensor { shape: shape.to_vec(), data }),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Output index range `[lo, hi)` along one axis whose input tap
    /// `o * stride + tap - pad` falls inside `[0, len)`.
    fn valid(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > tap { (self.pad - tap).div_ceil(s) } else { 0 };
        if len + self.pad <= tap {
            return (0, 0);
        }
        let hi = ((len - 1 + self.pad - tap) / s + 1).min(out_len);
        (lo.min(hi), hi)
    }
}

impl ConvGeom {
    /// Unrolls the input into a `[c_in·k·k, oh·ow]` column matrix; taps in
    /// the padding stay zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (k, s, plane_in, plane_out) = (self.k, self.stride, self.h * self.w, self.oh * self.ow);
        let mut cols = vec![0.0; self.c_in * k * k * plane_out];
        for ci in 0..self.c_in {
            let xin = &x[ci * plane_in..][..plane_in];
            for ky in 0..k {
                let (y0, y1) = self.valid(ky, self.h, self.oh);
                for kx in 0..k {
                    let (x0, x1) = self.valid(kx, self.w, self.ow);
                    let col = &mut cols[((ci * k + ky) * k + kx) * plane_out..][..plane_out];
                    for oy in y0..y1 {
                        let row = &xin[(oy * s + ky - self.pad) * self.w..][..self.w];
                        let dst = &mut col[oy * self.ow..][..self.ow];
                        for ox in x0..x1 {
                            dst[ox] = row[ox * s + kx - self.pad];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto the input.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, s, plane_in, plane_out) = (self.k, self.stride, self.h * self.w, self.oh * self.ow);
        for ci in 0..self.c_in {
            let din = &mut dx[ci * plane_in..][..plane_in];
            for ky in 0..k {
                let (y0, y1) = self.valid(ky, self.h, self.oh);
                for kx in 0..k {
                    let (x0, x1) = self.valid(kx, self.w, self.ow);
                    let col = &cols[((ci * k + ky) * k + kx) * plane_out..][..plane_out];
                    for oy in y0..y1 {
                        let row = &mut din[(oy * s + ky - self.pad) * self.w..][..self.w];
                        let src = &col[oy * self.ow..][..self.ow];
                        for ox in x0..x1 {
                            row[ox * s + kx - self.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c`, each operand row-major or transposed
/// through its strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the asserted buffer extents.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let plane_out = g.oh * g.ow;
    for (co, o) in out.chunks_mut(plane_out).enumerate() {
        o.fill(b[co]);
    }
    let ckk = g.c_in * g.k * g.k;
    let cols = g.im2col(x);
    gemm(g.c_out, ckk, plane_out, w, false, &cols, false, 1.0, out);
}

fn conv_backward_weight(g: &ConvGeom, x: &[f64], gout: &[f64], dw: &mut [f64]) {
    let ckk = g.c_in * g.k * g.k;
    let cols = g.im2col(x);
    gemm(g.c_out, g.oh * g.ow, ckk, gout, false, &cols, true, 1.0, dw);
}

fn conv_backward_input(g: &ConvGeom, w: &[f64], gout: &[f64], dx: &mut [f64]) {
    let ckk = g.c_in * g.k * g.k;
    let mut cols = vec![0.0; ckk * g.oh * g.ow];
    gemm(ckk, g.c_out, g.oh * g.ow, w, true, gout, false, 0.0, &mut cols);
    g.col2im(&cols, dx);
}
