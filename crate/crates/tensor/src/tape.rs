//! Reverse-mode differentiation over an append-only tape.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep.

use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Powf(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    SumAxes(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    UpsampleNearest2(Var),
    Sample { src: Var, coords: Var },
    Lerp { w: Var, a: Var, b: Var },
    Detach,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Detach, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = kernels::broadcast_binary(self.value(a), self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// `s - a`
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, s)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x >= 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them with size 1.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = kernels::sum_axes(self.value(a), axes);
        let rg = self.rg(a);
        self.push(value, Op::SumAxes(a), rg)
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        let s = self.sum_axes(a, axes);
        self.scale(s, 1.0 / count as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).reshaped(shape);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = kernels::concat(&tensors, axis);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::Concat(parts.to_vec(), axis), rg)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let value = kernels::slice_axis(self.value(a), axis, start, end);
        let rg = self.rg(a);
        self.push(value, Op::Slice(a, axis, start), rg)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.rank() == 2 && bv.rank() == 2, "matmul expects rank-2 operands");
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        assert_eq!(k, bv.shape()[0], "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), k as isize, 1, bv.data(), n as isize, 1, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), rg)
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, a: Var) -> Var {
        let value = transpose2(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let value = kernels::conv2d(self.value(x), self.value(w), stride, pad);
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::Conv2d { x, w, stride, pad }, rg)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let value = kernels::conv_transpose2d(self.value(x), self.value(w), stride, pad);
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::ConvTranspose2d { x, w, stride, pad }, rg)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let value = kernels::upsample_nearest2(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::UpsampleNearest2(x), rg)
    }

    /// Bilinear sampling of `src` at pixel `coords`; see
    /// [`kernels::sample_bilinear`].
    pub fn sample_bilinear(&mut self, src: Var, coords: Var) -> Var {
        let value = kernels::sample_bilinear(self.value(src), self.value(coords));
        let rg = self.rg(src) || self.rg(coords);
        self.push(value, Op::Sample { src, coords }, rg)
    }

    /// `w * a + (1 - w) * b` with `w` broadcast over `a` and `b` (which share
    /// a shape). Returns `a` or `b` exactly when `w` is 1 or 0, or when the
    /// two operands agree.
    pub fn lerp(&mut self, w: Var, a: Var, b: Var) -> Var {
        let value = kernels::lerp(self.value(w), self.value(a), self.value(b));
        let rg = self.rg(w) || self.rg(a) || self.rg(b);
        self.push(value, Op::Lerp { w, a, b }, rg)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape(), vec![1.0]));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads[v.0] = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, kernels::reduce_to(g, val(*a).shape()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, kernels::reduce_to(g, val(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, kernels::reduce_to(g, val(*a).shape()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, kernels::reduce_to(&g.scaled(-1.0), val(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                let da: &dyn Fn(f64, f64) -> f64 = &|_, y| y;
                let db: &dyn Fn(f64, f64) -> f64 = &|x, _| x;
                let (ga, gb) = kernels::broadcast_binary_backward(
                    val(*a),
                    val(*b),
                    g,
                    self.rg(*a).then_some(da),
                    self.rg(*b).then_some(db),
                );
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let da: &dyn Fn(f64, f64) -> f64 = &|_, y| 1.0 / y;
                let db: &dyn Fn(f64, f64) -> f64 = &|x, y| -x / (y * y);
                let (ga, gb) = kernels::broadcast_binary_backward(
                    val(*a),
                    val(*b),
                    g,
                    self.rg(*a).then_some(da),
                    self.rg(*b).then_some(db),
                );
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Lerp { w, a, b } => {
                let wb = kernels::broadcast_to(val(*w), g.shape());
                if self.rg(*a) {
                    self.accumulate(grads, *a, wb.zip_map(g, |x, gy| x * gy));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, wb.zip_map(g, |x, gy| (1.0 - x) * gy));
                }
                if self.rg(*w) {
                    let d = val(*a).zip_map(val(*b), |x, y| x - y).zip_map(g, |d, gy| d * gy);
                    self.accumulate(grads, *w, kernels::reduce_to(&d, val(*w).shape()));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scaled(*s)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshaped(&shape));
            }
            Op::Abs(a) => {
                let d = val(*a).zip_map(g, |x, gy| if x > 0.0 { gy } else if x < 0.0 { -gy } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => self.accumulate(grads, *a, val(*a).zip_map(g, |x, gy| 2.0 * x * gy)),
            Op::Powf(a, p) => {
                let p = *p;
                self.accumulate(grads, *a, val(*a).zip_map(g, |x, gy| p * x.powf(p - 1.0) * gy));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, node.value.zip_map(g, |y, gy| y * (1.0 - y) * gy));
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, node.value.zip_map(g, |y, gy| (1.0 - y * y) * gy));
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                self.accumulate(grads, *a, val(*a).zip_map(g, |x, gy| if x >= 0.0 { gy } else { s * gy }));
            }
            Op::Sum(a) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::SumAxes(a) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(grads, *a, kernels::broadcast_to(g, &shape));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if self.rg(p) {
                        self.accumulate(grads, p, kernels::slice_axis(g, *axis, start, start + len));
                    }
                    start += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(grads, *a, kernels::unslice_axis(g, &shape, *axis, *start));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    // g[m, n] * b^T[n, k]
                    kernels::gemm(m, n, k, g.data(), n as isize, 1, bv.data(), 1, n as isize, 0.0, &mut ga);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    // a^T[k, m] * g[m, n]
                    kernels::gemm(k, m, n, av.data(), 1, k as isize, g.data(), n as isize, 1, 0.0, &mut gb);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose2(g)),
            Op::Conv2d { x, w, stride, pad } => {
                let (gx, gw) = kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad, self.rg(*x), self.rg(*w));
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let (gx, gw) =
                    kernels::conv_transpose2d_backward(val(*x), val(*w), g, *stride, *pad, self.rg(*x), self.rg(*w));
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::UpsampleNearest2(x) => self.accumulate(grads, *x, kernels::upsample_nearest2_backward(g)),
            Op::Sample { src, coords } => {
                let (gs, gc) =
                    kernels::sample_bilinear_backward(val(*src), val(*coords), g, self.rg(*src), self.rg(*coords));
                if let Some(gs) = gs {
                    self.accumulate(grads, *src, gs);
                }
                if let Some(gc) = gc {
                    self.accumulate(grads, *coords, gc);
                }
            }
        }
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    assert_eq!(t.rank(), 2, "transpose expects a rank-2 tensor");
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
