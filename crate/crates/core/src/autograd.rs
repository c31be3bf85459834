//! Reverse-mode automatic differentiation on a per-computation tape.
//!
//! Every vector-Jacobian product is itself expressed with tape operations,
//! so gradients computed with `create_graph = true` are ordinary [`Var`]s
//! that can be differentiated again. This is what the second-order inner
//! loop and the outer-loss gradient w.r.t. pseudo-image pixels rely on.
//!
//! A tape is single-threaded and append-only; node ids are therefore a
//! topological order.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::tensor::{self, numel, Tensor};

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Pow(usize, f64),
    Exp(usize),
    Log(usize),
    MulConst(usize, Rc<Tensor>),
    SumAll(usize),
    Expand(usize),
    ReduceAxis(usize, usize),
    BroadcastAxis(usize, usize),
    Gather(usize, Rc<Vec<usize>>),
    ScatterAdd(usize, Rc<Vec<usize>>),
    Reshape(usize),
    Conv(usize, usize),
    ConvInputGrad(usize, usize),
    ConvWeightGrad(usize, usize),
    MatMul(usize, usize, bool, bool),
    RowLogSumExp(usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Conv(a, b)
            | ConvInputGrad(a, b)
            | ConvWeightGrad(a, b)
            | MatMul(a, b, _, _) => [Some(a), Some(b)],
            Scale(a, _)
            | AddScalar(a)
            | Pow(a, _)
            | Exp(a)
            | Log(a)
            | MulConst(a, _)
            | SumAll(a)
            | Expand(a)
            | ReduceAxis(a, _)
            | BroadcastAxis(a, _)
            | Gather(a, _)
            | ScatterAdd(a, _)
            | Reshape(a)
            | RowLogSumExp(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations so they can be differentiated.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// A value gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = self.recording.get() && {
            let nodes = self.nodes.borrow();
            op.parents().iter().flatten().any(|&p| nodes[p].requires_grad)
        };
        if requires_grad {
            self.push_node(value, op, true)
        } else {
            self.push_node(value, Op::Leaf, false)
        }
    }

    fn value_rc(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of scalar `output` w.r.t. each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves recorded
    /// and differentiable; otherwise they are constants.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>], create_graph: bool) -> Vec<Var<'t>> {
        assert!(std::ptr::eq(output.tape, self), "variable from another tape");
        assert_eq!(
            output.value().len(),
            1,
            "grad() needs a scalar output, got shape {:?}",
            output.shape()
        );
        let end = output.id + 1;
        // Mark nodes that are both descendants of some wrt node and
        // ancestors of the output; only those carry useful gradient.
        let mut on_path = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < end {
                    on_path[w.id] = true;
                }
            }
            for i in 0..end {
                if on_path[i] || !nodes[i].requires_grad {
                    continue;
                }
                on_path[i] = nodes[i].op.parents().iter().flatten().any(|&p| on_path[p]);
            }
            let mut needed = vec![false; end];
            needed[output.id] = on_path[output.id];
            for i in (0..end).rev() {
                if !needed[i] {
                    continue;
                }
                for &p in nodes[i].op.parents().iter().flatten() {
                    if on_path[p] {
                        needed[p] = true;
                    }
                }
            }
            on_path = needed;
        }

        let prev = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'t>>> = vec![None; end];
        if on_path[output.id] {
            let shape = output.shape();
            grads[output.id] = Some(self.constant(Tensor::full(&shape, 1.0)));
        }
        for i in (0..end).rev() {
            if !on_path[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            for (parent, contrib) in self.vjp(i, &op, g) {
                if !on_path[parent] {
                    continue;
                }
                grads[parent] = Some(match grads[parent] {
                    Some(acc) => acc + contrib,
                    None => contrib,
                });
            }
        }
        let out = wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&w.shape())),
            })
            .collect();
        self.recording.set(prev);
        out
    }

    fn vjp<'t>(&'t self, id: usize, op: &Op, g: Var<'t>) -> Vec<(usize, Var<'t>)> {
        let v = |i: usize| self.var(i);
        match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, -g)],
            Op::Mul(a, b) => vec![(a, g * v(b)), (b, g * v(a))],
            Op::Scale(a, c) => vec![(a, g * c)],
            Op::AddScalar(a) => vec![(a, g)],
            Op::Pow(a, p) => vec![(a, g * v(a).powf(p - 1.0) * p)],
            Op::Exp(a) => vec![(a, g * v(id))],
            Op::Log(a) => vec![(a, g * v(a).powf(-1.0))],
            Op::MulConst(a, ref m) => vec![(a, g.mul_const(Rc::clone(m)))],
            Op::SumAll(a) => vec![(a, g.expand(&v(a).shape()))],
            Op::Expand(a) => vec![(a, g.sum().reshape(&v(a).shape()))],
            Op::ReduceAxis(a, axis) => vec![(a, g.broadcast_axis(axis, &v(a).shape()))],
            Op::BroadcastAxis(a, axis) => vec![(a, g.reduce_axis(axis))],
            Op::Gather(a, ref idx) => vec![(a, g.scatter_add(Rc::clone(idx), &v(a).shape()))],
            Op::ScatterAdd(a, ref idx) => vec![(a, g.gather(Rc::clone(idx), &v(a).shape()))],
            Op::Reshape(a) => vec![(a, g.reshape(&v(a).shape()))],
            Op::Conv(x, w) => vec![
                (x, g.conv2d_input_grad(v(w), &v(x).shape())),
                (w, v(x).conv2d_weight_grad(g, &v(w).shape())),
            ],
            // y = Dx(h, w): linear in h and in w.
            Op::ConvInputGrad(h, w) => vec![(h, g.conv2d(v(w))), (w, g.conv2d_weight_grad(v(h), &v(w).shape()))],
            // y = Dw(x, h): linear in x and in h.
            Op::ConvWeightGrad(x, h) => vec![(x, v(h).conv2d_input_grad(g, &v(x).shape())), (h, v(x).conv2d(g))],
            Op::MatMul(a, b, ta, tb) => {
                let (va, vb) = (v(a), v(b));
                let (da, db) = match (ta, tb) {
                    (false, false) => (g.matmul_t(vb, false, true), va.matmul_t(g, true, false)),
                    (true, false) => (vb.matmul_t(g, false, true), va.matmul_t(g, false, false)),
                    (false, true) => (g.matmul_t(vb, false, false), g.matmul_t(va, true, false)),
                    (true, true) => (vb.matmul_t(g, true, true), g.matmul_t(va, true, true)),
                };
                vec![(a, da), (b, db)]
            }
            Op::RowLogSumExp(a) => {
                let x = v(a);
                let shape = x.shape();
                let softmax = (x - v(id).broadcast_axis(0, &shape)).exp();
                vec![(a, g.broadcast_axis(0, &shape) * softmax)]
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_rc(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.record(value, op)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let out = self.value().map(|x| x.powf(p));
        self.unary(out, Op::Pow(self.id, p))
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.unary(out, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let out = self.value().map(f64::ln);
        self.unary(out, Op::Log(self.id))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.unary(out, Op::AddScalar(self.id))
    }

    /// Elementwise product with a fixed tensor (masks, constants).
    pub fn mul_const(self, m: Rc<Tensor>) -> Var<'t> {
        let out = self.value().zip_map(&m, |a, b| a * b);
        self.unary(out, Op::MulConst(self.id, m))
    }

    pub fn relu(self) -> Var<'t> {
        let mask = self.value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.mul_const(Rc::new(mask))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::SumAll(self.id))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(self, shape: &[usize]) -> Var<'t> {
        let out = Tensor::full(shape, self.value().item());
        self.unary(out, Op::Expand(self.id))
    }

    /// Sums over every axis except `axis`, giving a vector.
    pub fn reduce_axis(self, axis: usize) -> Var<'t> {
        let out = tensor::reduce_keep_axis(&self.value(), axis);
        self.unary(out, Op::ReduceAxis(self.id, axis))
    }

    /// Repeats a vector along `axis` of `shape`.
    pub fn broadcast_axis(self, axis: usize, shape: &[usize]) -> Var<'t> {
        let out = tensor::broadcast_axis(&self.value(), axis, shape);
        self.unary(out, Op::BroadcastAxis(self.id, axis))
    }

    /// `out[i] = self[idx[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t> {
        assert_eq!(numel(shape), idx.len(), "gather shape/index mismatch");
        let src = self.value();
        let d = src.data();
        let out = Tensor::new(shape.to_vec(), idx.iter().map(|&i| d[i]).collect());
        self.unary(out, Op::Gather(self.id, idx))
    }

    /// `out[idx[i]] += self[i]` into a zero tensor of `shape`.
    pub fn scatter_add(self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t> {
        let src = self.value();
        assert_eq!(src.len(), idx.len(), "scatter index mismatch");
        let mut out = Tensor::zeros(shape);
        let od = out.data_mut();
        for (&i, &x) in idx.iter().zip(src.data()) {
            od[i] += x;
        }
        self.unary(out, Op::ScatterAdd(self.id, idx))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let out = (*self.value()).clone().reshaped(shape);
        self.unary(out, Op::Reshape(self.id))
    }

    /// Selects whole items along the leading axis.
    pub fn select_outer(self, items: &[usize]) -> Var<'t> {
        let shape = self.shape();
        let inner = numel(&shape[1..]);
        let idx: Vec<usize> = items.iter().flat_map(|&i| i * inner..(i + 1) * inner).collect();
        let mut out_shape = shape;
        out_shape[0] = items.len();
        self.gather(Rc::new(idx), &out_shape)
    }

    /// Stride-1 "same" convolution with weight `w` of shape `[Co,Ci,k,k]`.
    pub fn conv2d(self, w: Var<'t>) -> Var<'t> {
        let out = tensor::conv2d(&self.value(), &w.value());
        self.tape.record(out, Op::Conv(self.id, w.id))
    }

    fn conv2d_input_grad(self, w: Var<'t>, x_shape: &[usize]) -> Var<'t> {
        let out = tensor::conv2d_input_grad(&self.value(), &w.value(), x_shape);
        self.tape.record(out, Op::ConvInputGrad(self.id, w.id))
    }

    fn conv2d_weight_grad(self, gout: Var<'t>, w_shape: &[usize]) -> Var<'t> {
        let out = tensor::conv2d_weight_grad(&self.value(), &gout.value(), w_shape);
        self.tape.record(out, Op::ConvWeightGrad(self.id, gout.id))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.matmul_t(rhs, false, false)
    }

    /// `op(self) · op(rhs)` where `op` transposes when its flag is set.
    pub fn matmul_t(self, rhs: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let out = tensor::matmul(&self.value(), &rhs.value(), ta, tb);
        self.tape.record(out, Op::MatMul(self.id, rhs.id, ta, tb))
    }

    /// 2×2 stride-2 max pooling (ceil mode).
    pub fn maxpool2x2(self) -> Var<'t> {
        let (vals, idx) = tensor::maxpool2x2(&self.value());
        self.gather(Rc::new(idx), vals.shape())
    }

    /// Row-wise log-sum-exp of a `[B,N]` matrix.
    pub fn row_logsumexp(self) -> Var<'t> {
        let out = tensor::row_logsumexp(&self.value());
        self.unary(out, Op::RowLogSumExp(self.id))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&rhs.value(), |a, b| a + b);
        self.tape.record(out, Op::Add(self.id, rhs.id))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&rhs.value(), |a, b| a - b);
        self.tape.record(out, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&rhs.value(), |a, b| a * b);
        self.tape.record(out, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.unary(out, Op::Scale(self.id, c))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self * -1.0
    }
}

/// Mean cross-entropy of `[B,N]` logits against integer labels.
pub fn cross_entropy_mean<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let b = labels.len();
    cross_entropy_sum(logits, labels) * (1.0 / b as f64)
}

/// Summed cross-entropy of `[B,N]` logits against integer labels.
pub fn cross_entropy_sum<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "logits must be [B,N]");
    assert_eq!(shape[0], labels.len(), "label count mismatch");
    let n = shape[1];
    let picks: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            assert!(y < n, "label {y} out of range for {n} classes");
            i * n + y
        })
        .collect();
    let picked = logits.gather(Rc::new(picks), &[labels.len()]);
    logits.row_logsumexp().sum() - picked.sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn product_rule_and_second_derivative() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = (x * x * x).sum(); // x^3
        let g = tape.grad(y, &[x], true)[0];
        assert!((g.item() - 27.0).abs() < 1e-12);
        let gg = tape.grad(g.sum(), &[x], false)[0];
        assert!((gg.item() - 18.0).abs() < 1e-12);
    }

    #[test]
    fn first_order_mode_returns_constants() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = (x * x).sum();
        let g = tape.grad(y, &[x], false)[0];
        assert!(!g.requires_grad());
        assert!((g.item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let z = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = (x * x).sum();
        let gz = tape.grad(y, &[z], false)[0];
        assert_eq!(gz.value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[3, 4]));
        let ce = cross_entropy_sum(logits, &[0, 1, 3]);
        assert!((ce.item() - 3.0 * 4f64.ln()).abs() < 1e-12);
        let g = tape.grad(ce, &[logits], false)[0];
        // softmax - onehot
        assert!((g.value().data()[0] - (0.25 - 1.0)).abs() < 1e-12);
        assert!((g.value().data()[1] - 0.25).abs() < 1e-12);
    }

    fn finite_diff_check<F>(shape: &[usize], f: F)
    where
        F: for<'t> Fn(Var<'t>) -> Var<'t>,
    {
        let n = numel(shape);
        let x0 = Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 37) % 11) as f64 * 0.13 - 0.6).collect(),
        );
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(x);
        let g = tape.grad(y, &[x], false)[0].value();
        let h = 1e-5;
        for i in 0..n {
            let eval = |d: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += d;
                let tp = Tape::new();
                f(tp.constant(xp)).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "component {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn gradients_of_composite_ops_match_finite_differences() {
        finite_diff_check(&[2, 3], |x| {
            let lse = x.row_logsumexp();
            (lse * lse).sum()
        });
        finite_diff_check(&[2, 2, 3, 3], |x| {
            let m = x.reduce_axis(1) * (1.0 / 18.0);
            let c = x - m.broadcast_axis(1, &[2, 2, 3, 3]);
            let v = (c * c).reduce_axis(1).add_scalar(1.0).powf(-0.5);
            (c * v.broadcast_axis(1, &[2, 2, 3, 3]) * c).sum()
        });
        finite_diff_check(&[3, 2], |x| {
            let w = x.tape().constant(Tensor::new(vec![2, 2], vec![0.3, -1.0, 0.5, 2.0]));
            let y = x.matmul(w);
            let z = y.matmul_t(x, true, false);
            (z * z).sum()
        });
    }

    #[test]
    fn second_order_through_conv_matches_finite_differences() {
        // d/dw of || d/dx <conv(x,w), r> ||^2 exercises ConvInputGrad's vjp.
        let xs = [1usize, 1, 3, 3];
        let ws = [2usize, 1, 3, 3];
        let x0 = Tensor::new(xs.to_vec(), (0..9).map(|i| (i as f64 * 0.37).sin()).collect());
        let w0 = Tensor::new(ws.to_vec(), (0..18).map(|i| (i as f64 * 0.71).cos() * 0.5).collect());
        let r = Tensor::new(vec![1, 2, 3, 3], (0..18).map(|i| (i as f64 * 1.3).sin()).collect());
        let objective = |w_val: &Tensor, want_grad: bool| -> (f64, Option<Tensor>) {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let w = tape.leaf(w_val.clone());
            let y = (x.conv2d(w) * tape.constant(r.clone())).sum();
            let gx = tape.grad(y, &[x], true)[0];
            let obj = (gx * gx).sum();
            let gw = want_grad.then(|| (*tape.grad(obj, &[w], false)[0].value()).clone());
            (obj.item(), gw)
        };
        let (_, gw) = objective(&w0, true);
        let gw = gw.unwrap();
        let h = 1e-5;
        for i in 0..w0.len() {
            let mut wp = w0.clone();
            wp.data_mut()[i] += h;
            let mut wm = w0.clone();
            wm.data_mut()[i] -= h;
            let fd = (objective(&wp, false).0 - objective(&wm, false).0) / (2.0 * h);
            assert!((fd - gw.data()[i]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}
