use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied to every denominator and logarithm argument.
pub const EPS_DIV: f64 = 1e-30;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reverse rule for a fused primitive defined outside this module.
///
/// `backward` receives the gradient of the output and returns one gradient per
/// input, in the order the inputs were passed to [`Tape::custom`].
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Number of denominators or log arguments raised to [`EPS_DIV`].
    pub clamped: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div { num: Var, den: Var, eff: Vec<f64>, clamped: Vec<bool> },
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log { x: Var, clamped: Vec<bool> },
    Tanh(Var),
    Sigmoid { x: Var, temperature: f64 },
    MatVec(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    RowNormalize { m: Var, targets: Arc<[f64]>, sums: Vec<f64> },
    ColNormalize { m: Var, targets: Arc<[f64]>, sums: Vec<f64> },
    Softmax { x: Var, beta: f64 },
    WeightedSum { x: Var, w: Arc<[f64]> },
    Sum(Var),
    Gather { x: Var, idx: Arc<[usize]> },
    Concat(Vec<Var>),
    BroadcastCols { x: Var },
    AddRowBroadcast { m: Var, bias: Var },
    GroupProd { x: Var, groups: Arc<[Vec<usize>]> },
    ColMin { m: Var, argmin: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Eagerly evaluated reverse-mode program.
///
/// Every primitive computes its forward value immediately and records enough
/// to replay its Jacobian-vector product during [`Tape::backward`]. A tape is
/// single-threaded; independent tapes may live on different threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    diagnostics: Diagnostics,
}

/// Gradients produced by one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; zeros when `v` did not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn require_vector(op: &'static str, a: &Tensor) -> Result<()> {
    if !a.is_vector() {
        return Err(Error::shape(op, format!("expected a column vector, got {:?}", a.shape())));
    }
    Ok(())
}

#[inline]
fn floor_den(d: f64) -> (f64, bool) {
    if d.abs() < EPS_DIV {
        (if d < 0.0 { -EPS_DIV } else { EPS_DIV }, true)
    } else {
        (d, false)
    }
}

#[inline]
pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
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

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push("sub", out, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push("mul", out, Op::Mul(a, b), ng)
    }

    /// Elementwise quotient; denominators smaller than [`EPS_DIV`] in magnitude
    /// are clamped and counted in the diagnostics.
    pub fn div(&mut self, num: Var, den: Var) -> Result<Var> {
        let (vn, vd) = (self.value(num), self.value(den));
        same_shape("div", vn, vd)?;
        let mut eff = Vec::with_capacity(vd.len());
        let mut clamped = Vec::with_capacity(vd.len());
        let mut n_clamped = 0;
        for &d in vd.data() {
            let (e, c) = floor_den(d);
            n_clamped += c as usize;
            eff.push(e);
            clamped.push(c);
        }
        let data = vn.data().iter().zip(&eff).map(|(x, d)| x / d).collect();
        let out = Tensor::new(vn.rows(), vn.cols(), data);
        self.diagnostics.clamped += n_clamped;
        let ng = self.ng(num) || self.ng(den);
        self.push("div", out, Op::Div { num, den, eff, clamped }, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.rows(), va.cols(), va.data().iter().map(|x| c * x).collect());
        let ng = self.ng(a);
        self.push("scale", out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.rows(), va.cols(), va.data().iter().map(|x| c + x).collect());
        let ng = self.ng(a);
        self.push("add_scalar", out, Op::AddScalar(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.rows(), va.cols(), va.data().iter().map(|x| x.exp()).collect());
        let ng = self.ng(a);
        self.push("exp", out, Op::Exp(a), ng)
    }

    /// Natural log with the argument floored at [`EPS_DIV`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut clamped = Vec::with_capacity(va.len());
        let mut data = Vec::with_capacity(va.len());
        for &x in va.data() {
            let c = x < EPS_DIV;
            clamped.push(c);
            data.push(x.max(EPS_DIV).ln());
        }
        let out = Tensor::new(va.rows(), va.cols(), data);
        self.diagnostics.clamped += clamped.iter().filter(|c| **c).count();
        let ng = self.ng(a);
        self.push("log", out, Op::Log { x: a, clamped }, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(va.rows(), va.cols(), va.data().iter().map(|x| x.tanh()).collect());
        let ng = self.ng(a);
        self.push("tanh", out, Op::Tanh(a), ng)
    }

    /// Logistic function of `a / temperature`.
    pub fn sigmoid(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigmoid temperature must be positive, got {temperature}"
            )));
        }
        let va = self.value(a);
        let out = Tensor::new(
            va.rows(),
            va.cols(),
            va.data().iter().map(|x| logistic(x / temperature)).collect(),
        );
        let ng = self.ng(a);
        self.push("sigmoid", out, Op::Sigmoid { x: a, temperature }, ng)
    }

    /// Matrix-vector product `m v`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (vm, vv) = (self.value(m), self.value(v));
        require_vector("matvec", vv)?;
        if vm.cols() != vv.rows() {
            return Err(Error::shape("matvec", format!("{:?} x {:?}", vm.shape(), vv.shape())));
        }
        let x = vv.data();
        let data = (0..vm.rows())
            .map(|r| vm.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let out = Tensor::vector(data);
        let ng = self.ng(m) || self.ng(v);
        self.push("matvec", out, Op::MatVec(m, v), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let out = matmul_raw(va, vb);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push("transpose", out, Op::Transpose(a), ng)
    }

    /// Scales every row so that it sums to the matching entry of `targets`.
    pub fn row_normalize(&mut self, m: Var, targets: &[f64]) -> Result<Var> {
        let vm = self.value(m);
        if targets.len() != vm.rows() {
            return Err(Error::shape(
                "row_normalize",
                format!("{} targets for {} rows", targets.len(), vm.rows()),
            ));
        }
        let mut out = vm.clone();
        let mut sums = Vec::with_capacity(vm.rows());
        let mut n_clamped = 0;
        for r in 0..vm.rows() {
            let (s, c) = floor_den(vm.row(r).iter().sum());
            n_clamped += c as usize;
            sums.push(s);
            let f = targets[r] / s;
            for c in 0..vm.cols() {
                out.set(r, c, vm.get(r, c) * f);
            }
        }
        self.diagnostics.clamped += n_clamped;
        let ng = self.ng(m);
        let op = Op::RowNormalize {
            m,
            targets: targets.into(),
            sums,
        };
        self.push("row_normalize", out, op, ng)
    }

    /// Scales every column so that it sums to the matching entry of `targets`.
    pub fn col_normalize(&mut self, m: Var, targets: &[f64]) -> Result<Var> {
        let vm = self.value(m);
        if targets.len() != vm.cols() {
            return Err(Error::shape(
                "col_normalize",
                format!("{} targets for {} columns", targets.len(), vm.cols()),
            ));
        }
        let mut out = vm.clone();
        let mut sums = Vec::with_capacity(vm.cols());
        let mut n_clamped = 0;
        for c in 0..vm.cols() {
            let (s, cl) = floor_den((0..vm.rows()).map(|r| vm.get(r, c)).sum());
            n_clamped += cl as usize;
            sums.push(s);
            let f = targets[c] / s;
            for r in 0..vm.rows() {
                out.set(r, c, vm.get(r, c) * f);
            }
        }
        self.diagnostics.clamped += n_clamped;
        let ng = self.ng(m);
        let op = Op::ColNormalize {
            m,
            targets: targets.into(),
            sums,
        };
        self.push("col_normalize", out, op, ng)
    }

    /// `exp(beta * x) / sum(exp(beta * x))` over a vector.
    pub fn softmax(&mut self, x: Var, beta: f64) -> Result<Var> {
        let vx = self.value(x);
        require_vector("softmax", vx)?;
        let mx = vx
            .data()
            .iter()
            .map(|v| beta * v)
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = vx.data().iter().map(|v| (beta * v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let out = Tensor::vector(e.into_iter().map(|v| v / s).collect());
        let ng = self.ng(x);
        self.push("softmax", out, Op::Softmax { x, beta }, ng)
    }

    /// Scalar `sum_i w_i x_i` over all entries of `x` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != w.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} entries", w.len(), vx.len()),
            ));
        }
        let s = vx.data().iter().zip(w).map(|(a, b)| a * b).sum();
        let ng = self.ng(x);
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { x, w: w.into() }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Picks entries of a flattened `x` into a new vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of range {}", vx.len())));
        }
        let out = Tensor::vector(idx.iter().map(|&i| vx.data()[i]).collect());
        let ng = self.ng(x);
        self.push("gather", out, Op::Gather { x, idx: idx.into() }, ng)
    }

    /// Stacks vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            require_vector("concat", vp)?;
            data.extend_from_slice(vp.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat", Tensor::vector(data), Op::Concat(parts.to_vec()), ng)
    }

    /// Repeats a length-n vector into an `n x cols` matrix.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let vx = self.value(x);
        require_vector("broadcast_cols", vx)?;
        let mut data = Vec::with_capacity(vx.len() * cols);
        for &v in vx.data() {
            data.extend(std::iter::repeat(v).take(cols));
        }
        let out = Tensor::new(vx.len(), cols, data);
        let ng = self.ng(x);
        self.push("broadcast_cols", out, Op::BroadcastCols { x }, ng)
    }

    /// Adds `bias` (length = columns of `m`) to every row of `m`.
    pub fn add_row_broadcast(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (vm, vb) = (self.value(m), self.value(bias));
        require_vector("add_row_broadcast", vb)?;
        if vb.len() != vm.cols() {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("bias {} for {} columns", vb.len(), vm.cols()),
            ));
        }
        let mut out = vm.clone();
        for r in 0..vm.rows() {
            for c in 0..vm.cols() {
                out.set(r, c, vm.get(r, c) + vb.data()[c]);
            }
        }
        let ng = self.ng(m) || self.ng(bias);
        self.push("add_row_broadcast", out, Op::AddRowBroadcast { m, bias }, ng)
    }

    /// `out_k = prod_{i in groups[k]} x_i`; an empty group yields 1.
    pub fn group_prod(&mut self, x: Var, groups: Arc<[Vec<usize>]>) -> Result<Var> {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(groups.len());
        for g in groups.iter() {
            let mut p = 1.0;
            for &i in g {
                if i >= vx.len() {
                    return Err(Error::shape("group_prod", format!("index {i} out of range")));
                }
                p *= vx.data()[i];
            }
            data.push(p);
        }
        let ng = self.ng(x);
        self.push("group_prod", Tensor::vector(data), Op::GroupProd { x, groups }, ng)
    }

    /// Column-wise minimum; the gradient flows only to the first minimizing row.
    pub fn col_min(&mut self, m: Var) -> Result<Var> {
        let vm = self.value(m);
        if vm.rows() == 0 {
            return Err(Error::shape("col_min", "matrix has no rows"));
        }
        let mut argmin = Vec::with_capacity(vm.cols());
        let mut data = Vec::with_capacity(vm.cols());
        for c in 0..vm.cols() {
            let mut best = 0;
            for r in 1..vm.rows() {
                if vm.get(r, c) < vm.get(best, c) {
                    best = r;
                }
            }
            argmin.push(best);
            data.push(vm.get(best, c));
        }
        let ng = self.ng(m);
        self.push("col_min", Tensor::vector(data), Op::ColMin { m, argmin }, ng)
    }

    /// Records a fused primitive whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Reverse accumulation from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(Error::NonScalarOutput {
                rows: out_shape.0,
                cols: out_shape.1,
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let map = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
            Tensor::new(
                t.rows(),
                t.cols(),
                t.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect(),
            )
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, map(g, &|_, v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, map(g, &|i, v| v * vb.data()[i]));
                self.accumulate(grads, *b, map(g, &|i, v| v * va.data()[i]));
            }
            Op::Div { num, den, eff, clamped } => {
                let vn = self.value(*num);
                self.accumulate(grads, *num, map(g, &|i, v| v / eff[i]));
                self.accumulate(
                    grads,
                    *den,
                    map(g, &|i, v| {
                        if clamped[i] {
                            0.0
                        } else {
                            -v * vn.data()[i] / (eff[i] * eff[i])
                        }
                    }),
                );
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, map(g, &|_, v| c * v)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => {
                let out = &node.value;
                self.accumulate(grads, *a, map(g, &|i, v| v * out.data()[i]));
            }
            Op::Log { x, clamped } => {
                let vx = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    map(g, &|i, v| if clamped[i] { 0.0 } else { v / vx.data()[i] }),
                );
            }
            Op::Tanh(a) => {
                let out = &node.value;
                self.accumulate(
                    grads,
                    *a,
                    map(g, &|i, v| {
                        let t = out.data()[i];
                        v * (1.0 - t * t)
                    }),
                );
            }
            Op::Sigmoid { x, temperature } => {
                let out = &node.value;
                self.accumulate(
                    grads,
                    *x,
                    map(g, &|i, v| {
                        let s = out.data()[i];
                        v * s * (1.0 - s) / temperature
                    }),
                );
            }
            Op::MatVec(m, v) => {
                let (vm, vv) = (self.value(*m), self.value(*v));
                if self.ng(*m) {
                    let mut gm = Tensor::zeros(vm.rows(), vm.cols());
                    for r in 0..vm.rows() {
                        let gr = g.data()[r];
                        for c in 0..vm.cols() {
                            gm.set(r, c, gr * vv.data()[c]);
                        }
                    }
                    self.accumulate(grads, *m, gm);
                }
                if self.ng(*v) {
                    let mut gv = vec![0.0; vm.cols()];
                    for r in 0..vm.rows() {
                        let gr = g.data()[r];
                        for (c, acc) in gv.iter_mut().enumerate() {
                            *acc += vm.get(r, c) * gr;
                        }
                    }
                    self.accumulate(grads, *v, Tensor::vector(gv));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, matmul_raw(g, &vb.transpose()));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, matmul_raw(&va.transpose(), g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::RowNormalize { m, targets, sums } => {
                let vm = self.value(*m);
                let mut gm = Tensor::zeros(vm.rows(), vm.cols());
                for r in 0..vm.rows() {
                    let s = sums[r];
                    let dot: f64 = (0..vm.cols()).map(|c| g.get(r, c) * vm.get(r, c)).sum();
                    for c in 0..vm.cols() {
                        gm.set(r, c, targets[r] / s * (g.get(r, c) - dot / s));
                    }
                }
                self.accumulate(grads, *m, gm);
            }
            Op::ColNormalize { m, targets, sums } => {
                let vm = self.value(*m);
                let mut gm = Tensor::zeros(vm.rows(), vm.cols());
                for c in 0..vm.cols() {
                    let s = sums[c];
                    let dot: f64 = (0..vm.rows()).map(|r| g.get(r, c) * vm.get(r, c)).sum();
                    for r in 0..vm.rows() {
                        gm.set(r, c, targets[c] / s * (g.get(r, c) - dot / s));
                    }
                }
                self.accumulate(grads, *m, gm);
            }
            Op::Softmax { x, beta } => {
                let p = &node.value;
                let dot: f64 = g.data().iter().zip(p.data()).map(|(a, b)| a * b).sum();
                self.accumulate(grads, *x, map(g, &|i, v| beta * p.data()[i] * (v - dot)));
            }
            Op::WeightedSum { x, w } => {
                let gs = g.data()[0];
                let vx = self.value(*x);
                self.accumulate(grads, *x, map(vx, &|i, _| gs * w[i]));
            }
            Op::Sum(x) => {
                let gs = g.data()[0];
                let vx = self.value(*x);
                self.accumulate(grads, *x, map(vx, &|_, _| gs));
            }
            Op::Gather { x, idx } => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                for (k, &i) in idx.iter().enumerate() {
                    gx.data_mut()[i] += g.data()[k];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let piece = Tensor::vector(g.data()[offset..offset + n].to_vec());
                    self.accumulate(grads, p, piece);
                    offset += n;
                }
            }
            Op::BroadcastCols { x } => {
                let gx = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                self.accumulate(grads, *x, Tensor::vector(gx));
            }
            Op::AddRowBroadcast { m, bias } => {
                self.accumulate(grads, *m, g.clone());
                if self.ng(*bias) {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            *acc += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::vector(gb));
                }
            }
            Op::GroupProd { x, groups } => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                let mut prefix = Vec::new();
                for (k, grp) in groups.iter().enumerate() {
                    let gk = g.data()[k];
                    if gk == 0.0 {
                        continue;
                    }
                    // prefix[t] = prod of the first t members; products of the
                    // others avoid dividing by a zero member.
                    prefix.clear();
                    prefix.push(1.0);
                    for &i in grp {
                        let last = *prefix.last().unwrap();
                        prefix.push(last * vx.data()[i]);
                    }
                    let mut suffix = 1.0;
                    for (t, &i) in grp.iter().enumerate().rev() {
                        gx.data_mut()[i] += gk * prefix[t] * suffix;
                        suffix *= vx.data()[i];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ColMin { m, argmin } => {
                let vm = self.value(*m);
                let mut gm = Tensor::zeros(vm.rows(), vm.cols());
                for (c, &r) in argmin.iter().enumerate() {
                    gm.set(r, c, g.data()[c]);
                }
                self.accumulate(grads, *m, gm);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&ins, &node.value, g);
                debug_assert_eq!(gs.len(), inputs.len());
                for (&v, gv) in inputs.iter().zip(gs) {
                    self.accumulate(grads, v, gv);
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        for t in 0..k {
            let av = a.get(i, t);
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                let cur = out.get(i, j);
                out.set(i, j, cur + av * b.get(t, j));
            }
        }
    }
    out
}
