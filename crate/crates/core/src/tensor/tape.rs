use std::hash::{DefaultHasher, Hash, Hasher};

use super::kernels::{self, log_softmax_row};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiv {
        student: usize,
        teacher_probs: Vec<T>,
        student_probs: Vec<T>,
        /// `factor / (batch * temperature)`, the per-element gradient scale.
        grad_scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so inputs always precede the
/// operations that consume them. A tape belongs to a single worker and is
/// consumed by [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.grad_of(v)
    }

    /// Hash of the branch taken by every relu (input sign) and max-pool
    /// (argmax) on the tape. Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[*x].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?.ensure_finite("matmul")?;
        let rg = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    /// Adds a length-`N` bias to every row of a `B x N` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let n = bv.len();
        if xv.shape().len() != 2 || xv.shape()[1] != n {
            return Err(Error::dim(format!(
                "bias of length {n} cannot be added to {:?}",
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.grad_of(x) || self.grad_of(bias);
        Ok(self.push(out, Op::AddBias { x: x.0, bias: bias.0 }, rg))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?
        .ensure_finite("conv2d")?;
        let rg = self.grad_of(input) || self.grad_of(kernel) || bias.is_some_and(|b| self.grad_of(b));
        let op = Op::Conv2d {
            input: input.0,
            kernel: kernel.0,
            bias: bias.map(|b| b.0),
            stride,
            padding,
        };
        Ok(self.push(out, op, rg))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2x2_with_argmax(self.value(input))?;
        let rg = self.grad_of(input);
        Ok(self.push(out, Op::MaxPool { input: input.0, argmax }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        let rg = self.grad_of(x);
        self.push(out, Op::Relu(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.grad_of(x);
        Ok(self.push(out, Op::Reshape(x.0), rg))
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let batch = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, vec![batch, rest])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let rg = self.grad_of(x);
        self.push(out, Op::Scale(x.0, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.grad_of(x);
        self.push(Tensor::scalar(total), Op::Sum(x.0), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (batch, classes) = match lv.shape() {
            [b, c] => (*b, *c),
            s => return Err(Error::dim(format!("cross_entropy logits must be 2-D, got {s:?}"))),
        };
        if labels.len() != batch {
            return Err(Error::dim(format!(
                "cross_entropy got {} labels for {batch} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::param(format!("label {bad} out of range for {classes} classes")));
        }
        let mut logp = lv.data().to_vec();
        let mut total = 0.0f64;
        for (row, &label) in logp.chunks_mut(classes).zip(labels) {
            log_softmax_row(row, T::one());
            total -= row[label].as_f64();
        }
        let loss = T::from_f64_lossy(total / batch as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy".into()));
        }
        let rg = self.grad_of(logits);
        let probs = if rg {
            logp.iter().map(|v| v.exp()).collect()
        } else {
            Vec::new()
        };
        let op = Op::CrossEntropy {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Batch mean of `KL(softmax(teacher/t) || softmax(student/t))`, scaled
    /// by `t^2` when `t != 1`. The teacher is treated as a constant.
    pub fn kl_div(&mut self, teacher: Var, student: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::param(format!("temperature must be > 0, got {temperature}")));
        }
        self.same_shape(teacher, student, "kl_div")?;
        let sv = self.value(student);
        let (batch, classes) = match sv.shape() {
            [b, c] => (*b, *c),
            s => return Err(Error::dim(format!("kl_div logits must be 2-D, got {s:?}"))),
        };
        let tau = T::from_f64_lossy(temperature);
        let mut log_t = self.value(teacher).data().to_vec();
        let mut log_s = sv.data().to_vec();
        let mut total = 0.0f64;
        for (rt, rs) in log_t.chunks_mut(classes).zip(log_s.chunks_mut(classes)) {
            log_softmax_row(rt, tau);
            log_softmax_row(rs, tau);
            for (&lt, &ls) in rt.iter().zip(rs.iter()) {
                let pt = lt.exp();
                // 0 * ln 0 is taken as 0; lt is finite so pt == 0 only on underflow.
                total += (pt * (lt - ls)).as_f64();
            }
        }
        let factor = if temperature == 1.0 {
            1.0
        } else {
            temperature * temperature
        };
        let loss = T::from_f64_lossy(factor * total / batch as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite("kl_div".into()));
        }
        let rg = self.grad_of(student);
        let (teacher_probs, student_probs) = if rg {
            (
                log_t.iter().map(|v| v.exp()).collect(),
                log_s.iter().map(|v| v.exp()).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let op = Op::KlDiv {
            student: student.0,
            teacher_probs,
            student_probs,
            grad_scale: T::from_f64_lossy(factor / (batch as f64 * temperature)),
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage("loss is not on this tape".into()))?;
        if !root.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let root_grad = root.requires_grad;
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        let mut leaves: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        leaves.resize_with(nodes.len(), || None);
        if root_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |idx: usize, contribution: Vec<T>| {
                if nodes[idx].requires_grad {
                    accumulate(&mut grads[idx], contribution);
                }
            };
            let wants = |idx: usize| nodes[idx].requires_grad;
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (da, db) = kernels::matmul_backward(
                        &nodes[*a].value,
                        &nodes[*b].value,
                        &g,
                        wants(*a),
                        wants(*b),
                    );
                    if let Some(da) = da {
                        send(*a, da);
                    }
                    if let Some(db) = db {
                        send(*b, db);
                    }
                }
                Op::AddBias { x, bias } => {
                    if wants(*bias) {
                        let n = nodes[*bias].value.len();
                        let mut db = vec![T::zero(); n];
                        for row in g.chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        send(*bias, db);
                    }
                    send(*x, g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let want = (wants(*input), wants(*kernel), bias.is_some_and(wants));
                    let cg = kernels::conv2d_backward(
                        &nodes[*input].value,
                        &nodes[*kernel].value,
                        &g,
                        *stride,
                        *padding,
                        want,
                    )?;
                    if let Some(d) = cg.input {
                        send(*input, d);
                    }
                    if let Some(d) = cg.kernel {
                        send(*kernel, d);
                    }
                    if let (Some(b), Some(d)) = (bias, cg.bias) {
                        send(*b, d);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = vec![T::zero(); nodes[*input].value.len()];
                    for (&src, &v) in argmax.iter().zip(&g) {
                        dx[src] += v;
                    }
                    send(*input, dx);
                }
                Op::Relu(x) => {
                    let dx = nodes[*x]
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    send(*x, dx);
                }
                Op::Reshape(x) => send(*x, g),
                Op::Add(a, b) => {
                    if wants(*b) {
                        send(*b, g.clone());
                    }
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        send(*b, g.iter().map(|&v| -v).collect());
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    if wants(*a) {
                        send(*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
                    }
                    if wants(*b) {
                        send(*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
                    }
                }
                Op::Scale(x, factor) => send(*x, g.iter().map(|&v| v * *factor).collect()),
                Op::Sum(x) => {
                    let n = nodes[*x].value.len();
                    send(*x, vec![g[0]; n]);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let scale = g[0] / T::from_usize(batch).expect("batch fits");
                    let mut d = probs.clone();
                    for (row, &label) in d.chunks_mut(classes).zip(labels) {
                        row[label] -= T::one();
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    send(*logits, d);
                }
                Op::KlDiv {
                    student,
                    teacher_probs,
                    student_probs,
                    grad_scale,
                } => {
                    let s = g[0] * *grad_scale;
                    let d = student_probs
                        .iter()
                        .zip(teacher_probs)
                        .map(|(&ps, &pt)| (ps - pt) * s)
                        .collect();
                    send(*student, d);
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Gradients of the trainable leaves reached by a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` when the leaf is a constant or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
