//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every differentiable operation in execution order.
//! Because operands must already exist when an operation is recorded, the
//! record order is a topological order and [`Tape::backward`] is a single
//! reverse sweep. Tapes are rebuilt for every training step.

use super::tensor::{matmul, matmul_nt, matmul_tn, Real, Tensor};
use super::NumericsError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations selectable through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    NormalizeRows { input: Var, norms: Vec<f64> },
    MaskedLogSumExp { input: Var, mask: Vec<bool> },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::NormalizeRows { .. } => "l2_normalize",
            Op::MaskedLogSumExp { .. } => "masked_logsumexp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.dims[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.dims[v.0]),
        }
    }
}

fn same_dims<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(), NumericsError> {
    if a.dims() != b.dims() {
        return Err(NumericsError::Shape {
            op,
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (inputs, masks, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        same_dims("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        same_dims("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        same_dims("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds the vector `b` (length n) to every row of the `m×n` matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, n) = av.as_matrix().ok_or_else(|| NumericsError::Rank {
            op: "add_row",
            dims: av.dims().to_vec(),
        })?;
        if bv.len() != n || bv.dims().len() != 1 {
            return Err(NumericsError::Shape {
                op: "add_row",
                left: av.dims().to_vec(),
                right: bv.dims().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            data.extend(
                row.iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| T::from_f64(x.to_f64() + y.to_f64())),
            );
        }
        let out = Tensor::new(av.dims().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if let Some(i) = av.data().iter().position(|v| v.to_f64() <= 0.0) {
            return Err(NumericsError::Domain {
                op: "log",
                index: i,
                value: av.data()[i].to_f64(),
            });
        }
        let out = av.map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    /// Dispatches one of the elementwise operations by tag.
    pub fn elementwise(&mut self, op: ElementwiseOp, operands: &[Var]) -> Result<Var, NumericsError> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(NumericsError::Arity {
                op: "elementwise",
                expected: arity,
                got: operands.len(),
            });
        }
        match op {
            ElementwiseOp::Add => self.add(operands[0], operands[1]),
            ElementwiseOp::Sub => self.sub(operands[0], operands[1]),
            ElementwiseOp::Mul => self.mul(operands[0], operands[1]),
            ElementwiseOp::Relu => Ok(self.relu(operands[0])),
            ElementwiseOp::Exp => Ok(self.exp(operands[0])),
            ElementwiseOp::Log => self.log(operands[0]),
            ElementwiseOp::Scale(c) => Ok(self.scale(operands[0], c)),
        }
    }

    /// Divides every row of a matrix (or a single vector) by its L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let (m, n) = av.as_matrix().ok_or_else(|| NumericsError::Rank {
            op: "l2_normalize",
            dims: av.dims().to_vec(),
        })?;
        let mut norms = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            let norm = row
                .iter()
                .map(|v| {
                    let x = v.to_f64();
                    x * x
                })
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(NumericsError::Degenerate {
                    op: "l2_normalize",
                    row: i,
                });
            }
            norms.push(norm);
            data.extend(row.iter().map(|&v| T::from_f64(v.to_f64() / norm)));
        }
        let out = Tensor::new(av.dims().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::NormalizeRows { input: a, norms }, rg))
    }

    /// Row-wise `log Σ exp(a[r][c])` over the columns selected by `mask`
    /// (row-major, same shape as `a`), computed with max subtraction.
    pub fn masked_logsumexp_rows(&mut self, a: Var, mask: Vec<bool>) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let (m, n) = av.as_matrix().ok_or_else(|| NumericsError::Rank {
            op: "masked_logsumexp",
            dims: av.dims().to_vec(),
        })?;
        if mask.len() != m * n {
            return Err(NumericsError::Shape {
                op: "masked_logsumexp",
                left: av.dims().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            let sel = &mask[i * n..(i + 1) * n];
            out.push(T::from_f64(masked_lse(row, sel).ok_or(
                NumericsError::Degenerate {
                    op: "masked_logsumexp",
                    row: i,
                },
            )?));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::MaskedLogSumExp { input: a, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(T::from_f64(self.value(a).sum_f64()));
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(T::from_f64(av.sum_f64() / av.len() as f64));
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Fails with the name of the first operation whose output is not finite.
    pub fn check_finite(&self) -> Result<(), NumericsError> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.is_finite() {
                return Err(NumericsError::NonFinite {
                    op: node.op.name(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, NumericsError> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(NumericsError::NonScalarRoot {
                dims: root_val.dims().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(root_val.dims()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let da = matmul_nt(&g, self.value(*b));
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let db = matmul_tn(self.value(*a), &g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose()?);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        let n = self.value(*b).len();
                        let mut col = vec![0.0f64; n];
                        for row in g.data().chunks(n) {
                            for (c, v) in col.iter_mut().zip(row) {
                                *c += v.to_f64();
                            }
                        }
                        let db = Tensor::new(
                            self.value(*b).dims().to_vec(),
                            col.into_iter().map(T::from_f64).collect(),
                        )?;
                        accumulate(&mut grads, *b, db);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::Relu(a) => {
                    let da = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, g.zip_map(&node.value, |x, y| x * y));
                }
                Op::Log(a) => {
                    accumulate(&mut grads, *a, g.zip_map(self.value(*a), |x, y| x / y));
                }
                Op::NormalizeRows { input, norms } => {
                    let y = &node.value;
                    let (m, n) = y.as_matrix().expect("normalized value is a matrix");
                    let mut data = Vec::with_capacity(m * n);
                    for (i, norm) in norms.iter().enumerate().take(m) {
                        let yr = &y.data()[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let dot: f64 = yr
                            .iter()
                            .zip(gr)
                            .map(|(a, b)| a.to_f64() * b.to_f64())
                            .sum();
                        data.extend(yr.iter().zip(gr).map(|(yv, gv)| {
                            T::from_f64((gv.to_f64() - yv.to_f64() * dot) / norm)
                        }));
                    }
                    accumulate(&mut grads, *input, Tensor::new(y.dims().to_vec(), data)?);
                }
                Op::MaskedLogSumExp { input, mask } => {
                    let x = self.value(*input);
                    let (m, n) = x.as_matrix().expect("lse input is a matrix");
                    let mut data = Vec::with_capacity(m * n);
                    for i in 0..m {
                        let lse = node.value.data()[i].to_f64();
                        let gi = g.data()[i].to_f64();
                        for j in 0..n {
                            let v = if mask[i * n + j] {
                                gi * (x.data()[i * n + j].to_f64() - lse).exp()
                            } else {
                                0.0
                            };
                            data.push(T::from_f64(v));
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::new(x.dims().to_vec(), data)?);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::filled(self.value(*a).dims(), gv));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let gv = T::from_f64(g.data()[0].to_f64() / av.len() as f64);
                    accumulate(&mut grads, *a, Tensor::filled(av.dims(), gv));
                }
            }
        }
        // Only leaves keep their gradient; intermediates were consumed.
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = T::from_f64(e.to_f64() + x.to_f64());
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Max-shifted log-sum-exp over the selected entries; `None` when nothing is selected.
pub fn masked_lse<T: Real>(row: &[T], mask: &[bool]) -> Option<f64> {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let s: f64 = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| (v.to_f64() - max).exp())
        .sum();
    Some(max + s.ln())
}
