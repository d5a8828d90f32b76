//! Tape-based reverse-mode differentiation over the closed op set the cells
//! and losses need.
//!
//! Recording is eager: every op executes immediately with the same kernels an
//! untaped computation would use, so taped and untaped forward values are
//! bit-identical. One backward pass visits each node exactly once in reverse
//! order, accumulating adjoints by ordered summation.

use std::cell::Cell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{contract, invert_permutation, ContractPlan, DenseTensor};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

thread_local! {
    static FAULT_INJECTION: Cell<bool> = const { Cell::new(false) };
}

/// Testing hook: corrupt the sigmoid backward rule so gradient-checker
/// negative controls have a real fault to catch.
pub fn set_backward_fault_injection(enabled: bool) {
    FAULT_INJECTION.with(|f| f.set(enabled));
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Contract {
        a: Var,
        b: Var,
        plan: ContractPlan,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Reshape {
        a: Var,
        from: Vec<usize>,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
        from_len: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
        lens: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    Affine {
        a: Var,
        scale: f64,
    },
    Tanh {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    RowNormalize {
        a: Var,
        norms: Vec<f64>,
    },
    LogSumExpRows {
        a: Var,
    },
    GatherCols {
        a: Var,
        idx: Vec<usize>,
    },
    ScaleByScalar {
        a: Var,
        s: Var,
    },
    AddScalar {
        a: Var,
        s: Var,
    },
    SumAll {
        a: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: DenseTensor,
}

/// Recorded computation graph. Nodes are stored in execution order, which is
/// already a topological order.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    consumed: bool,
}

/// Accumulated adjoints keyed by parameter identifier. Parameters registered
/// on the tape but untouched by the output map to zero tensors.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    grads: BTreeMap<String, DenseTensor>,
}

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.grads.get(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &DenseTensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm across all parameters.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(DenseTensor::is_finite)
    }

    /// Ordered elementwise accumulation, used for sharded batch reduction.
    pub fn accumulate(&mut self, other: &GradMap) -> Result<()> {
        for (name, grad) in &other.grads {
            match self.grads.get_mut(name) {
                Some(g) => *g = g.add(grad)?,
                None => {
                    self.grads.insert(name.clone(), grad.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            *g = g.scale(factor);
        }
    }

    fn insert_or_add(&mut self, name: &str, grad: &DenseTensor) -> Result<()> {
        match self.grads.get_mut(name) {
            Some(g) => *g = g.add(grad)?,
            None => {
                self.grads.insert(name.to_string(), grad.clone());
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, op: Op, value: DenseTensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    /// Number of recorded non-leaf operations.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Param))
            .count()
    }

    /// Constant input; no gradient flows to it.
    pub fn leaf(&mut self, value: DenseTensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Trainable parameter; backward reports its adjoint under `name`.
    pub fn param(&mut self, name: &str, value: DenseTensor) -> Var {
        let var = self.push(Op::Param, value);
        self.params.push((name.to_string(), var));
        var
    }

    pub fn contract(&mut self, a: Var, b: Var, axes_a: &[usize], axes_b: &[usize]) -> Result<Var> {
        let plan = ContractPlan::new(
            self.value(a).shape(),
            self.value(b).shape(),
            axes_a,
            axes_b,
        )?;
        let value = plan.execute(self.value(a), self.value(b))?;
        let a_shape = self.value(a).shape().to_vec();
        let b_shape = self.value(b).shape().to_vec();
        Ok(self.push(
            Op::Contract {
                a,
                b,
                plan,
                a_shape,
                b_shape,
            },
            value,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let from = self.value(a).shape().to_vec();
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape { a, from }, value))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        Ok(self.push(
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            value,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let from_len = *self
            .value(a)
            .shape()
            .get(axis)
            .ok_or(Error::AxisOutOfRange {
                axis,
                rank: self.value(a).rank(),
            })?;
        let value = self.value(a).slice(axis, start, len)?;
        Ok(self.push(
            Op::Slice {
                a,
                axis,
                start,
                from_len,
            },
            value,
        ))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&DenseTensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = DenseTensor::concat(axis, &tensors)?;
        let lens = parts.iter().map(|&p| self.value(p).shape()[axis]).collect();
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
                lens,
            },
            value,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Add a bias whose shape equals the trailing suffix of `a`'s shape.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let a_shape = self.value(a).shape().to_vec();
        let b_shape = self.value(bias).shape().to_vec();
        if b_shape.len() > a_shape.len() || a_shape[a_shape.len() - b_shape.len()..] != b_shape[..] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {:?} is not a trailing suffix of {:?}",
                b_shape, a_shape
            )));
        }
        let inner: usize = b_shape.iter().product();
        let outer = self.value(a).len() / inner;
        let mut data = self.value(a).data().to_vec();
        let bias_data = self.value(bias).data();
        for o in 0..outer {
            for (slot, &bv) in data[o * inner..(o + 1) * inner].iter_mut().zip(bias_data) {
                *slot += bv;
            }
        }
        let value = DenseTensor::new(a_shape, data)?;
        Ok(self.push(Op::AddBias { a, bias }, value))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard { a, b }, value))
    }

    /// y = scale * x + shift.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|v| scale * v + shift);
        self.push(Op::Affine { a, scale }, value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).tanh();
        self.push(Op::Tanh { a }, value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        self.push(Op::Sigmoid { a }, value)
    }

    /// Normalize each row of a [rows, dim] tensor to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "row_normalize needs [rows, dim], got {:?}",
                t.shape()
            )));
        }
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        let mut norms = Vec::with_capacity(rows);
        let mut data = t.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * dim..(r + 1) * dim];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-150 {
                return Err(Error::ZeroNormEmbedding(r));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let value = DenseTensor::new(vec![rows, dim], data)?;
        Ok(self.push(Op::RowNormalize { a, norms }, value))
    }

    /// Stabilized log(sum(exp(row))) over the last axis of [rows, k].
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "logsumexp_rows needs [rows, k], got {:?}",
                t.shape()
            )));
        }
        let (rows, k) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * k..(r + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            out.push(m + sum.ln());
        }
        let value = DenseTensor::new(vec![rows], out)?;
        Ok(self.push(Op::LogSumExpRows { a }, value))
    }

    /// Pick one column per row: `out[r] = a[r, idx[r]]`.
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || idx.len() != t.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "gather_cols needs [rows, k] with one index per row, got {:?} and {} indices",
                t.shape(),
                idx.len()
            )));
        }
        let (rows, k) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(rows);
        for (r, &j) in idx.iter().enumerate() {
            if j >= k {
                return Err(Error::AxisOutOfRange { axis: j, rank: k });
            }
            out.push(t.data()[r * k + j]);
        }
        let value = DenseTensor::new(vec![rows], out)?;
        Ok(self.push(Op::GatherCols { a, idx }, value))
    }

    /// Multiply by a trainable scalar (shape `[1]`).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch("scale_by needs a scalar".into()));
        }
        let sv = self.value(s).data()[0];
        let value = self.value(a).scale(sv);
        Ok(self.push(Op::ScaleByScalar { a, s }, value))
    }

    /// Add a trainable scalar (shape `[1]`) to every entry.
    pub fn shift_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch("shift_by needs a scalar".into()));
        }
        let sv = self.value(s).data()[0];
        let value = self.value(a).add_scalar(sv);
        Ok(self.push(Op::AddScalar { a, s }, value))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = DenseTensor::scalar(self.value(a).sum());
        self.push(Op::SumAll { a }, value)
    }

    /// Mean over the batch of -log softmax(logits) at the labels; shape `[1]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "cross entropy needs [batch, classes] logits with one label per row, got {:?} and {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let (batch, classes) = (t.shape()[0], t.shape()[1]);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let row = &t.data()[r * classes..(r + 1) * classes];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = DenseTensor::scalar(total / batch as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
        ))
    }

    /// Reverse sweep from `output` seeded with `seed_grad`. Returns the
    /// adjoint of every registered parameter; the tape cannot be swept again.
    pub fn backward(&mut self, output: Var, seed_grad: &DenseTensor) -> Result<GradMap> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if seed_grad.shape() != self.value(output).shape() {
            return Err(Error::ShapeMismatch(format!(
                "seed grad shape {:?} != output shape {:?}",
                seed_grad.shape(),
                self.value(output).shape()
            )));
        }

        let mut adjoints: Vec<Option<DenseTensor>> = vec![None; self.nodes.len()];
        adjoints[output.0] = Some(seed_grad.clone());

        fn accumulate(slot: &mut Option<DenseTensor>, grad: DenseTensor) -> Result<()> {
            match slot {
                Some(existing) => *existing = existing.add(&grad)?,
                None => *slot = Some(grad),
            }
            Ok(())
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = adjoints[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param => {
                    adjoints[i] = Some(grad); // kept for collection below
                }
                Op::Contract {
                    a,
                    b,
                    plan,
                    a_shape,
                    b_shape,
                } => {
                    // canonical matrices A' [fa, p], B' [p, fb], Y = A' B'
                    let a_perm = self.nodes[a.0]
                        .value
                        .permute(&plan.perm_a)?
                        .reshape(vec![plan.free_a, plan.paired])?;
                    let b_perm = self.nodes[b.0]
                        .value
                        .permute(&plan.perm_b)?
                        .reshape(vec![plan.paired, plan.free_b])?;
                    let g_mat = grad.reshape(vec![plan.free_a, plan.free_b])?;
                    // dA' = G B'^T, dB' = A'^T G
                    let ga = contract(&g_mat, &b_perm, &[1], &[1])?;
                    let gb = contract(&a_perm, &g_mat, &[0], &[0])?;
                    let perm_a_shape: Vec<usize> =
                        plan.perm_a.iter().map(|&ax| a_shape[ax]).collect();
                    let perm_b_shape: Vec<usize> =
                        plan.perm_b.iter().map(|&ax| b_shape[ax]).collect();
                    let ga_full = ga
                        .reshape(perm_a_shape)?
                        .permute(&invert_permutation(&plan.perm_a))?;
                    let gb_full = gb
                        .reshape(perm_b_shape)?
                        .permute(&invert_permutation(&plan.perm_b))?;
                    accumulate(&mut adjoints[a.0], ga_full)?;
                    accumulate(&mut adjoints[b.0], gb_full)?;
                }
                Op::Reshape { a, from } => {
                    accumulate(&mut adjoints[a.0], grad.reshape(from.clone())?)?;
                }
                Op::Permute { a, perm } => {
                    accumulate(&mut adjoints[a.0], grad.permute(&invert_permutation(perm))?)?;
                }
                Op::Slice {
                    a,
                    axis,
                    start,
                    from_len,
                } => {
                    let in_shape = self.nodes[a.0].value.shape().to_vec();
                    let mut full = DenseTensor::zeros(in_shape.clone());
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let len = grad.shape()[*axis];
                    for o in 0..outer {
                        let dst = o * from_len * inner + start * inner;
                        let src = o * len * inner;
                        full.data_mut()[dst..dst + len * inner]
                            .copy_from_slice(&grad.data()[src..src + len * inner]);
                    }
                    accumulate(&mut adjoints[a.0], full)?;
                }
                Op::Concat { parts, axis, lens } => {
                    let mut offset = 0;
                    for (part, &len) in parts.iter().zip(lens) {
                        let piece = grad.slice(*axis, offset, len)?;
                        accumulate(&mut adjoints[part.0], piece)?;
                        offset += len;
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut adjoints[a.0], grad.clone())?;
                    accumulate(&mut adjoints[b.0], grad)?;
                }
                Op::AddBias { a, bias } => {
                    let bias_shape = self.nodes[bias.0].value.shape().to_vec();
                    let inner: usize = bias_shape.iter().product();
                    let outer = grad.len() / inner;
                    let mut bias_grad = vec![0.0; inner];
                    for o in 0..outer {
                        for (slot, &gv) in bias_grad
                            .iter_mut()
                            .zip(&grad.data()[o * inner..(o + 1) * inner])
                        {
                            *slot += gv;
                        }
                    }
                    accumulate(&mut adjoints[a.0], grad.clone())?;
                    accumulate(
                        &mut adjoints[bias.0],
                        DenseTensor::new(bias_shape, bias_grad)?,
                    )?;
                }
                Op::Hadamard { a, b } => {
                    let ga = grad.hadamard(&self.nodes[b.0].value)?;
                    let gb = grad.hadamard(&self.nodes[a.0].value)?;
                    accumulate(&mut adjoints[a.0], ga)?;
                    accumulate(&mut adjoints[b.0], gb)?;
                }
                Op::Affine { a, scale } => {
                    accumulate(&mut adjoints[a.0], grad.scale(*scale))?;
                }
                Op::Tanh { a } => {
                    let y = &self.nodes[i].value;
                    let gx = grad.hadamard(&y.map(|v| 1.0 - v * v))?;
                    accumulate(&mut adjoints[a.0], gx)?;
                }
                Op::Sigmoid { a } => {
                    let y = &self.nodes[i].value;
                    let factor = if FAULT_INJECTION.with(Cell::get) {
                        1.05
                    } else {
                        1.0
                    };
                    let gx = grad.hadamard(&y.map(|v| factor * v * (1.0 - v)))?;
                    accumulate(&mut adjoints[a.0], gx)?;
                }
                Op::RowNormalize { a, norms } => {
                    let y = &self.nodes[i].value;
                    let (rows, dim) = (y.shape()[0], y.shape()[1]);
                    let mut gx = vec![0.0; rows * dim];
                    for r in 0..rows {
                        let yr = &y.data()[r * dim..(r + 1) * dim];
                        let gr = &grad.data()[r * dim..(r + 1) * dim];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..dim {
                            gx[r * dim + c] = (gr[c] - dot * yr[c]) / norms[r];
                        }
                    }
                    accumulate(&mut adjoints[a.0], DenseTensor::new(vec![rows, dim], gx)?)?;
                }
                Op::LogSumExpRows { a } => {
                    let x = &self.nodes[a.0].value;
                    let (rows, k) = (x.shape()[0], x.shape()[1]);
                    let mut gx = vec![0.0; rows * k];
                    for r in 0..rows {
                        let row = &x.data()[r * k..(r + 1) * k];
                        let m = row.iter().fold(f64::NEG_INFINITY, |acc, &b| acc.max(b));
                        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for c in 0..k {
                            gx[r * k + c] = grad.data()[r] * (row[c] - m).exp() / sum;
                        }
                    }
                    accumulate(&mut adjoints[a.0], DenseTensor::new(vec![rows, k], gx)?)?;
                }
                Op::GatherCols { a, idx } => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let k = shape[1];
                    let mut gx = vec![0.0; shape[0] * k];
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * k + j] += grad.data()[r];
                    }
                    accumulate(&mut adjoints[a.0], DenseTensor::new(shape, gx)?)?;
                }
                Op::ScaleByScalar { a, s } => {
                    let sv = self.nodes[s.0].value.data()[0];
                    let gs: f64 = grad
                        .data()
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, x)| g * x)
                        .sum();
                    accumulate(&mut adjoints[a.0], grad.scale(sv))?;
                    accumulate(&mut adjoints[s.0], DenseTensor::scalar(gs))?;
                }
                Op::AddScalar { a, s } => {
                    let gs: f64 = grad.data().iter().sum();
                    accumulate(&mut adjoints[a.0], grad.clone())?;
                    accumulate(&mut adjoints[s.0], DenseTensor::scalar(gs))?;
                }
                Op::SumAll { a } => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    accumulate(
                        &mut adjoints[a.0],
                        DenseTensor::filled(shape, grad.data()[0]),
                    )?;
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let x = &self.nodes[logits.0].value;
                    let (batch, classes) = (x.shape()[0], x.shape()[1]);
                    let scale = grad.data()[0] / batch as f64;
                    let mut gx = vec![0.0; batch * classes];
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &x.data()[r * classes..(r + 1) * classes];
                        let m = row.iter().fold(f64::NEG_INFINITY, |acc, &b| acc.max(b));
                        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for c in 0..classes {
                            let p = (row[c] - m).exp() / sum;
                            gx[r * classes + c] = scale * (p - if c == label { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(
                        &mut adjoints[logits.0],
                        DenseTensor::new(vec![batch, classes], gx)?,
                    )?;
                }
            }
        }

        let mut map = GradMap::default();
        for (name, var) in &self.params {
            match adjoints[var.0].take() {
                Some(grad) => map.insert_or_add(name, &grad)?,
                None => {
                    let zero = DenseTensor::zeros(self.nodes[var.0].value.shape().to_vec());
                    map.insert_or_add(name, &zero)?;
                }
            }
        }
        Ok(map)
    }

    /// Backward from a scalar output seeded with 1.
    pub fn backward_scalar(&mut self, output: Var) -> Result<GradMap> {
        if self.value(output).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward_scalar needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let seed = DenseTensor::scalar(1.0);
        self.backward(output, &seed)
    }
}

/// Default coordinate budget for [`gradcheck`].
pub const GRADCHECK_MAX_COORDS: usize = 200;

/// Compare reverse-mode gradients of a scalar-valued computation against
/// central finite differences on up to `max_coords` sampled coordinates.
/// Returns the maximum relative error, with denominator max(|a|, |b|, 1e-8).
pub fn gradcheck<F>(
    mut build: F,
    params: &BTreeMap<String, DenseTensor>,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    let run = |build: &mut F, params: &BTreeMap<String, DenseTensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, value) in params {
            vars.insert(name.clone(), tape.param(name, value.clone()));
        }
        let out = build(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::ShapeMismatch("gradcheck needs a scalar loss".into()));
        }
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("gradcheck forward value"));
        }
        Ok(v)
    };

    // analytic gradients
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, value) in params {
        vars.insert(name.clone(), tape.param(name, value.clone()));
    }
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward_scalar(out)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradcheck analytic gradient"));
    }

    // sample coordinates across all parameters
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, value) in params {
        for i in 0..value.len() {
            coords.push((name.clone(), i));
        }
    }
    let mut rng = crate::rng::Rng::new(seed);
    rng.shuffle(&mut coords);
    coords.truncate(max_coords);

    let mut max_rel = 0.0f64;
    for (name, i) in coords {
        let mut plus = params.clone();
        plus.get_mut(&name).unwrap().data_mut()[i] += eps;
        let mut minus = params.clone();
        minus.get_mut(&name).unwrap().data_mut()[i] -= eps;
        let fd = (run(&mut build, &plus)? - run(&mut build, &minus)?) / (2.0 * eps);
        let ad = grads.get(&name).unwrap().data()[i];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        if !rel.is_finite() {
            return Err(Error::NonFinite("gradcheck relative error"));
        }
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
