//! Dense multi-axis tensors in row-major layout.
//!
//! All values are immutable after construction and every operation is a pure
//! function, so tensors can be shared freely across workers. Storage is always
//! f64; a tensor tagged [`DType::F32`] keeps its values rounded to f32
//! precision after every operation, which is the only effect of the flag.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

thread_local! {
    static MADD_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-add count of all matmul-backed contractions on this thread since
/// the last call. Used by the FLOP accounting tests.
pub fn take_madd_count() -> u64 {
    MADD_COUNT.with(|c| c.replace(0))
}

fn record_madds(n: u64) {
    MADD_COUNT.with(|c| c.set(c.get().wrapping_add(n)));
}

/// n-axis numeric array with explicit shape over a flat row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

pub fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape_len(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                shape_len(&shape)
            )));
        }
        Ok(DenseTensor {
            shape,
            data,
            dtype: DType::F64,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape_len(&shape);
        DenseTensor {
            shape,
            data: vec![0.0; n],
            dtype: DType::F64,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape_len(&shape);
        DenseTensor {
            shape,
            data: vec![value; n],
            dtype: DType::F64,
        }
    }

    pub fn scalar(value: f64) -> Self {
        DenseTensor {
            shape: vec![1],
            data: vec![value],
            dtype: DType::F64,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = shape_len(&shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        DenseTensor {
            shape,
            data,
            dtype: DType::F64,
        }
    }

    /// i.i.d. Gaussian entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n = shape_len(&shape);
        let data = (0..n).map(|_| rng.next_normal() * std).collect();
        DenseTensor {
            shape,
            data,
            dtype: DType::F64,
        }
    }

    /// 2-D identity.
    pub fn eye(n: usize) -> Self {
        let mut t = DenseTensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Convert to the given dtype. Moving to F32 rounds every entry through
    /// f32; moving back to F64 keeps the rounded values.
    pub fn to_dtype(&self, dtype: DType) -> Self {
        let mut out = self.clone();
        out.dtype = dtype;
        out.round_to_dtype();
        out
    }

    fn round_to_dtype(&mut self) {
        if self.dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    fn result_dtype(&self, other: &DenseTensor) -> DType {
        if self.dtype == DType::F32 && other.dtype == DType::F32 {
            DType::F32
        } else {
            DType::F64
        }
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let s = strides(&self.shape);
        let flat: usize = index.iter().zip(&s).map(|(i, st)| i * st).sum();
        self.data[flat]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let s = strides(&self.shape);
        let flat: usize = index.iter().zip(&s).map(|(i, st)| i * st).sum();
        self.data[flat] = value;
    }

    /// Same flat data under a new shape.
    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Self> {
        if shape_len(&new_shape) != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} (len {}) to {:?} (len {})",
                self.shape,
                self.data.len(),
                new_shape,
                shape_len(&new_shape)
            )));
        }
        Ok(DenseTensor {
            shape: new_shape,
            data: self.data.clone(),
            dtype: self.dtype,
        })
    }

    /// Reorder axes; `perm[i]` names the source axis placed at position `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let r = self.shape.len();
        if perm.len() != r {
            return Err(Error::ShapeMismatch(format!(
                "permutation {:?} does not match rank {}",
                perm, r
            )));
        }
        let mut seen = vec![false; r];
        for &p in perm {
            if p >= r || seen[p] {
                return Err(Error::ShapeMismatch(format!(
                    "invalid permutation {:?}",
                    perm
                )));
            }
            seen[p] = true;
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides = strides(&self.shape);
        let mut data = vec![0.0; self.data.len()];
        // walk destination in order, computing the source offset incrementally
        let mut idx = vec![0usize; r];
        for slot in data.iter_mut() {
            let src: usize = idx
                .iter()
                .zip(perm)
                .map(|(&i, &p)| i * src_strides[p])
                .sum();
            *slot = self.data[src];
            for ax in (0..r).rev() {
                idx[ax] += 1;
                if idx[ax] < new_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(DenseTensor {
            shape: new_shape,
            data,
            dtype: self.dtype,
        })
    }

    /// Contiguous sub-block along one axis.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: self.shape.len(),
            });
        }
        if start + len > self.shape[axis] {
            return Err(Error::ShapeMismatch(format!(
                "slice {}..{} exceeds axis {} of length {}",
                start,
                start + len,
                axis,
                self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let axis_len = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_len * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(DenseTensor {
            shape,
            data,
            dtype: self.dtype,
        })
    }

    /// Concatenate along one axis; all other axes must agree.
    pub fn concat(axis: usize, parts: &[&DenseTensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of zero tensors".into()))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape.len() != rank {
                return Err(Error::ShapeMismatch("concat rank mismatch".into()));
            }
            for (ax, (&a, &b)) in p.shape.iter().zip(&first.shape).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::ShapeMismatch(format!(
                        "concat shape mismatch on axis {ax}: {a} vs {b}"
                    )));
                }
            }
            axis_total += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = axis_total;
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let dtype = if parts.iter().all(|p| p.dtype == DType::F32) {
            DType::F32
        } else {
            DType::F64
        };
        Ok(DenseTensor { shape, data, dtype })
    }

    fn binary_same_shape(&self, other: &DenseTensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{op} requires equal shapes, got {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let mut out = DenseTensor {
            shape: self.shape.clone(),
            data,
            dtype: self.result_dtype(other),
        };
        out.round_to_dtype();
        Ok(out)
    }

    pub fn add(&self, other: &DenseTensor) -> Result<Self> {
        self.binary_same_shape(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<Self> {
        self.binary_same_shape(other, "sub", |a, b| a - b)
    }

    /// Element-wise Hadamard product.
    pub fn hadamard(&self, other: &DenseTensor) -> Result<Self> {
        self.binary_same_shape(other, "hadamard", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            dtype: self.dtype,
        };
        out.round_to_dtype();
        out
    }

    pub fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&self, other: &DenseTensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::ShapeMismatch("matmul needs 2-D operands".into()));
        }
        if self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims {} vs {}",
                self.shape[1], other.shape[0]
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let data = matmul_kernel(&self.data, &other.data, m, k, n);
        Ok(DenseTensor {
            shape: vec![m, n],
            data,
            dtype: self.result_dtype(other),
        })
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2(&self) -> Result<Self> {
        self.permute(&[1, 0])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major (m,k)x(k,n) -> (m,n), counting m*k*n multiply-adds.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    record_madds((m * k * n) as u64);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Pairwise tensor contraction: sum over `axes_a[i]` of `a` paired with
/// `axes_b[i]` of `b`. Output axes are the free axes of `a` in their original
/// order, then the free axes of `b`. Implemented as reshape-permute-matmul.
pub fn contract(
    a: &DenseTensor,
    b: &DenseTensor,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<DenseTensor> {
    let plan = ContractPlan::new(a.shape(), b.shape(), axes_a, axes_b)?;
    plan.execute(a, b)
}

/// Precomputed axis bookkeeping for one contraction; reused by the autograd
/// backward pass, which needs the same permutations.
#[derive(Debug, Clone)]
pub struct ContractPlan {
    pub perm_a: Vec<usize>,
    pub perm_b: Vec<usize>,
    pub free_a: usize,
    pub paired: usize,
    pub free_b: usize,
    pub out_shape: Vec<usize>,
}

impl ContractPlan {
    pub fn new(
        shape_a: &[usize],
        shape_b: &[usize],
        axes_a: &[usize],
        axes_b: &[usize],
    ) -> Result<Self> {
        if axes_a.len() != axes_b.len() {
            return Err(Error::ShapeMismatch(format!(
                "contract pairing lengths differ: {} vs {}",
                axes_a.len(),
                axes_b.len()
            )));
        }
        let check = |axes: &[usize], rank: usize| -> Result<()> {
            let mut seen = vec![false; rank];
            for &ax in axes {
                if ax >= rank {
                    return Err(Error::AxisOutOfRange { axis: ax, rank });
                }
                if seen[ax] {
                    return Err(Error::ShapeMismatch(format!("repeated axis {ax}")));
                }
                seen[ax] = true;
            }
            Ok(())
        };
        check(axes_a, shape_a.len())?;
        check(axes_b, shape_b.len())?;
        for (&ax_a, &ax_b) in axes_a.iter().zip(axes_b) {
            if shape_a[ax_a] != shape_b[ax_b] {
                return Err(Error::ShapeMismatch(format!(
                    "paired axes have different lengths: a[{}]={} vs b[{}]={}",
                    ax_a, shape_a[ax_a], ax_b, shape_b[ax_b]
                )));
            }
        }
        let free_axes_a: Vec<usize> = (0..shape_a.len()).filter(|ax| !axes_a.contains(ax)).collect();
        let free_axes_b: Vec<usize> = (0..shape_b.len()).filter(|ax| !axes_b.contains(ax)).collect();
        let perm_a: Vec<usize> = free_axes_a.iter().chain(axes_a).copied().collect();
        let perm_b: Vec<usize> = axes_b.iter().chain(&free_axes_b).copied().collect();
        let free_a: usize = free_axes_a.iter().map(|&ax| shape_a[ax]).product();
        let free_b: usize = free_axes_b.iter().map(|&ax| shape_b[ax]).product();
        let paired: usize = axes_a.iter().map(|&ax| shape_a[ax]).product();
        let out_shape: Vec<usize> = free_axes_a
            .iter()
            .map(|&ax| shape_a[ax])
            .chain(free_axes_b.iter().map(|&ax| shape_b[ax]))
            .collect();
        Ok(ContractPlan {
            perm_a,
            perm_b,
            free_a,
            paired,
            free_b,
            out_shape,
        })
    }

    pub fn execute(&self, a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
        let a_mat = a.permute(&self.perm_a)?;
        let b_mat = b.permute(&self.perm_b)?;
        let data = matmul_kernel(a_mat.data(), b_mat.data(), self.free_a, self.paired, self.free_b);
        let mut out = DenseTensor {
            shape: if self.out_shape.is_empty() {
                vec![1]
            } else {
                self.out_shape.clone()
            },
            data,
            dtype: a.result_dtype(b),
        };
        out.round_to_dtype();
        Ok(out)
    }
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
