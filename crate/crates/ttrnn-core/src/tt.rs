//! Tensor-train matrices: construction, validation, dense reconstruction,
//! efficient matvec, TT-SVD, initialization, and the parameter/FLOP
//! accounting formulas.
//!
//! A TT matrix encodes a (prod row_dims) x (prod col_dims) matrix as a chain
//! of 4-axis cores. Multi-indices flatten row-major with the first core's
//! index leading, so a gate-stacked matrix (leading core d0 = g, m0 = 1)
//! keeps each gate's rows contiguous.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::rng::Rng;
use crate::tensor::{contract, shape_len, DenseTensor};

/// One TT core; values have shape [d, m, r_prev, r_next].
#[derive(Debug, Clone, PartialEq)]
pub struct TTCore {
    values: DenseTensor,
}

impl TTCore {
    pub fn new(values: DenseTensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::InvalidTt(format!(
                "core must have 4 axes [d, m, r_prev, r_next], got {:?}",
                values.shape()
            )));
        }
        if values.shape().contains(&0) {
            return Err(Error::InvalidTt("core axis of length zero".into()));
        }
        Ok(TTCore { values })
    }

    pub fn values(&self) -> &DenseTensor {
        &self.values
    }

    /// In-place access for optimizer updates; the 4-axis shape must stay.
    pub fn values_mut(&mut self) -> &mut DenseTensor {
        &mut self.values
    }

    pub fn row_dim(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn col_dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn rank_left(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn rank_right(&self) -> usize {
        self.values.shape()[3]
    }

    /// The rank matrix G(i, j) of shape [r_prev, r_next].
    pub fn rank_matrix(&self, i: usize, j: usize) -> DenseTensor {
        let (rl, rr) = (self.rank_left(), self.rank_right());
        DenseTensor::from_fn(vec![rl, rr], |idx| {
            self.values.get(&[i, j, idx[0], idx[1]])
        })
    }
}

/// Ordered chain of TT cores encoding a dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TTMatrix {
    cores: Vec<TTCore>,
}

impl TTMatrix {
    pub fn new(cores: Vec<TTCore>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::InvalidTt("TT matrix needs at least one core".into()));
        }
        if cores[0].rank_left() != 1 || cores[cores.len() - 1].rank_right() != 1 {
            return Err(Error::InvalidTt(format!(
                "boundary ranks must be 1, got {} and {}",
                cores[0].rank_left(),
                cores[cores.len() - 1].rank_right()
            )));
        }
        for k in 1..cores.len() {
            if cores[k].rank_left() != cores[k - 1].rank_right() {
                return Err(Error::RankChain {
                    core: k,
                    left: cores[k].rank_left(),
                    right: cores[k - 1].rank_right(),
                });
            }
        }
        Ok(TTMatrix { cores })
    }

    pub fn cores(&self) -> &[TTCore] {
        &self.cores
    }

    /// In-place access for optimizer updates; dims and ranks must stay.
    pub fn cores_mut(&mut self) -> &mut [TTCore] {
        &mut self.cores
    }

    pub fn num_cores(&self) -> usize {
        self.cores.len()
    }

    pub fn row_dims(&self) -> Vec<usize> {
        self.cores.iter().map(TTCore::row_dim).collect()
    }

    pub fn col_dims(&self) -> Vec<usize> {
        self.cores.iter().map(TTCore::col_dim).collect()
    }

    /// Rank chain r_0..r_n.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![self.cores[0].rank_left()];
        r.extend(self.cores.iter().map(TTCore::rank_right));
        r
    }

    /// Encoded matrix row count.
    pub fn num_rows(&self) -> usize {
        self.row_dims().iter().product()
    }

    /// Encoded matrix column count.
    pub fn num_cols(&self) -> usize {
        self.col_dims().iter().product()
    }

    /// Total stored elements across cores.
    pub fn num_elements(&self) -> usize {
        self.cores.iter().map(|c| c.values().len()).sum()
    }

    /// Replace one core, revalidating the chain.
    pub fn with_core(&self, k: usize, values: DenseTensor) -> Result<Self> {
        let mut cores = self.cores.clone();
        cores[k] = TTCore::new(values)?;
        TTMatrix::new(cores)
    }
}

/// A TT matrix whose leading core carries the gate axis (d0 = g, m0 = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct GateStackedTT {
    tt: TTMatrix,
}

impl GateStackedTT {
    pub fn new(tt: TTMatrix) -> Result<Self> {
        let c0 = &tt.cores()[0];
        if tt.num_cores() < 2 {
            return Err(Error::InvalidTt(
                "gate-stacked TT needs a gate core plus at least one inner core".into(),
            ));
        }
        if c0.col_dim() != 1 || c0.rank_left() != 1 {
            return Err(Error::InvalidTt(format!(
                "gate core must have m0 = 1, r_prev = 1; got m0 = {}, r_prev = {}",
                c0.col_dim(),
                c0.rank_left()
            )));
        }
        Ok(GateStackedTT { tt })
    }

    pub fn tt(&self) -> &TTMatrix {
        &self.tt
    }

    /// In-place access for optimizer updates; the gate-core layout must stay.
    pub fn tt_mut(&mut self) -> &mut TTMatrix {
        &mut self.tt
    }

    pub fn into_tt(self) -> TTMatrix {
        self.tt
    }

    pub fn gate_count(&self) -> usize {
        self.tt.cores()[0].row_dim()
    }

    /// Gate-core rank r0.
    pub fn mixture_rank(&self) -> usize {
        self.tt.cores()[0].rank_right()
    }

    /// Rows per gate of the encoded matrix.
    pub fn rows_per_gate(&self) -> usize {
        self.tt.num_rows() / self.gate_count()
    }

    /// The mixing matrix V of shape [g, r0]: the gate core with its singleton
    /// axes squeezed out.
    pub fn mixing_matrix(&self) -> DenseTensor {
        let c0 = self.tt.cores()[0].values();
        c0.reshape(vec![self.gate_count(), self.mixture_rank()])
            .expect("gate core squeeze")
    }

    /// Plain TT matrix for gate `i`: the gate core row V_i contracted into
    /// the first inner core, leaving an ordinary rank-1-boundary chain.
    pub fn gate_submatrix(&self, i: usize) -> Result<TTMatrix> {
        let g = self.gate_count();
        if i >= g {
            return Err(Error::GateIndex { index: i, gates: g });
        }
        let v = self.mixing_matrix();
        let r0 = self.mixture_rank();
        let vi = v.slice(0, i, 1)?.reshape(vec![r0])?;
        let inner0 = self.tt.cores()[1].values();
        let (d, m, rr) = (
            inner0.shape()[0],
            inner0.shape()[1],
            inner0.shape()[3],
        );
        // [r0] x [d, m, r0, rr] over the shared rank -> [d, m, rr]
        let mixed = contract(&vi, inner0, &[0], &[2])?.reshape(vec![d, m, 1, rr])?;
        let mut cores = vec![TTCore::new(mixed)?];
        cores.extend(self.tt.cores()[2..].iter().cloned());
        TTMatrix::new(cores)
    }

    /// Dense family of the r0 shared matrices encoded by the inner cores,
    /// shape [r0, D, M]. Subject to the reconstruction guard.
    pub fn shared_family_dense(&self) -> Result<DenseTensor> {
        check_reconstruction_allowed()?;
        let inner = &self.tt.cores()[1..];
        let r0 = self.mixture_rank();
        // accumulate left-to-right with the open boundary rank r0 in front
        let mut acc = DenseTensor::eye(r0).reshape(vec![r0, 1, 1, r0])?;
        for core in inner {
            let (d, m, rr) = (core.row_dim(), core.col_dim(), core.rank_right());
            let dp = acc.shape()[1];
            let mp = acc.shape()[2];
            // [r0, Dp, Mp, rl] x [d, m, rl, rr] -> [r0, Dp, Mp, d, m, rr]
            let next = contract(&acc, core.values(), &[3], &[2])?;
            acc = next
                .permute(&[0, 1, 3, 2, 4, 5])?
                .reshape(vec![r0, dp * d, mp * m, rr])?;
        }
        let d_total = acc.shape()[1];
        let m_total = acc.shape()[2];
        acc.reshape(vec![r0, d_total, m_total])
    }
}

thread_local! {
    static RECONSTRUCTION_FORBIDDEN: Cell<bool> = const { Cell::new(false) };
}

/// RAII guard that forbids materializing the dense matrix behind any TT
/// object on this thread. Training with TT cells installs it so the
/// compression claim holds at train time.
pub struct ReconstructionGuard {
    previous: bool,
}

impl ReconstructionGuard {
    pub fn forbid() -> Self {
        let previous = RECONSTRUCTION_FORBIDDEN.with(|f| f.replace(true));
        ReconstructionGuard { previous }
    }
}

impl Drop for ReconstructionGuard {
    fn drop(&mut self) {
        let prev = self.previous;
        RECONSTRUCTION_FORBIDDEN.with(|f| f.set(prev));
    }
}

/// Whether the guard is active on this thread.
pub fn reconstruction_forbidden() -> bool {
    RECONSTRUCTION_FORBIDDEN.with(Cell::get)
}

fn check_reconstruction_allowed() -> Result<()> {
    if reconstruction_forbidden() {
        Err(Error::ReconstructionForbidden)
    } else {
        Ok(())
    }
}

/// Factor N into n factors with product N, sorted ascending, chosen to
/// minimize the largest factor (ties broken lexicographically). Factors of 1
/// pad when N has too few divisors.
pub fn balanced_factorization(n_total: usize, n_factors: usize) -> Vec<usize> {
    assert!(n_total >= 1 && n_factors >= 1);
    let mut best: Option<Vec<usize>> = None;
    let mut current = Vec::with_capacity(n_factors);
    // ascending enumeration, so the last factor is the maximum
    fn recurse(
        remaining: usize,
        start: usize,
        slots: usize,
        current: &mut Vec<usize>,
        best: &mut Option<Vec<usize>>,
    ) {
        if slots == 1 {
            if remaining >= start {
                current.push(remaining);
                let better = match best {
                    None => true,
                    Some(b) => {
                        let max_new = *current.last().unwrap();
                        let max_old = *b.last().unwrap();
                        max_new < max_old || (max_new == max_old && current[..] < b[..])
                    }
                };
                if better {
                    *best = Some(current.clone());
                }
                current.pop();
            }
            return;
        }
        for f in start..=remaining {
            if remaining.is_multiple_of(f) {
                current.push(f);
                recurse(remaining / f, f, slots - 1, current, best);
                current.pop();
            }
        }
    }
    recurse(n_total, 1, n_factors, &mut current, &mut best);
    best.expect("every N >= 1 admits a factorization with 1-padding")
}

/// Dense D x M matrix encoded by the chain: entry (i, j) is the product
/// of per-index rank matrices. Subject to the reconstruction guard.
pub fn tt_to_dense(ttm: &TTMatrix) -> Result<DenseTensor> {
    check_reconstruction_allowed()?;
    let mut acc = DenseTensor::filled(vec![1, 1, 1], 1.0);
    for core in ttm.cores() {
        let (d, m, rr) = (core.row_dim(), core.col_dim(), core.rank_right());
        let dp = acc.shape()[0];
        let mp = acc.shape()[1];
        // [Dp, Mp, rl] x [d, m, rl, rr] -> [Dp, Mp, d, m, rr]
        let next = contract(&acc, core.values(), &[2], &[2])?;
        acc = next
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(vec![dp * d, mp * m, rr])?;
    }
    let d_total = acc.shape()[0];
    let m_total = acc.shape()[1];
    acc.reshape(vec![d_total, m_total])
}

/// Batched matvec y = W x for a TT-encoded W, never materializing W.
///
/// Strict left-to-right schedule carrying a [batch, rows-done, rank,
/// cols-remaining] intermediate, which realizes the O(n r^2 d M) cost regime
/// for balanced factorizations.
pub fn tt_matvec(ttm: &TTMatrix, x: &DenseTensor) -> Result<DenseTensor> {
    if x.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "tt_matvec input must be [batch, M], got {:?}",
            x.shape()
        )));
    }
    let batch = x.shape()[0];
    let m_total = ttm.num_cols();
    if x.shape()[1] != m_total {
        return Err(Error::ShapeMismatch(format!(
            "tt_matvec input dim {} != encoded cols {}",
            x.shape()[1],
            m_total
        )));
    }
    let mut acc = x.reshape(vec![batch, 1, 1, m_total])?;
    for core in ttm.cores() {
        let (d, m, rl, rr) = (
            core.row_dim(),
            core.col_dim(),
            core.rank_left(),
            core.rank_right(),
        );
        let dp = acc.shape()[1];
        let m_rest = acc.shape()[3] / m;
        let split = acc.reshape(vec![batch, dp, rl, m, m_rest])?;
        // [b, Dp, rl, m, Mrest] x [d, m, rl, rr] over (rl, m) -> [b, Dp, Mrest, d, rr]
        let mixed = contract(&split, core.values(), &[2, 3], &[2, 1])?;
        acc = mixed
            .permute(&[0, 1, 3, 4, 2])?
            .reshape(vec![batch, dp * d, rr, m_rest])?;
    }
    let d_total = acc.shape()[1];
    acc.reshape(vec![batch, d_total])
}

/// Exact multiply-add count of the `tt_matvec` schedule.
pub fn flop_count_matvec(ttm: &TTMatrix, batch: usize) -> u64 {
    let mut count: u64 = 0;
    let mut rows_done: u64 = 1;
    let mut cols_rest: u64 = ttm.num_cols() as u64;
    for core in ttm.cores() {
        let (d, m, rl, rr) = (
            core.row_dim() as u64,
            core.col_dim() as u64,
            core.rank_left() as u64,
            core.rank_right() as u64,
        );
        cols_rest /= m;
        count += batch as u64 * rows_done * cols_rest * rl * m * d * rr;
        rows_done *= d;
    }
    count
}

/// Multiply-add count of the dense matvec the TT one replaces.
pub fn flop_count_dense_matvec(rows: usize, cols: usize, batch: usize) -> u64 {
    rows as u64 * cols as u64 * batch as u64
}

/// TT-SVD factorization of a dense matrix into the given factorization
/// scheme. `max_ranks` caps the n-1 internal ranks (use usize::MAX entries
/// for unbounded); `svd_tol` drops singular values below `svd_tol * sigma_1`.
pub fn tt_svd(
    w: &DenseTensor,
    row_dims: &[usize],
    col_dims: &[usize],
    max_ranks: &[usize],
    svd_tol: f64,
) -> Result<TTMatrix> {
    let n = row_dims.len();
    if n == 0 || col_dims.len() != n {
        return Err(Error::ShapeMismatch(
            "row_dims and col_dims must be non-empty and equal length".into(),
        ));
    }
    if max_ranks.len() + 1 != n {
        return Err(Error::ShapeMismatch(format!(
            "max_ranks must have {} entries, got {}",
            n - 1,
            max_ranks.len()
        )));
    }
    let d_total = shape_len(row_dims);
    let m_total = shape_len(col_dims);
    if w.rank() != 2 || w.shape() != [d_total, m_total] {
        return Err(Error::ShapeMismatch(format!(
            "matrix shape {:?} does not match factorization ({} x {})",
            w.shape(),
            d_total,
            m_total
        )));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("tt_svd input"));
    }

    // regroup [i1..in, j1..jn] into combined modes p_k = (i_k, j_k)
    let mut full_shape = row_dims.to_vec();
    full_shape.extend_from_slice(col_dims);
    let tensor = w.reshape(full_shape)?;
    let perm: Vec<usize> = (0..n).flat_map(|k| [k, n + k]).collect();
    let paired = tensor.permute(&perm)?;
    let modes: Vec<usize> = (0..n).map(|k| row_dims[k] * col_dims[k]).collect();

    let mut carry = paired.reshape(vec![modes[0], modes[1..].iter().product::<usize>().max(1)])?;
    let mut rank_prev = 1usize;
    let mut cores: Vec<TTCore> = Vec::with_capacity(n);
    for k in 0..n - 1 {
        let rest: usize = modes[k + 1..].iter().product();
        let unfold = carry.reshape(vec![rank_prev * modes[k], rest])?;
        let f = svd(&unfold)?;
        let sigma1 = f.s.first().copied().unwrap_or(0.0);
        let mut rank = f
            .s
            .iter()
            .filter(|&&s| s > svd_tol * sigma1 && s > 0.0)
            .count()
            .min(max_ranks[k]);
        rank = rank.max(1); // zero blocks keep a single zero core
        let u_r = f.u.slice(1, 0, rank)?;
        let core = u_r
            .reshape(vec![rank_prev, row_dims[k], col_dims[k], rank])?
            .permute(&[1, 2, 0, 3])?;
        cores.push(TTCore::new(core)?);
        // carry = diag(s) * Vt restricted to the kept rank
        let vt_r = f.vt.slice(0, 0, rank)?;
        let mut sv = vt_r.clone();
        for r in 0..rank {
            let row = &mut sv.data_mut()[r * rest..(r + 1) * rest];
            for v in row.iter_mut() {
                *v *= f.s[r];
            }
        }
        carry = sv;
        rank_prev = rank;
    }
    let last = carry
        .reshape(vec![rank_prev, row_dims[n - 1], col_dims[n - 1], 1])?
        .permute(&[1, 2, 0, 3])?;
    cores.push(TTCore::new(last)?);
    TTMatrix::new(cores)
}

/// Random TT matrix with i.i.d. Gaussian cores scaled so the encoded global
/// matrix has entry standard deviation close to `target_std`.
pub fn init_tt(
    row_dims: &[usize],
    col_dims: &[usize],
    ranks: &[usize],
    seed: u64,
    target_std: f64,
) -> Result<TTMatrix> {
    let n = row_dims.len();
    if col_dims.len() != n || ranks.len() != n + 1 {
        return Err(Error::ShapeMismatch(format!(
            "init_tt dims/ranks inconsistent: {} row dims, {} col dims, {} ranks",
            n,
            col_dims.len(),
            ranks.len()
        )));
    }
    if ranks[0] != 1 || ranks[n] != 1 {
        return Err(Error::InvalidTt("boundary ranks must be 1".into()));
    }
    assert!(target_std > 0.0);
    let interior: f64 = ranks[1..n].iter().product::<usize>() as f64;
    // global entries are sums over `interior` uncorrelated rank paths, each a
    // product of n independent core entries
    let sigma_core = (target_std * target_std / interior).powf(1.0 / (2.0 * n as f64));
    let mut rng = Rng::new(seed);
    let mut cores = Vec::with_capacity(n);
    for k in 0..n {
        let shape = vec![row_dims[k], col_dims[k], ranks[k], ranks[k + 1]];
        cores.push(TTCore::new(DenseTensor::randn(shape, sigma_core, &mut rng))?);
    }
    TTMatrix::new(cores)
}

/// Dense gated-cell count: g * D * (M + D).
pub fn param_count_dense(gates: usize, d_total: usize, m_total: usize) -> u64 {
    gates as u64 * d_total as u64 * (m_total as u64 + d_total as u64)
}

/// Per-gate tensorized count: g * sum_k r_{k-1} r_k d_k (m_k + d_k).
/// `ranks` is the full chain r_0..r_n with boundary entries 1.
pub fn param_count_separate(
    gates: usize,
    row_dims: &[usize],
    col_dims: &[usize],
    ranks: &[usize],
) -> u64 {
    gates as u64 * chain_count(row_dims, col_dims, ranks)
}

/// Fused gate-stacked count: g * r0 + sum_{k=1..n} r_{k-1} r_k d_k
/// (m_k + d_k), with `ranks` the chain r_0..r_n (r_0 the gate-core rank,
/// r_n = 1).
///
/// A concrete fused cell carries two gate cores (one in the W chain, one in
/// the U chain), so its element count exceeds this formula by exactly
/// `g * r0`; see [`param_count_fused_actual`].
pub fn param_count_fused(
    gates: usize,
    row_dims: &[usize],
    col_dims: &[usize],
    ranks: &[usize],
) -> u64 {
    gates as u64 * ranks[0] as u64 + chain_count(row_dims, col_dims, ranks)
}

/// Element count of a fused cell's two stacked TT matrices (two gate cores).
pub fn param_count_fused_actual(
    gates: usize,
    row_dims: &[usize],
    col_dims: &[usize],
    ranks: &[usize],
) -> u64 {
    2 * gates as u64 * ranks[0] as u64 + chain_count(row_dims, col_dims, ranks)
}

fn chain_count(row_dims: &[usize], col_dims: &[usize], ranks: &[usize]) -> u64 {
    row_dims
        .iter()
        .zip(col_dims)
        .enumerate()
        .map(|(k, (&d, &m))| ranks[k] as u64 * ranks[k + 1] as u64 * d as u64 * (m as u64 + d as u64))
        .sum()
}

// --- serialization -------------------------------------------------------

const TT_RECORD_VERSION: u32 = 1;

impl TTMatrix {
    /// Self-describing little-endian record: version, n, row_dims, col_dims,
    /// ranks, then per-core flat fp64 arrays.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&TT_RECORD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_cores() as u32).to_le_bytes());
        for d in self.row_dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for m in self.col_dims() {
            out.extend_from_slice(&(m as u32).to_le_bytes());
        }
        for r in self.ranks() {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
        for core in self.cores() {
            for v in core.values().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cursor = 0usize;
        let read_u32 = |cursor: &mut usize| -> Result<u32> {
            let end = *cursor + 4;
            if end > bytes.len() {
                return Err(Error::Checkpoint("truncated TT record".into()));
            }
            let v = u32::from_le_bytes(bytes[*cursor..end].try_into().unwrap());
            *cursor = end;
            Ok(v)
        };
        let version = read_u32(&mut cursor)?;
        if version != TT_RECORD_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: TT_RECORD_VERSION,
            });
        }
        let n = read_u32(&mut cursor)? as usize;
        if n == 0 {
            return Err(Error::Checkpoint("TT record with zero cores".into()));
        }
        let mut row_dims = Vec::with_capacity(n);
        for _ in 0..n {
            row_dims.push(read_u32(&mut cursor)? as usize);
        }
        let mut col_dims = Vec::with_capacity(n);
        for _ in 0..n {
            col_dims.push(read_u32(&mut cursor)? as usize);
        }
        let mut ranks = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            ranks.push(read_u32(&mut cursor)? as usize);
        }
        let mut cores = Vec::with_capacity(n);
        for k in 0..n {
            let len = row_dims[k] * col_dims[k] * ranks[k] * ranks[k + 1];
            let end = cursor + len * 8;
            if end > bytes.len() {
                return Err(Error::Checkpoint("truncated TT core payload".into()));
            }
            let data: Vec<f64> = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor = end;
            cores.push(TTCore::new(DenseTensor::new(
                vec![row_dims[k], col_dims[k], ranks[k], ranks[k + 1]],
                data,
            )?)?);
        }
        Ok((TTMatrix::new(cores)?, cursor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::take_madd_count;

    fn rel_err(a: &DenseTensor, b: &DenseTensor) -> f64 {
        a.sub(b).unwrap().frob_norm() / b.frob_norm().max(1e-300)
    }

    fn random_tt(
        row_dims: &[usize],
        col_dims: &[usize],
        ranks: &[usize],
        seed: u64,
    ) -> TTMatrix {
        init_tt(row_dims, col_dims, ranks, seed, 1.0).unwrap()
    }

    /// Entrywise oracle: explicit product of per-index rank matrices.
    fn dense_by_rank_products(ttm: &TTMatrix) -> DenseTensor {
        let row_dims = ttm.row_dims();
        let col_dims = ttm.col_dims();
        let d_total = ttm.num_rows();
        let m_total = ttm.num_cols();
        let mut out = DenseTensor::zeros(vec![d_total, m_total]);
        for i in 0..d_total {
            for j in 0..m_total {
                // unflatten row-major, first core leading
                let mut is = Vec::with_capacity(row_dims.len());
                let mut js = Vec::with_capacity(col_dims.len());
                let (mut ri, mut rj) = (i, j);
                for k in (0..row_dims.len()).rev() {
                    is.push(ri % row_dims[k]);
                    ri /= row_dims[k];
                    js.push(rj % col_dims[k]);
                    rj /= col_dims[k];
                }
                is.reverse();
                js.reverse();
                let mut prod = DenseTensor::eye(1);
                for (k, core) in ttm.cores().iter().enumerate() {
                    prod = prod.matmul(&core.rank_matrix(is[k], js[k])).unwrap();
                }
                out.set(&[i, j], prod.data()[0]);
            }
        }
        out
    }

    fn identity_tt_2x2_two_cores() -> TTMatrix {
        let core = |_: ()| {
            let mut v = DenseTensor::zeros(vec![2, 2, 1, 1]);
            v.set(&[0, 0, 0, 0], 1.0);
            v.set(&[1, 1, 0, 0], 1.0);
            TTCore::new(v).unwrap()
        };
        TTMatrix::new(vec![core(()), core(())]).unwrap()
    }

    #[test]
    fn balanced_factorization_examples() {
        assert_eq!(balanced_factorization(256, 2), vec![16, 16]);
        assert_eq!(balanced_factorization(512, 3), vec![8, 8, 8]);
        assert_eq!(balanced_factorization(40, 2), vec![5, 8]);
        assert_eq!(balanced_factorization(1, 3), vec![1, 1, 1]);
        assert_eq!(balanced_factorization(7, 2), vec![1, 7]);
        assert_eq!(balanced_factorization(14, 2), vec![2, 7]);
    }

    #[test]
    fn balanced_factorization_matches_exhaustive_oracle() {
        // oracle: enumerate every ascending tuple by brute force over all
        // candidate values, then apply the selection rule
        for &(n_total, n_factors) in &[(36usize, 2usize), (60, 3), (96, 2), (100, 4), (30, 3)] {
            let mut all: Vec<Vec<usize>> = Vec::new();
            let mut cur = Vec::new();
            fn gen(rem: usize, start: usize, slots: usize, cur: &mut Vec<usize>, all: &mut Vec<Vec<usize>>) {
                if slots == 0 {
                    if rem == 1 {
                        all.push(cur.clone());
                    }
                    return;
                }
                for f in start..=rem {
                    if rem.is_multiple_of(f) {
                        cur.push(f);
                        gen(rem / f, f, slots - 1, cur, all);
                        cur.pop();
                    }
                }
            }
            gen(n_total, 1, n_factors, &mut cur, &mut all);
            let best = all
                .into_iter()
                .min_by(|a, b| {
                    a.last()
                        .unwrap()
                        .cmp(b.last().unwrap())
                        .then_with(|| a.cmp(b))
                })
                .unwrap();
            assert_eq!(balanced_factorization(n_total, n_factors), best);
        }
    }

    #[test]
    fn single_core_dense_is_the_core_slice() {
        let mut rng = Rng::new(2);
        let v = DenseTensor::randn(vec![3, 4, 1, 1], 1.0, &mut rng);
        let ttm = TTMatrix::new(vec![TTCore::new(v.clone()).unwrap()]).unwrap();
        let dense = tt_to_dense(&ttm).unwrap();
        assert_eq!(dense.data(), v.reshape(vec![3, 4]).unwrap().data());
    }

    #[test]
    fn kronecker_of_identities_is_identity() {
        let ttm = identity_tt_2x2_two_cores();
        let dense = tt_to_dense(&ttm).unwrap();
        assert_eq!(dense, DenseTensor::eye(4));
    }

    #[test]
    fn dense_reconstruction_matches_rank_product_oracle() {
        let ttm = random_tt(&[2, 2], &[2, 2], &[1, 3, 1], 31);
        let got = tt_to_dense(&ttm).unwrap();
        let want = dense_by_rank_products(&ttm);
        assert!(rel_err(&got, &want) <= 1e-12);
    }

    #[test]
    fn matvec_of_identity_tt_is_identity() {
        let ttm = identity_tt_2x2_two_cores();
        let mut rng = Rng::new(7);
        let x = DenseTensor::randn(vec![3, 4], 1.0, &mut rng);
        let y = tt_matvec(&ttm, &x).unwrap();
        assert!(rel_err(&y, &x) <= 1e-14);
    }

    #[test]
    fn gate_stacked_shape_maps_64_to_192() {
        // four cores with (d, m) = (3,1), (4,4), (4,4), (4,4)
        let ttm = random_tt(&[3, 4, 4, 4], &[1, 4, 4, 4], &[1, 2, 2, 2, 1], 5);
        let stack = GateStackedTT::new(ttm).unwrap();
        assert_eq!(stack.tt().num_cols(), 64);
        assert_eq!(stack.tt().num_rows(), 192);
        let x = DenseTensor::zeros(vec![2, 64]);
        let y = tt_matvec(stack.tt(), &x).unwrap();
        assert_eq!(y.shape(), &[2, 192]);
    }

    #[test]
    fn matvec_matches_dense_oracle() {
        let mut rng = Rng::new(40);
        let ttm = random_tt(&[2, 2, 2], &[2, 2, 2], &[1, 3, 2, 1], 8);
        let x = DenseTensor::randn(vec![5, 8], 1.0, &mut rng);
        let dense = tt_to_dense(&ttm).unwrap();
        let want = contract(&x, &dense, &[1], &[1]).unwrap();
        let got = tt_matvec(&ttm, &x).unwrap();
        assert!(rel_err(&got, &want) <= 1e-12);
    }

    #[test]
    fn tt_svd_kronecker_rank_one_gets_unit_ranks() {
        // u = u1 (x) u2, v = v1 (x) v2 makes the paired-mode unfolding rank 1
        let mut rng = Rng::new(3);
        let u1 = DenseTensor::randn(vec![4, 1], 1.0, &mut rng);
        let u2 = DenseTensor::randn(vec![1, 4], 1.0, &mut rng);
        let v1 = DenseTensor::randn(vec![4, 1], 1.0, &mut rng);
        let v2 = DenseTensor::randn(vec![1, 4], 1.0, &mut rng);
        let u = u1.matmul(&u2).unwrap().reshape(vec![16, 1]).unwrap();
        let v = v1.matmul(&v2).unwrap().reshape(vec![1, 16]).unwrap();
        let w = u.matmul(&v).unwrap();
        let ttm = tt_svd(&w, &[4, 4], &[4, 4], &[usize::MAX], 1e-10).unwrap();
        assert_eq!(ttm.ranks(), vec![1, 1, 1]);
        let back = tt_to_dense(&ttm).unwrap();
        assert!(rel_err(&back, &w) <= 1e-12);

        // a generic rank-1 matrix is NOT TT-rank 1 under paired modes: its
        // unfolding rank is rank(reshape u) * rank(reshape v)
        let ug = DenseTensor::randn(vec![16, 1], 1.0, &mut rng);
        let vg = DenseTensor::randn(vec![1, 16], 1.0, &mut rng);
        let wg = ug.matmul(&vg).unwrap();
        let ttg = tt_svd(&wg, &[4, 4], &[4, 4], &[usize::MAX], 1e-12).unwrap();
        assert_eq!(ttg.ranks(), vec![1, 16, 1]);
        assert!(rel_err(&tt_to_dense(&ttg).unwrap(), &wg) <= 1e-10);
    }

    #[test]
    fn tt_svd_full_rank_round_trip() {
        let mut rng = Rng::new(77);
        let w = DenseTensor::randn(vec![16, 16], 1.0, &mut rng);
        let ttm = tt_svd(&w, &[4, 4], &[4, 4], &[usize::MAX], 0.0).unwrap();
        let back = tt_to_dense(&ttm).unwrap();
        assert!(rel_err(&back, &w) <= 1e-10);
    }

    #[test]
    fn tt_svd_capped_error_matches_plain_svd_tail() {
        let mut rng = Rng::new(13);
        let w = DenseTensor::randn(vec![8, 8], 1.0, &mut rng);
        let (row_dims, col_dims) = ([2usize, 4usize], [4usize, 2usize]);
        // oracle: singular values of the (d1 m1) x (d2 m2) regrouped unfolding
        let t = w
            .reshape(vec![2, 4, 4, 2])
            .unwrap()
            .permute(&[0, 2, 1, 3])
            .unwrap()
            .reshape(vec![8, 8])
            .unwrap();
        let f = svd(&t).unwrap();
        for cap in 1..=4usize {
            let ttm = tt_svd(&w, &row_dims, &col_dims, &[cap], 0.0).unwrap();
            let back = tt_to_dense(&ttm).unwrap();
            let err = back.sub(&w).unwrap().frob_norm();
            let tail: f64 = f.s[cap.min(f.s.len())..].iter().map(|s| s * s).sum();
            assert!(
                (err - tail.sqrt()).abs() <= 1e-10 * w.frob_norm(),
                "cap {cap}: err {err} vs tail {}",
                tail.sqrt()
            );
        }
    }

    #[test]
    fn tt_svd_rank_cap_error_is_monotone() {
        let mut rng = Rng::new(123);
        for trial in 0..3 {
            let w = DenseTensor::randn(vec![16, 16], 1.0, &mut rng);
            let mut last = f64::INFINITY;
            for cap in 1..=16usize {
                let ttm = tt_svd(&w, &[4, 4], &[4, 4], &[cap], 0.0).unwrap();
                let err = tt_to_dense(&ttm).unwrap().sub(&w).unwrap().frob_norm();
                assert!(err <= last + 1e-9, "trial {trial} cap {cap}");
                last = err;
            }
        }
    }

    #[test]
    fn tt_svd_shape_mismatch_errors() {
        let w = DenseTensor::zeros(vec![6, 6]);
        assert!(tt_svd(&w, &[4, 4], &[4, 4], &[usize::MAX], 0.0).is_err());
        let mut bad = DenseTensor::zeros(vec![4, 4]);
        bad.data_mut()[0] = f64::NAN;
        assert!(tt_svd(&bad, &[2, 2], &[2, 2], &[usize::MAX], 0.0).is_err());
    }

    #[test]
    fn init_tt_is_seed_deterministic() {
        let a = init_tt(&[4, 4], &[4, 4], &[1, 3, 1], 99, 0.1).unwrap();
        let b = init_tt(&[4, 4], &[4, 4], &[1, 3, 1], 99, 0.1).unwrap();
        assert_eq!(a, b);
        let c = init_tt(&[4, 4], &[4, 4], &[1, 3, 1], 100, 0.1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_tt_hits_target_std_within_20_percent() {
        let target = 1.0 / (64.0f64).sqrt();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let mut count = 0usize;
        for seed in 0..10 {
            let ttm = init_tt(&[8, 8], &[8, 8], &[1, 4, 1], seed, target).unwrap();
            let dense = tt_to_dense(&ttm).unwrap();
            for &v in dense.data() {
                sum += v;
                sum2 += v * v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let std = (sum2 / count as f64 - mean * mean).sqrt();
        assert!(
            (std - target).abs() <= 0.2 * target,
            "std {std} vs target {target}"
        );
    }

    #[test]
    fn init_tt_rank_one_is_outer_product() {
        let ttm = init_tt(&[3, 3], &[2, 2], &[1, 1, 1], 17, 1.0).unwrap();
        let dense = tt_to_dense(&ttm).unwrap();
        // rank-1 chain: every 2x2 block (i2,j2) is a scalar multiple of the
        // core-0 slice pattern, so the matrix of block Frobenius inner
        // products has rank 1; check via blocks proportionality.
        let b00 = dense.reshape(vec![3, 3, 2, 2]).unwrap();
        let mut ref_block: Option<Vec<f64>> = None;
        for i1 in 0..3 {
            for j1 in 0..2 {
                let block: Vec<f64> = (0..2)
                    .flat_map(|i2| (0..2).map(move |j2| (i2, j2)))
                    .map(|(i2, j2)| b00.get(&[i1, i2, j1, j2]))
                    .collect();
                match &ref_block {
                    None => ref_block = Some(block),
                    Some(r) => {
                        // block ~ alpha * r for some scalar alpha
                        let num: f64 = block.iter().zip(r).map(|(a, b)| a * b).sum();
                        let den: f64 = r.iter().map(|b| b * b).sum();
                        let alpha = num / den;
                        for (a, b) in block.iter().zip(r) {
                            assert!((a - alpha * b).abs() <= 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dense_count_formula_examples() {
        assert_eq!(param_count_dense(4, 512, 4096), 9_437_184);
        assert_eq!(param_count_dense(3, 512, 4096), 7_077_888);
        assert_eq!(param_count_dense(4, 256, 1), 263_168);
    }

    #[test]
    fn separate_count_formula_examples() {
        assert_eq!(param_count_separate(4, &[4], &[4], &[1, 1]), 128);
        // term by term: 1*2*16*(1+16) + 2*1*16*(1+16) = 544 + 544, times g
        assert_eq!(
            param_count_separate(4, &[16, 16], &[1, 1], &[1, 2, 1]),
            4 * 1088
        );
    }

    #[test]
    fn separate_count_equals_element_enumeration() {
        let mut rng = Rng::new(55);
        for trial in 0..10 {
            let n = 1 + rng.next_below(3);
            let row_dims: Vec<usize> = (0..n).map(|_| 1 + rng.next_below(5)).collect();
            let col_dims: Vec<usize> = (0..n).map(|_| 1 + rng.next_below(5)).collect();
            let mut ranks = vec![1usize];
            for _ in 1..n {
                ranks.push(1 + rng.next_below(4));
            }
            ranks.push(1);
            let g = 3 + trial % 2;
            // enumerate elements of 2g concrete TT matrices: g over (d,m)
            // for the input side and g over (d,d) for the hidden side
            let one_w = random_tt(&row_dims, &col_dims, &ranks, trial as u64).num_elements();
            let one_u = random_tt(&row_dims, &row_dims, &ranks, trial as u64).num_elements();
            let total = g as u64 * (one_w as u64 + one_u as u64);
            assert_eq!(
                param_count_separate(g, &row_dims, &col_dims, &ranks),
                total
            );
        }
    }

    #[test]
    fn fused_count_formula_example() {
        // g=4, n=2, d=(16,16), m=(1,1), r0=r1=2, r2=1
        assert_eq!(
            param_count_fused(4, &[16, 16], &[1, 1], &[2, 2, 1]),
            8 + 1088 + 544
        );
        assert_eq!(
            param_count_fused_actual(4, &[16, 16], &[1, 1], &[2, 2, 1]),
            16 + 1088 + 544
        );
    }

    #[test]
    fn fused_count_r0_one_is_pure_weight_tying() {
        let row_dims = [8usize, 8];
        let col_dims = [4usize, 4];
        let ranks = [1usize, 3, 1];
        let shared = chain_count(&row_dims, &col_dims, &ranks);
        assert_eq!(
            param_count_fused(4, &row_dims, &col_dims, &ranks),
            4 + shared
        );
    }

    #[test]
    fn separate_over_fused_ratio_approaches_gate_count() {
        // the g-fold claim is about the regime where the interior r^2 terms
        // dominate and the mixture rank r0 stays small (it never needs to
        // exceed g), so sample there
        let mut rng = Rng::new(6);
        for _ in 0..5 {
            let g = 3 + rng.next_below(2);
            let n = 3;
            let dim = 4 + rng.next_below(5);
            let row_dims: Vec<usize> = vec![dim; n];
            let col_dims: Vec<usize> = vec![dim; n];
            let r = 4 + rng.next_below(3);
            let mut ranks = vec![1usize];
            for _ in 1..n {
                ranks.push(r);
            }
            ranks.push(1);
            let separate = param_count_separate(g, &row_dims, &col_dims, &ranks) as f64;
            let mut fused_ranks = ranks.clone();
            fused_ranks[0] = 1 + rng.next_below(2); // gate-core rank r0
            let fused = param_count_fused(g, &row_dims, &col_dims, &fused_ranks) as f64;
            assert!(
                separate / fused >= 0.8 * g as f64,
                "ratio {} for g {}",
                separate / fused,
                g
            );
        }
    }

    #[test]
    fn flop_count_single_core_equals_dense() {
        let ttm = random_tt(&[6], &[5], &[1, 1], 1);
        assert_eq!(flop_count_matvec(&ttm, 3), flop_count_dense_matvec(6, 5, 3));
    }

    #[test]
    fn flop_count_matches_instrumented_execution() {
        let mut rng = Rng::new(90);
        let configs: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = vec![
            (vec![2, 3], vec![3, 2], vec![1, 2, 1]),
            (vec![4, 4], vec![4, 4], vec![1, 3, 1]),
            (vec![2, 2, 2], vec![2, 2, 2], vec![1, 2, 3, 1]),
            (vec![5], vec![7], vec![1, 1]),
            (vec![3, 2, 2], vec![1, 1, 1], vec![1, 2, 2, 1]),
        ];
        for (row_dims, col_dims, ranks) in configs {
            let ttm = random_tt(&row_dims, &col_dims, &ranks, 19);
            let batch = 1 + rng.next_below(4);
            let x = DenseTensor::randn(vec![batch, ttm.num_cols()], 1.0, &mut rng);
            take_madd_count();
            let _ = tt_matvec(&ttm, &x).unwrap();
            let measured = take_madd_count();
            assert_eq!(flop_count_matvec(&ttm, batch), measured);
        }
    }

    #[test]
    fn flop_count_table1_shape_beats_dense() {
        // stacked W for the D=512, M=4096, g=4, two inner cores, r=2 layout
        let row_dims = [4usize, 16, 32];
        let col_dims = [1usize, 64, 64];
        let ranks = [1usize, 2, 2, 1];
        let ttm = random_tt(&row_dims, &col_dims, &ranks, 2);
        let tt_flops = flop_count_matvec(&ttm, 1);
        let dense_flops = flop_count_dense_matvec(4 * 512, 4096, 1);
        assert!(tt_flops < dense_flops, "{tt_flops} vs {dense_flops}");
    }

    #[test]
    fn flop_count_beats_dense_under_sufficient_condition() {
        // whenever r_max^2 * n * d_max <= D, TT matvec work stays below dense
        let mut rng = Rng::new(14);
        for _ in 0..10 {
            let n = 2 + rng.next_below(2);
            let d: usize = 8;
            let row_dims: Vec<usize> = vec![d; n];
            let col_dims: Vec<usize> = (0..n).map(|_| 2 + rng.next_below(7)).collect();
            let r = 1 + rng.next_below(2); // r^2 n d <= 64 = D for n <= 3 only when r small
            let mut ranks = vec![1usize];
            for _ in 1..n {
                ranks.push(r);
            }
            ranks.push(1);
            let d_total: usize = row_dims.iter().product();
            let d_max = *row_dims.iter().max().unwrap();
            let r_max = *ranks.iter().max().unwrap();
            if r_max * r_max * n * d_max > d_total {
                continue;
            }
            let ttm = random_tt(&row_dims, &col_dims, &ranks, 3);
            assert!(
                flop_count_matvec(&ttm, 2)
                    <= flop_count_dense_matvec(ttm.num_rows(), ttm.num_cols(), 2),
                "dims {row_dims:?} x {col_dims:?} ranks {ranks:?}"
            );
        }
    }

    #[test]
    fn gate_submatrix_matches_dense_block() {
        let stack = GateStackedTT::new(random_tt(&[3, 4, 4], &[1, 4, 4], &[1, 2, 3, 1], 44)).unwrap();
        let dense = tt_to_dense(stack.tt()).unwrap();
        let rows = stack.rows_per_gate();
        for i in 0..3 {
            let sub = stack.gate_submatrix(i).unwrap();
            let sub_dense = tt_to_dense(&sub).unwrap();
            let block = dense.slice(0, i * rows, rows).unwrap();
            assert!(rel_err(&sub_dense, &block) <= 1e-12, "gate {i}");
        }
        assert!(stack.gate_submatrix(3).is_err());
    }

    #[test]
    fn reconstruction_guard_blocks_tt_to_dense() {
        let ttm = random_tt(&[2, 2], &[2, 2], &[1, 2, 1], 1);
        {
            let _guard = ReconstructionGuard::forbid();
            assert!(matches!(
                tt_to_dense(&ttm),
                Err(Error::ReconstructionForbidden)
            ));
            assert!(tt_matvec(&ttm, &DenseTensor::zeros(vec![1, 4])).is_ok());
        }
        assert!(tt_to_dense(&ttm).is_ok());
    }

    #[test]
    fn serialization_round_trip() {
        let ttm = random_tt(&[3, 4], &[2, 5], &[1, 3, 1], 21);
        let bytes = ttm.to_bytes();
        let (back, used) = TTMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, ttm);
        assert!(TTMatrix::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn rank_chain_mismatch_rejected() {
        let a = TTCore::new(DenseTensor::zeros(vec![2, 2, 1, 3])).unwrap();
        let b = TTCore::new(DenseTensor::zeros(vec![2, 2, 2, 1])).unwrap();
        assert!(matches!(
            TTMatrix::new(vec![a, b]),
            Err(Error::RankChain { .. })
        ));
    }
}
