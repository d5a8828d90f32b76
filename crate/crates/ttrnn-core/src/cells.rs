//! Recurrent cell families: dense LSTM/GRU, per-gate tensorized cells, and
//! fully tensorized fused cells whose concatenated gate matrices live in one
//! gate-stacked TT factorization.
//!
//! Gate order is fixed and pinned by tests: LSTM (candidate, update, forget,
//! output), GRU (candidate, update, reset). Gate i of a stacked matvec is the
//! contiguous block [i*D, (i+1)*D).
//!
//! Bias convention: LSTM carries one bias per gate; GRU carries two (input
//! side and hidden side). For the GRU candidate gate the hidden-side bias is
//! added to the U(r * h) product. This mixed convention is what reproduces
//! the reference dense parameter totals.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{contract, DenseTensor};
use crate::tt::{balanced_factorization, init_tt, tt_svd, GateStackedTT, TTMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gate_count(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    /// Tag pinned into checkpoints; loading a checkpoint with a different
    /// tag is a version error.
    pub fn gate_order_tag(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm:c,u,f,o",
            CellKind::Gru => "gru:h,u,r",
        }
    }

    pub fn bias_convention_tag(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm-single",
            CellKind::Gru => "gru-dual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    Dense,
    TtSeparate,
    TtFused,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellBiases {
    /// One bias vector `[g*D]`; LSTM convention.
    Single(DenseTensor),
    /// Input-side and hidden-side bias vectors, each `[g*D]`; GRU convention.
    Dual {
        input: DenseTensor,
        hidden: DenseTensor,
    },
}

impl CellBiases {
    fn zeros(kind: CellKind, hidden: usize) -> Self {
        let len = kind.gate_count() * hidden;
        match kind {
            CellKind::Lstm => CellBiases::Single(DenseTensor::zeros(vec![len])),
            CellKind::Gru => CellBiases::Dual {
                input: DenseTensor::zeros(vec![len]),
                hidden: DenseTensor::zeros(vec![len]),
            },
        }
    }

    pub fn num_elements(&self) -> usize {
        match self {
            CellBiases::Single(b) => b.len(),
            CellBiases::Dual { input, hidden } => input.len() + hidden.len(),
        }
    }
}

/// Dense cell: row-stacked gate blocks W `[g*D, M]`, U `[g*D, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCellParams {
    pub kind: CellKind,
    pub w: DenseTensor,
    pub u: DenseTensor,
    pub biases: CellBiases,
    pub hidden: usize,
    pub input: usize,
}

impl DenseCellParams {
    pub fn init(kind: CellKind, hidden: usize, input: usize, seed: u64) -> Self {
        let g = kind.gate_count();
        let std = 1.0 / (hidden as f64).sqrt();
        let mut rng = Rng::new(seed);
        DenseCellParams {
            kind,
            w: DenseTensor::randn(vec![g * hidden, input], std, &mut rng),
            u: DenseTensor::randn(vec![g * hidden, hidden], std, &mut rng),
            biases: CellBiases::zeros(kind, hidden),
            hidden,
            input,
        }
    }

    pub fn zeros(kind: CellKind, hidden: usize, input: usize) -> Self {
        let g = kind.gate_count();
        DenseCellParams {
            kind,
            w: DenseTensor::zeros(vec![g * hidden, input]),
            u: DenseTensor::zeros(vec![g * hidden, hidden]),
            biases: CellBiases::zeros(kind, hidden),
            hidden,
            input,
        }
    }
}

/// Per-gate tensorized cell: 2g independent TT matrices sharing one
/// factorization scheme per side.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparateTtCellParams {
    pub kind: CellKind,
    pub w: Vec<TTMatrix>,
    pub u: Vec<TTMatrix>,
    pub biases: CellBiases,
    pub hidden: usize,
    pub input: usize,
}

impl SeparateTtCellParams {
    pub fn init(
        kind: CellKind,
        hidden: usize,
        input: usize,
        cores: usize,
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        let g = kind.gate_count();
        let row_dims = balanced_factorization(hidden, cores);
        let w_cols = balanced_factorization(input, cores);
        let ranks = interior_ranks(cores, rank);
        let std = 1.0 / (hidden as f64).sqrt();
        let mut w = Vec::with_capacity(g);
        let mut u = Vec::with_capacity(g);
        for gate in 0..g {
            w.push(init_tt(
                &row_dims,
                &w_cols,
                &ranks,
                seed ^ (0x10 + gate as u64),
                std,
            )?);
            u.push(init_tt(
                &row_dims,
                &row_dims,
                &ranks,
                seed ^ (0x20 + gate as u64),
                std,
            )?);
        }
        Ok(SeparateTtCellParams {
            kind,
            w,
            u,
            biases: CellBiases::zeros(kind, hidden),
            hidden,
            input,
        })
    }

    /// TT-SVD each gate block of a dense cell.
    pub fn from_dense(
        dense: &DenseCellParams,
        cores: usize,
        max_rank: usize,
        svd_tol: f64,
    ) -> Result<Self> {
        let g = dense.kind.gate_count();
        let row_dims = balanced_factorization(dense.hidden, cores);
        let w_cols = balanced_factorization(dense.input, cores);
        let caps = vec![max_rank; cores - 1];
        let mut w = Vec::with_capacity(g);
        let mut u = Vec::with_capacity(g);
        for gate in 0..g {
            let w_block = dense.w.slice(0, gate * dense.hidden, dense.hidden)?;
            let u_block = dense.u.slice(0, gate * dense.hidden, dense.hidden)?;
            w.push(tt_svd(&w_block, &row_dims, &w_cols, &caps, svd_tol)?);
            u.push(tt_svd(&u_block, &row_dims, &row_dims, &caps, svd_tol)?);
        }
        Ok(SeparateTtCellParams {
            kind: dense.kind,
            w,
            u,
            biases: dense.biases.clone(),
            hidden: dense.hidden,
            input: dense.input,
        })
    }
}

/// Fully tensorized fused cell: both stacked matrices in gate-stacked TT
/// form (leading core d0 = g, m0 = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTtCellParams {
    pub kind: CellKind,
    pub w: GateStackedTT,
    pub u: GateStackedTT,
    pub biases: CellBiases,
    pub hidden: usize,
    pub input: usize,
}

impl FusedTtCellParams {
    pub fn init(
        kind: CellKind,
        hidden: usize,
        input: usize,
        cores: usize,
        rank0: usize,
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        let g = kind.gate_count();
        let inner_rows = balanced_factorization(hidden, cores);
        let inner_cols = balanced_factorization(input, cores);
        let (row_dims_w, col_dims_w) = stacked_dims(g, &inner_rows, &inner_cols);
        let (row_dims_u, col_dims_u) = stacked_dims(g, &inner_rows, &inner_rows);
        let ranks = stacked_ranks(cores, rank0, rank);
        let std = 1.0 / (hidden as f64).sqrt();
        let w = GateStackedTT::new(init_tt(&row_dims_w, &col_dims_w, &ranks, seed ^ 0x51, std)?)?;
        let u = GateStackedTT::new(init_tt(&row_dims_u, &col_dims_u, &ranks, seed ^ 0x52, std)?)?;
        Ok(FusedTtCellParams {
            kind,
            w,
            u,
            biases: CellBiases::zeros(kind, hidden),
            hidden,
            input,
        })
    }

    /// TT-SVD the row-stacked dense matrices directly into gate-stacked form.
    pub fn from_dense(
        dense: &DenseCellParams,
        cores: usize,
        max_rank0: usize,
        max_rank: usize,
        svd_tol: f64,
    ) -> Result<Self> {
        let g = dense.kind.gate_count();
        let inner_rows = balanced_factorization(dense.hidden, cores);
        let inner_cols = balanced_factorization(dense.input, cores);
        let (row_dims_w, col_dims_w) = stacked_dims(g, &inner_rows, &inner_cols);
        let (row_dims_u, col_dims_u) = stacked_dims(g, &inner_rows, &inner_rows);
        let mut caps = vec![max_rank; cores];
        caps[0] = max_rank0;
        let w = GateStackedTT::new(tt_svd(&dense.w, &row_dims_w, &col_dims_w, &caps, svd_tol)?)?;
        let u = GateStackedTT::new(tt_svd(&dense.u, &row_dims_u, &col_dims_u, &caps, svd_tol)?)?;
        Ok(FusedTtCellParams {
            kind: dense.kind,
            w,
            u,
            biases: dense.biases.clone(),
            hidden: dense.hidden,
            input: dense.input,
        })
    }
}

fn interior_ranks(cores: usize, rank: usize) -> Vec<usize> {
    let mut ranks = vec![1usize];
    for _ in 1..cores {
        ranks.push(rank);
    }
    ranks.push(1);
    ranks
}

fn stacked_dims(
    gates: usize,
    inner_rows: &[usize],
    inner_cols: &[usize],
) -> (Vec<usize>, Vec<usize>) {
    let mut rows = vec![gates];
    rows.extend_from_slice(inner_rows);
    let mut cols = vec![1usize];
    cols.extend_from_slice(inner_cols);
    (rows, cols)
}

fn stacked_ranks(cores: usize, rank0: usize, rank: usize) -> Vec<usize> {
    let mut ranks = vec![1usize, rank0];
    for _ in 1..cores {
        ranks.push(rank);
    }
    ranks.push(1);
    ranks
}

/// One of the three parameter bundles for a recurrent cell.
#[derive(Debug, Clone, PartialEq)]
pub enum CellParams {
    Dense(DenseCellParams),
    Separate(SeparateTtCellParams),
    Fused(FusedTtCellParams),
}

impl CellParams {
    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Dense(p) => p.kind,
            CellParams::Separate(p) => p.kind,
            CellParams::Fused(p) => p.kind,
        }
    }

    pub fn parameterization(&self) -> Parameterization {
        match self {
            CellParams::Dense(_) => Parameterization::Dense,
            CellParams::Separate(_) => Parameterization::TtSeparate,
            CellParams::Fused(_) => Parameterization::TtFused,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            CellParams::Dense(p) => p.hidden,
            CellParams::Separate(p) => p.hidden,
            CellParams::Fused(p) => p.hidden,
        }
    }

    pub fn input(&self) -> usize {
        match self {
            CellParams::Dense(p) => p.input,
            CellParams::Separate(p) => p.input,
            CellParams::Fused(p) => p.input,
        }
    }

    pub fn biases(&self) -> &CellBiases {
        match self {
            CellParams::Dense(p) => &p.biases,
            CellParams::Separate(p) => &p.biases,
            CellParams::Fused(p) => &p.biases,
        }
    }

    /// Recurrent parameter count excluding biases (W and U structures only).
    pub fn recurrent_elements(&self) -> usize {
        match self {
            CellParams::Dense(p) => p.w.len() + p.u.len(),
            CellParams::Separate(p) => {
                p.w.iter().map(TTMatrix::num_elements).sum::<usize>()
                    + p.u.iter().map(TTMatrix::num_elements).sum::<usize>()
            }
            CellParams::Fused(p) => p.w.tt().num_elements() + p.u.tt().num_elements(),
        }
    }

    /// Total trainable elements including biases.
    pub fn num_elements(&self) -> usize {
        self.recurrent_elements() + self.biases().num_elements()
    }

    /// Deterministic iteration over named parameter tensors.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &DenseTensor)) {
        match self {
            CellParams::Dense(p) => {
                f("cell.w", &p.w);
                f("cell.u", &p.u);
            }
            CellParams::Separate(p) => {
                for (gate, ttm) in p.w.iter().enumerate() {
                    for (k, core) in ttm.cores().iter().enumerate() {
                        f(&format!("cell.w{gate}.core{k}"), core.values());
                    }
                }
                for (gate, ttm) in p.u.iter().enumerate() {
                    for (k, core) in ttm.cores().iter().enumerate() {
                        f(&format!("cell.u{gate}.core{k}"), core.values());
                    }
                }
            }
            CellParams::Fused(p) => {
                for (k, core) in p.w.tt().cores().iter().enumerate() {
                    f(&format!("cell.w.core{k}"), core.values());
                }
                for (k, core) in p.u.tt().cores().iter().enumerate() {
                    f(&format!("cell.u.core{k}"), core.values());
                }
            }
        }
        match self.biases() {
            CellBiases::Single(b) => f("cell.b", b),
            CellBiases::Dual { input, hidden } => {
                f("cell.b_in", input);
                f("cell.b_hid", hidden);
            }
        }
    }

    /// Mutable counterpart of [`CellParams::visit`]; shapes must be preserved.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor)) {
        match self {
            CellParams::Dense(p) => {
                f("cell.w", &mut p.w);
                f("cell.u", &mut p.u);
            }
            CellParams::Separate(p) => {
                for (gate, ttm) in p.w.iter_mut().enumerate() {
                    for (k, core) in ttm.cores_mut().iter_mut().enumerate() {
                        f(&format!("cell.w{gate}.core{k}"), core.values_mut());
                    }
                }
                for (gate, ttm) in p.u.iter_mut().enumerate() {
                    for (k, core) in ttm.cores_mut().iter_mut().enumerate() {
                        f(&format!("cell.u{gate}.core{k}"), core.values_mut());
                    }
                }
            }
            CellParams::Fused(p) => {
                for (k, core) in p.w.tt_mut().cores_mut().iter_mut().enumerate() {
                    f(&format!("cell.w.core{k}"), core.values_mut());
                }
                for (k, core) in p.u.tt_mut().cores_mut().iter_mut().enumerate() {
                    f(&format!("cell.u.core{k}"), core.values_mut());
                }
            }
        }
        match self {
            CellParams::Dense(p) => visit_biases_mut(&mut p.biases, f),
            CellParams::Separate(p) => visit_biases_mut(&mut p.biases, f),
            CellParams::Fused(p) => visit_biases_mut(&mut p.biases, f),
        }
    }

    /// Register every parameter on a tape and return the bound handles.
    pub fn bind(&self, tape: &mut Tape) -> BoundCell {
        self.bind_with(&mut |name, t| tape.param(name, t.clone()))
    }

    /// Build the bound structure from an existing name -> Var mapping (used
    /// when something else already registered the parameters).
    pub fn bind_with(&self, get: &mut dyn FnMut(&str, &DenseTensor) -> Var) -> BoundCell {
        let spec = match self {
            CellParams::Dense(p) => BoundSpec::Dense {
                w: get("cell.w", &p.w),
                u: get("cell.u", &p.u),
            },
            CellParams::Separate(p) => BoundSpec::Separate {
                w: bind_tt_list(get, &p.w, "cell.w"),
                u: bind_tt_list(get, &p.u, "cell.u"),
            },
            CellParams::Fused(p) => BoundSpec::Fused {
                w: bind_tt(get, p.w.tt(), "cell.w"),
                u: bind_tt(get, p.u.tt(), "cell.u"),
                gates: p.kind.gate_count(),
            },
        };
        let biases = match self.biases() {
            CellBiases::Single(b) => BoundBiases::Single(get("cell.b", b)),
            CellBiases::Dual { input, hidden } => BoundBiases::Dual {
                input: get("cell.b_in", input),
                hidden: get("cell.b_hid", hidden),
            },
        };
        BoundCell {
            kind: self.kind(),
            spec,
            biases,
            hidden: self.hidden(),
            input: self.input(),
        }
    }
}

fn visit_biases_mut(biases: &mut CellBiases, f: &mut dyn FnMut(&str, &mut DenseTensor)) {
    match biases {
        CellBiases::Single(b) => f("cell.b", b),
        CellBiases::Dual { input, hidden } => {
            f("cell.b_in", input);
            f("cell.b_hid", hidden);
        }
    }
}

fn bind_tt(
    get: &mut dyn FnMut(&str, &DenseTensor) -> Var,
    ttm: &TTMatrix,
    prefix: &str,
) -> Vec<Var> {
    ttm.cores()
        .iter()
        .enumerate()
        .map(|(k, core)| get(&format!("{prefix}.core{k}"), core.values()))
        .collect()
}

fn bind_tt_list(
    get: &mut dyn FnMut(&str, &DenseTensor) -> Var,
    list: &[TTMatrix],
    prefix: &str,
) -> Vec<Vec<Var>> {
    list.iter()
        .enumerate()
        .map(|(gate, ttm)| bind_tt(get, ttm, &format!("{prefix}{gate}")))
        .collect()
}

enum BoundSpec {
    Dense { w: Var, u: Var },
    Separate { w: Vec<Vec<Var>>, u: Vec<Vec<Var>> },
    Fused { w: Vec<Var>, u: Vec<Var>, gates: usize },
}

enum BoundBiases {
    Single(Var),
    Dual { input: Var, hidden: Var },
}

/// Cell parameters registered on a tape.
pub struct BoundCell {
    kind: CellKind,
    spec: BoundSpec,
    biases: BoundBiases,
    hidden: usize,
    input: usize,
}

/// Recurrent state on a tape; `c` present only for LSTM.
#[derive(Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

impl CellState {
    pub fn zeros(tape: &mut Tape, kind: CellKind, batch: usize, hidden: usize) -> Self {
        let h = tape.leaf(DenseTensor::zeros(vec![batch, hidden]));
        let c = match kind {
            CellKind::Lstm => Some(tape.leaf(DenseTensor::zeros(vec![batch, hidden]))),
            CellKind::Gru => None,
        };
        CellState { h, c }
    }
}

/// Contiguous gate block i of a stacked vector's last axis.
pub fn gate_slice(y: &DenseTensor, gates: usize, i: usize) -> Result<DenseTensor> {
    if i >= gates {
        return Err(Error::GateIndex {
            index: i,
            gates,
        });
    }
    let axis = y.rank() - 1;
    let block = y.shape()[axis] / gates;
    y.slice(axis, i * block, block)
}

/// TT matvec recorded on a tape: same left-to-right schedule as the untaped
/// kernel, so forward values are bit-identical.
pub fn tt_matvec_on_tape(tape: &mut Tape, cores: &[Var], x: Var) -> Result<Var> {
    let batch = tape.value(x).shape()[0];
    let m_total = tape.value(x).shape()[1];
    let mut acc = tape.reshape(x, vec![batch, 1, 1, m_total])?;
    for &core in cores {
        let core_shape = tape.value(core).shape().to_vec();
        let (d, m, rl, rr) = (core_shape[0], core_shape[1], core_shape[2], core_shape[3]);
        let dp = tape.value(acc).shape()[1];
        let m_rest = tape.value(acc).shape()[3] / m;
        let split = tape.reshape(acc, vec![batch, dp, rl, m, m_rest])?;
        let mixed = tape.contract(split, core, &[2, 3], &[2, 1])?;
        let permuted = tape.permute(mixed, &[0, 1, 3, 4, 2])?;
        acc = tape.reshape(permuted, vec![batch, dp * d, rr, m_rest])?;
    }
    let d_total = tape.value(acc).shape()[1];
    tape.reshape(acc, vec![batch, d_total])
}

/// Gate submatrix of a fused stack on tape: contract the gate core's row i
/// into the first inner core, then run the remaining chain.
fn tt_gate_submatvec_on_tape(
    tape: &mut Tape,
    cores: &[Var],
    gates: usize,
    gate: usize,
    x: Var,
) -> Result<Var> {
    let core0_shape = tape.value(cores[0]).shape().to_vec();
    debug_assert_eq!(core0_shape[0], gates);
    let r0 = core0_shape[3];
    let row = tape.slice(cores[0], 0, gate, 1)?;
    let v_row = tape.reshape(row, vec![r0])?;
    let inner = cores[1];
    let inner_shape = tape.value(inner).shape().to_vec();
    let (d, m, rr) = (inner_shape[0], inner_shape[1], inner_shape[3]);
    // [r0] x [d, m, r0, rr] -> [d, m, rr]
    let mixed = tape.contract(v_row, inner, &[0], &[2])?;
    let mixed_core = tape.reshape(mixed, vec![d, m, 1, rr])?;
    let mut chain = vec![mixed_core];
    chain.extend_from_slice(&cores[2..]);
    tt_matvec_on_tape(tape, &chain, x)
}

impl BoundCell {
    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }

    fn gate_count(&self) -> usize {
        self.kind.gate_count()
    }

    /// Pre-activation contributions of one side, one [batch, D] tensor per
    /// gate. The stacked product is computed once and sliced.
    fn side_preacts(&self, tape: &mut Tape, x: Var, input_side: bool) -> Result<Vec<Var>> {
        let g = self.gate_count();
        let d = self.hidden;
        match &self.spec {
            BoundSpec::Dense { w, u } => {
                let mat = if input_side { *w } else { *u };
                let full = tape.contract(x, mat, &[1], &[1])?; // [b, gD]
                (0..g).map(|i| tape.slice(full, 1, i * d, d)).collect()
            }
            BoundSpec::Separate { w, u } => {
                let list = if input_side { w } else { u };
                list.iter()
                    .map(|cores| tt_matvec_on_tape(tape, cores, x))
                    .collect()
            }
            BoundSpec::Fused { w, u, .. } => {
                let cores = if input_side { w } else { u };
                let full = tt_matvec_on_tape(tape, cores, x)?; // [b, gD]
                (0..g).map(|i| tape.slice(full, 1, i * d, d)).collect()
            }
        }
    }

    /// Hidden-side product for the GRU candidate gate applied to (r * h).
    fn candidate_hidden_product(&self, tape: &mut Tape, rh: Var) -> Result<Var> {
        let d = self.hidden;
        match &self.spec {
            BoundSpec::Dense { u, .. } => {
                let block = tape.slice(*u, 0, 0, d)?; // candidate rows [D, D]
                tape.contract(rh, block, &[1], &[1])
            }
            BoundSpec::Separate { u, .. } => tt_matvec_on_tape(tape, &u[0], rh),
            BoundSpec::Fused { u, gates, .. } => {
                tt_gate_submatvec_on_tape(tape, u, *gates, 0, rh)
            }
        }
    }

    fn bias_slice(&self, tape: &mut Tape, which: BiasSide, gate: usize) -> Result<Var> {
        let d = self.hidden;
        let var = match (&self.biases, which) {
            (BoundBiases::Single(b), _) => *b,
            (BoundBiases::Dual { input, .. }, BiasSide::Input) => *input,
            (BoundBiases::Dual { hidden, .. }, BiasSide::Hidden) => *hidden,
        };
        tape.slice(var, 0, gate * d, d)
    }

    /// One recurrent update combining the gate pre-activations.
    pub fn step(&self, tape: &mut Tape, x: Var, state: &CellState) -> Result<CellState> {
        match self.kind {
            CellKind::Lstm => self.lstm_step(tape, x, state),
            CellKind::Gru => {
                let h = self.gru_step(tape, x, state.h)?;
                Ok(CellState { h, c: None })
            }
        }
    }

    fn lstm_step(&self, tape: &mut Tape, x: Var, state: &CellState) -> Result<CellState> {
        let c_prev = state.c.ok_or_else(|| {
            Error::Config("LSTM step needs a cell state; got a GRU-style state".into())
        })?;
        let wx = self.side_preacts(tape, x, true)?;
        let uh = self.side_preacts(tape, state.h, false)?;
        let mut pre = Vec::with_capacity(4);
        for gate in 0..4 {
            let sum = tape.add(wx[gate], uh[gate])?;
            let b = self.bias_slice(tape, BiasSide::Input, gate)?;
            pre.push(tape.add_bias(sum, b)?);
        }
        let c_tilde = tape.tanh(pre[0]);
        let update = tape.sigmoid(pre[1]);
        let forget = tape.sigmoid(pre[2]);
        let output = tape.sigmoid(pre[3]);
        let uc = tape.hadamard(update, c_tilde)?;
        let fc = tape.hadamard(forget, c_prev)?;
        let c_t = tape.add(uc, fc)?;
        let tanh_c = tape.tanh(c_t);
        let h_t = tape.hadamard(output, tanh_c)?;
        Ok(CellState {
            h: h_t,
            c: Some(c_t),
        })
    }

    fn gru_step(&self, tape: &mut Tape, x: Var, h_prev: Var) -> Result<Var> {
        let wx = self.side_preacts(tape, x, true)?;
        let uh = self.side_preacts(tape, h_prev, false)?;
        // update and reset gates use the stacked hidden product directly
        let gate_act = |idx: usize, tape: &mut Tape| -> Result<Var> {
            let sum = tape.add(wx[idx], uh[idx])?;
            let b_in = self.bias_slice(tape, BiasSide::Input, idx)?;
            let with_in = tape.add_bias(sum, b_in)?;
            let pre = match &self.biases {
                BoundBiases::Single(_) => with_in,
                BoundBiases::Dual { .. } => {
                    let b_hid = self.bias_slice(tape, BiasSide::Hidden, idx)?;
                    tape.add_bias(with_in, b_hid)?
                }
            };
            Ok(tape.sigmoid(pre))
        };
        let update = gate_act(1, tape)?;
        let reset = gate_act(2, tape)?;
        // candidate: reset multiplies h BEFORE the hidden-side product
        let rh = tape.hadamard(reset, h_prev)?;
        let urh = self.candidate_hidden_product(tape, rh)?;
        let b_in = self.bias_slice(tape, BiasSide::Input, 0)?;
        let mut cand_pre = tape.add(wx[0], urh)?;
        cand_pre = tape.add_bias(cand_pre, b_in)?;
        if let BoundBiases::Dual { .. } = &self.biases {
            let b_hid = self.bias_slice(tape, BiasSide::Hidden, 0)?;
            cand_pre = tape.add_bias(cand_pre, b_hid)?;
        }
        let h_tilde = tape.tanh(cand_pre);
        // h_t = u * h_tilde + (1 - u) * h_prev
        let uh_tilde = tape.hadamard(update, h_tilde)?;
        let one_minus_u = tape.affine(update, -1.0, 1.0);
        let keep = tape.hadamard(one_minus_u, h_prev)?;
        tape.add(uh_tilde, keep)
    }
}

#[derive(Clone, Copy)]
enum BiasSide {
    Input,
    Hidden,
}

/// Unrolled recurrence over [batch, T, M] inputs; records every hidden state.
pub struct SequenceOutput {
    pub hiddens: Vec<Var>,
    pub final_state: CellState,
}

pub fn run_sequence(
    tape: &mut Tape,
    cell: &BoundCell,
    inputs: Var,
    init: CellState,
) -> Result<SequenceOutput> {
    let shape = tape.value(inputs).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "run_sequence needs [batch, T, M] inputs, got {:?}",
            shape
        )));
    }
    let (batch, steps, m) = (shape[0], shape[1], shape[2]);
    if steps == 0 {
        return Err(Error::ShapeMismatch("run_sequence needs T >= 1".into()));
    }
    let mut state = init;
    let mut hiddens = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_slice = tape.slice(inputs, 1, t, 1)?;
        let x_t = tape.reshape(x_slice, vec![batch, m])?;
        state = cell.step(tape, x_t, &state)?;
        hiddens.push(state.h);
    }
    Ok(SequenceOutput {
        hiddens,
        final_state: state,
    })
}

/// Weight-sharing reconstruction: gate i's matrix as the V-mixture of the
/// r0 shared TT-encoded matrices. Equals rows [i*D, (i+1)*D) of the stack's
/// dense reconstruction.
pub fn gate_matrix_mixture(stack: &GateStackedTT, gate: usize) -> Result<DenseTensor> {
    let g = stack.gate_count();
    if gate >= g {
        return Err(Error::GateIndex {
            index: gate,
            gates: g,
        });
    }
    let family = stack.shared_family_dense()?; // [r0, D, M]
    let v = stack.mixing_matrix(); // [g, r0]
    let r0 = stack.mixture_rank();
    let vi = v.slice(0, gate, 1)?.reshape(vec![r0])?;
    contract(&vi, &family, &[0], &[0])
}

/// Row-stack per-gate matrices into the concatenated [g*D, M] form.
pub fn stack_gate_matrices(blocks: &[DenseTensor]) -> Result<DenseTensor> {
    let refs: Vec<&DenseTensor> = blocks.iter().collect();
    DenseTensor::concat(0, &refs)
}
