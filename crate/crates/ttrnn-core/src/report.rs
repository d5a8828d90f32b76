//! Parameter and FLOP accounting for full models: closed-form counts per
//! component, actual element counts, compression ratios, and per-step
//! multiply-add totals for the matvec work a cell performs.

use crate::cells::{CellKind, Parameterization};
use crate::tt::{
    balanced_factorization, flop_count_dense_matvec, param_count_dense, param_count_fused,
    param_count_fused_actual, param_count_separate,
};

/// Task head attached after the recurrent cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadSpec {
    /// Linear classifier with bias: classes x D weights + classes.
    Classifier { classes: usize },
    /// Linear projection with bias: embed x D weights + embed.
    Projection { embed: usize },
    /// Projection plus the two GE2E similarity scalars.
    ProjectionGe2e { embed: usize },
}

impl HeadSpec {
    fn param_count(&self, hidden: usize) -> u64 {
        match *self {
            HeadSpec::Classifier { classes } => (classes * hidden + classes) as u64,
            HeadSpec::Projection { embed } => (embed * hidden + embed) as u64,
            HeadSpec::ProjectionGe2e { embed } => (embed * hidden + embed) as u64 + 2,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            HeadSpec::Classifier { .. } => "classifier",
            HeadSpec::Projection { .. } => "projection",
            HeadSpec::ProjectionGe2e { .. } => "projection+ge2e",
        }
    }
}

/// Cell geometry shared by the accounting entry points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGeometry {
    pub kind: CellKind,
    pub parameterization: Parameterization,
    pub hidden: usize,
    pub input: usize,
    pub cores: usize,
    pub rank0: usize,
    pub rank: usize,
}

impl CellGeometry {
    fn gates(&self) -> usize {
        self.kind.gate_count()
    }

    fn bias_count(&self) -> u64 {
        let g = self.gates() as u64;
        let d = self.hidden as u64;
        match self.kind {
            CellKind::Lstm => g * d,
            CellKind::Gru => 2 * g * d,
        }
    }

    fn inner_rows(&self) -> Vec<usize> {
        balanced_factorization(self.hidden, self.cores)
    }

    fn inner_cols(&self) -> Vec<usize> {
        balanced_factorization(self.input, self.cores)
    }

    /// Rank chain r_0..r_n for a per-gate (separate) TT matrix.
    fn separate_ranks(&self) -> Vec<usize> {
        let mut r = vec![1usize];
        for _ in 1..self.cores {
            r.push(self.rank);
        }
        r.push(1);
        r
    }

    /// Rank chain r_0..r_n of the inner portion of a fused stack, with the
    /// gate-core rank leading.
    fn fused_ranks(&self) -> Vec<usize> {
        let mut r = vec![self.rank0];
        for _ in 1..self.cores {
            r.push(self.rank);
        }
        r.push(1);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub component: String,
    /// Closed-form count (dense, per-gate, or fused with a single gate
    /// core); None where no formula applies.
    pub formula: Option<u64>,
    /// Elements a concrete implementation stores.
    pub actual: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamAccounting {
    pub rows: Vec<ParamRow>,
    pub recurrent_formula: u64,
    pub recurrent_actual: u64,
    pub bias_count: u64,
    pub head_count: u64,
    pub total: u64,
    /// Total of the same geometry with a dense cell, for the ratio.
    pub dense_total: u64,
    pub compression: f64,
}

/// Full-model parameter accounting. The `formula` column follows the
/// closed-form counts; the fused `actual` column exceeds the formula by
/// exactly gates x rank0 because a concrete fused cell stores two gate cores.
pub fn param_accounting(geometry: CellGeometry, head: HeadSpec) -> ParamAccounting {
    let g = geometry.gates();
    let (recurrent_formula, recurrent_actual) = match geometry.parameterization {
        Parameterization::Dense => {
            let n = param_count_dense(g, geometry.hidden, geometry.input);
            (n, n)
        }
        Parameterization::TtSeparate => {
            let rows = geometry.inner_rows();
            let cols = geometry.inner_cols();
            let ranks = geometry.separate_ranks();
            let n = param_count_separate(g, &rows, &cols, &ranks);
            (n, n)
        }
        Parameterization::TtFused => {
            let rows = geometry.inner_rows();
            let cols = geometry.inner_cols();
            let ranks = geometry.fused_ranks();
            (
                param_count_fused(g, &rows, &cols, &ranks),
                param_count_fused_actual(g, &rows, &cols, &ranks),
            )
        }
    };
    let bias_count = geometry.bias_count();
    let head_count = head.param_count(geometry.hidden);
    let total = recurrent_actual + bias_count + head_count;
    let dense_total =
        param_count_dense(g, geometry.hidden, geometry.input) + bias_count + head_count;
    let rows = vec![
        ParamRow {
            component: "recurrent".into(),
            formula: Some(recurrent_formula),
            actual: recurrent_actual,
        },
        ParamRow {
            component: "biases".into(),
            formula: Some(bias_count),
            actual: bias_count,
        },
        ParamRow {
            component: head.label().into(),
            formula: Some(head_count),
            actual: head_count,
        },
        ParamRow {
            component: "total".into(),
            formula: None,
            actual: total,
        },
    ];
    ParamAccounting {
        rows,
        recurrent_formula,
        recurrent_actual,
        bias_count,
        head_count,
        total,
        dense_total,
        compression: dense_total as f64 / total as f64,
    }
}

/// Multiply-add count of one tt_matvec over the given factorization.
pub fn matvec_flops_dims(
    row_dims: &[usize],
    col_dims: &[usize],
    ranks: &[usize],
    batch: usize,
) -> u64 {
    let mut count: u64 = 0;
    let mut rows_done: u64 = 1;
    let mut cols_rest: u64 = col_dims.iter().product::<usize>() as u64;
    for k in 0..row_dims.len() {
        let (d, m) = (row_dims[k] as u64, col_dims[k] as u64);
        let (rl, rr) = (ranks[k] as u64, ranks[k + 1] as u64);
        cols_rest /= m;
        count += batch as u64 * rows_done * cols_rest * rl * m * d * rr;
        rows_done *= d;
    }
    count
}

/// Per-step matvec multiply-adds of one cell evaluation (the W and U
/// products; the fused GRU candidate adds its second hidden-side pass).
/// Elementwise gate work is excluded on both sides of any comparison.
pub fn cell_step_flops(geometry: CellGeometry, batch: usize) -> u64 {
    let g = geometry.gates();
    let d = geometry.hidden;
    let m = geometry.input;
    match geometry.parameterization {
        Parameterization::Dense => {
            let mut total = flop_count_dense_matvec(g * d, m, batch)
                + flop_count_dense_matvec(g * d, d, batch);
            if geometry.kind == CellKind::Gru {
                // candidate gate applies its U block to (r * h) separately
                total += flop_count_dense_matvec(d, d, batch);
            }
            total
        }
        Parameterization::TtSeparate => {
            let rows = geometry.inner_rows();
            let cols = geometry.inner_cols();
            let ranks = geometry.separate_ranks();
            let w = matvec_flops_dims(&rows, &cols, &ranks, batch);
            let u = matvec_flops_dims(&rows, &rows, &ranks, batch);
            let mut total = (g as u64) * (w + u);
            if geometry.kind == CellKind::Gru {
                total += u; // second candidate-gate pass over (r * h)
            }
            total
        }
        Parameterization::TtFused => {
            let inner_rows = geometry.inner_rows();
            let inner_cols = geometry.inner_cols();
            let mut rows = vec![g];
            rows.extend(&inner_rows);
            let mut w_cols = vec![1usize];
            w_cols.extend(&inner_cols);
            let mut u_cols = vec![1usize];
            u_cols.extend(&inner_rows);
            let mut ranks = vec![1usize];
            ranks.extend(geometry.fused_ranks());
            let mut total = matvec_flops_dims(&rows, &w_cols, &ranks, batch)
                + matvec_flops_dims(&rows, &u_cols, &ranks, batch);
            if geometry.kind == CellKind::Gru {
                // candidate pass: inner chain with the gate row mixed into
                // the first inner core (left boundary collapses to 1)
                let mut sub_ranks = vec![1usize];
                sub_ranks.extend(&geometry.fused_ranks()[1..]);
                total += matvec_flops_dims(&inner_rows, &inner_rows, &sub_ranks, batch);
            }
            total
        }
    }
}
