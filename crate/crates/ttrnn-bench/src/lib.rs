//! Shared fixtures for the criterion benchmarks.

use ttrnn_core::cells::{CellKind, CellParams, DenseCellParams, FusedTtCellParams};
use ttrnn_core::rng::Rng;
use ttrnn_core::tensor::DenseTensor;
use ttrnn_core::tt::{init_tt, TTMatrix};

pub const HIDDEN: usize = 64;
pub const INPUT: usize = 64;
pub const GATES: usize = 4;

/// Gate-stacked TT matrix for a 4-gate cell over HIDDEN x INPUT, rank 2.
pub fn stacked_tt(seed: u64) -> TTMatrix {
    init_tt(
        &[GATES, 8, 8],
        &[1, 8, 8],
        &[1, 2, 2, 1],
        seed,
        1.0 / (HIDDEN as f64).sqrt(),
    )
    .unwrap()
}

pub fn random_batch(batch: usize, dim: usize, seed: u64) -> DenseTensor {
    let mut rng = Rng::new(seed);
    DenseTensor::randn(vec![batch, dim], 1.0, &mut rng)
}

pub fn dense_cell(seed: u64) -> CellParams {
    CellParams::Dense(DenseCellParams::init(CellKind::Lstm, HIDDEN, INPUT, seed))
}

pub fn fused_cell(seed: u64) -> CellParams {
    CellParams::Fused(FusedTtCellParams::init(CellKind::Lstm, HIDDEN, INPUT, 2, 2, 2, seed).unwrap())
}
