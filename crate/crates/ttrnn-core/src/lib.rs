//! Tensor-train recurrent cells: dense and TT-factorized LSTM/GRU variants
//! with a tape-based gradient engine, training loops, and parameter/FLOP
//! accounting.
//!
//! The central object is the gate-stacked TT matrix: the row-wise
//! concatenation of a cell's gate weight matrices factorized jointly, with a
//! leading core holding the gate axis. This encodes each gate matrix as a
//! linear mixture of a small shared family of TT matrices, cutting the
//! parameter count by roughly the gate count on top of the usual TT savings.

pub mod autograd;
pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod tt;

pub use error::{Error, Result};
pub use tensor::{contract, DType, DenseTensor};
pub use tt::{GateStackedTT, TTCore, TTMatrix};
