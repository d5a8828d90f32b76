//! Per-kernel and per-step timings: TT matvec against the dense matvec it
//! replaces, TT-SVD, and full recurrent steps for dense and fused cells.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ttrnn_bench::{dense_cell, fused_cell, random_batch, stacked_tt, GATES, HIDDEN, INPUT};
use ttrnn_core::autograd::Tape;
use ttrnn_core::cells::CellState;
use ttrnn_core::rng::Rng;
use ttrnn_core::tensor::{contract, DenseTensor};
use ttrnn_core::tt::{tt_matvec, tt_svd, tt_to_dense};

fn bench_matvec(c: &mut Criterion) {
    let ttm = stacked_tt(1);
    let dense = tt_to_dense(&ttm).unwrap();
    let mut group = c.benchmark_group("stacked_matvec_256x64_r2");
    for batch in [1usize, 16, 64] {
        let x = random_batch(batch, INPUT, batch as u64);
        group.bench_with_input(BenchmarkId::new("tt", batch), &x, |b, x| {
            b.iter(|| tt_matvec(black_box(&ttm), black_box(x)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("dense", batch), &x, |b, x| {
            b.iter(|| contract(black_box(x), black_box(&dense), &[1], &[1]).unwrap())
        });
    }
    group.finish();
}

fn bench_cell_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("lstm_step_d64_m64_b32");
    for (name, params) in [("dense", dense_cell(2)), ("tt-fused", fused_cell(3))] {
        let x = random_batch(32, INPUT, 7);
        let h = random_batch(32, HIDDEN, 8);
        let cstate = random_batch(32, HIDDEN, 9);
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let xv = tape.leaf(x.clone());
                let hv = tape.leaf(h.clone());
                let cv = tape.leaf(cstate.clone());
                let state = CellState {
                    h: hv,
                    c: Some(cv),
                };
                black_box(bound.step(&mut tape, xv, &state).unwrap());
            })
        });
    }
    group.finish();
}

fn bench_step_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("lstm_step_fwd_bwd_d64_m64_b32");
    for (name, params) in [("dense", dense_cell(4)), ("tt-fused", fused_cell(5))] {
        let x = random_batch(32, INPUT, 10);
        let h = random_batch(32, HIDDEN, 11);
        let cstate = random_batch(32, HIDDEN, 12);
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let xv = tape.leaf(x.clone());
                let hv = tape.leaf(h.clone());
                let cv = tape.leaf(cstate.clone());
                let state = CellState {
                    h: hv,
                    c: Some(cv),
                };
                let next = bound.step(&mut tape, xv, &state).unwrap();
                let loss = tape.sum_all(next.h);
                black_box(tape.backward_scalar(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn bench_tt_svd(c: &mut Criterion) {
    let mut rng = Rng::new(20);
    let w = DenseTensor::randn(vec![GATES * HIDDEN, INPUT], 1.0, &mut rng);
    c.bench_function("tt_svd_stacked_256x64_cap4", |b| {
        b.iter(|| {
            tt_svd(
                black_box(&w),
                &[GATES, 8, 8],
                &[1, 8, 8],
                &[4, 4],
                0.0,
            )
            .unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_matvec,
    bench_cell_step,
    bench_step_backward,
    bench_tt_svd
);
criterion_main!(benches);
