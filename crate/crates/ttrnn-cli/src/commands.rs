//! Command implementations: parameter accounting, benchmarking, gradient
//! checking, training, evaluation, checkpoint inspection, and synthetic
//! dataset generation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ttrnn_core::autograd::{gradcheck, Tape, GRADCHECK_MAX_COORDS};
use ttrnn_core::cells::{
    gate_matrix_mixture, run_sequence, CellKind, CellParams, CellState, DenseCellParams,
    FusedTtCellParams, Parameterization, SeparateTtCellParams,
};
use ttrnn_core::checkpoint::{Checkpoint, Payload};
use ttrnn_core::data::{
    downsample, load_idx, permute_pixels, split_images, synth_digits, synth_speakers_within,
    synth_toy, to_sequences, write_idx, SequenceDataset, SpeakerDataset, Split,
};
use ttrnn_core::metrics::histogram;
use ttrnn_core::optim::{AdamConfig, AdamState, Parameterized};
use ttrnn_core::report::{cell_step_flops, param_accounting, CellGeometry, HeadSpec};
use ttrnn_core::rng::Rng;
use ttrnn_core::tensor::DenseTensor;
use ttrnn_core::train::{
    evaluate_classifier, train_classifier, train_verifier, validation_eer, HeadKind, Model,
    ModelSpec, TrainSettings,
};
use ttrnn_core::tt::GateStackedTT;
use ttrnn_core::{Error, Result};

use crate::config::{RunConfig, Task};

/// Exit code for validation failures (gradient check above threshold).
pub const EXIT_VALIDATION: i32 = 2;

fn geometry(config: &RunConfig, input: usize) -> CellGeometry {
    CellGeometry {
        kind: config.cell,
        parameterization: config.param,
        hidden: config.hidden,
        input,
        cores: config.cores,
        rank0: config.rank0,
        rank: config.rank,
    }
}

fn task_input(config: &RunConfig) -> usize {
    if let Some(m) = config.input {
        return m;
    }
    match config.task {
        Task::Mnist => {
            let side = 28 / config.downsample.max(1);
            if config.row_per_step {
                side
            } else {
                1
            }
        }
        Task::SynthSpeaker => config.features,
        Task::Toy => 4,
    }
}

fn task_head(config: &RunConfig) -> (HeadKind, usize, HeadSpec) {
    match config.task {
        Task::Mnist => (
            HeadKind::Classifier,
            10,
            HeadSpec::Classifier { classes: 10 },
        ),
        Task::Toy => (HeadKind::Classifier, 2, HeadSpec::Classifier { classes: 2 }),
        Task::SynthSpeaker => (
            HeadKind::Embedding,
            config.embed,
            if config.ge2e {
                HeadSpec::ProjectionGe2e {
                    embed: config.embed,
                }
            } else {
                HeadSpec::Projection {
                    embed: config.embed,
                }
            },
        ),
    }
}

fn model_spec(config: &RunConfig) -> ModelSpec {
    let input = task_input(config);
    let (head, head_out, _) = task_head(config);
    ModelSpec {
        kind: config.cell,
        parameterization: config.param,
        hidden: config.hidden,
        input,
        cores: config.cores,
        rank0: config.rank0,
        rank: config.rank,
        head,
        head_out,
        seed: config.seed,
    }
}

fn settings(config: &RunConfig) -> TrainSettings {
    TrainSettings {
        epochs: config.epochs,
        batch_size: config.batch,
        lr: config.lr,
        patience: config.patience,
        seed: config.seed,
        workers: config.workers.max(1),
        ge2e_speakers: config.ge2e_speakers,
        ge2e_utterances: config.ge2e_utterances,
    }
}

fn ensure_out_dir(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out)?;
    Ok(())
}

// --- params ----------------------------------------------------------------

pub fn cmd_params(config: &RunConfig) -> Result<i32> {
    ensure_out_dir(config)?;
    let input = task_input(config);
    let (_, _, head) = task_head(config);
    let acc = param_accounting(geometry(config, input), head);
    println!(
        "parameter accounting: {} {} D={} M={} (task {})",
        cell_name(config.cell),
        param_name(config.param),
        config.hidden,
        input,
        config.task.name()
    );
    println!("{:<18}{:>14}{:>14}", "component", "formula", "actual");
    for row in &acc.rows {
        let formula = row
            .formula
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".to_string());
        println!("{:<18}{:>14}{:>14}", row.component, formula, row.actual);
    }
    println!(
        "dense-equivalent total {} -> compression {:.2}x",
        acc.dense_total, acc.compression
    );
    let mut csv = String::from("component,formula,actual\n");
    for row in &acc.rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            row.component,
            row.formula.map(|v| v.to_string()).unwrap_or_default(),
            row.actual
        ));
    }
    csv.push_str(&format!("dense-total,,{}\n", acc.dense_total));
    csv.push_str(&format!("compression,,{}\n", acc.compression));
    std::fs::write(config.out.join("params.csv"), csv)?;
    Ok(0)
}

fn cell_name(kind: CellKind) -> &'static str {
    match kind {
        CellKind::Lstm => "lstm",
        CellKind::Gru => "gru",
    }
}

fn param_name(p: Parameterization) -> &'static str {
    match p {
        Parameterization::Dense => "dense",
        Parameterization::TtSeparate => "tt-sep",
        Parameterization::TtFused => "tt-fused",
    }
}

// --- bench -------------------------------------------------------------------

pub fn cmd_bench(config: &RunConfig) -> Result<i32> {
    ensure_out_dir(config)?;
    let input = task_input(config);
    let spec = model_spec(config);
    let model = Model::build(spec)?;
    let steps = match config.task {
        Task::Mnist => {
            let side = 28 / config.downsample.max(1);
            if config.row_per_step {
                side
            } else {
                side * side
            }
        }
        Task::SynthSpeaker => config.steps,
        Task::Toy => 8,
    };
    let mut rng = Rng::new(config.seed);
    let inputs = DenseTensor::randn(vec![config.batch, steps, input], 1.0, &mut rng);
    let labels: Vec<usize> = (0..config.batch)
        .map(|_| rng.next_below(model.spec.head_out.max(2)))
        .collect();

    let mut train_times = Vec::with_capacity(config.repeats);
    let mut eval_times = Vec::with_capacity(config.repeats);
    let mut bench_model = model.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    for _ in 0..config.repeats.max(1) {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let logits = bench_model.forward_head(&mut tape, inputs.clone())?;
        let loss = match model.spec.head {
            HeadKind::Classifier => tape.softmax_cross_entropy(logits, &labels)?,
            HeadKind::Embedding => {
                // one GE2E step over an (speakers x utterances) view
                let head = bench_model.ge2e.as_ref().expect("embedding model");
                let scale = tape.param("ge2e.w", head.scale.clone());
                let offset = tape.param("ge2e.b", head.offset.clone());
                let n = config.ge2e_speakers.max(2).min(config.batch / 2);
                let p = config.batch / n;
                let used = tape.slice(logits, 0, 0, n * p)?;
                ttrnn_core::loss::ge2e_loss_on_tape(&mut tape, used, n, p, scale, offset)?
            }
        };
        let grads = tape.backward_scalar(loss)?;
        adam.step(&mut bench_model, &grads)?;
        train_times.push(t0.elapsed().as_secs_f64() * 1e3);

        let t1 = Instant::now();
        let mut tape = Tape::new();
        let _ = bench_model.forward_head(&mut tape, inputs.clone())?;
        eval_times.push(t1.elapsed().as_secs_f64() * 1e3);
    }
    let stats = |xs: &[f64]| -> (f64, Option<f64>) {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        if xs.len() < 2 {
            return (mean, None);
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
        (mean, Some(var.sqrt()))
    };
    let (train_mean, train_std) = stats(&train_times);
    let (eval_mean, eval_std) = stats(&eval_times);
    let geo = geometry(config, input);
    let eval_madds = cell_step_flops(geo, config.batch) * steps as u64;
    let dense_geo = CellGeometry {
        parameterization: Parameterization::Dense,
        ..geo
    };
    let dense_madds = cell_step_flops(dense_geo, config.batch) * steps as u64;
    let (_, _, head) = task_head(config);
    let total_params = param_accounting(geo, head).total;

    let fmt_std = |s: Option<f64>| s.map(|v| format!("{v:.3}")).unwrap_or_default();
    println!(
        "bench {} {} D={} M={} T={} batch={} repeats={}",
        cell_name(config.cell),
        param_name(config.param),
        config.hidden,
        input,
        steps,
        config.batch,
        config.repeats
    );
    println!(
        "train step {:.3} ms {} | eval step {:.3} ms {}",
        train_mean,
        train_std
            .map(|s| format!("+- {s:.3}"))
            .unwrap_or_else(|| "(single sample)".into()),
        eval_mean,
        eval_std
            .map(|s| format!("+- {s:.3}"))
            .unwrap_or_else(|| "(single sample)".into()),
    );
    println!(
        "eval matvec madds {} (dense equivalent {}, ratio {:.3})",
        eval_madds,
        dense_madds,
        eval_madds as f64 / dense_madds as f64
    );
    let csv = format!(
        "model,param,r,params,train_ms_mean,train_ms_std,eval_ms_mean,eval_ms_std,eval_madds,dense_madds\n{},{},{},{},{},{},{},{},{},{}\n",
        cell_name(config.cell),
        param_name(config.param),
        config.rank,
        total_params,
        train_mean,
        fmt_std(train_std),
        eval_mean,
        fmt_std(eval_std),
        eval_madds,
        dense_madds
    );
    std::fs::write(config.out.join("bench.csv"), csv)?;
    Ok(0)
}

// --- gradcheck ----------------------------------------------------------------

pub fn cmd_gradcheck(config: &RunConfig, inject_bug: bool) -> Result<i32> {
    let input = task_input(config).clamp(1, 8);
    let hidden = config.hidden.clamp(2, 8);
    let cell = build_cell(config, hidden, input)?;
    let kind = config.cell;
    let mut rng = Rng::new(config.seed);
    let x = DenseTensor::randn(vec![2, 3, input], 1.0, &mut rng);
    let mut map = BTreeMap::new();
    cell.visit(&mut |n, t| {
        map.insert(n.to_string(), t.clone());
    });
    ttrnn_core::autograd::set_backward_fault_injection(inject_bug);
    let err = gradcheck(
        |tape, vars| {
            let bound = cell.bind_with(&mut |n, _| vars[n]);
            let xv = tape.leaf(x.clone());
            let init = CellState::zeros(tape, kind, 2, hidden);
            let out = run_sequence(tape, &bound, xv, init)?;
            let all = tape.concat(1, &out.hiddens)?;
            Ok(tape.sum_all(all))
        },
        &map,
        1e-5,
        GRADCHECK_MAX_COORDS,
        config.seed ^ 0x6c,
    );
    ttrnn_core::autograd::set_backward_fault_injection(false);
    let err = err?;
    println!(
        "gradcheck {} {} (3 unrolled steps, {} sampled coordinates): max rel err {err:.3e}",
        cell_name(config.cell),
        param_name(config.param),
        GRADCHECK_MAX_COORDS
    );
    if err > 1e-4 {
        eprintln!("gradient check FAILED (threshold 1e-4)");
        return Ok(EXIT_VALIDATION);
    }
    println!("gradient check passed (threshold 1e-4)");
    Ok(0)
}

fn build_cell(config: &RunConfig, hidden: usize, input: usize) -> Result<CellParams> {
    Ok(match config.param {
        Parameterization::Dense => {
            CellParams::Dense(DenseCellParams::init(config.cell, hidden, input, config.seed))
        }
        Parameterization::TtSeparate => CellParams::Separate(SeparateTtCellParams::init(
            config.cell,
            hidden,
            input,
            config.cores,
            config.rank,
            config.seed,
        )?),
        Parameterization::TtFused => CellParams::Fused(FusedTtCellParams::init(
            config.cell,
            hidden,
            input,
            config.cores,
            config.rank0,
            config.rank,
            config.seed,
        )?),
    })
}

// --- data assembly --------------------------------------------------------

fn mnist_sequences(
    config: &RunConfig,
) -> Result<(SequenceDataset, SequenceDataset, SequenceDataset)> {
    let root = config.dataset_root()?;
    let find = |base: &str| -> Result<PathBuf> {
        for suffix in ["", ".gz"] {
            let candidate = root.join(format!("{base}{suffix}"));
            if candidate.exists() {
                return Ok(candidate);
            }
        }
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found under {}", base, root.display()),
        )))
    };
    let train_images = load_idx(
        &find("train-images-idx3-ubyte")?,
        &find("train-labels-idx1-ubyte")?,
    )?;
    let test_images = load_idx(
        &find("t10k-images-idx3-ubyte")?,
        &find("t10k-labels-idx1-ubyte")?,
    )?;
    let (train, val, _) = split_images(&train_images, config.train_count, config.val_count, 0)?;
    let (test, _, _) = split_images(&test_images, config.test_count.min(test_images.count), 0, 0)?;
    let transform = |img: &ttrnn_core::data::ImageDataset, split: Split| -> Result<SequenceDataset> {
        let mut out = downsample(img, config.downsample.max(1))?;
        if config.permute {
            out = permute_pixels(&out, config.permute_seed);
        }
        Ok(to_sequences(&out, split, config.row_per_step))
    };
    let mut train_seq = transform(&train, Split::Train)?;
    if config.data_fraction < 1.0 {
        train_seq = train_seq.take_fraction(config.data_fraction, config.seed);
    }
    Ok((
        train_seq,
        transform(&val, Split::Val)?,
        transform(&test, Split::Test)?,
    ))
}

fn toy_sequences(config: &RunConfig) -> (SequenceDataset, SequenceDataset, SequenceDataset) {
    let mut train = synth_toy(256, 8, 4, config.seed.wrapping_add(1));
    let val = synth_toy(64, 8, 4, config.seed.wrapping_add(2));
    let test = synth_toy(64, 8, 4, config.seed.wrapping_add(3));
    if config.data_fraction < 1.0 {
        train = train.take_fraction(config.data_fraction, config.seed);
    }
    (train, val, test)
}

fn speaker_data(config: &RunConfig) -> Result<(SpeakerDataset, SpeakerDataset)> {
    let data = synth_speakers_within(
        config.speakers,
        config.utterances,
        config.steps,
        config.features,
        config.sep,
        config.noise,
        config.within,
        config.seed,
    )?;
    let train_utts = config
        .utterances
        .saturating_sub(config.val_utterances)
        .max(2);
    let (mut train, val) = data.split_utterances(train_utts);
    if config.data_fraction < 1.0 {
        train = train.take_fraction(config.data_fraction);
    }
    Ok((train, val))
}

// --- train / eval -----------------------------------------------------------

pub fn cmd_train(config: &RunConfig) -> Result<i32> {
    ensure_out_dir(config)?;
    let spec = model_spec(config);
    let model = Model::build(spec)?;
    let total_params = model.num_param_elements();
    println!(
        "training {} {} D={} M={} ({} parameters) on task {}",
        cell_name(config.cell),
        param_name(config.param),
        config.hidden,
        task_input(config),
        total_params,
        config.task.name()
    );
    let run = match config.task {
        Task::Mnist => {
            let (train, val, test) = mnist_sequences(config)?;
            let run = train_classifier(model, &settings(config), &train, &val, None)?;
            let (test_loss, test_acc) = evaluate_classifier(&run.best_model, &test, config.workers)?;
            println!(
                "best val accuracy {:.4}; test accuracy {:.4} (loss {:.4})",
                run.best_val_metric, test_acc, test_loss
            );
            run
        }
        Task::Toy => {
            let (train, val, test) = toy_sequences(config);
            let run = train_classifier(model, &settings(config), &train, &val, None)?;
            let (_, test_acc) = evaluate_classifier(&run.best_model, &test, config.workers)?;
            println!(
                "best val accuracy {:.4}; test accuracy {:.4}",
                run.best_val_metric, test_acc
            );
            run
        }
        Task::SynthSpeaker => {
            if !config.ge2e {
                return Err(Error::Config(
                    "synth-speaker training requires the GE2E head (ge2e=true)".into(),
                ));
            }
            let (train, val) = speaker_data(config)?;
            let run = train_verifier(model, &settings(config), &train, &val, None)?;
            println!("best validation EER {:.4}", run.best_val_metric);
            run
        }
    };
    if run.stopped_early {
        println!("stopped early at epoch {}", run.progress.epoch_next);
    }
    // metrics, gradient-norm dump (values + histogram), checkpoint
    run.metrics.write(&config.out.join("metrics.csv"))?;
    let mut norms_csv = String::from("step,grad_norm\n");
    for (i, n) in run.grad_norms.iter().enumerate() {
        norms_csv.push_str(&format!("{i},{n}\n"));
    }
    std::fs::write(config.out.join("grad_norms.csv"), norms_csv)?;
    let (edges, counts) = histogram(&run.grad_norms, 20);
    let mut hist_csv = String::from("bin_low,bin_high,count\n");
    for (i, c) in counts.iter().enumerate() {
        hist_csv.push_str(&format!("{},{},{}\n", edges[i], edges[i + 1], c));
    }
    std::fs::write(config.out.join("grad_norm_hist.csv"), hist_csv)?;
    let ckpt = run
        .best_model
        .to_checkpoint(run.progress.clone(), Some(&run.adam), config.seed);
    ckpt.save(&config.out.join("model.ckpt"))?;
    std::fs::write(
        config.out.join("resolved.cfg"),
        config
            .canonical_text()
            .split(' ')
            .collect::<Vec<_>>()
            .join("\n")
            + "\n",
    )?;
    println!(
        "wrote metrics.csv, grad_norms.csv, grad_norm_hist.csv, model.ckpt to {}",
        config.out.display()
    );
    Ok(0)
}

pub fn cmd_eval(config: &RunConfig, checkpoint: &Path) -> Result<i32> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let spec = model_spec(config);
    let (model, _) = Model::from_checkpoint(spec, &ckpt)?;
    match config.task {
        Task::Mnist => {
            let (_, val, test) = mnist_sequences(config)?;
            let (val_loss, val_acc) = evaluate_classifier(&model, &val, config.workers)?;
            let (test_loss, test_acc) = evaluate_classifier(&model, &test, config.workers)?;
            println!(
                "val accuracy {val_acc:.6} (loss {val_loss:.6}); test accuracy {test_acc:.6} (loss {test_loss:.6})"
            );
            println!(
                "checkpoint best val metric {:.6} (delta {:.3e})",
                ckpt.progress.best_metric,
                (val_acc - ckpt.progress.best_metric).abs()
            );
        }
        Task::Toy => {
            let (_, val, test) = toy_sequences(config);
            let (_, val_acc) = evaluate_classifier(&model, &val, config.workers)?;
            let (_, test_acc) = evaluate_classifier(&model, &test, config.workers)?;
            println!("val accuracy {val_acc:.6}; test accuracy {test_acc:.6}");
            println!(
                "checkpoint best val metric {:.6} (delta {:.3e})",
                ckpt.progress.best_metric,
                (val_acc - ckpt.progress.best_metric).abs()
            );
        }
        Task::SynthSpeaker => {
            let (_, val) = speaker_data(config)?;
            let (eer_value, loss) = validation_eer(&model, &val)?;
            println!("val EER {eer_value:.6} (GE2E loss {loss:.6})");
            println!(
                "checkpoint best val metric {:.6} (delta {:.3e})",
                ckpt.progress.best_metric,
                (eer_value - ckpt.progress.best_metric).abs()
            );
        }
    }
    Ok(0)
}

// --- inspect ------------------------------------------------------------------

pub fn cmd_inspect(checkpoint: &Path) -> Result<i32> {
    let ckpt = Checkpoint::load(checkpoint)?;
    println!("checkpoint: {}", checkpoint.display());
    println!("config: {}", ckpt.config_text);
    println!("config hash: {:016x}", ckpt.config_hash);
    println!("gate order: {}", ckpt.gate_order);
    println!("bias convention: {}", ckpt.bias_convention);
    println!(
        "progress: epoch_next={} best_metric={} stalls={} lr={}",
        ckpt.progress.epoch_next, ckpt.progress.best_metric, ckpt.progress.stalls, ckpt.progress.lr
    );
    let mut total = 0usize;
    let mut saw_tt = false;
    for (name, payload) in &ckpt.entries {
        match payload {
            Payload::Dense(t) => {
                total += t.len();
                println!("  {name}: dense {:?} ({} elements)", t.shape(), t.len());
            }
            Payload::Tt(ttm) => {
                saw_tt = true;
                total += ttm.num_elements();
                println!(
                    "  {name}: TT {}x{} rows {:?} cols {:?} ranks {:?} ({} elements)",
                    ttm.num_rows(),
                    ttm.num_cols(),
                    ttm.row_dims(),
                    ttm.col_dims(),
                    ttm.ranks(),
                    ttm.num_elements()
                );
                // gate-stacked chains expose the mixing matrix and per-gate
                // mixture norms
                if let Ok(stack) = GateStackedTT::new(ttm.clone()) {
                    let v = stack.mixing_matrix();
                    let g = stack.gate_count();
                    let r0 = stack.mixture_rank();
                    println!("    mixing matrix V ({g} x {r0}):");
                    for gate in 0..g {
                        let row: Vec<String> = (0..r0)
                            .map(|a| format!("{:+.4}", v.get(&[gate, a])))
                            .collect();
                        println!("      gate {gate}: [{}]", row.join(", "));
                    }
                    for gate in 0..g {
                        let mix = gate_matrix_mixture(&stack, gate)?;
                        println!(
                            "    gate {gate} mixture matrix frobenius norm {:.6}",
                            mix.frob_norm()
                        );
                    }
                }
            }
        }
    }
    println!("total stored elements: {total}");
    if !saw_tt {
        println!("no TT structure (dense checkpoint)");
    }
    Ok(0)
}

// --- gen-data -------------------------------------------------------------------

pub fn cmd_gen_data(config: &RunConfig) -> Result<i32> {
    match config.task {
        Task::Mnist => {
            ensure_out_dir(config)?;
            let train_total = config.train_count + config.val_count;
            let train = synth_digits(train_total, 28, config.seed);
            let test = synth_digits(config.test_count, 28, config.seed ^ 0x7e57);
            write_idx(
                &train,
                &config.out.join("train-images-idx3-ubyte"),
                &config.out.join("train-labels-idx1-ubyte"),
            )?;
            write_idx(
                &test,
                &config.out.join("t10k-images-idx3-ubyte"),
                &config.out.join("t10k-labels-idx1-ubyte"),
            )?;
            println!(
                "wrote {} train and {} test synthetic digit images to {}",
                train_total,
                config.test_count,
                config.out.display()
            );
            println!(
                "train with: ttrnn train --task mnist --data-dir {}",
                config.out.display()
            );
            Ok(0)
        }
        other => Err(Error::Config(format!(
            "gen-data supports task mnist only; {} is generated on the fly",
            other.name()
        ))),
    }
}
