//! Models (recurrent encoder plus task head), training loops with early
//! stopping and a piecewise-constant learning-rate schedule, evaluation, and
//! checkpoint conversion.
//!
//! Training with TT cells runs under the dense-reconstruction guard, so no
//! gate-stacked weight matrix is ever materialized during a training step.
//! Batch forward/backward shards over fixed-size chunks reduced in chunk
//! order; worker count changes scheduling only, never values.

use std::time::Instant;

use crate::autograd::{GradMap, Tape, Var};
use crate::cells::{
    run_sequence, CellKind, CellParams, CellState, DenseCellParams, FusedTtCellParams,
    Parameterization, SeparateTtCellParams,
};
use crate::checkpoint::{AdamSnapshot, Checkpoint, Payload, TrainerProgress};
use crate::data::{batches, SequenceDataset, SpeakerDataset};
use crate::error::{Error, Result};
use crate::loss::{eer, ge2e_loss_on_tape, ge2e_scores, Ge2eHead, VerificationBatch};
use crate::metrics::{percentile, MetricsLog, MetricsRow};
use crate::optim::{AdamConfig, AdamState, Parameterized};
use crate::rng::{fnv1a64, Rng};
use crate::tensor::DenseTensor;
use crate::tt::{GateStackedTT, ReconstructionGuard};

/// Examples per forward/backward chunk. Fixed regardless of worker count so
/// the reduction tree (and therefore every float) is identical for any
/// number of workers.
pub const CHUNK_SIZE: usize = 16;

/// Structural description of a model, hashed into checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: CellKind,
    pub parameterization: Parameterization,
    pub hidden: usize,
    pub input: usize,
    pub cores: usize,
    pub rank0: usize,
    pub rank: usize,
    pub head: HeadKind,
    pub head_out: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Classifier,
    Embedding,
}

impl ModelSpec {
    pub fn canonical_text(&self) -> String {
        format!(
            "cell={} param={} hidden={} input={} cores={} rank0={} rank={} head={} head_out={} seed={}",
            match self.kind {
                CellKind::Lstm => "lstm",
                CellKind::Gru => "gru",
            },
            match self.parameterization {
                Parameterization::Dense => "dense",
                Parameterization::TtSeparate => "tt-sep",
                Parameterization::TtFused => "tt-fused",
            },
            self.hidden,
            self.input,
            self.cores,
            self.rank0,
            self.rank,
            match self.head {
                HeadKind::Classifier => "classifier",
                HeadKind::Embedding => "embedding",
            },
            self.head_out,
            self.seed,
        )
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.canonical_text().as_bytes())
    }
}

/// Recurrent encoder plus a linear head; verification models also carry the
/// trainable similarity scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub cell: CellParams,
    pub head_w: DenseTensor,
    pub head_b: DenseTensor,
    pub ge2e: Option<Ge2eHead>,
}

impl Model {
    /// Build a model from its spec with seeded initialization.
    pub fn build(spec: ModelSpec) -> Result<Model> {
        let cell = match spec.parameterization {
            Parameterization::Dense => Ok(CellParams::Dense(DenseCellParams::init(
                spec.kind,
                spec.hidden,
                spec.input,
                spec.seed,
            ))),
            Parameterization::TtSeparate => SeparateTtCellParams::init(
                spec.kind,
                spec.hidden,
                spec.input,
                spec.cores,
                spec.rank,
                spec.seed,
            )
            .map(CellParams::Separate),
            Parameterization::TtFused => FusedTtCellParams::init(
                spec.kind,
                spec.hidden,
                spec.input,
                spec.cores,
                spec.rank0,
                spec.rank,
                spec.seed,
            )
            .map(CellParams::Fused),
        }?;
        let mut rng = Rng::derive(spec.seed, 0x6ead);
        let std = 1.0 / (spec.hidden as f64).sqrt();
        let head_w = DenseTensor::randn(vec![spec.head_out, spec.hidden], std, &mut rng);
        let head_b = DenseTensor::zeros(vec![spec.head_out]);
        let ge2e = match spec.head {
            HeadKind::Classifier => None,
            HeadKind::Embedding => Some(Ge2eHead::new()),
        };
        Ok(Model {
            spec,
            cell,
            head_w,
            head_b,
            ge2e,
        })
    }

    fn uses_tt(&self) -> bool {
        self.spec.parameterization != Parameterization::Dense
    }

    /// Head output on the final hidden state of the sequence: class logits
    /// or utterance embeddings, depending on the head kind.
    pub fn forward_head(&self, tape: &mut Tape, inputs: DenseTensor) -> Result<Var> {
        let batch = inputs.shape()[0];
        let bound = self.cell.bind(tape);
        let xv = tape.leaf(inputs);
        let init = CellState::zeros(tape, self.spec.kind, batch, self.spec.hidden);
        let out = run_sequence(tape, &bound, xv, init)?;
        let w = tape.param("head.w", self.head_w.clone());
        let b = tape.param("head.b", self.head_b.clone());
        let proj = tape.contract(out.final_state.h, w, &[1], &[1])?;
        tape.add_bias(proj, b)
    }
}

impl Parameterized for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &DenseTensor)) {
        self.cell.visit(f);
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
        if let Some(g) = &self.ge2e {
            f("ge2e.w", &g.scale);
            f("ge2e.b", &g.offset);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor)) {
        self.cell.visit_mut(f);
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
        if let Some(g) = &mut self.ge2e {
            f("ge2e.w", &mut g.scale);
            f("ge2e.b", &mut g.offset);
        }
    }
}

// --- checkpoint conversion -------------------------------------------------

impl Model {
    pub fn to_checkpoint(
        &self,
        progress: TrainerProgress,
        adam: Option<&AdamState>,
        rng_state: u64,
    ) -> Checkpoint {
        let mut entries: Vec<(String, Payload)> = Vec::new();
        match &self.cell {
            CellParams::Dense(p) => {
                entries.push(("cell.w".into(), Payload::Dense(p.w.clone())));
                entries.push(("cell.u".into(), Payload::Dense(p.u.clone())));
            }
            CellParams::Separate(p) => {
                for (gate, ttm) in p.w.iter().enumerate() {
                    entries.push((format!("cell.w{gate}"), Payload::Tt(ttm.clone())));
                }
                for (gate, ttm) in p.u.iter().enumerate() {
                    entries.push((format!("cell.u{gate}"), Payload::Tt(ttm.clone())));
                }
            }
            CellParams::Fused(p) => {
                entries.push(("cell.w".into(), Payload::Tt(p.w.tt().clone())));
                entries.push(("cell.u".into(), Payload::Tt(p.u.tt().clone())));
            }
        }
        match self.cell.biases() {
            crate::cells::CellBiases::Single(b) => {
                entries.push(("cell.b".into(), Payload::Dense(b.clone())));
            }
            crate::cells::CellBiases::Dual { input, hidden } => {
                entries.push(("cell.b_in".into(), Payload::Dense(input.clone())));
                entries.push(("cell.b_hid".into(), Payload::Dense(hidden.clone())));
            }
        }
        entries.push(("head.w".into(), Payload::Dense(self.head_w.clone())));
        entries.push(("head.b".into(), Payload::Dense(self.head_b.clone())));
        if let Some(g) = &self.ge2e {
            entries.push(("ge2e.w".into(), Payload::Dense(g.scale.clone())));
            entries.push(("ge2e.b".into(), Payload::Dense(g.offset.clone())));
        }
        let adam_snapshot = adam.map(|a| AdamSnapshot {
            step: a.step_count(),
            lr: a.config.lr,
            beta1: a.config.beta1,
            beta2: a.config.beta2,
            eps: a.config.eps,
            moments: a
                .moments()
                .map(|(name, (m, v))| (name.clone(), m.clone(), v.clone()))
                .collect(),
        });
        Checkpoint {
            config_hash: self.spec.config_hash(),
            config_text: self.spec.canonical_text(),
            gate_order: self.spec.kind.gate_order_tag().to_string(),
            bias_convention: self.spec.kind.bias_convention_tag().to_string(),
            rng_state,
            progress,
            entries,
            adam: adam_snapshot,
        }
    }

    /// Rebuild a model (and optimizer state, if present) from a checkpoint.
    /// The spec must structurally match what was saved; gate-order and
    /// bias-convention tags are validated.
    pub fn from_checkpoint(spec: ModelSpec, ckpt: &Checkpoint) -> Result<(Model, Option<AdamState>)> {
        if ckpt.gate_order != spec.kind.gate_order_tag() {
            return Err(Error::Checkpoint(format!(
                "gate order mismatch: checkpoint has {:?}, config needs {:?}",
                ckpt.gate_order,
                spec.kind.gate_order_tag()
            )));
        }
        if ckpt.bias_convention != spec.kind.bias_convention_tag() {
            return Err(Error::Checkpoint(format!(
                "bias convention mismatch: checkpoint has {:?}, config needs {:?}",
                ckpt.bias_convention,
                spec.kind.bias_convention_tag()
            )));
        }
        if ckpt.config_hash != spec.config_hash() {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint built for [{}], requested [{}]",
                ckpt.config_text,
                spec.canonical_text()
            )));
        }
        let mut model = Model::build(spec)?;
        let dense_entry = |name: &str| -> Result<DenseTensor> {
            match ckpt.entry(name) {
                Some(Payload::Dense(t)) => Ok(t.clone()),
                _ => Err(Error::Checkpoint(format!("missing dense entry {name}"))),
            }
        };
        let tt_entry = |name: &str| -> Result<crate::tt::TTMatrix> {
            match ckpt.entry(name) {
                Some(Payload::Tt(t)) => Ok(t.clone()),
                _ => Err(Error::Checkpoint(format!("missing TT entry {name}"))),
            }
        };
        match &mut model.cell {
            CellParams::Dense(p) => {
                p.w = dense_entry("cell.w")?;
                p.u = dense_entry("cell.u")?;
            }
            CellParams::Separate(p) => {
                for (gate, ttm) in p.w.iter_mut().enumerate() {
                    *ttm = tt_entry(&format!("cell.w{gate}"))?;
                }
                for (gate, ttm) in p.u.iter_mut().enumerate() {
                    *ttm = tt_entry(&format!("cell.u{gate}"))?;
                }
            }
            CellParams::Fused(p) => {
                p.w = GateStackedTT::new(tt_entry("cell.w")?)?;
                p.u = GateStackedTT::new(tt_entry("cell.u")?)?;
            }
        }
        match &mut model.cell {
            CellParams::Dense(p) => restore_biases(&mut p.biases, ckpt)?,
            CellParams::Separate(p) => restore_biases(&mut p.biases, ckpt)?,
            CellParams::Fused(p) => restore_biases(&mut p.biases, ckpt)?,
        }
        model.head_w = dense_entry("head.w")?;
        model.head_b = dense_entry("head.b")?;
        if let Some(g) = &mut model.ge2e {
            g.scale = dense_entry("ge2e.w")?;
            g.offset = dense_entry("ge2e.b")?;
        }
        let adam = match &ckpt.adam {
            None => None,
            Some(a) => {
                let mut state = AdamState::new(AdamConfig {
                    lr: a.lr,
                    beta1: a.beta1,
                    beta2: a.beta2,
                    eps: a.eps,
                });
                state.set_step_count(a.step);
                for (name, m, v) in &a.moments {
                    state.restore_moment(name, m.clone(), v.clone());
                }
                Some(state)
            }
        };
        Ok((model, adam))
    }
}

fn restore_biases(biases: &mut crate::cells::CellBiases, ckpt: &Checkpoint) -> Result<()> {
    let dense_entry = |name: &str| -> Result<DenseTensor> {
        match ckpt.entry(name) {
            Some(Payload::Dense(t)) => Ok(t.clone()),
            _ => Err(Error::Checkpoint(format!("missing dense entry {name}"))),
        }
    };
    match biases {
        crate::cells::CellBiases::Single(b) => *b = dense_entry("cell.b")?,
        crate::cells::CellBiases::Dual { input, hidden } => {
            *input = dense_entry("cell.b_in")?;
            *hidden = dense_entry("cell.b_hid")?;
        }
    }
    Ok(())
}

// --- chunked classifier step ------------------------------------------------

struct ChunkResult {
    loss_sum: f64,
    correct: usize,
    grads: Option<GradMap>,
}

/// Forward (and optionally backward) over one chunk of examples.
fn classifier_chunk(
    model: &Model,
    inputs: DenseTensor,
    labels: &[usize],
    with_grads: bool,
) -> Result<ChunkResult> {
    let _guard = model.uses_tt().then(ReconstructionGuard::forbid);
    debug_assert!(!model.uses_tt() || crate::tt::reconstruction_forbidden());
    let count = labels.len();
    let mut tape = Tape::new();
    let logits = model.forward_head(&mut tape, inputs)?;
    let classes = tape.value(logits).shape()[1];
    let correct = {
        let values = tape.value(logits);
        labels
            .iter()
            .enumerate()
            .filter(|&(row, &label)| {
                let r = &values.data()[row * classes..(row + 1) * classes];
                let argmax = r
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                argmax == label
            })
            .count()
    };
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss {loss_value} in classifier chunk"
        )));
    }
    let grads = if with_grads {
        Some(tape.backward_scalar(loss)?)
    } else {
        None
    };
    Ok(ChunkResult {
        loss_sum: loss_value * count as f64,
        correct,
        grads,
    })
}

/// Chunked batch step with fixed chunk boundaries and in-order reduction.
/// `workers` > 1 only parallelizes chunk execution.
fn classifier_batch(
    model: &Model,
    ds: &SequenceDataset,
    indices: &[usize],
    workers: usize,
    with_grads: bool,
) -> Result<(f64, usize, Option<GradMap>)> {
    let chunks: Vec<&[usize]> = indices.chunks(CHUNK_SIZE).collect();
    let mut results: Vec<Option<Result<ChunkResult>>> = Vec::new();
    results.resize_with(chunks.len(), || None);
    if workers <= 1 || chunks.len() == 1 {
        for (slot, chunk) in results.iter_mut().zip(&chunks) {
            let (inputs, labels) = ds.gather(chunk);
            *slot = Some(classifier_chunk(model, inputs, &labels, with_grads));
        }
    } else {
        let worker_count = workers.min(chunks.len());
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..worker_count {
                let chunks_ref = &chunks;
                let handle = scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut idx = w;
                    while idx < chunks_ref.len() {
                        let (inputs, labels) = ds.gather(chunks_ref[idx]);
                        out.push((idx, classifier_chunk(model, inputs, &labels, with_grads)));
                        idx += worker_count;
                    }
                    out
                });
                handles.push(handle);
            }
            for handle in handles {
                for (idx, res) in handle.join().expect("worker panicked") {
                    results[idx] = Some(res);
                }
            }
        });
    }
    let total = indices.len() as f64;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut merged: Option<GradMap> = None;
    for (slot, chunk) in results.into_iter().zip(&chunks) {
        let r = slot.expect("chunk not executed")?;
        loss_sum += r.loss_sum;
        correct += r.correct;
        if let Some(mut g) = r.grads {
            // chunk loss was a chunk mean; reweight to the batch mean
            g.scale(chunk.len() as f64 / total);
            match &mut merged {
                Some(acc) => acc.accumulate(&g)?,
                None => merged = Some(g),
            }
        }
    }
    Ok((loss_sum / total, correct, merged))
}

/// Mean loss and accuracy over a dataset.
pub fn evaluate_classifier(
    model: &Model,
    ds: &SequenceDataset,
    workers: usize,
) -> Result<(f64, f64)> {
    let indices: Vec<usize> = (0..ds.examples).collect();
    let (loss, correct, _) = classifier_batch(model, ds, &indices, workers, false)?;
    Ok((loss, correct as f64 / ds.examples as f64))
}

// --- training loops ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
    pub workers: usize,
    /// Verification batch composition: speakers per batch, utterances each.
    pub ge2e_speakers: usize,
    pub ge2e_utterances: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            patience: 5,
            seed: 0,
            workers: 1,
            ge2e_speakers: 8,
            ge2e_utterances: 4,
        }
    }
}

/// Everything a finished (or interrupted) run hands back.
pub struct TrainRun {
    /// Parameters at the best validation metric.
    pub best_model: Model,
    /// Parameters at the moment training stopped (for continuation).
    pub final_model: Model,
    pub adam: AdamState,
    pub progress: TrainerProgress,
    pub metrics: MetricsLog,
    pub grad_norms: Vec<f64>,
    pub best_val_metric: f64,
    pub stopped_early: bool,
}

struct EarlyStopper {
    best: f64,
    stalls: usize,
    patience: usize,
    higher_is_better: bool,
}

impl EarlyStopper {
    fn improved(&mut self, metric: f64) -> bool {
        let better = if self.higher_is_better {
            metric > self.best + 1e-12
        } else {
            metric < self.best - 1e-12
        };
        if better {
            self.best = metric;
            self.stalls = 0;
        } else {
            self.stalls += 1;
        }
        better
    }

    fn should_decay(&self) -> bool {
        self.stalls == (self.patience / 2).max(1)
    }

    fn should_stop(&self) -> bool {
        self.stalls >= self.patience
    }
}

/// Supervised sequence-classification training: epoch loop, per-epoch
/// validation accuracy, early stopping on validation patience, and learning
/// rate decay (x0.3) at half patience. Resume from a saved (adam, progress)
/// pair continues the exact uninterrupted trajectory.
pub fn train_classifier(
    mut model: Model,
    settings: &TrainSettings,
    train_ds: &SequenceDataset,
    val_ds: &SequenceDataset,
    resume: Option<(AdamState, TrainerProgress)>,
) -> Result<TrainRun> {
    let fingerprint = format!(
        "{} | model {}",
        train_ds.provenance.fingerprint(),
        model.spec.canonical_text()
    );
    let mut metrics = MetricsLog::new(fingerprint);
    let (mut adam, start_epoch, mut stopper, mut lr) = match resume {
        Some((adam, progress)) => {
            let lr = progress.lr;
            (
                adam,
                progress.epoch_next as usize,
                EarlyStopper {
                    best: progress.best_metric,
                    stalls: progress.stalls as usize,
                    patience: settings.patience,
                    higher_is_better: true,
                },
                lr,
            )
        }
        None => (
            AdamState::new(AdamConfig::with_lr(settings.lr)),
            0,
            EarlyStopper {
                best: f64::NEG_INFINITY,
                stalls: 0,
                patience: settings.patience,
                higher_is_better: true,
            },
            settings.lr,
        ),
    };
    let mut best_model = model.clone();
    let mut grad_norms: Vec<f64> = Vec::new();
    let mut stopped_early = false;
    let mut global_step = 0usize;
    let mut final_epoch = start_epoch;

    for epoch in start_epoch..settings.epochs {
        final_epoch = epoch + 1;
        let epoch_start = Instant::now();
        let mut epoch_losses = Vec::new();
        let mut epoch_norms = Vec::new();
        let mut epoch_correct = 0usize;
        let mut epoch_count = 0usize;
        for batch_indices in batches(train_ds, settings.batch_size, settings.seed ^ epoch as u64) {
            let (loss, correct, grads) =
                classifier_batch(&model, train_ds, &batch_indices, settings.workers, true)?;
            let grads = grads.expect("training batch always produces gradients");
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient norm at epoch {epoch} step {global_step}"
                )));
            }
            adam.config.lr = lr;
            adam.step(&mut model, &grads)?;
            epoch_losses.push(loss);
            epoch_norms.push(norm);
            grad_norms.push(norm);
            epoch_correct += correct;
            epoch_count += batch_indices.len();
            global_step += 1;
        }
        let train_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        let train_acc = epoch_correct as f64 / epoch_count.max(1) as f64;
        let p50 = percentile(&epoch_norms, 50.0);
        let p95 = percentile(&epoch_norms, 95.0);
        let wall = epoch_start.elapsed().as_secs_f64() * 1e3;
        metrics.push(MetricsRow {
            epoch,
            step: global_step,
            split: "train",
            loss: train_loss,
            accuracy_or_eer: train_acc,
            grad_norm_p50: p50,
            grad_norm_p95: p95,
            lr,
            wall_ms: wall,
        });
        let (val_loss, val_acc) = evaluate_classifier(&model, val_ds, settings.workers)?;
        metrics.push(MetricsRow {
            epoch,
            step: global_step,
            split: "val",
            loss: val_loss,
            accuracy_or_eer: val_acc,
            grad_norm_p50: p50,
            grad_norm_p95: p95,
            lr,
            wall_ms: epoch_start.elapsed().as_secs_f64() * 1e3,
        });
        if stopper.improved(val_acc) {
            best_model = model.clone();
        } else {
            if stopper.should_decay() {
                lr *= 0.3;
            }
            if stopper.should_stop() {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainRun {
        best_model,
        final_model: model,
        adam,
        progress: TrainerProgress {
            epoch_next: final_epoch as u32,
            best_metric: stopper.best,
            stalls: stopper.stalls as u32,
            lr,
        },
        metrics,
        grad_norms,
        best_val_metric: stopper.best,
        stopped_early,
    })
}

/// Utterance embeddings for a [count, T, M] input block.
pub fn embed_utterances(model: &Model, inputs: DenseTensor) -> Result<DenseTensor> {
    let _guard = model.uses_tt().then(ReconstructionGuard::forbid);
    debug_assert!(!model.uses_tt() || crate::tt::reconstruction_forbidden());
    let mut tape = Tape::new();
    let emb = model.forward_head(&mut tape, inputs)?;
    Ok(tape.value(emb).clone())
}

/// Validation EER: embed every utterance, score each against every speaker
/// centroid, and find the FPR/FNR crossing.
pub fn validation_eer(model: &Model, ds: &SpeakerDataset) -> Result<(f64, f64)> {
    let n = ds.num_speakers();
    let p = ds.utterances_per_speaker();
    let picks: Vec<(usize, usize)> = (0..n)
        .flat_map(|j| (0..p).map(move |i| (j, i)))
        .collect();
    let inputs = ds.gather(&picks);
    let emb = embed_utterances(model, inputs)?;
    let head = model
        .ge2e
        .as_ref()
        .ok_or_else(|| Error::Config("verification model missing GE2E head".into()))?;
    let batch = VerificationBatch::new(n, p, emb)?;
    let loss = crate::loss::ge2e_loss(&batch, head)?;
    let (same, diff) = ge2e_scores(&batch, head)?;
    Ok((eer(&same, &diff), loss))
}

/// One GE2E training step on a sampled N x P batch (single tape: the loss
/// couples every embedding through the centroids).
fn verifier_step(
    model: &Model,
    ds: &SpeakerDataset,
    speakers: &[usize],
    utterances: &[Vec<usize>],
) -> Result<(f64, GradMap)> {
    let _guard = model.uses_tt().then(ReconstructionGuard::forbid);
    debug_assert!(!model.uses_tt() || crate::tt::reconstruction_forbidden());
    let p = utterances[0].len();
    let picks: Vec<(usize, usize)> = speakers
        .iter()
        .zip(utterances)
        .flat_map(|(&j, utts)| utts.iter().map(move |&i| (j, i)))
        .collect();
    let inputs = ds.gather(&picks);
    let mut tape = Tape::new();
    let emb = model.forward_head(&mut tape, inputs)?;
    let head = model
        .ge2e
        .as_ref()
        .ok_or_else(|| Error::Config("verification model missing GE2E head".into()))?;
    let scale = tape.param("ge2e.w", head.scale.clone());
    let offset = tape.param("ge2e.b", head.offset.clone());
    let loss = ge2e_loss_on_tape(&mut tape, emb, speakers.len(), p, scale, offset)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite GE2E loss {loss_value}"
        )));
    }
    let grads = tape.backward_scalar(loss)?;
    Ok((loss_value, grads))
}

/// GE2E verification training. Validation EER drives early stopping (lower
/// is better); the same piecewise-constant LR decay applies.
pub fn train_verifier(
    mut model: Model,
    settings: &TrainSettings,
    train_ds: &SpeakerDataset,
    val_ds: &SpeakerDataset,
    resume: Option<(AdamState, TrainerProgress)>,
) -> Result<TrainRun> {
    if model.ge2e.is_none() {
        return Err(Error::Config(
            "train_verifier needs a model with a GE2E head".into(),
        ));
    }
    let n_batch = settings.ge2e_speakers.min(train_ds.num_speakers());
    if n_batch < 2 {
        return Err(Error::Config("GE2E needs at least 2 speakers".into()));
    }
    let p_batch = settings
        .ge2e_utterances
        .min(train_ds.utterances_per_speaker());
    let fingerprint = format!(
        "{} | model {}",
        train_ds.provenance.fingerprint(),
        model.spec.canonical_text()
    );
    let mut metrics = MetricsLog::new(fingerprint);
    let (mut adam, start_epoch, mut stopper, mut lr) = match resume {
        Some((adam, progress)) => {
            let lr = progress.lr;
            (
                adam,
                progress.epoch_next as usize,
                EarlyStopper {
                    best: progress.best_metric,
                    stalls: progress.stalls as usize,
                    patience: settings.patience,
                    higher_is_better: false,
                },
                lr,
            )
        }
        None => (
            AdamState::new(AdamConfig::with_lr(settings.lr)),
            0,
            EarlyStopper {
                best: f64::INFINITY,
                stalls: 0,
                patience: settings.patience,
                higher_is_better: false,
            },
            settings.lr,
        ),
    };
    let mut best_model = model.clone();
    let mut grad_norms = Vec::new();
    let mut stopped_early = false;
    let mut global_step = 0usize;
    let mut final_epoch = start_epoch;
    let total_utts = train_ds.num_speakers() * train_ds.utterances_per_speaker();
    let steps_per_epoch = (total_utts / (n_batch * p_batch)).max(1);

    for epoch in start_epoch..settings.epochs {
        final_epoch = epoch + 1;
        let epoch_start = Instant::now();
        let mut epoch_losses = Vec::new();
        let mut epoch_norms = Vec::new();
        let mut rng = Rng::derive(settings.seed, 0x5e2e ^ epoch as u64);
        for _ in 0..steps_per_epoch {
            let speakers = rng.sample_indices(train_ds.num_speakers(), n_batch);
            let utterances: Vec<Vec<usize>> = speakers
                .iter()
                .map(|&j| rng.sample_indices(train_ds.speakers[j].len(), p_batch))
                .collect();
            let (loss, grads) = verifier_step(&model, train_ds, &speakers, &utterances)?;
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient norm at epoch {epoch} step {global_step}"
                )));
            }
            adam.config.lr = lr;
            adam.step(&mut model, &grads)?;
            if let Some(g) = &mut model.ge2e {
                g.clamp_scale();
            }
            epoch_losses.push(loss);
            epoch_norms.push(norm);
            grad_norms.push(norm);
            global_step += 1;
        }
        let train_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        let p50 = percentile(&epoch_norms, 50.0);
        let p95 = percentile(&epoch_norms, 95.0);
        metrics.push(MetricsRow {
            epoch,
            step: global_step,
            split: "train",
            loss: train_loss,
            accuracy_or_eer: f64::NAN,
            grad_norm_p50: p50,
            grad_norm_p95: p95,
            lr,
            wall_ms: epoch_start.elapsed().as_secs_f64() * 1e3,
        });
        let (val_eer, val_loss) = validation_eer(&model, val_ds)?;
        metrics.push(MetricsRow {
            epoch,
            step: global_step,
            split: "val",
            loss: val_loss,
            accuracy_or_eer: val_eer,
            grad_norm_p50: p50,
            grad_norm_p95: p95,
            lr,
            wall_ms: epoch_start.elapsed().as_secs_f64() * 1e3,
        });
        if stopper.improved(val_eer) {
            best_model = model.clone();
        } else {
            if stopper.should_decay() {
                lr *= 0.3;
            }
            if stopper.should_stop() {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainRun {
        best_model,
        final_model: model,
        adam,
        progress: TrainerProgress {
            epoch_next: final_epoch as u32,
            best_metric: stopper.best,
            stalls: stopper.stalls as u32,
            lr,
        },
        metrics,
        grad_norms,
        best_val_metric: stopper.best,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_speakers, synth_toy};

    fn toy_spec(parameterization: Parameterization, seed: u64) -> ModelSpec {
        ModelSpec {
            kind: CellKind::Lstm,
            parameterization,
            hidden: 8,
            input: 4,
            cores: 2,
            rank0: 2,
            rank: 2,
            head: HeadKind::Classifier,
            head_out: 2,
            seed,
        }
    }

    fn toy_settings() -> TrainSettings {
        TrainSettings {
            epochs: 12,
            batch_size: 16,
            lr: 1e-2,
            patience: 6,
            seed: 3,
            workers: 1,
            ..TrainSettings::default()
        }
    }

    #[test]
    fn toy_task_reaches_95_percent_train_accuracy() {
        let train = synth_toy(120, 8, 4, 1);
        let val = synth_toy(40, 8, 4, 2);
        let model = Model::build(toy_spec(Parameterization::Dense, 5)).unwrap();
        let run = train_classifier(model, &toy_settings(), &train, &val, None).unwrap();
        let (_, train_acc) = evaluate_classifier(&run.best_model, &train, 1).unwrap();
        assert!(train_acc >= 0.95, "train accuracy {train_acc}");
    }

    #[test]
    fn fixed_seed_reproduces_identical_metric_history() {
        let train = synth_toy(60, 6, 4, 7);
        let val = synth_toy(20, 6, 4, 8);
        let mut settings = toy_settings();
        settings.epochs = 4;
        let run_once = || {
            let model = Model::build(toy_spec(Parameterization::TtFused, 9)).unwrap();
            train_classifier(model, &settings, &train, &val, None)
                .unwrap()
                .metrics
                .to_csv_deterministic()
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn zero_lr_freezes_parameters_at_chance() {
        use crate::data::{synth_digits, to_sequences, Split};
        // ten classes so a random frozen model sits near chance
        let images = synth_digits(80, 8, 10);
        let train = to_sequences(&images, Split::Train, true);
        let val = to_sequences(&synth_digits(40, 8, 11), Split::Val, true);
        let mut settings = toy_settings();
        settings.lr = 0.0;
        settings.epochs = 3;
        let spec = ModelSpec {
            head_out: 10,
            input: 8,
            ..toy_spec(Parameterization::Dense, 12)
        };
        let model = Model::build(spec).unwrap();
        let before = model.param_tensors();
        let (_, untrained_acc) = evaluate_classifier(&model, &val, 1).unwrap();
        let run = train_classifier(model, &settings, &train, &val, None).unwrap();
        let after = run.final_model.param_tensors();
        for (name, t) in &before {
            assert_eq!(t, &after[name], "{name} moved with lr=0");
        }
        // every epoch's validation accuracy equals the untrained model's,
        // and that sits at chance for 10 classes
        for row in run.metrics.rows().iter().filter(|r| r.split == "val") {
            assert_eq!(row.accuracy_or_eer, untrained_acc);
        }
        assert!(untrained_acc <= 0.3, "accuracy {untrained_acc}");
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let train = synth_toy(50, 6, 4, 13);
        let val = synth_toy(20, 6, 4, 14);
        let mut settings = toy_settings();
        settings.epochs = 3;
        let run_with = |workers: usize| {
            let model = Model::build(toy_spec(Parameterization::Dense, 15)).unwrap();
            let mut s = settings.clone();
            s.workers = workers;
            train_classifier(model, &s, &train, &val, None)
                .unwrap()
                .metrics
                .to_csv_deterministic()
        };
        let single = run_with(1);
        assert_eq!(single, run_with(3));
        assert_eq!(single, run_with(8));
    }

    #[test]
    fn resumed_training_matches_uninterrupted_run() {
        let train = synth_toy(60, 6, 4, 20);
        let val = synth_toy(20, 6, 4, 21);
        let mut settings = toy_settings();
        settings.epochs = 6;
        let full = {
            let model = Model::build(toy_spec(Parameterization::TtFused, 22)).unwrap();
            train_classifier(model, &settings, &train, &val, None).unwrap()
        };
        // first half
        let mut half_settings = settings.clone();
        half_settings.epochs = 3;
        let first = {
            let model = Model::build(toy_spec(Parameterization::TtFused, 22)).unwrap();
            train_classifier(model, &half_settings, &train, &val, None).unwrap()
        };
        // round-trip through checkpoint bytes, then continue
        let ckpt = first
            .final_model
            .to_checkpoint(first.progress.clone(), Some(&first.adam), 0);
        let bytes = ckpt.to_bytes();
        let restored = Checkpoint::from_bytes(&bytes).unwrap();
        let (model2, adam2) =
            Model::from_checkpoint(toy_spec(Parameterization::TtFused, 22), &restored).unwrap();
        let second = train_classifier(
            model2,
            &settings,
            &train,
            &val,
            Some((adam2.unwrap(), restored.progress.clone())),
        )
        .unwrap();
        // continuation reproduces the uninterrupted run's later epochs
        let full_rows = full.metrics.rows();
        let second_rows = second.metrics.rows();
        let offset = full_rows.len() - second_rows.len();
        for (a, b) in full_rows[offset..].iter().zip(second_rows) {
            assert_eq!(a.epoch, b.epoch);
            assert!((a.loss - b.loss).abs() <= 1e-10, "{} vs {}", a.loss, b.loss);
            assert!(
                (a.accuracy_or_eer - b.accuracy_or_eer).abs() <= 1e-10,
                "{} vs {}",
                a.accuracy_or_eer,
                b.accuracy_or_eer
            );
        }
        assert!((full.best_val_metric - second.best_val_metric).abs() <= 1e-10);
    }

    #[test]
    fn checkpoint_with_wrong_gate_order_is_rejected() {
        let model = Model::build(toy_spec(Parameterization::Dense, 30)).unwrap();
        let mut ckpt = model.to_checkpoint(TrainerProgress::default(), None, 0);
        ckpt.gate_order = "gru:h,u,r".into();
        let err = Model::from_checkpoint(toy_spec(Parameterization::Dense, 30), &ckpt);
        assert!(matches!(err, Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_with_wrong_config_is_rejected() {
        let model = Model::build(toy_spec(Parameterization::Dense, 31)).unwrap();
        let ckpt = model.to_checkpoint(TrainerProgress::default(), None, 0);
        let err = Model::from_checkpoint(toy_spec(Parameterization::Dense, 32), &ckpt);
        assert!(matches!(err, Err(Error::Checkpoint(_))));
    }

    #[test]
    fn model_checkpoint_round_trip_is_exact() {
        for pzn in [
            Parameterization::Dense,
            Parameterization::TtSeparate,
            Parameterization::TtFused,
        ] {
            let model = Model::build(toy_spec(pzn, 33)).unwrap();
            let ckpt = model.to_checkpoint(TrainerProgress::default(), None, 7);
            let (back, _) = Model::from_checkpoint(toy_spec(pzn, 33), &ckpt).unwrap();
            assert_eq!(back, model, "{pzn:?}");
            // save -> load -> save byte identity
            let bytes = ckpt.to_bytes();
            assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        }
    }

    #[test]
    fn verifier_improves_on_separated_speakers() {
        let data = synth_speakers(6, 6, 8, 8, 0.7, 0.15, 40).unwrap();
        let (train, val) = data.split_utterances(4);
        let spec = ModelSpec {
            kind: CellKind::Lstm,
            parameterization: Parameterization::TtFused,
            hidden: 8,
            input: 8,
            cores: 2,
            rank0: 2,
            rank: 2,
            head: HeadKind::Embedding,
            head_out: 8,
            seed: 41,
        };
        let model = Model::build(spec).unwrap();
        let settings = TrainSettings {
            epochs: 8,
            lr: 5e-3,
            patience: 8,
            seed: 42,
            ge2e_speakers: 4,
            ge2e_utterances: 3,
            ..TrainSettings::default()
        };
        let run = train_verifier(model, &settings, &train, &val, None).unwrap();
        assert!(
            run.best_val_metric <= 0.25,
            "validation EER {}",
            run.best_val_metric
        );
        // training reduced the loss
        let first_loss = run.metrics.rows()[0].loss;
        let last_train = run.metrics.last_for_split("train").unwrap().loss;
        assert!(last_train < first_loss);
    }

    #[test]
    fn verifier_requires_ge2e_head() {
        let data = synth_speakers(3, 4, 6, 4, 0.5, 0.1, 50).unwrap();
        let (train, val) = data.split_utterances(2);
        let model = Model::build(toy_spec(Parameterization::Dense, 51)).unwrap();
        let err = train_verifier(model, &TrainSettings::default(), &train, &val, None);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
