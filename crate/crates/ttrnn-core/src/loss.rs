//! Task losses and the equal-error-rate metric.
//!
//! The generalized end-to-end (GE2E) verification loss scores every utterance
//! embedding against every speaker centroid with a scaled cosine similarity
//! S = w * cos + b, then charges -S(own speaker) + logsumexp(all speakers),
//! summed over utterances. Centroids include all of a speaker's utterances
//! (no leave-one-out variant).

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Mean over the batch of -log softmax(logits) at the labels, stabilized by
/// max subtraction.
pub fn cross_entropy_logits(logits: &DenseTensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let lv = tape.leaf(logits.clone());
    let loss = tape.softmax_cross_entropy(lv, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// Trainable similarity scaling: scale initialized to 10, offset to -5.
/// The scale is kept positive (clamped at 1e-6) so similarity ordering is
/// preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Ge2eHead {
    pub scale: DenseTensor,
    pub offset: DenseTensor,
}

pub const GE2E_SCALE_FLOOR: f64 = 1e-6;

impl Ge2eHead {
    pub fn new() -> Self {
        Ge2eHead {
            scale: DenseTensor::scalar(10.0),
            offset: DenseTensor::scalar(-5.0),
        }
    }

    /// Re-impose the positivity constraint after an optimizer update.
    pub fn clamp_scale(&mut self) {
        let v = self.scale.data()[0];
        if v < GE2E_SCALE_FLOOR {
            self.scale.data_mut()[0] = GE2E_SCALE_FLOOR;
        }
    }
}

impl Default for Ge2eHead {
    fn default() -> Self {
        Self::new()
    }
}

/// N speakers x P utterances of embeddings, row (j, i) at j * utterances + i.
#[derive(Debug, Clone)]
pub struct VerificationBatch {
    pub speakers: usize,
    pub utterances: usize,
    pub embeddings: DenseTensor,
}

impl VerificationBatch {
    pub fn new(speakers: usize, utterances: usize, embeddings: DenseTensor) -> Result<Self> {
        if speakers < 2 {
            return Err(Error::Config(format!(
                "GE2E needs at least 2 speakers, got {speakers}"
            )));
        }
        if utterances < 1 {
            return Err(Error::Config("GE2E needs at least 1 utterance".into()));
        }
        if embeddings.rank() != 2 || embeddings.shape()[0] != speakers * utterances {
            return Err(Error::ShapeMismatch(format!(
                "embeddings shape {:?} != [{} * {}, emb]",
                embeddings.shape(),
                speakers,
                utterances
            )));
        }
        Ok(VerificationBatch {
            speakers,
            utterances,
            embeddings,
        })
    }
}

/// GE2E loss recorded on a tape; `emb` is [N*P, E].
pub fn ge2e_loss_on_tape(
    tape: &mut Tape,
    emb: Var,
    speakers: usize,
    utterances: usize,
    scale: Var,
    offset: Var,
) -> Result<Var> {
    if speakers < 2 {
        return Err(Error::Config(format!(
            "GE2E needs at least 2 speakers, got {speakers}"
        )));
    }
    let shape = tape.value(emb).shape().to_vec();
    if shape.len() != 2 || shape[0] != speakers * utterances {
        return Err(Error::ShapeMismatch(format!(
            "GE2E embeddings shape {:?} != [{} * {}, emb]",
            shape, speakers, utterances
        )));
    }
    let dim = shape[1];
    // centroids: mean over each speaker's utterances (all of them)
    let grouped = tape.reshape(emb, vec![speakers, utterances, dim])?;
    let mean_weights = tape.leaf(DenseTensor::filled(
        vec![utterances],
        1.0 / utterances as f64,
    ));
    let centroids = tape.contract(grouped, mean_weights, &[1], &[0])?; // [N, E]
    let emb_unit = tape.row_normalize(emb)?;
    let cent_unit = tape.row_normalize(centroids)?;
    let cosine = tape.contract(emb_unit, cent_unit, &[1], &[1])?; // [N*P, N]
    let scaled = tape.scale_by(cosine, scale)?;
    let scores = tape.shift_by(scaled, offset)?;
    // -S(ji, j) + logsumexp_k S(ji, k), summed over utterances
    let own: Vec<usize> = (0..speakers)
        .flat_map(|j| std::iter::repeat_n(j, utterances))
        .collect();
    let own_scores = tape.gather_cols(scores, own)?;
    let lse = tape.logsumexp_rows(scores)?;
    let neg_own = tape.affine(own_scores, -1.0, 0.0);
    let per_utt = tape.add(lse, neg_own)?;
    Ok(tape.sum_all(per_utt))
}

/// GE2E loss value for a batch (no gradients).
pub fn ge2e_loss(batch: &VerificationBatch, head: &Ge2eHead) -> Result<f64> {
    let mut tape = Tape::new();
    let emb = tape.leaf(batch.embeddings.clone());
    let scale = tape.leaf(head.scale.clone());
    let offset = tape.leaf(head.offset.clone());
    let loss = ge2e_loss_on_tape(
        &mut tape,
        emb,
        batch.speakers,
        batch.utterances,
        scale,
        offset,
    )?;
    Ok(tape.value(loss).data()[0])
}

/// Similarity scores split into same-speaker and different-speaker pairs,
/// the inputs to [`eer`]. Scores are S(ji, k) over every (utterance,
/// centroid) pair, matching the loss's own similarity definition.
pub fn ge2e_scores(batch: &VerificationBatch, head: &Ge2eHead) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let emb = tape.leaf(batch.embeddings.clone());
    let (n, p) = (batch.speakers, batch.utterances);
    let dim = batch.embeddings.shape()[1];
    let grouped = tape.reshape(emb, vec![n, p, dim])?;
    let mean_weights = tape.leaf(DenseTensor::filled(vec![p], 1.0 / p as f64));
    let centroids = tape.contract(grouped, mean_weights, &[1], &[0])?;
    let emb_unit = tape.row_normalize(emb)?;
    let cent_unit = tape.row_normalize(centroids)?;
    let cosine = tape.contract(emb_unit, cent_unit, &[1], &[1])?;
    let w = head.scale.data()[0];
    let b = head.offset.data()[0];
    let scores = tape.value(cosine).map(|v| w * v + b);
    let mut same = Vec::with_capacity(n * p);
    let mut diff = Vec::with_capacity(n * p * (n - 1));
    for j in 0..n {
        for i in 0..p {
            for k in 0..n {
                let s = scores.get(&[j * p + i, k]);
                if k == j {
                    same.push(s);
                } else {
                    diff.push(s);
                }
            }
        }
    }
    Ok((same, diff))
}

/// Equal error rate: the operating point where the false-positive rate
/// (different-speaker scores accepted) equals the false-negative rate
/// (same-speaker scores rejected). Thresholds sweep the union of scores with
/// linear interpolation between adjacent ROC points when no exact crossing
/// exists.
pub fn eer(same_scores: &[f64], diff_scores: &[f64]) -> f64 {
    assert!(
        !same_scores.is_empty() && !diff_scores.is_empty(),
        "eer needs non-empty score lists"
    );
    let mut same = same_scores.to_vec();
    let mut diff = diff_scores.to_vec();
    same.sort_by(|a, b| a.partial_cmp(b).unwrap());
    diff.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut thresholds: Vec<f64> = same.iter().chain(&diff).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    // one past the max so the sweep ends at FPR = 0, FNR = 1
    let last = thresholds[thresholds.len() - 1];
    thresholds.push(last + 1.0);

    // single ascending sweep: FNR(theta) = #{same < theta} / |same| grows,
    // FPR(theta) = #{diff >= theta} / |diff| shrinks
    let mut same_below = 0usize;
    let mut diff_below = 0usize;
    let mut prev: Option<(f64, f64)> = None;
    for &theta in &thresholds {
        while same_below < same.len() && same[same_below] < theta {
            same_below += 1;
        }
        while diff_below < diff.len() && diff[diff_below] < theta {
            diff_below += 1;
        }
        let fnr = same_below as f64 / same.len() as f64;
        let fpr = (diff.len() - diff_below) as f64 / diff.len() as f64;
        if fnr >= fpr {
            if (fnr - fpr).abs() < 1e-15 {
                return fpr;
            }
            // interpolate between adjacent ROC points (fpr, fnr)
            let Some((f0, n0)) = prev else {
                return (fpr + fnr) / 2.0;
            };
            let (f1, n1) = (fpr, fnr);
            let denom = (n1 - n0) - (f1 - f0);
            if denom.abs() < 1e-15 {
                return (f0 + n0) / 2.0;
            }
            let t = (f0 - n0) / denom;
            return f0 + t * (f1 - f0);
        }
        prev = Some((fpr, fnr));
    }
    let (f0, n0) = prev.unwrap_or((0.5, 0.5));
    (f0 + n0) / 2.0
}
