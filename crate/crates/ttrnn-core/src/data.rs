//! Dataset ingestion and synthesis: IDX parsing (gzip sniffed), pixel
//! permutation, downsampling, sequence conversion, batching, and the
//! synthetic generators (digits, speakers, toy sequences).

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, Rng};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Where a dataset came from and every transform applied since; enough to
/// reproduce it bit-exactly from the raw files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub source_hash: u64,
    pub transforms: Vec<String>,
}

impl Provenance {
    pub fn fingerprint(&self) -> String {
        format!(
            "source={} hash={:016x} transforms=[{}]",
            self.source,
            self.source_hash,
            self.transforms.join(";")
        )
    }

    fn with(&self, transform: String) -> Self {
        let mut p = self.clone();
        p.transforms.push(transform);
        p
    }
}

/// Square grayscale images in [0, 1], labels in [0, classes).
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub pixels: Vec<f64>,
    pub count: usize,
    pub side: usize,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

/// Sequence dataset: inputs [examples, steps, features] flattened row-major.
#[derive(Debug, Clone)]
pub struct SequenceDataset {
    pub inputs: Vec<f64>,
    pub examples: usize,
    pub steps: usize,
    pub features: usize,
    pub labels: Vec<usize>,
    pub split: Split,
    pub provenance: Provenance,
}

impl SequenceDataset {
    pub fn example(&self, i: usize) -> &[f64] {
        let n = self.steps * self.features;
        &self.inputs[i * n..(i + 1) * n]
    }

    /// Gather the given examples into a [batch, T, M] tensor.
    pub fn gather(&self, indices: &[usize]) -> (DenseTensor, Vec<usize>) {
        let n = self.steps * self.features;
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.example(i));
            labels.push(self.labels[i]);
        }
        (
            DenseTensor::new(vec![indices.len(), self.steps, self.features], data)
                .expect("gather shape"),
            labels,
        )
    }

    /// Keep the first `fraction` of examples after a seeded shuffle; the
    /// data-limited regime sweep uses this.
    pub fn take_fraction(&self, fraction: f64, seed: u64) -> SequenceDataset {
        assert!(fraction > 0.0 && fraction <= 1.0);
        let keep = ((self.examples as f64 * fraction).round() as usize).max(1);
        let mut order: Vec<usize> = (0..self.examples).collect();
        Rng::derive(seed, 0xf7ac).shuffle(&mut order);
        order.truncate(keep);
        let n = self.steps * self.features;
        let mut inputs = Vec::with_capacity(keep * n);
        let mut labels = Vec::with_capacity(keep);
        for &i in &order {
            inputs.extend_from_slice(self.example(i));
            labels.push(self.labels[i]);
        }
        SequenceDataset {
            inputs,
            examples: keep,
            steps: self.steps,
            features: self.features,
            labels,
            split: self.split,
            provenance: self
                .provenance
                .with(format!("fraction({fraction},seed={seed})")),
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip decode of {}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_idx<'a>(bytes: &'a [u8], expect_magic: u32, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("{what}: truncated IDX header")));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != expect_magic {
        return Err(Error::Format(format!(
            "{what}: bad IDX magic {magic:#010x}, expected {expect_magic:#010x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format(format!("{what}: truncated IDX dimensions")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let payload = dims.iter().product::<usize>();
    if bytes.len() < header + payload {
        return Err(Error::Format(format!(
            "{what}: truncated IDX payload ({} bytes, need {})",
            bytes.len() - header,
            payload
        )));
    }
    Ok((dims, &bytes[header..header + payload]))
}

/// Parse an IDX image/label file pair (gzip transparently decompressed).
/// Pixels scale to [0, 1] with 255 -> 1.0.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let image_bytes = read_maybe_gzip(images_path)?;
    let label_bytes = read_maybe_gzip(labels_path)?;
    let (image_dims, image_payload) = parse_idx(&image_bytes, IDX_IMAGES_MAGIC, "images")?;
    let (label_dims, label_payload) = parse_idx(&label_bytes, IDX_LABELS_MAGIC, "labels")?;
    if image_dims.len() != 3 {
        return Err(Error::Format(format!(
            "images: expected 3 dimensions, got {image_dims:?}"
        )));
    }
    if image_dims[1] != image_dims[2] {
        return Err(Error::Format(format!(
            "images: expected square images, got {}x{}",
            image_dims[1], image_dims[2]
        )));
    }
    if label_dims.len() != 1 || label_dims[0] != image_dims[0] {
        return Err(Error::Format(format!(
            "count mismatch: {} images vs {:?} labels",
            image_dims[0], label_dims
        )));
    }
    let pixels: Vec<f64> = image_payload.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_payload.iter().map(|&b| b as usize).collect();
    let mut hash_input = image_bytes.clone();
    hash_input.extend_from_slice(&label_bytes);
    Ok(ImageDataset {
        pixels,
        count: image_dims[0],
        side: image_dims[1],
        labels,
        provenance: Provenance {
            source: format!("{}", images_path.display()),
            source_hash: fnv1a64(&hash_input),
            transforms: Vec::new(),
        },
    })
}

/// Write an IDX image/label pair from an [`ImageDataset`] (values clamped to
/// [0, 1] and quantized to bytes).
pub fn write_idx(ds: &ImageDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(16 + ds.pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.count as u32).to_be_bytes());
    img.extend_from_slice(&(ds.side as u32).to_be_bytes());
    img.extend_from_slice(&(ds.side as u32).to_be_bytes());
    img.extend(
        ds.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + ds.labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.count as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lab)?;
    Ok(())
}

/// Non-overlapping mean pooling; applied before any permutation.
pub fn downsample(ds: &ImageDataset, factor: usize) -> Result<ImageDataset> {
    if factor == 0 || !ds.side.is_multiple_of(factor) {
        return Err(Error::Config(format!(
            "downsample factor {factor} does not divide image side {}",
            ds.side
        )));
    }
    if factor == 1 {
        return Ok(ds.clone());
    }
    let new_side = ds.side / factor;
    let mut pixels = Vec::with_capacity(ds.count * new_side * new_side);
    let area = (factor * factor) as f64;
    for img in 0..ds.count {
        let base = img * ds.side * ds.side;
        for r in 0..new_side {
            for c in 0..new_side {
                let mut acc = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        acc += ds.pixels[base + (r * factor + dr) * ds.side + (c * factor + dc)];
                    }
                }
                pixels.push(acc / area);
            }
        }
    }
    Ok(ImageDataset {
        pixels,
        count: ds.count,
        side: new_side,
        labels: ds.labels.clone(),
        provenance: ds.provenance.with(format!("downsample({factor})")),
    })
}

/// One fixed seeded permutation of the flattened pixels, applied identically
/// to every example.
pub fn permute_pixels(ds: &ImageDataset, seed: u64) -> ImageDataset {
    let n = ds.side * ds.side;
    let perm = pixel_permutation(ds.side, seed);
    let mut pixels = vec![0.0; ds.pixels.len()];
    for img in 0..ds.count {
        let base = img * n;
        for (dst, &src) in perm.iter().enumerate() {
            pixels[base + dst] = ds.pixels[base + src];
        }
    }
    ImageDataset {
        pixels,
        count: ds.count,
        side: ds.side,
        labels: ds.labels.clone(),
        provenance: ds.provenance.with(format!("permute(seed={seed})")),
    }
}

/// The permutation [`permute_pixels`] applies for a given seed and size.
pub fn pixel_permutation(side: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..side * side).collect();
    Rng::derive(seed, 0x9e1c).shuffle(&mut perm);
    perm
}

/// Convert images to sequences: one pixel per step (T = side^2, M = 1) or
/// one row per step (T = side, M = side).
pub fn to_sequences(ds: &ImageDataset, split: Split, row_per_step: bool) -> SequenceDataset {
    let (steps, features) = if row_per_step {
        (ds.side, ds.side)
    } else {
        (ds.side * ds.side, 1)
    };
    SequenceDataset {
        inputs: ds.pixels.clone(),
        examples: ds.count,
        steps,
        features,
        labels: ds.labels.clone(),
        split,
        provenance: ds.provenance.with(format!(
            "sequence({})",
            if row_per_step { "row" } else { "pixel" }
        )),
    }
}

/// Split an image dataset into train/val/test by contiguous ranges.
pub fn split_images(
    ds: &ImageDataset,
    train: usize,
    val: usize,
    test: usize,
) -> Result<(ImageDataset, ImageDataset, ImageDataset)> {
    if train + val + test > ds.count {
        return Err(Error::Config(format!(
            "split {}+{}+{} exceeds {} examples",
            train, val, test, ds.count
        )));
    }
    let take = |start: usize, len: usize, tag: &str| ImageDataset {
        pixels: ds.pixels[start * ds.side * ds.side..(start + len) * ds.side * ds.side].to_vec(),
        count: len,
        side: ds.side,
        labels: ds.labels[start..start + len].to_vec(),
        provenance: ds.provenance.with(format!("split({tag},{start},{len})")),
    };
    Ok((
        take(0, train, "train"),
        take(train, val, "val"),
        take(train + val, test, "test"),
    ))
}

/// Seeded epoch batching; the final short batch is kept.
pub fn batches(ds: &SequenceDataset, batch_size: usize, shuffle_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..ds.examples).collect();
    Rng::derive(shuffle_seed, 0xba7c).shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

// --- synthetic generators -------------------------------------------------

/// Per-speaker lists of utterance feature sequences.
#[derive(Debug, Clone)]
pub struct SpeakerDataset {
    /// `speakers[j][i]` is utterance i of speaker j, flattened `[steps, features]`.
    pub speakers: Vec<Vec<Vec<f64>>>,
    pub steps: usize,
    pub features: usize,
    pub provenance: Provenance,
    /// Unit voice directions, exposed for construction-based tests.
    pub directions: Vec<Vec<f64>>,
}

impl SpeakerDataset {
    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn utterances_per_speaker(&self) -> usize {
        self.speakers.first().map(Vec::len).unwrap_or(0)
    }

    /// Stack the chosen (speaker, utterance) pairs into [count, T, M].
    pub fn gather(&self, picks: &[(usize, usize)]) -> DenseTensor {
        let n = self.steps * self.features;
        let mut data = Vec::with_capacity(picks.len() * n);
        for &(j, i) in picks {
            data.extend_from_slice(&self.speakers[j][i]);
        }
        DenseTensor::new(vec![picks.len(), self.steps, self.features], data)
            .expect("gather shape")
    }

    /// Split each speaker's utterances into two datasets.
    pub fn split_utterances(&self, first: usize) -> (SpeakerDataset, SpeakerDataset) {
        let a: Vec<Vec<Vec<f64>>> = self
            .speakers
            .iter()
            .map(|utts| utts[..first.min(utts.len())].to_vec())
            .collect();
        let b: Vec<Vec<Vec<f64>>> = self
            .speakers
            .iter()
            .map(|utts| utts[first.min(utts.len())..].to_vec())
            .collect();
        (
            SpeakerDataset {
                speakers: a,
                steps: self.steps,
                features: self.features,
                provenance: self.provenance.with(format!("utts(..{first})")),
                directions: self.directions.clone(),
            },
            SpeakerDataset {
                speakers: b,
                steps: self.steps,
                features: self.features,
                provenance: self.provenance.with(format!("utts({first}..)")),
                directions: self.directions.clone(),
            },
        )
    }

    /// Keep the first fraction of each speaker's utterances (at least one).
    pub fn take_fraction(&self, fraction: f64) -> SpeakerDataset {
        assert!(fraction > 0.0 && fraction <= 1.0);
        let speakers: Vec<Vec<Vec<f64>>> = self
            .speakers
            .iter()
            .map(|utts| {
                let keep = ((utts.len() as f64 * fraction).round() as usize).clamp(1, utts.len());
                utts[..keep].to_vec()
            })
            .collect();
        SpeakerDataset {
            speakers,
            steps: self.steps,
            features: self.features,
            provenance: self.provenance.with(format!("fraction({fraction})")),
            directions: self.directions.clone(),
        }
    }
}

/// Synthetic speaker-utterance generator: each speaker gets a random unit
/// voice direction with enforced pairwise separation; an utterance is that
/// direction under a slowly varying positive envelope plus Gaussian noise.
pub fn synth_speakers(
    n_speakers: usize,
    utterances: usize,
    steps: usize,
    features: usize,
    sep: f64,
    noise: f64,
    seed: u64,
) -> Result<SpeakerDataset> {
    synth_speakers_within(n_speakers, utterances, steps, features, sep, noise, 0.0, seed)
}

/// [`synth_speakers`] with utterance-level within-speaker variability: each
/// utterance perturbs its speaker's direction by `within` before the
/// envelope and frame noise apply. Nonzero `within` makes speaker identity a
/// region rather than a line, which is what lets a high-capacity encoder
/// overfit a small training sample.
#[allow(clippy::too_many_arguments)]
pub fn synth_speakers_within(
    n_speakers: usize,
    utterances: usize,
    steps: usize,
    features: usize,
    sep: f64,
    noise: f64,
    within: f64,
    seed: u64,
) -> Result<SpeakerDataset> {
    if n_speakers < 2 || utterances < 2 {
        return Err(Error::Config(
            "synth_speakers needs >= 2 speakers and >= 2 utterances".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(n_speakers);
    let max_tries = 20_000usize;
    let mut tries = 0;
    while directions.len() < n_speakers {
        tries += 1;
        if tries > max_tries {
            return Err(Error::InfeasibleSeparation {
                sep,
                speakers: n_speakers,
                dim: features,
            });
        }
        let mut v: Vec<f64> = (0..features).map(|_| rng.next_normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        for x in &mut v {
            *x /= norm;
        }
        let ok = directions.iter().all(|u| {
            let cos: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            cos.abs() <= 1.0 - sep
        });
        if ok {
            directions.push(v);
        }
    }
    let mut speakers = Vec::with_capacity(n_speakers);
    for v in &directions {
        let mut utts = Vec::with_capacity(utterances);
        for _ in 0..utterances {
            let direction = if within > 0.0 {
                let mut jittered: Vec<f64> =
                    v.iter().map(|&vd| vd + within * rng.next_normal()).collect();
                let norm = jittered.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in &mut jittered {
                    *x /= norm;
                }
                jittered
            } else {
                v.clone()
            };
            let amp = 0.75 + 0.5 * rng.next_f64();
            let phase = rng.next_f64();
            let mut data = Vec::with_capacity(steps * features);
            for t in 0..steps {
                let env = amp
                    * (1.0
                        + 0.3
                            * (2.0 * std::f64::consts::PI * (t as f64 / steps as f64 + phase))
                                .sin());
                for &vd in &direction {
                    data.push(env * vd + noise * rng.next_normal());
                }
            }
            utts.push(data);
        }
        speakers.push(utts);
    }
    Ok(SpeakerDataset {
        speakers,
        steps,
        features,
        provenance: Provenance {
            source: format!(
                "synth-speakers(n={n_speakers},p={utterances},t={steps},m={features},sep={sep},noise={noise})"
            ),
            source_hash: seed,
            transforms: vec![format!("seed={seed}")],
        },
        directions,
    })
}

/// Two-class toy sequences, linearly separable by the mean projection onto a
/// fixed direction.
pub fn synth_toy(examples: usize, steps: usize, features: usize, seed: u64) -> SequenceDataset {
    let mut rng = Rng::new(seed);
    let mut direction: Vec<f64> = (0..features).map(|_| rng.next_normal()).collect();
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut direction {
        *x /= norm;
    }
    let mut inputs = Vec::with_capacity(examples * steps * features);
    let mut labels = Vec::with_capacity(examples);
    for _ in 0..examples {
        let label = rng.next_below(2);
        let sign = if label == 1 { 1.0 } else { -1.0 };
        for _ in 0..steps {
            let strength = 0.5 + 0.5 * rng.next_f64();
            for &d in &direction {
                inputs.push(sign * strength * d + 0.3 * rng.next_normal());
            }
        }
        labels.push(label);
    }
    SequenceDataset {
        inputs,
        examples,
        steps,
        features,
        labels,
        split: Split::Train,
        provenance: Provenance {
            source: format!("synth-toy(n={examples},t={steps},m={features})"),
            source_hash: seed,
            transforms: vec![format!("seed={seed}")],
        },
    }
}

// --- synthetic handwritten digits ----------------------------------------

/// Polyline skeletons for the ten digits on a unit box (x right, y down).
fn digit_strokes(digit: usize) -> Vec<Vec<(f64, f64)>> {
    fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
        (0..=16)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / 16.0;
                (cx + rx * a.sin(), cy - ry * a.cos())
            })
            .collect()
    }
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.26, 0.36)],
        1 => vec![vec![(0.35, 0.28), (0.52, 0.12), (0.52, 0.88)]],
        2 => vec![vec![
            (0.26, 0.3),
            (0.36, 0.14),
            (0.62, 0.14),
            (0.73, 0.3),
            (0.66, 0.48),
            (0.3, 0.74),
            (0.25, 0.87),
            (0.76, 0.87),
        ]],
        3 => vec![vec![
            (0.28, 0.2),
            (0.5, 0.12),
            (0.7, 0.26),
            (0.52, 0.45),
            (0.72, 0.64),
            (0.5, 0.87),
            (0.27, 0.78),
        ]],
        4 => vec![vec![(0.62, 0.88), (0.62, 0.12), (0.24, 0.62), (0.8, 0.62)]],
        5 => vec![vec![
            (0.72, 0.14),
            (0.32, 0.14),
            (0.29, 0.45),
            (0.58, 0.42),
            (0.73, 0.6),
            (0.58, 0.85),
            (0.28, 0.8),
        ]],
        6 => vec![vec![
            (0.66, 0.13),
            (0.42, 0.3),
            (0.3, 0.55),
            (0.35, 0.78),
            (0.58, 0.87),
            (0.71, 0.68),
            (0.55, 0.52),
            (0.32, 0.6),
        ]],
        7 => vec![vec![(0.24, 0.15), (0.76, 0.15), (0.45, 0.88)]],
        8 => vec![ellipse(0.5, 0.3, 0.2, 0.18), ellipse(0.5, 0.68, 0.24, 0.2)],
        9 => vec![
            ellipse(0.52, 0.32, 0.2, 0.2),
            vec![(0.72, 0.35), (0.6, 0.88)],
        ],
        _ => unreachable!("digit out of range"),
    }
}

/// Deterministic synthetic handwritten-digit images: stroke skeletons under
/// per-example affine jitter, stroke-width blur, intensity variation, and
/// additive noise. A stand-in for real digit data that exercises the exact
/// same IDX pipeline.
pub fn synth_digits(count: usize, side: usize, seed: u64) -> ImageDataset {
    let mut rng = Rng::new(seed);
    let mut pixels = vec![0.0f64; count * side * side];
    let mut labels = Vec::with_capacity(count);
    for img in 0..count {
        let digit = rng.next_below(10);
        labels.push(digit);
        let angle = (rng.next_f64() - 0.5) * 0.3;
        let scale = 0.85 + 0.3 * rng.next_f64();
        let dx = (rng.next_f64() - 0.5) * 0.15;
        let dy = (rng.next_f64() - 0.5) * 0.15;
        let shear = (rng.next_f64() - 0.5) * 0.2;
        let intensity = 0.7 + 0.3 * rng.next_f64();
        let radius = 0.75 + 0.5 * rng.next_f64();
        let (sin_a, cos_a) = angle.sin_cos();
        let canvas = &mut pixels[img * side * side..(img + 1) * side * side];
        for stroke in digit_strokes(digit) {
            for seg in stroke.windows(2) {
                let (x0, y0) = seg[0];
                let (x1, y1) = seg[1];
                let seg_len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
                let samples = (seg_len * side as f64 * 2.0).ceil() as usize + 1;
                for s in 0..=samples {
                    let t = s as f64 / samples as f64;
                    let ux = x0 + t * (x1 - x0) - 0.5;
                    let uy = y0 + t * (y1 - y0) - 0.5;
                    // affine: rotate, shear, scale, translate
                    let rx = (cos_a * ux - sin_a * uy + shear * uy) * scale + 0.5 + dx;
                    let ry = (sin_a * ux + cos_a * uy) * scale + 0.5 + dy;
                    paint(
                        canvas,
                        side,
                        rx * side as f64,
                        ry * side as f64,
                        radius,
                        intensity,
                    );
                }
            }
        }
        for v in canvas.iter_mut() {
            *v = (*v + 0.08 * rng.next_normal()).clamp(0.0, 1.0);
        }
    }
    ImageDataset {
        pixels,
        count,
        side,
        labels,
        provenance: Provenance {
            source: format!("synth-digits(n={count},side={side})"),
            source_hash: seed,
            transforms: vec![format!("seed={seed}")],
        },
    }
}

fn paint(canvas: &mut [f64], side: usize, cx: f64, cy: f64, radius: f64, intensity: f64) {
    let r_cells = radius.ceil() as isize + 1;
    let (icx, icy) = (cx.round() as isize, cy.round() as isize);
    for dy in -r_cells..=r_cells {
        for dx in -r_cells..=r_cells {
            let (px, py) = (icx + dx, icy + dy);
            if px < 0 || py < 0 || px >= side as isize || py >= side as isize {
                continue;
            }
            let dist2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
            let value = intensity * (-dist2 / (radius * radius)).exp();
            let slot = &mut canvas[py as usize * side + px as usize];
            *slot = slot.max(value);
        }
    }
}
