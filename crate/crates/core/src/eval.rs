//! Linear probing, greedy captioning, reconstruction dumps and training-set
//! diagnostics.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::{write_image, Example};
use crate::error::{MugError, Result};
use crate::model::{Latent, Model};
use crate::objectives::loss_reconstruction;
use crate::params::{Graph, ParamStore};
use crate::rng::{self, stream};
use crate::tensor::{Real, Tensor};
use crate::text::{shift_for_teacher_forcing, OovPolicy, Vocab, BOS, EOS};
use crate::vision::{mask_seed, masked_image, patchify, sample_mask, unpatchify, MaskSpec, PatchSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    ClassToken,
    MeanPooled,
    RawPixels,
}

impl FromStr for FeatureSource {
    type Err = MugError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Self::ClassToken),
            "mean" => Ok(Self::MeanPooled),
            "pixels" => Ok(Self::RawPixels),
            _ => Err(MugError::Config(format!("unknown feature source {s} (cls, mean, pixels)"))),
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ClassToken => "cls",
            Self::MeanPooled => "mean",
            Self::RawPixels => "pixels",
        })
    }
}

/// Frozen features `[M, d]` with every patch visible.
pub fn extract_features<T: Real>(model: &Model<T>, examples: &[Example<T>], source: FeatureSource) -> Result<Tensor<f64>> {
    if examples.is_empty() {
        return Err(MugError::Invalid("no examples to extract features from".into()));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = 0;
    for ex in examples {
        let feat: Vec<f64> = match source {
            FeatureSource::RawPixels => ex.patches.data().iter().map(|v| v.as_f64()).collect(),
            _ => {
                let mut g = model.graph();
                let mask = MaskSpec::all_visible(ex.patches.rows());
                let latent = model.encode_masked(&mut g, &ex.patches, &mask)?;
                let h = g.value(latent.var);
                if source == FeatureSource::ClassToken {
                    h.row(0).iter().map(|v| v.as_f64()).collect()
                } else {
                    let d = h.cols();
                    let mut acc = vec![0.0; d];
                    for r in 1..h.rows() {
                        for (a, v) in acc.iter_mut().zip(h.row(r)) {
                            *a += v.as_f64();
                        }
                    }
                    acc.iter().map(|a| a / (h.rows() - 1) as f64).collect()
                }
            }
        };
        dim = feat.len();
        rows.extend(feat);
    }
    Tensor::new(vec![examples.len(), dim], rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub classes: usize,
    pub source: FeatureSource,
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { iterations: 500, lr: 0.5 }
    }
}

/// Seeded 50/50 split; the first half (rounded down) trains.
pub fn probe_split(m: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut rng::rng_for(&[stream::SPLIT, seed]));
    let test = idx.split_off(m / 2);
    (idx, test)
}

/// Softmax regression on standardized features by full-batch gradient
/// descent, evaluated on a held-out half.
pub fn linear_probe(
    features: &Tensor<f64>,
    labels: &[usize],
    split_seed: u64,
    source: FeatureSource,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    let (train, test) = probe_split(labels.len(), split_seed);
    linear_probe_split(features, labels, &train, &test, source, opts)
}

/// [`linear_probe`] with an explicit train/test partition.
pub fn linear_probe_split(
    features: &Tensor<f64>,
    labels: &[usize],
    train: &[usize],
    test: &[usize],
    source: FeatureSource,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    let (m, d) = features.dims2();
    if labels.len() != m {
        return Err(MugError::Shape(format!("{m} feature rows but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |&c| c + 1);
    let distinct = (0..classes).filter(|c| labels.contains(c)).count();
    if distinct < 2 {
        return Err(MugError::Invalid("linear probe needs at least two classes".into()));
    }
    if m < 2 * classes || train.is_empty() || test.is_empty() {
        return Err(MugError::Invalid(format!("{m} samples are too few for {classes} classes")));
    }
    if train.iter().any(|i| test.contains(i)) {
        return Err(MugError::Invalid("train and test sets overlap".into()));
    }

    let mut mean = vec![0.0; d];
    for &i in train {
        for (a, v) in mean.iter_mut().zip(features.row(i)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= train.len() as f64);
    let mut std = vec![0.0; d];
    for &i in train {
        for ((s, v), mu) in std.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / train.len() as f64).sqrt() + 1e-6);
    let standardize = |rows: &[usize]| {
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            for ((v, mu), s) in features.row(i).iter().zip(&mean).zip(&std) {
                out.push((v - mu) / s);
            }
        }
        Tensor::new(vec![rows.len(), d], out).expect("nonempty split")
    };
    let (x_train, x_test) = (standardize(train), standardize(test));
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();

    let mut head = ParamStore::new();
    let w = head.insert("probe.weight", Tensor::zeros(&[d, classes]))?;
    let b = head.insert("probe.bias", Tensor::zeros(&[classes]))?;
    let all = vec![true; train.len()];
    for _ in 0..opts.iterations {
        let grads = {
            let mut g = Graph::new(&head);
            let x = g.tape.constant(x_train.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let z = g.tape.matmul(x, wv)?;
            let z = g.tape.add_row_bias(z, bv)?;
            let loss = g.tape.cross_entropy(z, &y_train, &all)?;
            g.backward(loss)?
        };
        for id in [w, b] {
            let grad = grads.get(id).expect("probe parameters reach the loss");
            for (p, gv) in head.get_mut(id).data_mut().iter_mut().zip(grad.data()) {
                *p -= opts.lr * gv;
            }
        }
    }
    let accuracy = |x: &Tensor<f64>, rows: &[usize]| -> Result<f64> {
        let z = crate::tensor::matmul(x, head.get(w))?;
        let bias = head.get(b).data();
        let correct = rows
            .iter()
            .enumerate()
            .filter(|&(r, &i)| argmax(z.row(r).iter().zip(bias).map(|(a, c)| a + c)) == labels[i])
            .count();
        Ok(correct as f64 / rows.len() as f64)
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(&x_train, train)?,
        test_accuracy: accuracy(&x_test, test)?,
        classes,
        source,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match &best {
            Some((_, b)) if !(v > *b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Next-token logits for a prefix of token ids.
pub trait NextTokenScorer {
    fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Scores prefixes with the text decoder against a fixed image latent.
pub struct ModelScorer<'m, T: Real> {
    model: &'m Model<T>,
    latent: Tensor<T>,
    visible: usize,
}

impl<'m, T: Real> ModelScorer<'m, T> {
    pub fn new(model: &'m Model<T>, patches: &Tensor<T>, mask: &MaskSpec) -> Result<Self> {
        let mut g = model.graph();
        let latent = model.encode_masked(&mut g, patches, mask)?;
        Ok(Self {
            model,
            latent: g.value(latent.var).clone(),
            visible: latent.visible,
        })
    }
}

impl<T: Real> NextTokenScorer for ModelScorer<'_, T> {
    fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = self.model.graph();
        let var = g.tape.constant(self.latent.clone());
        let latent = Latent {
            var,
            visible: self.visible,
        };
        let logits = self.model.decode_text(&mut g, latent, prefix)?;
        let z = g.value(logits);
        Ok(z.row(z.rows() - 1).iter().map(|v| v.as_f64()).collect())
    }
}

/// Starts from `prefix` and appends the argmax token until EOS or until the
/// sequence holds `max_len` tokens. Returns the full sequence.
pub fn greedy_decode(scorer: &mut impl NextTokenScorer, prefix: &[usize], max_len: usize) -> Result<Vec<usize>> {
    if prefix.is_empty() {
        return Err(MugError::Invalid("decoding needs a nonempty prefix".into()));
    }
    let mut seq = prefix.to_vec();
    while seq.len() < max_len {
        let next = argmax(scorer.next_logits(&seq)?);
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(seq)
}

/// Mask for display/evaluation: ratio 0 keeps every patch.
pub fn eval_mask(n_patches: usize, mask_ratio: f64, seed: u64) -> Result<MaskSpec> {
    if mask_ratio == 0.0 {
        Ok(MaskSpec::all_visible(n_patches))
    } else {
        sample_mask(n_patches, mask_ratio, seed)
    }
}

/// Greedy caption of `patches` under a seeded mask, decoded from BOS plus
/// an optional word prompt.
pub fn greedy_caption<T: Real>(
    model: &Model<T>,
    vocab: &Vocab,
    patches: &Tensor<T>,
    mask_ratio: f64,
    seed: u64,
    max_len: usize,
    prompt: Option<&str>,
) -> Result<String> {
    if max_len > model.config.max_caption_len || max_len < 2 {
        return Err(MugError::Invalid(format!(
            "max_len {max_len} outside 2..={}",
            model.config.max_caption_len
        )));
    }
    let mask = eval_mask(patches.rows(), mask_ratio, seed)?;
    let mut prefix = vec![BOS];
    if let Some(p) = prompt {
        let enc = crate::text::encode_caption(p, vocab, model.config.max_caption_len, OovPolicy::Reject)?;
        prefix.extend_from_slice(enc.words());
    }
    let mut scorer = ModelScorer::new(model, patches, &mask)?;
    let seq = greedy_decode(&mut scorer, &prefix, max_len)?;
    Ok(vocab.decode(&seq))
}

/// Fraction of supervised next-token predictions (clean captions, seeded
/// masks) whose argmax equals the label.
pub fn caption_token_accuracy<T: Real>(model: &Model<T>, examples: &[Example<T>], seed: u64) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for ex in examples {
        let mask = sample_mask(ex.patches.rows(), model.config.mask_ratio, mask_seed(seed, ex.key, 0))?;
        let tf = shift_for_teacher_forcing(ex.tokens.trimmed())?;
        let mut g = model.graph();
        let latent = model.encode_masked(&mut g, &ex.patches, &mask)?;
        let logits = model.decode_text(&mut g, latent, &tf.input)?;
        let z = g.value(logits);
        for (r, (&label, &sup)) in tf.labels.iter().zip(&tf.loss_mask).enumerate() {
            if sup {
                total += 1;
                correct += usize::from(argmax(z.row(r).iter().copied()) == label);
            }
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Mean over examples of the masked-region reconstruction error against
/// each example's target.
pub fn masked_pixel_mse<T: Real>(model: &Model<T>, examples: &[Example<T>], seed: u64) -> Result<f64> {
    let mut sum = 0.0;
    for ex in examples {
        let mask = sample_mask(ex.patches.rows(), model.config.mask_ratio, mask_seed(seed, ex.key, 0))?;
        let mut g = model.graph();
        let latent = model.encode_masked(&mut g, &ex.patches, &mask)?;
        let pred = model.decode_image(&mut g, latent, &mask)?;
        sum += loss_reconstruction(g.value(pred), &ex.target, &mask)?.as_f64();
    }
    Ok(sum / examples.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub mask: MaskSpec,
    /// Input with masked patches zeroed.
    pub masked: Tensor<f32>,
    /// Visible patches from the input, masked patches from the prediction,
    /// clamped to `[0, 1]`.
    pub composite: Tensor<f32>,
    pub truth: Tensor<f32>,
    /// Masked-region MSE of the raw prediction; `None` without masked patches.
    pub masked_mse: Option<f64>,
}

pub fn reconstruct(model: &Model<f32>, image: &Tensor<f32>, mask_ratio: f64, seed: u64) -> Result<Reconstruction> {
    let c = &model.config;
    let [ch, h, w] = *image.shape() else {
        return Err(MugError::Shape(format!("expected [C, H, W], got {:?}", image.shape())));
    };
    if [ch, h, w] != [c.channels, c.height, c.width] {
        return Err(MugError::Shape(format!(
            "image {:?} does not match model input [{}, {}, {}]",
            image.shape(),
            c.channels,
            c.height,
            c.width
        )));
    }
    let seq = patchify(image, c.patch_size)?;
    let mask = eval_mask(seq.len(), mask_ratio, seed)?;
    let mut g = model.graph();
    let latent = model.encode_masked(&mut g, &seq.patches, &mask)?;
    let pred = model.decode_image(&mut g, latent, &mask)?;
    let pred = g.value(pred).clone();
    let masked_mse = if mask.omega > 0 {
        Some(loss_reconstruction(&pred, &seq.patches, &mask)? as f64)
    } else {
        None
    };
    let mut comp = seq.patches.clone();
    for (i, &keep) in mask.keep.iter().enumerate() {
        if !keep {
            let p = comp.cols();
            for j in 0..p {
                comp.data_mut()[i * p + j] = pred.get2(i, j).clamp(0.0, 1.0);
            }
        }
    }
    let composite = unpatchify(
        &PatchSequence {
            patches: comp,
            patch_size: c.patch_size,
        },
        ch,
        h,
        w,
    )?;
    Ok(Reconstruction {
        masked: masked_image(image, c.patch_size, &mask)?,
        composite,
        truth: image.clone(),
        mask,
        masked_mse,
    })
}

/// Writes `masked.mugi`, `reconstruction.mugi` and `truth.mugi` into `out`.
pub fn reconstruct_dump(
    model: &Model<f32>,
    image: &Tensor<f32>,
    mask_ratio: f64,
    seed: u64,
    out: &Path,
) -> Result<(Reconstruction, [PathBuf; 3])> {
    let r = reconstruct(model, image, mask_ratio, seed)?;
    std::fs::create_dir_all(out).map_err(|e| MugError::io(out, e))?;
    let paths = [out.join("masked.mugi"), out.join("reconstruction.mugi"), out.join("truth.mugi")];
    write_image(&paths[0], &r.masked)?;
    write_image(&paths[1], &r.composite)?;
    write_image(&paths[2], &r.truth)?;
    Ok((r, paths))
}
