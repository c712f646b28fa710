//! Deterministic pre-training loop over the joint objective.

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};

use crate::data::{self, Example};
use crate::error::{MugError, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::kv;
use crate::model::{decays, Model, ModelConfig, ParamGroup};
use crate::objectives::{self, joint_on_tape, LossReport, LossWeights};
use crate::optim::{adamw_step, lr_at, AdamWConfig, OptimizerState};
use crate::params::{Graph, ParamGrads};
use crate::rng::{self, stream};
use crate::tensor::Real;
use crate::text::{augment_caption, shift_for_teacher_forcing, teacher_forcing_from, TeacherForcing};
use crate::vision::{mask_seed, sample_mask, MaskSpec};

/// Learning rate used when none is configured: the linear scaling rule
/// `1.5e-4 · batch / 256` with a floor of `1e-3` for small batches.
pub fn default_base_lr(batch_size: usize) -> f64 {
    (1.5e-4 * batch_size as f64 / 256.0).max(1e-3)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// `None` selects [`default_base_lr`].
    pub base_lr: Option<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// `None` warms up over the first 10% of steps.
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    pub seed: u64,
    pub lambda_v: f64,
    pub lambda_l: f64,
    pub gaussian_sigma: f64,
    /// Evaluate the caption entropy bound every this many steps (0 = never).
    pub eval_every: usize,
    /// Corrupt decoder inputs with caption augmentation.
    pub augment: bool,
    /// Reconstruct per-patch normalized pixels instead of raw pixels.
    pub norm_pix: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let a = AdamWConfig::default();
        Self {
            base_lr: None,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            batch_size: 16,
            warmup_steps: None,
            total_steps: 1000,
            seed: 0,
            lambda_v: w.lambda_v,
            lambda_l: w.lambda_l,
            gaussian_sigma: 1.0,
            eval_every: 0,
            augment: true,
            norm_pix: false,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_v: self.lambda_v,
            lambda_l: self.lambda_l,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        self.base_lr.unwrap_or_else(|| default_base_lr(self.batch_size))
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_steps / 10)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(MugError::Config("batch_size and total_steps must be positive".into()));
        }
        if self.warmup() > self.total_steps {
            return Err(MugError::Config("warmup_steps exceeds total_steps".into()));
        }
        if !(self.lr() > 0.0) || !(self.gaussian_sigma > 0.0) {
            return Err(MugError::Config("base_lr and gaussian_sigma must be positive".into()));
        }
        Ok(())
    }

    /// Applies one `key=value`; returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "base_lr" => self.base_lr = Some(kv::value(key, raw)?),
            "weight_decay" => self.weight_decay = kv::value(key, raw)?,
            "beta1" => self.beta1 = kv::value(key, raw)?,
            "beta2" => self.beta2 = kv::value(key, raw)?,
            "adam_eps" => self.adam_eps = kv::value(key, raw)?,
            "batch_size" => self.batch_size = kv::value(key, raw)?,
            "warmup_steps" => self.warmup_steps = Some(kv::value(key, raw)?),
            "total_steps" => self.total_steps = kv::value(key, raw)?,
            "seed" => self.seed = kv::value(key, raw)?,
            "lambda_V" | "lambda_v" => self.lambda_v = kv::value(key, raw)?,
            "lambda_L" | "lambda_l" => self.lambda_l = kv::value(key, raw)?,
            "gaussian_sigma" => self.gaussian_sigma = kv::value(key, raw)?,
            "eval_every" => self.eval_every = kv::value(key, raw)?,
            "augment" => self.augment = kv::value(key, raw)?,
            "norm_pix" => self.norm_pix = kv::value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Reads a config file whose keys may belong to either config.
pub fn parse_config_file(text: &str, source: &str, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<Vec<String>> {
    let mut seen = Vec::new();
    for (k, v) in kv::parse(text, source)? {
        if !model.set(&k, &v)? && !train.set(&k, &v)? {
            return Err(MugError::Config(format!("unknown config key {k} in {source}")));
        }
        seen.push(k);
    }
    Ok(seen)
}

/// Mask and teacher-forcing pair for one sample at one step.
#[derive(Clone, Debug)]
pub struct SampleInputs {
    pub mask: MaskSpec,
    pub teacher: TeacherForcing,
}

pub fn sample_inputs<T: Real>(
    ex: &Example<T>,
    config: &ModelConfig,
    seed: u64,
    step_key: u64,
    augment: bool,
) -> Result<SampleInputs> {
    let mask = sample_mask(ex.patches.rows(), config.mask_ratio, mask_seed(seed, ex.key, step_key))?;
    let teacher = if augment {
        let aug = augment_caption(&ex.tokens, config.vocab_size, rng::mix(&[seed, ex.key, step_key]));
        teacher_forcing_from(&aug)
    } else {
        shift_for_teacher_forcing(ex.tokens.trimmed())?
    };
    Ok(SampleInputs { mask, teacher })
}

#[derive(Clone, Copy, Debug)]
pub struct SampleLosses {
    pub loss_v: crate::autograd::Var,
    pub loss_l: crate::autograd::Var,
    pub joint: crate::autograd::Var,
}

/// Encode the masked image, decode pixels and caption, and combine the two
/// losses on the tape.
pub fn forward_sample<T: Real>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    ex: &Example<T>,
    inputs: &SampleInputs,
    weights: &LossWeights,
) -> Result<SampleLosses> {
    let latent = model.encode_masked(g, &ex.patches, &inputs.mask)?;
    let pred = model.decode_image(g, latent, &inputs.mask)?;
    let loss_v = g.tape.masked_mse(pred, &ex.target, inputs.mask.masked())?;
    let logits = model.decode_text(g, latent, &inputs.teacher.input)?;
    let loss_l = g.tape.cross_entropy(logits, &inputs.teacher.labels, &inputs.teacher.loss_mask)?;
    let joint = joint_on_tape(g, loss_v, loss_l, weights)?;
    Ok(SampleLosses { loss_v, loss_l, joint })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.step, self.report.loss_v, self.report.loss_l, self.report.loss_joint, self.lr
        )
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: OptimizerState<f32>,
    pub metrics: Vec<StepMetrics>,
    /// `(step, bits per token)`; step 0 is the initial model.
    pub entropy_trace: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn metrics_log(&self) -> String {
        self.metrics.iter().map(|m| m.log_line() + "\n").collect()
    }
}

/// Which parameters the optimizer may move: a group whose loss weight is
/// zero receives only exact-zero gradients and is frozen entirely.
pub fn active_mask<T: Real>(model: &Model<T>, w: &LossWeights) -> Vec<bool> {
    model
        .params
        .iter()
        .map(|(name, _)| match ParamGroup::of(name) {
            Some(ParamGroup::ImageDecoder) => w.lambda_v > 0.0,
            Some(ParamGroup::TextDecoder) => w.lambda_l > 0.0,
            _ => true,
        })
        .collect()
}

/// Runs `config.total_steps` optimizer steps starting from `model`.
/// `on_step` sees each step's metrics as they are produced.
pub fn train(
    config: &TrainConfig,
    examples: &[Example<f32>],
    model: Model<f32>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(MugError::Invalid("training corpus is empty".into()));
    }
    let mut model = model;
    let weights = config.weights();
    let adamw = config.adamw();
    let active = active_mask(&model, &weights);
    let decay: Vec<bool> = model.params.iter().map(|(n, _)| decays(n)).collect();
    let mut state = OptimizerState::new(&model.params);
    let mut metrics = Vec::with_capacity(config.total_steps);
    let mut entropy_trace = Vec::new();
    let eval_seed = rng::mix(&[config.seed, 0xE7]);
    if config.eval_every > 0 {
        entropy_trace.push((0, objectives::conditional_entropy_bound(&model, examples, eval_seed)?));
    }
    let batch = config.batch_size.min(examples.len());
    let (base_lr, warmup) = (config.lr(), config.warmup());

    for step in 1..=config.total_steps {
        let mut brng = rng::rng_for(&[stream::BATCH, config.seed, step as u64]);
        let picks = sample(&mut brng, examples.len(), batch).into_vec();
        let mut grads = ParamGrads::zeros_like(model.params.len());
        let (mut sum_v, mut sum_l) = (0.0f64, 0.0f64);
        let (mut tokens, mut pixels) = (0, 0);
        for &i in &picks {
            let ex = &examples[i];
            let inputs = sample_inputs(ex, &model.config, config.seed, step as u64, config.augment)?;
            let mut g = model.graph();
            let losses = forward_sample(&model, &mut g, ex, &inputs, &weights)?;
            sum_v += g.tape.scalar(losses.loss_v).as_f64();
            sum_l += g.tape.scalar(losses.loss_l).as_f64();
            tokens += inputs.teacher.supervised();
            pixels += inputs.mask.omega * model.config.patch_dim();
            grads.accumulate(g.backward(losses.joint)?);
        }
        grads.scale(1.0 / batch as f32);
        let n = batch as f64;
        let report = objectives::loss_joint(sum_v / n, sum_l / n, tokens, pixels, &weights);
        if !report.loss_joint.is_finite() || !report.loss_v.is_finite() || !report.loss_l.is_finite() {
            return Err(MugError::NonFinite(format!(
                "loss at step {step}: loss_V={} loss_L={} joint={}",
                report.loss_v, report.loss_l, report.loss_joint
            )));
        }
        let lr = lr_at(step, base_lr, warmup, config.total_steps);
        adamw_step(&mut model.params, &grads, &mut state, lr, &adamw, &active, &decay)?;
        let m = StepMetrics { step, report, lr };
        on_step(&m);
        metrics.push(m);
        if config.eval_every > 0 && step % config.eval_every == 0 {
            entropy_trace.push((step, objectives::conditional_entropy_bound(&model, examples, eval_seed)?));
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: state,
        metrics,
        entropy_trace,
    })
}

/// Options for [`check_joint_gradients`].
#[derive(Clone, Debug)]
pub struct JointCheckOptions {
    pub eps: f64,
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
    pub weights: LossWeights,
    /// Standard deviation of seeded Gaussian noise added to every parameter
    /// before checking, moving away from the near-zero attention gradients
    /// of the initialization.
    pub perturb_std: f64,
}

impl Default for JointCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_tensor: Some(24),
            seed: 0,
            weights: LossWeights::default(),
            perturb_std: 0.2,
        }
    }
}

/// Finite-difference check of the full joint loss for the tiny
/// configuration on one synthetic sample, in 64-bit precision.
pub fn check_joint_gradients(opts: &JointCheckOptions) -> Result<GradCheckReport> {
    let config = ModelConfig::tiny();
    let mut model = Model::<f64>::init(&config, opts.seed)?;
    if opts.perturb_std > 0.0 {
        let noise = Normal::new(0.0, opts.perturb_std).map_err(|e| MugError::Config(e.to_string()))?;
        let mut rng = rng::rng_for(&[stream::INIT, opts.seed, 1]);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            for v in model.params.get_mut(id).data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let synth = data::SynthOptions {
        channels: config.channels,
        ..Default::default()
    };
    let corpus = data::synthesize(1, opts.seed, &synth)?;
    let samples: Vec<_> = corpus.into_iter().map(|(_, s)| s).collect();
    let examples = data::prepare_examples::<f64>(&samples, &data::grammar_vocab(), &config, false)?;
    let ex = &examples[0];
    let inputs = sample_inputs(ex, &config, opts.seed, 1, true)?;
    let gc = GradCheckOptions {
        eps: opts.eps,
        max_entries_per_tensor: opts.max_entries_per_tensor,
        seed: opts.seed,
    };
    grad_check(&model.params, &gc, |g| {
        Ok(forward_sample(&model, g, ex, &inputs, &opts.weights)?.joint)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_kv_keys() {
        let mut m = ModelConfig::tiny();
        let mut t = TrainConfig::default();
        let text = "lambda_V=0\nlambda_L=1.0\nbatch_size=8\nmask_ratio=0.5\nbase_lr=0.002\n";
        parse_config_file(text, "cfg", &mut m, &mut t).unwrap();
        assert_eq!((t.lambda_v, t.lambda_l, t.batch_size), (0.0, 1.0, 8));
        assert_eq!(t.lr(), 0.002);
        assert_eq!(m.mask_ratio, 0.5);
        assert!(parse_config_file("nope=1\n", "cfg", &mut m, &mut t).is_err());
    }

    #[test]
    fn default_lr_scaling() {
        assert_eq!(default_base_lr(16), 1e-3);
        assert_eq!(default_base_lr(4096), 1.5e-4 * 16.0);
        assert_eq!(TrainConfig::default().warmup(), 100);
    }

    #[test]
    fn zero_weights_rejected() {
        let t = TrainConfig {
            lambda_v: 0.0,
            lambda_l: 0.0,
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }
}
