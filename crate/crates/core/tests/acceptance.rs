//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured numbers; run with `--nocapture` to see them.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use mug::checkpoint::{load_checkpoint, save_checkpoint};
use mug::data::{self, grammar_vocab, label_from_caption, prepare_examples, Example, ImageSample, SynthOptions};
use mug::eval::{self, extract_features, linear_probe_split, probe_split, FeatureSource, ProbeOptions};
use mug::objectives::{conditional_entropy_bound, gaussian_const, gaussian_nll_equiv, gaussian_nll_on_tape, loss_reconstruction};
use mug::params::{Graph, ParamStore};
use mug::rng;
use mug::text::{augment_caption, TokenSequence, AUGMENT_DELETE_P, AUGMENT_FRACTION, NUM_SPECIALS};
use mug::trainer::{check_joint_gradients, train, JointCheckOptions, TrainConfig, TrainOutcome};
use mug::vision::sample_mask;
use mug::{Model, ModelConfig, Tensor};
use rand::Rng;

/// Criteria run one at a time so that wall-clock limits are not shared
/// with concurrently running tests.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, pass: bool, detail: String) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn gray_config() -> ModelConfig {
    ModelConfig::tiny()
}

fn corpus(n: usize, seed: u64, channels: usize) -> Vec<ImageSample> {
    let opts = SynthOptions {
        channels,
        ..Default::default()
    };
    data::synthesize(n, seed, &opts).unwrap().into_iter().map(|(_, s)| s).collect()
}

fn examples(samples: &[ImageSample], config: &ModelConfig) -> Vec<Example<f32>> {
    prepare_examples(samples, &grammar_vocab(), config, false).unwrap()
}

fn bits<T: mug::Real>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.as_f64().to_bits()).collect()
}

#[test]
fn c01_gradient_correctness() {
    let _serial = serial();
    let start = Instant::now();
    let r = check_joint_gradients(&JointCheckOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let (name, idx) = r.worst.clone().unwrap_or_default();
    report(
        1,
        r.max_relative_error < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "max relative error {:.2e} over {} entries, worst {name}[{idx}], {:.1?}",
            r.max_relative_error, r.entries_checked, elapsed
        ),
    );
}

fn degenerate_run(lambda_v: f64, lambda_l: f64) -> (Model<f32>, TrainOutcome) {
    let config = gray_config();
    let ex = examples(&corpus(16, 21, 1), &config);
    let init = Model::<f32>::init(&config, 5).unwrap();
    let tc = TrainConfig {
        total_steps: 100,
        batch_size: 4,
        lambda_v,
        lambda_l,
        seed: 9,
        ..Default::default()
    };
    let out = train(&tc, &ex, init.clone(), |_| {}).unwrap();
    (init, out)
}

fn frozen_group(init: &Model<f32>, trained: &Model<f32>, prefix: &str) -> (usize, usize) {
    let (mut same, mut total) = (0, 0);
    for ((name, a), (_, b)) in init.params.iter().zip(trained.params.iter()) {
        if name.starts_with(prefix) {
            total += 1;
            same += usize::from(bits(a) == bits(b));
        }
    }
    (same, total)
}

#[test]
fn c02_degenerate_weights() {
    let _serial = serial();
    let (init, out) = degenerate_run(1.0, 0.0);
    let joint_is_v = out.metrics.iter().all(|m| m.report.loss_joint.to_bits() == m.report.loss_v.to_bits());
    let (same_t, total_t) = frozen_group(&init, &out.model, "text_decoder.");
    let (init_m, mac) = degenerate_run(0.0, 1.0);
    let joint_is_l = mac.metrics.iter().all(|m| m.report.loss_joint.to_bits() == m.report.loss_l.to_bits());
    let (same_i, total_i) = frozen_group(&init_m, &mac.model, "image_decoder.");
    let encoder_moved = frozen_group(&init, &out.model, "encoder.").0 < frozen_group(&init, &out.model, "encoder.").1;
    report(
        2,
        joint_is_v && joint_is_l && same_t == total_t && same_i == total_i && total_t > 0 && total_i > 0 && encoder_moved,
        format!(
            "λ_L=0: joint==L_V {joint_is_v}, text decoder {same_t}/{total_t} unchanged; λ_V=0: joint==L_L {joint_is_l}, image decoder {same_i}/{total_i} unchanged"
        ),
    );
}

#[test]
fn c03_reconstruction_locality() {
    let _serial = serial();
    let config = gray_config();
    let model = Model::<f32>::init(&config, 2).unwrap();
    let ex = examples(&corpus(1, 4, 1), &config).remove(0);
    let mask = sample_mask(64, 0.75, 17).unwrap();
    let mut g = model.graph();
    let latent = model.encode_masked(&mut g, &ex.patches, &mask).unwrap();
    let pid = model.decode_image(&mut g, latent, &mask).unwrap();
    let pred = g.value(pid).clone();
    let target = ex.target.clone();
    let base = loss_reconstruction(&pred, &target, &mask).unwrap().to_bits();
    let (mut visible_ok, mut masked_ok, mut checked) = (true, true, 0);
    for i in 0..pred.numel() {
        let row = i / pred.cols();
        for which in 0..2 {
            let (mut p, mut t) = (pred.clone(), target.clone());
            let buf = if which == 0 { p.data_mut() } else { t.data_mut() };
            buf[i] += 0.25;
            let changed = loss_reconstruction(&p, &t, &mask).unwrap().to_bits() != base;
            if mask.keep[row] {
                visible_ok &= !changed;
            } else {
                masked_ok &= changed;
            }
            checked += 1;
        }
    }
    report(
        3,
        visible_ok && masked_ok,
        format!("{checked} single-element perturbations; visible unchanged {visible_ok}, masked changed {masked_ok}"),
    );
}

#[test]
fn c04_causality() {
    let _serial = serial();
    let config = gray_config();
    let mut r = rng::rng_for(&[0xCA05A1]);
    let mut violations = 0;
    for draw in 0..100u64 {
        let model = Model::<f32>::init(&config, 1000 + draw).unwrap();
        let patches = Tensor::from_fn(&[64, 16], |_| r.random::<f32>());
        let mask = sample_mask(64, 0.75, draw).unwrap();
        let len = r.random_range(2..=16);
        let tokens: Vec<usize> = (0..len).map(|_| r.random_range(0..config.vocab_size)).collect();
        let j = r.random_range(0..len);
        let mut altered = tokens.clone();
        altered[j] = (tokens[j] + r.random_range(1..config.vocab_size)) % config.vocab_size;
        let logits = |t: &[usize]| {
            let mut g = model.graph();
            let l = model.encode_masked(&mut g, &patches, &mask).unwrap();
            let z = model.decode_text(&mut g, l, t).unwrap();
            g.value(z).clone()
        };
        let (a, b) = (logits(&tokens), logits(&altered));
        for row in 0..j {
            let same = a.row(row).iter().zip(b.row(row)).all(|(x, y)| x.to_bits() == y.to_bits());
            violations += usize::from(!same);
        }
    }
    report(4, violations == 0, format!("100 draws, {violations} earlier rows changed"));
}

#[test]
fn c05_gaussian_identity() {
    let _serial = serial();
    let mut r = rng::rng_for(&[0x6A055]);
    let (mut worst_identity, mut worst_cos) = (0.0f64, 0.0f64);
    for k in 0..100u64 {
        let sigma = r.random_range(0.05..3.0);
        let pred = Tensor::<f64>::from_fn(&[64, 16], |_| r.random());
        let target = Tensor::<f64>::from_fn(&[64, 16], |_| r.random());
        let mask = sample_mask(64, 0.75, k).unwrap();
        let e = gaussian_nll_equiv(&pred, &target, &mask, sigma).unwrap();
        worst_identity = worst_identity.max((e.nll - gaussian_const(sigma) - e.mse / (2.0 * sigma * sigma)).abs());

        let mut store = ParamStore::new();
        let id = store.insert("pred", pred.clone()).unwrap();
        let grad = |nll: bool| {
            let mut g = Graph::new(&store);
            let p = g.param(id);
            let loss = if nll {
                gaussian_nll_on_tape(&mut g, p, &target, &mask, sigma).unwrap()
            } else {
                g.tape.masked_mse(p, &target, mask.masked()).unwrap()
            };
            g.backward(loss).unwrap().get(id).unwrap().clone()
        };
        let (a, b) = (grad(true), grad(false));
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        worst_cos = worst_cos.max((1.0 - dot / (na * nb)).abs());
    }
    report(
        5,
        worst_identity <= 1e-9 && worst_cos <= 1e-6,
        format!("max |nll−const−mse/2σ²| {worst_identity:.2e}, max |1−cos| {worst_cos:.2e}"),
    );
}

const OVERFIT_SAMPLES: usize = 64;
const OVERFIT_STEPS: usize = 3000;
const OVERFIT_BATCH: usize = 32;
const OVERFIT_LR: f64 = 5e-3;
const EVAL_SEED: u64 = 7;

struct Overfit {
    elapsed: Duration,
    token_accuracy: f64,
    masked_mse: f64,
    exact: usize,
    entropy_init: f64,
    entropy_final: f64,
}

fn overfit() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| {
        let config = gray_config();
        let samples = corpus(OVERFIT_SAMPLES, 1, 1);
        let ex = examples(&samples, &config);
        let init = Model::<f32>::init(&config, 0).unwrap();
        let entropy_init = conditional_entropy_bound(&init, &ex, EVAL_SEED).unwrap();
        let tc = TrainConfig {
            total_steps: OVERFIT_STEPS,
            batch_size: OVERFIT_BATCH,
            base_lr: Some(OVERFIT_LR),
            augment: false,
            ..Default::default()
        };
        let start = Instant::now();
        let model = train(&tc, &ex, init, |_| {}).unwrap().model;
        let elapsed = start.elapsed();
        let vocab = grammar_vocab();
        let exact = ex
            .iter()
            .zip(&samples)
            .enumerate()
            .filter(|(i, (e, s))| {
                let c = eval::greedy_caption(&model, &vocab, &e.patches, 0.75, 1000 + *i as u64, config.max_caption_len, None)
                    .unwrap();
                c == s.caption
            })
            .count();
        Overfit {
            elapsed,
            token_accuracy: eval::caption_token_accuracy(&model, &ex, EVAL_SEED).unwrap(),
            masked_mse: eval::masked_pixel_mse(&model, &ex, EVAL_SEED).unwrap(),
            exact,
            entropy_init,
            entropy_final: conditional_entropy_bound(&model, &ex, EVAL_SEED).unwrap(),
        }
    })
}

#[test]
fn c06_overfit() {
    let _serial = serial();
    let o = overfit();
    let exact_frac = o.exact as f64 / OVERFIT_SAMPLES as f64;
    report(
        6,
        o.elapsed <= Duration::from_secs(600) && o.token_accuracy >= 0.95 && o.masked_mse <= 0.01 && exact_frac >= 0.9,
        format!(
            "{OVERFIT_STEPS} steps in {:.0?}: token accuracy {:.4}, masked MSE {:.4}, exact captions {}/{OVERFIT_SAMPLES}",
            o.elapsed, o.token_accuracy, o.masked_mse, o.exact
        ),
    );
}

#[test]
fn c07_entropy_bound_shrinks() {
    let _serial = serial();
    let o = overfit();
    let log_v = (gray_config().vocab_size as f64).log2();
    report(
        7,
        (o.entropy_init - log_v).abs() <= 0.1 && o.entropy_final <= 0.1 * o.entropy_init,
        format!(
            "init {:.4} bits/token (log₂V {log_v}), final {:.4} ({:.4}× initial)",
            o.entropy_init,
            o.entropy_final,
            o.entropy_final / o.entropy_init
        ),
    );
}

const PROBE_STEPS: usize = 3000;

#[test]
fn c08_probe_ordering() {
    let _serial = serial();
    let config = gray_config();
    let opts = SynthOptions {
        channels: 1,
        max_objects: 1,
        ..Default::default()
    };
    let samples: Vec<_> = data::synthesize(1024, 2024, &opts).unwrap().into_iter().map(|(_, s)| s).collect();
    let labels: Vec<usize> = samples.iter().map(|s| label_from_caption(&s.caption).unwrap()).collect();
    let ex = examples(&samples, &config);
    let (train_idx, test_idx) = probe_split(ex.len(), 0);
    let train_ex: Vec<_> = train_idx.iter().map(|&i| ex[i].clone()).collect();
    let tc = TrainConfig {
        total_steps: PROBE_STEPS,
        base_lr: Some(2e-3),
        lambda_l: 1.0,
        seed: 3,
        ..Default::default()
    };
    let model = train(&tc, &train_ex, Model::init(&config, 3).unwrap(), |_| {}).unwrap().model;
    let opts = ProbeOptions::default();
    let probe = |source| {
        let f = extract_features(&model, &ex, source).unwrap();
        linear_probe_split(&f, &labels, &train_idx, &test_idx, source, &opts).unwrap()
    };
    let (cls, pixels) = (probe(FeatureSource::ClassToken), probe(FeatureSource::RawPixels));
    report(
        8,
        cls.test_accuracy >= 0.9 && cls.test_accuracy > pixels.test_accuracy,
        format!(
            "class-token probe {:.4}, raw-pixel probe {:.4} on {} held-out",
            cls.test_accuracy,
            pixels.test_accuracy,
            test_idx.len()
        ),
    );
}

#[test]
fn c09_determinism_and_persistence() {
    let _serial = serial();
    let config = gray_config();
    let ex = examples(&corpus(16, 8, 1), &config);
    let tc = TrainConfig {
        total_steps: 100,
        batch_size: 4,
        seed: 12,
        ..Default::default()
    };
    let run = || train(&tc, &ex, Model::init(&config, 12).unwrap(), |_| {}).unwrap();
    let (a, b) = (run(), run());
    let logs_equal = a.metrics_log() == b.metrics_log() && a.metrics.len() == 100;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.mugc");
    save_checkpoint(&path, &a.model, Some(&grammar_vocab()), Some(&a.optimizer)).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let restored = ck.model().unwrap();
    let optimizer_restored = ck.optimizer.as_ref().is_some_and(|s| s.step == a.optimizer.step);
    let mask = sample_mask(64, 0.75, 99).unwrap();
    let forward = |m: &Model<f32>| {
        let mut g = m.graph();
        let l = m.encode_masked(&mut g, &ex[0].patches, &mask).unwrap();
        let px = m.decode_image(&mut g, l, &mask).unwrap();
        let z = m.decode_text(&mut g, l, ex[0].tokens.trimmed()).unwrap();
        (bits(g.value(px)), bits(g.value(z)))
    };
    let forward_equal = forward(&a.model) == forward(&restored);
    report(
        9,
        logs_equal && forward_equal && optimizer_restored,
        format!("100-step logs identical {logs_equal}, reloaded forward bit-identical {forward_equal}, optimizer state restored {optimizer_restored}"),
    );
}

#[test]
fn c10_pipeline_statistics() {
    let _serial = serial();
    let wrong = (0..10_000u64)
        .filter(|&s| {
            let m = sample_mask(64, 0.75, s).unwrap();
            m.omega != 48 || m.keep.iter().filter(|&&k| !k).count() != 48
        })
        .count();

    const CAPTIONS: u64 = 10_000;
    const WORDS: usize = 10;
    let mut r = rng::rng_for(&[0xDE1]);
    let mut deleted = 0usize;
    for s in 0..CAPTIONS {
        let words: Vec<usize> = (0..WORDS).map(|_| r.random_range(NUM_SPECIALS..32)).collect();
        let seq = TokenSequence::from_words(&words, 70).unwrap();
        deleted += augment_caption(&seq, 32, s).deleted;
    }
    let total_words = CAPTIONS as usize * WORDS;
    let rate = deleted as f64 / total_words as f64;
    let expected = AUGMENT_FRACTION * AUGMENT_DELETE_P;
    // each caption picks exactly round(0.2·10) = 2 words, each deleted with p = 0.4
    let picks = CAPTIONS as f64 * (AUGMENT_FRACTION * WORDS as f64).round();
    let sigma = (picks * AUGMENT_DELETE_P * (1.0 - AUGMENT_DELETE_P)).sqrt() / total_words as f64;
    let z = (rate - expected) / sigma;
    report(
        10,
        wrong == 0 && z.abs() <= 3.0,
        format!("{wrong}/10000 masks without exactly 48 masked; deletion rate {rate:.5} vs {expected:.2} (z = {z:.2})"),
    );
}
