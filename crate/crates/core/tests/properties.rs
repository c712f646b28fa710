use mug::objectives::{gaussian_const, gaussian_nll_equiv, joint_value, loss_reconstruction, LossWeights};
use mug::optim::lr_at;
use mug::rng;
use mug::text::{augment_caption, TokenSequence, NUM_SPECIALS};
use mug::vision::{masked_count, sample_mask};
use mug::Tensor;
use proptest::prelude::*;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| (rng::mix(&[seed, i as u64]) >> 11) as f64 / (1u64 << 53) as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_has_exact_count(n in 1usize..200, ratio in 0.0f64..0.99, seed in any::<u64>()) {
        let (m, expected) = match (sample_mask(n, ratio, seed), masked_count(n, ratio)) {
            (Ok(m), Ok(e)) => (m, e),
            (Err(_), Err(_)) => return Ok(()),
            (m, e) => panic!("sample_mask {:?} disagrees with masked_count {:?}", m.is_ok(), e.is_ok()),
        };
        prop_assert_eq!(m.keep.iter().filter(|&&k| !k).count(), expected);
        prop_assert_eq!(m.omega, expected);
        prop_assert!(m.visible_count() >= 1);
    }

    #[test]
    fn reconstruction_ignores_visible_rows(seed in any::<u64>(), row in 0usize..16, col in 0usize..6, delta in -3.0f64..3.0) {
        prop_assume!(delta != 0.0);
        let pred = rand_tensor(&[16, 6], seed);
        let target = rand_tensor(&[16, 6], seed ^ 1);
        let mask = sample_mask(16, 0.75, seed).unwrap();
        let base = loss_reconstruction(&pred, &target, &mask).unwrap();
        let mut p = pred.clone();
        p.data_mut()[row * 6 + col] += delta;
        let mut t = target.clone();
        t.data_mut()[row * 6 + col] += delta;
        let (lp, lt) = (loss_reconstruction(&p, &target, &mask).unwrap(), loss_reconstruction(&pred, &t, &mask).unwrap());
        if mask.keep[row] {
            prop_assert_eq!(lp.to_bits(), base.to_bits());
            prop_assert_eq!(lt.to_bits(), base.to_bits());
        } else {
            prop_assert_ne!(lp, base);
            prop_assert_ne!(lt, base);
        }
    }

    #[test]
    fn gaussian_nll_is_shifted_scaled_mse(seed in any::<u64>(), sigma in 0.05f64..5.0) {
        let pred = rand_tensor(&[16, 6], seed);
        let target = rand_tensor(&[16, 6], seed ^ 7);
        let mask = sample_mask(16, 0.75, seed).unwrap();
        let e = gaussian_nll_equiv(&pred, &target, &mask, sigma).unwrap();
        prop_assert!((e.nll - gaussian_const(sigma) - e.mse / (2.0 * sigma * sigma)).abs() < 1e-9);
    }

    #[test]
    fn joint_loss_is_linear_in_weights(lv in 0.0f64..10.0, ll in 0.0f64..10.0, a in 0.0f64..4.0, b in 0.0f64..4.0) {
        let w = LossWeights { lambda_v: a, lambda_l: b };
        let j = joint_value(lv, ll, &w);
        prop_assert!((j - (a * lv + b * ll)).abs() <= 1e-12 * (1.0 + j.abs()));
        let only_v = joint_value(lv, ll, &LossWeights { lambda_v: 1.0, lambda_l: 0.0 });
        prop_assert_eq!(only_v.to_bits(), lv.to_bits());
        let only_l = joint_value(lv, ll, &LossWeights { lambda_v: 0.0, lambda_l: 1.0 });
        prop_assert_eq!(only_l.to_bits(), ll.to_bits());
    }

    #[test]
    fn augmentation_keeps_alignment(words in prop::collection::vec(NUM_SPECIALS..32usize, 0..40), seed in any::<u64>()) {
        let seq = TokenSequence::from_words(&words, 70).unwrap();
        let aug = augment_caption(&seq, 32, seed);
        let k = words.len();
        let picked = (0.2 * k as f64).round() as usize;
        prop_assert_eq!(aug.masked + aug.replaced + aug.deleted, picked);
        prop_assert_eq!(aug.input.words().len(), k - aug.deleted);
        prop_assert_eq!(aug.target.words().len(), aug.input.words().len());
        let differing = aug.input.words().iter().zip(aug.target.words()).filter(|(a, b)| a != b).count();
        prop_assert!(differing <= aug.masked + aug.replaced);
        // target is the original caption with the deleted words removed
        let mut it = words.iter();
        for w in aug.target.words() {
            prop_assert!(it.any(|x| x == w));
        }
    }

    #[test]
    fn learning_rate_is_bounded(step in 0usize..5000, base in 1e-6f64..1.0, warmup in 0usize..500, total in 1usize..5000) {
        let lr = lr_at(step, base, warmup, total);
        prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
    }
}
