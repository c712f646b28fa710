use std::fs;

use mug::checkpoint::{load_checkpoint, save_checkpoint};
use mug::data::{self, generate_synthetic, load_dataset, load_manifest, SynthOptions};
use mug::optim::OptimizerState;
use mug::vision::sample_mask;
use mug::{Model, ModelConfig};

#[test]
fn generated_corpus_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions::default();
    let manifest = generate_synthetic(12, 5, dir.path(), &opts).unwrap();
    let (samples, vocab) = load_dataset(dir.path()).unwrap();
    let vocab = vocab.expect("vocab written alongside the manifest");
    let direct = data::synthesize(12, 5, &opts).unwrap();
    assert_eq!(samples.len(), 12);
    for ((s, r), (_, d)) in samples.iter().zip(&manifest.records).zip(&direct) {
        assert_eq!(s.id, r.path);
        assert_eq!(s.caption, r.caption);
        assert_eq!(s.caption, d.caption);
        assert_eq!(s.pixels, d.pixels);
        assert_eq!(s.pixels.shape(), [3, 32, 32]);
        for w in s.caption.split(' ') {
            assert!(vocab.id(w).is_some(), "{w} missing from vocab");
        }
    }
}

#[test]
fn generation_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let opts = SynthOptions {
        channels: 1,
        noise: 0.05,
        ..Default::default()
    };
    generate_synthetic(1, 42, a.path(), &opts).unwrap();
    generate_synthetic(1, 42, b.path(), &opts).unwrap();
    for rel in ["manifest.tsv", "vocab.txt", "images/000000.mugi"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(1, 43, c.path(), &opts).unwrap();
    assert_ne!(
        fs::read(a.path().join("images/000000.mugi")).unwrap(),
        fs::read(c.path().join("images/000000.mugi")).unwrap()
    );
}

#[test]
fn missing_image_is_named() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(3, 1, dir.path(), &SynthOptions::default()).unwrap();
    fs::remove_file(dir.path().join("images/000001.mugi")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("000001.mugi"), "{err}");
}

#[test]
fn empty_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("manifest.tsv"), "").unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("no records"), "{err}");
}

#[test]
fn malformed_manifest_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(2, 1, dir.path(), &SynthOptions::default()).unwrap();
    let path = dir.path().join("manifest.tsv");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("no tab here\n");
    fs::write(&path, text).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("manifest.tsv:3:"), "{err}");
}

#[test]
fn dimension_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(2, 1, dir.path(), &SynthOptions::default()).unwrap();
    let err = load_manifest(&dir.path().join("manifest.tsv"), Some((1, 32, 32)))
        .unwrap_err()
        .to_string();
    assert!(err.contains("000000.mugi"), "{err}");

    let samples = load_manifest(&dir.path().join("manifest.tsv"), None).unwrap();
    let config = ModelConfig::tiny();
    assert!(data::prepare_examples::<f32>(&samples, &data::grammar_vocab(), &config, false).is_err());
}

#[test]
fn corrupted_image_fails_checksum() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(1, 1, dir.path(), &SynthOptions::default()).unwrap();
    let path = dir.path().join("images/000000.mugi");
    let mut bytes = fs::read(&path).unwrap();
    bytes[40] ^= 0x10;
    fs::write(&path, bytes).unwrap();
    assert!(data::read_image(&path).is_err());
}

#[test]
fn checkpoint_reload_forward_is_bit_identical() {
    let config = ModelConfig::tiny();
    let model = Model::<f32>::init(&config, 11).unwrap();
    let corpus = data::synthesize(
        1,
        3,
        &SynthOptions {
            channels: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let samples: Vec<_> = corpus.into_iter().map(|(_, s)| s).collect();
    let vocab = data::grammar_vocab();
    let ex = data::prepare_examples::<f32>(&samples, &vocab, &config, false).unwrap().remove(0);
    let forward = |m: &Model<f32>| {
        let mask = sample_mask(64, 0.75, 8).unwrap();
        let mut g = m.graph();
        let l = m.encode_masked(&mut g, &ex.patches, &mask).unwrap();
        let px = m.decode_image(&mut g, l, &mask).unwrap();
        let z = m.decode_text(&mut g, l, ex.tokens.trimmed()).unwrap();
        (g.value(px).clone(), g.value(z).clone())
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mugc");
    let state = OptimizerState::new(&model.params);
    save_checkpoint(&path, &model, Some(&vocab), Some(&state)).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.require_vocab().unwrap(), &vocab);
    let restored = ck.model().unwrap();
    assert_eq!(restored.config, model.config);
    let (a, b) = (forward(&model), forward(&restored));
    assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
