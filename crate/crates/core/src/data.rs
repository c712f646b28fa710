//! Synthetic shape scenes with deterministic captions, the MUGI image file
//! format, manifests, and preparation of samples for training.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{MugError, Result};
use crate::model::ModelConfig;
use crate::rng::{self, stream};
use crate::tensor::{Real, Tensor};
use crate::text::{encode_caption, OovPolicy, TokenSequence, Vocab};
use crate::vision::{normalize_patches, patchify};

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const RELATIONS: [&str; 4] = ["left of", "right of", "above", "below"];

const COLOR_RGB: [[f32; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
const COLOR_GRAY: [f32; 4] = [0.4, 0.6, 0.8, 1.0];

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";

/// One image with its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `[C, H, W]` in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub caption: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn word(self) -> &'static str {
        SHAPES[self as usize]
    }

    /// Membership of the point `(dx, dy)` relative to the shape centre.
    pub fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // apex up at (0, −r), base on y = r spanning x ∈ [−r, r]
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub color: usize,
    pub shape: Shape,
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
}

/// One or two objects; with two, `relation` places the first relative to
/// the second.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub relation: Option<usize>,
}

impl Scene {
    pub fn caption(&self) -> String {
        let describe = |o: &SceneObject| format!("a {} {}", COLORS[o.color], o.shape.word());
        match (self.objects.as_slice(), self.relation) {
            ([a, b], Some(rel)) => format!("{} {} {}", describe(a), RELATIONS[rel], describe(b)),
            (objs, _) => describe(&objs[0]),
        }
    }

    /// Probe label: shape of the first object.
    pub fn label(&self) -> usize {
        self.objects[0].shape as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub size: usize,
    pub channels: usize,
    /// Per-pixel probability of replacement by uniform noise.
    pub noise: f64,
    /// 1 for single-object scenes only, 2 to mix one- and two-object scenes.
    pub max_objects: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            size: 32,
            channels: 3,
            noise: 0.0,
            max_objects: 2,
        }
    }
}

impl SynthOptions {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.channels, 1 | 3) {
            return Err(MugError::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.size < 16 {
            return Err(MugError::Config(format!("canvas size {} is below 16", self.size)));
        }
        if !matches!(self.max_objects, 1 | 2) {
            return Err(MugError::Config(format!("max_objects must be 1 or 2, got {}", self.max_objects)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(MugError::Config(format!("noise probability {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

/// Every word the grammar can emit.
pub fn grammar_terminals() -> Vec<&'static str> {
    let mut words = vec!["a"];
    words.extend(COLORS);
    words.extend(SHAPES);
    for r in RELATIONS {
        words.extend(r.split(' '));
    }
    words.sort_unstable();
    words.dedup();
    words
}

pub fn grammar_vocab() -> Vocab {
    let all = grammar_terminals().join(" ");
    Vocab::build([all.as_str()]).expect("nonempty grammar")
}

pub fn sample_scene(seed: u64, index: u64, size: usize, max_objects: usize) -> Scene {
    let mut rng = rng::rng_for(&[stream::SCENE, seed, index]);
    let s = size as i32;
    let object = |rng: &mut rand_chacha::ChaCha8Rng, cx: i32, cy: i32, r: i32| SceneObject {
        color: rng.random_range(0..COLORS.len()),
        shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
        cx: cx as f32,
        cy: cy as f32,
        radius: r as f32,
    };
    if rng.random_bool(0.5) || max_objects < 2 {
        let r = rng.random_range(s / 5..=s / 4);
        let cx = rng.random_range(r..=s - r);
        let cy = rng.random_range(r..=s - r);
        let o = object(&mut rng, cx, cy, r);
        return Scene {
            objects: vec![o],
            relation: None,
        };
    }
    let relation = rng.random_range(0..RELATIONS.len());
    let ra = rng.random_range(s * 5 / 32..=s * 7 / 32);
    let rb = rng.random_range(s * 5 / 32..=s * 7 / 32);
    let near = |rng: &mut rand_chacha::ChaCha8Rng, centre: i32| centre + rng.random_range(-1..=1);
    let across = |rng: &mut rand_chacha::ChaCha8Rng, r: i32| rng.random_range(r..=s - r);
    let (q1, q3) = (s / 4, 3 * s / 4);
    let (a_pos, b_pos) = match relation {
        0 => ((near(&mut rng, q1), across(&mut rng, ra)), (near(&mut rng, q3), across(&mut rng, rb))),
        1 => ((near(&mut rng, q3), across(&mut rng, ra)), (near(&mut rng, q1), across(&mut rng, rb))),
        2 => ((across(&mut rng, ra), near(&mut rng, q1)), (across(&mut rng, rb), near(&mut rng, q3))),
        _ => ((across(&mut rng, ra), near(&mut rng, q3)), (across(&mut rng, rb), near(&mut rng, q1))),
    };
    let a = object(&mut rng, a_pos.0, a_pos.1, ra);
    let b = object(&mut rng, b_pos.0, b_pos.1, rb);
    Scene {
        objects: vec![a, b],
        relation: Some(relation),
    }
}

/// Solid shapes on a black canvas, sampled at pixel centres.
pub fn render(scene: &Scene, size: usize, channels: usize) -> Tensor<f32> {
    let mut img = Tensor::zeros(&[channels, size, size]);
    let plane = size * size;
    for o in &scene.objects {
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - o.cx, y as f32 + 0.5 - o.cy);
                if o.shape.contains(dx, dy, o.radius) {
                    for c in 0..channels {
                        let v = if channels == 3 { COLOR_RGB[o.color][c] } else { COLOR_GRAY[o.color] };
                        img.data_mut()[c * plane + y * size + x] = v;
                    }
                }
            }
        }
    }
    img
}

fn add_noise(img: &mut Tensor<f32>, p: f64, seed: u64, index: u64) {
    if p <= 0.0 {
        return;
    }
    let mut rng = rng::rng_for(&[stream::NOISE, seed, index]);
    let c = img.shape()[0];
    let plane = img.numel() / c;
    for i in 0..plane {
        if rng.random_bool(p) {
            for ch in 0..c {
                img.data_mut()[ch * plane + i] = rng.random::<f32>();
            }
        }
    }
}

pub fn sample_id(index: usize) -> String {
    format!("images/{index:06}.mugi")
}

/// In-memory synthetic corpus; identical to what [`generate_synthetic`]
/// writes.
pub fn synthesize(n: usize, seed: u64, opts: &SynthOptions) -> Result<Vec<(Scene, ImageSample)>> {
    opts.validate()?;
    if n == 0 {
        return Err(MugError::Invalid("sample count must be at least 1".into()));
    }
    Ok((0..n)
        .map(|i| {
            let scene = sample_scene(seed, i as u64, opts.size, opts.max_objects);
            let mut pixels = render(&scene, opts.size, opts.channels);
            add_noise(&mut pixels, opts.noise, seed, i as u64);
            let sample = ImageSample {
                id: sample_id(i),
                pixels,
                caption: scene.caption(),
            };
            (scene, sample)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub caption: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\n", r.path, r.caption))
            .collect()
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.split('\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: &str| MugError::Parse {
                path: source.to_string(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let (path, caption) = line.split_once('\t').ok_or_else(|| parse_err("expected <path>\\t<caption>"))?;
            if path.is_empty() || caption.contains('\t') || line.ends_with('\r') {
                return Err(parse_err("malformed record"));
            }
            records.push(ManifestRecord {
                path: path.to_string(),
                caption: caption.to_string(),
            });
        }
        Ok(Self { records })
    }
}

/// Writes `n` rendered scenes, `manifest.tsv` and `vocab.txt` under `out_dir`.
pub fn generate_synthetic(n: usize, seed: u64, out_dir: &Path, opts: &SynthOptions) -> Result<Manifest> {
    let corpus = synthesize(n, seed, opts)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| MugError::io(&images, e))?;
    let mut manifest = Manifest::default();
    for (_, sample) in &corpus {
        write_image(&out_dir.join(&sample.id), &sample.pixels)?;
        manifest.records.push(ManifestRecord {
            path: sample.id.clone(),
            caption: sample.caption.clone(),
        });
    }
    write_file(&out_dir.join(MANIFEST_FILE), manifest.to_text().as_bytes())?;
    write_file(&out_dir.join(VOCAB_FILE), grammar_vocab().to_text().as_bytes())?;
    Ok(manifest)
}

/// Reads a manifest and its images in file order. `dims`, when given, is the
/// required `(C, H, W)`.
pub fn load_manifest(path: &Path, dims: Option<(usize, usize, usize)>) -> Result<Vec<ImageSample>> {
    let text = fs::read_to_string(path).map_err(|e| MugError::io(path, e))?;
    let manifest = Manifest::parse(&text, &path.display().to_string())?;
    if manifest.records.is_empty() {
        return Err(MugError::format(path.display(), "manifest has no records"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.records.len());
    for r in manifest.records {
        let pixels = read_image(&base.join(&r.path))?;
        if let Some((c, h, w)) = dims {
            if pixels.shape() != [c, h, w] {
                return Err(MugError::Shape(format!(
                    "{} has shape {:?}, expected [{c}, {h}, {w}]",
                    r.path,
                    pixels.shape()
                )));
            }
        }
        out.push(ImageSample {
            id: r.path,
            pixels,
            caption: r.caption,
        });
    }
    Ok(out)
}

/// Loads `DIR/manifest.tsv` and, if present, `DIR/vocab.txt`.
pub fn load_dataset(dir: &Path) -> Result<(Vec<ImageSample>, Option<Vocab>)> {
    let samples = load_manifest(&dir.join(MANIFEST_FILE), None)?;
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab = if vocab_path.exists() {
        let text = fs::read_to_string(&vocab_path).map_err(|e| MugError::io(&vocab_path, e))?;
        Some(Vocab::from_text(&text)?)
    } else {
        None
    };
    Ok((samples, vocab))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| MugError::io(path, e))?;
    f.write_all(bytes).map_err(|e| MugError::io(path, e))
}

const IMAGE_MAGIC: &[u8; 4] = b"MUGI";
const IMAGE_VERSION: u32 = 1;

pub fn encode_image(pixels: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = *pixels.shape() else {
        return Err(MugError::Shape(format!("expected [C, H, W], got {:?}", pixels.shape())));
    };
    if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(MugError::Invalid(format!("pixel value {v} outside [0, 1]")));
    }
    let mut buf = Vec::with_capacity(20 + 4 * pixels.numel() + 4);
    buf.extend_from_slice(IMAGE_MAGIC);
    for v in [IMAGE_VERSION, c as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in pixels.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_image(bytes: &[u8], source: &str) -> Result<Tensor<f32>> {
    let mut r = crate::checkpoint::Reader::new(bytes, source)?;
    if r.take(4)? != IMAGE_MAGIC {
        return Err(MugError::format(source, "bad magic (expected MUGI)"));
    }
    let version = r.u32()?;
    if version != IMAGE_VERSION {
        return Err(MugError::format(source, format!("unsupported version {version}")));
    }
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = c.checked_mul(h).and_then(|v| v.checked_mul(w)).unwrap_or(usize::MAX);
    if n == 0 || n == usize::MAX {
        return Err(MugError::format(source, format!("invalid dimensions {c}×{h}×{w}")));
    }
    let data = r.f32s(n)?;
    r.finish()?;
    if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(MugError::format(source, format!("pixel value {v} outside [0, 1]")));
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn write_image(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode_image(pixels)?)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| MugError::io(path, e))?;
    decode_image(&bytes, &path.display().to_string())
}

/// A sample converted to model inputs.
#[derive(Clone, Debug)]
pub struct Example<T> {
    /// Stable per-sample key (hash of the id) for seeded masking.
    pub key: u64,
    /// `[N, P]`
    pub patches: Tensor<T>,
    /// Reconstruction target: raw or per-patch-normalized patches.
    pub target: Tensor<T>,
    pub tokens: TokenSequence,
}

pub fn prepare_examples<T: Real>(
    samples: &[ImageSample],
    vocab: &Vocab,
    config: &ModelConfig,
    norm_pix: bool,
) -> Result<Vec<Example<T>>> {
    let expected = [config.channels, config.height, config.width];
    samples
        .iter()
        .map(|s| {
            if s.pixels.shape() != expected {
                return Err(MugError::Shape(format!(
                    "sample {} has shape {:?}, model expects {expected:?}",
                    s.id,
                    s.pixels.shape()
                )));
            }
            let patches = patchify(&s.pixels.cast::<T>(), config.patch_size)?.patches;
            let target = if norm_pix { normalize_patches(&patches) } else { patches.clone() };
            let tokens = encode_caption(&s.caption, vocab, config.max_caption_len, OovPolicy::MapToMask)?;
            if let Some(&bad) = tokens.trimmed().iter().find(|&&t| t >= config.vocab_size) {
                return Err(MugError::Config(format!(
                    "token id {bad} exceeds model vocab_size {}",
                    config.vocab_size
                )));
            }
            Ok(Example {
                key: rng::hash_str(&s.id),
                patches,
                target,
                tokens,
            })
        })
        .collect()
}

/// Shape class of the first object named in a grammar caption.
pub fn label_from_caption(caption: &str) -> Option<usize> {
    caption
        .split_whitespace()
        .find_map(|w| SHAPES.iter().position(|&s| s == w))
}

pub fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}
