//! Caption tokenization, word-level augmentation and teacher-forcing pairs.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{MugError, Result};
use crate::rng::{self, stream};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASKWORD: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<mask>"];

/// Default maximum caption length in tokens, including BOS and EOS.
pub const DEFAULT_MAX_LEN: usize = 70;

/// Fraction of caption words picked for corruption.
pub const AUGMENT_FRACTION: f64 = 0.20;
/// Probabilities of masking, replacing and deleting a picked word.
pub const AUGMENT_MASK_P: f64 = 0.50;
pub const AUGMENT_REPLACE_P: f64 = 0.10;
pub const AUGMENT_DELETE_P: f64 = 0.40;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Lower-cased whitespace words, sorted after the four specials.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut words = BTreeSet::new();
        let mut any = false;
        for caption in corpus {
            any = true;
            for w in caption.split_whitespace() {
                words.insert(w.to_lowercase());
            }
        }
        if !any {
            return Err(MugError::Invalid("cannot build a vocabulary from an empty corpus".into()));
        }
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIAL_TOKENS.contains(&w.as_str())))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(MugError::format("vocab", "first four lines must be the special tokens"));
        }
        let mut seen = BTreeSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) || !seen.insert(t.as_str()) {
                return Err(MugError::format("vocab", format!("invalid or duplicate token on line {}", i + 1)));
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    /// Words for `ids`, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// How out-of-vocabulary words are handled by [`encode_caption`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OovPolicy {
    Reject,
    MapToMask,
}

/// `[BOS, w₁..w_k, EOS, PAD…]` of fixed capacity `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub length: usize,
    /// Words dropped by truncation when encoding.
    pub truncated_words: usize,
}

impl TokenSequence {
    pub fn from_words(words: &[usize], max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(MugError::Config(format!("max caption length {max_len} < 2")));
        }
        let keep = words.len().min(max_len - 2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend_from_slice(&words[..keep]);
        ids.push(EOS);
        let length = ids.len();
        ids.resize(max_len, PAD);
        Ok(Self {
            ids,
            length,
            truncated_words: words.len() - keep,
        })
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn words(&self) -> &[usize] {
        &self.ids[1..self.length - 1]
    }

    /// The unpadded prefix `ids[..length]`.
    pub fn trimmed(&self) -> &[usize] {
        &self.ids[..self.length]
    }
}

pub fn encode_caption(text: &str, vocab: &Vocab, max_len: usize, oov: OovPolicy) -> Result<TokenSequence> {
    let mut words = Vec::new();
    for w in text.split_whitespace() {
        let w = w.to_lowercase();
        match (vocab.id(&w), oov) {
            (Some(id), _) => words.push(id),
            (None, OovPolicy::MapToMask) => words.push(MASKWORD),
            (None, OovPolicy::Reject) => {
                return Err(MugError::Invalid(format!("word {w:?} is not in the vocabulary")))
            }
        }
    }
    TokenSequence::from_words(&words, max_len)
}

/// Corrupted decoder input paired with its clean target.
///
/// Masked and replaced words keep their original id in `target`; deleted
/// words are removed from both, so `input` and `target` stay aligned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedCaption {
    pub input: TokenSequence,
    pub target: TokenSequence,
    pub masked: usize,
    pub replaced: usize,
    pub deleted: usize,
}

/// Picks `round(0.2·k)` word positions uniformly and masks (p=0.5),
/// replaces with a random non-special word (p=0.1) or deletes (p=0.4) each.
pub fn augment_caption(tokens: &TokenSequence, vocab_size: usize, seed: u64) -> AugmentedCaption {
    let words = tokens.words();
    let k = words.len();
    let n_pick = (AUGMENT_FRACTION * k as f64).round() as usize;
    let mut rng = rng::rng_for(&[stream::CAPTION, seed]);
    let mut picked = vec![false; k];
    if n_pick > 0 {
        for i in sample(&mut rng, k, n_pick).into_iter() {
            picked[i] = true;
        }
    }
    let (mut input, mut target) = (Vec::with_capacity(k), Vec::with_capacity(k));
    let (mut masked, mut replaced, mut deleted) = (0, 0, 0);
    for (i, &w) in words.iter().enumerate() {
        if !picked[i] {
            input.push(w);
            target.push(w);
            continue;
        }
        let u: f64 = rng.random();
        if u < AUGMENT_MASK_P {
            input.push(MASKWORD);
            target.push(w);
            masked += 1;
        } else if u < AUGMENT_MASK_P + AUGMENT_REPLACE_P && vocab_size > NUM_SPECIALS {
            input.push(rng.random_range(NUM_SPECIALS..vocab_size));
            target.push(w);
            replaced += 1;
        } else if u < AUGMENT_MASK_P + AUGMENT_REPLACE_P {
            // no ordinary word to substitute; fall back to masking
            input.push(MASKWORD);
            target.push(w);
            masked += 1;
        } else {
            deleted += 1;
        }
    }
    let max_len = tokens.max_len();
    AugmentedCaption {
        input: TokenSequence::from_words(&input, max_len).expect("valid length"),
        target: TokenSequence::from_words(&target, max_len).expect("valid length"),
        masked,
        replaced,
        deleted,
    }
}

/// Decoder input, next-token labels and the supervised-position mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherForcing {
    pub input: Vec<usize>,
    pub labels: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TeacherForcing {
    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// `input = ids[..L−1]`, `labels = ids[1..]`, supervised where the label is
/// not PAD.
pub fn shift_for_teacher_forcing(ids: &[usize]) -> Result<TeacherForcing> {
    shift_pair(ids, ids)
}

/// Shift with a separate clean `target` (same length as `input`).
pub fn shift_pair(input: &[usize], target: &[usize]) -> Result<TeacherForcing> {
    let l = input.len();
    if l < 2 || target.len() != l {
        return Err(MugError::Invalid(format!(
            "teacher forcing needs aligned sequences of length ≥ 2 (got {l} and {})",
            target.len()
        )));
    }
    let labels = target[1..].to_vec();
    Ok(TeacherForcing {
        input: input[..l - 1].to_vec(),
        loss_mask: labels.iter().map(|&t| t != PAD).collect(),
        labels,
    })
}

/// Training pair from an augmented caption, trimmed to its real length.
pub fn teacher_forcing_from(aug: &AugmentedCaption) -> TeacherForcing {
    shift_pair(aug.input.trimmed(), aug.target.trimmed()).expect("framed sequences have length ≥ 2")
}

/// Lower-triangular attention pattern: query `q` may attend key `k ≤ q`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalMask {
    len: usize,
}

impl CausalMask {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(MugError::Invalid("causal mask of length 0".into()));
        }
        Ok(Self { len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        k <= q
    }

    /// Row-major `[L, L]` flags.
    pub fn to_flags(&self) -> Vec<bool> {
        (0..self.len * self.len)
            .map(|i| self.allowed(i / self.len, i % self.len))
            .collect()
    }
}

pub fn causal_mask(len: usize) -> Result<CausalMask> {
    CausalMask::new(len)
}
