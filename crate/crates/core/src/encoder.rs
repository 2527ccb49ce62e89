//! Text side of the model: word-level tokenizer, a small trainable
//! transformer encoder, and a store for externally computed hidden states.
//!
//! Both paths produce a `T x d_model` hidden state plus a 0/1 token mask;
//! downstream code cannot tell them apart.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::layers::{truncated_normal, FeedForward, LayerNorm, MultiHeadAttention, INIT_STD};
use crate::numerics::ops::MASK_NEG;
use crate::numerics::{Array, NumericsError, ParamGroup, ParamId, ParamStore, Tape, Var};

pub const PAD_WORD: u32 = 0;
pub const UNK_WORD: u32 = 1;
const WORD_SPECIALS: [&str; 2] = ["<pad>", "<unk-word>"];

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("no precomputed state for sample {0:?}")]
    MissingPrecomputed(String),
    #[error("sample id {0:?} cannot be used as a file name")]
    InvalidSampleId(String),
    #[error("precomputed record {id:?}: {reason}")]
    CorruptRecord { id: String, reason: String },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("precomputed store I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercased alphanumeric runs (underscore counts as alphanumeric).
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Word vocabulary: `<pad>` = 0, `<unk-word>` = 1, then corpus words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl TextVocab {
    /// Words with at least `min_count` occurrences, most frequent first
    /// (ties alphabetical), truncated to `max_size` entries in total.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut words: Vec<String> = WORD_SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(ranked.into_iter().map(|(w, _)| w));
        if let Some(max) = max_size {
            words.truncate(max.max(WORD_SPECIALS.len()));
        }
        Self::from_words(words)
    }

    /// Rebuilds from a stored word list (specials included).
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= WORD_SPECIALS.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_WORD)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    /// The text had no words and was replaced by a single `<unk-word>`.
    pub empty_text: bool,
}

/// Truncates or pads to exactly `max_len` positions.
pub fn tokenize_text(text: &str, vocab: &TextVocab, max_len: usize) -> Tokenized {
    let mut ids: Vec<u32> = split_words(text).iter().take(max_len).map(|w| vocab.id(w)).collect();
    let empty_text = ids.is_empty();
    if empty_text {
        log::warn!("empty text replaced by <unk-word>");
        ids.push(UNK_WORD);
    }
    let mut mask = vec![1u8; ids.len()];
    ids.resize(max_len.max(1), PAD_WORD);
    mask.resize(max_len.max(1), 0);
    Tokenized { ids, mask, empty_text }
}

/// Additive cross-attention mask as a single `1 x T` row: 0 on real
/// positions, a large negative value on padding.
pub fn expand_mask(mask: &[u8]) -> Array {
    let data = mask.iter().map(|&m| if m != 0 { 0.0 } else { MASK_NEG }).collect();
    Array::new(vec![1, mask.len()], data).expect("length matches")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    #[default]
    Trainable,
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    /// Word vocabulary size; filled in from the corpus when zero.
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feedforward inner width; `4 * d_model` when zero.
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f32,
    /// Minimum corpus frequency for a word to enter the vocabulary.
    pub min_word_count: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Trainable,
            vocab_size: 0,
            d_model: 128,
            layers: 2,
            heads: 4,
            ff_dim: 0,
            max_len: 128,
            dropout: 0.1,
            min_word_count: 1,
        }
    }
}

impl EncoderConfig {
    pub fn ff_inner(&self) -> usize {
        if self.ff_dim == 0 {
            4 * self.d_model
        } else {
            self.ff_dim
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        if self.mode == EncoderMode::Trainable {
            if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
                return bad(format!(
                    "d_model {} not divisible by {} heads",
                    self.d_model, self.heads
                ));
            }
            if self.vocab_size < WORD_SPECIALS.len() {
                return bad(format!("vocab_size {} too small", self.vocab_size));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Encoder output detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedText {
    pub hidden: Array,
    pub mask: Vec<u8>,
}

impl EncodedText {
    pub fn new(hidden: Array, mask: Vec<u8>) -> Result<Self, EncoderError> {
        if hidden.shape().len() != 2 || hidden.rows() != mask.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "encoded_text",
                detail: format!("hidden {:?} with mask of {}", hidden.shape(), mask.len()),
            }
            .into());
        }
        if !mask.contains(&1) {
            return Err(EncoderError::InvalidConfig("mask has no real token".into()));
        }
        Ok(Self { hidden, mask })
    }

    pub fn d_model(&self) -> usize {
        self.hidden.cols()
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attention: MultiHeadAttention,
    norm_attention: LayerNorm,
    ff: FeedForward,
    norm_ff: LayerNorm,
}

/// Post-norm transformer encoder over word ids.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: EncoderConfig,
    word_embed: ParamId,
    pos_embed: ParamId,
    norm_embed: LayerNorm,
    layers: Vec<EncoderLayer>,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let g = ParamGroup::Encoder;
        let d = config.d_model;
        let word_embed = store.add(
            "encoder.word_embed",
            truncated_normal(rng, &[config.vocab_size, d], INIT_STD),
            g,
            false,
        );
        let pos_embed = store.add(
            "encoder.pos_embed",
            truncated_normal(rng, &[config.max_len, d], INIT_STD),
            g,
            false,
        );
        let norm_embed = LayerNorm::new(store, "encoder.norm_embed", d, g);
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("encoder.layer{i}");
            layers.push(EncoderLayer {
                attention: MultiHeadAttention::new(store, &format!("{p}.attention"), d, config.heads, g, rng)?,
                norm_attention: LayerNorm::new(store, &format!("{p}.norm_attention"), d, g),
                ff: FeedForward::new(store, &format!("{p}.ff"), d, config.ff_inner(), g, rng),
                norm_ff: LayerNorm::new(store, &format!("{p}.norm_ff"), d, g),
            });
        }
        Ok(Self {
            config: config.clone(),
            word_embed,
            pos_embed,
            norm_embed,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Hidden state `T x d_model` for `ids` (length `T <= max_len`).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        ids: &[u32],
        mask: &[u8],
        train: bool,
        rng: &mut R,
    ) -> Result<Var, EncoderError> {
        let t = ids.len();
        if t == 0 || t > self.config.max_len || mask.len() != t {
            return Err(NumericsError::ShapeMismatch {
                op: "encoder",
                detail: format!("{t} ids, {} mask entries, max_len {}", mask.len(), self.config.max_len),
            }
            .into());
        }
        let p = self.config.dropout;
        let additive = expand_mask(mask);
        let we = tape.param(self.word_embed);
        let pe = tape.param(self.pos_embed);
        let words = tape.embed(we, ids)?;
        let positions: Vec<u32> = (0..t as u32).collect();
        let pos = tape.embed(pe, &positions)?;
        let x = tape.add(words, pos)?;
        let x = self.norm_embed.forward(tape, x)?;
        let mut x = tape.dropout(x, p, train, rng)?;
        for layer in &self.layers {
            let a = layer.attention.forward(tape, x, x, x, Some(&additive), None)?;
            let a = tape.dropout(a, p, train, rng)?;
            let r = tape.add(x, a)?;
            let h = layer.norm_attention.forward(tape, r)?;
            let f = layer.ff.forward(tape, h)?;
            let f = tape.dropout(f, p, train, rng)?;
            let r = tape.add(h, f)?;
            x = layer.norm_ff.forward(tape, r)?;
        }
        Ok(x)
    }

    /// Eval-mode encoding detached from any tape.
    pub fn encode(&self, store: &ParamStore, ids: &[u32], mask: &[u8]) -> Result<EncodedText, EncoderError> {
        let mut tape = Tape::with_params(store);
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let h = self.forward(&mut tape, ids, mask, false, &mut unused)?;
        EncodedText::new(tape.value(h).clone(), mask.to_vec())
    }
}

const MANIFEST: &str = "manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoreManifest {
    d_model: usize,
    max_len: usize,
}

/// Directory of externally computed hidden states, one record per sample:
/// `u32 T, u32 d, T*d f32, T mask bytes`, all little-endian.
#[derive(Clone, Debug)]
pub struct PrecomputedStore {
    dir: PathBuf,
    pub d_model: usize,
    pub max_len: usize,
}

fn check_id(id: &str) -> Result<(), EncoderError> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id != MANIFEST
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(EncoderError::InvalidSampleId(id.to_string()))
    }
}

impl PrecomputedStore {
    pub fn create(dir: impl AsRef<Path>, d_model: usize, max_len: usize) -> Result<Self, EncoderError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let manifest = toml::to_string(&StoreManifest { d_model, max_len })
            .map_err(|e| EncoderError::InvalidConfig(e.to_string()))?;
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(Self { dir, d_model, max_len })
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self, EncoderError> {
        let dir = dir.as_ref().to_path_buf();
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let m: StoreManifest = toml::from_str(&text).map_err(|e| EncoderError::CorruptRecord {
            id: MANIFEST.into(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            dir,
            d_model: m.d_model,
            max_len: m.max_len,
        })
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.bin"))
    }

    pub fn contains(&self, id: &str) -> bool {
        check_id(id).is_ok() && self.path(id).is_file()
    }

    pub fn put(&self, id: &str, enc: &EncodedText) -> Result<(), EncoderError> {
        check_id(id)?;
        let (t, d) = (enc.hidden.rows(), enc.hidden.cols());
        if d != self.d_model || t > self.max_len {
            return Err(EncoderError::CorruptRecord {
                id: id.into(),
                reason: format!("shape {t}x{d} exceeds store {}x{}", self.max_len, self.d_model),
            });
        }
        let mut w = BufWriter::new(File::create(self.path(id))?);
        w.write_all(&(t as u32).to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        for v in enc.hidden.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&enc.mask)?;
        w.flush()?;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<EncodedText, EncoderError> {
        check_id(id)?;
        let mut bytes = Vec::new();
        match File::open(self.path(id)) {
            Ok(mut f) => f.read_to_end(&mut bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(EncoderError::MissingPrecomputed(id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let corrupt = |reason: &str| EncoderError::CorruptRecord {
            id: id.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 {
            return Err(corrupt("truncated header"));
        }
        let t = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if d != self.d_model || t == 0 || t > self.max_len {
            return Err(corrupt(&format!("shape {t}x{d} disagrees with manifest")));
        }
        if bytes.len() != 8 + 4 * t * d + t {
            return Err(corrupt("length does not match header"));
        }
        let floats = bytes[8..8 + 4 * t * d]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mask = bytes[8 + 4 * t * d..].to_vec();
        if mask.iter().any(|&m| m > 1) {
            return Err(corrupt("mask bytes must be 0 or 1"));
        }
        let hidden = Array::new(vec![t, d], floats)?;
        if !hidden.is_finite() {
            return Err(corrupt("non-finite hidden values"));
        }
        EncodedText::new(hidden, mask)
    }
}
