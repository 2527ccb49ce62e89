//! Autoregressive label decoder.
//!
//! Per layer: masked self-attention over the label prefix, residual plus
//! layer norm, dropout, then a cross-attention block over the encoder state
//! (attention, residual, norm, feedforward, residual, norm). A final linear
//! map produces logits over the symbolic vocabulary.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::expand_mask;
use crate::label_codec::SymbolicVocab;
use crate::numerics::layers::{truncated_normal, FeedForward, LayerNorm, Linear, MultiHeadAttention, INIT_STD};
use crate::numerics::ops::MASK_NEG;
use crate::numerics::{Array, NumericsError, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::taxonomy::LabelId;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("encoder width {encoder} differs from decoder width {decoder}")]
    DimensionDisagreement { encoder: usize, decoder: usize },
    #[error("label init vectors have width {found}, expected {expected}")]
    InitDimensionMismatch { expected: usize, found: usize },
    #[error("label init file: {0}")]
    InitFile(String),
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("label init I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Symbolic vocabulary size; filled in from the hierarchy when zero.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub heads: usize,
    /// Feedforward inner width; `4 * d_model` when zero.
    pub ff_dim: usize,
    pub dropout: f32,
    /// Position table size; the codec capacity when zero.
    pub max_positions: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            n_layers: 2,
            heads: 8,
            ff_dim: 0,
            dropout: 0.2,
            max_positions: 0,
        }
    }
}

impl DecoderConfig {
    pub fn ff_inner(&self) -> usize {
        if self.ff_dim == 0 {
            4 * self.d_model
        } else {
            self.ff_dim
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: String| Err(DecoderError::InvalidConfig(m));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} leaves no label tokens", self.vocab_size));
        }
        if self.max_positions < 2 {
            return bad(format!("max_positions {} below 2", self.max_positions));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Attention probabilities captured during a forward pass; one entry per
/// layer and head, in order.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub self_attention: Vec<Array>,
    pub cross_attention: Vec<Array>,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attention: MultiHeadAttention,
    norm_query: LayerNorm,
    cross_attention: MultiHeadAttention,
    norm_cross: LayerNorm,
    ff: FeedForward,
    norm_ff: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    word_embed: ParamId,
    pos_embed: ParamId,
    layers: Vec<DecoderLayer>,
    output: Linear,
}

/// Additive self-attention mask: position `i` sees `j <= i` unless `j` is
/// padding.
pub fn causal_mask(label_mask: &[u8]) -> Array {
    let t = label_mask.len();
    let mut m = Array::zeros(&[t, t]);
    for i in 0..t {
        for (j, &real) in label_mask.iter().enumerate() {
            if j > i || real == 0 {
                m.row_mut(i)[j] = MASK_NEG;
            }
        }
    }
    m
}

impl Decoder {
    /// Registers decoder parameters. With `label_init`, each label token's
    /// embedding row and output column are copied from the file.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &DecoderConfig,
        rng: &mut R,
        label_init: Option<(&LabelInit, &SymbolicVocab)>,
    ) -> Result<Self, DecoderError> {
        config.validate()?;
        if let Some((init, _)) = label_init {
            if init.d_model != config.d_model {
                return Err(DecoderError::InitDimensionMismatch {
                    expected: config.d_model,
                    found: init.d_model,
                });
            }
        }
        let g = ParamGroup::Decoder;
        let d = config.d_model;
        let word_embed = store.add(
            "decoder.word_embed",
            truncated_normal(rng, &[config.vocab_size, d], INIT_STD),
            g,
            false,
        );
        let pos_embed = store.add(
            "decoder.pos_embed",
            truncated_normal(rng, &[config.max_positions, d], INIT_STD),
            g,
            false,
        );
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("decoder.layer{i}");
            layers.push(DecoderLayer {
                self_attention: MultiHeadAttention::new(
                    store,
                    &format!("{p}.self_attention"),
                    d,
                    config.heads,
                    g,
                    rng,
                )?,
                norm_query: LayerNorm::new(store, &format!("{p}.norm_query"), d, g),
                cross_attention: MultiHeadAttention::new(
                    store,
                    &format!("{p}.cross_attention"),
                    d,
                    config.heads,
                    g,
                    rng,
                )?,
                norm_cross: LayerNorm::new(store, &format!("{p}.norm_cross"), d, g),
                ff: FeedForward::new(store, &format!("{p}.ff"), d, config.ff_inner(), g, rng),
                norm_ff: LayerNorm::new(store, &format!("{p}.norm_ff"), d, g),
            });
        }
        let output = Linear::new(store, "decoder.output", d, config.vocab_size, g, rng);
        if let Some((init, vocab)) = label_init {
            for k in 0..vocab.label_count() as u32 {
                let label = LabelId(k);
                let Some(v) = init.vectors.get(&vocab.symbol(label)) else {
                    continue;
                };
                let tok = vocab.token_of(label) as usize;
                store.get_mut(word_embed).value.row_mut(tok).copy_from_slice(v);
                let out_w = &mut store.get_mut(output.weight).value;
                for (r, &x) in v.iter().enumerate() {
                    out_w.row_mut(r)[tok] = x;
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            word_embed,
            pos_embed,
            layers,
            output,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn word_embed(&self) -> ParamId {
        self.word_embed
    }

    pub fn output_weight(&self) -> ParamId {
        self.output.weight
    }

    /// Logits `T x vocab_size` for label tokens `tokens` (length `T`).
    ///
    /// `enc_hidden` is `T_enc x d_model` and `enc_mask` its 0/1 token mask.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[u32],
        label_mask: &[u8],
        enc_hidden: Var,
        enc_mask: &[u8],
        train: bool,
        rng: &mut R,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var, DecoderError> {
        let t = tokens.len();
        let enc_d = tape.value(enc_hidden).cols();
        if enc_d != self.config.d_model {
            return Err(DecoderError::DimensionDisagreement {
                encoder: enc_d,
                decoder: self.config.d_model,
            });
        }
        if t == 0 || t > self.config.max_positions || label_mask.len() != t {
            return Err(NumericsError::ShapeMismatch {
                op: "decoder",
                detail: format!(
                    "{t} tokens, {} mask entries, {} positions",
                    label_mask.len(),
                    self.config.max_positions
                ),
            }
            .into());
        }
        if tape.value(enc_hidden).rows() != enc_mask.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "decoder",
                detail: format!(
                    "encoder rows {} vs mask {}",
                    tape.value(enc_hidden).rows(),
                    enc_mask.len()
                ),
            }
            .into());
        }
        let p = self.config.dropout;
        let self_mask = causal_mask(label_mask);
        let cross_mask = expand_mask(enc_mask);

        let we = tape.param(self.word_embed);
        let pe = tape.param(self.pos_embed);
        let words = tape.embed(we, tokens)?;
        let positions: Vec<u32> = (0..t as u32).collect();
        let pos = tape.embed(pe, &positions)?;
        let sum = tape.add(words, pos)?;
        let mut le = tape.dropout(sum, p, train, rng)?;

        for layer in &self.layers {
            let self_trace = trace.as_deref_mut().map(|t| &mut t.self_attention);
            let att = layer
                .self_attention
                .forward(tape, le, le, le, Some(&self_mask), self_trace)?;
            let r = tape.add(att, le)?;
            let n = layer.norm_query.forward(tape, r)?;
            let q = tape.dropout(n, p, train, rng)?;

            let cross_trace = trace.as_deref_mut().map(|t| &mut t.cross_attention);
            let c = layer
                .cross_attention
                .forward(tape, q, enc_hidden, enc_hidden, Some(&cross_mask), cross_trace)?;
            let c = tape.dropout(c, p, train, rng)?;
            let r = tape.add(q, c)?;
            let x = layer.norm_cross.forward(tape, r)?;
            let f = layer.ff.forward(tape, x)?;
            let f = tape.dropout(f, p, train, rng)?;
            let r = tape.add(x, f)?;
            le = layer.norm_ff.forward(tape, r)?;
        }
        Ok(self.output.forward(tape, le)?)
    }
}

const INIT_MANIFEST: &str = "manifest";
const INIT_VECTORS: &str = "vectors.bin";

#[derive(Serialize, Deserialize)]
struct InitManifest {
    d_model: usize,
    count: usize,
}

/// External label embeddings keyed by symbolic label (`[a_k]`).
///
/// Stored as a directory: a `manifest` with `d_model` and `count`, and
/// `vectors.bin` holding `count` records of `u16 name length, name bytes,
/// d_model f32`, little-endian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelInit {
    pub d_model: usize,
    pub vectors: HashMap<String, Vec<f32>>,
}

impl LabelInit {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DecoderError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = toml::to_string(&InitManifest {
            d_model: self.d_model,
            count: self.vectors.len(),
        })
        .map_err(|e| DecoderError::InitFile(e.to_string()))?;
        fs::write(dir.join(INIT_MANIFEST), manifest)?;
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        let mut w = BufWriter::new(File::create(dir.join(INIT_VECTORS))?);
        for k in keys {
            let v = &self.vectors[k];
            if v.len() != self.d_model {
                return Err(DecoderError::InitDimensionMismatch {
                    expected: self.d_model,
                    found: v.len(),
                });
            }
            let len = u16::try_from(k.len()).map_err(|_| DecoderError::InitFile(format!("name too long: {k}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(k.as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DecoderError> {
        let dir = dir.as_ref();
        let m: InitManifest = toml::from_str(&fs::read_to_string(dir.join(INIT_MANIFEST))?)
            .map_err(|e| DecoderError::InitFile(e.to_string()))?;
        let mut bytes = Vec::new();
        File::open(dir.join(INIT_VECTORS))?.read_to_end(&mut bytes)?;
        let truncated = || DecoderError::InitFile("truncated vectors file".into());
        let mut vectors = HashMap::with_capacity(m.count);
        let mut at = 0usize;
        for _ in 0..m.count {
            let len_bytes = bytes.get(at..at + 2).ok_or_else(truncated)?;
            let len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
            at += 2;
            let name = std::str::from_utf8(bytes.get(at..at + len).ok_or_else(truncated)?)
                .map_err(|e| DecoderError::InitFile(e.to_string()))?
                .to_string();
            at += len;
            let raw = bytes.get(at..at + 4 * m.d_model).ok_or_else(truncated)?;
            at += 4 * m.d_model;
            let v: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DecoderError::InitFile(format!("non-finite vector for {name}")));
            }
            vectors.insert(name, v);
        }
        if at != bytes.len() {
            return Err(DecoderError::InitFile("trailing bytes in vectors file".into()));
        }
        Ok(Self {
            d_model: m.d_model,
            vectors,
        })
    }
}
