//! The full classifier: hierarchy, vocabularies, resolved configuration and
//! encoder/decoder parameters, plus conversion of samples into training
//! examples.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::corpus::{Dataset, Sample};
use crate::decoder::{AttentionTrace, Decoder, LabelInit};
use crate::encoder::{tokenize_text, EncodedText, EncoderMode, PrecomputedStore, TextEncoder, TextVocab};
use crate::error::{Error, Result};
use crate::label_codec::{build_vocab, capacity_for_strategy, encode, LabelSequence, SymbolicVocab};
use crate::numerics::{Array, ParamStore, Tape, Var};
use crate::taxonomy::{LabelHierarchy, LabelSet};

/// SplitMix64 over a sequence of words; used to derive independent rng
/// streams from the run seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z = x ^ (x >> 31);
    }
    z
}

/// Encoder input for one sample.
#[derive(Clone, Debug)]
pub enum TextInput {
    Tokens { ids: Vec<u32>, mask: Vec<u8> },
    Encoded(Arc<EncodedText>),
}

/// A sample ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub input: TextInput,
    pub labels: LabelSet,
    pub target: LabelSequence,
}

impl Example {
    /// Teacher-forcing pair: inputs `seq[0..n-1]` and targets `seq[1..n]`,
    /// cut just after EOS. Positions past EOS only predict padding, which the
    /// loss ignores, and causality keeps them from affecting earlier ones.
    pub fn teacher_forcing(&self) -> (&[u32], &[u32]) {
        let active = self.target.active();
        (&active[..active.len() - 1], &active[1..])
    }
}

/// Encoder (absent for precomputed states) and decoder over one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: Option<TextEncoder>,
    pub decoder: Decoder,
}

impl Model {
    /// Builds parameters from a resolved config (all sizes filled in).
    pub fn new<R: Rng + ?Sized>(
        cfg: &RunConfig,
        rng: &mut R,
        label_init: Option<(&LabelInit, &SymbolicVocab)>,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = match cfg.encoder.mode {
            EncoderMode::Trainable => Some(TextEncoder::new(&mut store, &cfg.encoder, rng)?),
            EncoderMode::Precomputed => None,
        };
        let decoder = Decoder::new(&mut store, &cfg.decoder, rng, label_init)?;
        Ok(Self {
            store,
            encoder,
            decoder,
        })
    }

    /// Encoder output on `tape`, with its token mask.
    pub fn encode_on_tape<'p, R: Rng + ?Sized>(
        &'p self,
        tape: &mut Tape<'p>,
        input: &'p TextInput,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var, &'p [u8])> {
        match input {
            TextInput::Tokens { ids, mask } => {
                let enc = self
                    .encoder
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint("token input given to a precomputed-state model".into()))?;
                Ok((enc.forward(tape, ids, mask, train, rng)?, mask.as_slice()))
            }
            TextInput::Encoded(e) => Ok((tape.constant_ref(&e.hidden), e.mask.as_slice())),
        }
    }

    /// Teacher-forced logits `len(tokens) x vocab` for one sample.
    #[allow(clippy::too_many_arguments)]
    pub fn logits<'p, R: Rng + ?Sized>(
        &'p self,
        tape: &mut Tape<'p>,
        input: &'p TextInput,
        tokens: &[u32],
        train: bool,
        rng: &mut R,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let (h, mask) = self.encode_on_tape(tape, input, train, rng)?;
        let label_mask = vec![1u8; tokens.len()];
        Ok(self
            .decoder
            .forward(tape, tokens, &label_mask, h, mask, train, rng, trace)?)
    }

    /// Eval-mode encoder output, detached.
    pub fn encode(&self, input: &TextInput) -> Result<EncodedText> {
        match input {
            TextInput::Tokens { ids, mask } => {
                let enc = self
                    .encoder
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint("token input given to a precomputed-state model".into()))?;
                Ok(enc.encode(&self.store, ids, mask)?)
            }
            TextInput::Encoded(e) => Ok((**e).clone()),
        }
    }

    /// Eval-mode decoder logits for a label prefix.
    pub fn decoder_logits(
        &self,
        enc: &EncodedText,
        tokens: &[u32],
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Array> {
        let mut tape = Tape::with_params(&self.store);
        let h = tape.constant_ref(&enc.hidden);
        let label_mask = vec![1u8; tokens.len()];
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = self
            .decoder
            .forward(&mut tape, tokens, &label_mask, h, &enc.mask, false, &mut unused, trace)?;
        Ok(tape.value(out).clone())
    }
}

/// Everything needed to train, evaluate and predict.
#[derive(Clone, Debug)]
pub struct Classifier {
    /// Fully resolved: vocabulary sizes, positions and capacity are set.
    pub config: RunConfig,
    pub hierarchy: LabelHierarchy,
    pub vocab: SymbolicVocab,
    pub text_vocab: TextVocab,
    pub model: Model,
    precomputed: Option<PrecomputedStore>,
}

impl Classifier {
    /// Fresh classifier for `dataset`; sizes the vocabularies and sequence
    /// capacity from the data and initializes parameters from the run seed.
    pub fn build(config: &RunConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let h = dataset.hierarchy.clone();
        let text_vocab = match config.encoder.mode {
            EncoderMode::Trainable => TextVocab::build(
                dataset.train.iter().map(|s| s.text.as_str()),
                config.encoder.min_word_count,
                None,
            ),
            EncoderMode::Precomputed => TextVocab::from_words(vec!["<pad>".into(), "<unk-word>".into()]),
        };
        let needed = capacity_for_strategy(dataset.all_samples().map(|s| &s.labels), &h, config.codec.strategy)?;
        let mut resolved = config.clone();
        if resolved.codec.capacity == 0 {
            resolved.codec.capacity = needed;
        } else if resolved.codec.capacity < needed {
            return Err(crate::config::ConfigError::Invalid(format!(
                "codec.capacity {} is below the {needed} tokens the data needs",
                resolved.codec.capacity
            ))
            .into());
        }
        let label_init = match &config.data.label_init {
            Some(dir) => Some(LabelInit::load(dir)?),
            None => None,
        };
        resolved.encoder.vocab_size = text_vocab.len();
        resolved.decoder.vocab_size = h.len() + crate::label_codec::FIRST_LABEL as usize;
        if resolved.decoder.max_positions == 0 {
            resolved.decoder.max_positions = resolved.codec.capacity;
        }
        let vocab = build_vocab(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[resolved.train.seed, 0x1417]));
        let model = Model::new(&resolved, &mut rng, label_init.as_ref().map(|i| (i, &vocab)))?;
        Self::assemble(resolved, h, text_vocab, model)
    }

    /// Rebuilds from stored parts; parameters are freshly initialized and
    /// expected to be overwritten.
    pub fn from_parts(config: RunConfig, hierarchy: LabelHierarchy, text_vocab: TextVocab) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.train.seed, 0x1417]));
        let model = Model::new(&config, &mut rng, None)?;
        Self::assemble(config, hierarchy, text_vocab, model)
    }

    fn assemble(config: RunConfig, hierarchy: LabelHierarchy, text_vocab: TextVocab, model: Model) -> Result<Self> {
        let precomputed = match (&config.encoder.mode, &config.data.precomputed) {
            (EncoderMode::Precomputed, Some(dir)) => {
                let store = PrecomputedStore::open(dir)?;
                if store.d_model != config.decoder.d_model {
                    return Err(crate::decoder::DecoderError::DimensionDisagreement {
                        encoder: store.d_model,
                        decoder: config.decoder.d_model,
                    }
                    .into());
                }
                Some(store)
            }
            _ => None,
        };
        Ok(Self {
            vocab: build_vocab(&hierarchy),
            config,
            hierarchy,
            text_vocab,
            model,
            precomputed,
        })
    }

    pub fn capacity(&self) -> usize {
        self.config.codec.capacity
    }

    /// Encoder input for a sample (tokenized text or its stored state).
    pub fn input_for(&self, id: &str, text: &str) -> Result<TextInput> {
        match &self.precomputed {
            Some(store) => Ok(TextInput::Encoded(Arc::new(store.get(id)?))),
            None => {
                let t = tokenize_text(text, &self.text_vocab, self.config.encoder.max_len);
                Ok(TextInput::Tokens {
                    ids: t.ids,
                    mask: t.mask,
                })
            }
        }
    }

    /// Converts samples into examples. `salt` separates the permutation
    /// streams of different splits under the shuffled ordering.
    pub fn prepare(&self, samples: &[Sample], salt: u64) -> Result<Vec<Example>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.train.seed, 0x5EC, salt]));
        samples
            .iter()
            .map(|s| {
                let target = encode(
                    &s.labels,
                    &self.hierarchy,
                    &self.vocab,
                    self.config.codec.strategy,
                    self.capacity(),
                    &mut rng,
                )?;
                Ok(Example {
                    id: s.id.clone(),
                    input: self.input_for(&s.id, &s.text)?,
                    labels: s.labels.clone(),
                    target,
                })
            })
            .collect()
    }
}
