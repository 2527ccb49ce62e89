//! Checkpoint directories.
//!
//! ```text
//! manifest            TOML: versions, resolved config, vocabulary hash,
//!                     parameter list, epoch, seed, training state
//! taxonomy.tsv        hierarchy, ids preserved
//! label_map.tsv       symbolic token -> label name
//! text_vocab.txt      one word per line, in id order
//! params/<name>.f32   raw little-endian values
//! optim/<name>.m.f32  first moments (training checkpoints only)
//! optim/<name>.v.f32  second moments
//! ```
//!
//! A checkpoint is written to a sibling temporary directory and renamed into
//! place, so an interrupted save never leaves a half-written checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamW, TrainState};
use crate::config::RunConfig;
use crate::encoder::TextVocab;
use crate::error::{Error, Result};
use crate::label_codec::SymbolicVocab;
use crate::model::Classifier;
use crate::numerics::Array;
use crate::taxonomy::LabelHierarchy;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest";
const TAXONOMY: &str = "taxonomy.tsv";
const LABEL_MAP: &str = "label_map.tsv";
const TEXT_VOCAB: &str = "text_vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    crate_version: String,
    epoch: u32,
    seed: u64,
    vocab_fingerprint: String,
    label_count: usize,
    params: Vec<ParamEntry>,
    optimizer_steps: Option<[u64; 2]>,
    config: RunConfig,
    state: Option<TrainState>,
}

/// A loaded checkpoint. `training` is present for checkpoints written
/// during training.
pub struct Checkpoint {
    pub classifier: Classifier,
    pub training: Option<(TrainState, AdamW)>,
}

fn write_blob(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(Error::io(path))
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    dir.with_file_name(name)
}

/// Writes `clf` (and optionally its training state) to `dir`, replacing any
/// previous checkpoint there.
pub fn save(dir: &Path, clf: &Classifier, training: Option<(&TrainState, &AdamW)>) -> Result<()> {
    let tmp = tmp_sibling(dir);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(Error::io(&tmp))?;
    }
    let params_dir = tmp.join("params");
    std::fs::create_dir_all(&params_dir).map_err(Error::io(&params_dir))?;
    let store = &clf.model.store;
    for (_, p) in store.iter() {
        write_blob(&params_dir.join(format!("{}.f32", p.name)), p.value.data())?;
    }
    if let Some((_, opt)) = training {
        let optim_dir = tmp.join("optim");
        std::fs::create_dir_all(&optim_dir).map_err(Error::io(&optim_dir))?;
        for (id, p) in store.iter() {
            write_blob(&optim_dir.join(format!("{}.m.f32", p.name)), &opt.m[id.0])?;
            write_blob(&optim_dir.join(format!("{}.v.f32", p.name)), &opt.v[id.0])?;
        }
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        epoch: training.map_or(0, |(s, _)| s.epoch),
        seed: clf.config.train.seed,
        vocab_fingerprint: clf.vocab.fingerprint(),
        label_count: clf.hierarchy.len(),
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        optimizer_steps: training.map(|(_, o)| o.steps),
        config: clf.config.clone(),
        state: training.map(|(s, _)| s.clone()),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let files = [
        (MANIFEST, text),
        (TAXONOMY, clf.hierarchy.to_tsv()),
        (LABEL_MAP, clf.vocab.label_map()),
        (
            TEXT_VOCAB,
            clf.text_vocab.words().iter().map(|w| format!("{w}\n")).collect(),
        ),
    ];
    for (name, body) in files {
        let p = tmp.join(name);
        std::fs::write(&p, body).map_err(Error::io(&p))?;
    }
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::rename(&tmp, dir).map_err(Error::io(dir))
}

/// Reads a checkpoint written by [`save`].
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(Error::io(&p))
    };
    let manifest: Manifest =
        toml::from_str(&read(MANIFEST)?).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            manifest.format
        )));
    }
    let hierarchy = LabelHierarchy::parse(&read(TAXONOMY)?)?;
    let stored_vocab = SymbolicVocab::parse_label_map(&read(LABEL_MAP)?)?;
    if stored_vocab.fingerprint() != manifest.vocab_fingerprint {
        return Err(Error::Checkpoint(
            "label map does not match the manifest fingerprint".into(),
        ));
    }
    let text_vocab = TextVocab::from_words(read(TEXT_VOCAB)?.lines().map(str::to_string).collect());
    let mut classifier = Classifier::from_parts(manifest.config.clone(), hierarchy, text_vocab)?;
    if classifier.vocab.fingerprint() != manifest.vocab_fingerprint {
        return Err(Error::Checkpoint("taxonomy does not match the stored label map".into()));
    }
    let store = &mut classifier.model.store;
    if store.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for entry in &manifest.params {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", entry.name)))?;
        let p = store.get_mut(id);
        if p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                p.value.shape()
            )));
        }
        let data = read_blob(&dir.join("params").join(format!("{}.f32", entry.name)), p.value.len())?;
        p.value = Array::new(entry.shape.clone(), data)?;
    }
    let training = match (manifest.state, manifest.optimizer_steps) {
        (Some(state), Some(steps)) => {
            let mut opt = AdamW::new(store, manifest.config.train.optimizer.clone());
            opt.steps = steps;
            for (id, p) in store.iter() {
                let optim = dir.join("optim");
                opt.m[id.0] = read_blob(&optim.join(format!("{}.m.f32", p.name)), p.value.len())?;
                opt.v[id.0] = read_blob(&optim.join(format!("{}.v.f32", p.name)), p.value.len())?;
            }
            Some((state, opt))
        }
        _ => None,
    };
    Ok(Checkpoint { classifier, training })
}
