use thiserror::Error;

use crate::config::ConfigError;
use crate::corpus::CorpusError;
use crate::decoder::DecoderError;
use crate::encoder::EncoderError;
use crate::eval::EvalError;
use crate::label_codec::CodecError;
use crate::loss::LossError;
use crate::numerics::NumericsError;
use crate::taxonomy::TaxonomyError;
use crate::trainer::TrainError;

/// Any failure surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
