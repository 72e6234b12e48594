use std::fmt;

use ragcap_core::corpus::CorpusError;
use ragcap_core::index::IndexError;
use ragcap_core::metrics::MetricsError;
use ragcap_core::model::ModelError;
use ragcap_core::retriever::RetrievalError;
use serde::Serialize;

/// A failed command. `input` failures exit with 2, everything else with 1.
#[derive(Debug)]
pub struct Failure {
    pub input: bool,
    pub code: &'static str,
    pub detail: String,
}

#[derive(Serialize)]
struct Wire<'a> {
    error: &'a str,
    detail: &'a str,
}

impl Failure {
    pub fn input(code: &'static str, detail: impl fmt::Display) -> Self {
        Self { input: true, code, detail: detail.to_string() }
    }

    pub fn runtime(code: &'static str, detail: impl fmt::Display) -> Self {
        Self { input: false, code, detail: detail.to_string() }
    }

    pub fn exit_code(&self) -> u8 {
        if self.input {
            2
        } else {
            1
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Wire { error: self.code, detail: &self.detail }).expect("error serializes")
    }
}

impl From<IndexError> for Failure {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::FormatVersionMismatch(_) | IndexError::ChecksumMismatch { .. } | IndexError::Corrupt { .. } => {
                Failure::input("format_error", e)
            }
            IndexError::Io(_) => Failure::input("io_error", e),
            IndexError::DimensionMismatch { .. }
            | IndexError::DuplicateId(_)
            | IndexError::EmptyCorpus
            | IndexError::InvalidConfig(_)
            | IndexError::InvalidK => Failure::input("invalid_input", e),
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        match &e {
            CorpusError::Io(_) => Failure::input("io_error", e),
            CorpusError::EmptyCorpus | CorpusError::MissingCaptionEmbeddings | CorpusError::InvalidParameters(_) => {
                Failure::input("invalid_input", e)
            }
            _ if e.is_format_error() => Failure::input("format_error", e),
            _ => Failure::input("invalid_input", e),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match &e {
            _ if e.is_format_error() => Failure::input("format_error", e),
            ModelError::Io(_) => Failure::input("io_error", e),
            ModelError::InvalidConfig(_) | ModelError::InvalidTraining(_) => Failure::input("invalid_input", e),
            ModelError::NonFiniteLoss { .. } => Failure::runtime("non_finite_loss", e),
            _ => Failure::runtime("model_error", e),
        }
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Index(i) => i.into(),
            RetrievalError::Io(_) => Failure::runtime("io_error", e),
            _ => Failure::input("invalid_input", e),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::input("invalid_input", e)
    }
}
