//! Stand-in text encoder mapping descriptions to unit embeddings.

use std::collections::HashMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{l2_normalize, Vector};
use crate::error::{Error, Result};
use crate::io;
use crate::llm::{seeded_rng_for, split_features};

#[derive(Debug, Clone)]
pub enum EncoderMode {
    /// Embeddings looked up from a description -> vector table.
    FileBacked(HashMap<String, Vector>),
    /// Seeded Gaussian direction derived from a hash of the text.
    DeterministicStub { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    mode: EncoderMode,
    dim: usize,
}

impl TextEncoder {
    pub fn stub(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSetting("encoder dimension must be positive".into()));
        }
        Ok(TextEncoder {
            mode: EncoderMode::DeterministicStub { seed },
            dim,
        })
    }

    pub fn from_table(table: HashMap<String, Vector>) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(Vector::dim)
            .ok_or_else(|| Error::EmptyInput("embedding table is empty".into()))?;
        for v in table.values() {
            if v.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: v.dim(),
                });
            }
        }
        Ok(TextEncoder {
            mode: EncoderMode::FileBacked(table),
            dim,
        })
    }

    /// Loads a JSON object mapping description to float array.
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_table(io::read_json(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> &EncoderMode {
        &self.mode
    }

    pub fn encode(&self, desc: &str) -> Result<Vector> {
        if desc.trim().is_empty() {
            return Err(Error::EmptyInput("description is empty".into()));
        }
        match &self.mode {
            EncoderMode::FileBacked(table) => table
                .get(desc)
                .ok_or_else(|| Error::UnknownDescription(desc.to_owned()))
                .and_then(l2_normalize),
            EncoderMode::DeterministicStub { seed } => {
                let mut rng = seeded_rng_for(desc, *seed);
                let raw: Vec<f64> = (0..self.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                l2_normalize(&Vector::new(raw)?)
            }
        }
    }

    /// Embedding of a possibly multi-feature answer: the re-normalized mean
    /// of the per-feature embeddings.
    pub fn encode_answer(&self, text: &str) -> Result<Vector> {
        let features = split_features(text);
        if features.is_empty() {
            return Err(Error::EmptyInput("answer has no text".into()));
        }
        let embeddings = features
            .iter()
            .map(|f| self.encode(f))
            .collect::<Result<Vec<_>>>()?;
        l2_normalize(&Vector::mean(&embeddings)?)
    }
}

pub fn encode_text(desc: &str, enc: &TextEncoder) -> Result<Vector> {
    enc.encode(desc)
}
