//! Corpus ingestion, vocabulary, MLM masking and deterministic batching.

mod batch;
mod mask;
mod vocab;

pub use batch::{epoch_batches, prepare_example, shuffled_batches, Batch, BatchConfig, PaddedExample};
pub use mask::{mask_sequence, replace, MaskedExample};
pub use vocab::{tokenize, Vocab, CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID, UNK_ID};

use crate::error::{Error, Result};
use std::path::Path;

/// Read a corpus file: UTF-8 plain text, one document per line. Blank lines
/// are dropped.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    let lines: Vec<String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.to_string())
        .collect();
    if lines.is_empty() {
        return Err(Error::Data(format!(
            "corpus {} contains no documents",
            path.display()
        )));
    }
    Ok(lines)
}
