//! Deterministic batching: epoch-keyed shuffle, truncate/pad to a fixed
//! length, per-example masking on its own RNG substream.
//!
//! Batch production is stateless given `(seed, epoch)`: the trainer can
//! resume mid-run and regenerate exactly the batches it would have seen.

use super::mask::{mask_sequence, MaskedExample};
use super::vocab::PAD_ID;
use crate::error::{Error, Result};
use crate::rng::{RngState, Stream};

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub max_len: usize,
    pub mask_frac: f64,
    pub ngram_max: usize,
}

/// A masked example padded to `max_len`. Positions at or beyond `n_real` are
/// `<pad>` and carry the attention-exclusion flag.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedExample {
    pub x: Vec<u32>,
    pub c: Vec<u32>,
    pub m: Vec<usize>,
    pub n_real: usize,
}

impl PaddedExample {
    pub fn is_pad(&self, pos: usize) -> bool {
        pos >= self.n_real
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<PaddedExample>,
}

impl Batch {
    /// Total masked positions across the batch.
    pub fn total_masked(&self) -> usize {
        self.examples.iter().map(|e| e.m.len()).sum()
    }

    /// Total non-pad positions across the batch.
    pub fn total_real(&self) -> usize {
        self.examples.iter().map(|e| e.n_real).sum()
    }
}

/// Deterministic shuffle of `0..n_examples` chunked into batches.
pub fn shuffled_batches(
    n_examples: usize,
    batch_size: usize,
    rng: &mut RngState,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n_examples).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Truncate to `max_len`, mask, pad. The mask RNG is supplied by the caller
/// so each (epoch, example) pair owns an independent substream.
pub fn prepare_example(
    seq: &[u32],
    cfg: &BatchConfig,
    mask_rng: &mut RngState,
) -> Result<PaddedExample> {
    let truncated = &seq[..seq.len().min(cfg.max_len)];
    let MaskedExample { x, m, c } =
        mask_sequence(truncated, cfg.mask_frac, cfg.ngram_max, mask_rng)?;
    let mut x = x;
    let mut c = c;
    x.resize(cfg.max_len, PAD_ID);
    c.resize(cfg.max_len, PAD_ID);
    Ok(PaddedExample {
        x,
        c,
        m,
        n_real: truncated.len(),
    })
}

/// All batches for one epoch. Examples too short for their mask budget are
/// skipped and counted rather than failing the stream.
pub fn epoch_batches(
    seqs: &[Vec<u32>],
    cfg: &BatchConfig,
    seed: u64,
    epoch: u64,
) -> Result<(Vec<Batch>, usize)> {
    let mut order_rng = RngState::for_stream(seed, Stream::Batching, &[epoch]);
    let index_batches = shuffled_batches(seqs.len(), cfg.batch_size, &mut order_rng);

    let mut skipped = 0usize;
    let mut batches = Vec::new();
    let mut current: Vec<PaddedExample> = Vec::with_capacity(cfg.batch_size);
    for batch_idx in index_batches {
        for idx in batch_idx {
            let mut mask_rng = RngState::for_stream(seed, Stream::Masking, &[epoch, idx as u64]);
            match prepare_example(&seqs[idx], cfg, &mut mask_rng) {
                Ok(ex) => {
                    current.push(ex);
                    if current.len() == cfg.batch_size {
                        batches.push(Batch {
                            examples: std::mem::take(&mut current),
                        });
                    }
                }
                Err(Error::Degenerate(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    if !current.is_empty() {
        batches.push(Batch { examples: current });
    }
    if batches.is_empty() {
        return Err(Error::Data(
            "no usable examples: every sequence was shorter than its mask budget".into(),
        ));
    }
    Ok((batches, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BatchConfig {
        BatchConfig {
            batch_size: 4,
            max_len: 12,
            mask_frac: 0.15,
            ngram_max: 1,
        }
    }

    fn seqs(n: usize) -> Vec<Vec<u32>> {
        (0..n)
            .map(|i| (0..10).map(|j| 10 + ((i + j) % 50) as u32).collect())
            .collect()
    }

    #[test]
    fn ten_examples_batch_four_gives_4_4_2() {
        let mut rng = RngState::new(3, Stream::Batching);
        let b = shuffled_batches(10, 4, &mut rng);
        let sizes: Vec<usize> = b.iter().map(|x| x.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_order() {
        let a = epoch_batches(&seqs(17), &cfg(), 11, 0).unwrap();
        let b = epoch_batches(&seqs(17), &cfg(), 11, 0).unwrap();
        assert_eq!(a.0, b.0);
        let c = epoch_batches(&seqs(17), &cfg(), 12, 0).unwrap();
        assert_ne!(a.0, c.0, "different seed should reorder");
    }

    #[test]
    fn different_epochs_reshuffle() {
        let a = epoch_batches(&seqs(17), &cfg(), 11, 0).unwrap();
        let b = epoch_batches(&seqs(17), &cfg(), 11, 1).unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn padding_fills_to_max_len() {
        let (batches, skipped) = epoch_batches(&seqs(5), &cfg(), 7, 0).unwrap();
        assert_eq!(skipped, 0);
        for b in &batches {
            for ex in &b.examples {
                assert_eq!(ex.x.len(), 12);
                assert_eq!(ex.c.len(), 12);
                assert_eq!(ex.n_real, 10);
                for p in ex.n_real..12 {
                    assert_eq!(ex.x[p], PAD_ID);
                    assert!(ex.is_pad(p));
                }
                for &mp in &ex.m {
                    assert!(mp < ex.n_real, "mask inside the real span");
                }
            }
        }
    }

    #[test]
    fn short_sequences_are_skipped_and_counted() {
        let mut s = seqs(6);
        s.push(vec![42]); // k >= n for this one
        let (batches, skipped) = epoch_batches(&s, &cfg(), 7, 0).unwrap();
        assert_eq!(skipped, 1);
        let total: usize = batches.iter().map(|b| b.examples.len()).sum();
        assert_eq!(total, 6);
    }

    #[test]
    fn truncation_applies_before_masking() {
        let long: Vec<Vec<u32>> = vec![(0..100).map(|i| 10 + i as u32).collect()];
        let (batches, _) = epoch_batches(&long, &cfg(), 7, 0).unwrap();
        let ex = &batches[0].examples[0];
        assert_eq!(ex.n_real, 12);
        assert_eq!(ex.m.len(), 2); // ceil(0.15 * 12)
    }
}
