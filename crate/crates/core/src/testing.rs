//! Test-side oracles and fixtures.
//!
//! The finite-difference gradient check lives here so unit tests, property
//! tests and the acceptance suite all use the same independent oracle: it
//! only ever calls forward evaluations, never the tape's backward pass.

use crate::rng::{derive_stream, RngState, Stream};

/// Central finite differences: `df/dx_i ≈ (f(x+h·e_i) - f(x-h·e_i)) / 2h`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Worst-coordinate relative error between an analytic gradient and its
/// finite-difference estimate. The denominator is floored so near-zero
/// coordinates compare absolutely.
pub fn grad_max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Uniform values in [lo, hi) for test inputs.
pub fn random_values(rng: &mut RngState, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect()
}

/// Knobs for [`synth_corpus`]. The grammar mixes fully determined word pairs
/// (a masked second word is predictable with near certainty) with slot
/// phrases whose filler is uniform over `slot_width` choices, so a trained
/// MLM sees both easy and genuinely uncertain positions.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub det_pairs: usize,
    pub slot_families: usize,
    pub slot_width: usize,
    pub phrases_per_sentence: std::ops::Range<usize>,
    pub sentences: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            det_pairs: 30,
            slot_families: 20,
            slot_width: 5,
            phrases_per_sentence: 6..12,
            sentences: 2000,
        }
    }
}

impl SynthSpec {
    /// Small enough for exhaustive-discriminator analyses (vocab ≤ 64 with
    /// specials included).
    pub fn tiny_vocab() -> Self {
        SynthSpec {
            det_pairs: 10,
            slot_families: 5,
            slot_width: 4,
            phrases_per_sentence: 6..12,
            sentences: 1200,
        }
    }

    pub fn word_types(&self) -> usize {
        self.det_pairs * 2 + self.slot_families * (1 + self.slot_width)
    }
}

/// Deterministic synthetic corpus, one document per line.
///
/// Phrase inventory: `det_pairs` word pairs `(da_i, db_i)` where `db_i`
/// always follows `da_i`, plus `slot_families` heads `sh_j` followed by one
/// of `slot_width` fillers chosen uniformly. Phrase identity is drawn from a
/// Zipf-like ranking so token frequencies are skewed like natural text.
pub fn synth_corpus(seed: u64, spec: &SynthSpec) -> String {
    let mut rng = RngState::for_stream(seed, Stream::Analysis, &[derive_stream(&[0x5e_ed])]);
    let n_phrases = spec.det_pairs + spec.slot_families;
    // Zipf weights over phrase families.
    let weights: Vec<f64> = (0..n_phrases).map(|r| 1.0 / (r + 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let mut out = String::new();
    for _ in 0..spec.sentences {
        let len = spec.phrases_per_sentence.start
            + rng.below(spec.phrases_per_sentence.end - spec.phrases_per_sentence.start);
        let mut words: Vec<String> = Vec::new();
        for _ in 0..len {
            let fam = rng.categorical(&probs);
            if fam < spec.det_pairs {
                words.push(format!("da{fam:02}"));
                words.push(format!("db{fam:02}"));
            } else {
                let j = fam - spec.det_pairs;
                words.push(format!("sh{j:02}"));
                words.push(format!("sf{j:02}x{}", rng.below(spec.slot_width)));
            }
        }
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_matches_analytic_on_quadratic() {
        // f(x) = sum(x^2), grad = 2x
        let x = [1.0, -2.0, 0.5];
        let fd = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &x, 1e-5);
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(grad_max_rel_err(&analytic, &fd) < 1e-8);
    }

    #[test]
    fn synth_corpus_is_deterministic() {
        let spec = SynthSpec::default();
        assert_eq!(synth_corpus(7, &spec), synth_corpus(7, &spec));
        assert_ne!(synth_corpus(7, &spec), synth_corpus(8, &spec));
    }

    #[test]
    fn tiny_vocab_fits_exhaustive_analysis() {
        let spec = SynthSpec::tiny_vocab();
        assert!(spec.word_types() + 5 <= 64, "{}", spec.word_types());
    }
}
