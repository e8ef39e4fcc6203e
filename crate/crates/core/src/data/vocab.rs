//! Frequency-capped vocabulary over a lowercased whitespace + punctuation
//! tokenizer. The sampling math downstream is tokenizer-agnostic; this keeps
//! the pipeline dependency-free.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const CLS_ID: u32 = 3;
pub const SEP_ID: u32 = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_FORMS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<mask>", "<cls>", "<sep>"];

/// Lowercase, split on whitespace, break out punctuation as single-char
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                cur.push(lc);
            }
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Bijective token ↔ id map with the five specials at fixed low indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    /// Rank surface forms by frequency (ties broken lexicographically),
    /// keep at most `max_size - NUM_SPECIALS`, drop forms rarer than
    /// `min_freq`. Everything else maps to `<unk>`.
    pub fn build<I: IntoIterator<Item = S>, S: AsRef<str>>(
        corpus: I,
        max_size: usize,
        min_freq: usize,
    ) -> Result<Vocab> {
        if max_size <= NUM_SPECIALS {
            return Err(Error::Config(format!(
                "vocab max_size {max_size} leaves no room beyond {NUM_SPECIALS} specials"
            )));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        let mut saw_any = false;
        for line in corpus {
            for tok in tokenize(line.as_ref()) {
                saw_any = true;
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(Error::Data("cannot build vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, f)| *f >= min_freq.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_SPECIALS);
        Ok(Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    /// Rebuild from non-special tokens in id order (checkpoint or vocab file).
    pub fn from_tokens<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Vocab {
        let mut id_to_token: Vec<String> =
            SPECIAL_FORMS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens.into_iter().map(|t| t.into()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    /// Tokens after the specials, in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; specials appear as `#`-prefixed header lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for (i, form) in SPECIAL_FORMS.iter().enumerate() {
            writeln!(f, "# {i} {form}")?;
        }
        for tok in self.content_tokens() {
            writeln!(f, "{tok}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read vocab {}: {e}", path.display())))?;
        let tokens: Vec<String> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.is_empty())
            .map(|l| l.to_string())
            .collect();
        Ok(Vocab::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_wins() {
        // "a b b": b is more frequent, so it gets the smaller id.
        let v = Vocab::build(["a b b"], 10, 1).unwrap();
        assert!(v.id("b") < v.id("a"));
        assert_eq!(v.id("b"), NUM_SPECIALS as u32);
    }

    #[test]
    fn truncation_maps_rare_tokens_to_unk() {
        let v = Vocab::build(["a b b"], NUM_SPECIALS + 1, 1).unwrap();
        assert_eq!(v.size(), NUM_SPECIALS + 1);
        assert_eq!(v.id("b"), NUM_SPECIALS as u32);
        assert_eq!(v.id("a"), UNK_ID);
    }

    #[test]
    fn equal_frequency_breaks_ties_lexicographically() {
        let v = Vocab::build(["zeta alpha"], 10, 1).unwrap();
        assert!(v.id("alpha") < v.id("zeta"));
    }

    #[test]
    fn empty_corpus_is_an_ingestion_error() {
        let lines: [&str; 0] = [];
        assert!(Vocab::build(lines, 10, 1).is_err());
        assert!(Vocab::build(["   "], 10, 1).is_err());
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("Hello, World! x2"),
            vec!["hello", ",", "world", "!", "x2"]
        );
    }

    #[test]
    fn decode_encode_roundtrip_on_in_vocab_text() {
        let text = "the cat, sat.";
        let v = Vocab::build([text], 50, 1).unwrap();
        let normalized = tokenize(text).join(" ");
        assert_eq!(v.decode(&v.encode(text)), normalized);
    }

    #[test]
    fn specials_occupy_fixed_low_indices() {
        let v = Vocab::build(["x"], 10, 1).unwrap();
        assert_eq!(v.token(PAD_ID), "<pad>");
        assert_eq!(v.token(UNK_ID), "<unk>");
        assert_eq!(v.token(MASK_ID), "<mask>");
        assert_eq!(v.token(CLS_ID), "<cls>");
        assert_eq!(v.token(SEP_ID), "<sep>");
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = std::env::temp_dir().join("rtdlab_vocab_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        let v = Vocab::build(["gamma beta beta alpha alpha alpha"], 10, 1).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v, loaded);
    }

    #[test]
    fn min_freq_filters_singletons() {
        let v = Vocab::build(["a a b"], 10, 2).unwrap();
        assert_eq!(v.id("a"), NUM_SPECIALS as u32);
        assert_eq!(v.id("b"), UNK_ID);
    }
}
