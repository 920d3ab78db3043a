//! Pluggable tokenization.
//!
//! Models and the corpus loader only see the [`Tokenizer`] trait. The
//! shipped implementation is a whitespace + lowercase word tokenizer whose
//! vocabulary is fitted on a corpus; anything unseen maps to `<unk>`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const ESP: TokenId = 3;
pub const SEP: TokenId = 4;
pub const BOS: TokenId = 5;
pub const EOS: TokenId = 6;
/// Marker tokens for the three topic-transfer intents, used when intent
/// labels are spliced into a classifier input sequence.
pub const TI_MINING: TokenId = 7;
pub const TI_STARTING: TokenId = 8;
pub const TI_FOLLOWING: TokenId = 9;

pub const NUM_SPECIALS: usize = 10;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = [
    "<pad>", "<unk>", "<cls>", "<esp>", "<sep>", "<bos>", "<eos>", "<ti_mining>", "<ti_starting>",
    "<ti_following>",
];

pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, tokens: &[TokenId]) -> String;
    fn vocab_size(&self) -> usize;

    /// Like `encode` but never empty: whitespace-only input becomes a
    /// single `<unk>`.
    fn encode_nonempty(&self, text: &str) -> Vec<TokenId> {
        let toks = self.encode(text);
        if toks.is_empty() {
            vec![UNK]
        } else {
            toks
        }
    }

    /// Stable identity of the vocabulary. Perplexity values are only
    /// comparable between runs whose hashes match.
    fn identity_hash(&self) -> String;
}

/// Whitespace + lowercase word-level tokenizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WordTokenizer {
    word_to_id: BTreeMap<String, TokenId>,
    id_to_word: Vec<String>,
}

impl WordTokenizer {
    /// Build a vocabulary from an iterator of texts. Word ids are assigned
    /// in sorted order after the reserved specials, so fitting is
    /// independent of text order.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: BTreeMap<String, ()> = BTreeMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                words.entry(w.to_lowercase()).or_insert(());
            }
        }
        let mut id_to_word: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        let mut word_to_id = BTreeMap::new();
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            word_to_id.insert(name.to_string(), i as TokenId);
        }
        for w in words.into_keys() {
            if word_to_id.contains_key(&w) {
                continue;
            }
            word_to_id.insert(w.clone(), id_to_word.len() as TokenId);
            id_to_word.push(w);
        }
        WordTokenizer {
            word_to_id,
            id_to_word,
        }
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.id_to_word[id as usize]
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| {
                self.word_to_id
                    .get(&w.to_lowercase())
                    .copied()
                    .unwrap_or(UNK)
            })
            .collect()
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != PAD && t != BOS && t != EOS)
            .map(|&t| {
                self.id_to_word
                    .get(t as usize)
                    .map(|s| s.as_str())
                    .unwrap_or("<unk>")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.id_to_word.len()
    }

    fn identity_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for w in &self.id_to_word {
            hasher.update(w.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Marker token for a topic-transfer intent label.
pub fn intent_token(intent: crate::corpus::TopicIntent) -> TokenId {
    use crate::corpus::TopicIntent::*;
    match intent {
        MiningInitial => TI_MINING,
        StartingNew => TI_STARTING,
        FollowingNew => TI_FOLLOWING,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_encode_decode() {
        let tok = WordTokenizer::fit(["the cat sat", "the dog RAN"]);
        let ids = tok.encode("The dog sat");
        assert_eq!(ids.len(), 3);
        assert_eq!(tok.decode(&ids), "the dog sat");
        assert_eq!(tok.encode("zebra"), vec![UNK]);
        assert!(tok.vocab_size() >= NUM_SPECIALS + 5);
    }

    #[test]
    fn encode_nonempty_pads_unk() {
        let tok = WordTokenizer::fit(["a"]);
        assert_eq!(tok.encode_nonempty("   "), vec![UNK]);
        assert_eq!(tok.encode("   "), Vec::<TokenId>::new());
    }

    #[test]
    fn fit_order_independent() {
        let a = WordTokenizer::fit(["x y", "z w"]);
        let b = WordTokenizer::fit(["z w", "x y"]);
        assert_eq!(a.identity_hash(), b.identity_hash());
    }

    #[test]
    fn hash_changes_with_vocab() {
        let a = WordTokenizer::fit(["x y"]);
        let b = WordTokenizer::fit(["x y z"]);
        assert_ne!(a.identity_hash(), b.identity_hash());
    }
}
