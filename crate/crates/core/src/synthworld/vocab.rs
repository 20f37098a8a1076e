use std::collections::HashMap;

use crate::encoder::config::NUM_SPECIAL;
use crate::encoder::TextInput;
use crate::error::{Error, Result};

pub const SPECIALS: [&str; NUM_SPECIAL] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]"];

/// Every word any generator can emit.
const WORDS: &[&str] = &[
    // colors and shapes
    "red", "green", "blue", "yellow", "square", "circle", "triangle", "star", // counts
    "one", "two", "three", "four", "five", "six", // layout and relations
    "shape", "shapes", "left", "right", "of", "above", "below", "on", "the", "at", "top", "bottom", "in", "center", "across",
    "canvas", "there", "is", "are", // questions and statements
    "what", "color", "how", "many", "a", "object", "?", "both", "images", "contain", "yes", "no",
];

/// Closed answer set shared by the QA pre-training task and VQA fine-tuning.
pub const ANSWERS: [&str; 16] = [
    "red", "green", "blue", "yellow", "square", "circle", "triangle", "star", "one", "two", "three", "four", "five", "six",
    "yes", "no",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn standard() -> Self {
        let tokens = SPECIALS.iter().chain(WORDS).map(|s| s.to_string()).collect();
        Vocab::from_tokens(tokens).expect("static vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIALS {
            return Err(Error::invalid("Vocab", "special tokens must come first"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid("Vocab", format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Generation(format!("out-of-vocabulary token {word:?}")))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, words: &[&str]) -> Result<TextInput> {
        let ids = words.iter().map(|w| self.id(w)).collect::<Result<Vec<_>>>()?;
        Ok(TextInput::from_words(&ids))
    }

    /// Token strings including [CLS]/[SEP].
    pub fn decode(&self, text: &TextInput) -> Vec<String> {
        text.token_ids
            .iter()
            .map(|&i| self.tokens.get(i).cloned().unwrap_or_else(|| format!("<{i}>")))
            .collect()
    }

    pub fn answer_id(answer: &str) -> Option<usize> {
        ANSWERS.iter().position(|a| *a == answer)
    }

    /// Serializes as `{"tokens": [...], "answers": [...]}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "tokens": self.tokens, "answers": ANSWERS })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_value(v["tokens"].clone())?;
        let answers: Vec<String> = serde_json::from_value(v["answers"].clone())?;
        if answers != ANSWERS {
            return Err(Error::invalid("Vocab", "answer set differs from this build"));
        }
        Vocab::from_tokens(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_are_in_vocab() {
        let v = Vocab::standard();
        for a in ANSWERS {
            v.id(a).unwrap();
        }
        assert_eq!(v.id("[CLS]").unwrap(), crate::encoder::config::CLS);
        assert_eq!(v.id("[MASK]").unwrap(), crate::encoder::config::MASK);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::standard();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
        assert!(v.id("zebra").is_err());
    }
}
