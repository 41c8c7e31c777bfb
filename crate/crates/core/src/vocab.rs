//! Fixed toy vocabulary and whitespace tokenizer for questions and answers.

use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const YES: usize = 2;
pub const NO: usize = 3;

/// The two tokens greedy decoding is restricted to.
pub const ANSWER_TOKENS: [usize; 2] = [YES, NO];

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Vocab {
    /// The fixed word list shared by the question templates, the answers,
    /// and the decoder pretraining corpus.
    pub fn toy() -> Self {
        let words: Vec<&'static str> = vec![
            "<pad>",
            "<unk>",
            "yes",
            "no",
            "is",
            "there",
            "a",
            "person-like",
            "warm",
            "object",
            "objects",
            "light",
            "source",
            "?",
            "are",
            "at",
            "least",
            "one",
            "two",
            "three",
            "in",
            "the",
            "scene",
            "image",
            "thermal",
            "visible",
            "bright",
            "dark",
            "cold",
            "night",
            "camera",
            "cameras",
            "measure",
            "heat",
            "sensors",
            "detect",
            "people",
            "and",
            "glow",
            "faintly",
            "shadows",
            "hide",
            "shapes",
            "lamps",
            "emit",
            "rain",
            "clouds",
            "cover",
            "sky",
            "stars",
            "fog",
            "drifts",
            "over",
            "fields",
            "quiet",
            "streets",
            "sleep",
            "deeply",
        ];
        let index = words.iter().enumerate().map(|(i, &w)| (w, i)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).copied().unwrap_or("<unk>")
    }

    /// Lowercase, split on whitespace, peel trailing `?`/`.`/`,` into their
    /// own tokens; unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            let mut chunk = lower.as_str();
            let mut trailing = Vec::new();
            while let Some(last) = chunk.chars().last() {
                if matches!(last, '?' | '.' | ',' | '!') {
                    trailing.push(last);
                    chunk = &chunk[..chunk.len() - last.len_utf8()];
                } else {
                    break;
                }
            }
            if !chunk.is_empty() {
                ids.push(self.id(chunk).unwrap_or(UNK));
            }
            for p in trailing.iter().rev() {
                ids.push(self.id(&p.to_string()).unwrap_or(UNK));
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_ids_are_stable() {
        let v = Vocab::toy();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("yes"), Some(YES));
        assert_eq!(v.id("no"), Some(NO));
        assert!(v.len() <= 64);
    }

    #[test]
    fn tokenize_templates_without_unknowns() {
        let v = Vocab::toy();
        let ids = v.tokenize("Is there a person-like warm object?");
        assert!(!ids.contains(&UNK));
        assert_eq!(v.decode(&ids), "is there a person-like warm object ?");
        let ids2 = v.tokenize("are there at least two person-like warm objects ?");
        assert!(!ids2.contains(&UNK));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::toy();
        let ids = v.tokenize("is there a zebra?");
        assert!(ids.contains(&UNK));
    }
}
