use std::collections::HashMap;

use crate::dist::TokenId;

pub(crate) const EOS: TokenId = 0;
pub(crate) const UNK: TokenId = 1;

const PUNCTUATION: &[&str] = &[".", ",", "?", "!", ":", ";", "<", ">", "(", ")", "-", "'", "\""];

/// Words understood by the mock backends' tokenizer: the synthetic-task
/// templates plus a small pool of filler words.
const BUILTIN_WORDS: &[&str] = &[
    "the", "magic", "number", "is", "mentioned", "in", "provided", "text", "line", "register_content",
    "what", "tell", "me", "answer", "question", "a", "an", "of", "and", "to", "that", "it", "was",
    "for", "on", "with", "as", "at", "by", "from", "this", "be", "are", "or", "had", "not", "but",
    "they", "his", "her", "she", "he", "we", "you", "one", "all", "there", "when", "which", "their",
    "said", "would", "could", "time", "about", "into", "after", "before", "people", "city", "river",
    "story", "report", "government", "year", "new", "old", "first", "last", "long", "short", "small",
    "large", "house", "road", "water", "light", "night", "day", "morning", "north", "south", "king",
    "queen", "ship", "sea", "field", "stone", "book", "letter", "name", "place", "word", "world",
];

/// Word-level tokenizer with a fixed, invertible vocabulary.
///
/// Ids 0 and 1 are `<eos>` and `<unk>`, ids 2..=11 the ten digits (every
/// digit is its own token), then punctuation, then lowercase words. Ids past
/// the vocabulary render as `<id>`.
#[derive(Debug, Clone)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl WordVocab {
    pub const EOS: TokenId = EOS;
    pub const UNK: TokenId = UNK;

    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        vocab.push("<eos>");
        vocab.push("<unk>");
        for d in 0..10 {
            vocab.push(&d.to_string());
        }
        for p in PUNCTUATION {
            vocab.push(p);
        }
        for w in words {
            vocab.push(&w.as_ref().to_lowercase());
        }
        vocab
    }

    pub fn builtin() -> Self {
        Self::new(BUILTIN_WORDS)
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.words.len() as TokenId);
            self.words.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(&word.to_lowercase()).copied()
    }

    /// Ids of the plain words (no specials, digits or punctuation).
    pub fn word_ids(&self) -> std::ops::Range<TokenId> {
        (12 + PUNCTUATION.len()) as TokenId..self.words.len() as TokenId
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut Vec<TokenId>| {
            if !word.is_empty() {
                out.push(self.id(word).unwrap_or(UNK));
                word.clear();
            }
        };
        for c in text.chars() {
            if c.is_alphabetic() || c == '_' {
                word.push(c);
            } else {
                flush(&mut word, &mut out);
                if c.is_whitespace() {
                    continue;
                }
                let s = c.to_string();
                out.push(self.id(&s).unwrap_or(UNK));
            }
        }
        flush(&mut word, &mut out);
        out
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev_digit = false;
        for &t in tokens {
            let piece = match self.words.get(t as usize) {
                Some(w) => w.clone(),
                None => format!("<{t}>"),
            };
            let is_digit = (2..12).contains(&t);
            let attach = out.is_empty()
                || (is_digit && prev_digit)
                || matches!(piece.as_str(), "." | "," | "?" | "!" | ":" | ";" | ">" | ")")
                || out.ends_with('<')
                || out.ends_with('(');
            if !attach {
                out.push(' ');
            }
            out.push_str(&piece);
            prev_digit = is_digit;
        }
        out
    }
}
