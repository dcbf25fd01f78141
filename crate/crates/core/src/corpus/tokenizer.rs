use serde::{Deserialize, Serialize};

use super::CorpusError;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// The closed vocabulary. Line `i` of the vocabulary file is token `i`.
pub const VOCABULARY: &[&str] = &[
    "<pad>", "<sos>", "<eos>", "<unk>", // specials
    "a", "an", "the", "of", "in", "and", "with", "there", "is", "picture", "image", "photo",
    "top", "bottom", "left", "right", "small", "large", // layout
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange", // colors
    "circle", "square", "triangle", "cross", // shapes
    "background", "plain", "striped", "checker", "gradient",
];

pub fn vocab_size() -> usize {
    VOCABULARY.len()
}

pub fn vocabulary_file() -> String {
    let mut s = VOCABULARY.join("\n");
    s.push('\n');
    s
}

/// A fixed-length id sequence: `<sos> words… <eos> <pad>…`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
    eos_position: usize,
}

impl TokenSequence {
    /// Validates an externally supplied sequence.
    pub fn from_ids(ids: Vec<usize>) -> Result<Self, CorpusError> {
        let eos: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == EOS)
            .map(|(i, _)| i)
            .collect();
        if eos.len() != 1 {
            return Err(CorpusError::Invalid(format!(
                "token sequence must contain exactly one <eos>, found {}",
                eos.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&t| t >= vocab_size()) {
            return Err(CorpusError::Invalid(format!("token id {bad} outside vocabulary")));
        }
        if ids[eos[0] + 1..].iter().any(|&t| t != PAD) {
            return Err(CorpusError::Invalid("non-padding token after <eos>".into()));
        }
        Ok(Self {
            eos_position: eos[0],
            ids,
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn eos_position(&self) -> usize {
        self.eos_position
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Word-level tokenizer over [`VOCABULARY`] with a fixed context length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    context_length: usize,
}

impl Tokenizer {
    pub fn new(context_length: usize) -> Result<Self, CorpusError> {
        if context_length < 2 {
            return Err(CorpusError::Invalid(format!(
                "context length must hold <sos> and <eos>, got {context_length}"
            )));
        }
        Ok(Self { context_length })
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    pub fn word_id(word: &str) -> usize {
        VOCABULARY
            .iter()
            .skip(UNK + 1)
            .position(|w| *w == word)
            .map_or(UNK, |p| p + UNK + 1)
    }

    /// Lowercases, strips punctuation, and maps words to ids. Over-long text
    /// is truncated so that `<eos>` always lands at index `L − 1`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let words: Vec<usize> = text
            .split_whitespace()
            .map(|w| {
                w.chars()
                    .filter(|c| c.is_alphanumeric())
                    .flat_map(char::to_lowercase)
                    .collect::<String>()
            })
            .filter(|w| !w.is_empty())
            .map(|w| Self::word_id(&w))
            .collect();
        let keep = words.len().min(self.context_length - 2);
        let mut ids = Vec::with_capacity(self.context_length);
        ids.push(SOS);
        ids.extend_from_slice(&words[..keep]);
        let eos_position = ids.len();
        ids.push(EOS);
        ids.resize(self.context_length, PAD);
        TokenSequence { ids, eos_position }
    }

    pub fn detokenize(seq: &TokenSequence) -> String {
        seq.ids[1..seq.eos_position]
            .iter()
            .map(|&t| VOCABULARY[t])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text() {
        let t = Tokenizer::new(32).unwrap().tokenize("   ");
        assert_eq!(&t.ids()[..3], &[SOS, EOS, PAD]);
        assert_eq!(t.eos_position(), 1);
        assert_eq!(t.len(), 32);
    }

    #[test]
    fn truncation_keeps_eos_last() {
        let tok = Tokenizer::new(32).unwrap();
        let text = vec!["red"; 42].join(" ");
        let t = tok.tokenize(&text);
        assert_eq!(t.len(), 32);
        assert_eq!(t.eos_position(), 31);
        assert_eq!(t.ids()[31], EOS);
    }

    #[test]
    fn vocabulary_fixture() {
        // Ids follow the line numbers of the vocabulary file.
        let vocab = vocabulary_file();
        let line = |w: &str| vocab.lines().position(|l| l == w).unwrap();
        let t = Tokenizer::new(8).unwrap().tokenize("A Red circle.");
        assert_eq!(
            t.ids(),
            &[SOS, line("a"), line("red"), line("circle"), EOS, PAD, PAD, PAD]
        );
        assert_eq!(t.ids()[1..4], [4, 22, 30]);
        assert_eq!(Tokenizer::detokenize(&t), "a red circle");
    }

    #[test]
    fn unknown_words() {
        let t = Tokenizer::new(6).unwrap().tokenize("a purple circle");
        assert_eq!(t.ids()[2], UNK);
    }

    #[test]
    fn from_ids_validates() {
        assert!(TokenSequence::from_ids(vec![SOS, EOS, PAD]).is_ok());
        assert!(TokenSequence::from_ids(vec![SOS, PAD, PAD]).is_err());
        assert!(TokenSequence::from_ids(vec![SOS, EOS, EOS]).is_err());
        assert!(TokenSequence::from_ids(vec![SOS, EOS, 5]).is_err());
        assert!(TokenSequence::from_ids(vec![SOS, 999, EOS]).is_err());
    }
}
