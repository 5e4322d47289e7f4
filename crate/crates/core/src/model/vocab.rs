use std::collections::HashMap;

use super::{ModelError, Result};

pub const SOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;

pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const PAD_TOKEN: &str = "<pad>";

const MAX_VOCAB: usize = 512;

/// Closed word-level vocabulary. The three reserved tokens occupy ids 0..=2
/// and the class words "real" and "fake" are always present.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = vec![
            SOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            PAD_TOKEN.to_string(),
            "real".to_string(),
            "fake".to_string(),
        ];
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for word in words {
            let word = word.as_ref().to_lowercase();
            if !index.contains_key(&word) {
                index.insert(word.clone(), tokens.len() as u32);
                tokens.push(word);
            }
        }
        if tokens.len() > MAX_VOCAB {
            return Err(ModelError::VocabTooLarge {
                size: tokens.len(),
                max: MAX_VOCAB,
            });
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary covering every word the procedural caption generator emits.
    pub fn standard() -> Self {
        Self::new(crate::data::caption_vocabulary()).expect("caption vocabulary fits")
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if tokens.len() < 5 {
            return Err(ModelError::MalformedVocab(
                "need at least the reserved tokens plus the class words".into(),
            ));
        }
        if tokens[SOS_ID as usize] != SOS_TOKEN
            || tokens[EOS_ID as usize] != EOS_TOKEN
            || tokens[PAD_ID as usize] != PAD_TOKEN
        {
            return Err(ModelError::MalformedVocab(
                "reserved tokens must occupy ids 0, 1, 2".into(),
            ));
        }
        if tokens.len() > MAX_VOCAB {
            return Err(ModelError::VocabTooLarge {
                size: tokens.len(),
                max: MAX_VOCAB,
            });
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(ModelError::MalformedVocab(format!("duplicate token '{t}'")));
            }
        }
        if !index.contains_key("real") || !index.contains_key("fake") {
            return Err(ModelError::MalformedVocab(
                "class words 'real' and 'fake' must be present".into(),
            ));
        }
        Ok(Self { tokens, index })
    }
}

/// Fixed-length token sequence: `[SOS] words... [EOS] [PAD]...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub eos_pos: usize,
}

/// Lowercase, whitespace-split tokenization right-padded to `context_len`.
/// Over-long captions are truncated so [EOS] stays the final non-pad token.
pub fn tokenize(text: &str, vocab: &Vocabulary, context_len: usize) -> Result<TokenSeq> {
    let max_words = context_len - 2;
    let mut ids = Vec::with_capacity(context_len);
    ids.push(SOS_ID);
    for word in text.split_whitespace().take(max_words) {
        let word = word.to_lowercase();
        match vocab.id(&word) {
            Some(id) => ids.push(id),
            None => return Err(ModelError::UnknownWord(word)),
        }
    }
    let eos_pos = ids.len();
    ids.push(EOS_ID);
    ids.resize(context_len, PAD_ID);
    Ok(TokenSeq { ids, eos_pos })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_word_layout() {
        let vocab = Vocabulary::standard();
        let seq = tokenize("fake", &vocab, 16).unwrap();
        assert_eq!(seq.ids[0], SOS_ID);
        assert_eq!(seq.ids[1], vocab.id("fake").unwrap());
        assert_eq!(seq.ids[2], EOS_ID);
        assert_eq!(seq.eos_pos, 2);
        assert!(seq.ids[3..].iter().all(|&id| id == PAD_ID));
        assert_eq!(seq.ids.len(), 16);
    }

    #[test]
    fn empty_caption() {
        let vocab = Vocabulary::standard();
        let seq = tokenize("", &vocab, 16).unwrap();
        assert_eq!(seq.ids[..2], [SOS_ID, EOS_ID]);
        assert_eq!(seq.eos_pos, 1);
        assert_eq!(seq.ids[2..].iter().filter(|&&id| id == PAD_ID).count(), 14);
    }

    #[test]
    fn truncation_keeps_eos_last() {
        let words: Vec<String> = (0..20).map(|_| "real".to_string()).collect();
        let vocab = Vocabulary::standard();
        let seq = tokenize(&words.join(" "), &vocab, 16).unwrap();
        assert_eq!(seq.ids.len(), 16);
        assert_eq!(seq.eos_pos, 15);
        assert_eq!(seq.ids[15], EOS_ID);
        assert_eq!(
            seq.ids[1..15].iter().filter(|&&id| id == vocab.id("real").unwrap()).count(),
            14
        );
    }

    #[test]
    fn unknown_word_is_named() {
        let vocab = Vocabulary::standard();
        match tokenize("real zorble", &vocab, 16).unwrap_err() {
            ModelError::UnknownWord(w) => assert_eq!(w, "zorble"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn text_serialization_roundtrip() {
        let vocab = Vocabulary::standard();
        let text = vocab.to_text();
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(vocab, back);
        assert_eq!(back.id(SOS_TOKEN), Some(SOS_ID));
        assert!(back.id("real").is_some() && back.id("fake").is_some());
    }

    #[test]
    fn size_limit_enforced() {
        let words: Vec<String> = (0..600).map(|i| format!("w{i}")).collect();
        assert!(matches!(
            Vocabulary::new(&words),
            Err(ModelError::VocabTooLarge { .. })
        ));
    }

    #[test]
    fn malformed_vocab_rejected() {
        assert!(Vocabulary::from_text("<sos>\n<eos>\n").is_err());
        assert!(Vocabulary::from_text("<eos>\n<sos>\n<pad>\nreal\nfake\n").is_err());
        assert!(Vocabulary::from_text("<sos>\n<eos>\n<pad>\nreal\nreal\n").is_err());
    }
}
