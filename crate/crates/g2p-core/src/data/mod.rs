//! Dataset ingestion, tokenization, language tagging, and vocabulary
//! construction.
//!
//! Words are tokenized one Unicode codepoint per grapheme after NFC
//! normalization. Phoneme segments are opaque UTF-8 tokens. Every entry
//! carries a three-letter language code; multilingual training prepends the
//! matching tag token (`<fre>`) to the grapheme sequence.

mod tsv;
mod vocab;

pub use tsv::{parse_wikipron_tsv, write_prediction_tsv, write_tsv};
pub use vocab::{build_vocabularies, Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Three-letter lowercase language identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LanguageCode([u8; 3]);

impl LanguageCode {
    pub fn new(code: &str) -> Result<Self> {
        let bytes = code.as_bytes();
        if bytes.len() != 3 || !bytes.iter().all(|b| b.is_ascii_lowercase()) {
            return Err(Error::UnknownLanguage(format!(
                "{code:?} is not a three-letter lowercase code"
            )));
        }
        Ok(Self([bytes[0], bytes[1], bytes[2]]))
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("constructed from ASCII")
    }

    /// The tag token prepended to tagged grapheme sequences.
    pub fn tag_token(&self) -> String {
        format!("<{}>", self.as_str())
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LanguageCode({})", self.as_str())
    }
}

impl FromStr for LanguageCode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

impl Serialize for LanguageCode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for LanguageCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        LanguageCode::new(&s).map_err(serde::de::Error::custom)
    }
}

/// The set of language codes a run works with.
///
/// The default registry holds the fifteen codes of the standard G2P
/// benchmark; arbitrary codes may be registered instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageRegistry {
    codes: BTreeSet<LanguageCode>,
}

/// Default registry codes.
pub const DEFAULT_LANGUAGES: [&str; 15] = [
    "ady", "arm", "bul", "dut", "fre", "geo", "gre", "hin", "hun", "ice", "jpn", "kor", "lit",
    "rum", "vie",
];

impl Default for LanguageRegistry {
    fn default() -> Self {
        let codes = DEFAULT_LANGUAGES
            .iter()
            .map(|c| LanguageCode::new(c).expect("default codes are valid"))
            .collect();
        Self { codes }
    }
}

impl LanguageRegistry {
    pub fn empty() -> Self {
        Self {
            codes: BTreeSet::new(),
        }
    }

    pub fn from_codes(codes: impl IntoIterator<Item = LanguageCode>) -> Self {
        Self {
            codes: codes.into_iter().collect(),
        }
    }

    pub fn register(&mut self, code: LanguageCode) {
        self.codes.insert(code);
    }

    pub fn contains(&self, code: LanguageCode) -> bool {
        self.codes.contains(&code)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Codes in sorted order.
    pub fn codes(&self) -> impl Iterator<Item = LanguageCode> + '_ {
        self.codes.iter().copied()
    }
}

/// Grapheme tokens of one word: one Unicode codepoint per token, NFC
/// normalized, never whitespace, never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphemeSequence(Vec<String>);

impl GraphemeSequence {
    /// Tokenizes a word, applying NFC first.
    pub fn from_word(word: &str) -> Result<Self> {
        let normalized: String = word.nfc().collect();
        if normalized.is_empty() {
            return Err(Error::Empty("empty word".into()));
        }
        if normalized.chars().any(char::is_whitespace) {
            return Err(Error::Parse {
                line: 0,
                msg: format!("word {normalized:?} contains whitespace"),
            });
        }
        Ok(Self(normalized.chars().map(String::from).collect()))
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The written word (tokens concatenated).
    pub fn word(&self) -> String {
        self.0.concat()
    }
}

/// Phoneme segment tokens. Segments are opaque UTF-8 strings without
/// whitespace. Gold entries require at least one segment; decoded
/// predictions may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhonemeSequence(Vec<String>);

impl PhonemeSequence {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        for t in &tokens {
            if t.is_empty() {
                return Err(Error::Empty("empty phoneme segment".into()));
            }
            if t.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("phoneme segment {t:?} contains whitespace"),
                });
            }
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Space-joined segment string.
    pub fn joined(&self) -> String {
        self.0.join(" ")
    }
}

/// One (language, graphemes, phonemes) pair, the unit of every dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronunciationEntry {
    pub lang: LanguageCode,
    pub source: GraphemeSequence,
    pub target: PhonemeSequence,
    /// Model-generated (pseudo-labeled) entries are flagged so reports can
    /// separate them from human-annotated data.
    pub silver: bool,
}

impl PronunciationEntry {
    /// A gold entry; the target must be non-empty.
    pub fn new(lang: LanguageCode, source: GraphemeSequence, target: PhonemeSequence) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Empty("empty grapheme sequence".into()));
        }
        if target.is_empty() {
            return Err(Error::Empty("empty phoneme sequence".into()));
        }
        Ok(Self {
            lang,
            source,
            target,
            silver: false,
        })
    }

    pub fn new_silver(
        lang: LanguageCode,
        source: GraphemeSequence,
        target: PhonemeSequence,
    ) -> Result<Self> {
        let mut e = Self::new(lang, source, target)?;
        e.silver = true;
        Ok(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    Silver,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Silver => "silver",
        };
        f.write_str(s)
    }
}

/// A list of entries under one split label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub entries: Vec<PronunciationEntry>,
    pub split: Split,
}

impl Dataset {
    pub fn new(entries: Vec<PronunciationEntry>, split: Split) -> Self {
        Self { entries, split }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Languages present, sorted.
    pub fn languages(&self) -> Vec<LanguageCode> {
        let set: BTreeSet<_> = self.entries.iter().map(|e| e.lang).collect();
        set.into_iter().collect()
    }
}

/// Prepends the language tag token to an entry's grapheme tokens.
///
/// The entry itself is unmodified; the result is one token longer than the
/// source. The language must be registered in the vocabulary's tag table.
pub fn prepend_language_tag(entry: &PronunciationEntry, vocab: &Vocabulary) -> Result<Vec<String>> {
    if !vocab.has_lang_tag(entry.lang) {
        return Err(Error::UnknownLanguage(entry.lang.as_str().to_string()));
    }
    let mut out = Vec::with_capacity(entry.source.len() + 1);
    out.push(entry.lang.tag_token());
    out.extend(entry.source.tokens().iter().cloned());
    Ok(out)
}

/// Tags an arbitrary word for decoding.
pub fn tag_word_tokens(
    lang: LanguageCode,
    source: &GraphemeSequence,
    vocab: &Vocabulary,
) -> Result<Vec<String>> {
    if !vocab.has_lang_tag(lang) {
        return Err(Error::UnknownLanguage(lang.as_str().to_string()));
    }
    let mut out = Vec::with_capacity(source.len() + 1);
    out.push(lang.tag_token());
    out.extend(source.tokens().iter().cloned());
    Ok(out)
}
