//! Token/id vocabularies with reserved specials and language tag tokens.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LanguageCode, LanguageRegistry, Split};
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// Special tokens are uppercase so they can never collide with lowercase
/// language tag tokens such as `<pad>`.
const SPECIALS: [&str; 4] = ["<PAD>", "<BOS>", "<EOS>", "<UNK>"];

/// Bidirectional token/id map with dense ids `0..len`.
///
/// Ids 0-3 are PAD/BOS/EOS/UNK. Source vocabularies additionally hold one
/// tag token per registered language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    lang_tags: BTreeMap<LanguageCode, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    lang_tags: BTreeMap<LanguageCode, u32>,
}

impl Vocabulary {
    fn from_parts(id_to_token: Vec<String>, lang_tags: BTreeMap<LanguageCode, u32>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        for (code, &id) in &lang_tags {
            match id_to_token.get(id as usize) {
                Some(tok) if *tok == code.tag_token() => {}
                _ => {
                    return Err(Error::Vocab(format!(
                        "tag id {} for {} does not match token table",
                        id, code
                    )))
                }
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
            lang_tags,
        })
    }

    /// Builds a vocabulary from sorted payload tokens, with specials first
    /// and (for source vocabularies) tag tokens after the specials.
    fn build(payload: BTreeSet<String>, tag_codes: &[LanguageCode]) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut lang_tags = BTreeMap::new();
        for code in tag_codes {
            lang_tags.insert(*code, id_to_token.len() as u32);
            id_to_token.push(code.tag_token());
        }
        let reserved: BTreeSet<String> = id_to_token.iter().cloned().collect();
        for tok in payload {
            if reserved.contains(&tok) {
                continue;
            }
            id_to_token.push(tok);
        }
        Self::from_parts(id_to_token, lang_tags)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn has_lang_tag(&self, code: LanguageCode) -> bool {
        self.lang_tags.contains_key(&code)
    }

    pub fn lang_tag_id(&self, code: LanguageCode) -> Option<u32> {
        self.lang_tags.get(&code).copied()
    }

    pub fn lang_tags(&self) -> &BTreeMap<LanguageCode, u32> {
        &self.lang_tags
    }

    pub fn unk_token(&self) -> &str {
        SPECIALS[UNK_ID as usize]
    }

    /// Maps tokens to ids; unknown tokens become UNK, so encoding never
    /// fails on token content.
    pub fn encode(&self, tokens: &[String], add_bos_eos: bool) -> Vec<u32> {
        let extra = if add_bos_eos { 2 } else { 0 };
        let mut ids = Vec::with_capacity(tokens.len() + extra);
        if add_bos_eos {
            ids.push(BOS_ID);
        }
        for t in tokens {
            ids.push(self.id(t).unwrap_or(UNK_ID));
        }
        if add_bos_eos {
            ids.push(EOS_ID);
        }
        ids
    }

    /// Inverse of `encode` on in-vocabulary ids.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(String::from)
                    .ok_or_else(|| Error::Vocab(format!("id {id} out of range")))
            })
            .collect()
    }

    /// Stable 64-bit content fingerprint (FNV-1a over the token table).
    ///
    /// Checkpoints carry the fingerprints of the vocabularies they were
    /// trained with; loading against different vocabularies is rejected.
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for tok in &self.id_to_token {
            for &b in tok.as_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
            h ^= 0xff;
            h = h.wrapping_mul(PRIME);
        }
        h
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            tokens: self.id_to_token.clone(),
            lang_tags: self.lang_tags.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        let lang_tags = file.lang_tags;
        Self::from_parts(file.tokens, lang_tags)
    }
}

/// Builds the (source, target) vocabulary pair from the train splits.
///
/// Source: specials, then tag tokens sorted by code, then grapheme tokens
/// sorted lexicographically. Target: specials, then phoneme tokens sorted
/// lexicographically. Deterministic and independent of entry order.
pub fn build_vocabularies(
    datasets: &[Dataset],
    registry: &LanguageRegistry,
) -> Result<(Vocabulary, Vocabulary)> {
    let train: Vec<&Dataset> = datasets.iter().filter(|d| d.split == Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Vocab("no train split present".into()));
    }
    let mut graphemes = BTreeSet::new();
    let mut phonemes = BTreeSet::new();
    for ds in train {
        for e in &ds.entries {
            for t in e.source.tokens() {
                graphemes.insert(t.clone());
            }
            for t in e.target.tokens() {
                phonemes.insert(t.clone());
            }
        }
    }
    let tag_codes: Vec<LanguageCode> = registry.codes().collect();
    let source = Vocabulary::build(graphemes, &tag_codes)?;
    let target = Vocabulary::build(phonemes, &[])?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GraphemeSequence, PhonemeSequence, PronunciationEntry};

    fn lang(c: &str) -> LanguageCode {
        LanguageCode::new(c).unwrap()
    }

    fn entry(l: &str, word: &str, segs: &[&str]) -> PronunciationEntry {
        PronunciationEntry::new(
            lang(l),
            GraphemeSequence::from_word(word).unwrap(),
            PhonemeSequence::new(segs.iter().map(|s| s.to_string()).collect()).unwrap(),
        )
        .unwrap()
    }

    fn train_ds(entries: Vec<PronunciationEntry>) -> Dataset {
        Dataset::new(entries, Split::Train)
    }

    #[test]
    fn specials_occupy_first_four_ids() {
        let ds = [train_ds(vec![entry("fre", "ab", &["a", "b"])])];
        let reg = LanguageRegistry::from_codes([lang("fre")]);
        let (src, tgt) = build_vocabularies(&ds, &reg).unwrap();
        for v in [&src, &tgt] {
            assert_eq!(v.token(PAD_ID), Some("<PAD>"));
            assert_eq!(v.token(BOS_ID), Some("<BOS>"));
            assert_eq!(v.token(EOS_ID), Some("<EOS>"));
            assert_eq!(v.token(UNK_ID), Some("<UNK>"));
        }
        assert_eq!(src.lang_tag_id(lang("fre")), Some(4));
    }

    #[test]
    fn shared_tokens_appear_once() {
        let ds = [train_ds(vec![
            entry("fre", "aa", &["a"]),
            entry("fre", "ab", &["a", "b"]),
        ])];
        let reg = LanguageRegistry::from_codes([lang("fre")]);
        let (src, tgt) = build_vocabularies(&ds, &reg).unwrap();
        // specials + tag + {a, b}
        assert_eq!(src.len(), 4 + 1 + 2);
        // specials + {a, b}
        assert_eq!(tgt.len(), 4 + 2);
    }

    #[test]
    fn one_tag_per_registered_language() {
        let reg = LanguageRegistry::default();
        let entries: Vec<_> = reg
            .codes()
            .map(|c| entry(c.as_str(), "ab", &["x"]))
            .collect();
        let ds = [train_ds(entries)];
        let (src, _) = build_vocabularies(&ds, &reg).unwrap();
        assert_eq!(src.lang_tags().len(), 15);
        for code in reg.codes() {
            let id = src.lang_tag_id(code).unwrap();
            assert_eq!(src.token(id), Some(code.tag_token().as_str()));
        }
    }

    #[test]
    fn rebuilding_is_deterministic() {
        let ds = [train_ds(vec![
            entry("fre", "zyx", &["c", "b"]),
            entry("hun", "abc", &["a"]),
        ])];
        let reg = LanguageRegistry::from_codes([lang("fre"), lang("hun")]);
        let (s1, t1) = build_vocabularies(&ds, &reg).unwrap();
        let (s2, t2) = build_vocabularies(&ds, &reg).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        assert_eq!(s1.fingerprint(), s2.fingerprint());
    }

    #[test]
    fn entry_order_does_not_matter() {
        let a = entry("fre", "zyx", &["c", "b"]);
        let b = entry("fre", "abc", &["a"]);
        let reg = LanguageRegistry::from_codes([lang("fre")]);
        let (s1, t1) = build_vocabularies(&[train_ds(vec![a.clone(), b.clone()])], &reg).unwrap();
        let (s2, t2) = build_vocabularies(&[train_ds(vec![b, a])], &reg).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn missing_train_split_errors() {
        let ds = [Dataset::new(vec![entry("fre", "ab", &["a"])], Split::Dev)];
        let reg = LanguageRegistry::from_codes([lang("fre")]);
        assert!(build_vocabularies(&ds, &reg).is_err());
    }

    #[test]
    fn encode_maps_unknown_to_unk() {
        let ds = [train_ds(vec![entry("fre", "ab", &["a", "b"])])];
        let reg = LanguageRegistry::from_codes([lang("fre")]);
        let (src, _) = build_vocabularies(&ds, &reg).unwrap();
        let ids = src.encode(&["a".into(), "\u{df}".into()], false);
        assert_eq!(ids[1], UNK_ID);
        assert_ne!(ids[0], UNK_ID);
    }

    #[test]
    fn encode_empty_with_bos_eos() {
        let ds = [train_ds(vec![entry("fre", "ab", &["a"])])];
        let reg = LanguageRegistry::from_codes([lang("fre")]);
        let (src, _) = build_vocabularies(&ds, &reg).unwrap();
        assert_eq!(src.encode(&[], true), vec![BOS_ID, EOS_ID]);
        assert_eq!(src.encode(&[], false), Vec::<u32>::new());
    }

    #[test]
    fn decode_inverts_encode_on_known_tokens() {
        let ds = [train_ds(vec![entry("fre", "abc", &["x", "y"])])];
        let reg = LanguageRegistry::from_codes([lang("fre")]);
        let (src, _) = build_vocabularies(&ds, &reg).unwrap();
        let toks: Vec<String> = vec!["a".into(), "c".into(), "b".into()];
        let back = src.decode(&src.encode(&toks, false)).unwrap();
        assert_eq!(back, toks);
        assert!(src.decode(&[999]).is_err());
    }

    #[test]
    fn json_round_trip_preserves_vocab() {
        let ds = [train_ds(vec![entry("fre", "ab\u{e9}", &["a", "\u{281}"])])];
        let reg = LanguageRegistry::from_codes([lang("fre")]);
        let (src, _) = build_vocabularies(&ds, &reg).unwrap();
        let json = src.to_json().unwrap();
        let back = Vocabulary::from_json(&json).unwrap();
        assert_eq!(src, back);
        assert_eq!(src.fingerprint(), back.fingerprint());
    }

    #[test]
    fn fingerprint_changes_with_content() {
        let ds1 = [train_ds(vec![entry("fre", "ab", &["a"])])];
        let ds2 = [train_ds(vec![entry("fre", "ac", &["a"])])];
        let reg = LanguageRegistry::from_codes([lang("fre")]);
        let (s1, _) = build_vocabularies(&ds1, &reg).unwrap();
        let (s2, _) = build_vocabularies(&ds2, &reg).unwrap();
        assert_ne!(s1.fingerprint(), s2.fingerprint());
    }
}
