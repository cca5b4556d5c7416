//! The TSV interchange formats.
//!
//! Gold/silver data: `word<TAB>seg seg seg`, UTF-8, LF line endings.
//! Predictions add a third column with the confidence as a decimal in
//! [0, 1] printed with four fractional digits.

use crate::data::{GraphemeSequence, LanguageCode, PhonemeSequence, PronunciationEntry};
use crate::error::{Error, Result};

/// Parses pronunciation TSV. One entry per non-empty line, in line order.
pub fn parse_wikipron_tsv(text: &str, lang: LanguageCode) -> Result<Vec<PronunciationEntry>> {
    let mut entries = Vec::new();
    for (idx, raw_line) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let word = fields.next().unwrap_or("");
        let segs = fields.next().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "expected exactly one tab".into(),
        })?;
        if fields.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected exactly one tab".into(),
            });
        }
        let source = GraphemeSequence::from_word(word).map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad word: {e}"),
        })?;
        let tokens: Vec<String> = segs
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        if tokens.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty segment list".into(),
            });
        }
        let target = PhonemeSequence::new(tokens).map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad segments: {e}"),
        })?;
        entries.push(PronunciationEntry::new(lang, source, target).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?);
    }
    Ok(entries)
}

/// Writes entries as pronunciation TSV, one line per entry with a trailing
/// newline. Inverse of [`parse_wikipron_tsv`] up to NFC normalization.
pub fn write_tsv(entries: &[PronunciationEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.source.word());
        out.push('\t');
        out.push_str(&e.target.joined());
        out.push('\n');
    }
    out
}

/// Writes prediction rows: `word<TAB>segments<TAB>confidence`.
pub fn write_prediction_tsv(rows: &[(PronunciationEntry, f64)]) -> String {
    let mut out = String::new();
    for (e, confidence) in rows {
        out.push_str(&e.source.word());
        out.push('\t');
        out.push_str(&e.target.joined());
        out.push('\t');
        out.push_str(&format!("{confidence:.4}"));
        out.push('\n');
    }
    out
}
