//! Corpus schema, tokenization, vocabulary, and the synthetic corpus
//! generator.
//!
//! A corpus is UTF-8, one JSON record per line:
//!
//! ```text
//! {"v":1,"id":"p0","title":"...","attributes":["..."],"qa_pairs":[{"q":"...","a":"..."}],"reason":"..."}
//! ```
//!
//! `reason` is optional (absent at inference time) and `qa_pairs` may be
//! empty — that is the long-tail case served by the prior path.

mod synthetic;
mod vocab;

pub use synthetic::{corpus_stats, generate_synthetic_corpus, CorpusStats, SyntheticCorpusSpec};
pub use vocab::{tokenize, Vocab, BOS, EOS, PAD, SEP, UNK};

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaText {
    pub q: String,
    pub a: String,
}

/// One training example: product content, Q&A discussions, and the
/// reference reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    #[serde(default = "schema_version")]
    pub v: u32,
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub qa_pairs: Vec<QaText>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

fn schema_version() -> u32 {
    1
}

/// Load and validate a line-delimited corpus. Malformed lines are
/// reported with their 1-based line number; Q&A pairs whose question or
/// answer tokenizes to nothing are dropped here.
pub fn load_corpus(path: &Path) -> Result<Vec<ProductRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: ProductRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        if record.v != 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("unsupported schema version {}", record.v),
            });
        }
        if tokenize(&record.title).is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "title must be non-empty".into(),
            });
        }
        record
            .qa_pairs
            .retain(|p| !tokenize(&p.q).is_empty() && !tokenize(&p.a).is_empty());
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Contract(format!(
            "corpus {} contains no records",
            path.display()
        )));
    }
    Ok(records)
}

pub fn write_corpus(path: &Path, records: &[ProductRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Per-field token caps applied when a record is tokenized.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TokenLimits {
    pub title: usize,
    pub qa: usize,
    pub reason: usize,
}

impl Default for TokenLimits {
    fn default() -> Self {
        TokenLimits {
            title: 64,
            qa: 64,
            reason: 32,
        }
    }
}

/// A record mapped onto vocabulary ids, ready for the model.
#[derive(Debug, Clone)]
pub struct TokenizedRecord {
    pub id: String,
    pub title_ids: Vec<usize>,
    pub attr_ids: Vec<usize>,
    /// (question ids, answer ids) per retained pair.
    pub qa: Vec<(Vec<usize>, Vec<usize>)>,
    /// `<bos> reason <eos>`, when the record carries a reference reason.
    pub reason_ids: Option<Vec<usize>>,
    pub reason_tokens: Option<Vec<String>>,
}

pub fn tokenize_record(
    record: &ProductRecord,
    vocab: &Vocab,
    limits: &TokenLimits,
) -> TokenizedRecord {
    let mut title = tokenize(&record.title);
    title.truncate(limits.title);
    let mut attrs = tokenize(&record.attributes.join(" "));
    attrs.truncate(limits.title);
    let qa = record
        .qa_pairs
        .iter()
        .map(|p| {
            let mut q = tokenize(&p.q);
            q.truncate(limits.qa);
            let mut a = tokenize(&p.a);
            a.truncate(limits.qa);
            (vocab.encode(&q), vocab.encode(&a))
        })
        .collect();
    let reason_tokens = record.reason.as_ref().map(|r| {
        let mut toks = tokenize(r);
        toks.truncate(limits.reason);
        toks
    });
    let reason_ids = reason_tokens.as_ref().map(|toks| {
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(toks));
        ids.push(EOS);
        ids
    });
    TokenizedRecord {
        id: record.id.clone(),
        title_ids: vocab.encode(&title),
        attr_ids: vocab.encode(&attrs),
        qa,
        reason_ids,
        reason_tokens,
    }
}
