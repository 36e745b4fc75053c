//! Token-per-line sequence labelling files.
//!
//! One `token<ws>tag` pair per line, blank lines between sentences,
//! `-DOCSTART-` lines skipped. Lines with more than two columns use the first
//! as the token and the last as the tag.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::crf::{parse_tag_str, LabelScheme};
use crate::error::{Error, Result};
use crate::metrics::extract_spans;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub words: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub scheme: LabelScheme,
}

fn data_err(origin: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Data {
        path: origin.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Splits `text` into sentences of `(line number, fields)`.
fn split_blocks(text: &str) -> Vec<Vec<(usize, Vec<&str>)>> {
    let mut blocks = Vec::new();
    let mut cur = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            if !cur.is_empty() {
                blocks.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if fields[0].starts_with("-DOCSTART-") {
            continue;
        }
        cur.push((i + 1, fields));
    }
    if !cur.is_empty() {
        blocks.push(cur);
    }
    blocks
}

/// Parses labelled CoNLL text. `origin` names the source in error messages.
///
/// An `I-t` that does not continue a `t` entity is rejected, or rewritten to
/// `B-t` when `repair` is set.
pub fn parse_conll_str(text: &str, origin: &str, repair: bool) -> Result<Corpus> {
    let mut sentences = Vec::new();
    for block in split_blocks(text) {
        let mut words = Vec::with_capacity(block.len());
        let mut tags: Vec<String> = Vec::with_capacity(block.len());
        for (line, fields) in block {
            if fields.len() < 2 {
                return Err(data_err(origin, line, format!("expected `token tag`, found `{}`", fields.join(" "))));
            }
            let tag = fields[fields.len() - 1];
            let Some((prefix, ty)) = parse_tag_str(tag) else {
                return Err(data_err(origin, line, format!("tag `{tag}` is not O, B-type or I-type")));
            };
            let mut tag = tag.to_string();
            if prefix == 'I' {
                let ty = ty.unwrap_or_default();
                let continues = tags
                    .last()
                    .and_then(|p| parse_tag_str(p))
                    .is_some_and(|(pp, pt)| pp != 'O' && pt == Some(ty));
                if !continues {
                    if !repair {
                        let prev = tags.last().map_or("sentence start", |s| s.as_str());
                        return Err(data_err(origin, line, format!("`{tag}` cannot follow {prev}")));
                    }
                    tag = format!("B-{ty}");
                }
            }
            words.push(fields[0].to_string());
            tags.push(tag);
        }
        sentences.push(Sentence { words, tags });
    }
    if sentences.is_empty() {
        return Err(data_err(origin, 0, "no sentences"));
    }
    let scheme = LabelScheme::from_tags(sentences.iter().flat_map(|s| s.tags.iter().map(String::as_str)))?;
    Ok(Corpus { sentences, scheme })
}

pub fn parse_conll(path: impl AsRef<Path>, repair: bool) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll_str(&text, &path.display().to_string(), repair)
}

/// Reads sentences for prediction: only the first column is used, so both
/// labelled and unlabelled files are accepted.
pub fn parse_tokens(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sentences: Vec<Vec<String>> = split_blocks(&text)
        .into_iter()
        .map(|b| b.into_iter().map(|(_, f)| f[0].to_string()).collect())
        .collect();
    if sentences.is_empty() {
        return Err(data_err(&path.display().to_string(), 0, "no sentences"));
    }
    Ok(sentences)
}

/// Tab-separated pairs, one blank line after every sentence.
pub fn write_conll<W: Write>(out: &mut W, sentences: &[Sentence]) -> std::io::Result<()> {
    for s in sentences {
        for (w, t) in s.words.iter().zip(&s.tags) {
            writeln!(out, "{w}\t{t}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub tokens: usize,
    /// Entity mentions per type, including types with zero mentions.
    pub entities: BTreeMap<String, usize>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut entities: BTreeMap<String, usize> =
        corpus.scheme.entity_types().iter().map(|t| (t.clone(), 0)).collect();
    let mut tokens = 0;
    for s in &corpus.sentences {
        tokens += s.words.len();
        // Tags were validated on parse.
        for span in extract_spans(&s.tags).expect("validated tags") {
            *entities.entry(span.entity_type).or_default() += 1;
        }
    }
    CorpusStats {
        sentences: corpus.sentences.len(),
        tokens,
        entities,
    }
}
