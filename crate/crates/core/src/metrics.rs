//! Entity-level exact-match evaluation over BIO tag sequences.
//!
//! Chunking follows the default (non-strict) behaviour of the common
//! `seqeval` tool: an `I-t` that does not continue an open `t` entity starts
//! a new one. Strict mode drops such entities instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::crf::parse_tag_str;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub entity_type: String,
    /// Inclusive word index.
    pub start: usize,
    /// Exclusive word index.
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkMode {
    #[default]
    Lenient,
    Strict,
}

pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<EntitySpan>> {
    extract_spans_with(tags, ChunkMode::Lenient)
}

/// Spans sorted by start; they never overlap.
pub fn extract_spans_with<S: AsRef<str>>(tags: &[S], mode: ChunkMode) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    let close = |open: &mut Option<(&str, usize)>, end: usize, spans: &mut Vec<EntitySpan>| {
        if let Some((ty, start)) = open.take() {
            spans.push(EntitySpan {
                entity_type: ty.to_string(),
                start,
                end,
            });
        }
    };
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let parsed = parse_tag_str(tag)
            .ok_or_else(|| Error::InvalidValue(format!("unknown tag `{tag}` at position {i}")))?;
        match parsed {
            ('O', _) => close(&mut open, i, &mut spans),
            ('B', Some(ty)) => {
                close(&mut open, i, &mut spans);
                open = Some((ty, i));
            }
            ('I', Some(ty)) => match open {
                Some((cur, _)) if cur == ty => {}
                _ => {
                    close(&mut open, i, &mut spans);
                    if mode == ChunkMode::Lenient {
                        open = Some((ty, i));
                    }
                }
            },
            _ => unreachable!(),
        }
    }
    close(&mut open, tags.len(), &mut spans);
    Ok(spans)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Zero denominators give zero, never NaN.
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        Prf {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }
}

fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    pub entity_type: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold entities of this type.
    pub support: usize,
    pub predicted: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of entity types with gold support that were averaged.
    pub types: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro: MicroReport,
    #[serde(rename = "macro")]
    pub macro_avg: MacroReport,
    pub per_type: Vec<TypeReport>,
}

/// Exact (type, start, end) matching between aligned gold and predicted
/// span sets.
pub fn compute_prf(gold: &[Vec<EntitySpan>], pred: &[Vec<EntitySpan>]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::shape(
            "compute_prf",
            format!("{} gold sentences vs {} predicted", gold.len(), pred.len()),
        ));
    }
    // per type: (tp, predicted, gold)
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let gset: BTreeSet<&EntitySpan> = g.iter().collect();
        let pset: BTreeSet<&EntitySpan> = p.iter().collect();
        for s in &gset {
            counts.entry(&s.entity_type).or_default().2 += 1;
        }
        for s in &pset {
            let c = counts.entry(&s.entity_type).or_default();
            c.1 += 1;
            if gset.contains(s) {
                c.0 += 1;
            }
        }
    }
    let per_type: Vec<TypeReport> = counts
        .iter()
        .map(|(ty, &(tp, np, ng))| {
            let prf = Prf::from_counts(tp, np, ng);
            TypeReport {
                entity_type: ty.to_string(),
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
                support: ng,
                predicted: np,
                true_positives: tp,
            }
        })
        .collect();
    let (tp, np, ng) = counts
        .values()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let micro = Prf::from_counts(tp, np, ng);
    let supported: Vec<&TypeReport> = per_type.iter().filter(|t| t.support > 0).collect();
    let mean = |f: fn(&TypeReport) -> f64| {
        if supported.is_empty() {
            0.0
        } else {
            supported.iter().map(|t| f(t)).sum::<f64>() / supported.len() as f64
        }
    };
    Ok(EvalReport {
        micro: MicroReport {
            precision: micro.precision,
            recall: micro.recall,
            f1: micro.f1,
            true_positives: tp,
            predicted: np,
            gold: ng,
        },
        macro_avg: MacroReport {
            precision: mean(|t| t.precision),
            recall: mean(|t| t.recall),
            f1: mean(|t| t.f1),
            types: supported.len(),
        },
        per_type,
    })
}

/// Extracts spans from aligned tag sequences and scores them.
pub fn evaluate_tags<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>], mode: ChunkMode) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::shape(
            "evaluate_tags",
            format!("{} gold sentences vs {} predicted", gold.len(), pred.len()),
        ));
    }
    let mut gs = Vec::with_capacity(gold.len());
    let mut ps = Vec::with_capacity(pred.len());
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::shape(
                "evaluate_tags",
                format!("sentence {i}: {} gold tags vs {} predicted", g.len(), p.len()),
            ));
        }
        gs.push(extract_spans_with(g, mode)?);
        ps.push(extract_spans_with(p, mode)?);
    }
    compute_prf(&gs, &ps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Average {
    Micro,
    Macro,
    Both,
}

impl std::str::FromStr for Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Average::Micro),
            "macro" => Ok(Average::Macro),
            "both" => Ok(Average::Both),
            _ => Err(Error::Config(format!("unknown average `{s}`"))),
        }
    }
}

#[derive(Serialize)]
struct ReportJson<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    micro: Option<&'a MicroReport>,
    #[serde(rename = "macro", skip_serializing_if = "Option::is_none")]
    macro_avg: Option<&'a MacroReport>,
    per_type: &'a [TypeReport],
}

impl EvalReport {
    /// JSON with a fixed key order: `micro`, `macro`, `per_type`.
    pub fn to_json(&self, average: Average) -> String {
        let view = ReportJson {
            micro: matches!(average, Average::Micro | Average::Both).then_some(&self.micro),
            macro_avg: matches!(average, Average::Macro | Average::Both).then_some(&self.macro_avg),
            per_type: &self.per_type,
        };
        serde_json::to_string_pretty(&view).expect("report serializes")
    }

    pub fn to_table(&self, average: Average) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>9} {:>9} {:>9} {:>9}",
            "type", "precision", "recall", "f1", "support"
        );
        for t in &self.per_type {
            let _ = writeln!(
                out,
                "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>9}",
                t.entity_type, t.precision, t.recall, t.f1, t.support
            );
        }
        if matches!(average, Average::Micro | Average::Both) {
            let m = &self.micro;
            let _ = writeln!(
                out,
                "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>9}",
                "micro avg", m.precision, m.recall, m.f1, m.gold
            );
        }
        if matches!(average, Average::Macro | Average::Both) {
            let m = &self.macro_avg;
            let _ = writeln!(
                out,
                "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>9}",
                "macro avg", m.precision, m.recall, m.f1, self.micro.gold
            );
        }
        out
    }
}
