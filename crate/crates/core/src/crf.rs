//! Linear-chain CRF over word emissions.
//!
//! Training uses the forward algorithm (optionally restricted to BIO-valid
//! paths), decoding uses Viterbi restricted to BIO-valid paths. Constraints
//! are a separate boolean mask and are never written into the learned scores.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{logsumexp, Tape, Tensor, Var};
use crate::numeric::ops::logsumexp_unchecked;

pub const OUTSIDE: &str = "O";

/// A parsed BIO tag; the payload is the entity type index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
}

/// BIO label inventory. Label 0 is `O`; entity type `k` owns `B-k` at
/// `1 + 2k` and `I-k` at `2 + 2k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "SchemeRepr", into = "SchemeRepr")]
pub struct LabelScheme {
    entity_types: Vec<String>,
    labels: Vec<String>,
    ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct SchemeRepr {
    entity_types: Vec<String>,
}

impl From<SchemeRepr> for LabelScheme {
    fn from(r: SchemeRepr) -> Self {
        LabelScheme::new(r.entity_types)
    }
}

impl From<LabelScheme> for SchemeRepr {
    fn from(s: LabelScheme) -> Self {
        SchemeRepr {
            entity_types: s.entity_types,
        }
    }
}

/// Splits a tag string into its prefix and type without consulting a scheme.
pub fn parse_tag_str(tag: &str) -> Option<(char, Option<&str>)> {
    if tag == OUTSIDE {
        return Some(('O', None));
    }
    let (p, t) = tag.split_once('-')?;
    if t.is_empty() {
        return None;
    }
    match p {
        "B" => Some(('B', Some(t))),
        "I" => Some(('I', Some(t))),
        _ => None,
    }
}

impl LabelScheme {
    pub fn new<S: Into<String>>(entity_types: impl IntoIterator<Item = S>) -> Self {
        let entity_types: Vec<String> = entity_types.into_iter().map(Into::into).collect();
        let mut labels = vec![OUTSIDE.to_string()];
        for t in &entity_types {
            labels.push(format!("B-{t}"));
            labels.push(format!("I-{t}"));
        }
        let ids = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        LabelScheme {
            entity_types,
            labels,
            ids,
        }
    }

    /// Scheme over the entity types seen in `tags`, sorted by name.
    pub fn from_tags<'a>(tags: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut types = BTreeSet::new();
        for tag in tags {
            match parse_tag_str(tag) {
                Some((_, Some(t))) => {
                    types.insert(t.to_string());
                }
                Some((_, None)) => {}
                None => return Err(Error::InvalidValue(format!("unknown tag `{tag}`"))),
            }
        }
        Ok(LabelScheme::new(types))
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.ids.get(label).copied()
    }

    pub fn require_id(&self, label: &str) -> Result<usize> {
        self.id(label)
            .ok_or_else(|| Error::InvalidValue(format!("tag `{label}` is not in the label scheme")))
    }

    pub fn tag(&self, id: usize) -> Tag {
        match id {
            0 => Tag::Outside,
            i if i % 2 == 1 => Tag::Begin((i - 1) / 2),
            i => Tag::Inside((i - 2) / 2),
        }
    }

    pub fn begin_id(&self, ty: usize) -> usize {
        1 + 2 * ty
    }

    pub fn inside_id(&self, ty: usize) -> usize {
        2 + 2 * ty
    }

    pub fn encode<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<usize>> {
        tags.iter().map(|t| self.require_id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.labels[i].clone()).collect()
    }

    /// BIO validity of `to` following `from` (`None` = sequence start).
    pub fn transition_allowed(&self, from: Option<usize>, to: usize) -> bool {
        match self.tag(to) {
            Tag::Inside(t) => match from.map(|f| self.tag(f)) {
                Some(Tag::Begin(u)) | Some(Tag::Inside(u)) => u == t,
                _ => false,
            },
            _ => true,
        }
    }
}

/// Learned CRF scores. `transitions[i * L + j]` scores label `j` after `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParameters {
    pub num_labels: usize,
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl CrfParameters {
    pub fn zeros(num_labels: usize) -> Self {
        CrfParameters {
            num_labels,
            transitions: vec![0.0; num_labels * num_labels],
            start: vec![0.0; num_labels],
            end: vec![0.0; num_labels],
        }
    }

    pub fn new(num_labels: usize, transitions: Vec<f64>, start: Vec<f64>, end: Vec<f64>) -> Result<Self> {
        if transitions.len() != num_labels * num_labels
            || start.len() != num_labels
            || end.len() != num_labels
        {
            return Err(Error::shape(
                "crf parameters",
                format!(
                    "L={num_labels}: transitions {}, start {}, end {}",
                    transitions.len(),
                    start.len(),
                    end.len()
                ),
            ));
        }
        let p = CrfParameters {
            num_labels,
            transitions,
            start,
            end,
        };
        if !p.transitions.iter().chain(&p.start).chain(&p.end).all(|v| v.is_finite()) {
            return Err(Error::InvalidValue("crf parameters must be finite".into()));
        }
        Ok(p)
    }

    #[inline]
    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * self.num_labels + to]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintMask {
    pub num_labels: usize,
    pub allowed_transition: Vec<bool>,
    pub allowed_start: Vec<bool>,
    pub allowed_end: Vec<bool>,
}

impl ConstraintMask {
    /// Mask that allows every path.
    pub fn unconstrained(num_labels: usize) -> Self {
        ConstraintMask {
            num_labels,
            allowed_transition: vec![true; num_labels * num_labels],
            allowed_start: vec![true; num_labels],
            allowed_end: vec![true; num_labels],
        }
    }

    #[inline]
    pub fn transition(&self, from: usize, to: usize) -> bool {
        self.allowed_transition[from * self.num_labels + to]
    }

    pub fn path_allowed(&self, path: &[usize]) -> bool {
        match (path.first(), path.last()) {
            (Some(&f), Some(&l)) => {
                self.allowed_start[f]
                    && self.allowed_end[l]
                    && path.windows(2).all(|w| self.transition(w[0], w[1]))
            }
            _ => true,
        }
    }

    pub fn num_disallowed_transitions(&self) -> usize {
        self.allowed_transition.iter().filter(|a| !**a).count()
    }
}

pub fn build_constraint_mask(scheme: &LabelScheme) -> ConstraintMask {
    let l = scheme.num_labels();
    let mut mask = ConstraintMask::unconstrained(l);
    for i in 0..l {
        for j in 0..l {
            mask.allowed_transition[i * l + j] = scheme.transition_allowed(Some(i), j);
        }
        mask.allowed_start[i] = scheme.transition_allowed(None, i);
    }
    mask
}

fn check_emissions(emissions: &Tensor, crf: &CrfParameters) -> Result<(usize, usize)> {
    let (w, l) = emissions.dims2();
    if emissions.shape().len() != 2 || l != crf.num_labels {
        return Err(Error::shape(
            "crf",
            format!("emissions {:?} for {} labels", emissions.shape(), crf.num_labels),
        ));
    }
    Ok((w, l))
}

fn check_labels(labels: &[usize], w: usize, l: usize) -> Result<()> {
    if labels.len() != w {
        return Err(Error::shape(
            "crf labels",
            format!("{} labels for {w} positions", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
        return Err(Error::OutOfBounds {
            op: "crf labels",
            index: bad,
            len: l,
        });
    }
    Ok(())
}

/// Unnormalized path score.
pub fn score_sequence(emissions: &Tensor, crf: &CrfParameters, labels: &[usize]) -> Result<f64> {
    let (w, l) = check_emissions(emissions, crf)?;
    check_labels(labels, w, l)?;
    let mut s = crf.start[labels[0]];
    for (t, &y) in labels.iter().enumerate() {
        s += emissions.at(t, y);
        if t > 0 {
            s += crf.transition(labels[t - 1], y);
        }
    }
    Ok(s + crf.end[labels[w - 1]])
}

struct Lattice {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_z: f64,
}

fn masked(score: f64, allowed: bool) -> f64 {
    if allowed {
        score
    } else {
        f64::NEG_INFINITY
    }
}

fn forward_backward(
    emissions: &Tensor,
    crf: &CrfParameters,
    mask: Option<&ConstraintMask>,
    need_beta: bool,
) -> Result<Lattice> {
    let (w, l) = check_emissions(emissions, crf)?;
    let trans = |i: usize, j: usize| masked(crf.transition(i, j), mask.is_none_or(|m| m.transition(i, j)));
    let mut alpha = vec![0.0; w * l];
    for j in 0..l {
        alpha[j] = masked(crf.start[j] + emissions.at(0, j), mask.is_none_or(|m| m.allowed_start[j]));
    }
    for t in 1..w {
        for j in 0..l {
            let prev = &alpha[(t - 1) * l..t * l];
            let lse = logsumexp_unchecked((0..l).map(|i| prev[i] + trans(i, j)));
            alpha[t * l + j] = emissions.at(t, j) + lse;
        }
    }
    let end = |j: usize| masked(crf.end[j], mask.is_none_or(|m| m.allowed_end[j]));
    let last = &alpha[(w - 1) * l..];
    let log_z = logsumexp_unchecked((0..l).map(|j| last[j] + end(j)));
    if !log_z.is_finite() {
        return Err(Error::InvalidValue(format!("crf log-partition is {log_z}")));
    }
    let mut beta = Vec::new();
    if need_beta {
        beta = vec![0.0; w * l];
        for j in 0..l {
            beta[(w - 1) * l + j] = end(j);
        }
        for t in (0..w - 1).rev() {
            for i in 0..l {
                let next = &beta[(t + 1) * l..(t + 2) * l];
                beta[t * l + i] = logsumexp_unchecked(
                    (0..l).map(|j| trans(i, j) + emissions.at(t + 1, j) + next[j]),
                );
            }
        }
    }
    Ok(Lattice { alpha, beta, log_z })
}

/// `log Σ_paths exp(score)` by the forward recursion.
pub fn log_partition(emissions: &Tensor, crf: &CrfParameters) -> Result<f64> {
    Ok(forward_backward(emissions, crf, None, false)?.log_z)
}

/// Log-partition restricted to paths allowed by `mask`.
pub fn log_partition_masked(emissions: &Tensor, crf: &CrfParameters, mask: &ConstraintMask) -> Result<f64> {
    Ok(forward_backward(emissions, crf, Some(mask), false)?.log_z)
}

/// Negative log-likelihood of `gold`; the partition is restricted to
/// `mask`-valid paths when a mask is given.
pub fn nll_loss(
    emissions: &Tensor,
    crf: &CrfParameters,
    gold: &[usize],
    mask: Option<&ConstraintMask>,
) -> Result<f64> {
    let score = score_sequence(emissions, crf, gold)?;
    if let Some(m) = mask {
        if !m.path_allowed(gold) {
            return Err(Error::InvalidValue("gold path violates the constraint mask".into()));
        }
    }
    let log_z = forward_backward(emissions, crf, mask, false)?.log_z;
    Ok(log_z - score)
}

/// Best mask-valid path and its score. Ties go to the lowest label id.
pub fn viterbi_decode(
    emissions: &Tensor,
    crf: &CrfParameters,
    mask: &ConstraintMask,
) -> Result<(Vec<usize>, f64)> {
    let (w, l) = check_emissions(emissions, crf)?;
    if mask.num_labels != l {
        return Err(Error::shape("viterbi", format!("mask for {} labels, crf has {l}", mask.num_labels)));
    }
    let mut delta = vec![f64::NEG_INFINITY; w * l];
    let mut back = vec![0usize; w * l];
    for j in 0..l {
        if mask.allowed_start[j] {
            delta[j] = crf.start[j] + emissions.at(0, j);
        }
    }
    for t in 1..w {
        for j in 0..l {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..l {
                if !mask.transition(i, j) {
                    continue;
                }
                let s = delta[(t - 1) * l + i] + crf.transition(i, j);
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            delta[t * l + j] = best + emissions.at(t, j);
            back[t * l + j] = arg;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = None;
    for j in 0..l {
        if !mask.allowed_end[j] {
            continue;
        }
        let s = delta[(w - 1) * l + j] + crf.end[j];
        if s > best {
            best = s;
            last = Some(j);
        }
    }
    let Some(mut y) = last else {
        return Err(Error::InvalidValue("no path satisfies the constraint mask".into()));
    };
    let mut path = vec![0; w];
    path[w - 1] = y;
    for t in (1..w).rev() {
        y = back[t * l + y];
        path[t - 1] = y;
    }
    let score = score_sequence(emissions, crf, &path)?;
    Ok((path, score))
}

/// Records the CRF negative log-likelihood on `tape` as one fused op over
/// `[emissions (W×L), transitions (L×L), start (L), end (L)]`. The backward
/// rule is expected counts minus gold counts.
pub fn crf_nll(
    tape: &mut Tape<'_>,
    emissions: Var,
    transitions: Var,
    start: Var,
    end: Var,
    gold: &[usize],
    mask: Option<&ConstraintMask>,
) -> Result<Var> {
    let e = tape.value(emissions).clone();
    let l = e.dims2().1;
    let crf = CrfParameters::new(
        l,
        tape.value(transitions).data().to_vec(),
        tape.value(start).data().to_vec(),
        tape.value(end).data().to_vec(),
    )?;
    let score = score_sequence(&e, &crf, gold)?;
    if let Some(m) = mask {
        if !m.path_allowed(gold) {
            return Err(Error::InvalidValue("gold path violates the constraint mask".into()));
        }
    }
    let lat = forward_backward(&e, &crf, mask, true)?;
    let w = gold.len();
    let z = lat.log_z;

    let mut d_emit = vec![0.0; w * l];
    let mut d_trans = vec![0.0; l * l];
    let mut d_start = vec![0.0; l];
    let mut d_end = vec![0.0; l];
    for t in 0..w {
        for j in 0..l {
            d_emit[t * l + j] = (lat.alpha[t * l + j] + lat.beta[t * l + j] - z).exp();
        }
    }
    d_start.copy_from_slice(&d_emit[..l]);
    d_end.copy_from_slice(&d_emit[(w - 1) * l..]);
    for t in 0..w.saturating_sub(1) {
        for i in 0..l {
            let a = lat.alpha[t * l + i];
            if a == f64::NEG_INFINITY {
                continue;
            }
            for j in 0..l {
                if mask.is_some_and(|m| !m.transition(i, j)) {
                    continue;
                }
                let s = a + crf.transition(i, j) + e.at(t + 1, j) + lat.beta[(t + 1) * l + j] - z;
                d_trans[i * l + j] += s.exp();
            }
        }
    }
    for (t, &y) in gold.iter().enumerate() {
        d_emit[t * l + y] -= 1.0;
        if t > 0 {
            d_trans[gold[t - 1] * l + y] -= 1.0;
        }
    }
    d_start[gold[0]] -= 1.0;
    d_end[gold[w - 1]] -= 1.0;

    let value = Tensor::scalar(z - score);
    Ok(tape.custom(
        &[emissions, transitions, start, end],
        value,
        Box::new(move |g| {
            let s = g[0];
            [&d_emit, &d_trans, &d_start, &d_end]
                .iter()
                .map(|v| v.iter().map(|x| x * s).collect())
                .collect()
        }),
    ))
}

/// Checked `logsumexp` over label scores at a single position, exposed for
/// the W=1 closed form.
pub fn single_position_log_partition(emissions: &[f64], crf: &CrfParameters) -> Result<f64> {
    let s: Vec<f64> = (0..crf.num_labels)
        .map(|j| crf.start[j] + emissions[j] + crf.end[j])
        .collect();
    logsumexp(&s)
}
