//! Small generated corpora with deterministic entity patterns.
//!
//! Entity mentions come from two fixed lexicons (`MTH`, `TSK`), so every
//! surface form has exactly one correct tag sequence. Several long words are
//! split into two pieces in the generated vocabulary so that first-subtoken
//! pooling is exercised.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tokenizer::{Vocabulary, CONTINUATION_PREFIX};

const METHODS: &[&str] = &[
    "transformer",
    "conditional random field",
    "bidirectional lstm",
    "attention",
    "gradient boosting",
];

const TASKS: &[&str] = &[
    "named entity recognition",
    "relation extraction",
    "parsing",
    "machine translation",
    "summarization",
];

const TEMPLATES: &[&str] = &[
    "we apply {M} to {T} .",
    "{M} improves {T} results .",
    "our new {M} model is evaluated on {T} .",
    "the study of {T} uses {M} and {M} .",
    "{T} with {M} .",
    "a baseline for {T} is {M} .",
];

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub sentences: Vec<(Vec<String>, Vec<String>)>,
    pub vocab: Vocabulary,
}

fn push_mention(words: &mut Vec<String>, tags: &mut Vec<String>, mention: &str, ty: &str) {
    for (i, w) in mention.split(' ').enumerate() {
        words.push(w.to_string());
        tags.push(if i == 0 { format!("B-{ty}") } else { format!("I-{ty}") });
    }
}

/// `n` sentences over a ~40-word vocabulary with entity types `MTH` and `TSK`.
pub fn generate(n: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::with_capacity(n);
    for _ in 0..n {
        let template = TEMPLATES.choose(&mut rng).unwrap();
        let mut words = Vec::new();
        let mut tags = Vec::new();
        for tok in template.split(' ') {
            match tok {
                "{M}" => push_mention(&mut words, &mut tags, METHODS[rng.gen_range(0..METHODS.len())], "MTH"),
                "{T}" => push_mention(&mut words, &mut tags, TASKS[rng.gen_range(0..TASKS.len())], "TSK"),
                w => {
                    words.push(w.to_string());
                    tags.push("O".to_string());
                }
            }
        }
        sentences.push((words, tags));
    }
    SyntheticCorpus {
        sentences,
        vocab: vocabulary(),
    }
}

/// Every word the generator can emit.
pub fn lexicon() -> Vec<String> {
    let mut words: Vec<String> = METHODS
        .iter()
        .chain(TASKS)
        .chain(TEMPLATES)
        .flat_map(|s| s.split(' '))
        .filter(|w| !w.starts_with('{'))
        .map(str::to_string)
        .collect();
    words.sort();
    words.dedup();
    words
}

/// Words longer than eight characters at even lexicon positions are split in
/// half; everything else is a whole-word entry.
pub fn vocabulary() -> Vocabulary {
    let mut pieces = Vec::new();
    for (i, w) in lexicon().iter().enumerate() {
        let chars: Vec<char> = w.chars().collect();
        if chars.len() > 8 && i % 2 == 0 {
            let mid = chars.len() / 2;
            pieces.push(chars[..mid].iter().collect::<String>());
            pieces.push(format!("{CONTINUATION_PREFIX}{}", chars[mid..].iter().collect::<String>()));
        } else {
            pieces.push(w.clone());
        }
    }
    pieces.sort();
    pieces.dedup();
    Vocabulary::new(pieces).expect("generated vocabulary is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::UNK;

    #[test]
    fn deterministic_and_covered() {
        let a = generate(50, 1);
        let b = generate(50, 1);
        assert_eq!(a.sentences, b.sentences);
        let lex = lexicon();
        assert!((30..=50).contains(&lex.len()), "lexicon size {}", lex.len());
        let mut split = 0;
        for w in &lex {
            let pieces = a.vocab.tokenize_word(w).unwrap();
            assert!(!pieces.iter().any(|p| p == UNK));
            if pieces.len() > 1 {
                split += 1;
            }
        }
        assert!(split >= 3);
        for (w, t) in &a.sentences {
            assert_eq!(w.len(), t.len());
        }
    }
}
