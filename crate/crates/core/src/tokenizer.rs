//! Greedy longest-match subword tokenization with first-subtoken tracking.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

pub const CONTINUATION_PREFIX: &str = "##";

/// Subword inventory. Ids are dense and the four specials occupy ids 0..=3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    prefix: String,
}

impl Vocabulary {
    /// Builds a vocabulary from regular (non-special) pieces; the specials
    /// are prepended. Duplicates and empty strings are rejected.
    pub fn new<I, S>(pieces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(pieces.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Builds from a full id-ordered token list whose first four entries are
    /// the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::InvalidValue(format!(
                "vocabulary must start with {SPECIALS:?}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::InvalidValue(format!("empty vocabulary entry at id {i}")));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidValue(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary {
            tokens,
            ids,
            prefix: CONTINUATION_PREFIX.to_string(),
        })
    }

    /// One token per line; the line number is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::from_tokens(tokens).map_err(|e| Error::Data {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Whole words plus every single character, both as a word-initial piece
    /// and as a continuation piece, so any word over the seen alphabet is
    /// coverable. Sorted for a stable id assignment.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut pieces = BTreeSet::new();
        for w in words {
            if w.is_empty() || SPECIALS.contains(&w) {
                continue;
            }
            pieces.insert(w.to_string());
            for c in w.chars() {
                pieces.insert(c.to_string());
                pieces.insert(format!("{CONTINUATION_PREFIX}{c}"));
            }
        }
        Self::new(pieces)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.ids.get(piece).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn continuation_prefix(&self) -> &str {
        &self.prefix
    }

    /// Greedy longest-match segmentation of one word. Falls back to a single
    /// `[UNK]` when any remainder cannot be matched.
    pub fn tokenize_word(&self, word: &str) -> Result<Vec<String>> {
        if word.is_empty() {
            return Err(Error::EmptyInput("tokenize_word"));
        }
        if word.chars().any(char::is_whitespace) {
            return Err(Error::InvalidValue(format!(
                "word `{word}` contains whitespace"
            )));
        }
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut cand: String = chars[start..end].iter().collect();
                if start > 0 {
                    cand.insert_str(0, &self.prefix);
                }
                if self.ids.contains_key(&cand) {
                    found = Some(cand);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(p) => {
                    pieces.push(p);
                    start = end;
                }
                None => return Ok(vec![UNK.to_string()]),
            }
        }
        Ok(pieces)
    }

    pub fn tokenize_sentence<S: AsRef<str>>(
        &self,
        words: &[S],
        add_boundaries: bool,
    ) -> Result<TokenizedSentence> {
        if words.is_empty() {
            return Err(Error::EmptyInput("tokenize_sentence"));
        }
        let mut subword_ids = Vec::new();
        let mut word_first_index = Vec::with_capacity(words.len());
        if add_boundaries {
            subword_ids.push(CLS_ID);
        }
        for w in words {
            word_first_index.push(subword_ids.len());
            for piece in self.tokenize_word(w.as_ref())? {
                subword_ids.push(self.ids[&piece]);
            }
        }
        if add_boundaries {
            subword_ids.push(SEP_ID);
        }
        Ok(TokenizedSentence {
            words: words.iter().map(|w| w.as_ref().to_string()).collect(),
            subword_ids,
            word_first_index,
        })
    }
}

/// A sentence's subword ids together with the position of each word's first
/// piece. Boundary tokens never appear in `word_first_index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub words: Vec<String>,
    pub subword_ids: Vec<u32>,
    pub word_first_index: Vec<usize>,
}

impl TokenizedSentence {
    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_subwords(&self) -> usize {
        self.subword_ids.len()
    }

    /// Appends `n` padding ids; word alignment is unchanged.
    pub fn padded(&self, n: usize) -> TokenizedSentence {
        let mut out = self.clone();
        out.subword_ids.extend(std::iter::repeat_n(PAD_ID, n));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn greedy_longest_match() {
        let v = Vocabulary::new(["un", "##iversity", "##iv"]).unwrap();
        assert_eq!(v.tokenize_word("university").unwrap(), ["un", "##iversity"]);
        assert_eq!(v.tokenize_word("xyz").unwrap(), [UNK]);
        // "un" + "##iv" + "ersity" is not coverable, so the whole word is UNK
        assert_eq!(v.tokenize_word("univ").unwrap(), ["un", "##iv"]);
        assert_eq!(v.tokenize_word("unive").unwrap(), [UNK]);
        assert!(v.tokenize_word("").is_err());
        assert!(v.tokenize_word("a b").is_err());
    }

    /// Every segmentation of `word` into vocabulary pieces, in order.
    fn all_segmentations(v: &Vocabulary, word: &str) -> Vec<Vec<String>> {
        fn rec(v: &Vocabulary, chars: &[char], start: usize, acc: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
            if start == chars.len() {
                out.push(acc.clone());
                return;
            }
            for end in start + 1..=chars.len() {
                let mut s: String = chars[start..end].iter().collect();
                if start > 0 {
                    s.insert_str(0, "##");
                }
                if v.id(&s).is_some() {
                    acc.push(s);
                    rec(v, chars, end, acc, out);
                    acc.pop();
                }
            }
        }
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        rec(v, &chars, 0, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn greedy_pick_among_all_segmentations() {
        let v = Vocabulary::new(["ab", "a", "##b", "##c"]).unwrap();
        let segs = all_segmentations(&v, "abc");
        assert_eq!(segs.len(), 2); // [a, ##b, ##c] and [ab, ##c]
        // greedy takes the segmentation whose first piece is longest
        let greedy = segs
            .iter()
            .max_by_key(|s| s.iter().map(|p| p.trim_start_matches("##").len()).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(greedy, &["ab", "##c"]);
        assert_eq!(&v.tokenize_word("abc").unwrap(), greedy);
    }

    #[test]
    fn sentence_alignment() {
        let v = Vocabulary::new(["the", "cat", "sat"]).unwrap();
        let s = v.tokenize_sentence(&["the", "cat", "sat"], false).unwrap();
        assert_eq!(s.word_first_index, [0, 1, 2]);

        let v = Vocabulary::new(["a", "bc", "##d", "e"]).unwrap();
        let s = v.tokenize_sentence(&["a", "bcd", "e"], true).unwrap();
        assert_eq!(s.word_first_index, [1, 2, 4]);
        assert_eq!(s.subword_ids.first(), Some(&CLS_ID));
        assert_eq!(s.subword_ids.last(), Some(&SEP_ID));
        assert!(v.tokenize_sentence::<&str>(&[], true).is_err());
    }

    #[test]
    fn vocabulary_validation() {
        assert!(Vocabulary::new(["x", "x"]).is_err());
        assert!(Vocabulary::new([""]).is_err());
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        let v = Vocabulary::new(["x"]).unwrap();
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.id(SEP), Some(3));
        assert_eq!(v.id("x"), Some(4));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::new(["alpha", "##beta"]).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        std::fs::write(&path, "[UNK]\n[PAD]\n[CLS]\n[SEP]\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }

    fn vocab_and_words() -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
        let piece = "[abc]{1,3}";
        (
            proptest::collection::btree_set(
                prop_oneof![piece.prop_map(|s| s), piece.prop_map(|s| format!("##{s}"))],
                1..15,
            ),
            proptest::collection::vec("[abcd]{1,6}", 1..8),
        )
            .prop_map(|(v, w)| (v.into_iter().collect(), w))
    }

    proptest! {
        #[test]
        fn alignment_matches_prefix_scan((pieces, words) in vocab_and_words(), bounds in any::<bool>()) {
            let v = Vocabulary::new(pieces).unwrap();
            let s = v.tokenize_sentence(&words, bounds).unwrap();
            prop_assert_eq!(s.word_first_index.len(), words.len());
            prop_assert!(s.word_first_index.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.word_first_index.iter().all(|&i| i < s.subword_ids.len()));
            // independent re-scan: a word starts at every piece without the
            // continuation prefix, boundary tokens excluded
            let starts: Vec<usize> = s.subword_ids.iter().enumerate()
                .filter(|(_, &id)| id != CLS_ID && id != SEP_ID)
                .filter(|(_, &id)| !v.token(id).unwrap().starts_with("##"))
                .map(|(i, _)| i)
                .collect();
            prop_assert_eq!(starts, s.word_first_index.clone());
            for w in &words {
                let pieces = v.tokenize_word(w).unwrap();
                prop_assert!(pieces == [UNK] || !pieces.iter().any(|p| p == UNK));
            }
        }
    }
}
