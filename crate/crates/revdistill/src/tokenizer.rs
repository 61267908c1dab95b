//! Word-level vocabulary and fixed-window encoding.
//!
//! Ids 0..=4 are reserved sentinels. Corpus tokens get ids from 5 upward,
//! ordered by descending frequency with lexicographic tie-break, so a
//! vocabulary is a pure function of the corpus.
//!
//! Two window layouts exist:
//! * encoder inputs pad in the middle and keep `</s>` in the final slot,
//! * decoder targets place `</s>` directly after the content and pad the
//!   tail, which is what masked cross-entropy and greedy decoding expect.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Elem;
use crate::corpus::{tokenize_ws, ReviewTriplet};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MSG: u32 = 3;
pub const UNK: u32 = 4;

/// Sentinel literals, in id order.
pub const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<msg>", "<unk>"];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot access vocab file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("vocab file line {line}: {message}")]
    BadVocabFile { line: usize, message: String },
    #[error("window of {got} slots is too small; need at least {min}")]
    WindowTooSmall { got: usize, min: usize },
}

/// Token table with dense ids; sentinels occupy ids 0..=4.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from explicit non-sentinel tokens in the given order.
    pub fn from_tokens<I, S>(non_special: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in non_special {
            let t = t.into();
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Counts whitespace tokens over code, review, and refined fields of
    /// every triplet; orders by descending frequency, ties lexicographic.
    /// `max_size` caps the total table size including sentinels.
    pub fn from_corpus(triplets: &[ReviewTriplet], max_size: Option<usize>) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for t in triplets {
            for field in [&t.code, &t.review, &t.refined] {
                for tok in field.split_whitespace() {
                    if SPECIALS.contains(&tok) {
                        continue;
                    }
                    *counts.entry(tok.to_owned()).or_default() += 1;
                }
            }
        }
        let mut by_freq: Vec<(String, u64)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size
            .map(|m| m.saturating_sub(SPECIALS.len()))
            .unwrap_or(usize::MAX);
        Vocabulary::from_tokens(by_freq.into_iter().take(keep).map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a token; unknown tokens map to `<unk>`.
    pub fn lookup(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| TokenizerError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.to_owned(),
            source,
        })?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() + 1 {
            return Err(TokenizerError::BadVocabFile {
                line: lines.len(),
                message: format!(
                    "only {} entries; sentinels plus at least one token required",
                    lines.len()
                ),
            });
        }
        for (i, want) in SPECIALS.iter().enumerate() {
            if lines[i] != *want {
                return Err(TokenizerError::BadVocabFile {
                    line: i + 1,
                    message: format!("expected sentinel `{want}`, found `{}`", lines[i]),
                });
            }
        }
        let mut seen = HashMap::new();
        for (i, l) in lines.iter().enumerate() {
            if l.trim().is_empty() {
                return Err(TokenizerError::BadVocabFile {
                    line: i + 1,
                    message: "blank token entry".into(),
                });
            }
            if let Some(prev) = seen.insert(*l, i + 1) {
                return Err(TokenizerError::BadVocabFile {
                    line: i + 1,
                    message: format!("duplicate token, first seen at line {prev}"),
                });
            }
        }
        Ok(Vocabulary::from_tokens(
            lines[SPECIALS.len()..].iter().map(|s| s.to_string()),
        ))
    }

    /// Encoder input for the review generator: `[<s> | code | pads | </s>]`,
    /// exactly `l_code` ids, code truncated to `l_code - 2` tokens.
    pub fn encode_student_input(
        &self,
        code: &str,
        l_code: usize,
    ) -> Result<EncodedInput, TokenizerError> {
        if l_code < 3 {
            return Err(TokenizerError::WindowTooSmall { got: l_code, min: 3 });
        }
        let toks = tokenize_ws(code);
        let slots = l_code - 2;
        let used = toks.len().min(slots);
        let mut ids = Vec::with_capacity(l_code);
        ids.push(BOS);
        ids.extend(toks.iter().take(used).map(|t| self.lookup(t)));
        ids.resize(l_code - 1, PAD);
        ids.push(EOS);
        Ok(EncodedInput {
            ids,
            content: vec![0..used + 1],
        })
    }

    /// Encoder input for the refinement model:
    /// `[<s> | code | pads | <msg> | review | pads | </s>]`, exactly
    /// `l_code + l_rev` ids. The code region has `l_code - 2` slots, the
    /// review region `l_rev - 1`.
    pub fn encode_teacher_input(
        &self,
        code: &str,
        review: &str,
        l_code: usize,
        l_rev: usize,
    ) -> Result<EncodedInput, TokenizerError> {
        if l_code < 3 {
            return Err(TokenizerError::WindowTooSmall { got: l_code, min: 3 });
        }
        if l_rev < 2 {
            return Err(TokenizerError::WindowTooSmall { got: l_rev, min: 2 });
        }
        let code_toks = tokenize_ws(code);
        let rev_toks = tokenize_ws(review);
        let code_slots = l_code - 2;
        let rev_slots = l_rev - 1;
        let code_used = code_toks.len().min(code_slots);
        let rev_used = rev_toks.len().min(rev_slots);
        let mut ids = Vec::with_capacity(l_code + l_rev);
        ids.push(BOS);
        ids.extend(code_toks.iter().take(code_used).map(|t| self.lookup(t)));
        ids.resize(l_code - 1, PAD);
        ids.push(MSG);
        ids.extend(rev_toks.iter().take(rev_used).map(|t| self.lookup(t)));
        ids.resize(l_code + l_rev - 1, PAD);
        ids.push(EOS);
        Ok(EncodedInput {
            ids,
            content: vec![0..code_used + 1, l_code - 1..l_code + rev_used],
        })
    }

    /// Decoder target: `[<s> | tokens | </s> | pads]`, exactly `l` ids,
    /// tokens truncated to `l - 2`.
    pub fn encode_target(&self, text: &str, l: usize) -> Result<TokenSequence, TokenizerError> {
        if l < 3 {
            return Err(TokenizerError::WindowTooSmall { got: l, min: 3 });
        }
        let toks = tokenize_ws(text);
        let used = toks.len().min(l - 2);
        let mut ids = Vec::with_capacity(l);
        ids.push(BOS);
        ids.extend(toks.iter().take(used).map(|t| self.lookup(t)));
        ids.push(EOS);
        ids.resize(l, PAD);
        Ok(TokenSequence {
            ids,
            raw_length: used + 2,
        })
    }

    /// Joins tokens with spaces, skipping `<pad>`/`<s>` and stopping at the
    /// first `</s>`. Ids outside the table render as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                other => words.push(self.token(other).unwrap_or(SPECIALS[UNK as usize])),
            }
        }
        words.join(" ")
    }
}

/// Slot range of the review region inside a teacher input window.
pub fn teacher_review_region(l_code: usize, l_rev: usize) -> Range<usize> {
    l_code..l_code + l_rev - 1
}

/// An encoder input window: fixed-length ids plus the ranges of real
/// (attendable) positions. Sentinels that carry structure (`<s>`, `<msg>`)
/// are attendable; pads and the terminal `</s>` slot are reachable through
/// `attention_mask`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    content: Vec<Range<usize>>,
}

impl EncodedInput {
    /// 1.0 where the position holds a real token, 0.0 on padding. The
    /// terminal `</s>` is treated as real.
    pub fn attention_mask<E: Elem>(&self) -> Vec<E> {
        let mut m = vec![E::ZERO; self.ids.len()];
        for r in &self.content {
            for v in &mut m[r.clone()] {
                *v = E::ONE;
            }
        }
        if let Some(last) = m.last_mut() {
            *last = E::ONE;
        }
        m
    }
}

/// Decoder-side sequence: `</s>` sits at `raw_length - 1` and every later
/// slot is `<pad>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub raw_length: usize,
}

impl TokenSequence {
    /// Teacher-forcing inputs: all but the last id.
    pub fn decoder_inputs(&self) -> &[u32] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Labels aligned with `decoder_inputs`: ids shifted left by one.
    /// Positions at or beyond `raw_length - 1` are padding and must not be
    /// supervised.
    pub fn labels(&self) -> &[u32] {
        &self.ids[1..]
    }

    /// 1.0 on supervised label positions (content tokens plus `</s>`).
    pub fn label_mask<E: Elem>(&self) -> Vec<E> {
        (0..self.ids.len() - 1)
            .map(|i| if i < self.raw_length - 1 { E::ONE } else { E::ZERO })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["x", "=", "1", "fix", "a", "b"])
    }

    #[test]
    fn sentinels_have_fixed_ids() {
        let v = vocab();
        assert_eq!(v.lookup("<pad>"), PAD);
        assert_eq!(v.lookup("<s>"), BOS);
        assert_eq!(v.lookup("</s>"), EOS);
        assert_eq!(v.lookup("<msg>"), MSG);
        assert_eq!(v.lookup("<unk>"), UNK);
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(v.token(4), Some("<unk>"));
    }

    #[test]
    fn student_input_pads_before_final_eos() {
        let v = vocab();
        let x = v.lookup("x");
        let eq = v.lookup("=");
        let one = v.lookup("1");
        let enc = v.encode_student_input("x = 1", 8).unwrap();
        assert_eq!(enc.ids, vec![BOS, x, eq, one, PAD, PAD, PAD, EOS]);
        assert_eq!(
            enc.attention_mask::<f64>(),
            vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn teacher_input_is_code_msg_review_eos() {
        let v = vocab();
        let (x, eq, one, fix) = (v.lookup("x"), v.lookup("="), v.lookup("1"), v.lookup("fix"));
        let enc = v.encode_teacher_input("x = 1", "fix x", 8, 6).unwrap();
        assert_eq!(enc.ids.len(), 14);
        assert_eq!(
            enc.ids,
            vec![BOS, x, eq, one, PAD, PAD, PAD, MSG, fix, x, PAD, PAD, PAD, EOS]
        );
        assert_eq!(teacher_review_region(8, 6), 8..13);
    }

    #[test]
    fn truncation_keeps_leading_tokens() {
        let v = Vocabulary::from_tokens(["t0", "t1", "t2", "t3", "t4", "t5", "t6"]);
        let enc = v.encode_student_input("t0 t1 t2 t3 t4 t5 t6", 6).unwrap();
        assert_eq!(enc.ids.len(), 6);
        assert_eq!(enc.ids[1..5], [5, 6, 7, 8]);
        assert_eq!(enc.ids[5], EOS);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = vocab();
        let enc = v.encode_student_input("x zzz", 5).unwrap();
        assert_eq!(enc.ids, vec![BOS, v.lookup("x"), UNK, PAD, EOS]);
    }

    #[test]
    fn empty_review_leaves_region_as_pads() {
        let v = vocab();
        let enc = v.encode_teacher_input("x", "  ", 4, 3).unwrap();
        assert_eq!(enc.ids, vec![BOS, v.lookup("x"), PAD, MSG, PAD, PAD, EOS]);
    }

    #[test]
    fn target_layout_has_eos_then_pads() {
        let v = vocab();
        let t = v.encode_target("x = 1", 8).unwrap();
        assert_eq!(
            t.ids,
            vec![BOS, v.lookup("x"), v.lookup("="), v.lookup("1"), EOS, PAD, PAD, PAD]
        );
        assert_eq!(t.raw_length, 5);
        assert_eq!(t.ids[t.raw_length - 1], EOS);
        assert!(t.ids[t.raw_length..].iter().all(|&i| i == PAD));
        assert_eq!(t.label_mask::<f64>(), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.decoder_inputs().len(), 7);
        assert_eq!(t.labels().len(), 7);
        assert_eq!(t.labels()[3], EOS);
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let mk = |code: &str| ReviewTriplet {
            code: code.into(),
            review: "r".into(),
            refined: "q".into(),
            lang: "toy".into(),
        };
        let corpus = vec![mk("b a"), mk("a b"), mk("c")];
        let v = Vocabulary::from_corpus(&corpus, None);
        // a and b tie at 2, so lexicographic order decides; r and q tie at 3.
        assert_eq!(v.lookup("q"), 5);
        assert_eq!(v.lookup("r"), 6);
        assert_eq!(v.lookup("a"), 7);
        assert_eq!(v.lookup("b"), 8);
        assert_eq!(v.lookup("c"), 9);
    }

    #[test]
    fn vocab_cap_keeps_most_frequent() {
        let mk = |code: &str| ReviewTriplet {
            code: code.into(),
            review: "common".into(),
            refined: "common".into(),
            lang: "toy".into(),
        };
        let corpus = vec![mk("rare common"), mk("common")];
        let v = Vocabulary::from_corpus(&corpus, Some(6));
        assert_eq!(v.len(), 6);
        assert_eq!(v.lookup("common"), 5);
        assert_eq!(v.lookup("rare"), UNK);
    }

    #[test]
    fn vocab_file_round_trips() {
        let v = vocab();
        let f = tempfile::NamedTempFile::new().unwrap();
        v.save(f.path()).unwrap();
        let back = Vocabulary::load(f.path()).unwrap();
        assert_eq!(back.len(), v.len());
        assert_eq!(back.lookup("fix"), v.lookup("fix"));
    }

    #[test]
    fn corrupted_vocab_file_is_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "<pad>\n<s>\nWRONG\n<msg>\n<unk>\nx\n").unwrap();
        match Vocabulary::load(f.path()).unwrap_err() {
            TokenizerError::BadVocabFile { line: 3, .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn decode_strips_sentinels_and_stops_at_eos() {
        let v = vocab();
        let ids = vec![BOS, v.lookup("x"), v.lookup("="), EOS, v.lookup("1"), PAD];
        assert_eq!(v.decode(&ids), "x =");
        assert_eq!(v.decode(&[PAD, PAD]), "");
        assert_eq!(v.decode(&[BOS, 999, EOS]), "<unk>");
    }

    #[test]
    fn window_too_small_is_an_error() {
        let v = vocab();
        assert!(matches!(
            v.encode_student_input("x", 2),
            Err(TokenizerError::WindowTooSmall { got: 2, min: 3 })
        ));
        assert!(matches!(
            v.encode_teacher_input("x", "r", 8, 1),
            Err(TokenizerError::WindowTooSmall { got: 1, min: 2 })
        ));
    }

    proptest! {
        /// Targets round-trip through decode whenever the text fits.
        #[test]
        fn target_decode_round_trip(idx in proptest::collection::vec(0usize..6, 1..6)) {
            let words = ["x", "=", "1", "fix", "a", "b"];
            let v = vocab();
            let text = idx.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
            let t = v.encode_target(&text, 8).unwrap();
            prop_assert_eq!(v.decode(&t.ids), text);
        }

        /// Encoder windows always have the requested length, bos first,
        /// eos last.
        #[test]
        fn encoder_window_shape(n in 0usize..20, l in 3usize..12) {
            let v = vocab();
            let code = vec!["x"; n].join(" ");
            let enc = v.encode_student_input(&code, l).unwrap();
            prop_assert_eq!(enc.ids.len(), l);
            prop_assert_eq!(enc.ids[0], BOS);
            prop_assert_eq!(enc.ids[l - 1], EOS);
        }
    }
}
