//! BLEU-4 scoring and greedy-decoding evaluation of both tasks.
//!
//! The primary score pools clipped n-gram counts over the whole corpus,
//! takes the geometric mean of the four precisions, and multiplies by
//! `min(1, output_len / reference_len)`; any empty pooled precision gives
//! zero. A smoothed variant (add-one on empty numerators, exponential
//! brevity penalty) is reported alongside, since the strict form collapses
//! to zero on weak models and hides progress.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Elem;
use crate::corpus::{tokenize_ws, ReviewTriplet};
use crate::seq2seq::Seq2Seq;
use crate::tokenizer::{TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("model vocab size {model} does not match vocabulary of {vocab} tokens")]
    VocabMismatch { model: usize, vocab: usize },
    #[error("encoding failed: {0}")]
    Encode(#[from] TokenizerError),
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *m.entry(&tokens[i..i + n]).or_default() += 1;
        }
    }
    m
}

/// Clipped matches and candidate count for one order.
fn clipped(out: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let cand = ngram_counts(out, n);
    let refc = ngram_counts(reference, n);
    let total: usize = cand.values().sum();
    let matched: usize = cand
        .iter()
        .map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

struct PooledCounts {
    matches: [usize; 4],
    candidates: [usize; 4],
    out_len: usize,
    ref_len: usize,
}

fn pool(outputs: &[String], references: &[String]) -> PooledCounts {
    assert_eq!(
        outputs.len(),
        references.len(),
        "{} outputs vs {} references",
        outputs.len(),
        references.len()
    );
    let mut p = PooledCounts {
        matches: [0; 4],
        candidates: [0; 4],
        out_len: 0,
        ref_len: 0,
    };
    for (o, r) in outputs.iter().zip(references) {
        let ot = tokenize_ws(o);
        let rt = tokenize_ws(r);
        p.out_len += ot.len();
        p.ref_len += rt.len();
        for n in 1..=4 {
            let (m, c) = clipped(&ot, &rt, n);
            p.matches[n - 1] += m;
            p.candidates[n - 1] += c;
        }
    }
    p
}

/// Corpus BLEU-4, strict form: zero if any pooled precision is zero,
/// length penalty `min(1, out_len / ref_len)`.
pub fn bleu4(outputs: &[String], references: &[String]) -> f64 {
    let p = pool(outputs, references);
    assert!(p.ref_len > 0, "references contain no tokens");
    let mut prod = 1.0f64;
    for n in 0..4 {
        if p.matches[n] == 0 || p.candidates[n] == 0 {
            return 0.0;
        }
        prod *= p.matches[n] as f64 / p.candidates[n] as f64;
    }
    let brevity = (p.out_len as f64 / p.ref_len as f64).min(1.0);
    brevity * prod.powf(0.25)
}

/// Corpus BLEU-4 with add-one smoothing on empty numerators and the
/// exponential brevity penalty. Zero only when an order has no candidate
/// n-grams at all or the output is empty.
pub fn bleu4_smoothed(outputs: &[String], references: &[String]) -> f64 {
    let p = pool(outputs, references);
    assert!(p.ref_len > 0, "references contain no tokens");
    if p.out_len == 0 {
        return 0.0;
    }
    let mut prod = 1.0f64;
    for n in 0..4 {
        if p.candidates[n] == 0 {
            return 0.0;
        }
        let pn = if p.matches[n] > 0 {
            p.matches[n] as f64 / p.candidates[n] as f64
        } else {
            1.0 / (p.candidates[n] + 1) as f64
        };
        prod *= pn;
    }
    let bp = if p.out_len >= p.ref_len {
        1.0
    } else {
        (1.0 - p.ref_len as f64 / p.out_len as f64).exp()
    };
    bp * prod.powf(0.25)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LangBleu {
    pub lang: String,
    pub bleu4: f64,
    pub smoothed: f64,
    pub count: usize,
}

/// Scores for one generation task over a test set. Scores are stored in
/// [0, 1]; `render_table` prints them scaled by 100.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu4: f64,
    pub smoothed: f64,
    /// Mean of per-sample smoothed scores, when requested.
    pub sentence_avg: Option<f64>,
    pub per_lang: Vec<LangBleu>,
    pub count: usize,
    /// Windows and flags the evaluation ran with, echoed for provenance.
    pub config: Option<EvalConfig>,
}

impl BleuReport {
    pub fn build(
        outputs: &[String],
        references: &[String],
        langs: &[String],
        sentence_avg: bool,
    ) -> BleuReport {
        let mut groups: BTreeMap<&str, (Vec<String>, Vec<String>)> = BTreeMap::new();
        for ((o, r), l) in outputs.iter().zip(references).zip(langs) {
            let e = groups.entry(l).or_default();
            e.0.push(o.clone());
            e.1.push(r.clone());
        }
        let per_lang = groups
            .into_iter()
            .map(|(lang, (o, r))| LangBleu {
                lang: lang.to_owned(),
                bleu4: bleu4(&o, &r),
                smoothed: bleu4_smoothed(&o, &r),
                count: o.len(),
            })
            .collect();
        let sentence_avg = sentence_avg.then(|| {
            let total: f64 = outputs
                .iter()
                .zip(references)
                .map(|(o, r)| {
                    bleu4_smoothed(
                        std::slice::from_ref(o),
                        std::slice::from_ref(r),
                    )
                })
                .sum();
            total / outputs.len().max(1) as f64
        });
        BleuReport {
            bleu4: bleu4(outputs, references),
            smoothed: bleu4_smoothed(outputs, references),
            sentence_avg,
            per_lang,
            count: outputs.len(),
            config: None,
        }
    }

    /// Fixed-width summary table; scores shown on the conventional
    /// 0..100 scale.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<10} {:>7} {:>9} {:>9}\n",
            "lang", "count", "bleu4", "smoothed"
        ));
        s.push_str(&format!(
            "{:<10} {:>7} {:>9.2} {:>9.2}\n",
            "all",
            self.count,
            self.bleu4 * 100.0,
            self.smoothed * 100.0
        ));
        for l in &self.per_lang {
            s.push_str(&format!(
                "{:<10} {:>7} {:>9.2} {:>9.2}\n",
                l.lang,
                l.count,
                l.bleu4 * 100.0,
                l.smoothed * 100.0
            ));
        }
        if let Some(sa) = self.sentence_avg {
            s.push_str(&format!("sentence-average smoothed: {:.2}\n", sa * 100.0));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub l_code: usize,
    pub l_rev: usize,
    pub sentence_avg: bool,
}

/// Greedy outputs plus the report they score.
pub struct EvalResult {
    pub report: BleuReport,
    pub outputs: Vec<String>,
}

fn check_inputs<E: Elem>(
    model: &Seq2Seq<E>,
    vocab: &Vocabulary,
    test: &[ReviewTriplet],
) -> Result<(), EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    if model.config().vocab_size != vocab.len() {
        return Err(EvalError::VocabMismatch {
            model: model.config().vocab_size,
            vocab: vocab.len(),
        });
    }
    Ok(())
}

/// Review generation: decode a review from each code window and score
/// against the reference review text.
pub fn evaluate_review_generation<E: Elem>(
    model: &Seq2Seq<E>,
    vocab: &Vocabulary,
    test: &[ReviewTriplet],
    cfg: &EvalConfig,
) -> Result<EvalResult, EvalError> {
    check_inputs(model, vocab, test)?;
    let mut outputs = Vec::with_capacity(test.len());
    for t in test {
        let src = vocab.encode_student_input(&t.code, cfg.l_code)?;
        let ids = model.greedy_decode(&src, cfg.l_rev - 1);
        outputs.push(vocab.decode(&ids));
    }
    let references: Vec<String> = test.iter().map(|t| t.review.clone()).collect();
    let langs: Vec<String> = test.iter().map(|t| t.lang.clone()).collect();
    let mut report = BleuReport::build(&outputs, &references, &langs, cfg.sentence_avg);
    report.config = Some(*cfg);
    Ok(EvalResult { report, outputs })
}

/// Code refinement: the model reads code plus the ground-truth review and
/// is scored against the reference refined code.
pub fn evaluate_refinement<E: Elem>(
    model: &Seq2Seq<E>,
    vocab: &Vocabulary,
    test: &[ReviewTriplet],
    cfg: &EvalConfig,
) -> Result<EvalResult, EvalError> {
    check_inputs(model, vocab, test)?;
    let mut outputs = Vec::with_capacity(test.len());
    for t in test {
        let src = vocab.encode_teacher_input(&t.code, &t.review, cfg.l_code, cfg.l_rev)?;
        let ids = model.greedy_decode(&src, cfg.l_code - 1);
        outputs.push(vocab.decode(&ids));
    }
    let references: Vec<String> = test.iter().map(|t| t.refined.clone()).collect();
    let langs: Vec<String> = test.iter().map(|t| t.lang.clone()).collect();
    let mut report = BleuReport::build(&outputs, &references, &langs, cfg.sentence_avg);
    report.config = Some(*cfg);
    Ok(EvalResult { report, outputs })
}
