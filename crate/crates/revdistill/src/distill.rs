//! Cross-task distillation pieces: masked cross-entropy, the weighted
//! joint objectives, pooled embedding alignment, and the soft review
//! bridge that feeds student-predicted review distributions into the
//! refinement model's input window.
//!
//! Loss terms with zero weight are never added to the graph, so a zero
//! alignment weight reproduces the two-term objective bit for bit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Elem, Tensor};
use crate::seq2seq::ForwardOutput;
use crate::tokenizer::{EncodedInput, TokenSequence, EOS, PAD};

/// Probabilities below this floor are clamped before the log; clamped
/// positions contribute a finite loss and a zero gradient.
pub const PROB_FLOOR: f64 = 1e-12;

/// Scalar loss plus how many probabilities hit the clamp floor.
pub struct CeLoss<E: Elem> {
    pub loss: Tensor<E>,
    pub clamped: usize,
}

/// Token-level cross-entropy against one-hot labels, averaged over masked
/// positions: `-mean_i log softmax(logits)[i, labels[i]]`.
pub fn cross_entropy<E: Elem>(logits: &Tensor<E>, labels: &[u32], mask: &[E]) -> CeLoss<E> {
    let probs = logits.softmax_rows();
    let picked = probs.gather_index(labels);
    let (logp, clamped) = picked.ln_clamped(E::from_f64(PROB_FLOOR));
    CeLoss {
        loss: logp.masked_mean(mask).scale(-E::ONE),
        clamped,
    }
}

/// Weights of the joint objective's terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    /// Equal student/teacher weighting, no alignment term.
    pub fn without_alignment() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.0,
        }
    }

    /// Equal thirds across student, teacher, and alignment.
    pub fn with_alignment() -> Self {
        LossWeights {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(format!(
                "loss weights must be non-negative, got {self:?}"
            ));
        }
        if self.alpha + self.beta + self.gamma <= 0.0 {
            return Err("at least one loss weight must be positive".into());
        }
        Ok(())
    }
}

/// Assembles the joint objective.
///
/// The student term is `ce_student + teacher` when `couple` is set (the
/// student loss carries the refinement loss inside it), else `ce_student`
/// alone. Terms with zero weight are skipped structurally: they are not
/// built into the graph at all, and their inputs may be `None`.
pub fn combine_losses<E: Elem>(
    w: &LossWeights,
    couple: bool,
    ce_student: &Tensor<E>,
    teacher: Option<&Tensor<E>>,
    embed_align: Option<&Tensor<E>>,
) -> Tensor<E> {
    debug_assert!(w.validate().is_ok(), "invalid weights {w:?}");
    let mut terms: Vec<(E, Tensor<E>)> = Vec::with_capacity(3);
    if w.alpha > 0.0 {
        let l_s = if couple {
            let t = teacher.expect("coupled student loss requires the teacher loss");
            ce_student.add(t)
        } else {
            ce_student.clone()
        };
        terms.push((E::from_f64(w.alpha), l_s));
    }
    if w.beta > 0.0 {
        let t = teacher.expect("beta > 0 requires the teacher loss");
        terms.push((E::from_f64(w.beta), t.clone()));
    }
    if w.gamma > 0.0 {
        let a = embed_align.expect("gamma > 0 requires the alignment loss");
        terms.push((E::from_f64(w.gamma), a.clone()));
    }
    Tensor::linear_combination(&terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolSource {
    DecoderHidden,
    EncoderHidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    MaskedMean,
    FinalPosition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub source: PoolSource,
    pub kind: PoolKind,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            source: PoolSource::DecoderHidden,
            kind: PoolKind::MaskedMean,
        }
    }
}

/// Pools hidden rows into one `[d]` vector: either the mask-weighted mean
/// or the last masked row.
pub fn pooled_embedding<E: Elem>(hidden: &Tensor<E>, mask: &[E], kind: PoolKind) -> Tensor<E> {
    match kind {
        PoolKind::MaskedMean => hidden.masked_mean_rows(mask),
        PoolKind::FinalPosition => {
            let last = mask
                .iter()
                .rposition(|&m| m != E::ZERO)
                .expect("pooling mask selects no rows");
            let mut one = vec![E::ZERO; mask.len()];
            one[last] = E::ONE;
            hidden.masked_mean_rows(&one)
        }
    }
}

/// Picks which hidden stack a pooled embedding reads from.
pub fn select_hidden<'a, E: Elem>(
    out: &'a ForwardOutput<E>,
    source: PoolSource,
) -> &'a Tensor<E> {
    match source {
        PoolSource::DecoderHidden => &out.decoder_hidden,
        PoolSource::EncoderHidden => &out.encoder_hidden,
    }
}

/// Alignment term: mean squared error between the pooled review embedding
/// and the pooled refined-code embedding.
pub fn embed_alignment<E: Elem>(e_review: &Tensor<E>, e_code: &Tensor<E>) -> Tensor<E> {
    e_review.mse(e_code)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    /// Snap distributions to hard argmax one-hots, keeping the soft
    /// gradient (straight-through).
    pub straight_through: bool,
    /// Cut the gradient path from the teacher loss back into the student.
    pub detach_feedback: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            straight_through: false,
            detach_feedback: false,
        }
    }
}

/// Student review distributions for the bridge: row-wise softmax over the
/// teacher-forced logits, with the configured straight-through and detach
/// transforms applied.
pub fn student_review_dists<E: Elem>(student_logits: &Tensor<E>, cfg: &BridgeConfig) -> Tensor<E> {
    let mut dists = student_logits.softmax_rows();
    if cfg.straight_through {
        dists = dists.hard_onehot_st();
    }
    if cfg.detach_feedback {
        dists = dists.detach();
    }
    dists
}

/// 1.0 on review-region slots that carry a real review token. The student
/// target `[<s> | r_1..r_k | </s> | pads]` supplies k; slots j < k are
/// active and the rest stay padding, exactly as in the hard encoding.
pub fn review_active_mask<E: Elem>(review_target: &TokenSequence, l_rev: usize) -> Vec<E> {
    let k = review_target.raw_length - 2;
    (0..l_rev - 1)
        .map(|j| if j < k { E::ONE } else { E::ZERO })
        .collect()
}

/// A teacher source window built from soft review content.
pub struct SoftSource<E: Elem> {
    /// `[l_code + l_rev, d]` raw embedding rows.
    pub embeddings: Tensor<E>,
    /// Attention key mask for those rows.
    pub key_mask: Vec<E>,
}

/// Builds the teacher's source window with the review region replaced by
/// expected embeddings under `review_dists`.
///
/// Row j of the review region is `dists[j] @ embedding` where slot j is
/// active, and the `<pad>` embedding elsewhere, so exact one-hot
/// distributions reproduce the hard-encoded window exactly. Code slots,
/// `<msg>`, and the terminal `</s>` come from `teacher_input` unchanged.
pub fn soft_review_source<E: Elem>(
    review_dists: &Tensor<E>,
    active: &[E],
    teacher_embedding: &Tensor<E>,
    teacher_input: &EncodedInput,
    l_code: usize,
    l_rev: usize,
) -> SoftSource<E> {
    let r = l_rev - 1;
    assert_eq!(
        review_dists.shape()[0],
        r,
        "bridge got {} distribution rows for {} review slots",
        review_dists.shape()[0],
        r
    );
    assert_eq!(
        review_dists.shape()[1],
        teacher_embedding.shape()[0],
        "bridge vocabulary mismatch: {} dist columns vs {} embedding rows",
        review_dists.shape()[1],
        teacher_embedding.shape()[0]
    );
    assert_eq!(
        teacher_input.ids.len(),
        l_code + l_rev,
        "teacher window is {} ids, expected {}",
        teacher_input.ids.len(),
        l_code + l_rev
    );
    assert_eq!(active.len(), r);

    let soft = review_dists.matmul(teacher_embedding);
    let pad_rows = teacher_embedding.embed(&vec![PAD; r]);
    let inactive: Vec<E> = active.iter().map(|&a| E::ONE - a).collect();
    let region = soft.scale_rows(active).add(&pad_rows.scale_rows(&inactive));

    let head = teacher_embedding.embed(&teacher_input.ids[..l_code]);
    let tail = teacher_embedding.embed(&[EOS]);
    let embeddings = Tensor::concat_rows(&[head, region, tail]);

    let mut key_mask: Vec<E> = teacher_input.attention_mask();
    for (j, &a) in active.iter().enumerate() {
        key_mask[l_code + j] = a;
    }
    SoftSource {
        embeddings,
        key_mask,
    }
}
