//! Training loops for both phases: teacher pre-finetuning on hard inputs,
//! and joint training where the student's predicted review distributions
//! feed the refinement model through the soft bridge.
//!
//! Every batch builds one graph, runs one backward pass, and applies one
//! optimizer step per trainable model. All randomness (shuffling, dropout)
//! comes from the run seed, so identical configs replay identical runs
//! down to the bit; the per-epoch wall clock is printed but kept out of
//! the serialized run log for that reason.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, Tensor};
use crate::corpus::CorpusSplit;
use crate::distill::{
    combine_losses, cross_entropy, embed_alignment, pooled_embedding, review_active_mask,
    select_hidden, soft_review_source, student_review_dists, BridgeConfig, LossWeights,
    PoolConfig,
};
use crate::eval::{evaluate_refinement, evaluate_review_generation, EvalConfig, EvalError};
use crate::seq2seq::{
    load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta, ModelConfig, ModelError,
    Seq2Seq,
};
use crate::tokenizer::{EncodedInput, TokenSequence, TokenizerError, Vocabulary};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RUN_LOG_FORMAT: u32 = 1;

/// Consecutive over-threshold epochs before a run is declared divergent.
const DIVERGENCE_PATIENCE: usize = 3;
/// Divergence threshold as a multiple of the first epoch's total loss.
const DIVERGENCE_FACTOR: f64 = 10.0;

/// Sha-256 hex digest of a value's canonical JSON form; the identity that
/// run artifacts carry.
pub fn json_digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    let mut h = Sha256::new();
    h.update(&bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tokenize(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("validation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(
        "training diverged at epoch {epoch}: total loss {total:.4} stayed above \
         {DIVERGENCE_FACTOR}x the initial {initial:.4} for {DIVERGENCE_PATIENCE} epochs"
    )]
    Diverged {
        epoch: usize,
        total: f64,
        initial: f64,
    },
    #[error("teacher checkpoint config differs from the run config: {0}")]
    TeacherMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run log line {line}: {message}")]
    BadRunLog { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Prefinetune,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    L1,
    L2,
}

/// One run's complete recipe. Hash it with [`TrainConfig::hash`] to tag
/// artifacts; identical hashes mean identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub objective: Objective,
    /// Explicit term weights; when absent the objective picks its default
    /// (L1: alpha=beta=0.5, L2: equal thirds).
    pub weights: Option<LossWeights>,
    /// Fold the teacher loss into the student term (the coupled form).
    pub couple_teacher_loss: bool,
    pub bridge: BridgeConfig,
    pub pool: PoolConfig,
    /// When false, joint training runs the student alone: no teacher, no
    /// bridge. The comparison baseline.
    pub distill: bool,
    /// Keep teacher parameters fixed during joint training; gradients
    /// still flow through the teacher into the student.
    pub freeze_teacher: bool,
    /// Pre-finetuning feeds the ground-truth review next to the code;
    /// turning this off blanks the review region.
    pub prefinetune_use_review: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Drives shuffling and dropout. Model inits use the seeds inside the
    /// model configs.
    pub seed: u64,
    /// Validate every this many epochs (and always on the last); 0 means
    /// last epoch only.
    pub eval_every: usize,
    /// Source window for code, bos and eos included.
    pub l_code: usize,
    /// Review window: target window for the student, review region plus
    /// terminal eos in the teacher's source.
    pub l_rev: usize,
    pub student: ModelConfig,
    pub teacher: ModelConfig,
    /// Checkpoint to initialize the teacher from in the joint phase.
    pub teacher_init: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Joint,
            objective: Objective::L1,
            weights: None,
            couple_teacher_loss: true,
            bridge: BridgeConfig::default(),
            pool: PoolConfig::default(),
            distill: true,
            freeze_teacher: false,
            prefinetune_use_review: true,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            eval_every: 5,
            // Window defaults follow the default grammar: programs cap at
            // 22 tokens and reviews at 6, plus sentinels.
            l_code: 24,
            l_rev: 10,
            student: ModelConfig {
                max_src_len: 24,
                max_tgt_len: 10,
                ..ModelConfig::default()
            },
            teacher: ModelConfig {
                max_src_len: 34,
                max_tgt_len: 24,
                ..ModelConfig::default()
            },
            teacher_init: None,
        }
    }
}

impl TrainConfig {
    /// Explicit weights if given, otherwise the objective's defaults.
    pub fn resolved_weights(&self) -> LossWeights {
        self.weights.unwrap_or(match self.objective {
            Objective::L1 => LossWeights::without_alignment(),
            Objective::L2 => LossWeights::with_alignment(),
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        let w = self.resolved_weights();
        if let Err(m) = w.validate() {
            return bad(m);
        }
        if self.objective == Objective::L1 && w.gamma != 0.0 {
            return bad(format!("objective L1 cannot carry gamma {}", w.gamma));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.l_code < 3 || self.l_rev < 3 {
            return bad(format!(
                "windows l_code {} and l_rev {} must each be at least 3",
                self.l_code, self.l_rev
            ));
        }
        self.student.validate()?;
        self.teacher.validate()?;
        if self.student.vocab_size != self.teacher.vocab_size {
            return bad(format!(
                "the bridge needs one shared vocabulary, got student {} vs teacher {}",
                self.student.vocab_size, self.teacher.vocab_size
            ));
        }
        if self.student.max_src_len < self.l_code || self.student.max_tgt_len < self.l_rev {
            return bad(format!(
                "student windows ({}, {}) do not cover l_code {} / l_rev {}",
                self.student.max_src_len, self.student.max_tgt_len, self.l_code, self.l_rev
            ));
        }
        if self.teacher.max_src_len < self.l_code + self.l_rev
            || self.teacher.max_tgt_len < self.l_code
        {
            return bad(format!(
                "teacher windows ({}, {}) do not cover l_code {} + l_rev {}",
                self.teacher.max_src_len, self.teacher.max_tgt_len, self.l_code, self.l_rev
            ));
        }
        if w.gamma > 0.0 && self.student.d_model != self.teacher.d_model {
            return bad(format!(
                "the alignment term compares pooled vectors, so d_model must match \
                 (student {} vs teacher {})",
                self.student.d_model, self.teacher.d_model
            ));
        }
        if !self.distill {
            if w.beta != 0.0 || w.gamma != 0.0 {
                return bad(format!(
                    "a student-only run has no teacher terms; set beta and gamma to 0 \
                     (got beta {} gamma {})",
                    w.beta, w.gamma
                ));
            }
            if self.couple_teacher_loss {
                return bad("a student-only run cannot couple the teacher loss".into());
            }
            if self.teacher_init.is_some() {
                return bad("a student-only run cannot take a teacher checkpoint".into());
            }
        }
        if self.phase == Phase::Prefinetune && self.teacher_init.is_some() {
            return bad("pre-finetuning initializes its own teacher".into());
        }
        Ok(())
    }

    /// Sha-256 over the canonical serialized config.
    pub fn hash(&self) -> String {
        json_digest(self)
    }

    pub fn from_toml_file(path: &Path) -> Result<TrainConfig, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}

/// First line of every run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub format: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Weights after objective defaults are applied.
    pub weights: LossWeights,
    pub config: TrainConfig,
}

/// One epoch's training means and validation scores. Loss terms a run
/// does not compute stay `None` rather than zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce_student: Option<f64>,
    pub loss_teacher: Option<f64>,
    pub loss_embed: Option<f64>,
    pub total: f64,
    /// Log arguments that hit the probability floor this epoch.
    pub clamped: usize,
    pub val_bleu_review: Option<f64>,
    pub val_bleu_refine: Option<f64>,
    /// Measured, printed, but not serialized: keeping the clock out of the
    /// artifact is what makes reruns byte-identical.
    #[serde(skip)]
    pub wall_secs: f64,
}

impl EpochRecord {
    /// Relative gap between the logged total and the weighted sum of the
    /// logged terms; the trainer guarantees this stays within 1e-6.
    pub fn accounting_residual(&self, w: &LossWeights, couple: bool) -> f64 {
        let ce = self.ce_student.unwrap_or(0.0);
        let lt = self.loss_teacher.unwrap_or(0.0);
        let le = self.loss_embed.unwrap_or(0.0);
        let student_term = if couple { ce + lt } else { ce };
        let recon = w.alpha * student_term + w.beta * lt + w.gamma * le;
        (self.total - recon).abs() / self.total.abs().max(1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub header: RunHeader,
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    /// Header line followed by one JSON line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<RunLog, TrainError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(TrainError::BadRunLog {
            line: 1,
            message: "empty run log".into(),
        })?;
        let header: RunHeader =
            serde_json::from_str(first).map_err(|e| TrainError::BadRunLog {
                line: 1,
                message: e.to_string(),
            })?;
        if header.format != RUN_LOG_FORMAT {
            return Err(TrainError::BadRunLog {
                line: 1,
                message: format!(
                    "format {} unsupported (expected {RUN_LOG_FORMAT})",
                    header.format
                ),
            });
        }
        let mut epochs = Vec::new();
        for (i, l) in lines {
            epochs.push(serde_json::from_str(l).map_err(|e| TrainError::BadRunLog {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(RunLog { header, epochs })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<RunLog, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunLog::from_jsonl(&text)
    }
}

/// Where a run writes its artifacts; all optional, for in-memory runs.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub run_log: Option<PathBuf>,
    /// Best student by validation review BLEU.
    pub student_checkpoint: Option<PathBuf>,
    /// Best teacher by validation refinement BLEU (pre-finetuning), or the
    /// final joint teacher.
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Artifacts {
    pub fn none() -> Artifacts {
        Artifacts::default()
    }
}

pub struct TrainResult {
    pub run_log: RunLog,
    /// Student restored to its best validation state (final state when the
    /// run never validated).
    pub student: Option<Seq2Seq<f32>>,
    pub teacher: Option<Seq2Seq<f32>>,
    pub best_val_review: Option<f64>,
    pub best_val_refine: Option<f64>,
}

/// Watches epoch totals; errors after enough consecutive epochs above the
/// divergence threshold.
struct DivergenceGuard {
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    fn new() -> Self {
        DivergenceGuard {
            initial: None,
            streak: 0,
        }
    }

    fn observe(&mut self, epoch: usize, total: f64) -> Result<(), TrainError> {
        let Some(initial) = self.initial else {
            self.initial = Some(total);
            return Ok(());
        };
        if total > DIVERGENCE_FACTOR * initial {
            self.streak += 1;
            if self.streak >= DIVERGENCE_PATIENCE {
                return Err(TrainError::Diverged {
                    epoch,
                    total,
                    initial,
                });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

/// Pre-encoded windows for one triplet.
struct Sample {
    student_src: EncodedInput,
    review_tgt: TokenSequence,
    teacher_src: EncodedInput,
    refined_tgt: TokenSequence,
}

fn encode_samples(
    triplets: &[crate::corpus::ReviewTriplet],
    vocab: &Vocabulary,
    l_code: usize,
    l_rev: usize,
    prefinetune_use_review: bool,
) -> Result<Vec<Sample>, TrainError> {
    triplets
        .iter()
        .map(|t| {
            let review_in = if prefinetune_use_review { t.review.as_str() } else { "" };
            Ok(Sample {
                student_src: vocab.encode_student_input(&t.code, l_code)?,
                review_tgt: vocab.encode_target(&t.review, l_rev)?,
                teacher_src: vocab.encode_teacher_input(&t.code, review_in, l_code, l_rev)?,
                refined_tgt: vocab.encode_target(&t.refined, l_code)?,
            })
        })
        .collect()
}

fn snapshot(model: &Seq2Seq<f32>) -> Vec<Vec<f32>> {
    model.params().iter().map(|p| p.to_vec()).collect()
}

fn restore(model: &Seq2Seq<f32>, snap: &[Vec<f32>]) {
    for (p, s) in model.params().iter().zip(snap) {
        p.update_values(|vals| vals.copy_from_slice(s));
    }
}

fn should_eval(epoch: usize, epochs: usize, eval_every: usize) -> bool {
    epoch == epochs || (eval_every > 0 && epoch % eval_every == 0)
}

fn checkpoint_meta(cfg: &TrainConfig) -> CheckpointMeta {
    CheckpointMeta {
        config_hash: cfg.hash(),
        tool_version: TOOL_VERSION.into(),
    }
}

fn print_epoch(verbose: bool, phase: &str, rec: &EpochRecord) {
    if !verbose {
        return;
    }
    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    eprintln!(
        "{phase} epoch {:>3}  total {:.4}  ce_s {}  l_t {}  l_e {}  bleu_rev {}  bleu_ref {}  {:.1}s",
        rec.epoch,
        rec.total,
        fmt_opt(rec.ce_student),
        fmt_opt(rec.loss_teacher),
        fmt_opt(rec.loss_embed),
        fmt_opt(rec.val_bleu_review),
        fmt_opt(rec.val_bleu_refine),
        rec.wall_secs,
    );
}

/// Entry point for both phases. `teacher_init` hands over an in-memory
/// teacher for the joint phase (the pipeline normally passes a checkpoint
/// path in the config instead).
pub fn train(
    cfg: &TrainConfig,
    split: &CorpusSplit,
    vocab: &Vocabulary,
    teacher_init: Option<Seq2Seq<f32>>,
    artifacts: &Artifacts,
    verbose: bool,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if vocab.len() != cfg.student.vocab_size {
        return Err(TrainError::InvalidConfig(format!(
            "config expects vocab of {}, vocabulary has {} tokens",
            cfg.student.vocab_size,
            vocab.len()
        )));
    }
    if split.train.is_empty() {
        return Err(TrainError::InvalidConfig("training split is empty".into()));
    }
    match cfg.phase {
        Phase::Prefinetune => {
            if teacher_init.is_some() {
                return Err(TrainError::InvalidConfig(
                    "pre-finetuning initializes its own teacher".into(),
                ));
            }
            train_prefinetune(cfg, split, vocab, artifacts, verbose)
        }
        Phase::Joint => train_joint(cfg, split, vocab, teacher_init, artifacts, verbose),
    }
}

fn run_header(cfg: &TrainConfig) -> RunHeader {
    RunHeader {
        format: RUN_LOG_FORMAT,
        tool_version: TOOL_VERSION.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        weights: cfg.resolved_weights(),
        config: cfg.clone(),
    }
}

fn eval_cfg(cfg: &TrainConfig) -> EvalConfig {
    EvalConfig {
        l_code: cfg.l_code,
        l_rev: cfg.l_rev,
        sentence_avg: false,
    }
}

fn train_prefinetune(
    cfg: &TrainConfig,
    split: &CorpusSplit,
    vocab: &Vocabulary,
    artifacts: &Artifacts,
    verbose: bool,
) -> Result<TrainResult, TrainError> {
    let teacher = Seq2Seq::<f32>::new(cfg.teacher.clone())?;
    let samples = encode_samples(
        &split.train,
        vocab,
        cfg.l_code,
        cfg.l_rev,
        cfg.prefinetune_use_review,
    )?;
    let mut adam = Adam::new(
        teacher.params(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut guard = DivergenceGuard::new();
    let mut log = RunLog {
        header: run_header(cfg),
        epochs: Vec::new(),
    };
    let mut best: Option<(f64, Vec<Vec<f32>>)> = None;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let ecfg = eval_cfg(cfg);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut ce_sum = 0.0f64;
        let mut clamped = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let inv = 1.0 / batch.len() as f32;
            let mut terms: Vec<(f32, Tensor<f32>)> = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &samples[i];
                let dropout_rng = (cfg.teacher.dropout > 0.0).then_some(&mut rng);
                let out = teacher.forward_teacher_forced(&s.teacher_src, &s.refined_tgt, dropout_rng);
                let mask: Vec<f32> = s.refined_tgt.label_mask();
                let ce = cross_entropy(&out.logits, s.refined_tgt.labels(), &mask);
                ce_sum += ce.loss.value() as f64;
                clamped += ce.clamped;
                terms.push((inv, ce.loss));
            }
            let batch_loss = Tensor::linear_combination(&terms);
            if !batch_loss.value().is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b + 1,
                });
            }
            batch_loss.backward();
            adam.step();
            adam.zero_grads();
        }
        let total = ce_sum / samples.len() as f64;
        guard.observe(epoch, total)?;

        let mut rec = EpochRecord {
            epoch,
            ce_student: None,
            loss_teacher: Some(total),
            loss_embed: None,
            total,
            clamped,
            val_bleu_review: None,
            val_bleu_refine: None,
            wall_secs: 0.0,
        };
        if should_eval(epoch, cfg.epochs, cfg.eval_every) {
            let r = evaluate_refinement(&teacher, vocab, &split.validation, &ecfg)?;
            rec.val_bleu_refine = Some(r.report.bleu4);
            let improved = best.as_ref().map_or(true, |(b, _)| r.report.bleu4 > *b);
            if improved {
                best = Some((r.report.bleu4, snapshot(&teacher)));
                if let Some(p) = &artifacts.teacher_checkpoint {
                    save_checkpoint(&teacher, &checkpoint_meta(cfg), p)?;
                }
            }
        }
        rec.wall_secs = started.elapsed().as_secs_f64();
        print_epoch(verbose, "prefinetune", &rec);
        log.epochs.push(rec);
    }
    let best_val_refine = best.as_ref().map(|(b, _)| *b);
    if let Some((_, snap)) = &best {
        restore(&teacher, snap);
    }
    if let Some(p) = &artifacts.run_log {
        log.save(p)?;
    }
    Ok(TrainResult {
        run_log: log,
        student: None,
        teacher: Some(teacher),
        best_val_review: None,
        best_val_refine,
    })
}

fn joint_teacher(
    cfg: &TrainConfig,
    teacher_init: Option<Seq2Seq<f32>>,
) -> Result<Seq2Seq<f32>, TrainError> {
    if let Some(t) = teacher_init {
        if *t.config() != cfg.teacher {
            return Err(TrainError::TeacherMismatch(
                "passed-in teacher was built from a different model config".into(),
            ));
        }
        return Ok(t);
    }
    if let Some(path) = &cfg.teacher_init {
        let (t, _meta) = load_checkpoint(path)?;
        if *t.config() != cfg.teacher {
            return Err(TrainError::TeacherMismatch(format!(
                "checkpoint {} carries a different model config",
                path.display()
            )));
        }
        return Ok(t);
    }
    Ok(Seq2Seq::<f32>::new(cfg.teacher.clone())?)
}

fn train_joint(
    cfg: &TrainConfig,
    split: &CorpusSplit,
    vocab: &Vocabulary,
    teacher_init: Option<Seq2Seq<f32>>,
    artifacts: &Artifacts,
    verbose: bool,
) -> Result<TrainResult, TrainError> {
    let w = cfg.resolved_weights();
    let student = Seq2Seq::<f32>::new(cfg.student.clone())?;
    let teacher = if cfg.distill {
        Some(joint_teacher(cfg, teacher_init)?)
    } else {
        if teacher_init.is_some() {
            return Err(TrainError::InvalidConfig(
                "a student-only run cannot take a teacher".into(),
            ));
        }
        None
    };
    let samples = encode_samples(&split.train, vocab, cfg.l_code, cfg.l_rev, true)?;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut student_adam = Adam::new(student.params(), adam_cfg.clone());
    let mut teacher_adam = match &teacher {
        Some(t) if !cfg.freeze_teacher => Some(Adam::new(t.params(), adam_cfg)),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut guard = DivergenceGuard::new();
    let mut log = RunLog {
        header: run_header(cfg),
        epochs: Vec::new(),
    };
    let mut best: Option<(f64, Vec<Vec<f32>>)> = None;
    let mut best_val_refine: Option<f64> = None;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let ecfg = eval_cfg(cfg);
    let needs_align = w.gamma > 0.0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut ce_sum = 0.0f64;
        let mut lt_sum = 0.0f64;
        let mut le_sum = 0.0f64;
        let mut total_sum = 0.0f64;
        let mut clamped = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let inv = 1.0 / batch.len() as f32;
            let mut terms: Vec<(f32, Tensor<f32>)> = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &samples[i];
                let dropout_rng = (cfg.student.dropout > 0.0).then_some(&mut rng);
                let s_out = student.forward_teacher_forced(&s.student_src, &s.review_tgt, dropout_rng);
                let s_mask: Vec<f32> = s.review_tgt.label_mask();
                let ce = cross_entropy(&s_out.logits, s.review_tgt.labels(), &s_mask);
                ce_sum += ce.loss.value() as f64;
                clamped += ce.clamped;

                let total_i = if let Some(t) = &teacher {
                    let dists = student_review_dists(&s_out.logits, &cfg.bridge);
                    let active = review_active_mask::<f32>(&s.review_tgt, cfg.l_rev);
                    let soft = soft_review_source(
                        &dists,
                        &active,
                        t.embedding(),
                        &s.teacher_src,
                        cfg.l_code,
                        cfg.l_rev,
                    );
                    let dropout_rng = (cfg.teacher.dropout > 0.0).then_some(&mut rng);
                    let t_out =
                        t.forward_soft_source(&soft.embeddings, &soft.key_mask, &s.refined_tgt, dropout_rng);
                    let t_mask: Vec<f32> = s.refined_tgt.label_mask();
                    let lt = cross_entropy(&t_out.logits, s.refined_tgt.labels(), &t_mask);
                    lt_sum += lt.loss.value() as f64;
                    clamped += lt.clamped;
                    let le = needs_align.then(|| {
                        let e_r =
                            pooled_embedding(select_hidden(&s_out, cfg.pool.source), &s_mask, cfg.pool.kind);
                        let e_c =
                            pooled_embedding(select_hidden(&t_out, cfg.pool.source), &t_mask, cfg.pool.kind);
                        let le = embed_alignment(&e_r, &e_c);
                        le_sum += le.value() as f64;
                        le
                    });
                    combine_losses(&w, cfg.couple_teacher_loss, &ce.loss, Some(&lt.loss), le.as_ref())
                } else {
                    combine_losses(&w, false, &ce.loss, None, None)
                };
                total_sum += total_i.value() as f64;
                terms.push((inv, total_i));
            }
            let batch_loss = Tensor::linear_combination(&terms);
            if !batch_loss.value().is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b + 1,
                });
            }
            batch_loss.backward();
            student_adam.step();
            student_adam.zero_grads();
            if let Some(ta) = &mut teacher_adam {
                ta.step();
                ta.zero_grads();
            } else if let Some(t) = &teacher {
                // Frozen teacher: drop the pass-through gradients.
                for p in t.params() {
                    p.zero_grad();
                }
            }
        }
        let n = samples.len() as f64;
        let total = total_sum / n;
        guard.observe(epoch, total)?;

        let mut rec = EpochRecord {
            epoch,
            ce_student: Some(ce_sum / n),
            loss_teacher: teacher.is_some().then(|| lt_sum / n),
            loss_embed: needs_align.then(|| le_sum / n),
            total,
            clamped,
            val_bleu_review: None,
            val_bleu_refine: None,
            wall_secs: 0.0,
        };
        debug_assert!(
            rec.accounting_residual(&w, cfg.couple_teacher_loss && teacher.is_some()) < 1e-6,
            "loss accounting broke at epoch {epoch}"
        );
        if should_eval(epoch, cfg.epochs, cfg.eval_every) {
            let r = evaluate_review_generation(&student, vocab, &split.validation, &ecfg)?;
            rec.val_bleu_review = Some(r.report.bleu4);
            if let Some(t) = &teacher {
                let tr = evaluate_refinement(t, vocab, &split.validation, &ecfg)?;
                rec.val_bleu_refine = Some(tr.report.bleu4);
                if best_val_refine.map_or(true, |b| tr.report.bleu4 > b) {
                    best_val_refine = Some(tr.report.bleu4);
                }
            }
            let improved = best.as_ref().map_or(true, |(b, _)| r.report.bleu4 > *b);
            if improved {
                best = Some((r.report.bleu4, snapshot(&student)));
                if let Some(p) = &artifacts.student_checkpoint {
                    save_checkpoint(&student, &checkpoint_meta(cfg), p)?;
                }
            }
        }
        rec.wall_secs = started.elapsed().as_secs_f64();
        print_epoch(verbose, "joint", &rec);
        log.epochs.push(rec);
    }
    let best_val_review = best.as_ref().map(|(b, _)| *b);
    if let Some((_, snap)) = &best {
        restore(&student, snap);
    }
    if let Some(t) = &teacher {
        if let Some(p) = &artifacts.teacher_checkpoint {
            save_checkpoint(t, &checkpoint_meta(cfg), p)?;
        }
    }
    if let Some(p) = &artifacts.run_log {
        log.save(p)?;
    }
    Ok(TrainResult {
        run_log: log,
        student: Some(student),
        teacher,
        best_val_review,
        best_val_refine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, GrammarConfig};

    fn tiny_model(vocab: usize, seed: u64, max_src: usize, max_tgt: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_src_len: max_src,
            max_tgt_len: max_tgt,
            seed,
            ..ModelConfig::default()
        }
    }

    fn tiny_setup(n: usize) -> (CorpusSplit, Vocabulary) {
        let g = GrammarConfig::default();
        let triplets = generate_synthetic(n, 11, &g).unwrap();
        let vocab = Vocabulary::from_corpus(&triplets, None);
        let split = CorpusSplit {
            train: triplets.clone(),
            validation: triplets[..4.min(n)].to_vec(),
            test: Vec::new(),
            seed: 11,
        };
        (split, vocab)
    }

    fn tiny_cfg(vocab: usize, phase: Phase) -> TrainConfig {
        TrainConfig {
            phase,
            epochs: 3,
            batch_size: 4,
            lr: 1e-3,
            seed: 5,
            eval_every: 0,
            l_code: 24,
            l_rev: 10,
            student: tiny_model(vocab, 1, 24, 10),
            teacher: tiny_model(vocab, 2, 34, 24),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_names_the_problem() {
        let (_, vocab) = tiny_setup(8);
        let mut cfg = tiny_cfg(vocab.len(), Phase::Joint);
        cfg.student.max_src_len = 8;
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(m)) if m.contains("student windows")));
        let mut cfg = tiny_cfg(vocab.len(), Phase::Joint);
        cfg.distill = false;
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(m)) if m.contains("beta")));
        cfg.weights = Some(LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        });
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(m)) if m.contains("couple")));
        cfg.couple_teacher_loss = false;
        assert!(cfg.validate().is_ok());
        let mut cfg = tiny_cfg(vocab.len(), Phase::Joint);
        cfg.objective = Objective::L1;
        cfg.weights = Some(LossWeights::with_alignment());
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(m)) if m.contains("gamma")));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let (_, vocab) = tiny_setup(8);
        let cfg = tiny_cfg(vocab.len(), Phase::Joint);
        assert_eq!(cfg.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn divergence_guard_requires_three_consecutive_epochs() {
        let mut g = DivergenceGuard::new();
        g.observe(1, 1.0).unwrap();
        g.observe(2, 11.0).unwrap();
        g.observe(3, 12.0).unwrap();
        g.observe(4, 2.0).unwrap(); // streak resets
        g.observe(5, 11.0).unwrap();
        g.observe(6, 11.0).unwrap();
        let err = g.observe(7, 11.0).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { epoch: 7, .. }));
    }

    #[test]
    fn joint_training_reduces_loss_and_logs_consistently() {
        let (split, vocab) = tiny_setup(8);
        let mut cfg = tiny_cfg(vocab.len(), Phase::Joint);
        cfg.epochs = 8;
        cfg.eval_every = 4;
        cfg.objective = Objective::L2;
        let res = train(&cfg, &split, &vocab, None, &Artifacts::none(), false).unwrap();
        let log = &res.run_log;
        assert_eq!(log.epochs.len(), 8);
        assert!(
            log.epochs[7].total < log.epochs[0].total,
            "loss failed to drop: {} -> {}",
            log.epochs[0].total,
            log.epochs[7].total
        );
        let w = cfg.resolved_weights();
        for rec in &log.epochs {
            assert!(
                rec.accounting_residual(&w, cfg.couple_teacher_loss) < 1e-6,
                "epoch {} total {} is not the weighted term sum",
                rec.epoch,
                rec.total
            );
            assert!(rec.loss_embed.is_some());
        }
        assert!(log.epochs[3].val_bleu_review.is_some());
        assert!(log.epochs[3].val_bleu_refine.is_some());
        assert!(log.epochs[0].val_bleu_review.is_none());
        assert!(res.best_val_review.is_some());
    }

    #[test]
    fn same_seed_replays_identical_runs() {
        let (split, vocab) = tiny_setup(8);
        let mut cfg = tiny_cfg(vocab.len(), Phase::Joint);
        cfg.epochs = 4;
        let a = train(&cfg, &split, &vocab, None, &Artifacts::none(), false).unwrap();
        let b = train(&cfg, &split, &vocab, None, &Artifacts::none(), false).unwrap();
        assert_eq!(a.run_log.to_jsonl(), b.run_log.to_jsonl());
        let (sa, sb) = (a.student.unwrap(), b.student.unwrap());
        for (x, y) in sa.params().iter().zip(sb.params()) {
            let xv = x.to_vec();
            let yv = y.to_vec();
            for (p, q) in xv.iter().zip(&yv) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn zero_gamma_l2_matches_l1_bit_for_bit() {
        let (split, vocab) = tiny_setup(8);
        let mut l1 = tiny_cfg(vocab.len(), Phase::Joint);
        l1.epochs = 4;
        let mut l2 = l1.clone();
        l2.objective = Objective::L2;
        l2.weights = Some(LossWeights {
            gamma: 0.0,
            ..LossWeights::without_alignment()
        });
        let a = train(&l1, &split, &vocab, None, &Artifacts::none(), false).unwrap();
        let b = train(&l2, &split, &vocab, None, &Artifacts::none(), false).unwrap();
        for (ra, rb) in a.run_log.epochs.iter().zip(&b.run_log.epochs) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
            assert_eq!(ra.ce_student, rb.ce_student);
            assert_eq!(rb.loss_embed, None);
        }
        let (sa, sb) = (a.student.unwrap(), b.student.unwrap());
        for (x, y) in sa.params().iter().zip(sb.params()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn one_optimizer_step_per_model_per_batch() {
        let (split, vocab) = tiny_setup(8);
        let mut cfg = tiny_cfg(vocab.len(), Phase::Joint);
        cfg.epochs = 2;
        cfg.batch_size = 3; // 8 samples -> 3 batches per epoch
        let res = train(&cfg, &split, &vocab, None, &Artifacts::none(), false).unwrap();
        // The optimizer's step counter is not exposed through TrainResult;
        // infer steps from Adam's bias correction instead: rebuild and
        // replay would be circular, so check the run simply completed with
        // the expected epoch count and both models updated.
        assert_eq!(res.run_log.epochs.len(), 2);
        let fresh = Seq2Seq::<f32>::new(cfg.teacher.clone()).unwrap();
        let trained = res.teacher.unwrap();
        let moved = fresh
            .params()
            .iter()
            .zip(trained.params())
            .any(|(a, b)| a.to_vec() != b.to_vec());
        assert!(moved, "teacher parameters never moved");
    }

    #[test]
    fn frozen_teacher_parameters_do_not_move() {
        let (split, vocab) = tiny_setup(8);
        let mut cfg = tiny_cfg(vocab.len(), Phase::Joint);
        cfg.epochs = 2;
        cfg.freeze_teacher = true;
        let res = train(&cfg, &split, &vocab, None, &Artifacts::none(), false).unwrap();
        let fresh = Seq2Seq::<f32>::new(cfg.teacher.clone()).unwrap();
        let trained = res.teacher.unwrap();
        for (a, b) in fresh.params().iter().zip(trained.params()) {
            assert_eq!(a.to_vec(), b.to_vec(), "frozen teacher moved");
        }
    }

    #[test]
    fn prefinetune_then_joint_pipeline_runs() {
        let (split, vocab) = tiny_setup(8);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("teacher.ckpt");
        let mut pre = tiny_cfg(vocab.len(), Phase::Prefinetune);
        pre.epochs = 2;
        pre.eval_every = 1;
        let arts = Artifacts {
            teacher_checkpoint: Some(ckpt.clone()),
            ..Artifacts::none()
        };
        let res = train(&pre, &split, &vocab, None, &arts, false).unwrap();
        assert!(res.best_val_refine.is_some());
        assert!(ckpt.exists());

        let mut joint = tiny_cfg(vocab.len(), Phase::Joint);
        joint.epochs = 2;
        joint.teacher_init = Some(ckpt);
        let res = train(&joint, &split, &vocab, None, &Artifacts::none(), false).unwrap();
        assert_eq!(res.run_log.epochs.len(), 2);

        // A checkpoint built under a different teacher config is refused.
        let mut wrong = joint.clone();
        wrong.teacher = tiny_model(vocab.len(), 3, 40, 26);
        assert!(matches!(
            train(&wrong, &split, &vocab, None, &Artifacts::none(), false),
            Err(TrainError::TeacherMismatch(_))
        ));
    }

    #[test]
    fn nan_teacher_aborts_with_coordinates() {
        let (split, vocab) = tiny_setup(8);
        let mut cfg = tiny_cfg(vocab.len(), Phase::Joint);
        let poisoned = Seq2Seq::<f32>::new(cfg.teacher.clone()).unwrap();
        poisoned.params()[0].update_values(|v| v[0] = f32::NAN);
        cfg.epochs = 1;
        let err = match train(&cfg, &split, &vocab, Some(poisoned), &Artifacts::none(), false) {
            Err(e) => e,
            Ok(_) => panic!("training on NaN parameters must abort"),
        };
        assert!(
            matches!(err, TrainError::NonFinite { epoch: 1, batch: 1 }),
            "got {err:?}"
        );
    }

    #[test]
    fn run_log_round_trips_and_rejects_garbage() {
        let (split, vocab) = tiny_setup(8);
        let mut cfg = tiny_cfg(vocab.len(), Phase::Joint);
        cfg.epochs = 2;
        cfg.eval_every = 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let arts = Artifacts {
            run_log: Some(path.clone()),
            ..Artifacts::none()
        };
        let res = train(&cfg, &split, &vocab, None, &arts, false).unwrap();
        let loaded = RunLog::load(&path).unwrap();
        assert_eq!(loaded.header, res.run_log.header);
        assert_eq!(loaded.epochs.len(), 2);
        assert_eq!(loaded.header.config_hash, cfg.hash());
        assert_eq!(loaded.to_jsonl(), res.run_log.to_jsonl());

        assert!(matches!(
            RunLog::from_jsonl(""),
            Err(TrainError::BadRunLog { line: 1, .. })
        ));
        let mut text = res.run_log.to_jsonl();
        text.push_str("{\"epoch\": broken\n");
        assert!(matches!(
            RunLog::from_jsonl(&text),
            Err(TrainError::BadRunLog { line: 4, .. })
        ));
    }

    #[test]
    fn baseline_run_has_no_teacher_terms() {
        let (split, vocab) = tiny_setup(8);
        let mut cfg = tiny_cfg(vocab.len(), Phase::Joint);
        cfg.distill = false;
        cfg.couple_teacher_loss = false;
        cfg.weights = Some(LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        });
        cfg.epochs = 2;
        let res = train(&cfg, &split, &vocab, None, &Artifacts::none(), false).unwrap();
        assert!(res.teacher.is_none());
        for rec in &res.run_log.epochs {
            assert_eq!(rec.loss_teacher, None);
            assert_eq!(rec.loss_embed, None);
            assert_eq!(rec.total, rec.ce_student.unwrap());
        }
    }
}
