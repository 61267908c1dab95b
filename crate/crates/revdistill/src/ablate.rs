//! Paired ablation suites: two arms trained on the same data with matched
//! seeds, differing in exactly one training choice. Each suite pre-finetunes
//! one teacher, hands every treated arm its own copy, and scores the
//! best-validation student of every run on the held-out test split.
//!
//! The teacher configuration is pinned across seeds: treated arms share the
//! one pre-finetuned teacher, and untreated arms start from the same raw
//! initialization every seed, so a pair differs only in the treatment and
//! in the student-side randomness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusSplit;
use crate::distill::LossWeights;
use crate::eval::{evaluate_review_generation, EvalConfig, EvalError};
use crate::seq2seq::ModelConfig;
use crate::tokenizer::Vocabulary;
use crate::training::{
    train, Artifacts, Objective, Phase, RunLog, TrainConfig, TrainError, TOOL_VERSION,
};

#[derive(Debug, Error)]
pub enum AblateError {
    #[error("invalid ablation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which single choice the suite varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Distilled student against a student trained on plain cross-entropy.
    Distill,
    /// Pre-finetuned teacher against a randomly initialized one.
    Prefinetune,
    /// Objective with the embedding-alignment term against the one without.
    Alignment,
}

impl Suite {
    pub fn slug(self) -> &'static str {
        match self {
            Suite::Distill => "distill",
            Suite::Prefinetune => "prefinetune",
            Suite::Alignment => "alignment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    pub suite: Suite,
    /// Seed offsets; each pairs one treated run with one control run.
    pub seeds: Vec<u64>,
    /// Epochs for the suite's single teacher pre-finetuning run.
    pub prefinetune_epochs: usize,
    /// Joint-phase template every arm is derived from. Its `phase` and
    /// `teacher_init` are overridden per arm.
    pub base: TrainConfig,
    /// Receives the teacher checkpoint, per-run logs and checkpoints, and
    /// the report.
    pub out_dir: PathBuf,
}

impl AblateConfig {
    pub fn new(suite: Suite, base: TrainConfig, out_dir: PathBuf) -> Self {
        AblateConfig {
            suite,
            seeds: (0..5).collect(),
            prefinetune_epochs: 15,
            base,
            out_dir,
        }
    }

    pub fn validate(&self) -> Result<(), AblateError> {
        if self.seeds.is_empty() {
            return Err(AblateError::InvalidConfig("no seeds given".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(AblateError::InvalidConfig(
                "duplicate seeds would double-count pairs".into(),
            ));
        }
        if self.prefinetune_epochs == 0 {
            return Err(AblateError::InvalidConfig(
                "prefinetune_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One trained arm at one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub config_hash: String,
    pub best_val_bleu: Option<f64>,
    /// Review-generation BLEU of the best-validation student on the test
    /// split; the quantity the suite compares.
    pub test_bleu: f64,
    pub run_log: RunLog,
}

/// Outcome of one seed's treated-vs-control pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub seed: u64,
    pub treatment_bleu: f64,
    pub control_bleu: f64,
    /// Ties go to the treatment: a change that costs nothing is kept.
    pub treatment_wins: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateReport {
    pub suite: Suite,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub treatment: String,
    pub control: String,
    pub prefinetune_log: Option<RunLog>,
    pub runs: Vec<ArmRun>,
    pub pairs: Vec<PairOutcome>,
    pub treatment_wins: usize,
}

impl AblateReport {
    pub fn save(&self, path: &Path) -> Result<(), AblateError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|source| AblateError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<AblateReport, AblateError> {
        let text = std::fs::read_to_string(path).map_err(|source| AblateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| AblateError::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// Shifts the run and student seeds by the pair's offset. The teacher seed
/// stays put so every arm's teacher config matches the suite's one
/// pre-finetuned teacher.
fn with_seed(base: &TrainConfig, offset: u64) -> TrainConfig {
    TrainConfig {
        phase: Phase::Joint,
        seed: base.seed.wrapping_add(offset),
        student: ModelConfig {
            seed: base.student.seed.wrapping_add(offset),
            ..base.student.clone()
        },
        ..base.clone()
    }
}

/// The two arm configs for one seed, treatment first. Exposed so a rerun
/// can rebuild the exact recipe of any recorded run.
pub fn arm_configs(
    suite: Suite,
    base: &TrainConfig,
    seed_offset: u64,
    teacher_ckpt: &Path,
) -> Vec<(String, TrainConfig)> {
    let common = with_seed(base, seed_offset);
    let treated = TrainConfig {
        distill: true,
        teacher_init: Some(teacher_ckpt.to_path_buf()),
        ..common.clone()
    };
    match suite {
        Suite::Distill => vec![
            ("distilled".into(), treated),
            (
                "baseline".into(),
                TrainConfig {
                    distill: false,
                    weights: Some(LossWeights {
                        alpha: 1.0,
                        beta: 0.0,
                        gamma: 0.0,
                    }),
                    couple_teacher_loss: false,
                    teacher_init: None,
                    ..common
                },
            ),
        ],
        Suite::Prefinetune => vec![
            ("with-prefinetune".into(), treated),
            (
                "without-prefinetune".into(),
                TrainConfig {
                    distill: true,
                    teacher_init: None,
                    ..common
                },
            ),
        ],
        // Explicit weights would make both arms identical, so the arms drop
        // them and let each objective pick its defaults.
        Suite::Alignment => vec![
            (
                "l2".into(),
                TrainConfig {
                    objective: Objective::L2,
                    weights: None,
                    ..treated.clone()
                },
            ),
            (
                "l1".into(),
                TrainConfig {
                    objective: Objective::L1,
                    weights: None,
                    ..treated
                },
            ),
        ],
    }
}

fn prefinetune_config(cfg: &AblateConfig) -> TrainConfig {
    TrainConfig {
        phase: Phase::Prefinetune,
        epochs: cfg.prefinetune_epochs,
        teacher_init: None,
        ..cfg.base.clone()
    }
}

/// Runs the whole suite: one teacher pre-finetuning, then both arms at
/// every seed. Deterministic end to end; rerunning into the same directory
/// reproduces every artifact byte for byte.
pub fn run_suite(
    cfg: &AblateConfig,
    split: &CorpusSplit,
    vocab: &Vocabulary,
    verbose: bool,
) -> Result<AblateReport, AblateError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| AblateError::Io {
        path: cfg.out_dir.display().to_string(),
        source,
    })?;
    let teacher_ckpt = cfg.out_dir.join("teacher_prefinetuned.ckpt");

    let pcfg = prefinetune_config(cfg);
    let arts = Artifacts {
        run_log: Some(cfg.out_dir.join("prefinetune.runlog.jsonl")),
        teacher_checkpoint: Some(teacher_ckpt.clone()),
        ..Artifacts::default()
    };
    let pre = train(&pcfg, split, vocab, None, &arts, verbose)?;
    let teacher = pre.teacher.expect("pre-finetuning returns a teacher");

    let ecfg = EvalConfig {
        l_code: cfg.base.l_code,
        l_rev: cfg.base.l_rev,
        sentence_avg: false,
    };
    let mut runs: Vec<ArmRun> = Vec::new();
    let mut pairs: Vec<PairOutcome> = Vec::new();
    for &k in &cfg.seeds {
        let mut scores: Vec<f64> = Vec::new();
        for (arm, tc) in arm_configs(cfg.suite, &cfg.base, k, &teacher_ckpt) {
            // The checkpoint named in the config holds exactly the weights
            // handed over here; passing them in memory skips the re-read.
            let init = tc
                .teacher_init
                .is_some()
                .then(|| teacher.deep_clone());
            let arts = Artifacts {
                run_log: Some(cfg.out_dir.join(format!("{arm}_seed{k}.runlog.jsonl"))),
                student_checkpoint: Some(cfg.out_dir.join(format!("{arm}_seed{k}_student.ckpt"))),
                teacher_checkpoint: None,
            };
            if verbose {
                eprintln!("[{} seed {k}] {arm}", cfg.suite.slug());
            }
            let res = train(&tc, split, vocab, init, &arts, verbose)?;
            let student = res.student.expect("joint phase returns a student");
            let test = evaluate_review_generation(&student, vocab, &split.test, &ecfg)?;
            scores.push(test.report.bleu4);
            runs.push(ArmRun {
                arm,
                seed: k,
                config_hash: tc.hash(),
                best_val_bleu: res.best_val_review,
                test_bleu: test.report.bleu4,
                run_log: res.run_log,
            });
        }
        pairs.push(PairOutcome {
            seed: k,
            treatment_bleu: scores[0],
            control_bleu: scores[1],
            treatment_wins: scores[0] >= scores[1],
        });
    }

    let names = arm_configs(cfg.suite, &cfg.base, 0, &teacher_ckpt);
    let treatment_wins = pairs.iter().filter(|p| p.treatment_wins).count();
    let report = AblateReport {
        suite: cfg.suite,
        tool_version: TOOL_VERSION.into(),
        seeds: cfg.seeds.clone(),
        treatment: names[0].0.clone(),
        control: names[1].0.clone(),
        prefinetune_log: Some(pre.run_log),
        runs,
        pairs,
        treatment_wins,
    };
    report.save(&cfg.out_dir.join(format!("{}_report.json", cfg.suite.slug())))?;
    Ok(report)
}
