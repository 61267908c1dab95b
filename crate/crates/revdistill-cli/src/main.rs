//! One binary over the whole pipeline: corpus generation, vocabulary
//! building, teacher pre-finetuning, joint training, evaluation, and paired
//! ablation suites.
//!
//! Identical invocations on identical inputs write identical bytes, and
//! every artifact carries the tool version and a digest of the effective
//! config. Overrides given as flags are applied to the config before the
//! run starts, so the echoed config in run logs and reports reflects them.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use revdistill::ablate::{run_suite, AblateConfig, AblateError, Suite};
use revdistill::corpus::{
    load_corpus, save_corpus, split, CorpusError, CorpusSplit, GrammarConfig, ReviewTriplet,
};
use revdistill::distill::LossWeights;
use revdistill::eval::{
    evaluate_refinement, evaluate_review_generation, BleuReport, EvalConfig, EvalError,
};
use revdistill::seq2seq::{load_checkpoint, CheckpointError, CheckpointMeta, ModelError, Seq2Seq};
use revdistill::tokenizer::TokenizerError;
use revdistill::training::{
    json_digest, train, Artifacts, Objective, Phase, TrainConfig, TrainError, TOOL_VERSION,
};
use revdistill::Vocabulary;

#[derive(Parser)]
#[command(
    name = "revdistill",
    version,
    about = "Cross-task distillation for code review: data, training, evaluation, ablations"
)]
struct Cli {
    /// Print per-epoch progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic code-review corpus as JSONL.
    GenCorpus(GenCorpusArgs),
    /// Build a vocabulary file from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Pre-finetune the refinement model (teacher) on code plus review.
    Prefinetune(RunArgs),
    /// Train the review generator, by default jointly with the teacher
    /// through the soft review bridge.
    Train(RunArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run a paired ablation suite and write a comparison report.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Number of triplets.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus destination; a `.meta.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Redraw programs longer than this many tokens.
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Statements per program, at most.
    #[arg(long)]
    max_statements: Option<usize>,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Vocabulary destination; a `.meta.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Keep only the most frequent tokens (sentinels always included).
    #[arg(long)]
    max_size: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// Training config TOML; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Receives the run log and checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// Assigns samples to train/validation/test; keep it fixed across a
    /// pipeline so every stage sees the same split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Run seed override (shuffling and dropout).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Joint objective; `l2` adds the embedding-alignment term.
    #[arg(long, value_enum, ignore_case = true)]
    objective: Option<ObjectiveArg>,
    /// Loss weights as `alpha,beta,gamma`, overriding the objective's
    /// defaults.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<LossWeights>,
    /// Train the student alone on cross-entropy (weights become 1,0,0
    /// unless --weights is given). The comparison baseline.
    #[arg(long)]
    no_distill: bool,
    /// Teacher checkpoint to start joint training from.
    #[arg(long)]
    teacher_init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Split assignment seed used during training.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Which task the checkpoint performs.
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Code window, sentinels included; must match training.
    #[arg(long, default_value_t = TrainConfig::default().l_code)]
    l_code: usize,
    /// Review window, sentinels included; must match training.
    #[arg(long, default_value_t = TrainConfig::default().l_rev)]
    l_rev: usize,
    /// Also report the sentence-averaged smoothed score.
    #[arg(long)]
    sentence_avg: bool,
    /// Report JSON destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    suite: SuiteArg,
    /// Base training config TOML for both arms.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Receives per-run logs, checkpoints, and the comparison report.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Number of paired seeds (offsets 0..N).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 15)]
    prefinetune_epochs: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base objective (the alignment suite overrides it per arm).
    #[arg(long, value_enum, ignore_case = true)]
    objective: Option<ObjectiveArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    L1,
    L2,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Objective {
        match o {
            ObjectiveArg::L1 => Objective::L1,
            ObjectiveArg::L2 => Objective::L2,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
    /// The whole corpus file, unsplit.
    Full,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Validation => "validation",
            SplitArg::Test => "test",
            SplitArg::Full => "full",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    /// Review-comment generation from code (student).
    Review,
    /// Code refinement from code plus ground-truth review (teacher).
    Refine,
}

impl TaskArg {
    fn name(self) -> &'static str {
        match self {
            TaskArg::Review => "review-generation",
            TaskArg::Refine => "code-refinement",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Distill,
    Prefinetune,
    Alignment,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Suite {
        match s {
            SuiteArg::Distill => Suite::Distill,
            SuiteArg::Prefinetune => Suite::Prefinetune,
            SuiteArg::Alignment => Suite::Alignment,
        }
    }
}

fn parse_weights(s: &str) -> Result<LossWeights, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected alpha,beta,gamma, got `{s}`"));
    }
    let mut v = [0.0f64; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("`{p}`: {e}"))?;
    }
    let w = LossWeights {
        alpha: v[0],
        beta: v[1],
        gamma: v[2],
    };
    w.validate()?;
    Ok(w)
}

/// Errors grouped into exit-code categories: config 2, unreadable or
/// unwritable files 3, malformed or corrupt file contents 4, failures of
/// the run itself 5.
#[derive(Debug)]
enum CliError {
    Config(String),
    Corpus(CorpusError),
    Tokenizer(TokenizerError),
    Checkpoint(CheckpointError),
    Train(TrainError),
    Eval(EvalError),
    Ablate(AblateError),
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Corpus(e) => e.fmt(f),
            CliError::Tokenizer(e) => e.fmt(f),
            CliError::Checkpoint(e) => e.fmt(f),
            CliError::Train(e) => e.fmt(f),
            CliError::Eval(e) => e.fmt(f),
            CliError::Ablate(e) => e.fmt(f),
            CliError::Io { path, source } => write!(f, "io error on {path}: {source}"),
        }
    }
}

impl Error for CliError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            CliError::Config(_) => None,
            CliError::Corpus(e) => e.source(),
            CliError::Tokenizer(e) => e.source(),
            CliError::Checkpoint(e) => e.source(),
            CliError::Train(e) => e.source(),
            CliError::Eval(e) => e.source(),
            CliError::Ablate(e) => e.source(),
            CliError::Io { source, .. } => Some(source),
        }
    }
}

macro_rules! from_err {
    ($var:ident, $ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> CliError {
                CliError::$var(e)
            }
        }
    };
}
from_err!(Corpus, CorpusError);
from_err!(Tokenizer, TokenizerError);
from_err!(Checkpoint, CheckpointError);
from_err!(Train, TrainError);
from_err!(Eval, EvalError);
from_err!(Ablate, AblateError);

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        CliError::Config(e.to_string())
    }
}

#[derive(Clone, Copy)]
enum Category {
    Config,
    Io,
    Data,
    Run,
}

impl Category {
    fn label(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Io => "io",
            Category::Data => "data",
            Category::Run => "run",
        }
    }

    fn exit_code(self) -> u8 {
        match self {
            Category::Config => 2,
            Category::Io => 3,
            Category::Data => 4,
            Category::Run => 5,
        }
    }
}

fn categorize_corpus(e: &CorpusError) -> Category {
    match e {
        CorpusError::Io { .. } | CorpusError::Write { .. } => Category::Io,
        CorpusError::MalformedLine { .. }
        | CorpusError::EmptyField { .. }
        | CorpusError::TooSmall { .. }
        | CorpusError::DuplicateTriplets => Category::Data,
        CorpusError::InvalidGrammar(_) | CorpusError::RuleExhausted { .. } => Category::Config,
    }
}

fn categorize_tokenizer(e: &TokenizerError) -> Category {
    match e {
        TokenizerError::Io { .. } => Category::Io,
        TokenizerError::BadVocabFile { .. } => Category::Data,
        TokenizerError::WindowTooSmall { .. } => Category::Config,
    }
}

fn categorize_checkpoint(e: &CheckpointError) -> Category {
    match e {
        CheckpointError::Io { .. } => Category::Io,
        _ => Category::Data,
    }
}

fn categorize_eval(e: &EvalError) -> Category {
    match e {
        EvalError::EmptySplit | EvalError::VocabMismatch { .. } => Category::Config,
        EvalError::Encode(t) => categorize_tokenizer(t),
    }
}

fn categorize_train(e: &TrainError) -> Category {
    match e {
        TrainError::InvalidConfig(_) | TrainError::Model(_) | TrainError::TeacherMismatch(_) => {
            Category::Config
        }
        TrainError::Tokenize(t) => categorize_tokenizer(t),
        TrainError::Checkpoint(c) => categorize_checkpoint(c),
        TrainError::Eval(e) => categorize_eval(e),
        TrainError::Io { .. } => Category::Io,
        TrainError::BadRunLog { .. } => Category::Data,
        TrainError::NonFinite { .. } | TrainError::Diverged { .. } => Category::Run,
    }
}

impl CliError {
    fn category(&self) -> Category {
        match self {
            CliError::Config(_) => Category::Config,
            CliError::Corpus(e) => categorize_corpus(e),
            CliError::Tokenizer(e) => categorize_tokenizer(e),
            CliError::Checkpoint(e) => categorize_checkpoint(e),
            CliError::Train(e) => categorize_train(e),
            CliError::Eval(e) => categorize_eval(e),
            CliError::Ablate(e) => match e {
                AblateError::InvalidConfig(_) => Category::Config,
                AblateError::Train(t) => categorize_train(t),
                AblateError::Eval(v) => categorize_eval(v),
                AblateError::Io { .. } => Category::Io,
            },
            CliError::Io { .. } => Category::Io,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error ({}): {e}", cat.label());
            let mut src = e.source();
            while let Some(c) = src {
                eprintln!("  caused by: {c}");
                src = c.source();
            }
            ExitCode::from(cat.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::BuildVocab(a) => build_vocab(a),
        Command::Prefinetune(a) => run_training(Phase::Prefinetune, a, cli.verbose),
        Command::Train(a) => run_training(Phase::Joint, a, cli.verbose),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a, cli.verbose),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Sidecar carried next to fixed-format artifacts (corpus JSONL, vocab
/// text) that cannot embed provenance themselves.
#[derive(Serialize)]
struct SidecarMeta<'a, T: Serialize> {
    tool_version: &'a str,
    config_hash: String,
    config: T,
}

fn write_sidecar<T: Serialize>(artifact: &Path, config: T) -> Result<(), CliError> {
    let meta = SidecarMeta {
        tool_version: TOOL_VERSION,
        config_hash: json_digest(&config),
        config,
    };
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_file(&artifact.with_extension("meta.json"), &text)
}

fn gen_corpus(a: GenCorpusArgs) -> Result<(), CliError> {
    let mut grammar = GrammarConfig::default();
    if let Some(mt) = a.max_tokens {
        grammar.max_tokens = mt;
    }
    if let Some(ms) = a.max_statements {
        grammar.max_statements = ms;
    }
    let triplets = revdistill::corpus::generate_synthetic(a.n, a.seed, &grammar)?;
    save_corpus(&a.out, &triplets)?;

    #[derive(Serialize)]
    struct GenConfig<'a> {
        n: usize,
        seed: u64,
        grammar: &'a GrammarConfig,
    }
    write_sidecar(
        &a.out,
        GenConfig {
            n: a.n,
            seed: a.seed,
            grammar: &grammar,
        },
    )?;
    println!("wrote {} triplets to {}", triplets.len(), a.out.display());
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<ReviewTriplet>, CliError> {
    let loaded = load_corpus(path)?;
    if !loaded.rejected.is_empty() {
        eprintln!(
            "note: skipped {} unusable corpus lines (first: line {}: {})",
            loaded.rejected.len(),
            loaded.rejected[0].line,
            loaded.rejected[0].reason
        );
    }
    Ok(loaded.triplets)
}

fn build_vocab(a: BuildVocabArgs) -> Result<(), CliError> {
    let triplets = read_corpus(&a.corpus)?;
    let vocab = Vocabulary::from_corpus(&triplets, a.max_size);
    vocab.save(&a.out)?;

    #[derive(Serialize)]
    struct VocabConfig<'a> {
        corpus: &'a str,
        max_size: Option<usize>,
        size: usize,
    }
    write_sidecar(
        &a.out,
        VocabConfig {
            corpus: &a.corpus.display().to_string(),
            max_size: a.max_size,
            size: vocab.len(),
        },
    )?;
    println!("vocabulary of {} tokens -> {}", vocab.len(), a.out.display());
    Ok(())
}

fn load_split(corpus: &Path, split_seed: u64) -> Result<CorpusSplit, CliError> {
    let triplets = read_corpus(corpus)?;
    Ok(split(&triplets, split_seed)?)
}

/// Config from TOML (or defaults) with flag overrides applied and model
/// vocab sizes pinned to the vocabulary file.
fn effective_config(
    phase: Phase,
    a: &RunArgs,
    vocab: &Vocabulary,
) -> Result<TrainConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::default(),
    };
    cfg.phase = phase;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(o) = a.objective {
        cfg.objective = o.into();
    }
    if let Some(w) = a.weights {
        cfg.weights = Some(w);
    }
    if a.no_distill {
        cfg.distill = false;
        cfg.couple_teacher_loss = false;
        cfg.teacher_init = None;
        if a.weights.is_none() {
            cfg.weights = Some(LossWeights {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.0,
            });
        }
    } else if let Some(t) = &a.teacher_init {
        cfg.teacher_init = Some(t.clone());
    }
    cfg.student.vocab_size = vocab.len();
    cfg.teacher.vocab_size = vocab.len();
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_bleu(v: Option<f64>) -> String {
    match v {
        Some(b) => format!("{:.2}", b * 100.0),
        None => "-".into(),
    }
}

fn run_training(phase: Phase, a: RunArgs, verbose: bool) -> Result<(), CliError> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let split = load_split(&a.corpus, a.split_seed)?;
    let cfg = effective_config(phase, &a, &vocab)?;
    ensure_dir(&a.out_dir)?;
    let joint = phase == Phase::Joint;
    let artifacts = Artifacts {
        run_log: Some(a.out_dir.join(if joint {
            "train.runlog.jsonl"
        } else {
            "prefinetune.runlog.jsonl"
        })),
        student_checkpoint: joint.then(|| a.out_dir.join("student.ckpt")),
        teacher_checkpoint: Some(a.out_dir.join("teacher.ckpt")),
    };
    let res = train(&cfg, &split, &vocab, None, &artifacts, verbose)?;
    println!(
        "{} finished: {} epochs, config {}",
        if joint { "training" } else { "pre-finetuning" },
        res.run_log.epochs.len(),
        &cfg.hash()[..12],
    );
    println!(
        "best validation bleu4: review {}  refinement {}",
        fmt_bleu(res.best_val_review),
        fmt_bleu(res.best_val_refine),
    );
    println!("artifacts in {}", a.out_dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let samples: Vec<ReviewTriplet> = if a.split == SplitArg::Full {
        read_corpus(&a.corpus)?
    } else {
        let s = load_split(&a.corpus, a.split_seed)?;
        match a.split {
            SplitArg::Train => s.train,
            SplitArg::Validation => s.validation,
            SplitArg::Test => s.test,
            SplitArg::Full => unreachable!(),
        }
    };
    let (model, ckpt_meta): (Seq2Seq<f32>, CheckpointMeta) = load_checkpoint(&a.checkpoint)?;
    let ecfg = EvalConfig {
        l_code: a.l_code,
        l_rev: a.l_rev,
        sentence_avg: a.sentence_avg,
    };
    let res = match a.task {
        TaskArg::Review => evaluate_review_generation(&model, &vocab, &samples, &ecfg)?,
        TaskArg::Refine => evaluate_refinement(&model, &vocab, &samples, &ecfg)?,
    };

    let model_name = a
        .checkpoint
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| a.checkpoint.display().to_string());
    println!("task {}  model {}  split {}", a.task.name(), model_name, a.split.name());
    print!("{}", res.report.render_table());
    if let Some(sa) = res.report.sentence_avg {
        println!("sentence-averaged smoothed: {:.2}", sa * 100.0);
    }

    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct EvalInvocation<'a> {
            checkpoint: String,
            checkpoint_config_hash: &'a str,
            task: &'a str,
            split: &'a str,
            split_seed: u64,
            config: &'a EvalConfig,
        }
        #[derive(Serialize)]
        struct EvalArtifact<'a> {
            tool_version: &'a str,
            config_hash: String,
            invocation: EvalInvocation<'a>,
            report: &'a BleuReport,
        }
        let invocation = EvalInvocation {
            checkpoint: model_name.clone(),
            checkpoint_config_hash: &ckpt_meta.config_hash,
            task: a.task.name(),
            split: a.split.name(),
            split_seed: a.split_seed,
            config: &ecfg,
        };
        let artifact = EvalArtifact {
            tool_version: TOOL_VERSION,
            config_hash: json_digest(&invocation),
            invocation,
            report: &res.report,
        };
        write_file(
            out,
            &serde_json::to_string_pretty(&artifact).expect("artifact serializes"),
        )?;
        println!("report -> {}", out.display());
    }
    Ok(())
}

fn ablate(a: AblateArgs, verbose: bool) -> Result<(), CliError> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let split = load_split(&a.corpus, a.split_seed)?;
    let run_args = RunArgs {
        config: a.config.clone(),
        corpus: a.corpus.clone(),
        vocab: a.vocab.clone(),
        out_dir: a.out_dir.clone(),
        split_seed: a.split_seed,
        seed: a.seed,
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        objective: a.objective,
        weights: None,
        no_distill: false,
        teacher_init: None,
    };
    let base = effective_config(Phase::Joint, &run_args, &vocab)?;
    let cfg = AblateConfig {
        suite: a.suite.into(),
        seeds: (0..a.seeds).collect(),
        prefinetune_epochs: a.prefinetune_epochs,
        base,
        out_dir: a.out_dir.clone(),
    };
    let report = run_suite(&cfg, &split, &vocab, verbose)?;

    println!(
        "suite {}: {} vs {} over {} seeds",
        report.suite.slug(),
        report.treatment,
        report.control,
        report.seeds.len()
    );
    println!(
        "{:<6} {:>12} {:>12}  {}",
        "seed", "treatment", "control", "winner"
    );
    for p in &report.pairs {
        println!(
            "{:<6} {:>12.2} {:>12.2}  {}",
            p.seed,
            p.treatment_bleu * 100.0,
            p.control_bleu * 100.0,
            if p.treatment_wins {
                &report.treatment
            } else {
                &report.control
            }
        );
    }
    println!(
        "treatment wins {}/{}; report -> {}",
        report.treatment_wins,
        report.pairs.len(),
        a.out_dir
            .join(format!("{}_report.json", report.suite.slug()))
            .display()
    );
    Ok(())
}
