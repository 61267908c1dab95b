//! Code-review corpus: JSONL ingestion, a seeded synthetic generator, and
//! deterministic train/validation/test splits.
//!
//! A sample is a triplet `(code, review, refined)`: the submitted code, the
//! reviewer comment, and the code after the comment was addressed. The
//! synthetic generator draws a correct program from a toy grammar, breaks it
//! with one mutation rule, and emits the rule's description as the review.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write corpus file {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: field `{field}` is empty after whitespace normalization")]
    EmptyField { line: usize, field: &'static str },
    #[error("corpus has {got} triplets; at least {min} are required")]
    TooSmall { got: usize, min: usize },
    #[error("corpus contains duplicate triplets; split requires identity-distinct samples")]
    DuplicateTriplets,
    #[error("invalid grammar: {0}")]
    InvalidGrammar(String),
    #[error("rule `{rule}` found no applicable program after {attempts} attempts")]
    RuleExhausted { rule: String, attempts: usize },
}

/// One code-review sample: original code, review comment, refined code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewTriplet {
    pub code: String,
    pub review: String,
    pub refined: String,
    pub lang: String,
}

impl ReviewTriplet {
    /// Identity key used for duplicate detection and split disjointness.
    fn identity(&self) -> (String, String, String, String) {
        (
            self.code.clone(),
            self.review.clone(),
            self.refined.clone(),
            self.lang.clone(),
        )
    }
}

/// Collapses runs of whitespace to single spaces and trims the ends.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whitespace tokens of a normalized text.
pub fn tokenize_ws(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// A triplet skipped during ingestion, with the offending line.
#[derive(Debug, Clone)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

/// Result of loading a JSONL corpus: triplets in file order plus any
/// rejected lines.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub triplets: Vec<ReviewTriplet>,
    pub rejected: Vec<Rejection>,
}

/// Loads a UTF-8 JSONL corpus. Malformed lines and empty fields abort with
/// the line number; triplets whose refined code does not differ from the
/// submitted code are skipped and reported in `rejected`.
pub fn load_corpus(path: &Path) -> Result<LoadedCorpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut triplets = Vec::new();
    let mut rejected = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let triplet: ReviewTriplet =
            serde_json::from_str(raw).map_err(|e| CorpusError::MalformedLine {
                line,
                message: e.to_string(),
            })?;
        for (field, value) in [
            ("code", &triplet.code),
            ("review", &triplet.review),
            ("refined", &triplet.refined),
            ("lang", &triplet.lang),
        ] {
            if normalize_ws(value).is_empty() {
                return Err(CorpusError::EmptyField { line, field });
            }
        }
        if tokenize_ws(&triplet.code) == tokenize_ws(&triplet.refined) {
            rejected.push(Rejection {
                line,
                reason: "refined code is token-identical to the submitted code".into(),
            });
            continue;
        }
        triplets.push(triplet);
    }
    Ok(LoadedCorpus { triplets, rejected })
}

/// Writes triplets as JSONL, one record per line, fields exactly
/// `{"code","review","refined","lang"}`.
pub fn save_corpus(path: &Path, triplets: &[ReviewTriplet]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for t in triplets {
        out.push_str(&serde_json::to_string(t).expect("triplet serialization cannot fail"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Write {
        path: path.to_owned(),
        source,
    })
}

/// What a mutation rule does to a drawn program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    /// Replace one arithmetic operator with the next one in the grammar's
    /// operator cycle.
    OperatorSwap,
    /// Bump one integer constant by one (down at the top of the range).
    ConstantOffByOne,
    /// Replace one identifier occurrence with a different identifier.
    IdentifierMisuse,
    /// Delete the comparison token from one `if`/`while` guard.
    DroppedGuardComparison,
}

/// A mutation rule: an id, a review template over `{wrong}`/`{right}`
/// placeholders, and the token rewrite it performs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MutationRule {
    pub id: String,
    pub template: String,
    pub kind: RuleKind,
}

/// Token sets and rules for the toy statement language.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    pub identifiers: Vec<String>,
    pub operators: Vec<String>,
    pub comparisons: Vec<String>,
    pub max_constant: u32,
    pub max_statements: usize,
    /// Programs longer than this many tokens are redrawn.
    pub max_tokens: usize,
    pub lang: String,
    pub rules: Vec<MutationRule>,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let s = |x: &str| x.to_owned();
        GrammarConfig {
            identifiers: ["a", "b", "c", "d", "x", "y"].map(s).to_vec(),
            operators: ["+", "-", "*", "/"].map(s).to_vec(),
            comparisons: [">", "<", ">=", "=="].map(s).to_vec(),
            max_constant: 9,
            max_statements: 3,
            // Caps the source windows (and with them the per-epoch cost);
            // three-statement programs survive only in their shorter forms.
            max_tokens: 22,
            lang: s("toy"),
            rules: vec![
                MutationRule {
                    id: s("operator-swap"),
                    template: s("replace operator {wrong} with {right}"),
                    kind: RuleKind::OperatorSwap,
                },
                MutationRule {
                    id: s("constant-off-by-one"),
                    template: s("change constant {wrong} to {right}"),
                    kind: RuleKind::ConstantOffByOne,
                },
                MutationRule {
                    id: s("identifier-misuse"),
                    template: s("use {right} instead of {wrong}"),
                    kind: RuleKind::IdentifierMisuse,
                },
                MutationRule {
                    id: s("dropped-guard"),
                    template: s("insert comparison {right} in the guard"),
                    kind: RuleKind::DroppedGuardComparison,
                },
            ],
        }
    }
}

impl GrammarConfig {
    pub fn from_toml(text: &str) -> Result<Self, CorpusError> {
        let g: GrammarConfig =
            toml::from_str(text).map_err(|e| CorpusError::InvalidGrammar(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.identifiers.len() < 2 {
            return Err(CorpusError::InvalidGrammar(
                "need at least 2 identifiers".into(),
            ));
        }
        if self.operators.len() < 2 {
            return Err(CorpusError::InvalidGrammar(
                "need at least 2 operators".into(),
            ));
        }
        if self.comparisons.is_empty() {
            return Err(CorpusError::InvalidGrammar(
                "need at least 1 comparison".into(),
            ));
        }
        if self.rules.len() < 4 {
            return Err(CorpusError::InvalidGrammar(
                "need at least 4 mutation rules".into(),
            ));
        }
        if self.max_statements == 0 {
            return Err(CorpusError::InvalidGrammar("max_statements must be >= 1".into()));
        }
        Ok(())
    }
}

/// Record of the exact token rewrite a rule performed; inverting it on the
/// mutated code must reproduce the original program.
#[derive(Debug, Clone)]
pub struct AppliedMutation {
    pub rule_id: String,
    /// Token index in the mutated code where the rewrite starts.
    pub position: usize,
    /// Tokens of the original program replaced by the rewrite.
    pub removed: Vec<String>,
    /// Tokens present in the mutated code at `position`.
    pub inserted: Vec<String>,
}

impl AppliedMutation {
    /// Undoes the mutation: splices `removed` back over `inserted`.
    pub fn invert(&self, code_tokens: &[String]) -> Vec<String> {
        let mut out = code_tokens[..self.position].to_vec();
        out.extend(self.removed.iter().cloned());
        out.extend(code_tokens[self.position + self.inserted.len()..].iter().cloned());
        out
    }
}

/// A generated triplet together with the mutation that produced it.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub triplet: ReviewTriplet,
    pub mutation: AppliedMutation,
}

const MAX_PROGRAM_RETRIES: usize = 100;
const MAX_DUPLICATE_RETRIES: usize = 10_000;

/// Generates `n` distinct synthetic triplets. Pure function of
/// `(n, seed, grammar)`: rules are drawn uniformly, then programs are
/// redrawn until the rule applies.
pub fn generate_synthetic(
    n: usize,
    seed: u64,
    grammar: &GrammarConfig,
) -> Result<Vec<ReviewTriplet>, CorpusError> {
    Ok(generate_synthetic_detailed(n, seed, grammar)?
        .into_iter()
        .map(|s| s.triplet)
        .collect())
}

/// As [`generate_synthetic`] but keeps the per-sample mutation record,
/// which exists for verification only.
pub fn generate_synthetic_detailed(
    n: usize,
    seed: u64,
    grammar: &GrammarConfig,
) -> Result<Vec<GeneratedSample>, CorpusError> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<(String, String, String, String)> = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut duplicate_streak = 0usize;
    while out.len() < n {
        let rule_idx = rng.random_range(0..grammar.rules.len());
        let rule = grammar.rules[rule_idx].clone();
        let mut attempts = 0usize;
        let sample = loop {
            attempts += 1;
            if attempts > MAX_PROGRAM_RETRIES {
                return Err(CorpusError::RuleExhausted {
                    rule: rule.id.clone(),
                    attempts: MAX_PROGRAM_RETRIES,
                });
            }
            let refined = draw_program(grammar, &mut rng);
            if refined.len() > grammar.max_tokens {
                continue;
            }
            if let Some(sample) = apply_rule(&rule, &refined, grammar, &mut rng) {
                break sample;
            }
        };
        if seen.insert(sample.triplet.identity()) {
            duplicate_streak = 0;
            out.push(sample);
        } else {
            duplicate_streak += 1;
            if duplicate_streak > MAX_DUPLICATE_RETRIES {
                return Err(CorpusError::InvalidGrammar(format!(
                    "grammar space exhausted after {} distinct samples",
                    out.len()
                )));
            }
        }
    }
    Ok(out)
}

/// Draws a correct program as a token sequence: 1..=max_statements
/// statements (assignments, guards, loops) joined by `;`.
fn draw_program(grammar: &GrammarConfig, rng: &mut ChaCha8Rng) -> Vec<String> {
    let n_stmts = rng.random_range(1..=grammar.max_statements);
    let mut tokens = Vec::new();
    for i in 0..n_stmts {
        if i > 0 {
            tokens.push(";".to_owned());
        }
        match rng.random_range(0..4u32) {
            0 | 1 => push_assignment(grammar, rng, &mut tokens),
            2 => {
                tokens.push("if".to_owned());
                push_guard_and_body(grammar, rng, &mut tokens);
            }
            _ => {
                tokens.push("while".to_owned());
                push_guard_and_body(grammar, rng, &mut tokens);
            }
        }
    }
    tokens
}

fn push_guard_and_body(grammar: &GrammarConfig, rng: &mut ChaCha8Rng, tokens: &mut Vec<String>) {
    tokens.push(pick(&grammar.identifiers, rng));
    tokens.push(pick(&grammar.comparisons, rng));
    tokens.push(rng.random_range(0..=grammar.max_constant).to_string());
    tokens.push(":".to_owned());
    push_assignment(grammar, rng, tokens);
}

fn push_assignment(grammar: &GrammarConfig, rng: &mut ChaCha8Rng, tokens: &mut Vec<String>) {
    tokens.push(pick(&grammar.identifiers, rng));
    tokens.push("=".to_owned());
    tokens.push(pick_operand(grammar, rng));
    if rng.random_range(0..10u32) < 7 {
        tokens.push(pick(&grammar.operators, rng));
        tokens.push(pick_operand(grammar, rng));
    }
}

fn pick_operand(grammar: &GrammarConfig, rng: &mut ChaCha8Rng) -> String {
    if rng.random_range(0..10u32) < 4 {
        rng.random_range(0..=grammar.max_constant).to_string()
    } else {
        pick(&grammar.identifiers, rng)
    }
}

fn pick(set: &[String], rng: &mut ChaCha8Rng) -> String {
    set.choose(rng).expect("non-empty token set").clone()
}

/// Applies `rule` to a correct program, returning the broken code, the
/// instantiated review, and the rewrite record. `None` if the rule has no
/// applicable site.
fn apply_rule(
    rule: &MutationRule,
    refined: &[String],
    grammar: &GrammarConfig,
    rng: &mut ChaCha8Rng,
) -> Option<GeneratedSample> {
    let (position, removed, inserted, wrong, right) = match rule.kind {
        RuleKind::OperatorSwap => {
            let sites = positions_in(refined, &grammar.operators);
            let pos = *sites.choose(rng)?;
            let right = refined[pos].clone();
            let cycle = &grammar.operators;
            let idx = cycle.iter().position(|o| *o == right).expect("site is an operator");
            let wrong = cycle[(idx + 1) % cycle.len()].clone();
            (pos, vec![right.clone()], vec![wrong.clone()], wrong, right)
        }
        RuleKind::ConstantOffByOne => {
            let sites: Vec<usize> = refined
                .iter()
                .enumerate()
                .filter(|(_, t)| t.parse::<u32>().map(|v| v <= grammar.max_constant).unwrap_or(false))
                .map(|(i, _)| i)
                .collect();
            let pos = *sites.choose(rng)?;
            let right = refined[pos].clone();
            let value: u32 = right.parse().expect("site is a constant");
            let wrong = if value == grammar.max_constant {
                (value - 1).to_string()
            } else {
                (value + 1).to_string()
            };
            (pos, vec![right.clone()], vec![wrong.clone()], wrong, right)
        }
        RuleKind::IdentifierMisuse => {
            let sites = positions_in(refined, &grammar.identifiers);
            let pos = *sites.choose(rng)?;
            let right = refined[pos].clone();
            let others: Vec<&String> =
                grammar.identifiers.iter().filter(|i| **i != right).collect();
            let wrong = (*others.choose(rng)?).clone();
            (pos, vec![right.clone()], vec![wrong.clone()], wrong, right)
        }
        RuleKind::DroppedGuardComparison => {
            let sites = positions_in(refined, &grammar.comparisons);
            let pos = *sites.choose(rng)?;
            let right = refined[pos].clone();
            (pos, vec![right.clone()], vec![], right.clone(), right)
        }
    };

    let mut code = refined[..position].to_vec();
    code.extend(inserted.iter().cloned());
    code.extend(refined[position + removed.len()..].iter().cloned());
    debug_assert_ne!(code, refined, "a mutation must change the program");

    let review = rule
        .template
        .replace("{wrong}", &wrong)
        .replace("{right}", &right);
    let triplet = ReviewTriplet {
        code: code.join(" "),
        review,
        refined: refined.join(" "),
        lang: grammar.lang.clone(),
    };
    Some(GeneratedSample {
        triplet,
        mutation: AppliedMutation {
            rule_id: rule.id.clone(),
            position,
            removed,
            inserted,
        },
    })
}

fn positions_in(tokens: &[String], set: &[String]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| set.contains(t))
        .map(|(i, _)| i)
        .collect()
}

/// Train/validation/test partition at 85 : 7.5 : 7.5.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<ReviewTriplet>,
    pub validation: Vec<ReviewTriplet>,
    pub test: Vec<ReviewTriplet>,
    pub seed: u64,
}

pub const MIN_SPLIT_SIZE: usize = 14;

/// Shuffles deterministically by `seed`, then partitions at 85% / 7.5% /
/// 7.5% (test absorbs the rounding remainder).
pub fn split(corpus: &[ReviewTriplet], seed: u64) -> Result<CorpusSplit, CorpusError> {
    if corpus.len() < MIN_SPLIT_SIZE {
        return Err(CorpusError::TooSmall {
            got: corpus.len(),
            min: MIN_SPLIT_SIZE,
        });
    }
    let mut seen = HashSet::new();
    if !corpus.iter().all(|t| seen.insert(t.identity())) {
        return Err(CorpusError::DuplicateTriplets);
    }
    let mut shuffled = corpus.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let n_train = ((n as f64) * 0.85).round() as usize;
    let n_val = ((n as f64) * 0.075).round() as usize;
    let test = shuffled.split_off(n_train + n_val);
    let validation = shuffled.split_off(n_train);
    Ok(CorpusSplit {
        train: shuffled,
        validation,
        test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn write_temp(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_preserves_order_and_count() {
        let f = write_temp(&[
            r#"{"code":"a = b + c","review":"r1","refined":"a = b - c","lang":"toy"}"#,
            r#"{"code":"x = 1","review":"r2","refined":"x = 2","lang":"toy"}"#,
            r#"{"code":"y = 3","review":"r3","refined":"y = 4","lang":"toy"}"#,
        ]);
        let loaded = load_corpus(f.path()).unwrap();
        assert_eq!(loaded.triplets.len(), 3);
        assert!(loaded.rejected.is_empty());
        assert_eq!(loaded.triplets[0].review, "r1");
        assert_eq!(loaded.triplets[2].review, "r3");
    }

    #[test]
    fn missing_field_names_line_and_field() {
        let f = write_temp(&[
            r#"{"code":"a = 1","review":"r","refined":"a = 2","lang":"toy"}"#,
            r#"{"code":"a = 1","refined":"a = 2","lang":"toy"}"#,
        ]);
        let err = load_corpus(f.path()).unwrap_err();
        match err {
            CorpusError::MalformedLine { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("review"), "message was: {message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unchanged_code_is_rejected_with_line_number() {
        let f = write_temp(&[
            r#"{"code":"a = 1","review":"r","refined":"a = 1","lang":"toy"}"#,
            r#"{"code":"a = 1","review":"r","refined":"a = 2","lang":"toy"}"#,
        ]);
        let loaded = load_corpus(f.path()).unwrap();
        assert_eq!(loaded.triplets.len(), 1);
        assert_eq!(loaded.rejected.len(), 1);
        assert_eq!(loaded.rejected[0].line, 1);
    }

    #[test]
    fn empty_field_is_an_error() {
        let f = write_temp(&[r#"{"code":"  ","review":"r","refined":"a = 2","lang":"toy"}"#]);
        match load_corpus(f.path()).unwrap_err() {
            CorpusError::EmptyField { line: 1, field: "code" } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip_is_field_lossless() {
        let g = GrammarConfig::default();
        let triplets = generate_synthetic(40, 3, &g).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_corpus(f.path(), &triplets).unwrap();
        let loaded = load_corpus(f.path()).unwrap();
        assert_eq!(loaded.triplets, triplets);
        assert!(loaded.rejected.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let g = GrammarConfig::default();
        let a = generate_synthetic(1, 7, &g).unwrap();
        let b = generate_synthetic(1, 7, &g).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(25, 11, &g).unwrap();
        let d = generate_synthetic(25, 11, &g).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn operator_swap_semantics_on_fixed_program() {
        let g = GrammarConfig::default();
        let rule = g.rules.iter().find(|r| r.id == "operator-swap").unwrap();
        let refined: Vec<String> = ["a", "=", "b", "+", "c"].map(str::to_owned).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample = apply_rule(rule, &refined, &g, &mut rng).unwrap();
        assert_eq!(sample.triplet.code, "a = b - c");
        assert_eq!(sample.triplet.review, "replace operator - with +");
        assert_eq!(sample.triplet.refined, "a = b + c");
    }

    #[test]
    fn rule_usage_is_near_uniform_for_large_n() {
        let g = GrammarConfig::default();
        let samples = generate_synthetic_detailed(2000, 1, &g).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &samples {
            *counts.entry(s.mutation.rule_id.as_str()).or_default() += 1;
        }
        assert_eq!(counts.len(), 4);
        for rule in &g.rules {
            let c = counts[rule.id.as_str()];
            assert!((400..=600).contains(&c), "rule {} used {} times", rule.id, c);
        }
    }

    #[test]
    fn inverting_recorded_mutation_recovers_refined() {
        let g = GrammarConfig::default();
        for s in generate_synthetic_detailed(1000, 5, &g).unwrap() {
            let code_tokens = tokenize_ws(&s.triplet.code);
            let recovered = s.mutation.invert(&code_tokens).join(" ");
            assert_eq!(recovered, s.triplet.refined, "rule {}", s.mutation.rule_id);
        }
    }

    #[test]
    fn mutations_always_change_the_program() {
        let g = GrammarConfig::default();
        for s in generate_synthetic_detailed(500, 9, &g).unwrap() {
            assert_ne!(s.triplet.code, s.triplet.refined);
            assert!(!s.triplet.review.is_empty());
        }
    }

    #[test]
    fn split_sizes_follow_85_75_75() {
        let g = GrammarConfig::default();
        let corpus = generate_synthetic(200, 2, &g).unwrap();
        let s = split(&corpus, 1).unwrap();
        assert_eq!(s.train.len(), 170);
        assert_eq!(s.validation.len(), 15);
        assert_eq!(s.test.len(), 15);
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let g = GrammarConfig::default();
        let corpus = generate_synthetic(100, 4, &g).unwrap();
        let a = split(&corpus, 1).unwrap();
        let b = split(&corpus, 1).unwrap();
        let c = split(&corpus, 2).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(c.train.len(), a.train.len());
        assert_ne!(a.train, c.train, "different seeds should reorder the corpus");
    }

    #[test]
    fn split_partitions_are_disjoint() {
        let g = GrammarConfig::default();
        let corpus = generate_synthetic(120, 6, &g).unwrap();
        let s = split(&corpus, 3).unwrap();
        let mut seen = HashSet::new();
        for t in s.train.iter().chain(&s.validation).chain(&s.test) {
            assert!(seen.insert(t.identity()));
        }
        assert_eq!(seen.len(), 120);
    }

    #[test]
    fn split_rejects_small_corpora() {
        let g = GrammarConfig::default();
        let corpus = generate_synthetic(13, 8, &g).unwrap();
        assert!(matches!(
            split(&corpus, 1),
            Err(CorpusError::TooSmall { got: 13, min: 14 })
        ));
    }

    #[test]
    fn reference_split_matches_published_ratios() {
        // 150409 / 13103 / 13104 of 176616: the ratio the split targets.
        let total = 176_616.0;
        for (count, want) in [(150_409.0, 0.85), (13_103.0, 0.075), (13_104.0, 0.075)] {
            let ratio: f64 = count / total;
            assert!((ratio - want).abs() < 2e-3, "ratio {ratio} vs {want}");
        }
    }

    #[test]
    fn grammar_round_trips_through_toml() {
        let g = GrammarConfig::default();
        let text = toml::to_string(&g).unwrap();
        let back = GrammarConfig::from_toml(&text).unwrap();
        assert_eq!(back.identifiers, g.identifiers);
        assert_eq!(back.rules.len(), g.rules.len());
    }

    #[test]
    fn undersized_grammar_is_rejected() {
        let mut g = GrammarConfig::default();
        g.rules.truncate(3);
        assert!(matches!(
            generate_synthetic(5, 1, &g),
            Err(CorpusError::InvalidGrammar(_))
        ));
    }
}
