use revdistill::corpus::{generate_synthetic, split, GrammarConfig};
use revdistill::training::{train, Artifacts, Phase, TrainConfig};
use revdistill::tokenizer::Vocabulary;
use revdistill::ModelConfig;

fn main() {
    let g = GrammarConfig::default();
    let triplets = generate_synthetic(2000, 1, &g).unwrap();
    let corpus_split = split(&triplets, 1).unwrap();
    let vocab = Vocabulary::from_corpus(&corpus_split.train, None);
    eprintln!("vocab: {} tokens, train {} val {} test {}",
        vocab.len(), corpus_split.train.len(), corpus_split.validation.len(), corpus_split.test.len());
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        phase: Phase::Joint,
        epochs: 2,
        eval_every: 2,
        seed: 0,
        student: ModelConfig { seed: 1, vocab_size: vocab.len(), ..d.student },
        teacher: ModelConfig { seed: 2, vocab_size: vocab.len(), ..d.teacher },
        ..d
    };
    let t0 = std::time::Instant::now();
    let res = train(&cfg, &corpus_split, &vocab, None, &Artifacts::none(), true).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    eprintln!("2 joint epochs (incl. 1 eval): {dt:.1}s; per-epoch {:.1}s", dt / 2.0);
    eprintln!("epoch1 {:.1}s epoch2(+eval) {:.1}s",
        res.run_log.epochs[0].wall_secs, res.run_log.epochs[1].wall_secs);
}
