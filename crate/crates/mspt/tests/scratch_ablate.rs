use mspt::config::{ExperimentConfig, InferenceConditioning, Variant};
use mspt::data::{generate_synthetic_corpus, SyntheticCorpusSpec};
use mspt::harness::{load_checkpoint, run_eval, run_training, TrainControls};
use mspt::tensor::OptimizerKind;

fn ablate_corpus(seed: u64, qa_only: f64) -> (Vec<mspt::data::ProductRecord>, Vec<mspt::data::ProductRecord>, Vec<mspt::data::ProductRecord>) {
    let spec = SyntheticCorpusSpec {
        products: 160,
        qa_pairs_mean: 4.0,
        question_len: 9.0,
        answer_len: 9.0,
        qa_only_fraction: qa_only,
        seed,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&spec).unwrap();
    let train = corpus[..120].to_vec();
    let valid = corpus[120..136].to_vec();
    let test = corpus[136..].to_vec();
    (train, valid, test)
}

fn base_cfg(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        embed_dim: 32,
        hidden: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 64,
        batch_size: 16,
        lr: 3e-3,
        optimizer: OptimizerKind::Adam,
        epochs: 60,
        patience: 20,
        qa_cap: 6,
        inference: InferenceConditioning::PosteriorIfAvailable,
        detach_posterior: true,
        seed,
        ..Default::default()
    }
}

fn run_variant(cfg: &ExperimentConfig, train: &[mspt::data::ProductRecord], valid: &[mspt::data::ProductRecord], test: &[mspt::data::ProductRecord]) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_training(cfg, train, valid, dir.path(), TrainControls::default()).unwrap();
    let loaded = load_checkpoint(&outcome.checkpoint).unwrap();
    let eval = run_eval(&loaded, test).unwrap();
    eval.report.get("rouge_1").unwrap()
}

#[test]
#[ignore]
fn scratch_one_seed_timing() {
    let (train, valid, test) = ablate_corpus(100, 0.5);
    let start = std::time::Instant::now();
    let mut cfg = base_cfg(1);
    cfg.variant = Variant::Full;
    let full = run_variant(&cfg, &train, &valid, &test);
    println!("full-soft rouge1 {full:.4} in {:.1}s", start.elapsed().as_secs_f64());

    let start = std::time::Instant::now();
    let mut cfg = base_cfg(1);
    cfg.variant = Variant::NoQa;
    let noqa = run_variant(&cfg, &train, &valid, &test);
    println!("no-qa    rouge1 {noqa:.4} in {:.1}s", start.elapsed().as_secs_f64());

    let start = std::time::Instant::now();
    let mut cfg = base_cfg(1);
    cfg.variant = Variant::NoPga;
    let nopga = run_variant(&cfg, &train, &valid, &test);
    println!("no-pga   rouge1 {nopga:.4} in {:.1}s", start.elapsed().as_secs_f64());
}
