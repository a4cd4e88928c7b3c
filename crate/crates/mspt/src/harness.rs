//! Experiment orchestration behind the CLI: training with validation
//! selection and early stopping, checkpointed evaluation, corpus
//! generation with splits, and the ablation matrix.
//!
//! Everything here is deterministic given (config, seed, corpus): batch
//! order, initialization and generation are all seeded, and log files
//! carry no timestamps. Wall-clock timing goes to stderr only.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FusionMode, Variant};
use crate::data::{
    corpus_stats, generate_synthetic_corpus, load_corpus, tokenize_record, write_corpus,
    CorpusStats, ProductRecord, SyntheticCorpusSpec, TokenizedRecord, Vocab,
};
use crate::decoder::{GenerationConfig, GenerationMode, LossBreakdown};
use crate::error::{Error, Result};
use crate::metrics::{rouge_n, score_corpus, MetricReport};
use crate::model::Mspt;
use crate::tensor::{optimizer_step, Graph, OptimizerSettings, ParameterStore};

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_val_rouge1: Option<f64>,
    pub final_loss: LossBreakdown,
    pub steps: usize,
    pub epochs_run: usize,
}

fn optimizer_settings(cfg: &ExperimentConfig) -> OptimizerSettings {
    OptimizerSettings {
        kind: cfg.optimizer,
        lr: cfg.lr,
        ..OptimizerSettings::adam(cfg.lr)
    }
}

/// Build the vocabulary from the training split only.
pub fn build_vocab(cfg: &ExperimentConfig, train: &[ProductRecord]) -> Vocab {
    let mut texts: Vec<Vec<String>> = Vec::new();
    for r in train {
        texts.push(crate::data::tokenize(&r.title));
        texts.push(crate::data::tokenize(&r.attributes.join(" ")));
        for p in &r.qa_pairs {
            texts.push(crate::data::tokenize(&p.q));
            texts.push(crate::data::tokenize(&p.a));
        }
        if let Some(reason) = &r.reason {
            texts.push(crate::data::tokenize(reason));
        }
    }
    Vocab::build(
        texts.iter().map(|t| t.as_slice()),
        cfg.vocab_min_freq,
        cfg.vocab_max,
    )
}

/// Extra stopping knobs used by tests and the overfit path.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainControls {
    pub max_steps: Option<usize>,
    pub stop_below_total: Option<f64>,
}

pub fn run_training(
    cfg: &ExperimentConfig,
    train: &[ProductRecord],
    valid: &[ProductRecord],
    out_dir: &Path,
    controls: TrainControls,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();

    let vocab = build_vocab(cfg, train);
    let train_tok: Vec<TokenizedRecord> = train
        .iter()
        .map(|r| tokenize_record(r, &vocab, &cfg.limits))
        .collect();
    let valid_tok: Vec<TokenizedRecord> = valid
        .iter()
        .map(|r| tokenize_record(r, &vocab, &cfg.limits))
        .collect();

    let model = Mspt::new(cfg.clone(), vocab.len())?;
    let mut store = ParameterStore::new(cfg.seed);
    let settings = optimizer_settings(cfg);

    let log_path = out_dir.join("train.log");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let ckpt_path = out_dir.join("checkpoint.json");

    let mut best_val: Option<f64> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;
    let mut epochs_run = 0usize;
    let mut last = LossBreakdown {
        kl: 0.0,
        nll: 0.0,
        reg: 0.0,
        total: f64::INFINITY,
    };

    'training: for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..train_tok.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)));
        order.shuffle(&mut rng);

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenizedRecord> = chunk.iter().map(|&i| &train_tok[i]).collect();
            let mut graph = Graph::training(&mut store);
            let loss = model.batch_loss(&mut graph, &batch)?;
            if !loss.breakdown.total.is_finite() {
                let what = graph
                    .tape
                    .first_nonfinite()
                    .map(|(_, desc)| desc)
                    .unwrap_or_else(|| "total loss".to_string());
                return Err(Error::NonFinite(what));
            }
            graph.backward(loss.node)?;
            graph.apply_grads()?;
            optimizer_step(&mut store, &settings)?;
            step += 1;
            last = loss.breakdown;
            writeln!(
                log,
                "step {} kl {:?} nll {:?} reg {:?} total {:?}",
                step, last.kl, last.nll, last.reg, last.total
            )?;
            if controls.max_steps.is_some_and(|m| step >= m)
                || controls.stop_below_total.is_some_and(|t| last.total < t)
            {
                break 'training;
            }
        }

        if !valid_tok.is_empty() {
            let val = validation_rouge1(&model, &store, &vocab, &valid_tok)?;
            writeln!(log, "epoch {} val_rouge1 {:?}", epoch + 1, val)?;
            let improved = best_val.is_none_or(|b| val > b);
            if improved {
                best_val = Some(val);
                since_best = 0;
                save_checkpoint(&ckpt_path, &store, cfg, &vocab, Some(val))?;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break 'training;
                }
            }
        }
    }

    if best_val.is_none() {
        save_checkpoint(&ckpt_path, &store, cfg, &vocab, None)?;
    }
    log.flush()?;
    eprintln!(
        "trained {} steps over {} epochs in {:.1}s (total loss {:.4})",
        step,
        epochs_run,
        started.elapsed().as_secs_f64(),
        last.total
    );
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        best_val_rouge1: best_val,
        final_loss: last,
        steps: step,
        epochs_run,
    })
}

fn validation_rouge1(
    model: &Mspt,
    store: &ParameterStore,
    vocab: &Vocab,
    valid: &[TokenizedRecord],
) -> Result<f64> {
    let gen = GenerationConfig::greedy(model.cfg.max_gen_len);
    let scored: Vec<f64> = valid
        .par_iter()
        .map(|rec| -> Result<f64> {
            let reference = rec
                .reason_tokens
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("record {} lacks a reason", rec.id)))?;
            let mut g = Graph::frozen(store);
            let out = model.generate_for(&mut g, rec, &gen)?;
            let cand: Vec<String> = out
                .iter()
                .map(|&id| vocab.token(id).map(str::to_string))
                .collect::<Result<_>>()?;
            rouge_n(&cand, reference, 1)
        })
        .collect::<Result<_>>()?;
    Ok(scored.iter().sum::<f64>() / scored.len() as f64)
}

fn save_checkpoint(
    path: &Path,
    store: &ParameterStore,
    cfg: &ExperimentConfig,
    vocab: &Vocab,
    val: Option<f64>,
) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".to_string(), cfg.hash());
    meta.insert(
        "config_json".to_string(),
        serde_json::to_string(cfg).expect("config serializes"),
    );
    meta.insert("seed".to_string(), cfg.seed.to_string());
    meta.insert(
        "vocab_tokens".to_string(),
        serde_json::to_string(vocab.tokens()).expect("tokens serialize"),
    );
    meta.insert("vocab_hash".to_string(), format!("{:016x}", vocab.hash()));
    if let Some(v) = val {
        meta.insert("val_rouge1".to_string(), format!("{v:?}"));
    }
    store.save(path, &meta)
}

/// A checkpoint restored together with its configuration and vocabulary.
pub struct LoadedModel {
    pub store: ParameterStore,
    pub cfg: ExperimentConfig,
    pub vocab: Vocab,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedModel> {
    let (store, meta) = ParameterStore::load(path)?;
    let cfg_json = meta
        .get("config_json")
        .ok_or_else(|| Error::Incompatible("checkpoint lacks config_json".into()))?;
    let cfg: ExperimentConfig = serde_json::from_str(cfg_json).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("checkpoint config: {e}"),
    })?;
    let tokens_json = meta
        .get("vocab_tokens")
        .ok_or_else(|| Error::Incompatible("checkpoint lacks vocabulary".into()))?;
    let tokens: Vec<String> = serde_json::from_str(tokens_json).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("checkpoint vocab: {e}"),
    })?;
    let vocab = Vocab::from_tokens(tokens);
    if let Some(h) = meta.get("vocab_hash") {
        let have = format!("{:016x}", vocab.hash());
        if *h != have {
            return Err(Error::Incompatible(format!(
                "vocabulary hash mismatch: checkpoint says {h}, tokens hash to {have}"
            )));
        }
    }
    match store.get("embed.table") {
        Some(t) if t.shape()[0] == vocab.len() => {}
        Some(t) => {
            return Err(Error::Incompatible(format!(
                "embedding rows {} != vocabulary size {}",
                t.shape()[0],
                vocab.len()
            )))
        }
        None => return Err(Error::Incompatible("checkpoint lacks embed.table".into())),
    }
    Ok(LoadedModel { store, cfg, vocab })
}

/// Machine-readable evaluation artifact.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub n_examples: usize,
    pub report: MetricReport,
}

/// Generate for every record with a reference and score the Table-1
/// metric columns.
pub fn run_eval(loaded: &LoadedModel, corpus: &[ProductRecord]) -> Result<EvalArtifact> {
    if corpus.is_empty() {
        return Err(Error::Contract("evaluation corpus is empty".into()));
    }
    let model = Mspt::new(loaded.cfg.clone(), loaded.vocab.len())?;
    let gen = generation_config(&loaded.cfg);
    let pairs: Vec<(Vec<String>, Vec<String>)> = corpus
        .par_iter()
        .map(|record| -> Result<(Vec<String>, Vec<String>)> {
            let rec = tokenize_record(record, &loaded.vocab, &loaded.cfg.limits);
            let reference = rec.reason_tokens.clone().ok_or_else(|| {
                Error::Contract(format!("record {} lacks a reference reason", rec.id))
            })?;
            let mut g = Graph::frozen(&loaded.store);
            let out = model.generate_for(&mut g, &rec, &gen)?;
            let cand: Vec<String> = out
                .iter()
                .map(|&id| loaded.vocab.token(id).map(str::to_string))
                .collect::<Result<_>>()?;
            Ok((cand, reference))
        })
        .collect::<Result<_>>()?;
    let (cands, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let report = score_corpus(&cands, &refs)?;
    Ok(EvalArtifact {
        config_hash: loaded.cfg.hash(),
        seed: loaded.cfg.seed,
        n_examples: corpus.len(),
        report,
    })
}

pub fn generation_config(cfg: &ExperimentConfig) -> GenerationConfig {
    GenerationConfig {
        mode: if cfg.beam_width > 1 {
            GenerationMode::Beam
        } else {
            GenerationMode::Greedy
        },
        beam_width: cfg.beam_width,
        max_len: cfg.max_gen_len,
        length_norm: cfg.length_norm,
    }
}

/// One generated line per record, plus an optional sidecar of per-step
/// top-k probabilities.
pub fn run_generate(
    loaded: &LoadedModel,
    corpus: &[ProductRecord],
    out_path: &Path,
    sidecar: Option<&Path>,
    top_k: usize,
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Contract("generation corpus is empty".into()));
    }
    let model = Mspt::new(loaded.cfg.clone(), loaded.vocab.len())?;
    let gen = generation_config(&loaded.cfg);
    let results: Vec<(String, String)> = corpus
        .par_iter()
        .map(|record| -> Result<(String, String)> {
            let rec = tokenize_record(record, &loaded.vocab, &loaded.cfg.limits);
            let mut g = Graph::frozen(&loaded.store);
            let out = model.generate_for(&mut g, &rec, &gen)?;
            let line = loaded.vocab.decode(&out)?;
            let side = if sidecar.is_some() {
                let mut g = Graph::frozen(&loaded.store);
                let rows = model.step_top_k(&mut g, &rec, &out, top_k)?;
                serde_json::to_string(&serde_json::json!({
                    "id": rec.id,
                    "steps": rows
                        .iter()
                        .map(|row| {
                            row.iter()
                                .map(|(t, p)| {
                                    serde_json::json!({
                                        "token": loaded.vocab.token(*t).unwrap_or("<bad>"),
                                        "p": p
                                    })
                                })
                                .collect::<Vec<_>>()
                        })
                        .collect::<Vec<_>>(),
                }))
                .unwrap_or_default()
            } else {
                String::new()
            };
            Ok((line, side))
        })
        .collect::<Result<_>>()?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    for (line, _) in &results {
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    if let Some(side_path) = sidecar {
        let mut side = std::io::BufWriter::new(std::fs::File::create(side_path)?);
        for (_, s) in &results {
            writeln!(side, "{s}")?;
        }
        side.flush()?;
    }
    Ok(())
}

/// Corpus generation artifact: split files plus a stats sidecar that
/// embeds the generating spec.
#[derive(Debug, Serialize, Deserialize)]
pub struct GenDataReport {
    pub spec: SyntheticCorpusSpec,
    pub stats: CorpusStats,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

pub fn run_gen_data(
    spec: &SyntheticCorpusSpec,
    fractions: (f64, f64, f64),
    out_dir: &Path,
) -> Result<GenDataReport> {
    let (ft, fv, fe) = fractions;
    if (ft + fv + fe - 1.0).abs() > 1e-9 || ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {ft} {fv} {fe}"
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let corpus = generate_synthetic_corpus(spec)?;
    let stats = corpus_stats(&corpus);

    // salt keeps the split shuffle independent of the generator stream
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7c83_9f2d_11b4_55aa);
    order.shuffle(&mut rng);
    let n = corpus.len() as f64;
    let t_end = (ft * n).round() as usize;
    let v_end = ((ft + fv) * n).round() as usize;
    let pick = |idx: &[usize]| -> Vec<ProductRecord> {
        idx.iter().map(|&i| corpus[i].clone()).collect()
    };
    let train = pick(&order[..t_end.min(order.len())]);
    let valid = pick(&order[t_end.min(order.len())..v_end.min(order.len())]);
    let test = pick(&order[v_end.min(order.len())..]);

    write_corpus(&out_dir.join("train.jsonl"), &train)?;
    write_corpus(&out_dir.join("valid.jsonl"), &valid)?;
    write_corpus(&out_dir.join("test.jsonl"), &test)?;
    let report = GenDataReport {
        spec: spec.clone(),
        stats,
        train: train.len(),
        valid: valid.len(),
        test: test.len(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out_dir.join("stats.json"), json)?;
    Ok(report)
}

/// The four-variant ablation matrix, trained and evaluated under
/// identical seeds and budgets. Row labels follow the variant block.
#[derive(Debug, Serialize, Deserialize)]
pub struct AblateRow {
    pub label: String,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AblateArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<AblateRow>,
}

pub fn ablation_variants(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mk = |label: &str, variant: Variant, fusion: FusionMode| {
        let mut cfg = base.clone();
        cfg.variant = variant;
        cfg.fusion = fusion;
        (label.to_string(), cfg)
    };
    vec![
        mk("full-soft", Variant::Full, FusionMode::Soft),
        mk("full-hard", Variant::Full, FusionMode::Hard),
        mk("no-pga", Variant::NoPga, base.fusion),
        mk("no-qa", Variant::NoQa, base.fusion),
    ]
}

pub fn run_ablate(
    base: &ExperimentConfig,
    train: &[ProductRecord],
    valid: &[ProductRecord],
    test: &[ProductRecord],
    out_dir: &Path,
    parallel: bool,
) -> Result<AblateArtifact> {
    std::fs::create_dir_all(out_dir)?;
    let variants = ablation_variants(base);
    let run_one = |(label, cfg): &(String, ExperimentConfig)| -> Result<AblateRow> {
        let dir = out_dir.join(label);
        let outcome = run_training(cfg, train, valid, &dir, TrainControls::default())?;
        let loaded = load_checkpoint(&outcome.checkpoint)?;
        let eval = run_eval(&loaded, test)?;
        let get = |m: &str| eval.report.get(m).unwrap_or(0.0);
        Ok(AblateRow {
            label: label.clone(),
            rouge_1: get("rouge_1"),
            rouge_2: get("rouge_2"),
            rouge_l: get("rouge_l"),
            bleu_1: get("bleu_1"),
            bleu_2: get("bleu_2"),
        })
    };
    let rows: Vec<AblateRow> = if parallel {
        variants.par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        variants.iter().map(run_one).collect::<Result<_>>()?
    };
    let artifact = AblateArtifact {
        config_hash: base.hash(),
        seed: base.seed,
        rows,
    };
    let json = serde_json::to_string_pretty(&artifact).expect("artifact serializes");
    std::fs::write(out_dir.join("ablation.json"), json)?;
    Ok(artifact)
}

pub fn render_ablation_table(artifact: &AblateArtifact) -> String {
    let mut out = String::from("variant    RG-1    RG-2    RG-L    BU-1    BU-2\n");
    for r in &artifact.rows {
        out.push_str(&format!(
            "{:<10} {:<7.4} {:<7.4} {:<7.4} {:<7.4} {:<7.4}\n",
            r.label, r.rouge_1, r.rouge_2, r.rouge_l, r.bleu_1, r.bleu_2
        ));
    }
    out
}

/// Convenience used by the CLI: load a corpus path named in the config.
pub fn load_corpus_path(path: &str) -> Result<Vec<ProductRecord>> {
    load_corpus(Path::new(path))
}
