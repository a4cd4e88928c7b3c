//! Transformer decoder conditioned on the fused representation and the
//! item token memories, the three loss terms, and greedy/beam generation.
//!
//! The fused vector conditions the decoder twice: it is prepended as an
//! extra memory slot for cross-attention and added to the first input
//! embedding. Teacher forcing uses a strict causal mask, so step `t`
//! never sees gold tokens at positions `>= t`.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{BOS, EOS};
use crate::encoders::{feed_forward, multi_head_attention, positional_encode};
use crate::error::{Error, Result};
use crate::fusion::{FusedRepresentation, PROB_FLOOR};
use crate::qa::UserState;
use crate::tensor::{Graph, Init, Tensor, Value};

const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub mode: GenerationMode,
    pub beam_width: usize,
    /// Maximum number of generated content tokens.
    pub max_len: usize,
    /// Exponent of the length normalization applied when ranking final
    /// hypotheses; 0 disables normalization.
    pub length_norm: f64,
}

impl GenerationConfig {
    pub fn greedy(max_len: usize) -> Self {
        GenerationConfig {
            mode: GenerationMode::Greedy,
            beam_width: 1,
            max_len,
            length_norm: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "beam width and max length must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-batch loss components; the objective is their (weighted) sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub nll: f64,
    pub reg: f64,
    pub total: f64,
}

/// Combine the three components; Eq-style unweighted sum.
pub fn total_loss(kl: f64, nll: f64, reg: f64) -> LossBreakdown {
    LossBreakdown {
        kl,
        nll,
        reg,
        total: kl + nll + reg,
    }
}

/// One decoder pass over an input token prefix. Returns per-step vocab
/// distributions, shape `[len(input), vocab]`.
pub fn decoder_forward(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    table: Value,
    fused: Value,
    memories: &[Value],
    input_ids: &[usize],
) -> Result<Value> {
    if input_ids.is_empty() {
        return Err(Error::Contract("decoder_forward on empty input".into()));
    }
    let t = input_ids.len();
    let d = g.tape.shape(fused)[1];
    let vocab = g.tape.shape(table)[0];

    let tok = g.tape.gather_rows(table, input_ids)?;
    let tok = positional_encode(g, tok)?;
    // fused vector added to the first position's embedding
    let fused_row = if t == 1 {
        fused
    } else {
        let zeros = g.constant(Tensor::zeros(&[t - 1, d]));
        g.tape.concat(&[fused, zeros], 0)?
    };
    let mut x = g.tape.add(tok, fused_row)?;

    let mut mem_parts = vec![fused];
    mem_parts.extend_from_slice(memories);
    let memory = g.tape.concat(&mem_parts, 0)?;

    let causal = if t == 1 {
        None
    } else {
        let mut data = vec![0.0; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                data[i * t + j] = MASK_NEG;
            }
        }
        Some(g.constant(Tensor::new(vec![t, t], data)?))
    };

    for m in 0..cfg.dec_layers {
        let prefix = format!("dec.l{m}");
        let sa = multi_head_attention(g, cfg, x, x, causal, &format!("{prefix}.self"), None)?;
        let a = residual_ln(g, cfg, x, sa.out, &format!("{prefix}.ln1"))?;
        let ca = multi_head_attention(g, cfg, a, memory, None, &format!("{prefix}.cross"), None)?;
        let b = residual_ln(g, cfg, a, ca.out, &format!("{prefix}.ln2"))?;
        let ff = feed_forward(g, cfg, b, &format!("{prefix}.ffn"))?;
        x = residual_ln(g, cfg, b, ff, &format!("{prefix}.ln3"))?;
    }

    let w = g.param("dec.out.w", &[d, vocab], Init::Uniform { fan_in: d })?;
    let b = g.param("dec.out.b", &[vocab], Init::Uniform { fan_in: d })?;
    let logits = g.tape.matmul(x, w)?;
    let logits = g.tape.add_bias(logits, b)?;
    g.tape.softmax(logits, 1)
}

fn residual_ln(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    x: Value,
    sub: Value,
    prefix: &str,
) -> Result<Value> {
    if !cfg.residual_ln {
        return Ok(sub);
    }
    let d = g.tape.shape(x)[1];
    let sum = g.tape.add(x, sub)?;
    let gamma = g.param(&format!("{prefix}.g"), &[d], Init::Const(1.0))?;
    let beta = g.param(&format!("{prefix}.b"), &[d], Init::Const(0.0))?;
    g.tape.layer_norm(sum, gamma, beta, 1e-5)
}

/// Teacher-forced decoding: step `t` sees gold tokens `< t`. The target
/// must be `<bos> ... <eos>`; returns distributions for predicting
/// `target[1..]`.
pub fn decode_train(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    table: Value,
    fused: &FusedRepresentation,
    memories: &[Value],
    target: &[usize],
) -> Result<Value> {
    if target.len() < 2 || target[0] != BOS || *target.last().unwrap() != EOS {
        return Err(Error::Contract(
            "decode_train target must be <bos> ... <eos>".into(),
        ));
    }
    if target.len() - 2 > cfg.max_gen_len {
        return Err(Error::Contract(format!(
            "target has {} content tokens, configured maximum is {}",
            target.len() - 2,
            cfg.max_gen_len
        )));
    }
    decoder_forward(g, cfg, table, fused.vector, memories, &target[..target.len() - 1])
}

/// Negative log-likelihood of the gold tokens under per-step
/// distributions, averaged per token, probabilities floored at
/// [`PROB_FLOOR`].
pub fn nll_loss(g: &mut Graph, dists: Value, gold: &[usize]) -> Result<Value> {
    let (sum, count) = nll_sum(g, dists, gold)?;
    Ok(g.tape.scale(sum, 1.0 / count as f64))
}

/// Unaveraged NLL plus the token count, for batch-level pooling.
pub(crate) fn nll_sum(g: &mut Graph, dists: Value, gold: &[usize]) -> Result<(Value, usize)> {
    let shape = g.tape.shape(dists).to_vec();
    if shape.len() != 2 || shape[0] != gold.len() {
        return Err(Error::Contract(format!(
            "nll needs one gold id per step: {} steps vs {} ids",
            shape.first().copied().unwrap_or(0),
            gold.len()
        )));
    }
    let picked = g.tape.select_per_row(dists, gold)?;
    let floored = g.tape.clamp_min(picked, PROB_FLOOR);
    let logs = g.tape.log(floored)?;
    let total = g.tape.sum(logs);
    Ok((g.tape.scale(total, -1.0), gold.len()))
}

/// Order-independent relevance loss: project `H_user` to one vocabulary
/// distribution and score every gold token against it, averaged per
/// token.
pub fn bow_regular_loss(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    user: &UserState,
    gold: &[usize],
    vocab: usize,
) -> Result<Value> {
    let (sum, count) = bow_regular_sum(g, cfg, user, gold, vocab)?;
    Ok(g.tape.scale(sum, 1.0 / count as f64))
}

pub(crate) fn bow_regular_sum(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    user: &UserState,
    gold: &[usize],
    vocab: usize,
) -> Result<(Value, usize)> {
    let _ = cfg;
    if gold.is_empty() {
        return Err(Error::Contract("regular loss needs target tokens".into()));
    }
    if let Some(bad) = gold.iter().find(|&&i| i >= vocab) {
        return Err(Error::Contract(format!("gold id {bad} out of vocab {vocab}")));
    }
    let d = g.tape.shape(user.user)[1];
    let w = g.param("reg.w", &[d, vocab], Init::Uniform { fan_in: d })?;
    let b = g.param("reg.b", &[vocab], Init::Uniform { fan_in: d })?;
    let logits = g.tape.matmul(user.user, w)?;
    let logits = g.tape.add_bias(logits, b)?;
    let p = g.tape.softmax(logits, 1)?;
    let floored = g.tape.clamp_min(p, PROB_FLOOR);
    let lp = g.tape.log(floored)?;
    let mut counts = vec![0.0; vocab];
    for &id in gold {
        counts[id] += 1.0;
    }
    let count_col = g.constant(Tensor::new(vec![vocab, 1], counts)?);
    let total = g.tape.matmul(lp, count_col)?;
    let total = g.tape.sum(total);
    Ok((g.tape.scale(total, -1.0), gold.len()))
}

/// Lowest-index maximum: deterministic argmax with ties broken by the
/// smaller token id.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

struct Hypothesis {
    seq: Vec<usize>,
    logp: f64,
    done: bool,
}

impl Hypothesis {
    fn content_len(&self) -> usize {
        let mut n = self.seq.len() - 1;
        if self.seq.last() == Some(&EOS) {
            n -= 1;
        }
        n.max(1)
    }
}

/// Decode a token sequence from the fused representation.
///
/// Greedy takes the per-step argmax. Beam search keeps `beam_width`
/// hypotheses ranked by summed log-probability, finishing each at
/// `<eos>` or `max_len`; the greedy rollout is always kept as a baseline
/// hypothesis, and the final choice ranks by `logp / len^length_norm`.
/// Returns generated content tokens (no `<bos>`/`<eos>`).
pub fn generate(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    table: Value,
    fused: Value,
    memories: &[Value],
    gen: &GenerationConfig,
) -> Result<Vec<usize>> {
    Ok(generate_with_score(g, cfg, table, fused, memories, gen)?.0)
}

/// [`generate`], also returning the unnormalized log-probability of the
/// produced sequence.
pub fn generate_with_score(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    table: Value,
    fused: Value,
    memories: &[Value],
    gen: &GenerationConfig,
) -> Result<(Vec<usize>, f64)> {
    gen.validate()?;
    let greedy = greedy_rollout(g, cfg, table, fused, memories, gen.max_len)?;
    if gen.mode == GenerationMode::Greedy {
        return Ok((content_tokens(&greedy.seq), greedy.logp));
    }

    let mut beam = vec![Hypothesis {
        seq: vec![BOS],
        logp: 0.0,
        done: false,
    }];
    while beam.iter().any(|h| !h.done) {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &beam {
            if hyp.done {
                candidates.push(Hypothesis {
                    seq: hyp.seq.clone(),
                    logp: hyp.logp,
                    done: true,
                });
                continue;
            }
            let dists = decoder_forward(g, cfg, table, fused, memories, &hyp.seq)?;
            let t = g.tape.value(dists);
            let row_start = (t.rows() - 1) * t.cols();
            let row = &t.data()[row_start..row_start + t.cols()];
            for (tok, &p) in row.iter().enumerate() {
                let mut seq = hyp.seq.clone();
                seq.push(tok);
                let done = tok == EOS || seq.len() - 1 >= gen.max_len;
                candidates.push(Hypothesis {
                    seq,
                    logp: hyp.logp + p.max(PROB_FLOOR).ln(),
                    done,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.logp
                .partial_cmp(&a.logp)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.seq.cmp(&b.seq))
        });
        candidates.truncate(gen.beam_width);
        beam = candidates;
    }

    beam.push(greedy);
    let norm = |h: &Hypothesis| h.logp / (h.content_len() as f64).powf(gen.length_norm);
    let best = beam
        .into_iter()
        .max_by(|a, b| {
            norm(a)
                .partial_cmp(&norm(b))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.seq.cmp(&a.seq))
        })
        .expect("beam is non-empty");
    Ok((content_tokens(&best.seq), best.logp))
}

fn greedy_rollout(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    table: Value,
    fused: Value,
    memories: &[Value],
    max_len: usize,
) -> Result<Hypothesis> {
    let mut seq = vec![BOS];
    let mut logp = 0.0;
    loop {
        let dists = decoder_forward(g, cfg, table, fused, memories, &seq)?;
        let t = g.tape.value(dists);
        let row_start = (t.rows() - 1) * t.cols();
        let row = &t.data()[row_start..row_start + t.cols()];
        let tok = argmax(row);
        logp += row[tok].max(PROB_FLOOR).ln();
        seq.push(tok);
        if tok == EOS || seq.len() - 1 >= max_len {
            break;
        }
    }
    Ok(Hypothesis {
        seq,
        logp,
        done: true,
    })
}

fn content_tokens(seq: &[usize]) -> Vec<usize> {
    seq.iter()
        .skip(1)
        .take_while(|&&t| t != EOS)
        .copied()
        .collect()
}
