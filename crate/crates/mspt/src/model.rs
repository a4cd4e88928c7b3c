//! Full model assembly: per-example forward passes, batch-level loss
//! pooling, and inference-time generation.
//!
//! Training always conditions the decoder on the posterior representation
//! when user content exists; the KL term pulls the prior-conditioned
//! distributions toward the posterior-conditioned ones so the prior path
//! serves long-tail products at inference.

use crate::config::{ExperimentConfig, FusionMode, InferenceConditioning, Variant};
use crate::data::{TokenizedRecord, UNK};
use crate::decoder::{
    bow_regular_sum, decode_train, decoder_forward, generate_with_score, nll_sum, total_loss,
    GenerationConfig, LossBreakdown,
};
use crate::encoders::{embedding_table, encode_item, ItemState};
use crate::error::{Error, Result};
use crate::fusion::{hard_fusion, kl_loss, prior_transform, soft_fusion, FusedRepresentation};
use crate::qa::{encode_qa_pair, product_guided_attention, UserState};
use crate::tensor::{Graph, Tensor, Value};

pub struct Mspt {
    pub cfg: ExperimentConfig,
    pub vocab_size: usize,
}

/// Loss nodes for one example, unaveraged so the batch can pool per token.
struct ExampleLoss {
    nll: (Value, usize),
    kl: Option<(Value, usize)>,
    reg: Option<(Value, usize)>,
}

/// A batch loss: reportable component values plus the scalar node to
/// differentiate.
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub node: Value,
}

impl Mspt {
    pub fn new(cfg: ExperimentConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        if vocab_size < 5 {
            return Err(Error::Config("vocabulary must include the reserved ids".into()));
        }
        Ok(Mspt { cfg, vocab_size })
    }

    fn uses_qa(&self, rec: &TokenizedRecord) -> bool {
        self.cfg.variant != Variant::NoQa && !rec.qa.is_empty()
    }

    fn encode_record_item(&self, g: &mut Graph, table: Value, rec: &TokenizedRecord) -> Result<ItemState> {
        // a record may carry no attribute words; stand in a single <unk>
        // so the attribute encoder still produces a vector
        let attr_ids = if rec.attr_ids.is_empty() {
            vec![UNK]
        } else {
            rec.attr_ids.clone()
        };
        encode_item(g, &self.cfg, table, &rec.title_ids, &attr_ids)
    }

    fn encode_user(
        &self,
        g: &mut Graph,
        table: Value,
        item: &ItemState,
        rec: &TokenizedRecord,
    ) -> Result<Option<UserState>> {
        if !self.uses_qa(rec) {
            return Ok(None);
        }
        let mut qa_vectors = Vec::new();
        for (q, a) in rec.qa.iter().take(self.cfg.qa_cap) {
            qa_vectors.push(encode_qa_pair(g, &self.cfg, table, q, a)?);
        }
        product_guided_attention(g, &self.cfg, item, qa_vectors)
    }

    fn posterior(
        &self,
        g: &mut Graph,
        item: &ItemState,
        user: &UserState,
    ) -> Result<FusedRepresentation> {
        match self.cfg.fusion {
            FusionMode::Hard => hard_fusion(g, &self.cfg, item, user),
            FusionMode::Soft => soft_fusion(g, &self.cfg, item, user),
        }
    }

    fn example_loss(&self, g: &mut Graph, table: Value, rec: &TokenizedRecord) -> Result<ExampleLoss> {
        let target = rec
            .reason_ids
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("record {} lacks a reason", rec.id)))?;
        let gold = &target[1..];
        let item = self.encode_record_item(g, table, rec)?;
        let memories = [item.title_mem, item.attr_mem];

        match self.encode_user(g, table, &item, rec)? {
            Some(user) => {
                let post = self.posterior(g, &item, &user)?;
                let prior = prior_transform(g, &self.cfg, &item)?;
                let post_dists = decode_train(g, &self.cfg, table, &post, &memories, target)?;
                let prior_dists = decode_train(g, &self.cfg, table, &prior, &memories, target)?;
                let p_side = if self.cfg.detach_posterior {
                    g.tape.detach(post_dists)
                } else {
                    post_dists
                };
                let steps = gold.len();
                let kl_mean = kl_loss(g, p_side, prior_dists)?;
                let kl = g.tape.scale(kl_mean, steps as f64);
                let nll = nll_sum(g, post_dists, gold)?;
                let reg = if self.cfg.bow_autoregressive {
                    let dists = decoder_forward(
                        g,
                        &self.cfg,
                        table,
                        user.user,
                        &[],
                        &target[..target.len() - 1],
                    )?;
                    nll_sum(g, dists, gold)?
                } else {
                    bow_regular_sum(g, &self.cfg, &user, gold, self.vocab_size)?
                };
                Ok(ExampleLoss {
                    nll,
                    kl: Some((kl, steps)),
                    reg: Some(reg),
                })
            }
            None => {
                let prior = prior_transform(g, &self.cfg, &item)?;
                let dists = decode_train(g, &self.cfg, table, &prior, &memories, target)?;
                let nll = nll_sum(g, dists, gold)?;
                Ok(ExampleLoss {
                    nll,
                    kl: None,
                    reg: None,
                })
            }
        }
    }

    /// Pooled loss over a batch: NLL averaged per token over all
    /// examples; KL and the regular term averaged per token over the
    /// examples that have user content (zero when none do).
    pub fn batch_loss(&self, g: &mut Graph, batch: &[&TokenizedRecord]) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Contract("batch_loss on an empty batch".into()));
        }
        let table = embedding_table(g, &self.cfg, self.vocab_size)?;
        let mut nll_parts = Vec::new();
        let mut nll_tokens = 0usize;
        let mut kl_parts = Vec::new();
        let mut kl_steps = 0usize;
        let mut reg_parts = Vec::new();
        let mut reg_tokens = 0usize;
        for rec in batch {
            let ex = self.example_loss(g, table, rec)?;
            nll_parts.push(ex.nll.0);
            nll_tokens += ex.nll.1;
            if let Some((node, steps)) = ex.kl {
                kl_parts.push(node);
                kl_steps += steps;
            }
            if let Some((node, tokens)) = ex.reg {
                reg_parts.push(node);
                reg_tokens += tokens;
            }
        }
        let nll = self.pooled(g, &nll_parts, nll_tokens)?;
        let kl = self.pooled(g, &kl_parts, kl_steps)?;
        let reg = self.pooled(g, &reg_parts, reg_tokens)?;

        let kl_w = g.tape.scale(kl, self.cfg.w_kl);
        let nll_w = g.tape.scale(nll, self.cfg.w_nll);
        let reg_w = g.tape.scale(reg, self.cfg.w_reg);
        let partial = g.tape.add(kl_w, nll_w)?;
        let node = g.tape.add(partial, reg_w)?;

        let kl_v = g.tape.value(kl_w).data()[0];
        let nll_v = g.tape.value(nll_w).data()[0];
        let reg_v = g.tape.value(reg_w).data()[0];
        Ok(BatchLoss {
            breakdown: total_loss(kl_v, nll_v, reg_v),
            node,
        })
    }

    fn pooled(&self, g: &mut Graph, parts: &[Value], denom: usize) -> Result<Value> {
        if parts.is_empty() || denom == 0 {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let mut acc = parts[0];
        for p in &parts[1..] {
            acc = g.tape.add(acc, *p)?;
        }
        Ok(g.tape.scale(acc, 1.0 / denom as f64))
    }

    /// Which representation conditions generation for this record.
    fn inference_fused(
        &self,
        g: &mut Graph,
        table: Value,
        item: &ItemState,
        rec: &TokenizedRecord,
    ) -> Result<FusedRepresentation> {
        match self.cfg.inference {
            InferenceConditioning::Prior => prior_transform(g, &self.cfg, item),
            InferenceConditioning::PosteriorIfAvailable => {
                match self.encode_user(g, table, item, rec)? {
                    Some(user) => self.posterior(g, item, &user),
                    None => prior_transform(g, &self.cfg, item),
                }
            }
        }
    }

    /// Generate content token ids for one record.
    pub fn generate_for(
        &self,
        g: &mut Graph,
        rec: &TokenizedRecord,
        gen: &GenerationConfig,
    ) -> Result<Vec<usize>> {
        Ok(self.generate_scored(g, rec, gen)?.0)
    }

    pub fn generate_scored(
        &self,
        g: &mut Graph,
        rec: &TokenizedRecord,
        gen: &GenerationConfig,
    ) -> Result<(Vec<usize>, f64)> {
        let table = embedding_table(g, &self.cfg, self.vocab_size)?;
        let item = self.encode_record_item(g, table, rec)?;
        let fused = self.inference_fused(g, table, &item, rec)?;
        let memories = [item.title_mem, item.attr_mem];
        generate_with_score(g, &self.cfg, table, fused.vector, &memories, gen)
    }

    /// Per-step top-k probabilities along a generated sequence, for the
    /// inspection sidecar.
    pub fn step_top_k(
        &self,
        g: &mut Graph,
        rec: &TokenizedRecord,
        generated: &[usize],
        k: usize,
    ) -> Result<Vec<Vec<(usize, f64)>>> {
        let table = embedding_table(g, &self.cfg, self.vocab_size)?;
        let item = self.encode_record_item(g, table, rec)?;
        let fused = self.inference_fused(g, table, &item, rec)?;
        let memories = [item.title_mem, item.attr_mem];
        let mut input = vec![crate::data::BOS];
        input.extend_from_slice(generated);
        let dists = decoder_forward(g, &self.cfg, table, fused.vector, &memories, &input)?;
        let t = g.tape.value(dists);
        let mut out = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let mut row: Vec<(usize, f64)> = (0..t.cols()).map(|c| (c, t.at(r, c))).collect();
            row.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            row.truncate(k);
            out.push(row);
        }
        Ok(out)
    }
}
