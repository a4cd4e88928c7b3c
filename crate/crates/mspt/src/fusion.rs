//! Adaptive posterior module: the prior transform over item content, the
//! hard (concatenation) and soft (convex gate) posterior fusions, and the
//! per-step KL divergence between posterior- and prior-conditioned
//! output distributions.

use crate::config::{ExperimentConfig, SigmaKind};
use crate::encoders::ItemState;
use crate::error::{Error, Result};
use crate::qa::UserState;
use crate::tensor::{Graph, Init, Value};

/// Probability floor applied before every log.
pub const PROB_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionSource {
    Prior,
    PosteriorHard,
    PosteriorSoft,
}

/// A decoder conditioning vector and how it was produced.
pub struct FusedRepresentation {
    /// `[1, d]`, components within the activation's range.
    pub vector: Value,
    pub source: FusionSource,
    /// Soft-fusion gate, present only for [`FusionSource::PosteriorSoft`].
    pub lambda2: Option<f64>,
}

fn sigma(g: &mut Graph, cfg: &ExperimentConfig, x: Value) -> Value {
    match cfg.sigma {
        SigmaKind::Tanh => g.tape.tanh(x),
        SigmaKind::Sigmoid => g.tape.sigmoid(x),
    }
}

/// Prior path, available for every product: `sigma(W3 H_item + b3)`.
pub fn prior_transform(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    item: &ItemState,
) -> Result<FusedRepresentation> {
    let d = g.tape.shape(item.item)[1];
    let w = g.param("fusion.prior.w", &[d, d], Init::Uniform { fan_in: d })?;
    let b = g.param("fusion.prior.b", &[d], Init::Uniform { fan_in: d })?;
    let pre = g.tape.matmul(item.item, w)?;
    let pre = g.tape.add_bias(pre, b)?;
    Ok(FusedRepresentation {
        vector: sigma(g, cfg, pre),
        source: FusionSource::Prior,
        lambda2: None,
    })
}

/// Hard fusion: `sigma(W4 [H_item, H_user] + b4)`.
pub fn hard_fusion(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    item: &ItemState,
    user: &UserState,
) -> Result<FusedRepresentation> {
    let d = g.tape.shape(item.item)[1];
    let w = g.param("fusion.hard.w", &[2 * d, d], Init::Uniform { fan_in: 2 * d })?;
    let b = g.param("fusion.hard.b", &[d], Init::Uniform { fan_in: 2 * d })?;
    let cat = g.tape.concat(&[item.item, user.user], 1)?;
    let pre = g.tape.matmul(cat, w)?;
    let pre = g.tape.add_bias(pre, b)?;
    Ok(FusedRepresentation {
        vector: sigma(g, cfg, pre),
        source: FusionSource::PosteriorHard,
        lambda2: None,
    })
}

/// Soft fusion: `sigma(W5 (lambda2 H_item + (1 - lambda2) H_user) + b5)`.
pub fn soft_fusion(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    item: &ItemState,
    user: &UserState,
) -> Result<FusedRepresentation> {
    if !(0.0..=1.0).contains(&cfg.lambda2) {
        return Err(Error::Config(format!("lambda2 = {} outside [0,1]", cfg.lambda2)));
    }
    let d = g.tape.shape(item.item)[1];
    let w = g.param("fusion.soft.w", &[d, d], Init::Uniform { fan_in: d })?;
    let b = g.param("fusion.soft.b", &[d], Init::Uniform { fan_in: d })?;
    let it = g.tape.scale(item.item, cfg.lambda2);
    let us = g.tape.scale(user.user, 1.0 - cfg.lambda2);
    let mix = g.tape.add(it, us)?;
    let pre = g.tape.matmul(mix, w)?;
    let pre = g.tape.add_bias(pre, b)?;
    Ok(FusedRepresentation {
        vector: sigma(g, cfg, pre),
        source: FusionSource::PosteriorSoft,
        lambda2: Some(cfg.lambda2),
    })
}

/// Mean over decoding steps of `KL(post_t || prior_t)` between per-step
/// vocabulary distributions, with probabilities floored at
/// [`PROB_FLOOR`] before the logs.
pub fn kl_loss(g: &mut Graph, post: Value, prior: Value) -> Result<Value> {
    let (ps, qs) = (g.tape.shape(post).to_vec(), g.tape.shape(prior).to_vec());
    if ps != qs || ps.len() != 2 {
        return Err(Error::Contract(format!(
            "kl_loss needs matching step x vocab distributions, got {ps:?} vs {qs:?}"
        )));
    }
    let steps = ps[0] as f64;
    let p_floor = g.tape.clamp_min(post, PROB_FLOOR);
    let q_floor = g.tape.clamp_min(prior, PROB_FLOOR);
    let lp = g.tape.log(p_floor)?;
    let lq = g.tape.log(q_floor)?;
    let diff = g.tape.sub(lp, lq)?;
    let weighted = g.tape.mul(post, diff)?;
    let total = g.tape.sum(weighted);
    Ok(g.tape.scale(total, 1.0 / steps))
}
