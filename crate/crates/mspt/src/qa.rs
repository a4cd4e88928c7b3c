//! User-content pipeline: Bi-LSTM encoding of each question‖answer pair
//! and product-guided attention (PGA) over the pair vectors.

use crate::config::{ExperimentConfig, Variant};
use crate::data::SEP;
use crate::encoders::{bilstm_encode, ItemState};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, Tensor, Value};

/// Attention-weighted summary of a product's Q&A discussions.
pub struct UserState {
    /// `[1, d]` fused user-content vector.
    pub user: Value,
    /// `[1, n]` attention weights over the Q&A pairs.
    pub delta: Value,
    /// `[1, d]` vector per encoded pair.
    pub qa_vectors: Vec<Value>,
}

/// Encode one Q&A pair: `question <sep> answer` through the Bi-LSTM,
/// returning the pooled `[1, d]` vector.
pub fn encode_qa_pair(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    table: Value,
    question: &[usize],
    answer: &[usize],
) -> Result<Value> {
    if question.is_empty() || answer.is_empty() {
        return Err(Error::Contract("encode_qa_pair on an empty pair".into()));
    }
    let mut ids = Vec::with_capacity(question.len() + answer.len() + 1);
    ids.extend_from_slice(question);
    ids.push(SEP);
    ids.extend_from_slice(answer);
    let prefix = if cfg.share_qa_lstm {
        "item.title.lstm"
    } else {
        "user.qa.lstm"
    };
    Ok(bilstm_encode(g, cfg, table, &ids, prefix)?.pooled)
}

/// Score each pair vector against the item representation and combine:
///
/// `score_k = (W1 H_item + b1)^T (W2 h_k + b2)`, `delta = softmax(score)`,
/// `H_user = sum_k delta_k h_k`.
///
/// With the `NoPga` variant the scoring parameters are never created and
/// `delta` is uniform. `None` means the product has no user content and
/// the caller should fall back to the prior path.
pub fn product_guided_attention(
    g: &mut Graph,
    cfg: &ExperimentConfig,
    item: &ItemState,
    qa_vectors: Vec<Value>,
) -> Result<Option<UserState>> {
    if qa_vectors.is_empty() {
        return Ok(None);
    }
    let d = g.tape.shape(item.item)[1];
    let n = qa_vectors.len();
    let stack = g.tape.concat(&qa_vectors, 0)?;

    let delta = if cfg.variant == Variant::NoPga {
        g.constant(Tensor::new(vec![1, n], vec![1.0 / n as f64; n])?)
    } else {
        let w1 = g.param("user.pga.w1", &[d, d], Init::Uniform { fan_in: d })?;
        let b1 = g.param("user.pga.b1", &[d], Init::Uniform { fan_in: d })?;
        let w2 = g.param("user.pga.w2", &[d, d], Init::Uniform { fan_in: d })?;
        let b2 = g.param("user.pga.b2", &[d], Init::Uniform { fan_in: d })?;
        let u = g.tape.matmul(item.item, w1)?;
        let u = g.tape.add_bias(u, b1)?;
        let v = g.tape.matmul(stack, w2)?;
        let v = g.tape.add_bias(v, b2)?;
        let vt = g.tape.transpose(v)?;
        let scores = g.tape.matmul(u, vt)?;
        g.tape.softmax(scores, 1)?
    };
    let user = g.tape.matmul(delta, stack)?;
    Ok(Some(UserState {
        user,
        delta,
        qa_vectors,
    }))
}
