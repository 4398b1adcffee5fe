//! Answer extraction: per-token logits for a (sentence, question), the
//! positive-logit rule, and verification through question selection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::EncodedSequence;
use crate::corpus::{AnswerMask, Category};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::qs::QuestionDistribution;

/// Logit value used for padded positions.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerLogits {
    pub logits: Vec<f64>,
}

/// Padded positions forced to [`MASKED_LOGIT`].
fn mask_padding(g: &mut Graph, logits: Var, s: &EncodedSequence) -> Var {
    if s.keep.iter().all(|&b| b) {
        logits
    } else {
        g.mask_fill(logits, &s.keep, MASKED_LOGIT)
    }
}

/// `L × 1` logits of the sentence tokens for one question.
pub fn answer_logits(g: &mut Graph, net: &Network, s: &EncodedSequence, q: &EncodedSequence) -> Var {
    answer_logits_many(g, net, s, std::slice::from_ref(q))[0]
}

pub fn answer_logits_many(g: &mut Graph, net: &Network, s: &EncodedSequence, qs: &[EncodedSequence]) -> Vec<Var> {
    net.answer_logits_many(g, s, qs)
        .into_iter()
        .map(|l| mask_padding(g, l, s))
        .collect()
}

/// Mean per-token binary cross-entropy against `gold` over non-pad tokens.
pub fn answer_cost(g: &mut Graph, logits: Var, gold: &AnswerMask, keep: &[bool]) -> Var {
    let n = keep.iter().filter(|&&k| k).count().max(1) as f64;
    let weights = keep.iter().map(|&k| if k { 1.0 / n } else { 0.0 }).collect();
    let mut targets = gold.as_targets();
    targets.resize(keep.len(), 0.0);
    g.bce_with_logits(logits, targets, weights)
}

/// Bit `t` is set iff logit `t` is strictly positive.
pub fn extract_answer(logits: &AnswerLogits) -> AnswerMask {
    AnswerMask::new(logits.logits.iter().map(|&z| z > 0.0).collect())
}

/// Accepts `mask` when it is non-empty and the asked category's probability
/// under `dist` (computed for the extracted answer) exceeds `p_th`.
pub fn verify_answer(
    mask: &AnswerMask,
    dist: &QuestionDistribution,
    asked: &Category,
    p_th: f64,
) -> Result<Option<AnswerMask>> {
    let idx = dist
        .candidates
        .index_of(asked)
        .ok_or_else(|| Error::UnknownCategory(asked.to_string()))?;
    if mask.is_empty() {
        return Ok(None);
    }
    Ok((dist.probs[idx] > p_th).then(|| mask.clone()))
}
