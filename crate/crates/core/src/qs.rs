//! Question selection: score candidate questions against a sentence and an
//! answer, turn the scores into a distribution, and pick a question.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::EncodedSequence;
use crate::corpus::{Candidate, CandidateSet};
use crate::error::{Error, Result};
use crate::model::Network;

/// Cosine scores, one per candidate, each in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionScores {
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionDistribution {
    pub probs: Vec<f64>,
    pub candidates: CandidateSet,
}

impl QuestionDistribution {
    /// Index of the most probable candidate; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn prob_of(&self, candidate_index: usize) -> f64 {
        self.probs[candidate_index]
    }
}

/// First index of the maximum. Panics on an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `softmax(k · scores)`, computed with the maximum subtracted.
pub fn scaled_softmax(scores: &[f64], k: f64) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(k * s));
    let exps: Vec<f64> = scores.iter().map(|&s| (k * s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn question_distribution(
    scores: &QuestionScores,
    k: f64,
    candidates: &CandidateSet,
) -> Result<QuestionDistribution> {
    if scores.scores.is_empty() {
        return Err(Error::InvalidArgument("no candidate questions".into()));
    }
    if scores.scores.len() != candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} candidates",
            scores.scores.len(),
            candidates.len()
        )));
    }
    Ok(QuestionDistribution {
        probs: scaled_softmax(&scores.scores, k),
        candidates: candidates.clone(),
    })
}

/// The most probable candidate if its probability exceeds `p_th`.
pub fn select_question(dist: &QuestionDistribution, p_th: f64) -> Option<&Candidate> {
    let best = dist.argmax();
    (dist.probs[best] > p_th).then(|| &dist.candidates.entries()[best])
}

/// Mean of the non-padded rows.
pub fn pooled(g: &mut Graph, seq: &EncodedSequence) -> Var {
    let keep = if seq.keep.iter().all(|&b| b) {
        None
    } else {
        Some(seq.keep.as_slice())
    };
    g.mean_rows(seq.states, keep)
}

/// Pooled sentence-answer vector that every question is compared with.
pub fn selection_vector(g: &mut Graph, net: &Network, s: &EncodedSequence, a: &EncodedSequence) -> Var {
    let h = net.selection_states(g, s, a);
    let keep = if s.keep.iter().all(|&b| b) {
        None
    } else {
        Some(s.keep.as_slice())
    };
    g.mean_rows(h, keep)
}

pub fn score_question(
    g: &mut Graph,
    net: &Network,
    s: &EncodedSequence,
    a: &EncodedSequence,
    q: &EncodedSequence,
) -> Var {
    let v_sa = selection_vector(g, net, s, a);
    let v_q = pooled(g, q);
    g.cosine(v_q, v_sa)
}

/// Scores of every question as a `1 × C` node, sharing the sentence-answer
/// vector.
pub fn score_candidates(
    g: &mut Graph,
    net: &Network,
    s: &EncodedSequence,
    a: &EncodedSequence,
    qs: &[EncodedSequence],
) -> Var {
    let v_sa = selection_vector(g, net, s, a);
    let scores: Vec<Var> = qs
        .iter()
        .map(|q| {
            let v_q = pooled(g, q);
            g.cosine(v_q, v_sa)
        })
        .collect();
    g.concat_cols(&scores)
}
