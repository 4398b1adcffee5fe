//! Read-only prediction with a fixed candidate set.

use crate::ae::{answer_logits_many, extract_answer, AnswerLogits};
use crate::autodiff::Graph;
use crate::backbone::{EncodedSequence, Stream};
use crate::corpus::{AnswerMask, CandidateSet};
use crate::error::Result;
use crate::model::Model;
use crate::qs::{question_distribution, score_candidates, QuestionDistribution, QuestionScores};
use crate::tensor::Matrix;

/// Caches the encodings of a candidate set so that each prediction only
/// encodes the sentence and the answer.
pub struct Predictor<'m> {
    model: &'m Model,
    candidates: CandidateSet,
    questions: Vec<(Matrix, Vec<bool>)>,
}

/// A sentence encoded once for several queries.
pub struct SentenceView<'m, 'g> {
    predictor: &'g Predictor<'m>,
    graph: Graph<'m>,
    ids: Vec<usize>,
    tokens: Vec<String>,
    sentence: EncodedSequence,
    questions: Vec<EncodedSequence>,
}

impl<'m> Predictor<'m> {
    pub fn new(model: &'m Model, candidates: CandidateSet) -> Result<Self> {
        let mut g = Graph::new(&model.params);
        let questions = candidates
            .entries()
            .iter()
            .map(|c| {
                let ids = model.question_ids(&c.question)?;
                let enc = model.net().encode(&mut g, &ids, Stream::Question)?;
                Ok((g.value(enc.states).clone(), enc.keep))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            candidates,
            questions,
        })
    }

    pub fn candidates(&self) -> &CandidateSet {
        &self.candidates
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn sentence<S: AsRef<str>>(&self, tokens: &[S]) -> Result<SentenceView<'m, '_>> {
        let ids = self.model.sentence_ids(tokens)?;
        let mut graph = Graph::new(&self.model.params);
        let sentence = self.model.net().encode(&mut graph, &ids, Stream::Sentence)?;
        let questions = self
            .questions
            .iter()
            .map(|(m, keep)| EncodedSequence {
                states: graph.constant(m.clone()),
                keep: keep.clone(),
            })
            .collect();
        Ok(SentenceView {
            predictor: self,
            graph,
            ids,
            tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
            sentence,
            questions,
        })
    }
}

impl SentenceView<'_, '_> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn question_scores(&mut self, answer: &AnswerMask) -> Result<QuestionScores> {
        let model = self.predictor.model;
        let a_ids = model.answer_ids(&self.tokens, answer)?;
        let g = &mut self.graph;
        let a = model.net().encode_answer(g, &a_ids, answer)?;
        let scores = score_candidates(g, model.net(), &self.sentence, &a, &self.questions);
        Ok(QuestionScores {
            scores: g.value(scores).data().to_vec(),
        })
    }

    pub fn question_distribution(&mut self, answer: &AnswerMask) -> Result<QuestionDistribution> {
        let scores = self.question_scores(answer)?;
        question_distribution(&scores, self.predictor.model.config.k, &self.predictor.candidates)
    }

    /// Answer logits for the given candidate indices.
    pub fn answer_logits(&mut self, candidate_indices: &[usize]) -> Vec<AnswerLogits> {
        let qs: Vec<EncodedSequence> = candidate_indices.iter().map(|&i| self.questions[i].clone()).collect();
        let model = self.predictor.model;
        let logits = answer_logits_many(&mut self.graph, model.net(), &self.sentence, &qs);
        logits
            .into_iter()
            .map(|l| AnswerLogits {
                logits: self.graph.value(l).data().to_vec(),
            })
            .collect()
    }

    pub fn extract(&mut self, candidate_index: usize) -> AnswerMask {
        extract_answer(&self.answer_logits(&[candidate_index])[0])
    }
}
