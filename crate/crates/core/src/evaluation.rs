//! Metrics: question-selection accuracy, word-level answer precision /
//! recall / F1, confusion matrices and cluster alignment.

use serde::{Deserialize, Serialize};

use crate::ae::verify_answer;
use crate::corpus::{AnnotatedSentence, AnswerMask, CandidateSet, Category, QuestionBank};
use crate::error::{Error, Result};
use crate::inference::Predictor;
use crate::model::Model;
use crate::vocab::{tokenize, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl WordPrf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// Fraction of exact matches; a missing prediction counts as wrong.
pub fn qs_accuracy<T: PartialEq>(predictions: &[Option<T>], gold: &[T]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let correct = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.as_ref() == Some(*g))
        .count();
    Ok(correct as f64 / gold.len() as f64)
}

/// Counts every token position independently across all sentences.
pub fn ae_word_prf(predicted: &[AnswerMask], gold: &[AnswerMask]) -> Result<WordPrf> {
    if predicted.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted masks for {} gold masks",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::InvalidArgument(format!(
                "mask {i}: predicted length {} vs gold length {}",
                p.len(),
                g.len()
            )));
        }
        for (&pb, &gb) in p.bits().iter().zip(g.bits()) {
            match (pb, gb) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(WordPrf::from_counts(tp, fp, fn_))
}

/// Rows are gold categories, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn size(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Diagonal mass over total mass (0 for an empty matrix).
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: usize = (0..self.size()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total as f64
    }

    /// Share of row `row` held by its `n` largest cells (1 for an empty row).
    pub fn top_share(&self, row: usize, n: usize) -> f64 {
        let mut cells = self.counts[row].clone();
        let total: usize = cells.iter().sum();
        if total == 0 {
            return 1.0;
        }
        cells.sort_unstable_by(|a, b| b.cmp(a));
        cells.iter().take(n).sum::<usize>() as f64 / total as f64
    }

    /// Columns reordered so that column `permutation[g]` lands at `g`.
    pub fn permuted(&self, permutation: &[usize]) -> Self {
        Self {
            counts: self
                .counts
                .iter()
                .map(|row| permutation.iter().map(|&c| row[c]).collect())
                .collect(),
        }
    }
}

pub fn confusion_matrix(predicted: &[usize], gold: &[usize], size: usize) -> Result<ConfusionMatrix> {
    if predicted.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    let mut counts = vec![vec![0; size]; size];
    for (&p, &g) in predicted.iter().zip(gold) {
        if p >= size || g >= size {
            return Err(Error::InvalidArgument(format!(
                "category index {} outside 0..{size}",
                p.max(g)
            )));
        }
        counts[g][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `permutation[g]` is the predicted column matched with gold row `g`.
    pub permutation: Vec<usize>,
    pub accuracy: f64,
}

/// The one-to-one column assignment with the largest matched mass.
pub fn clustering_alignment(matrix: &ConfusionMatrix) -> Result<Alignment> {
    let n = matrix.size();
    if matrix.counts.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument("confusion matrix is not square".into()));
    }
    if n == 0 {
        return Ok(Alignment {
            permutation: Vec::new(),
            accuracy: 0.0,
        });
    }
    let weights = pathfinding::matrix::Matrix::from_rows(
        matrix
            .counts
            .iter()
            .map(|r| r.iter().map(|&c| c as i64).collect::<Vec<_>>()),
    )
    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (matched, permutation) = pathfinding::kuhn_munkres::kuhn_munkres(&weights);
    let total = matrix.total();
    Ok(Alignment {
        permutation,
        accuracy: if total == 0 { 0.0 } else { matched as f64 / total as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub categories: Vec<Category>,
    pub instances: usize,
    pub qs_accuracy: f64,
    pub ae: WordPrf,
    pub confusion: ConfusionMatrix,
    /// Share of instances whose best question does not clear `p_th`.
    pub qs_rejection_rate: f64,
    /// Share of extracted answers that pass verification at `p_th`.
    pub ae_acceptance_rate: f64,
    pub p_th: f64,
}

/// Evaluates question selection (gold answer in, question out) and answer
/// extraction (gold question in, answer out) separately on every slot of
/// `test`, with the first question of each group as the candidate set.
pub fn evaluate_checkpoint(
    model: &Model,
    test: &[AnnotatedSentence],
    bank: &QuestionBank,
    p_th: f64,
) -> Result<ExperimentReport> {
    check_bank_vocabulary(model, bank)?;
    let candidates = CandidateSet::first_of_each(bank);
    let predictor = Predictor::new(model, candidates)?;
    let mut qs_pred = Vec::new();
    let mut qs_gold = Vec::new();
    let mut rejected = 0usize;
    let mut accepted = 0usize;
    let mut ae_pred = Vec::new();
    let mut ae_gold = Vec::new();
    for sentence in test {
        let mut view = predictor.sentence(&sentence.tokens)?;
        for slot in &sentence.slots {
            let gold = bank
                .index_of(&slot.category)
                .ok_or_else(|| Error::UnknownCategory(slot.category.to_string()))?;
            let answer = AnswerMask::from_span(sentence.tokens.len(), slot.start, slot.end);
            let dist = view.question_distribution(&answer)?;
            let best = dist.argmax();
            if dist.probs[best] <= p_th {
                rejected += 1;
            }
            qs_pred.push(best);
            qs_gold.push(gold);

            let extracted = view.extract(gold);
            if !extracted.is_empty() {
                let check = view.question_distribution(&extracted)?;
                if verify_answer(&extracted, &check, &slot.category, p_th)?.is_some() {
                    accepted += 1;
                }
            }
            ae_pred.push(extracted);
            ae_gold.push(answer);
        }
    }
    let n = qs_gold.len();
    let preds: Vec<Option<usize>> = qs_pred.iter().copied().map(Some).collect();
    Ok(ExperimentReport {
        categories: bank.categories().cloned().collect(),
        instances: n,
        qs_accuracy: qs_accuracy(&preds, &qs_gold)?,
        ae: ae_word_prf(&ae_pred, &ae_gold)?,
        confusion: confusion_matrix(&qs_pred, &qs_gold, bank.num_categories())?,
        qs_rejection_rate: rejected as f64 / n as f64,
        ae_acceptance_rate: accepted as f64 / n as f64,
        p_th,
    })
}

/// Every question word must be known to the model, otherwise the bank is
/// not the one the model was trained with.
fn check_bank_vocabulary(model: &Model, bank: &QuestionBank) -> Result<()> {
    for (cat, questions) in bank.groups() {
        for q in questions {
            if let Some(w) = tokenize(q).into_iter().find(|w| model.vocab.id(w) == UNK) {
                return Err(Error::VocabularyMismatch(format!(
                    "word `{w}` of a `{cat}` question is not in the model vocabulary"
                )));
            }
        }
    }
    Ok(())
}
