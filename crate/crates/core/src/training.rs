//! Supervised, unsupervised and joint losses, the mixing schedule, and the
//! training loop.
//!
//! A step runs in two stages. The candidate questions are encoded once in a
//! graph of their own; every example then gets a small graph that reads the
//! question encodings as inputs. Each example graph is differentiated on the
//! spot, and the gradients it sends back into the question encodings are
//! summed and pushed through the first graph at the end of the step.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ae::{answer_cost, answer_logits, answer_logits_many};
use crate::autodiff::{Graph, Var};
use crate::backbone::{EncodedSequence, Stream};
use crate::corpus::{sample_candidate_set, AnswerMask, CandidateSet, QuestionBank, SaPair, Triplet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Gradients, ParamStore};
use crate::qs::score_candidates;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub ramp_steps: usize,
}

impl ScheduleConfig {
    /// 0.1 rising to 0.9 over the first 30% of `total_steps`.
    pub fn default_for(total_steps: usize) -> Self {
        Self {
            lambda_start: 0.1,
            lambda_end: 0.9,
            ramp_steps: (0.3 * total_steps as f64).round() as usize,
        }
    }

    pub fn constant(lambda: f64) -> Self {
        Self {
            lambda_start: lambda,
            lambda_end: lambda,
            ramp_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lambda_start && self.lambda_start <= self.lambda_end && self.lambda_end <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= lambda_start ({}) <= lambda_end ({}) <= 1",
                self.lambda_start, self.lambda_end
            )));
        }
        Ok(())
    }
}

/// Linear ramp from `lambda_start` at step 0 to `lambda_end` at
/// `ramp_steps`, constant afterwards.
pub fn lambda_at(step: usize, sched: &ScheduleConfig) -> f64 {
    if step >= sched.ramp_steps {
        return sched.lambda_end;
    }
    let t = step as f64 / sched.ramp_steps as f64;
    sched.lambda_start + t * (sched.lambda_end - sched.lambda_start)
}

pub fn joint_loss(loss_s: f64, loss_u: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * loss_u + (1.0 - lambda) * loss_s)
}

/// Loss values of one step, as written to the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    #[serde(rename = "loss_s_Q")]
    pub loss_s_q: f64,
    #[serde(rename = "loss_s_A")]
    pub loss_s_a: f64,
    pub loss_u: f64,
    pub lambda: f64,
    pub total: f64,
    /// Batch mean of the smallest per-candidate answer cost; a lower bound
    /// on `loss_u`.
    pub min_candidate_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default)]
    pub max_grad_norm: f64,
    /// A step whose total loss is non-finite or above this value aborts the
    /// run as diverged.
    #[serde(default = "default_loss_limit")]
    pub loss_limit: f64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
}

fn default_loss_limit() -> f64 {
    1e3
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            learning_rate: 1e-3,
            labeled_batch: 32,
            unlabeled_batch: 32,
            max_grad_norm: 0.0,
            loss_limit: default_loss_limit(),
            seed,
            schedule: ScheduleConfig::default_for(steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.labeled_batch == 0 && self.unlabeled_batch == 0 {
            return Err(Error::Config("both batch sizes are zero".into()));
        }
        if self.max_grad_norm < 0.0 {
            return Err(Error::Config("max_grad_norm must be >= 0".into()));
        }
        if !(self.loss_limit > 0.0) {
            return Err(Error::Config("loss_limit must be positive".into()));
        }
        Ok(())
    }
}

/// A labeled example as token ids; `category` indexes the bank.
#[derive(Clone, Debug)]
pub struct PreparedTriplet {
    pub sentence: Vec<usize>,
    pub answer_words: Vec<usize>,
    pub answer: AnswerMask,
    pub category: usize,
}

#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub sentence: Vec<usize>,
    pub answer_words: Vec<usize>,
    pub answer: AnswerMask,
}

pub fn prepare_triplets(model: &Model, bank: &QuestionBank, triplets: &[Triplet]) -> Result<Vec<PreparedTriplet>> {
    triplets
        .iter()
        .map(|t| {
            let category = bank
                .index_of(&t.category)
                .ok_or_else(|| Error::UnknownCategory(t.category.to_string()))?;
            Ok(PreparedTriplet {
                sentence: model.sentence_ids(&t.sentence.tokens)?,
                answer_words: model.answer_ids(&t.sentence.tokens, &t.answer)?,
                answer: t.answer.clone(),
                category,
            })
        })
        .collect()
}

pub fn prepare_pairs(model: &Model, pairs: &[SaPair]) -> Result<Vec<PreparedPair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(PreparedPair {
                sentence: model.sentence_ids(&p.sentence.tokens)?,
                answer_words: model.answer_ids(&p.sentence.tokens, &p.answer)?,
                answer: p.answer.clone(),
            })
        })
        .collect()
}

/// Options for [`batch_loss`] that only tests need.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossOptions {
    /// Treat the question weights of the unsupervised loss as constants, so
    /// only the answer-extraction path receives gradient from it.
    pub detach_weights: bool,
}

/// Losses of one labeled and one unlabeled batch against `candidates`, with
/// gradients of the joint loss added into `grads` when given. The candidate
/// set must list the bank's categories in bank order.
pub fn batch_loss(
    model: &Model,
    labeled: &[&PreparedTriplet],
    unlabeled: &[&PreparedPair],
    candidates: &CandidateSet,
    lambda: f64,
    mut grads: Option<&mut Gradients>,
    opts: LossOptions,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let c = candidates.len();
    if c == 0 {
        return Err(Error::InvalidArgument("empty candidate set".into()));
    }
    if let Some(t) = labeled.iter().find(|t| t.category >= c) {
        return Err(Error::UnknownCategory(format!(
            "labeled category index {} outside the {c}-question candidate set",
            t.category
        )));
    }
    let net = model.net();
    let k = model.config.k;
    let question_ids = candidates
        .entries()
        .iter()
        .map(|e| model.question_ids(&e.question))
        .collect::<Result<Vec<_>>>()?;

    // Stage 1: candidate question encodings.
    let mut stage1 = Graph::new(&model.params);
    let encoded: Vec<EncodedSequence> = question_ids
        .iter()
        .map(|ids| net.encode(&mut stage1, ids, Stream::Question))
        .collect::<Result<_>>()?;
    let q_values: Vec<(Matrix, Vec<bool>)> = encoded
        .iter()
        .map(|e| (stage1.value(e.states).clone(), e.keep.clone()))
        .collect();
    let mut q_grads: Vec<Option<Matrix>> = vec![None; c];

    let sup_weight = if labeled.is_empty() {
        0.0
    } else {
        (1.0 - lambda) / labeled.len() as f64
    };
    let unsup_weight = if unlabeled.is_empty() {
        0.0
    } else {
        lambda / unlabeled.len() as f64
    };

    let (mut sum_ce, mut sum_bce) = (0.0, 0.0);
    for t in labeled {
        let mut g = Graph::new(&model.params);
        let qs = question_inputs(&mut g, &q_values);
        let s = net.encode(&mut g, &t.sentence, Stream::Sentence)?;
        let a = net.encode_answer(&mut g, &t.answer_words, &t.answer)?;
        let scores = score_candidates(&mut g, net, &s, &a, &qs);
        let scaled = g.scale(scores, k);
        let logp = g.log_softmax_rows(scaled);
        let picked = g.pick(logp, 0, t.category);
        let ce = g.scale(picked, -1.0);
        let logits = answer_logits(&mut g, net, &s, &qs[t.category]);
        let bce = answer_cost(&mut g, logits, &t.answer, &s.keep);
        sum_ce += g.value(ce).item();
        sum_bce += g.value(bce).item();
        if let Some(grads) = grads.as_deref_mut() {
            if sup_weight != 0.0 {
                let both = g.add(ce, bce);
                let loss = g.scale(both, sup_weight);
                backward_example(&g, loss, &qs, grads, &mut q_grads);
            }
        }
    }

    let (mut sum_u, mut sum_min) = (0.0, 0.0);
    for p in unlabeled {
        let mut g = Graph::new(&model.params);
        let qs = question_inputs(&mut g, &q_values);
        let s = net.encode(&mut g, &p.sentence, Stream::Sentence)?;
        let a = net.encode_answer(&mut g, &p.answer_words, &p.answer)?;
        let scores = score_candidates(&mut g, net, &s, &a, &qs);
        let logits = answer_logits_many(&mut g, net, &s, &qs);
        let costs: Vec<Var> = logits
            .into_iter()
            .map(|l| answer_cost(&mut g, l, &p.answer, &s.keep))
            .collect();
        let costs = g.concat_cols(&costs);
        let (_, cost_u) = weighted_cost(&mut g, scores, costs, k, opts.detach_weights);
        sum_u += g.value(cost_u).item();
        sum_min += g.value(costs).data().iter().copied().fold(f64::INFINITY, f64::min);
        if let Some(grads) = grads.as_deref_mut() {
            if unsup_weight != 0.0 {
                let loss = g.scale(cost_u, unsup_weight);
                backward_example(&g, loss, &qs, grads, &mut q_grads);
            }
        }
    }

    if let Some(grads) = grads {
        let seeds: Vec<(Var, Matrix)> = encoded
            .iter()
            .zip(q_grads)
            .filter_map(|(e, g)| g.map(|g| (e.states, g)))
            .collect();
        if !seeds.is_empty() {
            stage1.backward_seeded(seeds, grads);
        }
    }

    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let loss_s_q = mean(sum_ce, labeled.len());
    let loss_s_a = mean(sum_bce, labeled.len());
    let loss_u = mean(sum_u, unlabeled.len());
    Ok(LossBreakdown {
        step: 0,
        loss_s_q,
        loss_s_a,
        loss_u,
        lambda,
        total: joint_loss(loss_s_q + loss_s_a, loss_u, lambda)?,
        min_candidate_cost: mean(sum_min, unlabeled.len()),
    })
}

/// `Σ_i softmax(k·scores)_i · costs_i` for `1 × C` scores and costs.
/// Returns the weights and the weighted sum.
pub fn weighted_cost(g: &mut Graph, scores: Var, costs: Var, k: f64, detach_weights: bool) -> (Var, Var) {
    let scaled = g.scale(scores, k);
    let mut weights = g.softmax_rows(scaled, None);
    if detach_weights {
        weights = g.constant(g.value(weights).clone());
    }
    let weighted = g.mul(weights, costs);
    (weights, g.sum(weighted))
}

fn question_inputs(g: &mut Graph, values: &[(Matrix, Vec<bool>)]) -> Vec<EncodedSequence> {
    values
        .iter()
        .map(|(m, keep)| EncodedSequence {
            states: g.input(m.clone()),
            keep: keep.clone(),
        })
        .collect()
}

fn backward_example(
    g: &Graph,
    loss: Var,
    qs: &[EncodedSequence],
    grads: &mut Gradients,
    q_grads: &mut [Option<Matrix>],
) {
    let mut node_grads = g.backward(loss, grads);
    for (q, slot) in qs.iter().zip(q_grads.iter_mut()) {
        if let Some(dq) = node_grads.take(q.states) {
            match slot {
                Some(acc) => acc.add_assign(&dq),
                None => *slot = Some(dq),
            }
        }
    }
}

/// Mean question cross-entropy and mean answer cross-entropy of a labeled
/// batch.
pub fn supervised_loss(model: &Model, batch: &[&PreparedTriplet], candidates: &CandidateSet) -> Result<(f64, f64)> {
    let b = batch_loss(model, batch, &[], candidates, 0.0, None, LossOptions::default())?;
    Ok((b.loss_s_q, b.loss_s_a))
}

/// Batch mean of `Σ_i softmax(k·scores)_i · cost_i` over the candidates.
pub fn unsupervised_loss(model: &Model, batch: &[&PreparedPair], candidates: &CandidateSet) -> Result<f64> {
    Ok(batch_loss(model, &[], batch, candidates, 1.0, None, LossOptions::default())?.loss_u)
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Endless shuffled passes over `0..n` driven by its own generator.
struct IndexStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl IndexStream {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `cfg.steps` joint updates on `model`. `on_step` sees every step's
/// losses in order and may abort the run by returning an error.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    labeled: &[Triplet],
    unlabeled: &[SaPair],
    bank: &QuestionBank,
    mut on_step: impl FnMut(&LossBreakdown) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if labeled.is_empty() && cfg.schedule.lambda_start < 1.0 {
        return Err(Error::InvalidArgument(
            "no labeled triplets; only a constant lambda of 1 can train without them".into(),
        ));
    }
    let labeled = prepare_triplets(model, bank, labeled)?;
    let unlabeled = prepare_pairs(model, unlabeled)?;
    info!(
        "training {} {} model: {} parameters, {} triplets, {} pairs, {} steps",
        model.config.preset,
        model.arch,
        model.params.scalar_count(),
        labeled.len(),
        unlabeled.len(),
        cfg.steps
    );

    let mut labeled_stream = IndexStream::new(labeled.len(), stream_rng(cfg.seed, 1));
    let mut unlabeled_stream = IndexStream::new(unlabeled.len(), stream_rng(cfg.seed, 2));
    let mut candidate_rng = stream_rng(cfg.seed, 3);
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let lambda = lambda_at(step, &cfg.schedule);
        let candidates = sample_candidate_set(bank, &mut candidate_rng);
        let lb: Vec<&PreparedTriplet> = if lambda < 1.0 {
            labeled_stream
                .take(cfg.labeled_batch)
                .into_iter()
                .map(|i| &labeled[i])
                .collect()
        } else {
            Vec::new()
        };
        let ub: Vec<&PreparedPair> = unlabeled_stream
            .take(cfg.unlabeled_batch)
            .into_iter()
            .map(|i| &unlabeled[i])
            .collect();

        let mut grads = Gradients::zeros_like(&model.params);
        let mut losses = batch_loss(
            model,
            &lb,
            &ub,
            &candidates,
            lambda,
            Some(&mut grads),
            LossOptions::default(),
        )?;
        losses.step = step;
        if !losses.total.is_finite() || losses.total > cfg.loss_limit {
            return Err(Error::Divergence {
                step,
                detail: format!("total loss is {} (limit {})", losses.total, cfg.loss_limit),
            });
        }
        if !grads.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        if cfg.max_grad_norm > 0.0 {
            let norm = grads.global_norm();
            if norm > cfg.max_grad_norm {
                grads.scale(cfg.max_grad_norm / norm);
            }
        }
        adam.step(&mut model.params, &grads);
        if !model.params.iter().all(|(_, _, m)| m.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        if step % 50 == 0 || step + 1 == cfg.steps {
            info!(
                "step {step}: total {:.4} qs {:.4} ae {:.4} u {:.4} lambda {:.3}",
                losses.total, losses.loss_s_q, losses.loss_s_a, losses.loss_u, lambda
            );
        } else {
            debug!("step {step}: total {:.4}", losses.total);
        }
        on_step(&losses)?;
        history.push(losses);
    }
    Ok(history)
}
