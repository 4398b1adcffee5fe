//! Supervised reference models, the shared experiment setup, and sweeps over
//! model kinds, labeled-set sizes and seeds.

use std::fmt;
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, Preset};
use crate::corpus::{sample_labeled_subset, split_dataset, AnnotatedSentence, QuestionBank, SaPair, Triplet};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_checkpoint, ExperimentReport};
use crate::model::{Architecture, Model};
use crate::training::{train, LossBreakdown, ScheduleConfig, TrainConfig};
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BaselineKind {
    pub architecture: Architecture,
    pub size: Preset,
}

/// Trains on labeled triplets only (the joint loop with lambda fixed at 0).
pub fn train_baseline(
    kind: BaselineKind,
    labeled: &[Triplet],
    vocab: Vocabulary,
    bank: &QuestionBank,
    cfg: &TrainConfig,
    tune: impl FnOnce(&mut ModelConfig),
) -> Result<(Model, Vec<LossBreakdown>)> {
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("a baseline needs labeled triplets".into()));
    }
    let mut model_cfg = ModelConfig::from_preset(kind.size, vocab.len());
    tune(&mut model_cfg);
    let mut model = Model::new(model_cfg, kind.architecture, vocab, cfg.seed)?;
    let cfg = TrainConfig {
        schedule: ScheduleConfig::constant(0.0),
        ..cfg.clone()
    };
    let history = train(&mut model, &cfg, labeled, &[], bank, |_| Ok(()))?;
    Ok((model, history))
}

/// Every model kind compared in sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Semi-supervised transformer trained with the joint loss.
    Samie,
    Transformer,
    Recurrent,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Samie, ModelKind::Transformer, ModelKind::Recurrent];

    pub fn architecture(self) -> Architecture {
        match self {
            ModelKind::Samie | ModelKind::Transformer => Architecture::Transformer,
            ModelKind::Recurrent => Architecture::Recurrent,
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        self == ModelKind::Samie
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Samie => "samie",
            ModelKind::Transformer => "transformer",
            ModelKind::Recurrent => "recurrent",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "samie" => Ok(ModelKind::Samie),
            "transformer" => Ok(ModelKind::Transformer),
            "recurrent" | "bilstm" => Ok(ModelKind::Recurrent),
            _ => Err(Error::InvalidArgument(format!("unknown model kind `{s}`"))),
        }
    }
}

/// A corpus split into train and test sentences, with the vocabulary built
/// from the training side.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Vec<Arc<AnnotatedSentence>>,
    pub test: Vec<AnnotatedSentence>,
    pub bank: QuestionBank,
    pub vocab: Vocabulary,
}

impl ExperimentData {
    pub fn new(corpus: &[AnnotatedSentence], bank: QuestionBank, test_fraction: f64, split_seed: u64) -> Result<Self> {
        let (train, test) = split_dataset(corpus, test_fraction, split_seed)?;
        Ok(Self::from_split(train, test, bank))
    }

    pub fn from_split(train: Vec<AnnotatedSentence>, test: Vec<AnnotatedSentence>, bank: QuestionBank) -> Self {
        let vocab = Vocabulary::build(&train, &bank);
        Self {
            train: train.into_iter().map(Arc::new).collect(),
            test,
            bank,
            vocab,
        }
    }

    /// Labeled triplets from `labeled_sentences` training sentences and
    /// pairs from all the others.
    pub fn sample(&self, labeled_sentences: usize, seed: u64) -> Result<(Vec<Triplet>, Vec<SaPair>)> {
        sample_labeled_subset(&self.train, labeled_sentences, &self.bank, seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SweepCell {
    pub kind: ModelKind,
    pub preset: Preset,
    pub labeled_sentences: usize,
    pub seed: u64,
}

impl fmt::Display for SweepCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}-n{}-s{}",
            self.kind, self.preset, self.labeled_sentences, self.seed
        )
    }
}

/// Knobs shared by every cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    #[serde(default)]
    pub max_grad_norm: f64,
    /// Mixing schedule for the semi-supervised kind; `None` means the
    /// default ramp for `steps`.
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    pub k: f64,
    pub p_th: f64,
}

impl RunSettings {
    pub fn new(steps: usize) -> Self {
        let defaults = TrainConfig::new(steps, 0);
        let model = ModelConfig::from_preset(Preset::Regular, 2);
        Self {
            steps,
            learning_rate: defaults.learning_rate,
            labeled_batch: defaults.labeled_batch,
            unlabeled_batch: defaults.unlabeled_batch,
            max_grad_norm: defaults.max_grad_norm,
            schedule: None,
            k: model.k,
            p_th: model.p_th,
        }
    }

    pub fn train_config(&self, seed: u64, semi_supervised: bool) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            labeled_batch: self.labeled_batch,
            unlabeled_batch: self.unlabeled_batch,
            max_grad_norm: self.max_grad_norm,
            schedule: if semi_supervised {
                self.schedule.unwrap_or_else(|| ScheduleConfig::default_for(self.steps))
            } else {
                ScheduleConfig::constant(0.0)
            },
            ..TrainConfig::new(self.steps, seed)
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub model: Model,
    pub history: Vec<LossBreakdown>,
    pub report: ExperimentReport,
}

/// Trains and evaluates one cell.
pub fn run_cell(data: &ExperimentData, cell: &SweepCell, settings: &RunSettings) -> Result<CellOutcome> {
    let (labeled, unlabeled) = data.sample(cell.labeled_sentences, cell.seed)?;
    let mut model_cfg = ModelConfig::from_preset(cell.preset, data.vocab.len());
    model_cfg.k = settings.k;
    model_cfg.p_th = settings.p_th;
    let cfg = settings.train_config(cell.seed, cell.kind.uses_unlabeled());
    info!("cell {cell}: {} triplets, {} pairs", labeled.len(), unlabeled.len());
    let (model, history) = if cell.kind.uses_unlabeled() {
        let mut model = Model::new(model_cfg, cell.kind.architecture(), data.vocab.clone(), cell.seed)?;
        let history = train(&mut model, &cfg, &labeled, &unlabeled, &data.bank, |_| Ok(()))?;
        (model, history)
    } else {
        let kind = BaselineKind {
            architecture: cell.kind.architecture(),
            size: cell.preset,
        };
        train_baseline(kind, &labeled, data.vocab.clone(), &data.bank, &cfg, |c| {
            *c = model_cfg.clone()
        })?
    };
    let report = evaluate_checkpoint(&model, &data.test, &data.bank, settings.p_th)?;
    Ok(CellOutcome { model, history, report })
}

/// All cells of `kinds × sizes × seeds` at one preset, in that nesting order.
pub fn sweep_cells(kinds: &[ModelKind], preset: Preset, sizes: &[usize], seeds: &[u64]) -> Vec<SweepCell> {
    let mut cells = Vec::with_capacity(kinds.len() * sizes.len() * seeds.len());
    for &kind in kinds {
        for &labeled_sentences in sizes {
            for &seed in seeds {
                cells.push(SweepCell {
                    kind,
                    preset,
                    labeled_sentences,
                    seed,
                });
            }
        }
    }
    cells
}

/// Runs every cell not accepted by `done`, handing each finished cell to
/// `on_cell`. A failing cell stops the sweep; cells finished before it have
/// already been handed over.
pub fn sweep(
    data: &ExperimentData,
    cells: &[SweepCell],
    settings: &RunSettings,
    done: impl Fn(&SweepCell) -> bool,
    mut on_cell: impl FnMut(&SweepCell, &CellOutcome) -> Result<()>,
) -> Result<usize> {
    if let Some(c) = cells.iter().find(|c| c.labeled_sentences > data.train.len()) {
        return Err(Error::InvalidArgument(format!(
            "cell {c} asks for more labeled sentences than the {} training sentences",
            data.train.len()
        )));
    }
    let mut ran = 0;
    for cell in cells {
        if done(cell) {
            info!("skipping finished cell {cell}");
            continue;
        }
        let outcome = run_cell(data, cell, settings)?;
        on_cell(cell, &outcome)?;
        ran += 1;
    }
    Ok(ran)
}

/// Median of a non-empty sample (mean of the middle two for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    QsAccuracy,
    AePrecision,
    AeRecall,
    AeF1,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::QsAccuracy, Metric::AePrecision, Metric::AeRecall, Metric::AeF1];

    pub fn of(self, r: &ExperimentReport) -> f64 {
        match self {
            Metric::QsAccuracy => r.qs_accuracy,
            Metric::AePrecision => r.ae.precision,
            Metric::AeRecall => r.ae.recall,
            Metric::AeF1 => r.ae.f1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::QsAccuracy => "qs_accuracy",
            Metric::AePrecision => "ae_precision",
            Metric::AeRecall => "ae_recall",
            Metric::AeF1 => "ae_f1",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::QsAccuracy => "Question selection accuracy",
            Metric::AePrecision => "Answer extraction precision",
            Metric::AeRecall => "Answer extraction recall",
            Metric::AeF1 => "Answer extraction F1",
        }
    }
}

/// Median-over-seeds metric value per labeled size for one model kind and
/// preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub kind: ModelKind,
    pub preset: Preset,
    pub metric: Metric,
    pub points: Vec<(usize, f64)>,
}

pub fn curves(results: &[(SweepCell, ExperimentReport)], metric: Metric) -> Vec<Curve> {
    let mut keys: Vec<(ModelKind, Preset)> = results.iter().map(|(c, _)| (c.kind, c.preset)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(kind, preset)| {
            let mut sizes: Vec<usize> = results
                .iter()
                .filter(|(c, _)| c.kind == kind && c.preset == preset)
                .map(|(c, _)| c.labeled_sentences)
                .collect();
            sizes.sort_unstable();
            sizes.dedup();
            let points = sizes
                .into_iter()
                .map(|n| {
                    let vals: Vec<f64> = results
                        .iter()
                        .filter(|(c, _)| c.kind == kind && c.preset == preset && c.labeled_sentences == n)
                        .map(|(_, r)| metric.of(r))
                        .collect();
                    (n, median(&vals))
                })
                .collect();
            Curve {
                kind,
                preset,
                metric,
                points,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape_and_median() {
        let cells = sweep_cells(
            &[ModelKind::Samie, ModelKind::Transformer],
            Preset::Small,
            &[64, 512],
            &[1, 2, 3],
        );
        assert_eq!(cells.len(), 12);
        assert_eq!(sweep_cells(&[ModelKind::Samie], Preset::Small, &[64], &[1]).len(), 1);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }

    #[test]
    fn kinds_parse() {
        for k in ModelKind::ALL {
            assert_eq!(k.to_string().parse::<ModelKind>().unwrap(), k);
        }
        assert!("gpt".parse::<ModelKind>().is_err());
    }
}
