//! Experiment manifests: every knob of a run in one TOML file, stored next
//! to the outputs it produced.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use samie::backbone::Preset;
use samie::baselines::{ModelKind, RunSettings};
use samie::model::Architecture;
use samie::training::{ScheduleConfig, TrainConfig};

use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    /// Canonical JSONL corpus, as written by `prepare`.
    pub corpus: PathBuf,
    pub bank: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_labeled_size")]
    pub labeled_size: usize,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    /// Train SAMIE (joint loss over triplets and pairs) rather than a
    /// supervised-only baseline.
    #[serde(default = "default_true")]
    pub semi_supervised: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_p_th")]
    pub p_th: f64,
    #[serde(default)]
    pub training: TrainingSection,
    /// Absent means the default ramp for the configured step count.
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    #[serde(default)]
    pub max_grad_norm: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::new(1000, 0);
        Self {
            steps: t.steps,
            learning_rate: t.learning_rate,
            labeled_batch: t.labeled_batch,
            unlabeled_batch: t.unlabeled_batch,
            max_grad_norm: t.max_grad_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub kinds: Vec<ModelKind>,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

fn default_split_seed() -> u64 {
    7
}
fn default_test_fraction() -> f64 {
    0.15
}
fn default_labeled_size() -> usize {
    512
}
fn default_preset() -> Preset {
    Preset::Regular
}
fn default_architecture() -> Architecture {
    Architecture::Transformer
}
fn default_true() -> bool {
    true
}
fn default_seed() -> u64 {
    1
}
fn default_k() -> f64 {
    4.0
}
fn default_p_th() -> f64 {
    0.5
}

impl ExperimentManifest {
    pub fn new(corpus: PathBuf, bank: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            corpus,
            bank,
            output_dir,
            split_seed: default_split_seed(),
            test_fraction: default_test_fraction(),
            labeled_size: default_labeled_size(),
            preset: default_preset(),
            architecture: default_architecture(),
            semi_supervised: true,
            seed: default_seed(),
            k: default_k(),
            p_th: default_p_th(),
            training: TrainingSection::default(),
            schedule: None,
            sweep: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))
            .map_err(Failure::Validation)?;
        let mut manifest: Self = toml::from_str(&text)
            .with_context(|| format!("parsing manifest {}", path.display()))
            .map_err(Failure::Validation)?;
        // relative paths are taken relative to the manifest's directory
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut manifest.corpus, &mut manifest.bank, &mut manifest.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serialises")
    }

    /// Writes the manifest into its output directory.
    pub fn store(&self) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir).with_context(|| format!("creating {}", self.output_dir.display()))?;
        let path = self.output_dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !self.corpus.is_file() {
            bail!("corpus {} does not exist", self.corpus.display());
        }
        if !self.bank.is_file() {
            bail!("question bank {} does not exist", self.bank.display());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bail!("test_fraction {} must lie in (0, 1)", self.test_fraction);
        }
        if !(self.k >= 1.0) {
            bail!("k = {} must be >= 1", self.k);
        }
        if !(self.p_th > 0.0 && self.p_th < 1.0) {
            bail!("p_th = {} must lie in (0, 1)", self.p_th);
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        self.train_config(self.seed).validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.kinds.is_empty() || sweep.sizes.is_empty() || sweep.seeds.is_empty() {
                bail!("sweep needs at least one kind, size and seed");
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        self.schedule
            .unwrap_or_else(|| ScheduleConfig::default_for(self.training.steps))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.training.learning_rate,
            labeled_batch: self.training.labeled_batch,
            unlabeled_batch: self.training.unlabeled_batch,
            max_grad_norm: self.training.max_grad_norm,
            schedule: if self.semi_supervised {
                self.schedule()
            } else {
                ScheduleConfig::constant(0.0)
            },
            ..TrainConfig::new(self.training.steps, seed)
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            steps: self.training.steps,
            learning_rate: self.training.learning_rate,
            labeled_batch: self.training.labeled_batch,
            unlabeled_batch: self.training.unlabeled_batch,
            max_grad_norm: self.training.max_grad_norm,
            schedule: self.schedule,
            k: self.k,
            p_th: self.p_th,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let mut m = ExperimentManifest::new("c.jsonl".into(), "b.json".into(), "out".into());
        m.schedule = Some(ScheduleConfig::constant(0.0));
        m.sweep = Some(SweepSection {
            kinds: vec![ModelKind::Samie, ModelKind::Transformer],
            sizes: vec![64, 512],
            seeds: vec![1, 2, 3],
        });
        let text = m.to_toml();
        let back: ExperimentManifest = toml::from_str(&text).unwrap();
        assert_eq!(back, m);
        let bad = format!("{text}\nmystery = 3\n");
        assert!(toml::from_str::<ExperimentManifest>(&bad).is_err());
    }

    #[test]
    fn minimal_manifest_fills_defaults() {
        let m: ExperimentManifest = toml::from_str("corpus = \"c\"\nbank = \"b\"\noutput_dir = \"o\"\n").unwrap();
        assert_eq!(m.labeled_size, 512);
        assert_eq!(m.preset, Preset::Regular);
        assert_eq!(m.training.learning_rate, 1e-3);
        assert_eq!(m.schedule().lambda_start, 0.1);
    }
}
