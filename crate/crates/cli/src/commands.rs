use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;
use serde::{Deserialize, Serialize};

use samie::backbone::ModelConfig;
use samie::baselines::{self, curves, sweep_cells, ExperimentData, Metric, SweepCell};
use samie::checkpoint;
use samie::corpus::{
    filter_corpus, load_question_bank, load_slot_corpus, parse_bio, split_dataset, write_slot_corpus,
    AnnotatedSentence, QuestionBank,
};
use samie::evaluation::{clustering_alignment, evaluate_checkpoint, ExperimentReport};
use samie::model::Model;
use samie::report::{confusion_svg, curves_svg, render_clusters, render_matrix, render_text};
use samie::synth::{generate, SynthConfig};
use samie::training::{self, LossBreakdown, ScheduleConfig};

use crate::manifest::{ExperimentManifest, SweepSection, MANIFEST_FILE};
use crate::{EvalArgs, Failure, InputFormat, PrepareArgs, ReportArgs, RunArgs};

type CmdResult = Result<(), Failure>;

fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure::Validation(anyhow!("{msg}"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize)]
struct SplitManifest<'a> {
    split_seed: u64,
    test_fraction: f64,
    train: Vec<&'a str>,
    test: Vec<&'a str>,
}

#[derive(Serialize)]
struct PartCounts {
    sentences: usize,
    triplets: usize,
    pairs: usize,
}

impl PartCounts {
    fn of(sentences: &[AnnotatedSentence]) -> Self {
        // one triplet and one pair per gold slot
        let slots = sentences.iter().map(|s| s.slots.len()).sum();
        Self {
            sentences: sentences.len(),
            triplets: slots,
            pairs: slots,
        }
    }
}

#[derive(Serialize)]
struct PrepareSummary {
    source: String,
    sentences: usize,
    dropped: usize,
    train: PartCounts,
    test: PartCounts,
    slots_per_category: BTreeMap<String, usize>,
}

pub fn prepare(args: &PrepareArgs) -> CmdResult {
    let bank = match &args.bank {
        Some(p) => load_question_bank(p).with_context(|| format!("loading bank {}", p.display()))?,
        None => QuestionBank::atis_default(),
    };
    let aliases = args
        .aliases
        .iter()
        .map(|a| {
            a.split_once('=')
                .map(|(f, t)| (f.to_string(), t.to_string()))
                .ok_or_else(|| invalid(format!("alias `{a}` is not of the form from=to")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let (source, corpus) = match (&args.input, args.synthetic) {
        (Some(path), None) => {
            let format = args
                .format
                .unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
                    Some("jsonl") | Some("json") => InputFormat::Jsonl,
                    _ => InputFormat::Bio,
                });
            let corpus = match format {
                InputFormat::Jsonl => load_slot_corpus(path)?,
                InputFormat::Bio => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))
                        .map_err(Failure::Validation)?;
                    parse_bio(&text, &path.display().to_string(), &aliases)?
                }
            };
            (path.display().to_string(), corpus)
        }
        (None, Some(n)) => {
            let cfg = SynthConfig {
                sentences: n,
                seed: args.synthetic_seed,
                ..SynthConfig::default()
            };
            (format!("synthetic:{n}:{}", args.synthetic_seed), generate(&cfg))
        }
        _ => return Err(invalid("give exactly one of --input or --synthetic")),
    };
    let (corpus, dropped) = filter_corpus(corpus, &bank);
    if corpus.is_empty() {
        return Err(invalid("no usable sentences after filtering against the question bank"));
    }
    let (train, test) = split_dataset(&corpus, args.test_fraction, args.split_seed)?;

    create_dir(&args.out)?;
    write_slot_corpus(args.out.join("corpus.jsonl"), &corpus)?;
    write_slot_corpus(args.out.join("train.jsonl"), &train)?;
    write_slot_corpus(args.out.join("test.jsonl"), &test)?;
    write_file(&args.out.join("bank.json"), bank.to_json() + "\n")?;
    let split = SplitManifest {
        split_seed: args.split_seed,
        test_fraction: args.test_fraction,
        train: train.iter().map(|s| s.id.as_str()).collect(),
        test: test.iter().map(|s| s.id.as_str()).collect(),
    };
    write_file(
        &args.out.join("split.json"),
        serde_json::to_string_pretty(&split).map_err(anyhow::Error::from)? + "\n",
    )?;

    let mut per_category = BTreeMap::new();
    for c in corpus.iter().flat_map(|s| s.categories()) {
        *per_category.entry(c.to_string()).or_insert(0) += 1;
    }
    let summary = PrepareSummary {
        source,
        sentences: corpus.len(),
        dropped,
        train: PartCounts::of(&train),
        test: PartCounts::of(&test),
        slots_per_category: per_category,
    };
    write_file(
        &args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)? + "\n",
    )?;
    let all = PartCounts::of(&corpus);
    println!(
        "{} sentences ({} dropped): {} triplets, {} pairs; train {} / test {} sentences",
        summary.sentences, dropped, all.triplets, all.pairs, summary.train.sentences, summary.test.sentences
    );
    Ok(())
}

/// Manifest from `--manifest` (if any) with flag overrides applied.
fn resolve_manifest(args: &RunArgs) -> Result<ExperimentManifest, Failure> {
    let mut m = match &args.manifest {
        Some(path) => ExperimentManifest::load(path)?,
        None => {
            let need = |v: &Option<PathBuf>, flag: &str| {
                v.clone()
                    .ok_or_else(|| invalid(format!("--{flag} is required without --manifest")))
            };
            ExperimentManifest::new(
                need(&args.corpus, "corpus")?,
                need(&args.bank, "bank")?,
                need(&args.out, "out")?,
            )
        }
    };
    if let Some(v) = &args.corpus {
        m.corpus = v.clone();
    }
    if let Some(v) = &args.bank {
        m.bank = v.clone();
    }
    if let Some(v) = &args.out {
        m.output_dir = v.clone();
    }
    macro_rules! set {
        ($($field:ident => $target:expr),* $(,)?) => {
            $(if let Some(v) = args.$field { $target = v; })*
        };
    }
    set!(
        seed => m.seed,
        split_seed => m.split_seed,
        test_fraction => m.test_fraction,
        labeled_size => m.labeled_size,
        preset => m.preset,
        architecture => m.architecture,
        k => m.k,
        p_th => m.p_th,
        steps => m.training.steps,
        learning_rate => m.training.learning_rate,
        labeled_batch => m.training.labeled_batch,
        unlabeled_batch => m.training.unlabeled_batch,
        max_grad_norm => m.training.max_grad_norm,
    );
    if args.supervised {
        m.semi_supervised = false;
    }
    if args.lambda_start.is_some() || args.lambda_end.is_some() || args.ramp_steps.is_some() {
        let mut s = m.schedule();
        if let Some(end) = args.lambda_end {
            s.lambda_end = end;
            // a lone end value below the default start pins the schedule
            if args.lambda_start.is_none() {
                s.lambda_start = s.lambda_start.min(end);
            }
        }
        if let Some(start) = args.lambda_start {
            s.lambda_start = start;
        }
        if let Some(r) = args.ramp_steps {
            s.ramp_steps = r;
        }
        m.schedule = Some(s);
    }
    m.validate().map_err(Failure::Validation)?;
    Ok(m)
}

fn load_data(m: &ExperimentManifest) -> Result<ExperimentData, Failure> {
    let bank = load_question_bank(&m.bank)?;
    let corpus = load_slot_corpus(&m.corpus)?;
    let (corpus, _) = filter_corpus(corpus, &bank);
    Ok(ExperimentData::new(&corpus, bank, m.test_fraction, m.split_seed)?)
}

fn model_config(m: &ExperimentManifest, data: &ExperimentData) -> ModelConfig {
    let mut cfg = ModelConfig::from_preset(m.preset, data.vocab.len());
    cfg.k = m.k;
    cfg.p_th = m.p_th;
    cfg
}

/// Appends one JSON line per step to `metrics.jsonl`.
struct MetricLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricLog {
    fn create(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join("metrics.jsonl");
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    fn record(&mut self, b: &LossBreakdown) -> samie::Result<()> {
        let line = serde_json::to_string(b)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| samie::Error::Io {
                path: self.path.clone(),
                source: e,
            })
    }
}

fn train_model(
    m: &ExperimentManifest,
    data: &ExperimentData,
    labeled_size: usize,
    semi: bool,
) -> Result<(Model, Vec<LossBreakdown>), Failure> {
    let (labeled, unlabeled) = data.sample(labeled_size, m.seed)?;
    let mut cfg = m.train_config(m.seed);
    if !semi {
        cfg.schedule = ScheduleConfig::constant(0.0);
    }
    let unlabeled = if semi { unlabeled } else { Vec::new() };
    let mut model = Model::new(model_config(m, data), m.architecture, data.vocab.clone(), m.seed)?;
    let mut log = MetricLog::create(&m.output_dir)?;
    let history = training::train(&mut model, &cfg, &labeled, &unlabeled, &data.bank, |b| log.record(b))?;
    Ok((model, history))
}

pub fn train(args: &RunArgs) -> CmdResult {
    let m = resolve_manifest(args)?;
    m.store()?;
    let data = load_data(&m)?;
    let (model, history) = train_model(&m, &data, m.labeled_size, m.semi_supervised)?;
    let ckpt = m.output_dir.join("model.ckpt");
    checkpoint::save(&model, &ckpt)?;
    if let Some(last) = history.last() {
        println!(
            "trained {} steps: total {:.4} (qs {:.4}, ae {:.4}, unsupervised {:.4}); checkpoint {}",
            history.len(),
            last.total,
            last.loss_s_q,
            last.loss_s_a,
            last.loss_u,
            ckpt.display()
        );
    }
    Ok(())
}

fn category_names(bank: &QuestionBank) -> Vec<String> {
    bank.categories().map(|c| c.to_string()).collect()
}

fn write_report(dir: &Path, report: &ExperimentReport, title: &str) -> anyhow::Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    write_file(&dir.join("report.txt"), render_text(report))?;
    let names: Vec<String> = report.categories.iter().map(|c| c.to_string()).collect();
    write_file(
        &dir.join("confusion.svg"),
        confusion_svg(&report.confusion, &names, title),
    )
}

#[derive(Serialize)]
struct EvalInputs<'a> {
    checkpoint: &'a Path,
    test: &'a Path,
    bank: &'a Path,
    p_th: f64,
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let model = checkpoint::load(&args.checkpoint)?;
    let bank = load_question_bank(&args.bank)?;
    let test = load_slot_corpus(&args.test)?;
    let (test, dropped) = filter_corpus(test, &bank);
    if dropped > 0 {
        info!("ignoring {dropped} test sentences the bank cannot cover");
    }
    let p_th = args.p_th.unwrap_or(model.config.p_th);
    if !(p_th > 0.0 && p_th < 1.0) {
        return Err(invalid(format!("p_th {p_th} must lie in (0, 1)")));
    }
    let report = evaluate_checkpoint(&model, &test, &bank, p_th)?;
    write_report(&args.out, &report, "Question selection confusion")?;
    let inputs = EvalInputs {
        checkpoint: &args.checkpoint,
        test: &args.test,
        bank: &args.bank,
        p_th,
    };
    write_file(
        &args.out.join("eval.toml"),
        toml::to_string_pretty(&inputs).map_err(anyhow::Error::from)?,
    )?;
    print!("{}", render_text(&report));
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ClusterSummary {
    categories: Vec<String>,
    raw_accuracy: f64,
    aligned_accuracy: f64,
    /// `cluster_of_category[g]` is the predicted column matched to gold
    /// category `g`.
    cluster_of_category: Vec<usize>,
    /// Share of each gold category's mass in its two largest clusters.
    top2_share: Vec<f64>,
    raw: Vec<Vec<usize>>,
    aligned: Vec<Vec<usize>>,
}

pub fn cluster(args: &RunArgs) -> CmdResult {
    let mut m = resolve_manifest(args)?;
    m.labeled_size = 0;
    m.semi_supervised = true;
    m.schedule = Some(ScheduleConfig::constant(1.0));
    m.store()?;
    let data = load_data(&m)?;
    let (model, _) = train_model(&m, &data, 0, true)?;
    checkpoint::save(&model, m.output_dir.join("model.ckpt"))?;
    let report = evaluate_checkpoint(&model, &data.test, &data.bank, m.p_th)?;
    let names = category_names(&data.bank);
    let alignment = clustering_alignment(&report.confusion)?;
    let aligned = report.confusion.permuted(&alignment.permutation);
    let summary = ClusterSummary {
        categories: names.clone(),
        raw_accuracy: report.confusion.accuracy(),
        aligned_accuracy: alignment.accuracy,
        cluster_of_category: alignment.permutation.clone(),
        top2_share: (0..names.len()).map(|g| report.confusion.top_share(g, 2)).collect(),
        raw: report.confusion.counts.clone(),
        aligned: aligned.counts.clone(),
    };
    let dir = &m.output_dir;
    write_file(
        &dir.join("clusters.json"),
        serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)? + "\n",
    )?;
    let text = render_clusters(&report.confusion, &names)?;
    write_file(&dir.join("clusters.txt"), &text)?;
    write_file(
        &dir.join("confusion_raw.svg"),
        confusion_svg(&report.confusion, &names, "Clusters (raw)"),
    )?;
    write_file(
        &dir.join("confusion_aligned.svg"),
        confusion_svg(&aligned, &names, "Clusters (aligned to categories)"),
    )?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CellRecord {
    cell: SweepCell,
    report: ExperimentReport,
    final_loss: Option<LossBreakdown>,
}

fn cell_path(dir: &Path, cell: &SweepCell) -> PathBuf {
    dir.join("cells").join(format!("{cell}.json"))
}

pub fn sweep(args: &RunArgs) -> CmdResult {
    let m = resolve_manifest(args)?;
    let SweepSection { kinds, sizes, seeds } = m
        .sweep
        .clone()
        .ok_or_else(|| invalid("the manifest has no [sweep] section"))?;
    m.store()?;
    let data = load_data(&m)?;
    let cells = sweep_cells(&kinds, m.preset, &sizes, &seeds);
    let dir = m.output_dir.clone();
    create_dir(&dir.join("cells"))?;
    let settings = m.run_settings();
    let result = baselines::sweep(
        &data,
        &cells,
        &settings,
        |cell| cell_path(&dir, cell).is_file(),
        |cell, outcome| {
            checkpoint::save(&outcome.model, dir.join("cells").join(format!("{cell}.ckpt")))?;
            let record = CellRecord {
                cell: *cell,
                report: outcome.report.clone(),
                final_loss: outcome.history.last().cloned(),
            };
            // written last so an interrupted cell is redone on resume
            let path = cell_path(&dir, cell);
            fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
                .map_err(|e| samie::Error::Io { path, source: e })?;
            println!(
                "{cell}: qs accuracy {:.4}, ae f1 {:.4}",
                outcome.report.qs_accuracy, outcome.report.ae.f1
            );
            Ok(())
        },
    );
    // finished cells are rendered even when a later cell failed
    let rendered = render_sweep(&dir);
    let ran = result?;
    let n = rendered?;
    println!("ran {ran} cells; {n} of {} cells finished", cells.len());
    Ok(())
}

fn load_cells(dir: &Path) -> anyhow::Result<Vec<CellRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.join("cells"))
        .with_context(|| format!("listing {}", dir.join("cells").display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

/// Writes curve files and the results table for every finished cell.
fn render_sweep(dir: &Path) -> anyhow::Result<usize> {
    let mut records = load_cells(dir)?;
    records.sort_by_key(|r| r.cell);
    let results: Vec<(SweepCell, ExperimentReport)> = records.iter().map(|r| (r.cell, r.report.clone())).collect();
    let mut all_curves = Vec::new();
    for metric in Metric::ALL {
        let c = curves(&results, metric);
        write_file(
            &dir.join(format!("{}.svg", metric.name())),
            curves_svg(&c, metric.title()),
        )?;
        all_curves.extend(c);
    }
    write_file(
        &dir.join("curves.json"),
        serde_json::to_string_pretty(&all_curves)? + "\n",
    )?;

    let mut table = format!(
        "{:<34} {:>8} {:>8} {:>8} {:>8}\n",
        "cell", "qs_acc", "ae_p", "ae_r", "ae_f1"
    );
    for (cell, r) in &results {
        table.push_str(&format!(
            "{:<34} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            cell.to_string(),
            r.qs_accuracy,
            r.ae.precision,
            r.ae.recall,
            r.ae.f1
        ));
    }
    table.push_str("\nmedian over seeds\n");
    for c in all_curves.iter().filter(|c| c.metric == Metric::QsAccuracy) {
        for &(n, v) in &c.points {
            table.push_str(&format!("{:<12} {:<8} n={:<6} qs_acc {:.4}\n", c.kind, c.preset, n, v));
        }
    }
    write_file(&dir.join("table.txt"), table)?;
    Ok(results.len())
}

pub fn report(args: &ReportArgs) -> CmdResult {
    let dir = &args.from;
    if dir.join("cells").is_dir() {
        let n = render_sweep(dir)?;
        println!("rendered {n} sweep cells from {}", dir.display());
        return Ok(());
    }
    let path = dir.join("report.json");
    if path.is_file() {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let report: ExperimentReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .map_err(Failure::Validation)?;
        write_report(dir, &report, "Question selection confusion")?;
        let names: Vec<String> = report.categories.iter().map(|c| c.to_string()).collect();
        print!("{}", render_matrix(&report.confusion, &names));
        return Ok(());
    }
    Err(invalid(format!(
        "{} holds neither sweep cells nor report.json (see {MANIFEST_FILE} for how it was produced)",
        dir.display()
    )))
}
