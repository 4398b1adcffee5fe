use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn samie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samie"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        stderr(&o)
    );
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Prepared synthetic data under `<tmp>/data`.
fn prepared(sentences: usize) -> (TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(samie(&[
        "prepare",
        "--synthetic",
        &sentences.to_string(),
        "--out",
        p(&data),
    ]));
    (tmp, data)
}

/// Flags for a run small enough for a unit-test budget.
fn quick<'a>(data: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "--corpus",
        p(&data.join("corpus.jsonl")),
        "--bank",
        p(&data.join("bank.json")),
        "--out",
        p(out),
        "--preset",
        "small",
        "--labeled-batch",
        "4",
        "--unlabeled-batch",
        "4",
        "--labeled-size",
        "10",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if !extra.contains(&"--steps") {
        v.extend(["--steps".to_string(), "12".to_string()]);
    }
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run(cmd: &str, args: &[String]) -> Output {
    let mut all = vec![cmd];
    all.extend(args.iter().map(String::as_str));
    samie(&all)
}

#[test]
fn prepare_reports_fig2_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let bio = tmp.path().join("fig2.bio");
    fs::write(
        &bio,
        "The O\nplane O\nfrom O\nShanghai B-fromloc.city_name\nwill O\narrive O\nin O\nBeijing B-toloc.city_name\n\
         on O\nNovember B-arrive_time.date\n2nd I-arrive_time.date\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = ok(samie(&["prepare", "--input", p(&bio), "--out", p(&out)]));
    assert!(
        stdout(&o).contains("1 sentences (0 dropped): 3 triplets, 3 pairs"),
        "{}",
        stdout(&o)
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let triplets = summary["train"]["triplets"].as_u64().unwrap() + summary["test"]["triplets"].as_u64().unwrap();
    assert_eq!(triplets, 3);
    let corpus = fs::read_to_string(out.join("corpus.jsonl")).unwrap();
    assert!(corpus.contains("\"arrive_time\""));
}

#[test]
fn prepare_is_deterministic_and_validates_input() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(samie(&[
        "prepare",
        "--synthetic",
        "80",
        "--out",
        p(&a),
        "--split-seed",
        "3",
    ]));
    ok(samie(&[
        "prepare",
        "--synthetic",
        "80",
        "--out",
        p(&b),
        "--split-seed",
        "3",
    ]));
    for f in [
        "split.json",
        "train.jsonl",
        "test.jsonl",
        "corpus.jsonl",
        "summary.json",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let bad = tmp.path().join("bad.bio");
    fs::write(&bad, "fly O\nto O B-toloc\n").unwrap();
    let o = samie(&["prepare", "--input", p(&bad), "--out", p(&tmp.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.bio:2"), "{}", stderr(&o));
}

#[test]
fn train_writes_checkpoint_log_and_manifest() {
    let (tmp, data) = prepared(60);
    let out = tmp.path().join("run");
    ok(run("train", &quick(&data, &out, &[])));
    let ckpt = fs::read_to_string(out.join("model.ckpt")).unwrap();
    assert!(ckpt.starts_with("samie-ckpt-v1\n"));
    let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "loss_s_Q", "loss_s_A", "loss_u", "lambda", "total"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    // the stored manifest alone reproduces the run
    let manifest = out.join("manifest.toml");
    let again = tmp.path().join("again");
    ok(samie(&["train", "--manifest", p(&manifest), "--out", p(&again)]));
    assert_eq!(
        fs::read(out.join("model.ckpt")).unwrap(),
        fs::read(again.join("model.ckpt")).unwrap()
    );
    assert_eq!(log, fs::read_to_string(again.join("metrics.jsonl")).unwrap());
}

#[test]
fn lambda_end_zero_reproduces_supervised_baseline() {
    let (tmp, data) = prepared(60);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(run("train", &quick(&data, &a, &["--lambda-end", "0"])));
    ok(run("train", &quick(&data, &b, &["--supervised"])));
    assert_eq!(
        fs::read(a.join("model.ckpt")).unwrap(),
        fs::read(b.join("model.ckpt")).unwrap()
    );
    let totals = |dir: &Path| -> Vec<(f64, f64, f64)> {
        fs::read_to_string(dir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (
                    v["loss_s_Q"].as_f64().unwrap(),
                    v["loss_s_A"].as_f64().unwrap(),
                    v["total"].as_f64().unwrap(),
                )
            })
            .collect()
    };
    assert_eq!(totals(&a), totals(&b));
}

#[test]
fn divergence_exits_nonzero_and_names_the_step() {
    let (tmp, data) = prepared(60);
    let out = tmp.path().join("nan");
    let o = run(
        "train",
        &quick(&data, &out, &["--learning-rate", "1e3", "--steps", "60"]),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged at step"), "{}", stderr(&o));
}

#[test]
fn invalid_configuration_exits_with_one() {
    let o = samie(&["train", "--preset", "huge"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(samie(&["--help"]).status.success());
    let (tmp, data) = prepared(40);
    let out = tmp.path().join("x");
    let o = run("train", &quick(&data, &out, &["--p-th", "1.5"]));
    assert_eq!(o.status.code(), Some(1));
    let o = run(
        "train",
        &quick(&data, &out, &["--lambda-start", "0.9", "--lambda-end", "0.2"]),
    );
    assert_eq!(o.status.code(), Some(1));

    let manifest = tmp.path().join("m.toml");
    fs::write(
        &manifest,
        "corpus = \"data/corpus.jsonl\"\nbank = \"data/bank.json\"\noutput_dir = \"o\"\nsurprise = 1\n",
    )
    .unwrap();
    let o = samie(&["train", "--manifest", p(&manifest)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("surprise"), "{}", stderr(&o));
}

#[test]
fn eval_is_deterministic() {
    let (tmp, data) = prepared(60);
    let run_dir = tmp.path().join("run");
    ok(run("train", &quick(&data, &run_dir, &[])));
    let ckpt = run_dir.join("model.ckpt");
    let eval = |out: &Path| {
        samie(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--test",
            p(&data.join("test.jsonl")),
            "--bank",
            p(&data.join("bank.json")),
            "--out",
            p(out),
        ])
    };
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    let o = ok(eval(&e1));
    assert!(stdout(&o).contains("qs accuracy"));
    ok(eval(&e2));
    for f in ["report.json", "report.txt", "confusion.svg"] {
        let bytes = fs::read(e1.join(f)).unwrap();
        assert!(!bytes.is_empty());
        assert_eq!(bytes, fs::read(e2.join(f)).unwrap(), "{f}");
    }

    // report re-renders the same files from report.json
    let before = fs::read(e1.join("report.txt")).unwrap();
    fs::remove_file(e1.join("confusion.svg")).unwrap();
    ok(samie(&["report", "--from", p(&e1)]));
    assert!(e1.join("confusion.svg").is_file());
    assert_eq!(fs::read(e1.join("report.txt")).unwrap(), before);
}

#[test]
fn cluster_emits_square_matrices_with_gold_row_sums() {
    let (tmp, data) = prepared(60);
    let out = tmp.path().join("clusters");
    let args = quick(&data, &out, &[]);
    ok(run("cluster", &args));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("clusters.json")).unwrap()).unwrap();
    let c = v["categories"].as_array().unwrap().len();
    let raw = v["raw"].as_array().unwrap();
    assert_eq!(raw.len(), c);

    let test = fs::read_to_string(data.join("test.jsonl")).unwrap();
    let bank: Vec<String> = v["categories"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_str().unwrap().to_string())
        .collect();
    let mut gold = vec![0u64; c];
    for line in test.lines() {
        let s: serde_json::Value = serde_json::from_str(line).unwrap();
        for slot in s["slots"].as_array().unwrap() {
            gold[bank
                .iter()
                .position(|b| b == slot["category"].as_str().unwrap())
                .unwrap()] += 1;
        }
    }
    for (row, &g) in raw.iter().zip(&gold) {
        let row = row.as_array().unwrap();
        assert_eq!(row.len(), c);
        assert_eq!(row.iter().map(|x| x.as_u64().unwrap()).sum::<u64>(), g);
    }
    assert!(v["aligned_accuracy"].as_f64().unwrap() >= v["raw_accuracy"].as_f64().unwrap());
    assert!(out.join("confusion_raw.svg").is_file() && out.join("confusion_aligned.svg").is_file());
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("labeled_size = 0"));
}

#[test]
fn sweep_runs_grid_and_resumes() {
    let (tmp, data) = prepared(60);
    let out = tmp.path().join("sweep");
    let manifest = tmp.path().join("sweep.toml");
    fs::write(
        &manifest,
        format!(
            "corpus = \"{}\"\nbank = \"{}\"\noutput_dir = \"{}\"\npreset = \"small\"\n\n\
             [training]\nsteps = 8\nlearning_rate = 0.001\nlabeled_batch = 4\nunlabeled_batch = 4\n\n\
             [sweep]\nkinds = [\"samie\", \"transformer\"]\nsizes = [8, 16]\nseeds = [1]\n",
            p(&data.join("corpus.jsonl")),
            p(&data.join("bank.json")),
            p(&out)
        ),
    )
    .unwrap();
    let o = ok(samie(&["sweep", "--manifest", p(&manifest)]));
    assert!(
        stdout(&o).contains("ran 4 cells; 4 of 4 cells finished"),
        "{}",
        stdout(&o)
    );
    let cells: Vec<_> = fs::read_dir(out.join("cells"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
        .collect();
    assert_eq!(cells.len(), 4);
    for metric in ["qs_accuracy", "ae_precision", "ae_recall", "ae_f1"] {
        assert!(fs::read_to_string(out.join(format!("{metric}.svg")))
            .unwrap()
            .contains("<polyline"));
    }
    let ckpt = fs::read_to_string(out.join("cells/transformer-small-n8-s1.ckpt")).unwrap();
    assert!(ckpt.starts_with("samie-ckpt-v1"));

    let table = fs::read(out.join("table.txt")).unwrap();
    let o = ok(samie(&["sweep", "--manifest", p(&manifest)]));
    assert!(stdout(&o).contains("ran 0 cells"), "{}", stdout(&o));

    fs::remove_file(out.join("cells/samie-small-n16-s1.json")).unwrap();
    let o = ok(samie(&["sweep", "--manifest", p(&manifest)]));
    assert!(stdout(&o).contains("ran 1 cells; 4 of 4"), "{}", stdout(&o));
    assert_eq!(fs::read(out.join("table.txt")).unwrap(), table);

    fs::remove_file(out.join("ae_f1.svg")).unwrap();
    ok(samie(&["report", "--from", p(&out)]));
    assert!(out.join("ae_f1.svg").is_file());
}

#[test]
fn sweep_without_grid_is_rejected() {
    let (tmp, data) = prepared(40);
    let o = run("sweep", &quick(&data, &tmp.path().join("s"), &[]));
    assert_eq!(o.status.code(), Some(1));
}
