use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use coldselect::selection::SessionExport;
use coldselect::synthetic::{generate, CorpusFiles, MixtureSpec};
use coldselect::verbalizer_eval::EvalReport;
use coldselect_cli::commands::{open_annotator, Manifest, ServeArgs};
use coldselect_cli::config::ConfigArgs;
use tempfile::TempDir;

fn two_class() -> MixtureSpec {
    MixtureSpec {
        n_classes: 2,
        instances_per_class: 6,
        test_instances_per_class: 4,
        tokens_per_class: 3,
        token_spread: 0.5,
        outlier_tokens: 2,
        dim: 8,
        class_separation: 4.0,
        seed: 7,
    }
}

fn three_class() -> MixtureSpec {
    MixtureSpec {
        n_classes: 3,
        instances_per_class: 20,
        test_instances_per_class: 10,
        tokens_per_class: 4,
        token_spread: 0.5,
        outlier_tokens: 3,
        dim: 8,
        class_separation: 6.0,
        seed: 3,
    }
}

struct Fixture {
    dir: TempDir,
    files: CorpusFiles,
}

impl Fixture {
    fn new(spec: &MixtureSpec) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let files = generate(spec).unwrap().write_files(dir.path().join("data")).unwrap();
        Self { dir, files }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    /// Corpus and output flags, then `extra`.
    fn args(&self, command: &str, extra: &[&str]) -> Vec<String> {
        let mut v = vec![
            command.to_string(),
            "--vocab".into(),
            self.files.vocab.display().to_string(),
            "--instances".into(),
            self.files.instances.display().to_string(),
            "--gold".into(),
            self.files.gold.display().to_string(),
            "--output-dir".into(),
            self.out().display().to_string(),
        ];
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    }

    fn run(&self, command: &str, extra: &[&str]) -> Output {
        run(&self.args(command, extra))
    }

    fn prepare(&self, extra: &[&str]) {
        let out = self.run("prepare", extra);
        assert_ok(&out);
    }
}

fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coldselect")).args(args).output().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_export(path: &Path) -> SessionExport {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: [&str; 4] = ["--reduced-dim", "8", "--k", "8"];

#[test]
fn prepare_writes_a_manifest_of_three_hashed_artifacts() {
    let f = Fixture::new(&two_class());
    f.prepare(&SMALL);
    let manifest_path = f.out().join("manifest.json");
    let first = std::fs::read(&manifest_path).unwrap();
    let manifest: Manifest = serde_json::from_slice(&first).unwrap();
    assert_eq!(manifest.artifacts.len(), 3);
    for a in &manifest.artifacts {
        assert_eq!(a.sha256.len(), 64);
        assert!(a.sha256.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(std::fs::metadata(f.out().join(&a.name)).unwrap().len(), a.bytes);
    }
    assert_eq!(manifest.summary.instances, 12);
    assert_eq!(manifest.summary.tokens, 8);

    f.prepare(&SMALL);
    assert_eq!(std::fs::read(&manifest_path).unwrap(), first);
}

#[test]
fn corrupt_embedding_file_is_a_data_error() {
    let f = Fixture::new(&two_class());
    let mut bytes = std::fs::read(&f.files.vocab).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    std::fs::write(&f.files.vocab, bytes).unwrap();
    let out = f.run("prepare", &SMALL);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("MagicMismatch"), "{err}");
    assert!(err.contains("vocab.cseb"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    let f = Fixture::new(&two_class());
    assert_eq!(run(&["prepare", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["prepare"]).status.code(), Some(1), "missing vocab");
    f.prepare(&SMALL);
    assert_eq!(f.run("select", &["--strategy", "greedy", "--budget", "2"]).status.code(), Some(1));
    assert_eq!(f.run("select", &[]).status.code(), Some(1), "missing budget");
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn select_spends_the_budget_exactly() {
    let f = Fixture::new(&two_class());
    f.prepare(&SMALL);
    assert_ok(&f.run("select", &["--budget", "8"]));
    let export = read_export(&f.out().join("session_export.json"));
    assert_eq!(export.events.len(), 8);
    assert_eq!(export.labels.len(), 8);
    assert_eq!(export.config.budget, 8);
}

#[test]
fn random_g_is_reproducible() {
    let f = Fixture::new(&two_class());
    f.prepare(&SMALL);
    let a = f.dir.path().join("a.json");
    let b = f.dir.path().join("b.json");
    for path in [&a, &b] {
        assert_ok(&f.run("select", &["--budget", "6", "--strategy", "random-g", "--out", path.to_str().unwrap()]));
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn strategy_matrix_writes_nine_result_rows() {
    let f = Fixture::new(&three_class());
    f.prepare(&["--reduced-dim", "8", "--k", "10"]);
    let out = f.run(
        "select",
        &[
            "--strategies",
            "coldselect,random,random-g",
            "--budgets",
            "8,16,32",
            "--test-instances",
            f.files.test_instances.to_str().unwrap(),
            "--test-gold",
            f.files.test_gold.to_str().unwrap(),
            "--manual-verbalizers",
            f.files.manual_verbalizers.to_str().unwrap(),
        ],
    );
    assert_ok(&out);
    let mut reader = csv::Reader::from_path(f.out().join("results.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["strategy", "budget", "seed", "accuracy", "n_labeled", "n_verbalizers", "wall_ms"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        let acc: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(&r[1], &r[4], "n_labeled equals budget");
    }
    assert!(f.out().join("exports/random-g-b16.json").exists());
}

#[test]
fn missing_oracle_label_names_the_instance() {
    let f = Fixture::new(&two_class());
    f.prepare(&SMALL);
    let text = std::fs::read_to_string(&f.files.gold).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.contains("\"inst3\"")).collect();
    let partial = f.dir.path().join("partial.jsonl");
    std::fs::write(&partial, kept.join("\n") + "\n").unwrap();
    let out = f.run("select", &["--budget", "4", "--oracle", partial.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("MissingOracleLabel") && err.contains("inst3"), "{err}");
}

fn eval_report(f: &Fixture, source: &[&str]) -> EvalReport {
    let mut extra = vec![
        "--test-instances",
        f.files.test_instances.to_str().unwrap(),
        "--test-gold",
        f.files.test_gold.to_str().unwrap(),
    ];
    extra.extend_from_slice(source);
    let out = f.run("eval", &extra);
    assert_ok(&out);
    assert!(f.out().join("eval_report.txt").exists());
    serde_json::from_str(&std::fs::read_to_string(f.out().join("eval_report.json")).unwrap()).unwrap()
}

fn assert_consistent(report: &EvalReport) {
    let correct: usize = (0..report.confusion.len()).map(|c| report.confusion[c][c]).sum();
    let expected = correct as f64 / report.n_evaluated.max(1) as f64;
    assert!((report.accuracy - expected).abs() < 1e-12);
}

#[test]
fn planted_verbalizers_score_well_on_a_separated_corpus() {
    let f = Fixture::new(&MixtureSpec::default());
    f.prepare(&["--reduced-dim", "16"]);
    let report = eval_report(&f, &["--manual-verbalizers", f.files.manual_verbalizers.to_str().unwrap()]);
    assert!(report.accuracy >= 0.9, "{}", report.accuracy);
    assert_eq!(report.n_skipped, 0);
    assert_consistent(&report);
}

#[test]
fn uncovered_classes_are_skipped() {
    let f = Fixture::new(&three_class());
    f.prepare(&["--reduced-dim", "8", "--k", "10"]);
    assert_ok(&f.run("select", &["--budget", "1"]));
    let export = f.out().join("session_export.json");
    let report = eval_report(&f, &["--export", export.to_str().unwrap()]);
    assert!(report.n_skipped > 0);
    assert!(!report.uncovered_classes.is_empty());
    assert_consistent(&report);
}

#[test]
fn simulate_writes_rows_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let csv_a = dir.path().join("a.csv");
    let csv_b = dir.path().join("b.csv");
    let common = [
        "simulate",
        "--n-classes",
        "3",
        "--instances-per-class",
        "15",
        "--test-instances-per-class",
        "5",
        "--tokens-per-class",
        "3",
        "--dim",
        "8",
        "--k",
        "10",
        "--zero-wall-ms",
    ];
    for path in [&csv_a, &csv_b] {
        let mut args: Vec<&str> = common.to_vec();
        args.extend(["--out", path.to_str().unwrap()]);
        assert_ok(&run(&args));
    }
    let bytes = std::fs::read(&csv_a).unwrap();
    assert_eq!(bytes, std::fs::read(&csv_b).unwrap());
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 180 + 9);
    assert!(rows[..180].iter().all(|r| r[2].parse::<u64>().is_ok()));
    assert!(rows[180..].iter().all(|r| &r[2] == "mean"));
    assert_eq!(&rows[0][0], "coldselect");
    assert_eq!(&rows[0][2], "42");
}

#[test]
fn infeasible_simulation_spec_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--n-classes",
        "9",
        "--dim",
        "4",
        "--seeds",
        "1",
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("infeasible"));
}

#[test]
fn config_file_is_read_and_flags_win() {
    let f = Fixture::new(&two_class());
    let config = f.dir.path().join("pipeline.toml");
    std::fs::write(
        &config,
        "vocab = \"data/vocab.cseb\"\ninstances = \"data/instances.cseb\"\ngold = \"data/gold.jsonl\"\n\
         output_dir = \"out\"\nreduced_dim = 8\nk = 8\nbudget = 3\nstrategy = \"random-g\"\n",
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    assert_ok(&run(&["prepare", "--config", cfg]));
    assert_ok(&run(&["select", "--config", cfg]));
    let export = read_export(&f.out().join("session_export.json"));
    assert_eq!(export.events.len(), 3);
    assert_eq!(export.config.strategy.to_string(), "random-g");
    assert_ok(&run(&["select", "--config", cfg, "--budget", "5", "--strategy", "coldselect"]));
    let export = read_export(&f.out().join("session_export.json"));
    assert_eq!(export.events.len(), 5);
    assert_eq!(export.config.strategy.to_string(), "coldselect");

    std::fs::write(&config, "budget = 3\nbudgett = 4\n").unwrap();
    let out = run(&["select", "--config", cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("budgett"));
}

#[test]
fn served_session_matches_oracle_select() {
    let f = Fixture::new(&three_class());
    f.prepare(&["--reduced-dim", "8", "--k", "10"]);
    assert_ok(&f.run("select", &["--budget", "7", "--out", f.dir.path().join("batch.json").to_str().unwrap()]));

    let args = ConfigArgs {
        output_dir: Some(f.out()),
        gold: Some(f.files.gold.clone()),
        texts: Some(f.files.texts.clone()),
        budget: Some(7),
        ..ConfigArgs::default()
    };
    let config = args.resolve().unwrap();
    let gold: std::collections::BTreeMap<String, String> = coldselect::embed_io::load_gold_labels(&f.files.gold)
        .unwrap()
        .into_iter()
        .map(|g| (g.id, g.label))
        .collect();
    let serve = ServeArgs::default();
    let mut a = open_annotator(&config, &serve).unwrap();
    for _ in 0..4 {
        let item = a.next_item().unwrap();
        assert_eq!(item.text, format!("synthetic instance {}", item.instance_id));
        a.label(&item.instance_id, &gold[&item.instance_id]).unwrap();
    }
    drop(a);
    let mut a = open_annotator(&config, &serve).unwrap();
    assert_eq!(a.wire_state().labeled_count, 4);
    while let Ok(item) = a.next_item() {
        a.label(&item.instance_id, &gold[&item.instance_id]).unwrap();
    }
    assert_eq!(
        std::fs::read(f.out().join("session_export.json")).unwrap(),
        std::fs::read(f.dir.path().join("batch.json")).unwrap()
    );
}

#[test]
fn serve_answers_http() {
    let f = Fixture::new(&two_class());
    f.prepare(&SMALL);
    let mut child = Command::new(env!("CARGO_BIN_EXE_coldselect"))
        .args(f.args("serve", &["--budget", "2", "--port", "0"]))
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap_or_else(|| panic!("{line}")).to_string();
    let mut stream = TcpStream::connect(&addr).unwrap();
    stream
        .write_all(b"GET /api/state HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\n\r\n")
        .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains(r#""remaining_budget":2"#), "{response}");
    assert!(response.contains(r#""state_version":0"#), "{response}");
}
