use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Tiny model plus matching vocabulary in one directory, and three documents.
struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let model = dir.path().join("model");
        fs::create_dir(&model).unwrap();
        for (from, name) in [
            ("tiny_model/config.json", "config.json"),
            ("tiny_model/model.safetensors", "model.safetensors"),
            ("toy1000/vocab.json", "vocab.json"),
            ("toy1000/merges.txt", "merges.txt"),
        ] {
            fs::copy(fixtures().join(from), model.join(name)).unwrap();
        }
        let text = fs::read_to_string(fixtures().join("sentences.txt")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let mut manifest = String::new();
        for (k, chunk) in lines.chunks(17).enumerate() {
            let name = format!("doc{k}.txt");
            fs::write(dir.path().join(&name), chunk.join("\n")).unwrap();
            writeln!(manifest, "doc{k}\t{name}").unwrap();
        }
        fs::write(dir.path().join("manifest.tsv"), manifest).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn model(&self) -> PathBuf {
        self.path("model")
    }
}

fn attnshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnshift"))
        .args(args)
        .env_remove("ATTNSHIFT_MODEL_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn predictors(ws: &Workspace, extra: &[&str]) -> Output {
    let model = ws.model();
    let manifest = ws.path("manifest.tsv");
    let mut args = vec![
        "predictors",
        "--model-dir",
        model.to_str().unwrap(),
        "--window",
        "32",
    ];
    args.extend_from_slice(&["--manifest", manifest.to_str().unwrap()]);
    args.extend_from_slice(extra);
    attnshift(&args)
}

fn header(tsv: &str) -> Vec<&str> {
    tsv.lines().next().unwrap().split('\t').collect()
}

#[test]
fn predictor_table_has_every_column_and_a_health_line() {
    let ws = Workspace::new();
    let out = predictors(&ws, &[]);
    let tsv = ok(&out);
    let cols = header(&tsv);
    assert_eq!(cols.iter().filter(|c| c.starts_with("attn_")).count(), 12);
    assert!(cols.contains(&"surprisal"));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("health:") && stderr.contains("head residual"),
        "{stderr}"
    );
    for doc in ["doc0", "doc1", "doc2"] {
        assert!(stderr.contains(&format!("{doc}: ")), "{stderr}");
    }
}

#[test]
fn column_selection() {
    let ws = Workspace::new();
    let tsv = ok(&predictors(
        &ws,
        &["--formulations", "w", "--measures", "nae"],
    ));
    let cols = header(&tsv);
    assert_eq!(
        cols.iter()
            .filter(|c| c.starts_with("attn_"))
            .collect::<Vec<_>>(),
        [&"attn_w_nae"]
    );
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let ws = Workspace::new();
    let a = ws.path("a.tsv");
    let b = ws.path("b.tsv");
    ok(&predictors(&ws, &["-o", a.to_str().unwrap()]));
    ok(&predictors(
        &ws,
        &["-o", b.to_str().unwrap(), "--threads", "1"],
    ));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn model_directory_from_environment() {
    let ws = Workspace::new();
    let doc = ws.path("doc0.txt");
    let out = Command::new(env!("CARGO_BIN_EXE_attnshift"))
        .args(["surprisal", "--window", "16", doc.to_str().unwrap()])
        .env("ATTNSHIFT_MODEL_DIR", ws.model())
        .output()
        .unwrap();
    let tsv = ok(&out);
    assert_eq!(header(&tsv).last(), Some(&"surprisal"));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let ws = Workspace::new();
    let out = predictors(&ws, &["--window", "15"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let out = predictors(&ws, &["--window", "128"]);
    assert!(!out.status.success());

    let out = attnshift(&["predictors", "--model-dir", "/nonexistent", "x.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn tokenize_lists_tokens_by_word() {
    let ws = Workspace::new();
    let doc = ws.path("doc0.txt");
    let tsv = ok(&attnshift(&[
        "tokenize",
        "--vocab-dir",
        ws.model().to_str().unwrap(),
        doc.to_str().unwrap(),
    ]));
    let first: Vec<&str> = tsv.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(first[0], "doc0");
    assert_eq!(first[4], "1");
    assert_eq!(first[5], "The");
}

#[test]
fn selftest_passes_and_corruption_fails() {
    let out = attnshift(&[
        "selftest",
        "--models",
        "3",
        "--pairs",
        "100",
        "--strings",
        "100",
    ]);
    assert!(ok(&out).contains("all 7 checks passed"));

    let out = attnshift(&["selftest", "--models", "3", "--corrupt", "value"]);
    assert!(!out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("failed: head decomposition"), "{stdout}");
}

/// Reading times for 16 subjects whose log duration depends on `column` with
/// the given strength.
fn simulate_rt(table: &str, column: &str, strength: f64, seed: u64) -> String {
    let cols = header(table);
    let c = cols.iter().position(|n| *n == column).unwrap();
    let rows: Vec<Vec<&str>> = table
        .lines()
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    let values: Vec<f64> = rows.iter().filter_map(|r| r[c].parse().ok()).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("subject\tdoc_id\tword_index\tduration_ms\n");
    for s in 0..16 {
        for r in &rows {
            let z = r[c].parse::<f64>().map_or(0.0, |v| (v - mean) / sd);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let ms = (5.7 + strength * z + 0.25 * noise).exp();
            writeln!(out, "{s}\t{}\t{}\t{ms:.3}", r[0], r[1]).unwrap();
        }
    }
    out
}

fn eval(ws: &Workspace, table: &Path, rt: &str, extra: &[&str]) -> Vec<Vec<String>> {
    let rt_path = ws.path("rt.tsv");
    fs::write(&rt_path, rt).unwrap();
    let mut args = vec![
        "eval",
        "--table",
        table.to_str().unwrap(),
        "--rt",
        rt_path.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let tsv = ok(&attnshift(&args));
    tsv.lines()
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

fn column<'a>(report: &'a [Vec<String>], row: usize, name: &str) -> &'a str {
    let c = report[0].iter().position(|h| h == name).unwrap();
    &report[row][c]
}

#[test]
fn eval_detects_signal_and_not_noise() {
    let ws = Workspace::new();
    let table_path = ws.path("p.tsv");
    ok(&predictors(&ws, &["-o", table_path.to_str().unwrap()]));
    let table = fs::read_to_string(&table_path).unwrap();

    let rt = simulate_rt(&table, "attn_rln_md", 0.1, 1);
    let report = eval(
        &ws,
        &table_path,
        &rt,
        &["--interest", "attn_rln_md", "--seed", "5"],
    );
    let p: f64 = column(&report, 1, "p_value").parse().unwrap();
    assert!(p < 0.001, "{report:?}");

    let rt = simulate_rt(&table, "attn_rln_md", 0.0, 2);
    let report = eval(
        &ws,
        &table_path,
        &rt,
        &["--interest", "attn_rln_md", "--seed", "5"],
    );
    let p: f64 = column(&report, 1, "p_value").parse().unwrap();
    assert!(p > 0.05, "{report:?}");

    let report = eval(
        &ws,
        &table_path,
        &rt,
        &[
            "--interest",
            "attn_rln_md,attn_n_emd",
            "--permutations",
            "1000",
            "--lags",
            "1",
        ],
    );
    assert_eq!(report.len(), 3);
    assert_eq!(column(&report, 1, "predictor"), "attn_rln_md");
    assert_eq!(column(&report, 2, "predictor"), "attn_n_emd");
}

#[test]
fn corr_and_groupby() {
    let ws = Workspace::new();
    let table_path = ws.path("p.tsv");
    ok(&predictors(
        &ws,
        &[
            "--formulations",
            "n,rln",
            "--measures",
            "md",
            "-o",
            table_path.to_str().unwrap(),
        ],
    ));
    let t = table_path.to_str().unwrap();

    let tsv = ok(&attnshift(&["corr", "--table", t]));
    let rows: Vec<Vec<&str>> = tsv.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0], ["column", "surprisal", "attn_n_md", "attn_rln_md"]);
    for (k, row) in rows.iter().enumerate().skip(1) {
        assert_eq!(row[k], "1.000000");
    }

    let tsv = ok(&attnshift(&[
        "groupby",
        "--table",
        t,
        "--by",
        "doc_id",
        "--value",
        "attn_rln_md",
    ]));
    let labels: Vec<&str> = tsv
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(labels, ["doc0", "doc1", "doc2"]);
}
