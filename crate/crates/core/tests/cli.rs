use std::path::Path;
use std::process::{Command, Output};

use splade_lab::config::hex_digest;

const SMALL: &str = r#"seed = 3

[paths]
corpus = "data/corpus.tsv"
train_queries = "data/train_queries.tsv"
train_qrels = "data/train_qrels.txt"
test_queries = "data/test_queries.tsv"
test_qrels = "data/test_qrels.txt"
workdir = "work"

[synth]
n_docs = 300
n_train_queries = 60
n_test_queries = 20
n_topics = 20
n_content_words = 400

[vocab]
controller = "random_k:100"

[encoder]
d_model = 16
n_heads = 2
d_ff = 32
max_len = 32

[train]
n_hard = 3
max_steps = 10
learning_rate = 3e-3
warmup_steps = 5
dense = true

[matrix]
specs = ["full", "stop_only:50"]
"#;

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splade-lab"))
        .args(args)
        .current_dir(dir)
        .env("SPLADE_LAB_LOG", "warn")
        .output()
        .expect("spawn splade-lab")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lab(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("lab.toml"), SMALL).unwrap();
    dir
}

fn manifest(work: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(work.join(format!("manifests/{name}.json"))).unwrap()).unwrap()
}

fn assert_manifest_hashes(work: &Path, name: &str) {
    let m = manifest(work, name);
    let outputs = m["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty(), "{name} lists no outputs");
    for o in outputs {
        let p = o["path"].as_str().unwrap();
        let path = if Path::new(p).is_absolute() {
            p.into()
        } else {
            work.join(p)
        };
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(hex_digest(&bytes), o["sha256"].as_str().unwrap(), "{name}: {p}");
        assert_eq!(bytes.len() as u64, o["bytes"].as_u64().unwrap());
    }
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = setup();
    assert_eq!(lab(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(lab(dir.path(), &["ingest", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(lab(dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn config_errors_name_the_field() {
    let dir = setup();
    let out = lab(dir.path(), &["vocab", "--config", "lab.toml", "--set", "search.k=0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("search.k"));

    std::fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = lab(dir.path(), &["vocab", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn missing_artifacts_point_at_the_producing_subcommand() {
    let dir = setup();
    let out = lab(dir.path(), &["train", "--config", "lab.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("splade-lab ingest"));
}

#[test]
fn stages_chain_and_manifests_cover_outputs() {
    let dir = setup();
    let d = dir.path();
    let work = d.join("work");
    for stage in ["synth", "ingest", "vocab", "train", "index"] {
        ok(d, &[stage, "--config", "lab.toml"]);
        assert_manifest_hashes(&work, stage);
    }
    ok(d, &["search", "--config", "lab.toml", "--bm25"]);
    assert_manifest_hashes(&work, "search");
    for run in ["splade", "bm25", "dense"] {
        assert!(work.join(format!("runs/{run}.run")).exists(), "{run}");
    }
    let table = ok(d, &["eval", "--config", "lab.toml"]);
    assert!(table.starts_with("system\tRR@10\tNDCG@10\tRecall@1000"), "{table}");
    assert_eq!(table.lines().count(), 4);
    assert_manifest_hashes(&work, "eval");
    let pruning = ok(d, &["analyze", "--config", "lab.toml", "--set", "analyze.prune_top=10"]);
    assert!(pruning.lines().nth(1).unwrap().ends_with("\ttrue"), "{pruning}");
    assert_manifest_hashes(&work, "analyze");

    let m = manifest(&work, "train");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["versions"]["splade_lab"], env!("CARGO_PKG_VERSION"));
    assert!(m["pooling"].as_str().unwrap().contains("[CLS]"));
    let files: Vec<&str> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["path"].as_str().unwrap())
        .collect();
    assert_eq!(
        files,
        [
            "dense_model.bin",
            "dense_training_log.tsv",
            "model.bin",
            "training_log.tsv"
        ]
    );
}

#[test]
fn reruns_are_byte_identical_and_seed_flag_changes_them() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["synth", "--config", "lab.toml"]);
    ok(d, &["ingest", "--config", "lab.toml", "--workdir", "a"]);
    ok(d, &["ingest", "--config", "lab.toml", "--workdir", "b"]);
    ok(d, &["ingest", "--config", "lab.toml", "--workdir", "c", "--seed", "4"]);
    let read = |w: &str, f: &str| std::fs::read(d.join(w).join(f)).unwrap();
    assert_eq!(read("a", "manifests/ingest.json"), read("b", "manifests/ingest.json"));
    assert_eq!(read("a", "triples.tsv"), read("b", "triples.tsv"));
    assert_ne!(read("a", "triples.tsv"), read("c", "triples.tsv"));
    assert_ne!(
        manifest(&d.join("a"), "ingest")["config_hash"],
        manifest(&d.join("c"), "ingest")["config_hash"]
    );
}

#[test]
fn small_matrix_report_has_one_row_per_system() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["synth", "--config", "lab.toml"]);
    let report = ok(d, &["matrix", "--config", "lab.toml"]);
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows[0], "row\tsystem\tRR@10\tNDCG@10\tRecall@1000\tdoc_nnz");
    let systems: Vec<&str> = rows[1..].iter().map(|r| r.split('\t').nth(1).unwrap()).collect();
    assert_eq!(systems, ["bm25", "dense", "full", "stop-50"]);
    assert!(rows[1].ends_with("\t-"));
    assert_manifest_hashes(&d.join("work"), "matrix");
}
