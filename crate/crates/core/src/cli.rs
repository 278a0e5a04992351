//! Command-line driver. Each subcommand reads the experiment config, writes
//! its artifacts under the work directory and records them in
//! `manifests/<subcommand>.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{hex_digest, ExperimentConfig};
use crate::corpus::{load_corpus, load_queries, write_queries, BaseVocabulary, FrequencyTable};
use crate::encoder::EncoderParams;
use crate::error::{LabError, Result};
use crate::eval::{evaluate_run, Qrels};
use crate::index::{build_bm25_index, build_index, index_stats, InvertedIndex};
use crate::pipeline::{
    bm25_rankings, dense_index, dense_rankings, prepare, pruning_experiment, run_matrix, search_sparse, Dataset,
    DenseSystem, SparseSystem,
};
use crate::search::{write_run, Bm25Params};
use crate::synth::generate;
use crate::train::{read_triples, train, write_triples, BatchBuilder, TrainingLog};
use crate::vocab::{build_controller, VocabularyController};

/// Environment variable holding the `env_logger` filter.
pub const LOG_ENV: &str = "SPLADE_LAB_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "splade-lab",
    version,
    about = "Controlled-vocabulary sparse retrieval experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Config override, `section.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic task at the configured data paths.
    Synth,
    /// Train the tokenizer, count frequencies and mine training triples.
    Ingest,
    /// Build the vocabulary controller.
    Vocab,
    /// Train the sparse encoder (and the dense baseline if configured).
    Train,
    /// Encode and index the corpus.
    Index,
    /// Search the test queries and write TREC runs.
    Search {
        /// Also write a BM25 run.
        #[arg(long)]
        bm25: bool,
    },
    /// Evaluate runs against the test qrels.
    Eval {
        /// Run files; defaults to every file under `runs/`.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
    },
    /// Query expansion statistics and the expansion-pruning experiment.
    Analyze,
    /// Train and evaluate every configured system into one report.
    Matrix,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Vocab => "vocab",
            Command::Train => "train",
            Command::Index => "index",
            Command::Search { .. } => "search",
            Command::Eval { .. } => "eval",
            Command::Analyze => "analyze",
            Command::Matrix => "matrix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutputEntry {
    /// Relative to the work directory when inside it.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    /// How sparse encodings pool token rows.
    pub pooling: String,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Versions {
    pub splade_lab: String,
    pub index_format: u32,
    pub params_format: u32,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Loads the config and applies `--seed` and `--workdir`.
pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p, &overrides)?,
        None => ExperimentConfig::parse("", &overrides)?,
    };
    if let Some(w) = &common.workdir {
        cfg.paths.workdir = w.clone();
    }
    Ok(cfg)
}

struct Work {
    dir: PathBuf,
    outputs: Vec<PathBuf>,
}

impl Work {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Path of an artifact that must already exist, with a hint naming the
    /// subcommand that produces it.
    fn input(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(LabError::config(
                "paths.workdir",
                format!("missing {}; run `splade-lab {producer}` first", p.display()),
            ))
        }
    }

    /// Creates parent directories and registers `path` as an output.
    fn output(&mut self, path: PathBuf) -> Result<PathBuf> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn out(&mut self, rel: &str) -> Result<PathBuf> {
        self.output(self.path(rel))
    }

    fn write(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.out(rel)?;
        fs::write(&p, text).map_err(|e| LabError::io(&p, e))
    }

    fn manifest(&self, subcommand: &str, cfg: &ExperimentConfig) -> Result<Manifest> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            let bytes = fs::read(p).map_err(|e| LabError::io(p, e))?;
            outputs.push(OutputEntry {
                path: relative_to(&self.dir, p).to_string_lossy().replace('\\', "/"),
                sha256: hex_digest(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        outputs.dedup_by(|a, b| a.path == b.path);
        Ok(Manifest {
            subcommand: subcommand.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            versions: Versions {
                splade_lab: env!("CARGO_PKG_VERSION").into(),
                index_format: crate::index::FORMAT_VERSION,
                params_format: crate::encoder::FORMAT_VERSION,
            },
            pooling: crate::encoder::POOLING.into(),
            outputs,
        })
    }
}

/// `path` relative to `base`, stepping up with `..` when it lies outside.
/// Falls back to `path` itself when the two share no root.
fn relative_to(base: &Path, path: &Path) -> PathBuf {
    let (Ok(base), Ok(full)) = (base.canonicalize(), path.canonicalize()) else {
        return path.to_path_buf();
    };
    let b: Vec<_> = base.components().collect();
    let f: Vec<_> = full.components().collect();
    let common = b.iter().zip(&f).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return full;
    }
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    rel.extend(&f[common..]);
    rel
}

fn load_tokenizer(work: &Work) -> Result<(BaseVocabulary, FrequencyTable)> {
    let vocab = BaseVocabulary::load(&work.input("tokenizer.txt", "ingest")?)?;
    let freq = FrequencyTable::load(&work.input("frequencies.tsv", "ingest")?)?;
    Ok((vocab, freq))
}

fn sparse_system(work: &Work) -> Result<SparseSystem> {
    let controller = VocabularyController::load(&work.input("controller.txt", "vocab")?)?;
    let params = EncoderParams::load(&work.input("model.bin", "train")?)?;
    let index = InvertedIndex::load(&work.input("index.bin", "index")?)?;
    Ok(SparseSystem {
        label: controller.spec.label(),
        controller,
        params,
        log: TrainingLog::default(),
        index,
    })
}

/// Runs one subcommand and returns its manifest, which is also written to
/// `manifests/<subcommand>.json`.
pub fn run(cli: &Cli) -> Result<Manifest> {
    let cfg = load_config(&cli.common)?;
    let mut work = Work::new(&cfg.paths.workdir)?;
    let p = &cfg.paths;
    match &cli.command {
        Command::Synth => {
            let task = generate(&cfg.synth_config())?;
            task.corpus.write_tsv(&work.output(p.corpus.clone())?)?;
            write_queries(&work.output(p.train_queries.clone())?, &task.train_queries)?;
            write_queries(&work.output(p.test_queries.clone())?, &task.test_queries)?;
            task.train_qrels.save(&work.output(p.train_qrels.clone())?)?;
            task.test_qrels.save(&work.output(p.test_qrels.clone())?)?;
        }
        Command::Ingest => {
            let ds = Dataset::load(&cfg)?;
            let shared = prepare(&ds, &cfg)?;
            shared.vocab.save(&work.out("tokenizer.txt")?)?;
            shared.freq.save(&work.out("frequencies.tsv")?, &shared.vocab)?;
            write_triples(&work.out("triples.tsv")?, &shared.triples)?;
        }
        Command::Vocab => {
            let (vocab, freq) = load_tokenizer(&work)?;
            let stoplist = Dataset::load_stoplist(&cfg)?;
            let controller = build_controller(cfg.controller_spec()?, &vocab, &freq, &stoplist)?;
            log::info!(
                "controller {}: {} allowed of {} output dims",
                controller.spec.label(),
                controller.allowed.len(),
                controller.output_dim
            );
            controller.save(&work.out("controller.txt")?)?;
        }
        Command::Train => {
            let (vocab, _) = load_tokenizer(&work)?;
            let controller = VocabularyController::load(&work.input("controller.txt", "vocab")?)?;
            let triples = read_triples(&work.input("triples.tsv", "ingest")?)?;
            let corpus = load_corpus(&p.corpus, cfg.corpus_format()?, p.title_augment)?;
            let queries = load_queries(&p.train_queries)?;
            let builder = BatchBuilder::new(&corpus, &queries, &vocab, cfg.encoder.max_len);
            let params = EncoderParams::init_sparse(cfg.encoder_config(), &controller, cfg.seed)?;
            let (params, log) = train(params, Some(&controller), &triples, &builder, &cfg.train_config())?;
            params.save(&work.out("model.bin")?)?;
            work.write("training_log.tsv", &log.to_tsv())?;
            if cfg.train.dense {
                let params = EncoderParams::init_dense(cfg.encoder_config(), vocab.len(), cfg.seed)?;
                let (params, log) = train(params, None, &triples, &builder, &cfg.train_config())?;
                params.save(&work.out("dense_model.bin")?)?;
                work.write("dense_training_log.tsv", &log.to_tsv())?;
            }
        }
        Command::Index => {
            let (vocab, _) = load_tokenizer(&work)?;
            let controller = VocabularyController::load(&work.input("controller.txt", "vocab")?)?;
            let params = EncoderParams::load(&work.input("model.bin", "train")?)?;
            let corpus = load_corpus(&p.corpus, cfg.corpus_format()?, p.title_augment)?;
            let index = build_index(&params, &controller, &vocab, &corpus, cfg.search.quant_bits)?;
            log::info!(
                "{} postings over {} documents",
                index.total_postings(),
                index.doc_count()
            );
            index.save(&work.out("index.bin")?)?;
            work.write("index_stats.tsv", &index_stats(&index, &controller, &vocab).to_tsv())?;
        }
        Command::Search { bm25 } => {
            let (vocab, _) = load_tokenizer(&work)?;
            let queries = load_queries(&p.test_queries)?;
            let sys = sparse_system(&work)?;
            let k = cfg.search.k;
            let rankings = search_sparse(&sys, &vocab, &queries, k, cfg.search.strategy == "maxscore")?;
            let tag = &cfg.search.tag;
            write_run(&rankings, tag, &work.out(&format!("runs/{tag}.run"))?)?;
            if *bm25 {
                let corpus = load_corpus(&p.corpus, cfg.corpus_format()?, p.title_augment)?;
                let index = build_bm25_index(&corpus, &vocab)?;
                let params = Bm25Params {
                    k1: cfg.search.bm25_k1,
                    b: cfg.search.bm25_b,
                };
                let r = bm25_rankings(&index, &vocab, &queries, k, params)?;
                write_run(&r, "bm25", &work.out("runs/bm25.run")?)?;
            }
            let dense = work.path("dense_model.bin");
            if dense.exists() {
                let params = EncoderParams::load(&dense)?;
                let corpus = load_corpus(&p.corpus, cfg.corpus_format()?, p.title_augment)?;
                let index = dense_index(&params, &vocab, &corpus)?;
                let sys = DenseSystem {
                    params,
                    log: TrainingLog::default(),
                    index,
                };
                let r = dense_rankings(&sys, &vocab, &queries, k)?;
                write_run(&r, "dense", &work.out("runs/dense.run")?)?;
            }
        }
        Command::Eval { runs } => {
            let mut runs = runs.clone();
            if runs.is_empty() {
                let dir = work.input("runs", "search")?;
                for e in fs::read_dir(&dir).map_err(|e| LabError::io(&dir, e))? {
                    runs.push(e.map_err(|e| LabError::io(&dir, e))?.path());
                }
                runs.sort();
            }
            let qrels = Qrels::load(&p.test_qrels, cfg.eval.relevance_threshold)?;
            let paths: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
            let report = evaluate_run(&paths, &qrels, &cfg.metrics()?)?;
            work.write("eval/table.tsv", &report.table_tsv())?;
            work.write("eval/means.tsv", &report.means_tsv())?;
            work.write("eval/per_query.tsv", &report.per_query_tsv())?;
            work.write("eval/significance.tsv", &report.significance_tsv())?;
            print!("{}", report.table_tsv());
        }
        Command::Analyze => {
            let (vocab, _) = load_tokenizer(&work)?;
            let queries = load_queries(&p.test_queries)?;
            let qrels = Qrels::load(&p.test_qrels, cfg.eval.relevance_threshold)?;
            let sys = sparse_system(&work)?;
            let r = pruning_experiment(&sys, &vocab, &queries, &qrels, cfg.analyze.prune_top, cfg.search.k)?;
            work.write("analyze/expansion.tsv", &r.stats.to_tsv())?;
            work.write("analyze/pruning.tsv", &r.to_tsv())?;
            let tag = format!("{}-pruned", cfg.search.tag);
            write_run(&r.pruned_rankings, &tag, &work.out(&format!("analyze/{tag}.run"))?)?;
            print!("{}", r.to_tsv());
        }
        Command::Matrix => {
            let ds = Dataset::load(&cfg)?;
            let shared = prepare(&ds, &cfg)?;
            let report = run_matrix(&ds, &shared, &cfg)?;
            work.write("matrix/report.tsv", &report.to_tsv())?;
            work.write("matrix/means.tsv", &report.eval.means_tsv())?;
            work.write("matrix/per_query.tsv", &report.eval.per_query_tsv())?;
            work.write("matrix/significance.tsv", &report.eval.significance_tsv())?;
            let mut systems = String::from("row\tsystem\n");
            for r in &report.rows {
                systems.push_str(&format!("{}\t{}\n", r.row, r.system));
            }
            work.write("matrix/systems.tsv", &systems)?;
            print!("{}", report.to_tsv());
        }
    }
    let name = cli.command.name();
    let manifest = work.manifest(name, &cfg)?;
    let path = work.path(&format!("manifests/{name}.json"));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    fs::write(&path, manifest.to_json()).map_err(|e| LabError::io(&path, e))?;
    Ok(manifest)
}

/// Parses `args`, runs the subcommand and maps errors to exit codes: 2 for
/// usage errors, 1 for everything else.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).try_init();
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
