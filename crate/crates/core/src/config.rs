//! Experiment configuration: one TOML file with a section per stage.
//! Every field has a default, unknown keys are rejected, and `--set
//! section.key=value` overrides are applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusFormat;
use crate::encoder::EncoderConfig;
use crate::error::{LabError, Result};
use crate::eval::{parse_metrics, Metric};
use crate::search::{BM25_B, BM25_K1, DEFAULT_K};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;
use crate::vocab::ControllerSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: PathBuf,
    pub corpus_format: String,
    pub title_augment: bool,
    pub train_queries: PathBuf,
    pub train_qrels: PathBuf,
    pub test_queries: PathBuf,
    pub test_qrels: PathBuf,
    /// Empty means the bundled English stoplist.
    pub stoplist: PathBuf,
    pub workdir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            corpus: "data/corpus.tsv".into(),
            corpus_format: "tsv".into(),
            title_augment: false,
            train_queries: "data/train_queries.tsv".into(),
            train_qrels: "data/train_qrels.txt".into(),
            test_queries: "data/test_queries.tsv".into(),
            test_qrels: "data/test_qrels.txt".into(),
            stoplist: PathBuf::new(),
            workdir: "work".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_docs: usize,
    pub n_train_queries: usize,
    pub n_test_queries: usize,
    pub n_topics: usize,
    pub n_content_words: usize,
    pub topic_words_per_doc: usize,
    pub background_words_per_doc: usize,
    pub stopwords_per_doc: usize,
    pub query_words: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            n_docs: d.n_docs,
            n_train_queries: d.n_train_queries,
            n_test_queries: d.n_test_queries,
            n_topics: d.n_topics,
            n_content_words: d.n_content_words,
            topic_words_per_doc: d.topic_words_per_doc,
            background_words_per_doc: d.background_words_per_doc,
            stopwords_per_doc: d.stopwords_per_doc,
            query_words: d.query_words,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub max_vocab: usize,
    pub min_freq: u64,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            max_vocab: 5000,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    /// `kind[:k]`, e.g. `full`, `stop_only:150`, `random_k:768`.
    pub controller: String,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self {
            controller: "full".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub tie_embeddings: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::default();
        Self {
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            max_len: d.max_len,
            tie_embeddings: d.tie_embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub n_hard: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub max_steps: usize,
    pub lambda_q: f64,
    pub lambda_d: f64,
    pub warmup_steps: usize,
    pub mining_depth: usize,
    /// Also train the dense baseline.
    pub dense: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch_size: d.batch_size,
            n_hard: d.n_hard,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            epochs: d.epochs,
            max_steps: d.max_steps,
            lambda_q: d.lambda_q,
            lambda_d: d.lambda_d,
            warmup_steps: d.warmup_steps,
            mining_depth: d.mining_depth,
            dense: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub k: usize,
    /// `maxscore` or `exhaustive`.
    pub strategy: String,
    pub quant_bits: u32,
    pub tag: String,
    pub bm25_k1: f64,
    pub bm25_b: f64,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            strategy: "maxscore".into(),
            quant_bits: 8,
            tag: "splade".into(),
            bm25_k1: BM25_K1,
            bm25_b: BM25_B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metrics: String,
    pub relevance_threshold: u32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: "rr@10,ndcg@10,recall@1000".into(),
            relevance_threshold: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub prune_top: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self { prune_top: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    pub specs: Vec<String>,
    pub bm25: bool,
    pub dense: bool,
}

impl Default for MatrixSection {
    fn default() -> Self {
        Self {
            specs: [
                "full",
                "stop_only:150",
                "random_k:150",
                "random_k:768",
                "lowfreq_k:150",
                "lowfreq_k:768",
                "latent_only_k:150",
                "latent_only_k:768",
                "added_latent_k:150",
                "added_latent_k:768",
                "no_stop",
            ]
            .map(String::from)
            .to_vec(),
            bm25: true,
            dense: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub synth: SynthSection,
    pub tokenizer: TokenizerSection,
    pub vocab: VocabSection,
    pub encoder: EncoderSection,
    pub train: TrainSection,
    pub search: SearchSection,
    pub eval: EvalSection,
    pub analyze: AnalyzeSection,
    pub matrix: MatrixSection,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

impl ExperimentConfig {
    /// Parses TOML text and applies `section.key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| LabError::config("config", e.message()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| LabError::config(o, "override must be section.key=value"))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields at least one part");
            let mut t = &mut table;
            for p in parents {
                t = t
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| LabError::config(key, "not a section"))?;
            }
            t.insert(last.to_string(), override_value(value.trim()));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::config("config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::parse(&text, overrides)?;
        // relative data paths resolve against the config file's directory
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for field in [
            &mut p.corpus,
            &mut p.train_queries,
            &mut p.train_qrels,
            &mut p.test_queries,
            &mut p.test_qrels,
            &mut p.stoplist,
            &mut p.workdir,
        ] {
            if !field.as_os_str().is_empty() && field.is_relative() {
                *field = base.join(&*field);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus_format()?;
        self.controller_spec()?;
        self.encoder_config().validate()?;
        self.train_config().validate()?;
        self.synth_config().validate()?;
        self.metrics()?;
        for s in &self.matrix.specs {
            ControllerSpec::parse(s, self.seed).map_err(|e| LabError::config("matrix.specs", e.to_string()))?;
        }
        if self.search.k == 0 {
            return Err(LabError::config("search.k", "must be positive"));
        }
        if !matches!(self.search.strategy.as_str(), "maxscore" | "exhaustive") {
            return Err(LabError::config(
                "search.strategy",
                "must be 'maxscore' or 'exhaustive'",
            ));
        }
        if !(1..=8).contains(&self.search.quant_bits) {
            return Err(LabError::config("search.quant_bits", "must be in 1..=8"));
        }
        if self.search.tag.is_empty() || self.search.tag.contains(char::is_whitespace) {
            return Err(LabError::config("search.tag", "must be one non-empty word"));
        }
        if self.tokenizer.max_vocab <= 4 {
            return Err(LabError::config(
                "tokenizer.max_vocab",
                "must exceed the 4 special tokens",
            ));
        }
        Ok(())
    }

    pub fn corpus_format(&self) -> Result<CorpusFormat> {
        self.paths.corpus_format.parse()
    }

    pub fn controller_spec(&self) -> Result<ControllerSpec> {
        ControllerSpec::parse(&self.vocab.controller, self.seed)
            .map_err(|e| LabError::config("vocab.controller", e.to_string()))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            d_model: e.d_model,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            d_ff: e.d_ff,
            max_len: e.max_len,
            tie_embeddings: e.tie_embeddings,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            n_hard: t.n_hard,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            epochs: t.epochs,
            max_steps: t.max_steps,
            lambda_q: t.lambda_q,
            lambda_d: t.lambda_d,
            warmup_steps: t.warmup_steps,
            mining_depth: t.mining_depth,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            n_docs: s.n_docs,
            n_train_queries: s.n_train_queries,
            n_test_queries: s.n_test_queries,
            n_topics: s.n_topics,
            n_content_words: s.n_content_words,
            topic_words_per_doc: s.topic_words_per_doc,
            background_words_per_doc: s.background_words_per_doc,
            stopwords_per_doc: s.stopwords_per_doc,
            query_words: s.query_words,
            seed: self.seed,
        }
    }

    pub fn metrics(&self) -> Result<Vec<Metric>> {
        parse_metrics(&self.eval.metrics)
    }

    /// Canonical TOML of the effective configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical config with the work directory blanked, so
    /// the same experiment hashes alike wherever its outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.workdir = PathBuf::new();
        hex_digest(c.canonical().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
