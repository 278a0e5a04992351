//! Python bindings: load or synthesize a task, train sparse encoders under
//! a vocabulary controller, search and evaluate.

use std::collections::BTreeMap;

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use splade_lab::config::ExperimentConfig;
use splade_lab::corpus::tokenize;
use splade_lab::encoder::encode_tokens;
use splade_lab::eval::{evaluate, parse_metrics, Metric};
use splade_lab::pipeline::{
    bm25_rankings, build_spec_controller, prepare, pruning_experiment, search_sparse, train_sparse, Dataset, Shared,
    SparseSystem,
};
use splade_lab::search::{Bm25Params, Hit, Ranking};
use splade_lab::synth::generate;
use splade_lab::vocab::ControllerSpec;
use splade_lab::LabError;

type Run = BTreeMap<String, Vec<(String, f64)>>;

fn err(e: LabError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_run(rankings: &[Ranking]) -> Run {
    rankings
        .iter()
        .map(|r| {
            let hits = r.hits.iter().map(|h| (h.doc_id.clone(), h.score)).collect();
            (r.query_id.clone(), hits)
        })
        .collect()
}

fn from_run(run: Run, k: usize) -> Vec<Ranking> {
    run.into_iter()
        .map(|(q, hits)| {
            let hits = hits.into_iter().map(|(doc_id, score)| Hit { doc_id, score }).collect();
            Ranking::new(q, hits, k)
        })
        .collect()
}

/// A dataset plus the artifacts every system shares: tokenizer, BM25
/// statistics and mined training triples.
#[pyclass]
struct Experiment {
    cfg: ExperimentConfig,
    ds: Dataset,
    shared: Shared,
}

#[pymethods]
impl Experiment {
    /// `config` is TOML text; `overrides` are `section.key=value` strings.
    /// With `synthetic`, the task comes from the `[synth]` section instead
    /// of the data files.
    #[new]
    #[pyo3(signature = (config = "", overrides = Vec::new(), synthetic = true))]
    fn new(py: Python<'_>, config: &str, overrides: Vec<String>, synthetic: bool) -> PyResult<Self> {
        let cfg = ExperimentConfig::parse(config, &overrides).map_err(err)?;
        py.detach(|| {
            let ds = if synthetic {
                Dataset::from_synth(generate(&cfg.synth_config())?)
            } else {
                Dataset::load(&cfg)?
            };
            let shared = prepare(&ds, &cfg)?;
            Ok(Self { cfg, ds, shared })
        })
        .map_err(err)
    }

    #[getter]
    fn n_docs(&self) -> usize {
        self.ds.corpus.len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.shared.vocab.len()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.cfg.hash()
    }

    fn test_queries(&self) -> Vec<(String, String)> {
        self.ds
            .test_queries
            .iter()
            .map(|q| (q.query_id.clone(), q.text.clone()))
            .collect()
    }

    /// BM25 run over the test queries: `{query_id: [(doc_id, score), ...]}`.
    #[pyo3(signature = (k = 1000))]
    fn bm25(&self, py: Python<'_>, k: usize) -> PyResult<Run> {
        let p = Bm25Params {
            k1: self.cfg.search.bm25_k1,
            b: self.cfg.search.bm25_b,
        };
        py.detach(|| bm25_rankings(&self.shared.bm25, &self.shared.vocab, &self.ds.test_queries, k, p))
            .map(|r| to_run(&r))
            .map_err(err)
    }

    /// Trains and indexes a sparse encoder under a controller spec such as
    /// `"full"` or `"random_k:150"`.
    fn train(&self, py: Python<'_>, spec: &str) -> PyResult<SparseModel> {
        let spec = ControllerSpec::parse(spec, self.cfg.seed).map_err(err)?;
        let sys = py
            .detach(|| {
                let controller = build_spec_controller(&self.ds, &self.shared, spec)?;
                train_sparse(&self.ds, &self.shared, controller, &self.cfg)
            })
            .map_err(err)?;
        Ok(SparseModel {
            sys,
            vocab: self.shared.vocab.clone(),
            max_len: self.cfg.encoder.max_len,
        })
    }

    /// Mean metric values on the test qrels, per named run.
    #[pyo3(signature = (runs, metrics = "rr@10,ndcg@10,recall@1000"))]
    fn evaluate(
        &self,
        runs: BTreeMap<String, Run>,
        metrics: &str,
    ) -> PyResult<BTreeMap<String, BTreeMap<String, f64>>> {
        let metrics = parse_metrics(metrics).map_err(err)?;
        let k = self.cfg.search.k;
        let systems: Vec<(String, Vec<Ranking>)> = runs.into_iter().map(|(n, r)| (n, from_run(r, k))).collect();
        let report = evaluate(&systems, &self.ds.test_qrels, &metrics).map_err(err)?;
        Ok(report
            .systems
            .iter()
            .map(|s| {
                let means = metrics.iter().zip(&s.means).map(|(m, v)| (m.to_string(), *v)).collect();
                (s.name.clone(), means)
            })
            .collect())
    }

    /// Removes the `top_n` most expanded query terms and returns RR@10
    /// before and after.
    #[pyo3(signature = (model, top_n = 100))]
    fn pruning(&self, py: Python<'_>, model: &SparseModel, top_n: usize) -> PyResult<(f64, f64)> {
        py.detach(|| {
            pruning_experiment(
                &model.sys,
                &self.shared.vocab,
                &self.ds.test_queries,
                &self.ds.test_qrels,
                top_n,
                self.cfg.search.k,
            )
        })
        .map(|r| (r.before, r.after))
        .map_err(err)
    }
}

#[pyclass]
struct SparseModel {
    sys: SparseSystem,
    vocab: splade_lab::corpus::BaseVocabulary,
    max_len: usize,
}

#[pymethods]
impl SparseModel {
    #[getter]
    fn label(&self) -> String {
        self.sys.label.clone()
    }

    #[getter]
    fn mean_doc_nnz(&self) -> f64 {
        self.sys.mean_doc_nnz()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.sys.log.len()
    }

    /// Term weights of `text`, keyed by surface form (`latent#k` for
    /// latent dims).
    fn encode(&self, text: &str) -> PyResult<BTreeMap<String, f64>> {
        let tokens = tokenize(text, &self.vocab, self.max_len);
        let v = encode_tokens(&self.sys.params, &self.sys.controller.allowed_mask(), &tokens).map_err(err)?;
        Ok(v.iter()
            .map(|(t, w)| (self.sys.controller.term_label(t, &self.vocab), w))
            .collect())
    }

    /// Top-`k` documents for `text` as `(doc_id, score)` pairs.
    #[pyo3(signature = (text, k = 10))]
    fn search(&self, text: &str, k: usize) -> PyResult<Vec<(String, f64)>> {
        let q = splade_lab::corpus::Query {
            query_id: "q".into(),
            text: text.into(),
        };
        let r = search_sparse(&self.sys, &self.vocab, &[q], k, true).map_err(err)?;
        Ok(r[0].hits.iter().map(|h| (h.doc_id.clone(), h.score)).collect())
    }

    /// Run over `(query_id, text)` pairs.
    #[pyo3(signature = (queries, k = 1000))]
    fn run(&self, py: Python<'_>, queries: Vec<(String, String)>, k: usize) -> PyResult<Run> {
        let queries: Vec<_> = queries
            .into_iter()
            .map(|(query_id, text)| splade_lab::corpus::Query { query_id, text })
            .collect();
        py.detach(|| search_sparse(&self.sys, &self.vocab, &queries, k, true))
            .map(|r| to_run(&r))
            .map_err(err)
    }

    fn save_index(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.sys.index.save(&path).map_err(err)
    }
}

/// Max-pooled log-saturated weights of a `[tokens × dims]` logit matrix
/// over the allowed dims.
#[pyfunction]
fn pool_sparse(logits: Vec<Vec<f64>>, allowed: Vec<bool>) -> PyResult<BTreeMap<u32, f64>> {
    let rows = logits.len();
    let cols = logits.first().map_or(0, Vec::len);
    if logits.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged logit matrix"));
    }
    let m = Array2::from_shape_vec((rows, cols), logits.concat()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let v = splade_lab::encoder::pool_sparse(&m, &allowed).map_err(err)?;
    Ok(v.iter().collect())
}

/// Two-sided paired t-test p-value.
#[pyfunction]
fn paired_ttest(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    splade_lab::eval::paired_ttest(&a, &b).map_err(err)
}

#[pyfunction]
fn default_metrics() -> Vec<String> {
    Metric::DEFAULTS.iter().map(Metric::to_string).collect()
}

#[pymodule]
fn splade_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Experiment>()?;
    m.add_class::<SparseModel>()?;
    m.add_function(wrap_pyfunction!(pool_sparse, m)?)?;
    m.add_function(wrap_pyfunction!(paired_ttest, m)?)?;
    m.add_function(wrap_pyfunction!(default_metrics, m)?)?;
    Ok(())
}
