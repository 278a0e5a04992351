//! Reusable experiment stages shared by the CLI, the bindings and the
//! end-to-end tests.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::corpus::{
    load_corpus, load_queries, term_ids, token_frequencies, tokenize, train_tokenizer, BaseVocabulary, Corpus,
    FrequencyTable, Query,
};
use crate::encoder::{encode_dense_tokens, encode_selected, ColumnSelection, EncoderParams};
use crate::error::Result;
use crate::eval::{
    evaluate, expansion_stats, prune_query_terms, EvalReport, ExpansionStats, Metric, Qrels, SIGNIFICANCE_LEVEL,
};
use crate::index::{build_bm25_index, build_index, Bm25Index, InvertedIndex};
use crate::search::{
    search_bm25, search_dense_bruteforce, search_exhaustive, search_maxscore, Bm25Params, DenseIndex, Ranking,
};
use crate::synth::SynthTask;
use crate::train::{mine_hard_negatives, train, BatchBuilder, TrainingLog, TrainingTriple};
use crate::vocab::{build_controller, default_stoplist, load_stoplist, ControllerSpec, VocabularyController};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Corpus,
    pub train_queries: Vec<Query>,
    pub train_qrels: Qrels,
    pub test_queries: Vec<Query>,
    pub test_qrels: Qrels,
    pub stoplist: Vec<String>,
}

impl Dataset {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let p = &cfg.paths;
        let t = cfg.eval.relevance_threshold;
        Ok(Self {
            corpus: load_corpus(&p.corpus, cfg.corpus_format()?, p.title_augment)?,
            train_queries: load_queries(&p.train_queries)?,
            train_qrels: Qrels::load(&p.train_qrels, t)?,
            test_queries: load_queries(&p.test_queries)?,
            test_qrels: Qrels::load(&p.test_qrels, t)?,
            stoplist: Self::load_stoplist(cfg)?,
        })
    }

    /// The configured stoplist, or the bundled English one.
    pub fn load_stoplist(cfg: &ExperimentConfig) -> Result<Vec<String>> {
        if cfg.paths.stoplist.as_os_str().is_empty() {
            Ok(default_stoplist())
        } else {
            load_stoplist(&cfg.paths.stoplist)
        }
    }

    pub fn from_synth(task: SynthTask) -> Self {
        Self {
            corpus: task.corpus,
            train_queries: task.train_queries,
            train_qrels: task.train_qrels,
            test_queries: task.test_queries,
            test_qrels: task.test_qrels,
            stoplist: default_stoplist(),
        }
    }
}

/// Artifacts shared by every system of a matrix: vocabulary, frequencies,
/// BM25 statistics and mined training triples.
#[derive(Debug, Clone)]
pub struct Shared {
    pub vocab: BaseVocabulary,
    pub freq: FrequencyTable,
    pub bm25: Bm25Index,
    pub triples: Vec<TrainingTriple>,
}

pub fn prepare(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Shared> {
    let vocab = train_tokenizer(&ds.corpus, cfg.tokenizer.max_vocab, cfg.tokenizer.min_freq)?;
    let freq = token_frequencies(&ds.corpus, &vocab);
    let bm25 = build_bm25_index(&ds.corpus, &vocab)?;
    let triples = mine_hard_negatives(
        &bm25,
        &vocab,
        &ds.train_queries,
        &ds.train_qrels,
        cfg.train.mining_depth,
        cfg.train.n_hard,
        cfg.seed,
    )?;
    log::info!(
        "vocabulary {} tokens, {} training triples from {} queries",
        vocab.len(),
        triples.len(),
        ds.train_queries.len()
    );
    Ok(Shared {
        vocab,
        freq,
        bm25,
        triples,
    })
}

pub fn build_spec_controller(ds: &Dataset, shared: &Shared, spec: ControllerSpec) -> Result<VocabularyController> {
    build_controller(spec, &shared.vocab, &shared.freq, &ds.stoplist)
}

#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub label: String,
    pub controller: VocabularyController,
    pub params: EncoderParams,
    pub log: TrainingLog,
    pub index: InvertedIndex,
}

impl SparseSystem {
    pub fn mean_doc_nnz(&self) -> f64 {
        self.index.total_postings() as f64 / self.index.doc_count() as f64
    }
}

/// Trains a sparse encoder under `controller` and indexes the corpus.
pub fn train_sparse(
    ds: &Dataset,
    shared: &Shared,
    controller: VocabularyController,
    cfg: &ExperimentConfig,
) -> Result<SparseSystem> {
    let params = EncoderParams::init_sparse(cfg.encoder_config(), &controller, cfg.seed)?;
    let builder = BatchBuilder::new(&ds.corpus, &ds.train_queries, &shared.vocab, cfg.encoder.max_len);
    let (params, log) = train(
        params,
        Some(&controller),
        &shared.triples,
        &builder,
        &cfg.train_config(),
    )?;
    let index = build_index(&params, &controller, &shared.vocab, &ds.corpus, cfg.search.quant_bits)?;
    Ok(SparseSystem {
        label: controller.spec.label(),
        controller,
        params,
        log,
        index,
    })
}

pub fn encode_queries(
    params: &EncoderParams,
    controller: &VocabularyController,
    vocab: &BaseVocabulary,
    queries: &[Query],
) -> Result<Vec<crate::encoder::SparseVector>> {
    let sel = ColumnSelection::new(params, &controller.allowed_mask())?;
    queries
        .par_iter()
        .map(|q| encode_selected(params, &sel, &tokenize(&q.text, vocab, params.config.max_len)))
        .collect()
}

/// Searches encoded queries, optionally with some dims removed.
pub fn search_encoded(
    index: &InvertedIndex,
    queries: &[Query],
    encoded: &[crate::encoder::SparseVector],
    k: usize,
    maxscore: bool,
    banned: Option<&BTreeSet<u32>>,
) -> Result<Vec<Ranking>> {
    queries
        .par_iter()
        .zip(encoded.par_iter())
        .map(|(q, v)| {
            let pruned;
            let v = match banned {
                Some(b) => {
                    pruned = prune_query_terms(v, b);
                    &pruned
                }
                None => v,
            };
            let hits = if maxscore {
                search_maxscore(index, v, k)?
            } else {
                search_exhaustive(index, v, k)?
            };
            Ok(Ranking::new(q.query_id.clone(), hits, k))
        })
        .collect()
}

pub fn search_sparse(
    sys: &SparseSystem,
    vocab: &BaseVocabulary,
    queries: &[Query],
    k: usize,
    maxscore: bool,
) -> Result<Vec<Ranking>> {
    let encoded = encode_queries(&sys.params, &sys.controller, vocab, queries)?;
    search_encoded(&sys.index, queries, &encoded, k, maxscore, None)
}

pub fn bm25_rankings(
    bm25: &Bm25Index,
    vocab: &BaseVocabulary,
    queries: &[Query],
    k: usize,
    params: Bm25Params,
) -> Result<Vec<Ranking>> {
    queries
        .par_iter()
        .map(|q| {
            let terms: Vec<u32> = term_ids(&q.text, vocab)
                .into_iter()
                .filter(|&t| !BaseVocabulary::is_special(t))
                .collect();
            Ok(Ranking::new(
                q.query_id.clone(),
                search_bm25(bm25, &terms, k, params)?,
                k,
            ))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DenseSystem {
    pub params: EncoderParams,
    pub log: TrainingLog,
    pub index: DenseIndex,
}

pub fn train_dense(ds: &Dataset, shared: &Shared, cfg: &ExperimentConfig) -> Result<DenseSystem> {
    let params = EncoderParams::init_dense(cfg.encoder_config(), shared.vocab.len(), cfg.seed)?;
    let builder = BatchBuilder::new(&ds.corpus, &ds.train_queries, &shared.vocab, cfg.encoder.max_len);
    let (params, log) = train(params, None, &shared.triples, &builder, &cfg.train_config())?;
    let index = dense_index(&params, &shared.vocab, &ds.corpus)?;
    Ok(DenseSystem { params, log, index })
}

pub fn dense_index(params: &EncoderParams, vocab: &BaseVocabulary, corpus: &Corpus) -> Result<DenseIndex> {
    let docs = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let t = tokenize(&corpus.visible_text(i), vocab, params.config.max_len);
            Ok((corpus.docs[i].doc_id.clone(), encode_dense_tokens(params, &t)?))
        })
        .collect::<Result<Vec<_>>>()?;
    DenseIndex::new(docs)
}

pub fn dense_rankings(sys: &DenseSystem, vocab: &BaseVocabulary, queries: &[Query], k: usize) -> Result<Vec<Ranking>> {
    queries
        .par_iter()
        .map(|q| {
            let v = encode_dense_tokens(&sys.params, &tokenize(&q.text, vocab, sys.params.config.max_len))?;
            Ok(Ranking::new(
                q.query_id.clone(),
                search_dense_bruteforce(&sys.index, &v, k)?,
                k,
            ))
        })
        .collect()
}

/// Mean of one metric over the judged queries.
pub fn mean_metric(rankings: &[Ranking], qrels: &Qrels, metric: Metric) -> Result<f64> {
    let r = evaluate(&[("run".to_string(), rankings.to_vec())], qrels, &[metric])?;
    Ok(r.systems[0].means[0])
}

#[derive(Debug, Clone)]
pub struct PruningResult {
    pub stats: ExpansionStats,
    pub banned: BTreeSet<u32>,
    pub metric: Metric,
    pub before: f64,
    pub after: f64,
    /// Every pruned query's support is disjoint from `banned`.
    pub disjoint: bool,
    pub pruned_rankings: Vec<Ranking>,
}

impl PruningResult {
    pub fn delta(&self) -> f64 {
        self.after - self.before
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "metric\tbefore\tafter\tdelta\tbanned_terms\tdisjoint\n{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
            self.metric,
            self.before,
            self.after,
            self.delta(),
            self.banned.len(),
            self.disjoint
        )
    }
}

/// Expansion statistics on `queries`, then the same queries searched again
/// with the `top_n` most expanded terms removed at query time.
pub fn pruning_experiment(
    sys: &SparseSystem,
    vocab: &BaseVocabulary,
    queries: &[Query],
    qrels: &Qrels,
    top_n: usize,
    k: usize,
) -> Result<PruningResult> {
    let stats = expansion_stats(&sys.params, &sys.controller, vocab, queries, &sys.index)?;
    let banned = stats.top_terms(top_n);
    let encoded = encode_queries(&sys.params, &sys.controller, vocab, queries)?;
    let disjoint = encoded
        .iter()
        .map(|v| prune_query_terms(v, &banned))
        .all(|v| v.term_ids().all(|t| !banned.contains(&t)));
    let metric = Metric::Rr(10);
    let full = search_encoded(&sys.index, queries, &encoded, k, true, None)?;
    let pruned = search_encoded(&sys.index, queries, &encoded, k, true, Some(&banned))?;
    Ok(PruningResult {
        before: mean_metric(&full, qrels, metric)?,
        after: mean_metric(&pruned, qrels, metric)?,
        stats,
        banned,
        metric,
        disjoint,
        pruned_rankings: pruned,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    /// Row letter, `A`, `B`, ...
    pub row: String,
    pub system: String,
    /// Mean postings per document; `None` for BM25 and dense rows.
    pub doc_nnz: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
    /// Systems are named by row letter.
    pub eval: EvalReport,
    pub runs: Vec<(String, Vec<Ranking>)>,
}

fn row_letter(i: usize) -> String {
    let mut n = i;
    let mut s = Vec::new();
    loop {
        s.push(b'A' + (n % 26) as u8);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

impl MatrixReport {
    /// One row per system. A metric cell reads `0.1234 +A,C` when the row
    /// beats rows A and C with p ≤ 0.01.
    pub fn to_tsv(&self) -> String {
        let e = &self.eval;
        let mut out = String::from("row\tsystem");
        for m in &e.metrics {
            let _ = write!(out, "\t{m}");
        }
        out.push_str("\tdoc_nnz\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(out, "{}\t{}", r.row, r.system);
            for (mi, &m) in e.metrics.iter().enumerate() {
                let mean = e.systems[i].means[mi];
                let beats: Vec<&str> = (0..self.rows.len())
                    .filter(|&j| j != i && mean > e.systems[j].means[mi])
                    .filter(|&j| e.p_value(m, i, j).is_some_and(|p| p <= SIGNIFICANCE_LEVEL))
                    .map(|j| self.rows[j].row.as_str())
                    .collect();
                let _ = write!(out, "\t{mean:.4}");
                if !beats.is_empty() {
                    let _ = write!(out, " +{}", beats.join(","));
                }
            }
            match r.doc_nnz {
                Some(n) => {
                    let _ = writeln!(out, "\t{n:.2}");
                }
                None => out.push_str("\t-\n"),
            }
        }
        out
    }
}

/// Runs BM25, the dense baseline and one sparse system per configured
/// controller spec on the test queries, sharing `shared` across rows.
pub fn run_matrix(ds: &Dataset, shared: &Shared, cfg: &ExperimentConfig) -> Result<MatrixReport> {
    let k = cfg.search.k;
    let maxscore = cfg.search.strategy == "maxscore";
    let mut systems: Vec<(String, Option<f64>, Vec<Ranking>)> = Vec::new();
    if cfg.matrix.bm25 {
        let p = Bm25Params {
            k1: cfg.search.bm25_k1,
            b: cfg.search.bm25_b,
        };
        systems.push((
            "bm25".into(),
            None,
            bm25_rankings(&shared.bm25, &shared.vocab, &ds.test_queries, k, p)?,
        ));
    }
    if cfg.matrix.dense {
        log::info!("training dense baseline");
        let sys = train_dense(ds, shared, cfg)?;
        systems.push((
            "dense".into(),
            None,
            dense_rankings(&sys, &shared.vocab, &ds.test_queries, k)?,
        ));
    }
    for spec in &cfg.matrix.specs {
        let spec = ControllerSpec::parse(spec, cfg.seed)?;
        log::info!("training sparse system {}", spec.label());
        let controller = build_spec_controller(ds, shared, spec)?;
        let sys = train_sparse(ds, shared, controller, cfg)?;
        let runs = search_sparse(&sys, &shared.vocab, &ds.test_queries, k, maxscore)?;
        systems.push((sys.label.clone(), Some(sys.mean_doc_nnz()), runs));
    }
    let rows: Vec<MatrixRow> = systems
        .iter()
        .enumerate()
        .map(|(i, (name, nnz, _))| MatrixRow {
            row: row_letter(i),
            system: name.clone(),
            doc_nnz: *nnz,
        })
        .collect();
    let runs: Vec<(String, Vec<Ranking>)> = rows
        .iter()
        .zip(systems)
        .map(|(r, (_, _, rankings))| (r.row.clone(), rankings))
        .collect();
    let eval = evaluate(&runs, &ds.test_qrels, &cfg.metrics()?)?;
    Ok(MatrixReport { rows, eval, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_letters() {
        let l: Vec<String> = [0, 1, 12, 25, 26, 27].iter().map(|&i| row_letter(i)).collect();
        assert_eq!(l, ["A", "B", "M", "Z", "AA", "AB"]);
    }
}
