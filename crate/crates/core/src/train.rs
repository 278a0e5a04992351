//! Contrastive + FLOPS training for sparse encoders, and contrastive
//! training for the dense baseline.
//!
//! A batch holds `batch_size` queries and, per query, one positive followed
//! by `n_hard` mined negatives. Every query is scored against every
//! document in the batch, so each row of the score matrix has
//! `batch_size · (1 + n_hard)` candidates of which one is positive.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{term_ids, tokenize, BaseVocabulary, Corpus, Query, TokenSequence};
use crate::encoder::{ColumnSelection, EncoderKind, EncoderParams, LogitPass, PooledDim, SparseVector};
use crate::error::{LabError, Result};
use crate::eval::Qrels;
use crate::index::Bm25Index;
use crate::search::{search_bm25, Bm25Params};
use crate::vocab::VocabularyController;

/// Sequences per gradient partial; fixed so the reduction order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTriple {
    pub query_id: String,
    pub positive_doc_id: String,
    pub hard_negative_doc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_hard: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Stop after this many steps; 0 means no limit.
    pub max_steps: usize,
    pub lambda_q: f64,
    pub lambda_d: f64,
    pub warmup_steps: usize,
    /// BM25 depth for hard-negative mining.
    pub mining_depth: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            n_hard: 7,
            learning_rate: 1e-2,
            momentum: 0.9,
            epochs: 3,
            max_steps: 0,
            lambda_q: 1e-3,
            lambda_d: 1e-3,
            warmup_steps: 100,
            mining_depth: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(LabError::config(field, msg));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must be in [0, 1)");
        }
        if !(self.lambda_q.is_finite() && self.lambda_q >= 0.0) {
            return bad("lambda_q", "must be nonnegative");
        }
        if !(self.lambda_d.is_finite() && self.lambda_d >= 0.0) {
            return bad("lambda_d", "must be nonnegative");
        }
        if self.mining_depth < self.n_hard {
            return bad("mining_depth", "must be at least n_hard");
        }
        Ok(())
    }

    pub fn candidates_per_query(&self) -> usize {
        self.batch_size * (1 + self.n_hard)
    }

    pub fn negatives_per_query(&self) -> usize {
        self.candidates_per_query() - 1
    }
}

/// `λ · min(1, (step / warmup)²)`, with zero-based steps.
pub fn lambda_schedule(lambda: f64, warmup_steps: usize, step: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        lambda
    } else {
        let r = step as f64 / warmup_steps as f64;
        lambda * r * r
    }
}

/// Queries plus their documents, flattened as `batch_size` groups of one
/// positive followed by `n_hard` negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub queries: Vec<TokenSequence>,
    pub docs: Vec<TokenSequence>,
    pub n_hard: usize,
}

impl Batch {
    pub fn new(queries: Vec<TokenSequence>, docs: Vec<TokenSequence>, n_hard: usize) -> Result<Self> {
        if queries.is_empty() {
            return Err(LabError::InvalidConfig("empty batch".into()));
        }
        if docs.len() != queries.len() * (1 + n_hard) {
            return Err(LabError::DimensionMismatch {
                expected: queries.len() * (1 + n_hard),
                got: docs.len(),
            });
        }
        Ok(Self { queries, docs, n_hard })
    }

    pub fn batch_size(&self) -> usize {
        self.queries.len()
    }

    pub fn group(&self) -> usize {
        1 + self.n_hard
    }

    /// Column of query `b`'s positive in the score matrix.
    pub fn positive_index(&self, b: usize) -> usize {
        b * self.group()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.batch_size()).map(|b| self.positive_index(b)).collect()
    }

    pub fn candidates_per_query(&self) -> usize {
        self.docs.len()
    }

    pub fn negatives_per_query(&self) -> usize {
        self.docs.len() - 1
    }
}

/// Resolves triples into token sequences.
pub struct BatchBuilder<'a> {
    corpus: &'a Corpus,
    doc_index: HashMap<&'a str, usize>,
    queries: HashMap<&'a str, &'a str>,
    vocab: &'a BaseVocabulary,
    max_len: usize,
}

impl<'a> BatchBuilder<'a> {
    pub fn new(corpus: &'a Corpus, queries: &'a [Query], vocab: &'a BaseVocabulary, max_len: usize) -> Self {
        Self {
            corpus,
            doc_index: corpus.id_index(),
            queries: queries.iter().map(|q| (q.query_id.as_str(), q.text.as_str())).collect(),
            vocab,
            max_len,
        }
    }

    fn doc(&self, id: &str) -> Result<TokenSequence> {
        let i = *self
            .doc_index
            .get(id)
            .ok_or_else(|| LabError::InvalidConfig(format!("unknown doc_id '{id}' in triple")))?;
        Ok(tokenize(&self.corpus.visible_text(i), self.vocab, self.max_len))
    }

    pub fn build(&self, triples: &[&TrainingTriple], n_hard: usize) -> Result<Batch> {
        let mut queries = Vec::with_capacity(triples.len());
        let mut docs = Vec::with_capacity(triples.len() * (1 + n_hard));
        for t in triples {
            let text = self
                .queries
                .get(t.query_id.as_str())
                .ok_or_else(|| LabError::InvalidConfig(format!("unknown query_id '{}' in triple", t.query_id)))?;
            if t.hard_negative_doc_ids.len() < n_hard {
                return Err(LabError::Shortfall {
                    kind: "hard negatives".into(),
                    requested: n_hard,
                    available: t.hard_negative_doc_ids.len(),
                });
            }
            queries.push(tokenize(text, self.vocab, self.max_len));
            docs.push(self.doc(&t.positive_doc_id)?);
            for n in &t.hard_negative_doc_ids[..n_hard] {
                docs.push(self.doc(n)?);
            }
        }
        Batch::new(queries, docs, n_hard)
    }
}

/// One triple per query with a relevant document: a seeded choice of
/// positive and `n_hard` negatives sampled without replacement from the
/// BM25 top-`depth` minus the judged positives. Queries with too few
/// candidates are skipped.
pub fn mine_hard_negatives(
    bm25: &Bm25Index,
    vocab: &BaseVocabulary,
    queries: &[Query],
    qrels: &Qrels,
    depth: usize,
    n_hard: usize,
    seed: u64,
) -> Result<Vec<TrainingTriple>> {
    if depth == 0 {
        return Err(LabError::InvalidK);
    }
    let judged: Vec<&Query> = queries
        .iter()
        .filter(|q| !qrels.relevant_docs(&q.query_id).is_empty())
        .collect();
    if judged.is_empty() {
        return Err(LabError::NoJudgedQueries);
    }
    let hits: Vec<Vec<String>> = judged
        .par_iter()
        .map(|q| {
            let terms: Vec<u32> = term_ids(&q.text, vocab)
                .into_iter()
                .filter(|&t| !BaseVocabulary::is_special(t))
                .collect();
            search_bm25(bm25, &terms, depth, Bm25Params::default()).map(|h| h.into_iter().map(|h| h.doc_id).collect())
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(judged.len());
    let mut skipped = 0;
    for (q, hits) in judged.iter().zip(hits) {
        let positives = qrels.relevant_docs(&q.query_id);
        let candidates: Vec<String> = hits
            .into_iter()
            .filter(|d| !qrels.is_relevant(&q.query_id, d))
            .collect();
        if candidates.len() < n_hard {
            log::info!(
                "query {}: {} negative candidates < n_hard={}; skipped",
                q.query_id,
                candidates.len(),
                n_hard
            );
            skipped += 1;
            continue;
        }
        let pos = positives[rand::Rng::random_range(&mut rng, 0..positives.len())];
        let negs = rand::seq::index::sample(&mut rng, candidates.len(), n_hard)
            .into_iter()
            .map(|i| candidates[i].clone())
            .collect();
        out.push(TrainingTriple {
            query_id: q.query_id.clone(),
            positive_doc_id: pos.to_string(),
            hard_negative_doc_ids: negs,
        });
    }
    if skipped > 0 {
        log::warn!(
            "{skipped} of {} judged queries skipped for lack of negatives",
            judged.len()
        );
    }
    Ok(out)
}

pub fn write_triples(path: &Path, triples: &[TrainingTriple]) -> Result<()> {
    let mut out = String::new();
    for t in triples {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            t.query_id,
            t.positive_doc_id,
            t.hard_negative_doc_ids.join(",")
        );
    }
    fs::write(path, out).map_err(|e| LabError::io(path, e))
}

pub fn read_triples(path: &Path) -> Result<Vec<TrainingTriple>> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(LabError::parse(path, n + 1, "expected query_id, positive, negatives"));
            }
            let negs: Vec<String> = f[2].split(',').filter(|s| !s.is_empty()).map(String::from).collect();
            if negs.iter().any(|n| n == f[1]) {
                return Err(LabError::parse(path, n + 1, "positive listed among negatives"));
            }
            Ok(TrainingTriple {
                query_id: f[0].to_string(),
                positive_doc_id: f[1].to_string(),
                hard_negative_doc_ids: negs,
            })
        })
        .collect()
}

fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = row.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean over rows of `−log softmax(row)[positive]`.
pub fn contrastive_loss(scores: &Array2<f64>, positive: &[usize]) -> f64 {
    contrastive_loss_grad(scores, positive).0
}

/// Loss and its gradient with respect to `scores`.
pub fn contrastive_loss_grad(scores: &Array2<f64>, positive: &[usize]) -> (f64, Array2<f64>) {
    let b = scores.nrows() as f64;
    let mut grad = Array2::zeros(scores.dim());
    let mut loss = 0.0;
    for (i, row) in scores.rows().into_iter().enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[positive[i]];
        for (j, &s) in row.iter().enumerate() {
            grad[(i, j)] = (s - lse).exp() / b;
        }
        grad[(i, positive[i])] -= 1.0 / b;
    }
    (loss / b, grad)
}

/// Per-dimension batch means over the allowed dims.
fn dim_means(reps: &[SparseVector], mask: &[bool]) -> Vec<f64> {
    let mut m = vec![0.0; mask.len()];
    if reps.is_empty() {
        return m;
    }
    for r in reps {
        for (t, w) in r.iter() {
            if let Some(slot) = m.get_mut(t as usize) {
                *slot += w;
            }
        }
    }
    let n = reps.len() as f64;
    for (v, &allowed) in m.iter_mut().zip(mask) {
        *v = if allowed { *v / n } else { 0.0 };
    }
    m
}

/// `Σ_j (mean_b w_j)²` over the allowed dims.
pub fn flops_loss(reps: &[SparseVector], mask: &[bool]) -> f64 {
    dim_means(reps, mask).iter().map(|m| m * m).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub contrastive: f64,
    pub flops_q: f64,
    pub flops_d: f64,
    pub total: f64,
    pub nnz_q: f64,
    pub nnz_d: f64,
}

struct SparseSeq {
    pass: LogitPass,
    pooled: Vec<PooledDim>,
    rep: SparseVector,
}

fn forward_sparse(params: &EncoderParams, sel: &ColumnSelection, tokens: &TokenSequence) -> Result<SparseSeq> {
    let pass = params.forward_selected(tokens, sel)?;
    let pooled = pass.pooled(&[]);
    let rep = SparseVector::from_pairs(pooled.iter().map(|p| (p.dim, p.logit.ln_1p())), tokens.len());
    Ok(SparseSeq { pass, pooled, rep })
}

fn sparse_dot_matrix(q: &[SparseVector], d: &[SparseVector]) -> Array2<f64> {
    Array2::from_shape_fn((q.len(), d.len()), |(i, j)| crate::encoder::score(&q[i], &d[j]))
}

/// Sums per-item gradients in fixed-size chunks, then the chunk partials in
/// order.
fn reduce_grads<T: Sync>(
    params: &EncoderParams,
    items: &[T],
    f: impl Fn(usize, &T, &mut EncoderParams) + Sync,
) -> EncoderParams {
    let partials: Vec<EncoderParams> = items
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = params.zeros_like();
            for (k, item) in chunk.iter().enumerate() {
                f(c * GRAD_CHUNK + k, item, &mut g);
            }
            g
        })
        .collect();
    let mut total = params.zeros_like();
    for p in &partials {
        total.add_assign(p);
    }
    total
}

fn sparse_objective(
    params: &EncoderParams,
    mask: &[bool],
    batch: &Batch,
    lambda_q: f64,
    lambda_d: f64,
    want_grad: bool,
) -> Result<(LossParts, Option<EncoderParams>)> {
    let seqs: Vec<&TokenSequence> = batch.queries.iter().chain(&batch.docs).collect();
    let sel = ColumnSelection::new(params, mask)?;
    let fwd: Vec<SparseSeq> = seqs
        .par_iter()
        .map(|t| forward_sparse(params, &sel, t))
        .collect::<Result<_>>()?;
    let nq = batch.batch_size();
    let (qf, df) = fwd.split_at(nq);
    let qv: Vec<SparseVector> = qf.iter().map(|s| s.rep.clone()).collect();
    let dv: Vec<SparseVector> = df.iter().map(|s| s.rep.clone()).collect();
    let scores = sparse_dot_matrix(&qv, &dv);
    let (contrastive, ds) = contrastive_loss_grad(&scores, &batch.positive_indices());
    let mq = dim_means(&qv, mask);
    let md = dim_means(&dv, mask);
    let flops_q: f64 = mq.iter().map(|m| m * m).sum();
    let flops_d: f64 = md.iter().map(|m| m * m).sum();
    let parts = LossParts {
        contrastive,
        flops_q,
        flops_d,
        total: contrastive + lambda_q * flops_q + lambda_d * flops_d,
        nnz_q: qv.iter().map(SparseVector::len).sum::<usize>() as f64 / nq as f64,
        nnz_d: dv.iter().map(SparseVector::len).sum::<usize>() as f64 / dv.len() as f64,
    };
    if !want_grad {
        return Ok((parts, None));
    }
    let nd = dv.len();
    let grads = reduce_grads(params, &fwd, |i, seq, g| {
        // dL/dw_j for each pooled dim of this sequence
        let dlogits: Vec<(usize, u32, f64)> = seq
            .pooled
            .iter()
            .map(|p| {
                let j = p.dim as usize;
                let dw = if i < nq {
                    let s: f64 = (0..nd).map(|c| ds[(i, c)] * dv[c].get(p.dim).unwrap_or(0.0)).sum();
                    s + lambda_q * 2.0 * mq[j] / nq as f64
                } else {
                    let c = i - nq;
                    let s: f64 = (0..nq).map(|b| ds[(b, c)] * qv[b].get(p.dim).unwrap_or(0.0)).sum();
                    s + lambda_d * 2.0 * md[j] / nd as f64
                };
                (p.row, p.dim, dw / (1.0 + p.logit))
            })
            .filter(|&(_, _, v)| v != 0.0)
            .collect();
        if !dlogits.is_empty() {
            seq.pass.backward_sparse(params, g, &dlogits);
        }
    });
    Ok((parts, Some(grads)))
}

fn dense_objective(
    params: &EncoderParams,
    batch: &Batch,
    want_grad: bool,
) -> Result<(LossParts, Option<EncoderParams>)> {
    let seqs: Vec<&TokenSequence> = batch.queries.iter().chain(&batch.docs).collect();
    let fwd: Vec<_> = seqs
        .par_iter()
        .map(|t| params.forward_hidden(t))
        .collect::<Result<_>>()?;
    let nq = batch.batch_size();
    let d = params.config.d_model;
    let cls: Vec<ndarray::ArrayView1<f64>> = fwd.iter().map(|p| p.hidden().row(0)).collect();
    let nd = seqs.len() - nq;
    let scores = Array2::from_shape_fn((nq, nd), |(i, j)| cls[i].dot(&cls[nq + j]));
    let (contrastive, ds) = contrastive_loss_grad(&scores, &batch.positive_indices());
    let parts = LossParts {
        contrastive,
        total: contrastive,
        nnz_q: d as f64,
        nnz_d: d as f64,
        ..Default::default()
    };
    if !want_grad {
        return Ok((parts, None));
    }
    let grads = reduce_grads(params, &fwd, |i, pass, g| {
        let mut dh = Array2::zeros(pass.hidden().dim());
        let mut row = dh.row_mut(0);
        if i < nq {
            for c in 0..nd {
                row.scaled_add(ds[(i, c)], &cls[nq + c]);
            }
        } else {
            for b in 0..nq {
                row.scaled_add(ds[(b, i - nq)], &cls[b]);
            }
        }
        pass.backward(params, g, dh);
    });
    Ok((parts, Some(grads)))
}

/// Total loss `contrastive + λ_q·FLOPS(q) + λ_d·FLOPS(d)` on one batch.
/// `mask` is required for sparse encoders and ignored for dense ones.
pub fn batch_loss(
    params: &EncoderParams,
    mask: Option<&[bool]>,
    batch: &Batch,
    lambda_q: f64,
    lambda_d: f64,
) -> Result<LossParts> {
    Ok(objective(params, mask, batch, lambda_q, lambda_d, false)?.0)
}

/// [`batch_loss`] plus its gradient with respect to every parameter.
pub fn batch_gradient(
    params: &EncoderParams,
    mask: Option<&[bool]>,
    batch: &Batch,
    lambda_q: f64,
    lambda_d: f64,
) -> Result<(LossParts, EncoderParams)> {
    let (parts, g) = objective(params, mask, batch, lambda_q, lambda_d, true)?;
    Ok((parts, g.expect("gradient requested")))
}

fn objective(
    params: &EncoderParams,
    mask: Option<&[bool]>,
    batch: &Batch,
    lambda_q: f64,
    lambda_d: f64,
    want_grad: bool,
) -> Result<(LossParts, Option<EncoderParams>)> {
    match params.meta.kind {
        EncoderKind::Dense => dense_objective(params, batch, want_grad),
        EncoderKind::Sparse => {
            let mask = mask.ok_or_else(|| LabError::InvalidConfig("sparse training needs a controller mask".into()))?;
            if mask.len() != params.meta.output_dim {
                return Err(LabError::DimensionMismatch {
                    expected: params.meta.output_dim,
                    got: mask.len(),
                });
            }
            sparse_objective(params, mask, batch, lambda_q, lambda_d, want_grad)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub contrastive: f64,
    pub flops_q: f64,
    pub flops_d: f64,
    pub nnz_mean: f64,
    pub nnz_q: f64,
    pub lambda_q: f64,
    pub lambda_d: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepReport>,
}

impl TrainingLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tcontrastive\tflops_q\tflops_d\tnnz_mean\tlambda_q\tlambda_d\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\t{:.3e}\t{:.3e}",
                s.step, s.contrastive, s.flops_q, s.flops_d, s.nnz_mean, s.lambda_q, s.lambda_d
            );
        }
        out
    }
}

/// Owns the parameters and momentum buffer during training.
pub struct Trainer {
    pub params: EncoderParams,
    velocity: EncoderParams,
    pub step: usize,
    pub config: TrainConfig,
    mask: Option<Vec<bool>>,
}

impl Trainer {
    pub fn new(params: EncoderParams, controller: Option<&VocabularyController>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mask = match (params.meta.kind, controller) {
            (EncoderKind::Dense, _) => None,
            (EncoderKind::Sparse, Some(c)) => {
                if c.output_dim != params.meta.output_dim {
                    return Err(LabError::DimensionMismatch {
                        expected: params.meta.output_dim,
                        got: c.output_dim,
                    });
                }
                Some(c.allowed_mask())
            }
            (EncoderKind::Sparse, None) => {
                return Err(LabError::InvalidConfig("sparse training needs a controller".into()))
            }
        };
        Ok(Self {
            velocity: params.zeros_like(),
            params,
            step: 0,
            config,
            mask,
        })
    }

    pub fn lambdas(&self) -> (f64, f64) {
        let c = &self.config;
        (
            lambda_schedule(c.lambda_q, c.warmup_steps, self.step),
            lambda_schedule(c.lambda_d, c.warmup_steps, self.step),
        )
    }

    /// One momentum-SGD update on the batch's total loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let (lq, ld) = self.lambdas();
        let (parts, grads) = batch_gradient(&self.params, self.mask.as_deref(), batch, lq, ld)?;
        if !parts.total.is_finite() {
            return Err(LabError::NonFiniteLoss {
                step: self.step,
                contrastive: parts.contrastive,
                flops_q: parts.flops_q,
                flops_d: parts.flops_d,
            });
        }
        let (lr, mu) = (self.config.learning_rate, self.config.momentum);
        self.velocity.zip_mut(&grads, |v, g| {
            v.zip_mut_with(g, |v, &g| *v = mu * *v + g);
        });
        self.params.zip_mut(&self.velocity, |p, v| p.scaled_add(-lr, v));
        let report = StepReport {
            step: self.step,
            contrastive: parts.contrastive,
            flops_q: parts.flops_q,
            flops_d: parts.flops_d,
            nnz_mean: parts.nnz_d,
            nnz_q: parts.nnz_q,
            lambda_q: lq,
            lambda_d: ld,
        };
        self.step += 1;
        Ok(report)
    }
}

/// Epochs over seeded shuffles of `triples`, in full batches only.
pub fn train(
    params: EncoderParams,
    controller: Option<&VocabularyController>,
    triples: &[TrainingTriple],
    builder: &BatchBuilder<'_>,
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainingLog)> {
    let mut trainer = Trainer::new(params, controller, config.clone())?;
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        return Ok((trainer.params, log));
    }
    let usable: Vec<&TrainingTriple> = triples
        .iter()
        .filter(|t| t.hard_negative_doc_ids.len() >= config.n_hard)
        .collect();
    if usable.len() < config.batch_size {
        return Err(LabError::Shortfall {
            kind: "training triples".into(),
            requested: config.batch_size,
            available: usable.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    'outer: for epoch in 0..config.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(config.batch_size) {
            if config.max_steps > 0 && trainer.step >= config.max_steps {
                break 'outer;
            }
            let batch = builder.build(chunk, config.n_hard)?;
            let r = trainer.train_step(&batch)?;
            if r.step % 50 == 0 {
                log::info!(
                    "epoch {epoch} step {}: contrastive {:.4} flops_d {:.4} nnz {:.1}",
                    r.step,
                    r.contrastive,
                    r.flops_d,
                    r.nnz_mean
                );
            }
            log.steps.push(r);
        }
    }
    Ok((trainer.params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{token_frequencies, train_tokenizer};
    use crate::encoder::EncoderConfig;
    use crate::index::build_bm25_index;
    use crate::vocab::{build_controller, default_stoplist, ControllerSpec};

    #[test]
    fn flops_examples() {
        let mask = vec![true; 4];
        let one = SparseVector::from_pairs([(0, 1.0), (1, 2.0)], 0);
        assert_eq!(flops_loss(&[one.clone()], &mask), 5.0);
        let a = SparseVector::from_pairs([(0, 1.0)], 0);
        assert_eq!(flops_loss(&[a, one], &mask), 2.0);
        assert_eq!(
            flops_loss(&[SparseVector::default(), SparseVector::default()], &mask),
            0.0
        );
        let masked = SparseVector::from_pairs([(0, 1.0), (3, 5.0)], 0);
        assert_eq!(flops_loss(&[masked], &[true, true, true, false]), 1.0);
    }

    #[test]
    fn contrastive_examples() {
        let eq = Array2::from_elem((8, 64), 0.3);
        let pos: Vec<usize> = (0..8).map(|b| b * 8).collect();
        assert!((contrastive_loss(&eq, &pos) - 64f64.ln()).abs() < 1e-12);
        let mut peaked = Array2::zeros((2, 4));
        peaked[(0, 0)] = 800.0;
        peaked[(1, 2)] = 800.0;
        let l = contrastive_loss(&peaked, &[0, 2]);
        assert!(l.is_finite() && l < 1e-300);
        let (_, g) = contrastive_loss_grad(&eq, &pos);
        for row in g.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn negatives_per_sample() {
        let c = TrainConfig::default();
        assert_eq!(c.candidates_per_query(), 64);
        assert_eq!(c.negatives_per_query(), 63);
    }

    #[test]
    fn warmup_is_quadratic() {
        assert_eq!(lambda_schedule(1.0, 10, 0), 0.0);
        assert_eq!(lambda_schedule(1.0, 10, 5), 0.25);
        assert_eq!(lambda_schedule(1.0, 10, 10), 1.0);
        assert_eq!(lambda_schedule(1.0, 10, 99), 1.0);
        assert_eq!(lambda_schedule(0.5, 0, 0), 0.5);
    }

    struct Toy {
        corpus: Corpus,
        queries: Vec<Query>,
        qrels: Qrels,
        vocab: BaseVocabulary,
        controller: VocabularyController,
    }

    fn toy() -> Toy {
        let words = ["apple", "pear", "plum", "fig", "kiwi", "lime", "date", "yam"];
        let texts: Vec<String> = (0..24)
            .map(|i| {
                format!(
                    "the {} and {} of a {}",
                    words[i % 8],
                    words[(i / 3) % 8],
                    words[(i * 5) % 8]
                )
            })
            .collect();
        let corpus = Corpus::from_texts(&texts);
        let vocab = train_tokenizer(&corpus, 100, 1).unwrap();
        let freq = token_frequencies(&corpus, &vocab);
        let controller = build_controller(ControllerSpec::full(), &vocab, &freq, &default_stoplist()).unwrap();
        let mut qrels = Qrels::default();
        let queries: Vec<Query> = (0..6)
            .map(|i| {
                qrels.insert(&format!("q{i}"), &format!("d{}", i * 3), 1);
                Query {
                    query_id: format!("q{i}"),
                    text: format!("{} {}", words[(i * 3) % 8], words[i % 8]),
                }
            })
            .collect();
        Toy {
            corpus,
            queries,
            qrels,
            vocab,
            controller,
        }
    }

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            tie_embeddings: true,
        }
    }

    #[test]
    fn mining_is_seeded_and_excludes_positives() {
        let t = toy();
        let bm25 = build_bm25_index(&t.corpus, &t.vocab).unwrap();
        let a = mine_hard_negatives(&bm25, &t.vocab, &t.queries, &t.qrels, 200, 3, 5).unwrap();
        let b = mine_hard_negatives(&bm25, &t.vocab, &t.queries, &t.qrels, 200, 3, 5).unwrap();
        assert_eq!(a, b);
        for tr in &a {
            assert_eq!(tr.hard_negative_doc_ids.len(), 3);
            assert!(!tr.hard_negative_doc_ids.contains(&tr.positive_doc_id));
        }
        // too few candidates: every query skipped
        let none = mine_hard_negatives(&bm25, &t.vocab, &t.queries, &t.qrels, 2, 3, 5).unwrap();
        assert!(none.is_empty());
        assert!(matches!(
            mine_hard_negatives(&bm25, &t.vocab, &t.queries, &Qrels::default(), 200, 3, 5),
            Err(LabError::NoJudgedQueries)
        ));
    }

    #[test]
    fn triples_file_round_trip() {
        let t = toy();
        let bm25 = build_bm25_index(&t.corpus, &t.vocab).unwrap();
        let tr = mine_hard_negatives(&bm25, &t.vocab, &t.queries, &t.qrels, 200, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("triples.tsv");
        write_triples(&p, &tr).unwrap();
        assert_eq!(read_triples(&p).unwrap(), tr);
    }

    #[test]
    fn step_descends_and_is_deterministic() {
        let t = toy();
        let bm25 = build_bm25_index(&t.corpus, &t.vocab).unwrap();
        let tr = mine_hard_negatives(&bm25, &t.vocab, &t.queries, &t.qrels, 200, 2, 1).unwrap();
        let builder = BatchBuilder::new(&t.corpus, &t.queries, &t.vocab, 16);
        let refs: Vec<&TrainingTriple> = tr.iter().take(4).collect();
        let batch = builder.build(&refs, 2).unwrap();
        assert_eq!(batch.negatives_per_query(), 4 * 3 - 1);
        let p0 = EncoderParams::init_sparse(tiny_config(), &t.controller, 3).unwrap();
        let mask = t.controller.allowed_mask();
        let before = batch_loss(&p0, Some(&mask), &batch, 0.01, 0.01).unwrap().total;
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.0,
            warmup_steps: 0,
            lambda_q: 0.01,
            lambda_d: 0.01,
            ..Default::default()
        };
        let mut a = Trainer::new(p0.clone(), Some(&t.controller), cfg.clone()).unwrap();
        let mut b = Trainer::new(p0.clone(), Some(&t.controller), cfg).unwrap();
        a.train_step(&batch).unwrap();
        b.train_step(&batch).unwrap();
        assert_eq!(a.params, b.params);
        let after = batch_loss(&a.params, Some(&mask), &batch, 0.01, 0.01).unwrap().total;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn zero_lambda_step_is_pure_contrastive() {
        let t = toy();
        let bm25 = build_bm25_index(&t.corpus, &t.vocab).unwrap();
        let tr = mine_hard_negatives(&bm25, &t.vocab, &t.queries, &t.qrels, 200, 1, 1).unwrap();
        let builder = BatchBuilder::new(&t.corpus, &t.queries, &t.vocab, 16);
        let refs: Vec<&TrainingTriple> = tr.iter().take(3).collect();
        let batch = builder.build(&refs, 1).unwrap();
        let p = EncoderParams::init_sparse(tiny_config(), &t.controller, 3).unwrap();
        let mask = t.controller.allowed_mask();
        let (parts, g) = batch_gradient(&p, Some(&mask), &batch, 0.0, 0.0).unwrap();
        assert_eq!(parts.total, parts.contrastive);
        let (_, g2) = batch_gradient(&p, Some(&mask), &batch, 0.0, 0.0).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let t = toy();
        let bm25 = build_bm25_index(&t.corpus, &t.vocab).unwrap();
        let tr = mine_hard_negatives(&bm25, &t.vocab, &t.queries, &t.qrels, 200, 1, 1).unwrap();
        let builder = BatchBuilder::new(&t.corpus, &t.queries, &t.vocab, 16);
        let p = EncoderParams::init_sparse(tiny_config(), &t.controller, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            n_hard: 1,
            ..Default::default()
        };
        let (out, log) = train(p.clone(), Some(&t.controller), &tr, &builder, &cfg).unwrap();
        assert_eq!(out, p);
        assert!(log.is_empty());

        let cfg = TrainConfig {
            epochs: 2,
            n_hard: 1,
            batch_size: 2,
            max_steps: 4,
            ..Default::default()
        };
        let (_, log) = train(p, Some(&t.controller), &tr, &builder, &cfg).unwrap();
        assert_eq!(log.len(), 4);
        assert_eq!(log.to_tsv().lines().count(), 5);
    }

    #[test]
    fn dense_training_runs() {
        let t = toy();
        let bm25 = build_bm25_index(&t.corpus, &t.vocab).unwrap();
        let tr = mine_hard_negatives(&bm25, &t.vocab, &t.queries, &t.qrels, 200, 1, 1).unwrap();
        let builder = BatchBuilder::new(&t.corpus, &t.queries, &t.vocab, 16);
        let p = EncoderParams::init_dense(tiny_config(), t.vocab.len(), 3).unwrap();
        let cfg = TrainConfig {
            n_hard: 1,
            batch_size: 3,
            epochs: 1,
            ..Default::default()
        };
        let (out, log) = train(p.clone(), None, &tr, &builder, &cfg).unwrap();
        assert_eq!(log.len(), 2);
        assert_ne!(out, p);
        assert!(out.is_finite());
    }
}
