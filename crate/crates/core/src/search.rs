//! Top-k retrieval over the impact index, plus BM25 and dense baselines.
//!
//! Sparse scoring runs in integer space. Document impacts are the stored
//! 8-bit levels; query weights are truncated to fixed point with
//! [`QUERY_FRAC_BITS`] fractional bits. Every score is an exact integer, so
//! exhaustive DAAT, MaxScore and a brute-force loop agree bit for bit,
//! including tie order. Reported scores are `int · scale / 2^QUERY_FRAC_BITS`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::encoder::{DenseVector, SparseVector};
use crate::error::{LabError, Result};
use crate::index::{Bm25Index, InvertedIndex, PostingsList};

pub const QUERY_FRAC_BITS: u32 = 32;
pub const DEFAULT_K: usize = 1000;
pub const BM25_K1: f64 = 0.82;
pub const BM25_B: f64 = 0.68;

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub query_id: String,
    pub hits: Vec<Hit>,
    pub k: usize,
}

impl Ranking {
    pub fn new(query_id: impl Into<String>, hits: Vec<Hit>, k: usize) -> Self {
        Self {
            query_id: query_id.into(),
            hits,
            k,
        }
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.doc_id.as_str())
    }
}

/// Fixed-point query weight, truncated toward zero.
pub fn query_fixed(weight: f64) -> u64 {
    let scaled = (weight * (1u64 << QUERY_FRAC_BITS) as f64).floor();
    if scaled <= 0.0 {
        0
    } else {
        // Saturates for absurdly large weights.
        scaled as u64
    }
}

fn report_score(int_score: u128, scale: f64) -> f64 {
    int_score as f64 * scale / (1u64 << QUERY_FRAC_BITS) as f64
}

/// Entry ordered so that the heap's maximum is the current worst hit:
/// lower score first, then higher key.
struct Worst<S> {
    score: S,
    key: u32,
}

impl<S: PartialOrd> PartialEq for Worst<S> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<S: PartialOrd> Eq for Worst<S> {}

impl<S: PartialOrd> PartialOrd for Worst<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<S: PartialOrd> Ord for Worst<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .partial_cmp(&self.score)
            .unwrap_or(Ordering::Equal)
            .then(self.key.cmp(&other.key))
    }
}

/// Bounded top-k by (score desc, key asc).
struct TopK<S> {
    k: usize,
    heap: BinaryHeap<Worst<S>>,
}

impl<S: PartialOrd + Copy> TopK<S> {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn is_full(&self) -> bool {
        self.heap.len() >= self.k
    }

    fn threshold(&self) -> Option<S> {
        if self.is_full() {
            self.heap.peek().map(|w| w.score)
        } else {
            None
        }
    }

    fn offer(&mut self, score: S, key: u32) {
        let cand = Worst { score, key };
        if !self.is_full() {
            self.heap.push(cand);
        } else if let Some(worst) = self.heap.peek() {
            if cand < *worst {
                self.heap.pop();
                self.heap.push(cand);
            }
        }
    }

    fn into_sorted(self) -> Vec<(S, u32)> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|w| (w.score, w.key))
            .collect()
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(LabError::InvalidK)
    } else {
        Ok(())
    }
}

struct QueryTerm<'a> {
    list: &'a PostingsList,
    weight: u64,
    upper: u128,
}

fn query_terms<'a>(index: &'a InvertedIndex, q: &SparseVector) -> Vec<QueryTerm<'a>> {
    q.iter()
        .filter_map(|(t, w)| {
            let list = index.list(t)?;
            let weight = query_fixed(w);
            (weight > 0).then(|| QueryTerm {
                list,
                weight,
                upper: weight as u128 * list.max_level as u128,
            })
        })
        .collect()
}

fn to_hits(index: &InvertedIndex, top: TopK<u128>) -> Vec<Hit> {
    top.into_sorted()
        .into_iter()
        .map(|(s, ord)| Hit {
            doc_id: index.doc_id(ord).to_string(),
            score: report_score(s, index.quant_scale),
        })
        .collect()
}

/// Exact top-k, document-at-a-time over the union of the query's lists.
/// Only documents sharing at least one term with the query are returned.
pub fn search_exhaustive(index: &InvertedIndex, q: &SparseVector, k: usize) -> Result<Vec<Hit>> {
    check_k(k)?;
    let terms = query_terms(index, q);
    let mut pos = vec![0usize; terms.len()];
    let mut top = TopK::new(k);
    loop {
        let Some(doc) = terms
            .iter()
            .zip(&pos)
            .filter_map(|(t, &p)| t.list.ordinals.get(p).copied())
            .min()
        else {
            break;
        };
        let mut s: u128 = 0;
        for (t, p) in terms.iter().zip(pos.iter_mut()) {
            if t.list.ordinals.get(*p) == Some(&doc) {
                s += t.weight as u128 * t.list.levels[*p] as u128;
                *p += 1;
            }
        }
        top.offer(s, doc);
    }
    Ok(to_hits(index, top))
}

/// MaxScore: lists sorted by upper bound; the cheapest prefix whose bounds
/// sum to at most the current threshold is non-essential and only probed
/// for candidates found in the essential lists. Returns exactly what
/// [`search_exhaustive`] returns.
pub fn search_maxscore(index: &InvertedIndex, q: &SparseVector, k: usize) -> Result<Vec<Hit>> {
    check_k(k)?;
    let mut terms = query_terms(index, q);
    terms.sort_by(|a, b| a.upper.cmp(&b.upper).then(a.list.term_id.cmp(&b.list.term_id)));
    let n = terms.len();
    // prefix[i] = sum of upper bounds of terms[..i]
    let mut prefix = vec![0u128; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + terms[i].upper;
    }
    let mut pos = vec![0usize; n];
    let mut top = TopK::new(k);
    let mut essential_from = 0usize;

    loop {
        let Some(doc) = (essential_from..n)
            .filter_map(|i| terms[i].list.ordinals.get(pos[i]).copied())
            .min()
        else {
            break;
        };
        let mut s: u128 = 0;
        for i in essential_from..n {
            let list = terms[i].list;
            if list.ordinals.get(pos[i]) == Some(&doc) {
                s += terms[i].weight as u128 * list.levels[pos[i]] as u128;
                pos[i] += 1;
            }
        }
        let theta = top.threshold();
        let mut viable = true;
        for i in (0..essential_from).rev() {
            if let Some(th) = theta {
                if s + prefix[i + 1] <= th {
                    viable = false;
                    break;
                }
            }
            let list = terms[i].list;
            let ords = &list.ordinals[pos[i]..];
            let skip = ords.partition_point(|&o| o < doc);
            pos[i] += skip;
            if list.ordinals.get(pos[i]) == Some(&doc) {
                s += terms[i].weight as u128 * list.levels[pos[i]] as u128;
            }
        }
        if !viable || s == 0 {
            continue;
        }
        if theta.is_none_or(|th| s > th) {
            top.offer(s, doc);
            if let Some(th) = top.threshold() {
                while essential_from < n && prefix[essential_from + 1] <= th {
                    essential_from += 1;
                }
            }
        }
    }
    Ok(to_hits(index, top))
}

/// Integer score of one document for `q`, by direct lookup. Used by tools
/// that need the exact value without a full search.
pub fn score_document(index: &InvertedIndex, q: &SparseVector, ordinal: u32) -> f64 {
    let mut s: u128 = 0;
    for t in query_terms(index, q) {
        if let Ok(p) = t.list.ordinals.binary_search(&ordinal) {
            s += t.weight as u128 * t.list.levels[p] as u128;
        }
    }
    report_score(s, index.quant_scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: BM25_K1, b: BM25_B }
    }
}

pub fn bm25_idf(doc_count: usize, df: u32) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// BM25 over term ids; repeated query terms count once per occurrence.
/// Only documents matching some query term are returned.
pub fn search_bm25(index: &Bm25Index, query: &[u32], k: usize, params: Bm25Params) -> Result<Vec<Hit>> {
    check_k(k)?;
    let stats = &index.stats;
    let mut acc = vec![0.0f64; stats.doc_count];
    let mut touched = vec![false; stats.doc_count];
    for &t in query {
        let Some(list) = index.postings.get(t as usize) else {
            continue;
        };
        if list.is_empty() {
            continue;
        }
        let idf = bm25_idf(stats.doc_count, stats.df(t));
        for &(ord, tf) in list {
            let tf = tf as f64;
            let len = stats.doc_len[ord as usize] as f64;
            let norm = params.k1 * (1.0 - params.b + params.b * len / stats.avg_len);
            acc[ord as usize] += idf * tf * (params.k1 + 1.0) / (tf + norm);
            touched[ord as usize] = true;
        }
    }
    let mut top = TopK::new(k);
    for (ord, (&s, &hit)) in acc.iter().zip(&touched).enumerate() {
        if hit {
            top.offer(s, ord as u32);
        }
    }
    Ok(top
        .into_sorted()
        .into_iter()
        .map(|(score, ord)| Hit {
            doc_id: index.doc_id(ord).to_string(),
            score,
        })
        .collect())
}

/// Dense document vectors, rows in ascending doc_id order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    doc_ids: Vec<String>,
    rows: Vec<DenseVector>,
    dim: usize,
}

impl DenseIndex {
    pub fn new(docs: Vec<(String, DenseVector)>) -> Result<Self> {
        if docs.is_empty() {
            return Err(LabError::EmptyCorpus);
        }
        let dim = docs[0].1.values.len();
        if let Some((_, v)) = docs.iter().find(|(_, v)| v.values.len() != dim) {
            return Err(LabError::DimensionMismatch {
                expected: dim,
                got: v.values.len(),
            });
        }
        let mut docs = docs;
        docs.sort_by(|a, b| a.0.cmp(&b.0));
        let (doc_ids, rows) = docs.into_iter().unzip();
        Ok(Self { doc_ids, rows, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Exact inner-product top-k over every document.
pub fn search_dense_bruteforce(index: &DenseIndex, q: &DenseVector, k: usize) -> Result<Vec<Hit>> {
    check_k(k)?;
    if q.values.len() != index.dim {
        return Err(LabError::DimensionMismatch {
            expected: index.dim,
            got: q.values.len(),
        });
    }
    let mut top = TopK::new(k);
    for (ord, row) in index.rows.iter().enumerate() {
        top.offer(row.dot(q), ord as u32);
    }
    Ok(top
        .into_sorted()
        .into_iter()
        .map(|(score, ord)| Hit {
            doc_id: index.doc_ids[ord as usize].clone(),
            score,
        })
        .collect())
}

/// TREC run text: `qid Q0 docid rank score tag`, ranks from 1.
pub fn format_run(rankings: &[Ranking], tag: &str) -> String {
    let mut out = String::new();
    for r in rankings {
        for (i, h) in r.hits.iter().enumerate() {
            let _ = writeln!(out, "{} Q0 {} {} {} {}", r.query_id, h.doc_id, i + 1, h.score, tag);
        }
    }
    out
}

pub fn write_run(rankings: &[Ranking], tag: &str, path: &Path) -> Result<()> {
    if rankings.is_empty() {
        return Err(LabError::InvalidConfig("no rankings to write".into()));
    }
    if tag.is_empty() || tag.contains(char::is_whitespace) {
        return Err(LabError::config("tag", "run tag must be a single non-empty word"));
    }
    fs::write(path, format_run(rankings, tag)).map_err(|e| LabError::io(path, e))
}

/// Parses a run file; queries keep their order of first appearance and
/// each ranking's `k` is its hit count.
pub fn parse_run(text: &str, path: &Path) -> Result<Vec<Ranking>> {
    let mut order: Vec<Ranking> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(LabError::parse(path, n + 1, "expected 6 fields"));
        }
        let rank: usize = f[3]
            .parse()
            .map_err(|_| LabError::parse(path, n + 1, format!("bad rank '{}'", f[3])))?;
        let score: f64 = f[4]
            .parse()
            .map_err(|_| LabError::parse(path, n + 1, format!("bad score '{}'", f[4])))?;
        let i = *slot.entry(f[0].to_string()).or_insert_with(|| {
            order.push(Ranking::new(f[0], Vec::new(), 0));
            order.len() - 1
        });
        let r = &mut order[i];
        if rank != r.hits.len() + 1 {
            return Err(LabError::parse(path, n + 1, format!("rank {rank} out of sequence")));
        }
        r.hits.push(Hit {
            doc_id: f[2].to_string(),
            score,
        });
        r.k = r.hits.len();
    }
    Ok(order)
}

pub fn read_run(path: &Path) -> Result<Vec<Ranking>> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_run(&text, path)
}
