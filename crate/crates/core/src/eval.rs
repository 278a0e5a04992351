//! Retrieval metrics, paired significance tests, expansion statistics and
//! query-time expansion pruning.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{tokenize, BaseVocabulary, Query};
use crate::encoder::{encode_selected, ColumnSelection, EncoderParams, SparseVector};
use crate::error::{LabError, Result};
use crate::index::InvertedIndex;
use crate::search::Ranking;
use crate::vocab::VocabularyController;

pub const SIGNIFICANCE_LEVEL: f64 = 0.01;

/// Graded judgments. Binary relevance is `grade >= threshold`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
    pub threshold: u32,
}

impl Default for Qrels {
    fn default() -> Self {
        Self {
            grades: BTreeMap::new(),
            threshold: 1,
        }
    }
}

impl Qrels {
    pub fn new(threshold: u32) -> Self {
        Self {
            grades: BTreeMap::new(),
            threshold,
        }
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) {
        self.grades
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.grades
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.grade(query_id, doc_id) >= self.threshold.max(1)
    }

    pub fn judgments(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.grades.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn relevant_docs(&self, query_id: &str) -> Vec<&str> {
        self.grades
            .get(query_id)
            .map(|m| {
                m.iter()
                    .filter(|&(_, &g)| g >= self.threshold.max(1))
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Queries with at least one relevant document: the evaluated set.
    pub fn judged_queries(&self) -> Vec<&str> {
        self.query_ids().filter(|q| !self.relevant_docs(q).is_empty()).collect()
    }

    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    /// TREC format: `qid iter docid grade`.
    pub fn parse(text: &str, path: &Path, threshold: u32) -> Result<Self> {
        let mut q = Self::new(threshold);
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(LabError::parse(path, n + 1, "expected 'qid iter docid grade'"));
            }
            let grade: i64 = f[3]
                .parse()
                .map_err(|_| LabError::parse(path, n + 1, format!("bad grade '{}'", f[3])))?;
            if grade < 0 {
                return Err(LabError::parse(path, n + 1, "negative grade"));
            }
            q.insert(f[0], f[2], grade as u32);
        }
        Ok(q)
    }

    pub fn load(path: &Path, threshold: u32) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text, path, threshold)
    }

    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.grades {
            for (d, g) in docs {
                let _ = writeln!(out, "{q} 0 {d} {g}");
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_trec()).map_err(|e| LabError::io(path, e))
    }
}

/// Reciprocal rank of the first relevant hit in the top `k`; `None` when
/// the query has no relevant documents.
pub fn rr_at_k(ranking: &Ranking, qrels: &Qrels, k: usize) -> Option<f64> {
    if qrels.relevant_docs(&ranking.query_id).is_empty() {
        log::debug!("query {} has no relevant documents; skipped", ranking.query_id);
        return None;
    }
    Some(
        ranking
            .doc_ids()
            .take(k)
            .position(|d| qrels.is_relevant(&ranking.query_id, d))
            .map_or(0.0, |p| 1.0 / (p + 1) as f64),
    )
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| ((1u64 << g.min(62)) - 1) as f64 / ((i + 2) as f64).log2())
        .sum()
}

/// Gain `2^g − 1`, discount `log2(rank + 1)`; `None` for unjudged queries
/// and `Some(0)` when every judgment is zero.
pub fn ndcg_at_k(ranking: &Ranking, qrels: &Qrels, k: usize) -> Option<f64> {
    let judged = qrels.judgments(&ranking.query_id)?;
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        log::debug!("query {} has only zero grades; NDCG is 0", ranking.query_id);
        return Some(0.0);
    }
    let actual = dcg(ranking.doc_ids().take(k).map(|d| qrels.grade(&ranking.query_id, d)));
    Some(actual / idcg)
}

pub fn recall_at_k(ranking: &Ranking, qrels: &Qrels, k: usize) -> Option<f64> {
    let rel = qrels.relevant_docs(&ranking.query_id);
    if rel.is_empty() {
        log::debug!("query {} has no relevant documents; skipped", ranking.query_id);
        return None;
    }
    let found = ranking
        .doc_ids()
        .take(k)
        .filter(|d| qrels.is_relevant(&ranking.query_id, d))
        .count();
    Some(found as f64 / rel.len() as f64)
}

/// Two-sided paired t-test on `a − b` with `n − 1` degrees of freedom.
/// All-zero differences give 1; zero variance with a nonzero mean gives 0.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LabError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(LabError::TooFewObservations(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&x| x == 0.0) {
        return Ok(1.0);
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| LabError::InvalidConfig(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Rr(usize),
    Ndcg(usize),
    Recall(usize),
}

impl Metric {
    pub const DEFAULTS: [Metric; 3] = [Metric::Rr(10), Metric::Ndcg(10), Metric::Recall(1000)];

    pub fn compute(self, ranking: &Ranking, qrels: &Qrels) -> Option<f64> {
        match self {
            Metric::Rr(k) => rr_at_k(ranking, qrels, k),
            Metric::Ndcg(k) => ndcg_at_k(ranking, qrels, k),
            Metric::Recall(k) => recall_at_k(ranking, qrels, k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Rr(k) => write!(f, "RR@{k}"),
            Metric::Ndcg(k) => write!(f, "NDCG@{k}"),
            Metric::Recall(k) => write!(f, "Recall@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LabError::config("metrics", format!("unknown metric '{s}'"));
        let (name, k) = s.trim().split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name.to_ascii_lowercase().as_str() {
            "rr" | "mrr" => Ok(Metric::Rr(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            "recall" | "r" => Ok(Metric::Recall(k)),
            _ => Err(bad()),
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// One system's metric values, aligned with the report's query list.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemEval {
    pub name: String,
    /// `values[m][q]` for metric `m`, query `q`.
    pub values: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub ignored_lines: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Significance {
    pub metric: Metric,
    pub a: usize,
    pub b: usize,
    pub p_value: f64,
}

impl Significance {
    pub fn significant(&self) -> bool {
        self.p_value <= SIGNIFICANCE_LEVEL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: Vec<Metric>,
    pub query_ids: Vec<String>,
    pub systems: Vec<SystemEval>,
    pub significance: Vec<Significance>,
}

impl EvalReport {
    pub fn mean(&self, system: &str, metric: Metric) -> Option<f64> {
        let m = self.metrics.iter().position(|&x| x == metric)?;
        self.systems.iter().find(|s| s.name == system).map(|s| s.means[m])
    }

    pub fn p_value(&self, metric: Metric, a: usize, b: usize) -> Option<f64> {
        if a == b {
            return Some(1.0);
        }
        let (lo, hi) = (a.min(b), a.max(b));
        self.significance
            .iter()
            .find(|s| s.metric == metric && s.a == lo && s.b == hi)
            .map(|s| s.p_value)
    }

    pub fn means_tsv(&self) -> String {
        let mut out = String::from("system\tmetric\tmean\n");
        for s in &self.systems {
            for (m, mean) in self.metrics.iter().zip(&s.means) {
                let _ = writeln!(out, "{}\t{}\t{:.6}", s.name, m, mean);
            }
        }
        out
    }

    pub fn per_query_tsv(&self) -> String {
        let mut out = String::from("system\tquery_id\tmetric\tvalue\n");
        for s in &self.systems {
            for (mi, m) in self.metrics.iter().enumerate() {
                for (qi, q) in self.query_ids.iter().enumerate() {
                    let _ = writeln!(out, "{}\t{}\t{}\t{:.6}", s.name, q, m, s.values[mi][qi]);
                }
            }
        }
        out
    }

    pub fn significance_tsv(&self) -> String {
        let mut out = String::from("metric\tsystem_a\tsystem_b\tp_value\tsignificant\n");
        for s in &self.significance {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6e}\t{}",
                s.metric,
                self.systems[s.a].name,
                self.systems[s.b].name,
                s.p_value,
                if s.significant() { "*" } else { "" }
            );
        }
        out
    }

    /// Wide table, one row per system: means per metric, with `+name`
    /// marks for systems this one beats significantly.
    pub fn table_tsv(&self) -> String {
        let mut out = String::from("system");
        for m in &self.metrics {
            let _ = write!(out, "\t{m}");
        }
        out.push('\n');
        for (i, s) in self.systems.iter().enumerate() {
            out.push_str(&s.name);
            for (mi, &m) in self.metrics.iter().enumerate() {
                let beats: Vec<&str> = (0..self.systems.len())
                    .filter(|&j| j != i && s.means[mi] > self.systems[j].means[mi])
                    .filter(|&j| self.p_value(m, i, j).is_some_and(|p| p <= SIGNIFICANCE_LEVEL))
                    .map(|j| self.systems[j].name.as_str())
                    .collect();
                let _ = write!(out, "\t{:.4}", s.means[mi]);
                if !beats.is_empty() {
                    let _ = write!(out, " +{}", beats.join(","));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates several systems on the judged queries. Queries missing from a
/// run score 0; rankings for queries not in the qrels are ignored and
/// counted.
pub fn evaluate(systems: &[(String, Vec<Ranking>)], qrels: &Qrels, metrics: &[Metric]) -> Result<EvalReport> {
    let query_ids: Vec<String> = qrels.judged_queries().into_iter().map(String::from).collect();
    if query_ids.is_empty() {
        return Err(LabError::NoJudgedQueries);
    }
    let judged: HashSet<&str> = query_ids.iter().map(String::as_str).collect();
    let mut evals = Vec::with_capacity(systems.len());
    for (name, rankings) in systems {
        let mut by_query: BTreeMap<&str, &Ranking> = BTreeMap::new();
        let mut ignored = 0;
        for r in rankings {
            if judged.contains(r.query_id.as_str()) {
                by_query.insert(&r.query_id, r);
            } else {
                ignored += r.hits.len();
            }
        }
        if ignored > 0 {
            log::warn!("{name}: ignored {ignored} run lines for unjudged queries");
        }
        let values: Vec<Vec<f64>> = metrics
            .iter()
            .map(|&m| {
                query_ids
                    .iter()
                    .map(|q| {
                        by_query
                            .get(q.as_str())
                            .and_then(|r| m.compute(r, qrels))
                            .unwrap_or(0.0)
                    })
                    .collect()
            })
            .collect();
        let means = values.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        evals.push(SystemEval {
            name: name.clone(),
            values,
            means,
            ignored_lines: ignored,
        });
    }
    let mut significance = Vec::new();
    if query_ids.len() >= 2 {
        for (mi, &metric) in metrics.iter().enumerate() {
            for a in 0..evals.len() {
                for b in a + 1..evals.len() {
                    let p_value = paired_ttest(&evals[a].values[mi], &evals[b].values[mi])?;
                    significance.push(Significance { metric, a, b, p_value });
                }
            }
        }
    }
    Ok(EvalReport {
        metrics: metrics.to_vec(),
        query_ids,
        systems: evals,
        significance,
    })
}

/// Reads each run file and evaluates them together; system names are the
/// file stems.
pub fn evaluate_run(run_paths: &[&Path], qrels: &Qrels, metrics: &[Metric]) -> Result<EvalReport> {
    let mut systems = Vec::new();
    for p in run_paths {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        systems.push((name, crate::search::read_run(p)?));
    }
    evaluate(&systems, qrels, metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionRow {
    pub term: String,
    pub term_id: u32,
    pub count: usize,
    pub percentage: f64,
    pub list_length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionStats {
    pub rows: Vec<ExpansionRow>,
    pub n_queries: usize,
}

impl ExpansionStats {
    /// Ids of the `n` most commonly expanded terms.
    pub fn top_terms(&self, n: usize) -> BTreeSet<u32> {
        self.rows.iter().take(n).map(|r| r.term_id).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("term\tcount\tpercent\tlist_length\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{:.1}\t{}", r.term, r.count, r.percentage, r.list_length);
        }
        out
    }
}

/// Nonzero dims of `encoded` whose token is absent from the query's own
/// tokens. Latent dims have no surface form and always count.
pub fn expanded_terms(encoded: &SparseVector, query_tokens: &[u32]) -> Vec<u32> {
    let own: HashSet<u32> = query_tokens.iter().copied().collect();
    encoded.term_ids().filter(|t| !own.contains(t)).collect()
}

/// Counts, per term, the queries in which it was expanded; sorted by count
/// descending, then term id.
pub fn expansion_stats(
    params: &EncoderParams,
    controller: &VocabularyController,
    vocab: &BaseVocabulary,
    queries: &[Query],
    index: &InvertedIndex,
) -> Result<ExpansionStats> {
    use rayon::prelude::*;
    let sel = ColumnSelection::new(params, &controller.allowed_mask())?;
    let per_query: Vec<Vec<u32>> = queries
        .par_iter()
        .map(|q| {
            let tokens = tokenize(&q.text, vocab, params.config.max_len);
            let v = encode_selected(params, &sel, &tokens)?;
            Ok(expanded_terms(&v, &tokens.ids))
        })
        .collect::<Result<_>>()?;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for terms in &per_query {
        for &t in terms {
            *counts.entry(t).or_default() += 1;
        }
    }
    let n = queries.len();
    let mut rows: Vec<ExpansionRow> = counts
        .into_iter()
        .map(|(t, c)| ExpansionRow {
            term: controller.term_label(t, vocab),
            term_id: t,
            count: c,
            percentage: 100.0 * c as f64 / n as f64,
            list_length: index.list(t).map_or(0, |l| l.len()),
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.term_id.cmp(&b.term_id)));
    Ok(ExpansionStats { rows, n_queries: n })
}

/// `q` with the banned dims removed.
pub fn prune_query_terms(q: &SparseVector, banned: &BTreeSet<u32>) -> SparseVector {
    let mut out = q.clone();
    out.retain(|t| !banned.contains(&t));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::Hit;
    use proptest::prelude::*;

    fn ranking(q: &str, docs: &[&str]) -> Ranking {
        let hits = docs
            .iter()
            .enumerate()
            .map(|(i, d)| Hit {
                doc_id: d.to_string(),
                score: (docs.len() - i) as f64,
            })
            .collect();
        Ranking::new(q, hits, 1000)
    }

    fn qrels(entries: &[(&str, &str, u32)]) -> Qrels {
        let mut q = Qrels::default();
        for &(a, b, g) in entries {
            q.insert(a, b, g);
        }
        q
    }

    #[test]
    fn rr_examples() {
        let qr = qrels(&[("q", "x", 1), ("q", "y", 0)]);
        assert_eq!(rr_at_k(&ranking("q", &["x", "a"]), &qr, 10), Some(1.0));
        assert_eq!(rr_at_k(&ranking("q", &["a", "x"]), &qr, 10), Some(0.5));
        let far: Vec<String> = (0..10).map(|i| format!("n{i}")).collect();
        let mut docs: Vec<&str> = far.iter().map(String::as_str).collect();
        docs.push("x");
        assert_eq!(rr_at_k(&ranking("q", &docs), &qr, 10), Some(0.0));
        assert_eq!(rr_at_k(&ranking("other", &["x"]), &qr, 10), None);
    }

    #[test]
    fn ndcg_examples() {
        let qr = qrels(&[("q", "a", 3), ("q", "b", 0)]);
        assert_eq!(ndcg_at_k(&ranking("q", &["a", "b"]), &qr, 10), Some(1.0));
        let v = ndcg_at_k(&ranking("q", &["b", "a"]), &qr, 10).unwrap();
        assert_eq!(v, (7.0 / 3f64.log2()) / 7.0);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&ranking("q", &[]), &qr, 10), Some(0.0));
        let zero = qrels(&[("q", "a", 0)]);
        assert_eq!(ndcg_at_k(&ranking("q", &["a"]), &zero, 10), Some(0.0));
    }

    #[test]
    fn recall_examples() {
        let qr = qrels(&[("q", "a", 1), ("q", "b", 2)]);
        assert_eq!(recall_at_k(&ranking("q", &["a", "b"]), &qr, 1000), Some(1.0));
        assert_eq!(recall_at_k(&ranking("q", &["c", "b"]), &qr, 1000), Some(0.5));
        assert_eq!(recall_at_k(&ranking("q", &["c"]), &qr, 1000), Some(0.0));
        assert_eq!(recall_at_k(&ranking("z", &["c"]), &qr, 1000), None);
    }

    #[test]
    fn threshold_controls_binary_relevance() {
        let mut qr = qrels(&[("q", "a", 1), ("q", "b", 2)]);
        qr.threshold = 2;
        assert_eq!(rr_at_k(&ranking("q", &["a", "b"]), &qr, 10), Some(0.5));
        assert_eq!(recall_at_k(&ranking("q", &["a"]), &qr, 10), Some(0.0));
    }

    #[test]
    fn ttest_conventions() {
        let a = [0.1, 0.5, 0.3];
        assert_eq!(paired_ttest(&a, &a).unwrap(), 1.0);
        assert_eq!(paired_ttest(&[2.0; 4], &[1.0; 4]).unwrap(), 0.0);
        assert!(matches!(
            paired_ttest(&[1.0, 2.0], &[1.0]),
            Err(LabError::LengthMismatch(2, 1))
        ));
        assert!(paired_ttest(&[1.0], &[0.0]).is_err());
        let x = [1.0, 0.0, 2.0, 0.5, 0.0];
        let y = [0.0, 1.0, 0.0, 0.5, -1.0];
        assert_eq!(paired_ttest(&x, &y).unwrap(), paired_ttest(&y, &x).unwrap());
    }

    #[test]
    fn metric_names() {
        assert_eq!("rr@10".parse::<Metric>().unwrap(), Metric::Rr(10));
        assert_eq!("NDCG@10".parse::<Metric>().unwrap().to_string(), "NDCG@10");
        assert_eq!(
            parse_metrics("rr@10, recall@1000").unwrap(),
            vec![Metric::Rr(10), Metric::Recall(1000)]
        );
        assert!("rr".parse::<Metric>().is_err());
        assert!("foo@3".parse::<Metric>().is_err());
    }

    #[test]
    fn evaluate_perfect_and_identical() {
        let qr = qrels(&[("q1", "a", 1), ("q2", "b", 2), ("q3", "c", 1)]);
        let run = vec![
            ranking("q1", &["a"]),
            ranking("q2", &["b"]),
            ranking("q3", &["c"]),
            ranking("qx", &["c"]),
        ];
        let r = evaluate(
            &[("s1".into(), run.clone()), ("s2".into(), run)],
            &qr,
            &Metric::DEFAULTS,
        )
        .unwrap();
        for s in &r.systems {
            assert!(s.means.iter().all(|&m| m == 1.0));
            assert_eq!(s.ignored_lines, 1);
        }
        assert!(r.significance.iter().all(|s| s.p_value == 1.0 && !s.significant()));
        assert!(r.table_tsv().contains("s1\t1.0000"));
        assert!(evaluate(&[], &Qrels::default(), &Metric::DEFAULTS).is_err());
    }

    #[test]
    fn missing_query_scores_zero() {
        let qr = qrels(&[("q1", "a", 1), ("q2", "b", 1)]);
        let r = evaluate(&[("s".into(), vec![ranking("q1", &["a"])])], &qr, &[Metric::Rr(10)]).unwrap();
        assert_eq!(r.systems[0].means[0], 0.5);
    }

    #[test]
    fn expansion_set_difference() {
        // query "a b" encoded as {a, c}
        let (a, b, c) = (10, 11, 12);
        let enc = SparseVector::from_pairs([(a, 1.0), (c, 0.5)], 0);
        assert_eq!(expanded_terms(&enc, &[2, a, b, 3]), vec![c]);
    }

    #[test]
    fn prune_examples() {
        let q = SparseVector::from_pairs([(1, 1.0), (2, 2.0)], 0);
        assert_eq!(prune_query_terms(&q, &BTreeSet::from([7])), q);
        let p = prune_query_terms(&q, &BTreeSet::from([2]));
        assert_eq!(p.entries(), &[(1, 1.0)]);
    }

    proptest! {
        #[test]
        fn moving_relevant_up_never_hurts(
            n in 2usize..15,
            rel in proptest::collection::btree_set(0usize..15, 1..5),
            pick in 0usize..15,
        ) {
            let docs: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
            let mut qr = Qrels::default();
            for &r in &rel {
                qr.insert("q", &format!("d{r}"), 1 + (r % 3) as u32);
            }
            let rel_pos: Vec<usize> = (0..n).filter(|i| rel.contains(i)).collect();
            prop_assume!(!rel_pos.is_empty());
            let i = rel_pos[pick % rel_pos.len()];
            prop_assume!(i > 0);
            let before = ranking("q", &docs.iter().map(String::as_str).collect::<Vec<_>>());
            let mut moved = docs.clone();
            moved.swap(i - 1, i);
            // only a strict improvement if the displaced doc is less relevant
            prop_assume!(qr.grade("q", &moved[i]) < qr.grade("q", &moved[i - 1]));
            let after = ranking("q", &moved.iter().map(String::as_str).collect::<Vec<_>>());
            for m in [Metric::Rr(10), Metric::Ndcg(10)] {
                let (b, a) = (m.compute(&before, &qr).unwrap(), m.compute(&after, &qr).unwrap());
                prop_assert!(a >= b, "{} {} -> {}", m, b, a);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
