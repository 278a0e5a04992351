//! Seeded synthetic retrieval task.
//!
//! Documents mix topic words, background words and stopword filler.
//! Queries take a few content words from a source document; a document is
//! relevant when it contains every query content word (grade 2 for the
//! source, 1 for the rest).

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_queries, Corpus, Document, Query};
use crate::error::{LabError, Result};
use crate::eval::Qrels;
use crate::vocab::default_stoplist;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_train_queries: usize,
    pub n_test_queries: usize,
    pub n_topics: usize,
    pub n_content_words: usize,
    pub topic_words_per_doc: usize,
    pub background_words_per_doc: usize,
    pub stopwords_per_doc: usize,
    pub query_words: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_docs: 2000,
            n_train_queries: 500,
            n_test_queries: 100,
            n_topics: 40,
            n_content_words: 1000,
            topic_words_per_doc: 9,
            background_words_per_doc: 3,
            stopwords_per_doc: 10,
            query_words: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_docs == 0 || self.n_topics == 0 || self.n_content_words < self.n_topics {
            return Err(LabError::config(
                "synth",
                "need docs, topics and at least one word per topic",
            ));
        }
        if self.n_train_queries + self.n_test_queries > self.n_docs {
            return Err(LabError::config("synth", "more queries than source documents"));
        }
        if self.query_words == 0 || self.query_words > self.topic_words_per_doc + self.background_words_per_doc {
            return Err(LabError::config(
                "synth.query_words",
                "must be in 1..=content words per doc",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthTask {
    pub corpus: Corpus,
    pub train_queries: Vec<Query>,
    pub test_queries: Vec<Query>,
    pub train_qrels: Qrels,
    pub test_qrels: Qrels,
}

impl SynthTask {
    /// Writes `corpus.tsv`, `{train,test}_queries.tsv` and
    /// `{train,test}_qrels.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        self.corpus.write_tsv(&dir.join("corpus.tsv"))?;
        write_queries(&dir.join("train_queries.tsv"), &self.train_queries)?;
        write_queries(&dir.join("test_queries.tsv"), &self.test_queries)?;
        self.train_qrels.save(&dir.join("train_qrels.txt"))?;
        self.test_qrels.save(&dir.join("test_qrels.txt"))
    }
}

/// `n` distinct pronounceable CVCVCV words that are not stopwords.
pub fn pseudo_words(n: usize) -> Vec<String> {
    let stop: HashSet<String> = default_stoplist().into_iter().collect();
    let syll = CONSONANTS.len() * VOWELS.len();
    let space = syll * syll * syll;
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    while out.len() < n && i < space {
        let mut j = (i * 7919 + 12_345) % space;
        let mut w = String::with_capacity(6);
        for _ in 0..3 {
            let s = j % syll;
            j /= syll;
            w.push(CONSONANTS[s / VOWELS.len()] as char);
            w.push(VOWELS[s % VOWELS.len()] as char);
        }
        if !stop.contains(&w) {
            out.push(w);
        }
        i += 1;
    }
    out
}

pub fn generate(config: &SynthConfig) -> Result<SynthTask> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let words = pseudo_words(config.n_content_words);
    let stop = default_stoplist();
    let per_topic = config.n_content_words / config.n_topics;
    // Zipf-like weights within a topic and over the background.
    let topic_w = WeightedIndex::new((0..per_topic).map(|k| 1.0 / (k + 1) as f64))
        .map_err(|e| LabError::InvalidConfig(e.to_string()))?;
    let bg_w = WeightedIndex::new((0..config.n_content_words).map(|k| 1.0 / (k + 1) as f64))
        .map_err(|e| LabError::InvalidConfig(e.to_string()))?;

    let mut docs = Vec::with_capacity(config.n_docs);
    let mut content: Vec<BTreeSet<usize>> = Vec::with_capacity(config.n_docs);
    for d in 0..config.n_docs {
        let topic = rng.random_range(0..config.n_topics);
        let mut toks: Vec<String> = Vec::new();
        let mut ids = BTreeSet::new();
        for _ in 0..config.topic_words_per_doc {
            let w = topic * per_topic + topic_w.sample(&mut rng);
            ids.insert(w);
            toks.push(words[w].clone());
        }
        for _ in 0..config.background_words_per_doc {
            let w = bg_w.sample(&mut rng);
            ids.insert(w);
            toks.push(words[w].clone());
        }
        for _ in 0..config.stopwords_per_doc {
            toks.push(stop.choose(&mut rng).expect("stoplist is nonempty").clone());
        }
        // interleave deterministically
        for i in (1..toks.len()).rev() {
            let j = rng.random_range(0..=i);
            toks.swap(i, j);
        }
        docs.push(Document {
            doc_id: format!("doc{d:05}"),
            title: None,
            body: toks.join(" "),
        });
        content.push(ids);
    }

    let n_q = config.n_train_queries + config.n_test_queries;
    let eligible: Vec<usize> = (0..config.n_docs)
        .filter(|&d| content[d].len() >= config.query_words)
        .collect();
    if eligible.len() < n_q {
        return Err(LabError::Shortfall {
            kind: "query source documents".into(),
            requested: n_q,
            available: eligible.len(),
        });
    }
    let sources: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), n_q)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut train_queries = Vec::new();
    let mut test_queries = Vec::new();
    let mut train_qrels = Qrels::default();
    let mut test_qrels = Qrels::default();
    for (qi, &src) in sources.iter().enumerate() {
        let pool: Vec<usize> = content[src].iter().copied().collect();
        let picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), config.query_words)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let mut text: Vec<&str> = picked.iter().map(|&w| words[w].as_str()).collect();
        if rng.random_bool(0.5) {
            text.insert(0, stop.choose(&mut rng).expect("stoplist is nonempty"));
        }
        let (queries, qrels, qid) = if qi < config.n_train_queries {
            (&mut train_queries, &mut train_qrels, format!("train{qi:04}"))
        } else {
            (
                &mut test_queries,
                &mut test_qrels,
                format!("test{:04}", qi - config.n_train_queries),
            )
        };
        for (d, ids) in content.iter().enumerate() {
            if picked.iter().all(|w| ids.contains(w)) {
                qrels.insert(&qid, &docs[d].doc_id, if d == src { 2 } else { 1 });
            }
        }
        queries.push(Query {
            query_id: qid,
            text: text.join(" "),
        });
    }
    Ok(SynthTask {
        corpus: Corpus::new(docs, false),
        train_queries,
        test_queries,
        train_qrels,
        test_qrels,
    })
}
