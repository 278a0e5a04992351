//! Corpus ingestion, the word-level base vocabulary, tokenization and
//! token frequency statistics.
//!
//! Text is normalized by lowercasing, splitting on whitespace and detaching
//! leading/trailing punctuation characters as standalone tokens, so that
//! `"A b!"` becomes `["a", "b", "!"]`. Interior punctuation (`"don't"`) stays
//! attached.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{LabError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Special tokens in id order; they always occupy ids `0..4`.
pub const SPECIAL_TOKENS: [&str; 4] = [PAD, UNK, CLS, SEP];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub title: Option<String>,
    pub body: String,
}

impl Document {
    /// Text seen by the encoder: `title + " " + body` when augmenting and a
    /// title is present, the body otherwise.
    pub fn visible_text(&self, title_augment: bool) -> String {
        match (&self.title, title_augment) {
            (Some(t), true) if !t.is_empty() => {
                if self.body.is_empty() {
                    t.clone()
                } else {
                    format!("{} {}", t, self.body)
                }
            }
            (Some(t), false) if self.body.is_empty() => t.clone(),
            _ => self.body.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Tsv,
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(CorpusFormat::Tsv),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(LabError::config("corpus_format", format!("unknown format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub docs: Vec<Document>,
    pub title_augment: bool,
}

impl Corpus {
    pub fn new(docs: Vec<Document>, title_augment: bool) -> Self {
        Self { docs, title_augment }
    }

    /// Builds a corpus of bodies only, with ids `d0, d1, ...`.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let docs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                doc_id: format!("d{i}"),
                title: None,
                body: t.as_ref().to_string(),
            })
            .collect();
        Self::new(docs, false)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn visible_text(&self, idx: usize) -> String {
        self.docs[idx].visible_text(self.title_augment)
    }

    pub fn texts(&self) -> Vec<String> {
        self.docs.iter().map(|d| d.visible_text(self.title_augment)).collect()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.docs.iter().find(|d| d.doc_id == doc_id)
    }

    /// Map from doc_id to position in `docs`.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.as_str(), i))
            .collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for d in &self.docs {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                d.doc_id,
                d.title.as_deref().unwrap_or(""),
                d.body
            ));
        }
        fs::write(path, out).map_err(|e| LabError::io(path, e))
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    doc_id: Option<String>,
    title: Option<String>,
    body: Option<String>,
}

fn validate_record(
    path: &Path,
    line: usize,
    doc_id: String,
    title: Option<String>,
    body: String,
    seen: &mut HashSet<String>,
) -> Result<Document> {
    if doc_id.is_empty() {
        return Err(LabError::parse(path, line, "empty doc_id"));
    }
    let title = title.filter(|t| !t.is_empty());
    if body.is_empty() && title.is_none() {
        return Err(LabError::parse(path, line, "empty body and no title"));
    }
    if !seen.insert(doc_id.clone()) {
        return Err(LabError::DuplicateDocId { doc_id, line });
    }
    Ok(Document { doc_id, title, body })
}

/// Loads a corpus file. TSV rows are `doc_id \t title \t body` (an empty
/// title column means no title; a two-column row is `doc_id \t body`).
/// JSONL rows carry `doc_id`, optional `title`, and `body`.
pub fn load_corpus(path: &Path, format: CorpusFormat, title_augment: bool) -> Result<Corpus> {
    let raw = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let doc = match format {
            CorpusFormat::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                let (id, title, body) = match cols.as_slice() {
                    [id, body] => (*id, None, *body),
                    [id, title, body] => (*id, Some(title.to_string()), *body),
                    _ => {
                        return Err(LabError::parse(
                            path,
                            lineno,
                            format!("expected 2 or 3 tab-separated columns, got {}", cols.len()),
                        ))
                    }
                };
                validate_record(path, lineno, id.to_string(), title, body.to_string(), &mut seen)?
            }
            CorpusFormat::Jsonl => {
                let rec: JsonRecord =
                    serde_json::from_str(line).map_err(|e| LabError::parse(path, lineno, e.to_string()))?;
                let id = rec
                    .doc_id
                    .ok_or_else(|| LabError::parse(path, lineno, "missing doc_id"))?;
                let body = rec.body.ok_or_else(|| LabError::parse(path, lineno, "missing body"))?;
                validate_record(path, lineno, id, rec.title, body, &mut seen)?
            }
        };
        docs.push(doc);
    }
    Ok(Corpus::new(docs, title_augment))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

/// Loads `query_id \t text` rows.
pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let raw = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| LabError::parse(path, i + 1, "expected query_id<TAB>text"))?;
        if id.is_empty() {
            return Err(LabError::parse(path, i + 1, "empty query_id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(LabError::parse(path, i + 1, format!("duplicate query_id '{id}'")));
        }
        out.push(Query {
            query_id: id.to_string(),
            text: text.to_string(),
        });
    }
    Ok(out)
}

pub fn write_queries(path: &Path, queries: &[Query]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    for q in queries {
        writeln!(f, "{}\t{}", q.query_id, q.text).map_err(|e| LabError::io(path, e))?;
    }
    Ok(())
}

/// Splits text into normalized word tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let is_punct = |c: &char| !c.is_alphanumeric();
        let lead = chars.iter().take_while(|c| is_punct(c)).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| is_punct(c)).count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}

/// Word-level vocabulary: specials at ids 0..4 followed by corpus tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseVocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl BaseVocabulary {
    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;
    pub const CLS_ID: u32 = 2;
    pub const SEP_ID: u32 = 3;
    pub const N_SPECIAL: usize = 4;

    /// Builds a vocabulary from an explicit token list whose first four
    /// entries must be the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::N_SPECIAL
            || tokens[..Self::N_SPECIAL]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(LabError::InvalidVocabulary(
                "first four tokens must be [PAD] [UNK] [CLS] [SEP]".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(LabError::InvalidVocabulary(format!("bad token at id {i}: {t:?}")));
            }
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(LabError::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, token_to_id })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < Self::N_SPECIAL
    }

    /// All non-special ids in ascending order.
    pub fn non_special_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (Self::N_SPECIAL as u32)..(self.tokens.len() as u32)
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_tokens(raw.lines().map(str::to_string).collect())
    }
}

/// Trains the word-level vocabulary: specials plus the most frequent
/// normalized tokens with count ≥ `min_freq`, at most `max_vocab` entries in
/// total. Frequency ties are broken lexicographically.
pub fn train_tokenizer(corpus: &Corpus, max_vocab: usize, min_freq: u64) -> Result<BaseVocabulary> {
    if corpus.is_empty() {
        return Err(LabError::EmptyCorpus);
    }
    if max_vocab < BaseVocabulary::N_SPECIAL {
        return Err(LabError::InvalidVocabulary(format!(
            "max_vocab {max_vocab} leaves no room for the 4 special tokens"
        )));
    }
    let counts = (0..corpus.len())
        .into_par_iter()
        .fold(HashMap::<String, u64>::new, |mut acc, i| {
            for tok in normalize(&corpus.visible_text(i)) {
                *acc.entry(tok).or_default() += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        });
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    ranked.truncate(max_vocab - BaseVocabulary::N_SPECIAL);

    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    BaseVocabulary::from_tokens(tokens)
}

/// `[CLS] tokens... [SEP]`, never longer than the configured cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Normalized token ids for `text` without specials or truncation; unknown
/// words map to `[UNK]`.
pub fn term_ids(text: &str, vocab: &BaseVocabulary) -> Vec<u32> {
    normalize(text)
        .iter()
        .map(|t| vocab.id(t).unwrap_or(BaseVocabulary::UNK_ID))
        .collect()
}

pub fn tokenize(text: &str, vocab: &BaseVocabulary, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BaseVocabulary::CLS_ID);
    ids.extend(term_ids(text, vocab).into_iter().take(max_len - 2));
    ids.push(BaseVocabulary::SEP_ID);
    TokenSequence { ids }
}

/// Surface strings for the non-special ids of a sequence.
pub fn detokenize(seq: &TokenSequence, vocab: &BaseVocabulary) -> Vec<String> {
    seq.ids
        .iter()
        .filter(|&&id| !BaseVocabulary::is_special(id))
        .filter_map(|&id| vocab.token(id).map(str::to_string))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    pub counts: Vec<u64>,
    pub total_tokens: u64,
}

impl FrequencyTable {
    pub fn get(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    /// TSV `id \t token \t count`.
    pub fn save(&self, path: &Path, vocab: &BaseVocabulary) -> Result<()> {
        let mut out = String::new();
        for (id, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{id}\t{}\t{c}\n", vocab.token(id as u32).unwrap_or("")));
        }
        fs::write(path, out).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut counts = BTreeMap::new();
        for (i, line) in raw.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(LabError::parse(path, i + 1, "expected id<TAB>token<TAB>count"));
            }
            let id: usize = cols[0].parse().map_err(|_| LabError::parse(path, i + 1, "bad id"))?;
            let c: u64 = cols[2].parse().map_err(|_| LabError::parse(path, i + 1, "bad count"))?;
            counts.insert(id, c);
        }
        let n = counts.keys().next_back().map_or(0, |k| k + 1);
        let mut dense = vec![0; n];
        for (k, v) in counts {
            dense[k] = v;
        }
        let total_tokens = dense.iter().sum();
        Ok(Self {
            counts: dense,
            total_tokens,
        })
    }
}

/// Exact per-id counts over the tokenized corpus, specials (including
/// `[UNK]`) excluded. Shards over documents; the merge is a plain sum.
pub fn token_frequencies(corpus: &Corpus, vocab: &BaseVocabulary) -> FrequencyTable {
    let n = vocab.len();
    let counts = (0..corpus.len())
        .into_par_iter()
        .fold(
            || vec![0u64; n],
            |mut acc, i| {
                for id in term_ids(&corpus.visible_text(i), vocab) {
                    if !BaseVocabulary::is_special(id) {
                        acc[id as usize] += 1;
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let total_tokens = counts.iter().sum();
    FrequencyTable { counts, total_tokens }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn title_augmentation() {
        let d = Document {
            doc_id: "d1".into(),
            title: Some("Velvet".into()),
            body: "a fabric".into(),
        };
        assert_eq!(d.visible_text(true), "Velvet a fabric");
        assert_eq!(d.visible_text(false), "a fabric");
        let d = Document { title: None, ..d };
        assert_eq!(d.visible_text(true), "a fabric");
    }

    #[test]
    fn tsv_duplicate_id_names_line() {
        let f = tmp_file("d1\t\tx\nd2\t\ty\nd1\t\tz\n");
        let err = load_corpus(f.path(), CorpusFormat::Tsv, false).unwrap_err();
        match err {
            LabError::DuplicateDocId { doc_id, line } => {
                assert_eq!(doc_id, "d1");
                assert_eq!(line, 3);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_records_name_line() {
        let f = tmp_file("d1\tt\tbody\nonlyonecolumn\n");
        let err = load_corpus(f.path(), CorpusFormat::Tsv, false).unwrap_err();
        assert!(matches!(err, LabError::Parse { line: 2, .. }), "{err}");

        let f = tmp_file("{\"doc_id\":\"a\",\"body\":\"x\"}\n{\"title\":\"t\"}\n");
        let err = load_corpus(f.path(), CorpusFormat::Jsonl, false).unwrap_err();
        assert!(matches!(err, LabError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn jsonl_with_titles() {
        let f = tmp_file(
            "{\"doc_id\":\"d1\",\"title\":\"Velvet\",\"body\":\"a fabric\"}\n{\"doc_id\":\"d2\",\"body\":\"b\"}\n",
        );
        let c = load_corpus(f.path(), CorpusFormat::Jsonl, true).unwrap();
        assert_eq!(c.visible_text(0), "Velvet a fabric");
        assert_eq!(c.visible_text(1), "b");
        assert_eq!(c.docs[0].body, "a fabric");
    }

    #[test]
    fn empty_body_requires_title() {
        let f = tmp_file("d1\t\t\n");
        assert!(load_corpus(f.path(), CorpusFormat::Tsv, false).is_err());
        let f = tmp_file("d1\tonly title\t\n");
        let c = load_corpus(f.path(), CorpusFormat::Tsv, false).unwrap();
        assert_eq!(c.visible_text(0), "only title");
    }

    #[test]
    fn normalization_detaches_punctuation() {
        assert_eq!(normalize("A b!"), vec!["a", "b", "!"]);
        assert_eq!(normalize("(Hello), don't"), vec!["(", "hello", ")", ",", "don't"]);
        assert_eq!(normalize("..."), vec![".", ".", "."]);
        assert!(normalize("   ").is_empty());
    }

    #[test]
    fn tokenizer_training_orders_by_frequency() {
        let c = Corpus::from_texts(&["a b", "a c"]);
        let v = train_tokenizer(&c, 10, 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), Some(4));
        // b and c tie at 1; lexicographic order
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id("c"), Some(6));
        assert_eq!(train_tokenizer(&c, 10, 1).unwrap(), v);
    }

    #[test]
    fn tokenizer_min_freq_and_truncation() {
        let c = Corpus::from_texts(&["x x x"]);
        let v = train_tokenizer(&c, 10, 4).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("x"), None);

        let c = Corpus::from_texts(&["a a a b b c"]);
        let v = train_tokenizer(&c, 5, 1).unwrap();
        assert_eq!(v.tokens()[4], "a");
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn tokenizer_rejects_empty_corpus() {
        assert!(matches!(
            train_tokenizer(&Corpus::default(), 10, 1),
            Err(LabError::EmptyCorpus)
        ));
    }

    #[test]
    fn tokenize_examples() {
        let v = BaseVocabulary::from_tokens(
            SPECIAL_TOKENS
                .iter()
                .map(|s| s.to_string())
                .chain(["a", "b", "!"].map(String::from))
                .collect(),
        )
        .unwrap();
        assert_eq!(tokenize("", &v, 8).ids, vec![2, 3]);
        assert_eq!(tokenize("A b!", &v, 8).ids, vec![2, 4, 5, 6, 3]);
        assert_eq!(tokenize("zzz", &v, 8).ids, vec![2, 1, 3]);
        // truncation keeps SEP last
        assert_eq!(tokenize("a b ! a", &v, 4).ids, vec![2, 4, 5, 3]);
    }

    #[test]
    fn frequencies_count_exactly() {
        let c = Corpus::from_texts(&["a a b"]);
        let v = train_tokenizer(&c, 10, 1).unwrap();
        let f = token_frequencies(&c, &v);
        assert_eq!(f.get(v.id("a").unwrap()), 2);
        assert_eq!(f.get(v.id("b").unwrap()), 1);
        assert_eq!(f.total_tokens, 3);

        let empty = token_frequencies(&Corpus::default(), &v);
        assert!(empty.counts.iter().all(|&c| c == 0));
        assert_eq!(empty.total_tokens, 0);
    }

    #[test]
    fn vocab_file_round_trip() {
        let c = Corpus::from_texts(&["the cat sat , on the mat ."]);
        let v = train_tokenizer(&c, 100, 1).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        v.save(f.path()).unwrap();
        assert_eq!(BaseVocabulary::load(f.path()).unwrap(), v);
    }

    #[test]
    fn vocab_rejects_missing_specials() {
        assert!(BaseVocabulary::from_tokens(vec!["a".into()]).is_err());
        let mut toks: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        toks.push("[CLS]".into());
        assert!(BaseVocabulary::from_tokens(toks).is_err());
    }
}
