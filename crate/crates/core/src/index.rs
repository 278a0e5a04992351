//! Impact-quantized inverted index and BM25 term statistics.
//!
//! Impacts are quantized linearly against one global scale,
//! `scale = max_impact / max_level`, with ceiling rounding so that a nonzero
//! impact never lands on level zero. Document ordinals are assigned in
//! ascending `doc_id` order, which makes "ascending ordinal" and "ascending
//! doc_id" the same tie-break.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic "SPLIDX\0\0" | version u32 | doc_count u32 | quant_scale f64 | term_count u32
//! doc table: doc_count × (u32 len + utf8 doc_id)
//! per term: term_id u32 | length u32 | length × u32 ordinal deltas | length × u8 levels
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{term_ids, BaseVocabulary, Corpus};
use crate::encoder::{encode_selected, ColumnSelection, EncoderParams, SparseVector};
use crate::error::{LabError, Result};
use crate::vocab::VocabularyController;

const MAGIC: &[u8; 8] = b"SPLIDX\0\0";
/// Version written after the magic bytes of a saved index.
pub const FORMAT_VERSION: u32 = 1;

pub const DEFAULT_QUANT_BITS: u32 = 8;

/// Linear quantizer with ceiling rounding, clamped to `max_level`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    pub scale: f64,
    pub max_level: u8,
}

impl Quantizer {
    pub fn new(scale: f64, bits: u32) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(LabError::InvalidConfig(format!(
                "quant_bits must be in 1..=8, got {bits}"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(LabError::InvalidConfig(format!(
                "quantization scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            scale,
            max_level: ((1u32 << bits) - 1) as u8,
        })
    }

    /// Scale that maps `max_impact` onto the top level.
    pub fn for_max_impact(max_impact: f64, bits: u32) -> Result<Self> {
        let max_level = ((1u32 << bits.clamp(1, 8)) - 1) as f64;
        let scale = if max_impact > 0.0 { max_impact / max_level } else { 1.0 };
        Self::new(scale, bits)
    }

    pub fn quantize(&self, impact: f64) -> Result<u8> {
        if impact < 0.0 || impact.is_nan() {
            return Err(LabError::NegativeImpact(impact));
        }
        let level = (impact / self.scale).ceil();
        Ok(level.min(self.max_level as f64) as u8)
    }

    pub fn dequantize(&self, level: u8) -> f64 {
        level as f64 * self.scale
    }
}

/// 8-bit quantization: `min(255, ⌈impact / scale⌉)`.
pub fn quantize(impact: f64, scale: f64) -> Result<u8> {
    Quantizer::new(scale, 8)?.quantize(impact)
}

pub fn dequantize(level: u8, scale: f64) -> f64 {
    level as f64 * scale
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostingsList {
    pub term_id: u32,
    pub ordinals: Vec<u32>,
    pub levels: Vec<u8>,
    pub max_level: u8,
}

impl PostingsList {
    pub fn len(&self) -> usize {
        self.ordinals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordinals.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u8)> + '_ {
        self.ordinals.iter().copied().zip(self.levels.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    pub lists: BTreeMap<u32, PostingsList>,
    doc_ids: Vec<String>,
    pub quant_scale: f64,
}

impl InvertedIndex {
    /// Builds from already encoded documents. Ordinals follow ascending
    /// doc_id order regardless of input order.
    pub fn from_vectors(mut docs: Vec<(String, SparseVector)>, quant_bits: u32) -> Result<Self> {
        if docs.is_empty() {
            return Err(LabError::EmptyCorpus);
        }
        docs.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = docs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(LabError::DuplicateDocId {
                doc_id: w[0].0.clone(),
                line: 0,
            });
        }
        let max_impact = docs.iter().map(|(_, v)| v.max_impact()).fold(0.0, f64::max);
        let quantizer = Quantizer::for_max_impact(max_impact, quant_bits)?;
        let mut lists: BTreeMap<u32, PostingsList> = BTreeMap::new();
        for (ord, (_, v)) in docs.iter().enumerate() {
            for (term, w) in v.iter() {
                let level = quantizer.quantize(w)?;
                if level == 0 {
                    continue;
                }
                let list = lists.entry(term).or_insert_with(|| PostingsList {
                    term_id: term,
                    ordinals: Vec::new(),
                    levels: Vec::new(),
                    max_level: 0,
                });
                list.ordinals.push(ord as u32);
                list.levels.push(level);
                list.max_level = list.max_level.max(level);
            }
        }
        if lists.is_empty() {
            log::warn!("all {} document encodings are empty; index has no postings", docs.len());
        }
        Ok(Self {
            lists,
            doc_ids: docs.into_iter().map(|(id, _)| id).collect(),
            quant_scale: quantizer.scale,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_id(&self, ordinal: u32) -> &str {
        &self.doc_ids[ordinal as usize]
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn ordinal(&self, doc_id: &str) -> Option<u32> {
        self.doc_ids
            .binary_search_by(|d| d.as_str().cmp(doc_id))
            .ok()
            .map(|i| i as u32)
    }

    pub fn list(&self, term: u32) -> Option<&PostingsList> {
        self.lists.get(&term)
    }

    pub fn total_postings(&self) -> usize {
        self.lists.values().map(PostingsList::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.doc_ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.quant_scale.to_le_bytes());
        out.extend_from_slice(&(self.lists.len() as u32).to_le_bytes());
        for id in &self.doc_ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for list in self.lists.values() {
            out.extend_from_slice(&list.term_id.to_le_bytes());
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            let mut prev = 0u32;
            for (i, &ord) in list.ordinals.iter().enumerate() {
                let delta = if i == 0 { ord } else { ord - prev };
                out.extend_from_slice(&delta.to_le_bytes());
                prev = ord;
            }
            out.extend_from_slice(&list.levels);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(LabError::Format("not an index file".into()));
        }
        let version = u32_le(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(LabError::Format(format!("unsupported index version {version}")));
        }
        let doc_count = u32_le(&mut r)? as usize;
        let mut scale = [0u8; 8];
        read(&mut r, &mut scale)?;
        let quant_scale = f64::from_le_bytes(scale);
        if !(quant_scale.is_finite() && quant_scale > 0.0) {
            return Err(LabError::Format(format!("bad quant_scale {quant_scale}")));
        }
        let term_count = u32_le(&mut r)? as usize;
        let mut doc_ids = Vec::with_capacity(doc_count.min(bytes.len()));
        for _ in 0..doc_count {
            let len = u32_le(&mut r)? as usize;
            if len > bytes.len() {
                return Err(LabError::Format("doc_id length out of range".into()));
            }
            let mut buf = vec![0u8; len];
            read(&mut r, &mut buf)?;
            doc_ids.push(String::from_utf8(buf).map_err(|_| LabError::Format("invalid utf8".into()))?);
        }
        let mut lists = BTreeMap::new();
        for _ in 0..term_count {
            let term_id = u32_le(&mut r)?;
            let len = u32_le(&mut r)? as usize;
            if len > doc_count {
                return Err(LabError::Format(format!(
                    "list for term {term_id} longer than doc_count"
                )));
            }
            let mut ordinals = Vec::with_capacity(len);
            let mut prev = 0u32;
            for i in 0..len {
                let delta = u32_le(&mut r)?;
                let ord = if i == 0 {
                    delta
                } else {
                    prev.checked_add(delta).unwrap_or(u32::MAX)
                };
                if (i > 0 && delta == 0) || ord as usize >= doc_count {
                    return Err(LabError::Format(format!("bad ordinals in list {term_id}")));
                }
                ordinals.push(ord);
                prev = ord;
            }
            let mut levels = vec![0u8; len];
            read(&mut r, &mut levels)?;
            if levels.contains(&0) {
                return Err(LabError::Format(format!("zero level in list {term_id}")));
            }
            let max_level = levels.iter().copied().max().unwrap_or(0);
            lists.insert(
                term_id,
                PostingsList {
                    term_id,
                    ordinals,
                    levels,
                    max_level,
                },
            );
        }
        Ok(Self {
            lists,
            doc_ids,
            quant_scale,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| LabError::Format("unexpected end of index data".into()))
}

fn u32_le(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Encodes every document of `corpus` and indexes the result.
pub fn build_index(
    params: &EncoderParams,
    controller: &VocabularyController,
    vocab: &BaseVocabulary,
    corpus: &Corpus,
    quant_bits: u32,
) -> Result<InvertedIndex> {
    if corpus.is_empty() {
        return Err(LabError::EmptyCorpus);
    }
    if params.meta.output_dim != controller.output_dim {
        return Err(LabError::DimensionMismatch {
            expected: params.meta.output_dim,
            got: controller.output_dim,
        });
    }
    let sel = ColumnSelection::new(params, &controller.allowed_mask())?;
    let max_len = params.config.max_len;
    let docs = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let tokens = crate::corpus::tokenize(&corpus.visible_text(i), vocab, max_len);
            encode_selected(params, &sel, &tokens).map(|v| (corpus.docs[i].doc_id.clone(), v))
        })
        .collect::<Result<Vec<_>>>()?;
    InvertedIndex::from_vectors(docs, quant_bits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermStat {
    pub term: String,
    pub term_id: u32,
    /// Sum of quantized levels over the list.
    pub count: u64,
    pub list_length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexStats {
    pub terms: Vec<TermStat>,
    pub total_postings: usize,
    pub doc_count: usize,
}

impl IndexStats {
    /// TSV `term \t count \t list_length`, longest lists first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("term\tcount\tlist_length\n");
        for t in &self.terms {
            out.push_str(&format!("{}\t{}\t{}\n", t.term, t.count, t.list_length));
        }
        out
    }
}

/// Per-term list lengths; latent dimensions are named `latent#k`.
pub fn index_stats(index: &InvertedIndex, controller: &VocabularyController, vocab: &BaseVocabulary) -> IndexStats {
    let mut terms: Vec<TermStat> = index
        .lists
        .values()
        .map(|l| TermStat {
            term: controller.term_label(l.term_id, vocab),
            term_id: l.term_id,
            count: l.levels.iter().map(|&v| v as u64).sum(),
            list_length: l.len(),
        })
        .collect();
    terms.sort_by(|a, b| b.list_length.cmp(&a.list_length).then(a.term_id.cmp(&b.term_id)));
    IndexStats {
        terms,
        total_postings: index.total_postings(),
        doc_count: index.doc_count(),
    }
}

/// Document frequencies and lengths over the base vocabulary. `[UNK]` and
/// other specials are not terms and do not count towards length.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Stats {
    pub df: Vec<u32>,
    pub doc_len: Vec<u32>,
    pub avg_len: f64,
    pub doc_count: usize,
}

impl Bm25Stats {
    pub fn df(&self, term: u32) -> u32 {
        self.df.get(term as usize).copied().unwrap_or(0)
    }
}

/// Term-frequency postings plus BM25 statistics, ordinals in doc_id order.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    pub stats: Bm25Stats,
    pub postings: Vec<Vec<(u32, u32)>>,
    doc_ids: Vec<String>,
}

impl Bm25Index {
    pub fn doc_id(&self, ordinal: u32) -> &str {
        &self.doc_ids[ordinal as usize]
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }
}

fn doc_terms(corpus: &Corpus, vocab: &BaseVocabulary) -> Vec<(String, Vec<u32>)> {
    let mut docs: Vec<(String, Vec<u32>)> = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let terms = term_ids(&corpus.visible_text(i), vocab)
                .into_iter()
                .filter(|&t| !BaseVocabulary::is_special(t))
                .collect();
            (corpus.docs[i].doc_id.clone(), terms)
        })
        .collect();
    docs.sort_by(|a, b| a.0.cmp(&b.0));
    docs
}

pub fn build_bm25_index(corpus: &Corpus, vocab: &BaseVocabulary) -> Result<Bm25Index> {
    if corpus.is_empty() {
        return Err(LabError::EmptyCorpus);
    }
    let docs = doc_terms(corpus, vocab);
    let mut postings: Vec<Vec<(u32, u32)>> = vec![Vec::new(); vocab.len()];
    let mut doc_len = Vec::with_capacity(docs.len());
    for (ord, (_, terms)) in docs.iter().enumerate() {
        let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
        for &t in terms {
            *tf.entry(t).or_default() += 1;
        }
        for (t, c) in tf {
            postings[t as usize].push((ord as u32, c));
        }
        doc_len.push(terms.len() as u32);
    }
    let df = postings.iter().map(|p| p.len() as u32).collect();
    let avg_len = doc_len.iter().map(|&l| l as f64).sum::<f64>() / docs.len() as f64;
    Ok(Bm25Index {
        stats: Bm25Stats {
            df,
            doc_len,
            avg_len,
            doc_count: docs.len(),
        },
        postings,
        doc_ids: docs.into_iter().map(|(id, _)| id).collect(),
    })
}

pub fn build_bm25_stats(corpus: &Corpus, vocab: &BaseVocabulary) -> Result<Bm25Stats> {
    Ok(build_bm25_index(corpus, vocab)?.stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::train_tokenizer;

    fn sv(p: &[(u32, f64)]) -> SparseVector {
        SparseVector::from_pairs(p.iter().copied(), 0)
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, 0.1).unwrap(), 0);
        let max = 3.7;
        assert_eq!(quantize(max, max / 255.0).unwrap(), 255);
        assert_eq!(quantize(1.0, 2.0 / 255.0).unwrap(), 128);
        assert!(matches!(quantize(-0.1, 1.0), Err(LabError::NegativeImpact(_))));
        assert!(quantize(1.0, 0.0).is_err());
        assert_eq!(quantize(1e9, 1.0).unwrap(), 255);
    }

    #[test]
    fn dequantize_within_one_step_on_grid() {
        let scale = 2.5 / 255.0;
        for i in 0..=10_000 {
            let x = 2.5 * i as f64 / 10_000.0;
            let back = dequantize(quantize(x, scale).unwrap(), scale);
            assert!((back - x).abs() <= scale * (1.0 + 1e-12), "x={x}");
            assert!(back >= x - 1e-12);
        }
    }

    #[test]
    fn singleton_and_two_term_levels() {
        let idx = InvertedIndex::from_vectors(vec![("d".into(), sv(&[(7, 1.0)]))], 8).unwrap();
        assert_eq!(idx.lists.len(), 1);
        assert_eq!(idx.list(7).unwrap().levels, vec![255]);

        let idx = InvertedIndex::from_vectors(vec![("d".into(), sv(&[(0, 2.0), (1, 1.0)]))], 8).unwrap();
        assert_eq!(idx.list(0).unwrap().levels, vec![255]);
        assert_eq!(idx.list(1).unwrap().levels, vec![128]);
    }

    #[test]
    fn ordinals_follow_doc_id_order() {
        let idx = InvertedIndex::from_vectors(
            vec![
                ("b".into(), sv(&[(1, 1.0)])),
                ("a".into(), sv(&[(1, 0.5), (2, 0.1)])),
                ("c".into(), sv(&[])),
            ],
            8,
        )
        .unwrap();
        assert_eq!(idx.doc_ids(), &["a", "b", "c"]);
        assert_eq!(idx.list(1).unwrap().ordinals, vec![0, 1]);
        assert_eq!(idx.ordinal("c"), Some(2));
        for l in idx.lists.values() {
            assert!(l.ordinals.windows(2).all(|w| w[0] < w[1]));
            assert!(l.levels.iter().all(|&v| v >= 1));
            assert_eq!(l.max_level, *l.levels.iter().max().unwrap());
        }
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(
            InvertedIndex::from_vectors(vec![], 8),
            Err(LabError::EmptyCorpus)
        ));
        let idx = InvertedIndex::from_vectors(vec![("a".into(), sv(&[]))], 8).unwrap();
        assert!(idx.lists.is_empty());
        assert!(idx.quant_scale > 0.0);
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let idx = InvertedIndex::from_vectors(
            (0..20)
                .map(|i| (format!("doc{i}"), sv(&[(i % 3, 0.1 + i as f64), (5, 0.3)])))
                .collect(),
            8,
        )
        .unwrap();
        let bytes = idx.to_bytes();
        assert_eq!(InvertedIndex::from_bytes(&bytes).unwrap(), idx);
        assert_eq!(idx.to_bytes(), bytes);
        assert!(InvertedIndex::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(InvertedIndex::from_bytes(&bad).is_err());
    }

    #[test]
    fn bm25_stats_by_hand() {
        let c = Corpus::from_texts(&["a b", "a"]);
        let v = train_tokenizer(&c, 10, 1).unwrap();
        let s = build_bm25_stats(&c, &v).unwrap();
        assert_eq!(s.df(v.id("a").unwrap()), 2);
        assert_eq!(s.df(v.id("b").unwrap()), 1);
        assert_eq!(s.df(999), 0);
        assert_eq!(s.avg_len, 1.5);
        assert!(build_bm25_stats(&Corpus::default(), &v).is_err());
    }
}
