//! Vocabulary controllers: which output dimensions the encoder may assign
//! weight to.
//!
//! A controller restricts the base vocabulary (stopwords only, no stopwords,
//! random or rarest tokens) or extends it with latent dimensions that have
//! no surface string. Latent dimensions occupy ids `base_size..output_dim`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BaseVocabulary, FrequencyTable};
use crate::error::{LabError, Result};

const BUNDLED_STOPLIST: &str = include_str!("../data/stopwords_en.txt");

/// The bundled English stopword list (179 entries), in list order.
pub fn default_stoplist() -> Vec<String> {
    BUNDLED_STOPLIST.lines().map(str::to_string).collect()
}

pub fn load_stoplist(path: &Path) -> Result<Vec<String>> {
    let raw = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    Ok(raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControllerKind {
    Full,
    NoStop,
    StopOnly,
    RandomK,
    LowfreqK,
    LatentOnlyK,
    AddedLatentK,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 7] = [
        ControllerKind::Full,
        ControllerKind::NoStop,
        ControllerKind::StopOnly,
        ControllerKind::RandomK,
        ControllerKind::LowfreqK,
        ControllerKind::LatentOnlyK,
        ControllerKind::AddedLatentK,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Full => "full",
            ControllerKind::NoStop => "no_stop",
            ControllerKind::StopOnly => "stop_only",
            ControllerKind::RandomK => "random_k",
            ControllerKind::LowfreqK => "lowfreq_k",
            ControllerKind::LatentOnlyK => "latent_only_k",
            ControllerKind::AddedLatentK => "added_latent_k",
        }
    }

    fn needs_k(self) -> bool {
        matches!(
            self,
            ControllerKind::RandomK
                | ControllerKind::LowfreqK
                | ControllerKind::LatentOnlyK
                | ControllerKind::AddedLatentK
        )
    }
}

impl FromStr for ControllerKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LabError::InvalidControllerSpec(format!("unknown kind '{s}'")))
    }
}

/// Which controller to build. Textual form is `kind` or `kind:k`, e.g.
/// `stop_only:150` or `latent_only_k:768`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub k: Option<usize>,
    pub seed: u64,
}

impl ControllerSpec {
    pub fn new(kind: ControllerKind, k: Option<usize>, seed: u64) -> Result<Self> {
        let spec = Self { kind, k, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn full() -> Self {
        Self {
            kind: ControllerKind::Full,
            k: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.needs_k(), self.k) {
            (true, None) => Err(LabError::InvalidControllerSpec(format!(
                "{} requires k",
                self.kind.as_str()
            ))),
            (_, Some(0)) => Err(LabError::InvalidControllerSpec("k must be > 0".into())),
            (false, Some(_)) if self.kind != ControllerKind::StopOnly => Err(LabError::InvalidControllerSpec(format!(
                "{} takes no k",
                self.kind.as_str()
            ))),
            _ => Ok(()),
        }
    }

    /// Short system name, e.g. `stop-150`, `added-latent-768`.
    pub fn label(&self) -> String {
        let k = self.k.map(|k| format!("-{k}")).unwrap_or_default();
        match self.kind {
            ControllerKind::Full => "full".into(),
            ControllerKind::NoStop => "no-stop".into(),
            ControllerKind::StopOnly => format!("stop{k}"),
            ControllerKind::RandomK => format!("random{k}"),
            ControllerKind::LowfreqK => format!("lowfreq{k}"),
            ControllerKind::LatentOnlyK => format!("latent{k}"),
            ControllerKind::AddedLatentK => format!("added-latent{k}"),
        }
    }

    /// Parses `kind[:k]` with the given seed.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let s = s.trim();
        let (kind, k) = match s.split_once(':') {
            Some((kind, k)) => {
                let k = k
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| LabError::InvalidControllerSpec(format!("bad k in '{s}'")))?;
                (kind.trim(), Some(k))
            }
            None => (s, None),
        };
        Self::new(kind.parse()?, k, seed)
    }
}

impl fmt::Display for ControllerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.k {
            Some(k) => write!(f, "{}:{}", self.kind.as_str(), k),
            None => f.write_str(self.kind.as_str()),
        }
    }
}

/// A built controller. `allowed` is sorted and never contains special ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabularyController {
    pub spec: ControllerSpec,
    pub base_size: usize,
    pub allowed: Vec<u32>,
    pub n_latent: usize,
    pub output_dim: usize,
    /// |stoplist ∩ base| for the stopword kinds, before any truncation.
    pub stoplist_hits: Option<usize>,
}

fn stop_ids(base: &BaseVocabulary, stoplist: &[String]) -> Vec<u32> {
    let mut seen = std::collections::HashSet::new();
    stoplist
        .iter()
        .filter_map(|t| base.id(t))
        .filter(|&id| !BaseVocabulary::is_special(id) && seen.insert(id))
        .collect()
}

pub fn build_controller(
    spec: ControllerSpec,
    base: &BaseVocabulary,
    freq: &FrequencyTable,
    stoplist: &[String],
) -> Result<VocabularyController> {
    spec.validate()?;
    let base_size = base.len();
    let non_special: Vec<u32> = base.non_special_ids().collect();
    let shortfall = |requested: usize, available: usize| LabError::Shortfall {
        kind: spec.kind.as_str().to_string(),
        requested,
        available,
    };
    let mut stoplist_hits = None;
    let mut n_latent = 0;

    let mut allowed: Vec<u32> = match spec.kind {
        ControllerKind::Full => non_special,
        ControllerKind::NoStop => {
            if stoplist.is_empty() {
                return Err(LabError::InvalidControllerSpec("no_stop needs a stoplist".into()));
            }
            let stops: std::collections::HashSet<u32> = stop_ids(base, stoplist).into_iter().collect();
            stoplist_hits = Some(stops.len());
            non_special.into_iter().filter(|id| !stops.contains(id)).collect()
        }
        ControllerKind::StopOnly => {
            if stoplist.is_empty() {
                return Err(LabError::InvalidControllerSpec("stop_only needs a stoplist".into()));
            }
            let mut ids = stop_ids(base, stoplist);
            stoplist_hits = Some(ids.len());
            if ids.is_empty() {
                return Err(LabError::InvalidControllerSpec(
                    "stoplist shares no tokens with the base vocabulary".into(),
                ));
            }
            if let Some(k) = spec.k {
                if k > ids.len() {
                    return Err(shortfall(k, ids.len()));
                }
                ids.truncate(k);
            }
            ids
        }
        ControllerKind::RandomK => {
            let k = spec.k.unwrap_or_default();
            if k > non_special.len() {
                return Err(shortfall(k, non_special.len()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rand::seq::index::sample(&mut rng, non_special.len(), k)
                .into_iter()
                .map(|i| non_special[i])
                .collect()
        }
        ControllerKind::LowfreqK => {
            let k = spec.k.unwrap_or_default();
            let mut cands: Vec<u32> = non_special.into_iter().filter(|&id| freq.get(id) > 0).collect();
            if k > cands.len() {
                return Err(shortfall(k, cands.len()));
            }
            cands.sort_by(|&a, &b| {
                freq.get(a)
                    .cmp(&freq.get(b))
                    .then_with(|| base.token(a).cmp(&base.token(b)))
            });
            cands.truncate(k);
            cands
        }
        ControllerKind::LatentOnlyK => {
            n_latent = spec.k.unwrap_or_default();
            (base_size as u32..(base_size + n_latent) as u32).collect()
        }
        ControllerKind::AddedLatentK => {
            n_latent = spec.k.unwrap_or_default();
            non_special
                .into_iter()
                .chain(base_size as u32..(base_size + n_latent) as u32)
                .collect()
        }
    };
    allowed.sort_unstable();
    Ok(VocabularyController {
        spec,
        base_size,
        allowed,
        n_latent,
        output_dim: base_size + n_latent,
        stoplist_hits,
    })
}

impl VocabularyController {
    /// `mask[j]` is true iff `j` is allowed.
    pub fn allowed_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.output_dim];
        for &j in &self.allowed {
            mask[j as usize] = true;
        }
        mask
    }

    pub fn is_latent(&self, id: u32) -> bool {
        id as usize >= self.base_size
    }

    /// Surface string of an output dimension, `latent#k` for latent ids.
    pub fn term_label(&self, id: u32, base: &BaseVocabulary) -> String {
        if self.is_latent(id) {
            format!("latent#{}", id as usize - self.base_size)
        } else {
            base.token(id).unwrap_or("?").to_string()
        }
    }

    /// Plain-text header followed by one allowed id per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("# splade-lab controller v1\n");
        out.push_str(&format!("kind\t{}\n", self.spec.kind.as_str()));
        out.push_str(&format!(
            "k\t{}\n",
            self.spec.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into())
        ));
        out.push_str(&format!("seed\t{}\n", self.spec.seed));
        out.push_str(&format!("base_size\t{}\n", self.base_size));
        out.push_str(&format!("n_latent\t{}\n", self.n_latent));
        out.push_str(&format!(
            "stoplist_hits\t{}\n",
            self.stoplist_hits.map(|k| k.to_string()).unwrap_or_else(|| "-".into())
        ));
        out.push_str(&format!("allowed\t{}\n", self.allowed.len()));
        for id in &self.allowed {
            out.push_str(&format!("{id}\n"));
        }
        fs::write(path, out).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut lines = raw.lines().enumerate();
        let mut header = std::collections::HashMap::new();
        let bad = |line: usize, m: &str| LabError::parse(path, line + 1, m);
        match lines.next() {
            Some((_, "# splade-lab controller v1")) => {}
            _ => return Err(bad(0, "missing controller header")),
        }
        let mut n_allowed = None;
        for (i, line) in lines.by_ref() {
            let (key, value) = line.split_once('\t').ok_or_else(|| bad(i, "expected key<TAB>value"))?;
            if key == "allowed" {
                n_allowed = Some(value.parse::<usize>().map_err(|_| bad(i, "bad allowed count"))?);
                break;
            }
            header.insert(key.to_string(), value.to_string());
        }
        let n_allowed = n_allowed.ok_or_else(|| bad(0, "missing allowed section"))?;
        let get = |k: &str| header.get(k).cloned().ok_or_else(|| bad(0, &format!("missing {k}")));
        let opt = |v: String| -> Result<Option<usize>> {
            if v == "-" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad(0, "bad number"))
            }
        };
        let kind: ControllerKind = get("kind")?.parse()?;
        let k = opt(get("k")?)?;
        let seed: u64 = get("seed")?.parse().map_err(|_| bad(0, "bad seed"))?;
        let base_size: usize = get("base_size")?.parse().map_err(|_| bad(0, "bad base_size"))?;
        let n_latent: usize = get("n_latent")?.parse().map_err(|_| bad(0, "bad n_latent"))?;
        let stoplist_hits = opt(get("stoplist_hits")?)?;
        let mut allowed = Vec::with_capacity(n_allowed);
        for (i, line) in lines {
            allowed.push(line.trim().parse::<u32>().map_err(|_| bad(i, "bad id"))?);
        }
        if allowed.len() != n_allowed {
            return Err(bad(0, "allowed count mismatch"));
        }
        let output_dim = base_size + n_latent;
        if allowed.windows(2).any(|w| w[0] >= w[1]) || allowed.iter().any(|&a| a as usize >= output_dim) {
            return Err(bad(0, "allowed ids must be sorted, unique and < output_dim"));
        }
        Ok(Self {
            spec: ControllerSpec::new(kind, k, seed)?,
            base_size,
            allowed,
            n_latent,
            output_dim,
            stoplist_hits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{token_frequencies, train_tokenizer, Corpus};

    fn vocab_with(words: &[&str]) -> BaseVocabulary {
        BaseVocabulary::from_tokens(
            crate::corpus::SPECIAL_TOKENS
                .iter()
                .map(|s| s.to_string())
                .chain(words.iter().map(|s| s.to_string()))
                .collect(),
        )
        .unwrap()
    }

    fn empty_freq(v: &BaseVocabulary) -> FrequencyTable {
        FrequencyTable {
            counts: vec![0; v.len()],
            total_tokens: 0,
        }
    }

    #[test]
    fn bundled_stoplist_is_nonempty_and_unique() {
        let s = default_stoplist();
        assert_eq!(s.len(), 179);
        let set: std::collections::HashSet<_> = s.iter().collect();
        assert_eq!(set.len(), s.len());
    }

    #[test]
    fn spec_parsing() {
        let s = ControllerSpec::parse("stop_only:150", 0).unwrap();
        assert_eq!(s.kind, ControllerKind::StopOnly);
        assert_eq!(s.k, Some(150));
        assert_eq!(s.to_string(), "stop_only:150");
        assert_eq!(s.label(), "stop-150");
        assert!(ControllerSpec::parse("random_k", 0).is_err());
        assert!(ControllerSpec::parse("full:3", 0).is_err());
        assert!(ControllerSpec::parse("latent_only_k:0", 0).is_err());
        assert!(ControllerSpec::parse("bogus:1", 0).is_err());
    }

    #[test]
    fn full_excludes_specials() {
        let v = vocab_with(&["a", "b", "c"]);
        let c = build_controller(ControllerSpec::full(), &v, &empty_freq(&v), &[]).unwrap();
        assert_eq!(c.allowed, vec![4, 5, 6]);
        assert_eq!(c.allowed_mask(), vec![false, false, false, false, true, true, true]);
    }

    #[test]
    fn lowfreq_tie_break_is_lexicographic() {
        let v = vocab_with(&["a", "c", "b"]);
        let mut f = empty_freq(&v);
        f.counts[4] = 5;
        f.counts[5] = 1;
        f.counts[6] = 1;
        let spec = ControllerSpec::new(ControllerKind::LowfreqK, Some(2), 0).unwrap();
        let c = build_controller(spec, &v, &f, &[]).unwrap();
        assert_eq!(c.allowed, vec![5, 6]);
        let spec = ControllerSpec::new(ControllerKind::LowfreqK, Some(1), 0).unwrap();
        let c = build_controller(spec, &v, &f, &[]).unwrap();
        // "b" (id 6) sorts before "c" (id 5)
        assert_eq!(c.allowed, vec![6]);
        // zero-frequency tokens are not candidates
        f.counts[6] = 0;
        let spec = ControllerSpec::new(ControllerKind::LowfreqK, Some(3), 0).unwrap();
        assert!(matches!(
            build_controller(spec, &v, &f, &[]),
            Err(LabError::Shortfall {
                requested: 3,
                available: 2,
                ..
            })
        ));
    }

    #[test]
    fn stop_controllers_partition_base() {
        let c = Corpus::from_texts(&["the cat and the dog sat on a mat"]);
        let v = train_tokenizer(&c, 100, 1).unwrap();
        let f = token_frequencies(&c, &v);
        let stops = default_stoplist();
        let only = build_controller(ControllerSpec::parse("stop_only", 0).unwrap(), &v, &f, &stops).unwrap();
        let no = build_controller(ControllerSpec::parse("no_stop", 0).unwrap(), &v, &f, &stops).unwrap();
        let mut union: Vec<u32> = only.allowed.iter().chain(&no.allowed).copied().collect();
        union.sort_unstable();
        assert_eq!(union, v.non_special_ids().collect::<Vec<_>>());
        assert!(only.allowed.iter().all(|a| !no.allowed.contains(a)));
        assert_eq!(only.stoplist_hits, Some(4));

        let trunc = build_controller(ControllerSpec::parse("stop_only:2", 0).unwrap(), &v, &f, &stops).unwrap();
        // list order is "a", "the", "and", ..., "on"
        let names: Vec<&str> = trunc.allowed.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(trunc.allowed.len(), 2);
        assert!(names.contains(&"a") && names.contains(&"the"), "{names:?}");

        assert!(matches!(
            build_controller(ControllerSpec::parse("stop_only:10", 0).unwrap(), &v, &f, &stops),
            Err(LabError::Shortfall { .. })
        ));
        let none = vocab_with(&["zebra"]);
        assert!(build_controller(
            ControllerSpec::parse("stop_only", 0).unwrap(),
            &none,
            &empty_freq(&none),
            &stops
        )
        .is_err());
    }

    #[test]
    fn random_k_is_seeded() {
        let words: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let v = vocab_with(&refs);
        let f = empty_freq(&v);
        let a = build_controller(ControllerSpec::parse("random_k:20", 1).unwrap(), &v, &f, &[]).unwrap();
        let b = build_controller(ControllerSpec::parse("random_k:20", 1).unwrap(), &v, &f, &[]).unwrap();
        let c = build_controller(ControllerSpec::parse("random_k:20", 2).unwrap(), &v, &f, &[]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.allowed, c.allowed);
        assert_eq!(a.allowed.len(), 20);
        let all = build_controller(ControllerSpec::parse("random_k:500", 9).unwrap(), &v, &f, &[]).unwrap();
        assert_eq!(all.allowed, v.non_special_ids().collect::<Vec<_>>());
        assert!(build_controller(ControllerSpec::parse("random_k:501", 9).unwrap(), &v, &f, &[]).is_err());
    }

    #[test]
    fn latent_controllers_extend_output_dim() {
        let v = vocab_with(&["a", "b"]);
        let f = empty_freq(&v);
        let only = build_controller(ControllerSpec::parse("latent_only_k:150", 3).unwrap(), &v, &f, &[]).unwrap();
        assert_eq!(only.output_dim, v.len() + 150);
        let mask = only.allowed_mask();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 150);
        assert!(mask[..v.len()].iter().all(|&m| !m));
        assert_eq!(only.term_label(v.len() as u32 + 3, &v), "latent#3");

        let added = build_controller(ControllerSpec::parse("added_latent_k:768", 3).unwrap(), &v, &f, &[]).unwrap();
        assert_eq!(added.output_dim, v.len() + 768);
        assert_eq!(added.allowed.len(), 2 + 768);
    }

    #[test]
    fn controller_file_round_trip() {
        let v = vocab_with(&["a", "b", "the"]);
        let c = build_controller(
            ControllerSpec::parse("stop_only:1", 5).unwrap(),
            &v,
            &empty_freq(&v),
            &default_stoplist(),
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        c.save(f.path()).unwrap();
        assert_eq!(VocabularyController::load(f.path()).unwrap(), c);
    }
}
