//! Shared oracles for the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splade_lab::corpus::{token_frequencies, train_tokenizer, Corpus, Query};
use splade_lab::encoder::{EncoderConfig, EncoderParams};
use splade_lab::eval::Qrels;
use splade_lab::index::build_bm25_index;
use splade_lab::train::{mine_hard_negatives, Batch, BatchBuilder, TrainingTriple};
use splade_lab::vocab::{build_controller, default_stoplist, ControllerSpec, VocabularyController};

/// Copy of `p` with one scalar shifted by `delta`.
pub fn perturbed(p: &EncoderParams, tensor: usize, entry: usize, delta: f64) -> EncoderParams {
    let mut q = p.clone();
    let mut i = 0;
    q.for_each_tensor_mut(|_, t| {
        if i == tensor {
            let flat = t.as_slice_mut().expect("standard layout");
            flat[entry] += delta;
        }
        i += 1;
    });
    q
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs());
        if denom == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / denom
        }
    }
}

/// Central differences on `n` random scalars whose analytic gradient is at
/// least `min_grad` in magnitude, plus `n_zero` scalars whose analytic
/// gradient is exactly zero.
pub fn finite_difference_probes(
    params: &EncoderParams,
    grads: &EncoderParams,
    loss: impl Fn(&EncoderParams) -> f64,
    n: usize,
    n_zero: usize,
    min_grad: f64,
    eps: f64,
    seed: u64,
) -> (Vec<Probe>, Vec<Probe>) {
    let tensors = grads.tensors();
    let mut live = Vec::new();
    let mut dead = Vec::new();
    for (ti, (name, g)) in tensors.iter().enumerate() {
        for (ei, &v) in g.iter().enumerate() {
            if v.abs() >= min_grad {
                live.push((ti, name.clone(), ei, v));
            } else if v == 0.0 {
                dead.push((ti, name.clone(), ei, v));
            }
        }
    }
    assert!(live.len() >= n, "only {} entries with |grad| >= {min_grad}", live.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |pool: &Vec<(usize, String, usize, f64)>, k: usize| -> Vec<Probe> {
        let k = k.min(pool.len());
        rand::seq::index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|i| {
                let (ti, name, ei, a) = &pool[i];
                let plus = loss(&perturbed(params, *ti, *ei, eps));
                let minus = loss(&perturbed(params, *ti, *ei, -eps));
                Probe {
                    name: name.clone(),
                    entry: *ei,
                    analytic: *a,
                    numeric: (plus - minus) / (2.0 * eps),
                }
            })
            .collect()
    };
    let a = pick(&live, n);
    let b = pick(&dead, n_zero);
    (a, b)
}

/// Uniform draw helper for fixtures.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub struct Fixture {
    pub corpus: Corpus,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

pub fn fixture() -> Fixture {
    let texts = [
        "the river bank was muddy after the storm",
        "a bank loan has interest and fees",
        "storm clouds gathered over the muddy river",
        "interest rates rise when the bank says so",
        "fees for a loan are paid to the lender",
        "the lender and the river have nothing in common",
        "clouds are made of water and dust",
        "water flows in the river to the sea",
    ];
    let corpus = Corpus::from_texts(&texts);
    let qtexts = ["muddy river", "loan interest", "storm clouds", "water sea"];
    let targets = ["d0", "d1", "d2", "d7"];
    let mut qrels = Qrels::default();
    let queries = qtexts
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (t, d))| {
            qrels.insert(&format!("q{i}"), d, 1);
            Query {
                query_id: format!("q{i}"),
                text: t.to_string(),
            }
        })
        .collect();
    Fixture { corpus, queries, qrels }
}

/// d_model 16, two layers.
pub fn grad_config(tie: bool) -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        tie_embeddings: tie,
    }
}

/// Small batch (3 queries, 2 hard negatives) and a controller built from
/// `spec` over the fixture vocabulary.
pub fn grad_setup(spec: &str) -> (Fixture, Batch, VocabularyController, usize) {
    let f = fixture();
    let vocab = train_tokenizer(&f.corpus, 200, 1).unwrap();
    let freq = token_frequencies(&f.corpus, &vocab);
    let c = build_controller(
        ControllerSpec::parse(spec, 1).unwrap(),
        &vocab,
        &freq,
        &default_stoplist(),
    )
    .unwrap();
    let bm25 = build_bm25_index(&f.corpus, &vocab).unwrap();
    let triples = mine_hard_negatives(&bm25, &vocab, &f.queries, &f.qrels, 20, 2, 9).unwrap();
    let builder = BatchBuilder::new(&f.corpus, &f.queries, &vocab, 16);
    let refs: Vec<&TrainingTriple> = triples.iter().take(3).collect();
    let batch = builder.build(&refs, 2).unwrap();
    let base = vocab.len();
    (f, batch, c, base)
}
