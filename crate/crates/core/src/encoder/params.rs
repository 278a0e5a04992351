//! Encoder weights, deterministic initialization, and the binary
//! checkpoint format.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic "SPLDPRM\0" | version u32 | kind u8 (0 sparse, 1 dense)
//! d_model u32 | n_layers u32 | n_heads u32 | d_ff u32 | max_len u32 | tie u8
//! base_size u32 | output_dim u32 | controller (u32 len + utf8) | seed u64
//! n_tensors u32 | per tensor: name (u32 len + utf8) rows u32 cols u32 f64[rows*cols]
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LabError, Result};
use crate::vocab::VocabularyController;

const MAGIC: &[u8; 8] = b"SPLDPRM\0";
/// Version written after the magic bytes of saved parameters.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub tie_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            tie_embeddings: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(LabError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.max_len < 2 {
            return Err(LabError::InvalidConfig("max_len must be at least 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(LabError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Sparse,
    Dense,
}

/// Provenance stored in the checkpoint header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamsMeta {
    pub kind: EncoderKind,
    pub base_size: usize,
    pub output_dim: usize,
    pub controller: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
}

/// MLM head: dense + GELU + layer norm, then a projection onto the output
/// dimensions. The projection is the token embedding table when tied.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHeadParams {
    pub transform_w: Array2<f64>,
    pub transform_b: Array2<f64>,
    pub ln_g: Array2<f64>,
    pub ln_b: Array2<f64>,
    pub decoder: Option<Array2<f64>>,
    pub bias: Array2<f64>,
}

/// All weights. Bias and norm vectors are stored as `1 × width` matrices so
/// every tensor shares one representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub meta: ParamsMeta,
    pub token_embeddings: Array2<f64>,
    pub position_embeddings: Array2<f64>,
    pub emb_ln_g: Array2<f64>,
    pub emb_ln_b: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub head: Option<MlmHeadParams>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng))
    }

    /// Scaled normal with std 1/sqrt(fan_in).
    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Array2<f64> {
        self.normal(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }
}

fn ones(n: usize) -> Array2<f64> {
    Array2::ones((1, n))
}

fn zeros(n: usize) -> Array2<f64> {
    Array2::zeros((1, n))
}

const EMBEDDING_STD: f64 = 0.1;
/// Initial head bias in units of the initial logit std
/// (`EMBEDDING_STD · sqrt(d_model)`). Negative so that a fresh encoder
/// activates only a small fraction of its output dims.
pub const HEAD_BIAS_INIT_STDS: f64 = -2.65;

impl EncoderParams {
    /// Sparse (MLM-head) encoder over `controller.output_dim` dimensions.
    /// Latent rows of the embedding table are drawn like every other row.
    pub fn init_sparse(config: EncoderConfig, controller: &VocabularyController, seed: u64) -> Result<Self> {
        config.validate()?;
        let meta = ParamsMeta {
            kind: EncoderKind::Sparse,
            base_size: controller.base_size,
            output_dim: controller.output_dim,
            controller: controller.spec.to_string(),
            seed,
        };
        Ok(Self::init(config, meta, seed))
    }

    /// Dense dual encoder (no MLM head) over the base vocabulary.
    pub fn init_dense(config: EncoderConfig, base_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let meta = ParamsMeta {
            kind: EncoderKind::Dense,
            base_size,
            output_dim: base_size,
            controller: "dense".into(),
            seed,
        };
        Ok(Self::init(config, meta, seed))
    }

    fn init(config: EncoderConfig, meta: ParamsMeta, seed: u64) -> Self {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.d_model;
        let token_embeddings = init.normal(meta.output_dim, d, EMBEDDING_STD);
        let position_embeddings = init.normal(config.max_len, d, EMBEDDING_STD);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: init.linear(d, d),
                bq: zeros(d),
                wk: init.linear(d, d),
                bk: zeros(d),
                wv: init.linear(d, d),
                bv: zeros(d),
                wo: init.linear(d, d),
                bo: zeros(d),
                ln1_g: ones(d),
                ln1_b: zeros(d),
                w1: init.linear(d, config.d_ff),
                b1: zeros(config.d_ff),
                w2: init.linear(config.d_ff, d),
                b2: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
            })
            .collect();
        let head = (meta.kind == EncoderKind::Sparse).then(|| MlmHeadParams {
            transform_w: init.linear(d, d),
            transform_b: zeros(d),
            ln_g: ones(d),
            ln_b: zeros(d),
            decoder: (!config.tie_embeddings).then(|| init.normal(meta.output_dim, d, EMBEDDING_STD)),
            bias: Array2::from_elem(
                (1, meta.output_dim),
                HEAD_BIAS_INIT_STDS * EMBEDDING_STD * (d as f64).sqrt(),
            ),
        });
        Self {
            config,
            meta,
            token_embeddings,
            position_embeddings,
            emb_ln_g: ones(d),
            emb_ln_b: zeros(d),
            layers,
            head,
        }
    }

    /// Same shapes, all zeros. Used for gradients and momentum buffers.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.fill(0.0));
        z
    }

    /// Rows of the output projection (tied: the embedding table).
    pub fn projection(&self) -> Option<&Array2<f64>> {
        self.head
            .as_ref()
            .map(|h| h.decoder.as_ref().unwrap_or(&self.token_embeddings))
    }

    /// Visits every tensor in declared order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("token_embeddings".into(), &self.token_embeddings),
            ("position_embeddings".into(), &self.position_embeddings),
            ("emb_ln_g".into(), &self.emb_ln_g),
            ("emb_ln_b".into(), &self.emb_ln_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let named = [
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
            ];
            out.extend(named.into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        if let Some(h) = &self.head {
            out.push(("head.transform_w".into(), &h.transform_w));
            out.push(("head.transform_b".into(), &h.transform_b));
            out.push(("head.ln_g".into(), &h.ln_g));
            out.push(("head.ln_b".into(), &h.ln_b));
            if let Some(dec) = &h.decoder {
                out.push(("head.decoder".into(), dec));
            }
            out.push(("head.bias".into(), &h.bias));
        }
        out
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        f("token_embeddings", &mut self.token_embeddings);
        f("position_embeddings", &mut self.position_embeddings);
        f("emb_ln_g", &mut self.emb_ln_g);
        f("emb_ln_b", &mut self.emb_ln_b);
        for l in &mut self.layers {
            f("wq", &mut l.wq);
            f("bq", &mut l.bq);
            f("wk", &mut l.wk);
            f("bk", &mut l.bk);
            f("wv", &mut l.wv);
            f("bv", &mut l.bv);
            f("wo", &mut l.wo);
            f("bo", &mut l.bo);
            f("ln1_g", &mut l.ln1_g);
            f("ln1_b", &mut l.ln1_b);
            f("w1", &mut l.w1);
            f("b1", &mut l.b1);
            f("w2", &mut l.w2);
            f("b2", &mut l.b2);
            f("ln2_g", &mut l.ln2_g);
            f("ln2_b", &mut l.ln2_b);
        }
        if let Some(h) = &mut self.head {
            f("head.transform_w", &mut h.transform_w);
            f("head.transform_b", &mut h.transform_b);
            f("head.ln_g", &mut h.ln_g);
            f("head.ln_b", &mut h.ln_b);
            if let Some(dec) = &mut h.decoder {
                f("head.decoder", dec);
            }
            f("head.bias", &mut h.bias);
        }
    }

    /// Pairs every tensor of `self` with the same tensor of `other`.
    pub fn zip_mut(&mut self, other: &Self, mut f: impl FnMut(&mut Array2<f64>, &Array2<f64>)) {
        let others: Vec<&Array2<f64>> = other.tensors().into_iter().map(|(_, t)| t).collect();
        let mut i = 0;
        self.for_each_tensor_mut(|_, t| {
            f(t, others[i]);
            i += 1;
        });
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.zip_mut(other, |a, b| *a += b);
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.meta.kind {
            EncoderKind::Sparse => 0,
            EncoderKind::Dense => 1,
        });
        let c = &self.config;
        for v in [c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_len] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(c.tie_embeddings as u8);
        out.extend_from_slice(&(self.meta.base_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.meta.output_dim as u32).to_le_bytes());
        put_str(&mut out, &self.meta.controller);
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_str(&mut out, &name);
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(LabError::Format("not a parameter checkpoint".into()));
        }
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(LabError::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = match get_u8(&mut r)? {
            0 => EncoderKind::Sparse,
            1 => EncoderKind::Dense,
            k => return Err(LabError::Format(format!("bad encoder kind {k}"))),
        };
        let config = EncoderConfig {
            d_model: get_u32(&mut r)? as usize,
            n_layers: get_u32(&mut r)? as usize,
            n_heads: get_u32(&mut r)? as usize,
            d_ff: get_u32(&mut r)? as usize,
            max_len: get_u32(&mut r)? as usize,
            tie_embeddings: get_u8(&mut r)? != 0,
        };
        config.validate()?;
        let base_size = get_u32(&mut r)? as usize;
        let output_dim = get_u32(&mut r)? as usize;
        let controller = get_str(&mut r)?;
        let mut seed = [0u8; 8];
        read_exact(&mut r, &mut seed)?;
        let meta = ParamsMeta {
            kind,
            base_size,
            output_dim,
            controller,
            seed: u64::from_le_bytes(seed),
        };
        // Shapes come from a fresh skeleton; the file must agree with them.
        let mut params = Self::init(config, meta, 0);
        let n = get_u32(&mut r)? as usize;
        let expected = params.tensors().len();
        if n != expected {
            return Err(LabError::Format(format!("expected {expected} tensors, found {n}")));
        }
        let mut err = None;
        params.for_each_tensor_mut(|_, t| {
            if err.is_some() {
                return;
            }
            let res = (|| -> Result<()> {
                let _name = get_str(&mut r)?;
                let rows = get_u32(&mut r)? as usize;
                let cols = get_u32(&mut r)? as usize;
                if (rows, cols) != t.dim() {
                    return Err(LabError::Format(format!(
                        "tensor shape {rows}x{cols} does not match {:?}",
                        t.dim()
                    )));
                }
                let mut buf = [0u8; 8];
                for v in t.iter_mut() {
                    read_exact(&mut r, &mut buf)?;
                    *v = f64::from_le_bytes(buf);
                }
                Ok(())
            })();
            if let Err(e) = res {
                err = Some(e);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(params),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| LabError::Format("unexpected end of data".into()))
}

pub(crate) fn get_u8(r: &mut Cursor<&[u8]>) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

pub(crate) fn get_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > r.get_ref().len() {
        return Err(LabError::Format("string length out of range".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| LabError::Format("invalid utf8".into()))
}
