//! The toy SPLADE encoder: transformer contextual embeddings, an MLM head
//! mapping each embedding to one logit per output dimension, and masked
//! log-saturated max pooling into a [`SparseVector`]. A dense variant takes
//! the `[CLS]` row of the contextual embeddings instead.

mod model;
mod params;
mod sparse;

use ndarray::Array2;

/// Pooling rule recorded in run manifests.
pub const POOLING: &str = "max over all token rows, [CLS] and [SEP] included";

pub use params::{EncoderConfig, EncoderKind, EncoderParams, LayerParams, MlmHeadParams, ParamsMeta, FORMAT_VERSION};
pub use sparse::{pool_sparse, score, DenseVector, SparseVector};

pub(crate) use sparse::{pool_argmax, PooledDim};

use crate::corpus::{tokenize, BaseVocabulary, TokenSequence};
use crate::error::{LabError, Result};
use crate::vocab::VocabularyController;

/// A recorded transformer forward pass that can be differentiated.
pub struct HiddenPass {
    cache: model::SeqCache,
}

impl HiddenPass {
    /// Contextual embeddings, one row per input token.
    pub fn hidden(&self) -> &Array2<f64> {
        &self.cache.hidden
    }

    /// Accumulates into `grads` the gradient of a scalar whose gradient with
    /// respect to the hidden states is `dhidden`.
    pub fn backward(&self, params: &EncoderParams, grads: &mut EncoderParams, dhidden: Array2<f64>) {
        model::transformer_backward(params, grads, &self.cache, dhidden);
    }
}

/// Projection rows and bias entries of the allowed output dims, gathered
/// once so that disallowed logits are never computed.
#[derive(Debug, Clone)]
pub struct ColumnSelection {
    cols: Vec<u32>,
    proj: Array2<f64>,
    bias: Array2<f64>,
}

impl ColumnSelection {
    pub fn new(params: &EncoderParams, mask: &[bool]) -> Result<Self> {
        let (Some(head), Some(proj)) = (params.head.as_ref(), params.projection()) else {
            return Err(LabError::InvalidConfig("dense encoder has no MLM head".into()));
        };
        if mask.len() != params.meta.output_dim {
            return Err(LabError::DimensionMismatch {
                expected: params.meta.output_dim,
                got: mask.len(),
            });
        }
        let cols: Vec<u32> = (0..mask.len() as u32).filter(|&j| mask[j as usize]).collect();
        let idx: Vec<usize> = cols.iter().map(|&j| j as usize).collect();
        Ok(Self {
            proj: proj.select(ndarray::Axis(0), &idx),
            bias: head.bias.select(ndarray::Axis(1), &idx),
            cols,
        })
    }

    pub fn columns(&self) -> &[u32] {
        &self.cols
    }
}

/// A recorded forward pass through the transformer and the MLM head.
pub struct LogitPass {
    hidden: HiddenPass,
    head: model::HeadCache,
    columns: Option<Vec<u32>>,
}

impl LogitPass {
    pub fn hidden(&self) -> &Array2<f64> {
        self.hidden.hidden()
    }

    /// Importance logits: `n × output_dim`, or one column per selected dim
    /// for a pass made with a [`ColumnSelection`].
    pub fn logits(&self) -> &Array2<f64> {
        &self.head.logits
    }

    /// Output dim of each logit column.
    pub fn column_dim(&self, col: usize) -> u32 {
        self.columns.as_ref().map_or(col as u32, |c| c[col])
    }

    /// Max-pool winners in output-dim ids. A selected pass pools every
    /// column and ignores `mask`; a full pass pools the columns it allows.
    pub(crate) fn pooled(&self, mask: &[bool]) -> Vec<PooledDim> {
        match &self.columns {
            Some(cols) => {
                let all = vec![true; cols.len()];
                let mut p = pool_argmax(&self.head.logits, &all);
                for d in &mut p {
                    d.dim = cols[d.dim as usize];
                }
                p
            }
            None => pool_argmax(&self.head.logits, mask),
        }
    }

    pub fn backward(&self, params: &EncoderParams, grads: &mut EncoderParams, dlogits: &Array2<f64>) {
        let dh = model::head_backward(params, grads, self.hidden.hidden(), &self.head, dlogits);
        self.hidden.backward(params, grads, dh);
    }

    /// Same as [`LogitPass::backward`] for a logit gradient given as
    /// `(row, column, value)` triples.
    pub fn backward_sparse(&self, params: &EncoderParams, grads: &mut EncoderParams, dlogits: &[(usize, u32, f64)]) {
        let dh = model::head_backward_sparse(params, grads, self.hidden.hidden(), &self.head, dlogits);
        self.hidden.backward(params, grads, dh);
    }
}

impl EncoderParams {
    pub fn forward_hidden(&self, tokens: &TokenSequence) -> Result<HiddenPass> {
        Ok(HiddenPass {
            cache: model::transformer_forward(self, &tokens.ids)?,
        })
    }

    pub fn forward_logits(&self, tokens: &TokenSequence) -> Result<LogitPass> {
        if self.head.is_none() {
            return Err(LabError::InvalidConfig("dense encoder has no MLM head".into()));
        }
        let hidden = self.forward_hidden(tokens)?;
        let head = model::head_forward(self, hidden.hidden());
        Ok(LogitPass {
            hidden,
            head,
            columns: None,
        })
    }

    /// Forward pass computing only the selected logit columns.
    pub fn forward_selected(&self, tokens: &TokenSequence, sel: &ColumnSelection) -> Result<LogitPass> {
        if self.head.is_none() {
            return Err(LabError::InvalidConfig("dense encoder has no MLM head".into()));
        }
        let hidden = self.forward_hidden(tokens)?;
        let head = model::head_forward_with(self, hidden.hidden(), &sel.proj, &sel.bias);
        Ok(LogitPass {
            hidden,
            head,
            columns: Some(sel.cols.clone()),
        })
    }

    fn check_controller(&self, controller: &VocabularyController) -> Result<()> {
        if self.meta.output_dim != controller.output_dim {
            return Err(LabError::DimensionMismatch {
                expected: self.meta.output_dim,
                got: controller.output_dim,
            });
        }
        Ok(())
    }
}

/// Contextual embeddings `H` (n × d_model).
pub fn contextual_embeddings(params: &EncoderParams, tokens: &TokenSequence) -> Result<Array2<f64>> {
    Ok(params.forward_hidden(tokens)?.cache.hidden)
}

/// MLM importance logits for precomputed contextual embeddings.
pub fn mlm_logits(params: &EncoderParams, hidden: &Array2<f64>) -> Result<Array2<f64>> {
    if params.head.is_none() {
        return Err(LabError::InvalidConfig("dense encoder has no MLM head".into()));
    }
    if hidden.ncols() != params.config.d_model {
        return Err(LabError::DimensionMismatch {
            expected: params.config.d_model,
            got: hidden.ncols(),
        });
    }
    Ok(model::head_forward(params, hidden).logits)
}

/// Sparse representation of an already tokenized text.
pub fn encode_tokens(params: &EncoderParams, mask: &[bool], tokens: &TokenSequence) -> Result<SparseVector> {
    encode_selected(params, &ColumnSelection::new(params, mask)?, tokens)
}

/// [`encode_tokens`] with a precomputed column selection.
pub fn encode_selected(params: &EncoderParams, sel: &ColumnSelection, tokens: &TokenSequence) -> Result<SparseVector> {
    let pass = params.forward_selected(tokens, sel)?;
    let mut v = pool_sparse(pass.logits(), &vec![true; sel.cols.len()])?;
    v = SparseVector::from_pairs(v.iter().map(|(c, w)| (sel.cols[c as usize], w)), tokens.len());
    Ok(v)
}

pub fn encode(
    params: &EncoderParams,
    controller: &VocabularyController,
    vocab: &BaseVocabulary,
    text: &str,
) -> Result<SparseVector> {
    params.check_controller(controller)?;
    let tokens = tokenize(text, vocab, params.config.max_len);
    encode_tokens(params, &controller.allowed_mask(), &tokens)
}

/// `[CLS]` row of the contextual embeddings.
pub fn encode_dense_tokens(params: &EncoderParams, tokens: &TokenSequence) -> Result<DenseVector> {
    let h = contextual_embeddings(params, tokens)?;
    Ok(DenseVector {
        values: h.row(0).to_vec(),
    })
}

pub fn encode_dense(params: &EncoderParams, vocab: &BaseVocabulary, text: &str) -> Result<DenseVector> {
    encode_dense_tokens(params, &tokenize(text, vocab, params.config.max_len))
}
