//! The hierarchical label-wise attention head: token-level attention over
//! each chunk, per-label stacking of chunk representations, chunk-level
//! attention (or a pooling variant) into a per-label document
//! representation, and a per-label sigmoid classifier with BCE loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, TensorEntry};
use crate::encoder::{self, ChunkEncoder, EncoderError};
use crate::params::{BoundParams, ParamSet, Parameter};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::textprep::{clean_text, ChunkedDocument, TokenChunk, Tokenizer, Vocabulary};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How per-label chunk representations combine into a document representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocRepr {
    ChunkAttention,
    MeanPool,
    MaxPool,
    FlatConcat,
}

impl DocRepr {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chunk_attention" => Ok(DocRepr::ChunkAttention),
            "mean_pool" => Ok(DocRepr::MeanPool),
            "max_pool" => Ok(DocRepr::MaxPool),
            "flat_concat" => Ok(DocRepr::FlatConcat),
            other => Err(ModelError::Config(format!("unknown document representation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_labels: usize,
    pub n_chunks: usize,
    pub content_len: usize,
    /// Single tanh mixing layer on top of the embedding encoder.
    pub mixing: bool,
    /// Exclude PAD slots from token attention. Off mimics attention over
    /// all slots including padding.
    pub mask_pads: bool,
    /// One token-attention parameter set per chunk instead of shared.
    pub multihead: bool,
    pub doc_repr: DocRepr,
    pub dropout_p: f64,
    pub threshold: f64,
    pub clip_eps: f64,
}

impl ModelConfig {
    pub fn new(d_model: usize, n_labels: usize) -> Self {
        ModelConfig {
            d_model,
            n_labels,
            n_chunks: 10,
            content_len: 510,
            mixing: true,
            mask_pads: true,
            multihead: false,
            doc_repr: DocRepr::ChunkAttention,
            dropout_p: 0.1,
            threshold: 0.5,
            clip_eps: 1e-7,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.content_len + 2
    }

    /// Width of the document representation fed to the classifier.
    pub fn repr_dim(&self) -> usize {
        match self.doc_repr {
            DocRepr::FlatConcat => self.d_model * self.n_chunks,
            _ => self.d_model,
        }
    }
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_U: &str = "head.u";
pub const HEAD_K: &str = "head.k";
pub const HEAD_V: &str = "head.v";
pub const HEAD_BETA: &str = "head.beta";
pub const HEAD_BIAS: &str = "head.bias";

fn token_attention_names(cfg: &ModelConfig, chunk_index: usize) -> (String, String) {
    if cfg.multihead {
        (format!("{HEAD_W}.{chunk_index}"), format!("{HEAD_U}.{chunk_index}"))
    } else {
        (HEAD_W.to_string(), HEAD_U.to_string())
    }
}

/// How the label representation matrix U is initialized.
pub enum InitScheme<'a> {
    Random,
    /// Column l of U becomes the mean encoder output over the tokenized
    /// description of label l.
    LabelEmbedding {
        descriptions: &'a [String],
        vocab: &'a Vocabulary,
        tokenizer: &'a Tokenizer,
    },
}

/// All trainable state: encoder tensors plus head tensors.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub set: ParamSet,
}

impl ModelParams {
    pub fn init(config: ModelConfig, vocab_size: usize, scheme: InitScheme, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut set = encoder::init_encoder_params(vocab_size, config.d_model, config.slot_count(), config.mixing, rng);

        let d = config.d_model;
        let labels = config.n_labels;
        let mut u_params: Vec<Parameter> = Vec::new();
        if config.multihead {
            for n in 0..config.n_chunks {
                set.push(Parameter::xavier(format!("{HEAD_W}.{n}"), d, d, rng));
            }
            for n in 0..config.n_chunks {
                u_params.push(Parameter::xavier(format!("{HEAD_U}.{n}"), d, labels, rng));
            }
        } else {
            set.push(Parameter::xavier(HEAD_W, d, d, rng));
            u_params.push(Parameter::xavier(HEAD_U, d, labels, rng));
        }

        if let InitScheme::LabelEmbedding { descriptions, vocab, tokenizer } = scheme {
            if descriptions.len() != labels {
                return Err(ModelError::Config(format!(
                    "label embedding init needs {labels} descriptions, got {}",
                    descriptions.len()
                )));
            }
            for u in &mut u_params {
                for (l, desc) in descriptions.iter().enumerate() {
                    let col = description_embedding(&set, &config, vocab, tokenizer, desc)?;
                    for (row, &v) in col.iter().enumerate() {
                        u.values[row * labels + l] = v;
                    }
                }
            }
        }
        for u in u_params {
            set.push(u);
        }

        if config.doc_repr == DocRepr::ChunkAttention {
            set.push(Parameter::xavier(HEAD_K, d, d, rng));
            set.push(Parameter::xavier(HEAD_V, d, 1, rng));
        }
        set.push(Parameter::xavier(HEAD_BETA, config.repr_dim(), labels, rng));
        set.push(Parameter::xavier(HEAD_BIAS, 1, labels, rng));

        let params = ModelParams { config, vocab_size, set };
        params.validate()?;
        Ok(params)
    }

    /// Shape and presence checks for the configured variant.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        for n in 0..if cfg.multihead { cfg.n_chunks } else { 0 } {
            for prefix in [HEAD_W, HEAD_U] {
                let name = format!("{prefix}.{n}");
                if self.set.get(&name).is_none() {
                    return Err(ModelError::Config(format!(
                        "multi-head attention with {} chunks is missing {name}",
                        cfg.n_chunks
                    )));
                }
            }
        }
        if !cfg.multihead && (self.set.get(HEAD_W).is_none() || self.set.get(HEAD_U).is_none()) {
            return Err(ModelError::Config("missing shared token attention parameters".into()));
        }
        if cfg.doc_repr == DocRepr::ChunkAttention && (self.set.get(HEAD_K).is_none() || self.set.get(HEAD_V).is_none()) {
            return Err(ModelError::Config("chunk attention requires head.k and head.v".into()));
        }
        let beta = self
            .set
            .get(HEAD_BETA)
            .ok_or_else(|| ModelError::Config("missing classifier weights".into()))?;
        if beta.rows != cfg.repr_dim() || beta.cols != cfg.n_labels {
            return Err(ModelError::Config(format!(
                "classifier weights are {}x{}, expected {}x{}",
                beta.rows,
                beta.cols,
                cfg.repr_dim(),
                cfg.n_labels
            )));
        }
        Ok(())
    }

    pub fn set_encoder_frozen(&mut self, mode: encoder::FreezeMode) -> Result<()> {
        encoder::set_frozen(&mut self.set, mode)?;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            d_model: self.config.d_model,
            n_labels: self.config.n_labels,
            n_chunks: self.config.n_chunks,
            tensors: self
                .set
                .iter()
                .map(|p| TensorEntry { name: p.name.clone(), rows: p.rows, cols: p.cols, values: p.values.clone() })
                .collect(),
        }
    }

    /// Rebuild parameters from a checkpoint. Structural variant flags
    /// (mixing, multi-head, chunk attention, flat concatenation) are
    /// inferred from the stored tensors; `base` supplies the rest.
    pub fn from_checkpoint(ck: &Checkpoint, base: &ModelConfig) -> Result<Self> {
        let mut config = base.clone();
        if ck.d_model != config.d_model {
            return Err(CheckpointError::ShapeMismatch {
                field: "d_model".into(),
                msg: format!("checkpoint has {}, configuration wants {}", ck.d_model, config.d_model),
            }
            .into());
        }
        if ck.n_labels != config.n_labels {
            return Err(CheckpointError::ShapeMismatch {
                field: "n_labels".into(),
                msg: format!("checkpoint has {}, configuration wants {}", ck.n_labels, config.n_labels),
            }
            .into());
        }
        if ck.n_chunks != config.n_chunks {
            return Err(CheckpointError::ShapeMismatch {
                field: "n_chunks".into(),
                msg: format!("checkpoint has {}, configuration wants {}", ck.n_chunks, config.n_chunks),
            }
            .into());
        }
        config.mixing = ck.contains(encoder::MIX);
        config.multihead = ck.contains(&format!("{HEAD_W}.0"));
        if ck.contains(HEAD_K) && ck.contains(HEAD_V) {
            config.doc_repr = DocRepr::ChunkAttention;
        } else if config.doc_repr == DocRepr::ChunkAttention {
            return Err(ModelError::Config(
                "checkpoint was trained with a pooling document representation; pass the matching variant".into(),
            ));
        }
        let beta = ck.get(HEAD_BETA)?;
        if config.n_chunks > 1 && beta.rows == config.d_model * config.n_chunks {
            config.doc_repr = DocRepr::FlatConcat;
        }

        let mut set = ParamSet::new();
        for t in &ck.tensors {
            set.push(Parameter::new(t.name.clone(), t.rows, t.cols, t.values.clone()));
        }
        let vocab_size = ck.get(encoder::EMBED)?.rows;
        let params = ModelParams { config, vocab_size, set };
        params.validate()?;
        Ok(params)
    }
}

/// Mean encoder output over a tokenized label description.
fn description_embedding(
    set: &ParamSet,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    tokenizer: &Tokenizer,
    desc: &str,
) -> Result<Vec<f64>> {
    let cleaned = clean_text(desc, false, false);
    let mut ids: Vec<u32> = cleaned
        .split_whitespace()
        .flat_map(|w| tokenizer.pieces(w).into_iter().map(|p| vocab.id(p)).collect::<Vec<_>>())
        .collect();
    ids.truncate(cfg.content_len);
    if ids.is_empty() {
        return Err(ModelError::Config(format!("label description {desc:?} has no usable tokens")));
    }
    let mut chunk = TokenChunk::empty(0, cfg.content_len);
    for (k, &id) in ids.iter().enumerate() {
        chunk.token_ids[1 + k] = id;
        chunk.pad_mask[1 + k] = true;
    }
    let slots: Vec<usize> = (1..=ids.len()).collect();
    let tape = Tape::new();
    let bound = set.bind(&tape)?;
    let out = encoder::encode_chunk_slots(&tape, &bound, &chunk, &slots, cfg.mixing, None)?;
    Ok(out.h.mean_cols()?.values())
}

// ── Attention building blocks ───────────────────────────────────────────

/// Token-level label-wise attention over one chunk:
/// Z = tanh(W H), A = row-softmax(U^T Z), C = H A^T.
/// `slot_mask`, when given, excludes masked columns from every row's softmax.
pub fn token_attention(h: &Tensor, w: &Tensor, u: &Tensor, slot_mask: Option<&[bool]>) -> Result<(Tensor, Tensor)> {
    let z = w.matmul(h)?.tanh()?;
    let scores = u.transpose()?.matmul(&z)?;
    let a = match slot_mask {
        Some(mask) => {
            if mask.len() != scores.cols() {
                return Err(ModelError::Config(format!(
                    "slot mask has {} entries for {} columns",
                    mask.len(),
                    scores.cols()
                )));
            }
            let full: Vec<bool> = (0..scores.rows()).flat_map(|_| mask.iter().copied()).collect();
            scores.softmax_rows(Some(&full))?
        }
        None => scores.softmax_rows(None)?,
    };
    let c = h.matmul(&a.transpose()?)?;
    Ok((c, a))
}

/// Token attention with one parameter set per chunk. With identical
/// parameter sets this reproduces the shared-parameter output exactly.
pub fn multihead_token_attention(
    hs: &[Tensor],
    ws: &[Tensor],
    us: &[Tensor],
    slot_masks: Option<&[Vec<bool>]>,
) -> Result<Vec<(Tensor, Tensor)>> {
    if ws.len() != hs.len() || us.len() != hs.len() {
        return Err(ModelError::Config(format!(
            "{} chunks but {} W and {} U parameter sets",
            hs.len(),
            ws.len(),
            us.len()
        )));
    }
    hs.iter()
        .enumerate()
        .map(|(n, h)| token_attention(h, &ws[n], &us[n], slot_masks.map(|m| m[n].as_slice())))
        .collect()
}

/// Column l of every chunk representation, stacked left to right:
/// M[:, n] = C_n[:, l].
pub fn stack_label_chunks(chunk_reprs: &[Tensor], label: usize) -> Result<Tensor> {
    let cols: Vec<Tensor> = chunk_reprs
        .iter()
        .map(|c| c.select_column(label))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Tensor::hstack(&cols)?)
}

/// Chunk-level attention: S = tanh(K M), o = softmax(v^T S), d = M o^T.
pub fn chunk_attention(m: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = k.matmul(m)?.tanh()?;
    let o = v.transpose()?.matmul(&s)?.softmax_rows(None)?;
    let d = m.matmul(&o.transpose()?)?;
    Ok((d, o))
}

/// Pooling alternatives to chunk attention.
pub fn document_repr(m: &Tensor, kind: DocRepr) -> Result<Tensor> {
    match kind {
        DocRepr::ChunkAttention => Err(ModelError::Config(
            "chunk attention needs parameters; call chunk_attention".into(),
        )),
        DocRepr::MeanPool => Ok(m.mean_cols()?),
        DocRepr::MaxPool => Ok(m.max_cols()?),
        DocRepr::FlatConcat => Ok(m.reshape(m.rows() * m.cols(), 1)?),
    }
}

/// Per-label classifier: sigmoid(beta^T d + b).
pub fn classify(d: &Tensor, beta: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(beta.transpose()?.matmul(d)?.add(bias)?.sigmoid()?)
}

/// Binary cross entropy, summed over labels for one example. Probabilities
/// are clipped into [eps, 1-eps] before the logs.
pub fn bce_loss(y_hat: &Tensor, targets: &[bool], clip_eps: f64) -> Result<Tensor> {
    if y_hat.rows() != 1 || y_hat.cols() != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "bce_loss",
            detail: format!("{}x{} probabilities vs {} targets", y_hat.rows(), y_hat.cols(), targets.len()),
        }
        .into());
    }
    let tape = y_hat.tape();
    let y_vals: Vec<f64> = targets.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let y = tape.constant(1, targets.len(), y_vals)?;
    let clipped = y_hat.clamp(clip_eps, 1.0 - clip_eps)?;
    let pos = y.mul(&clipped.log()?)?;
    let neg = y.affine(-1.0, 1.0)?.mul(&clipped.affine(-1.0, 1.0)?.log()?)?;
    Ok(pos.add(&neg)?.sum()?.affine(-1.0, 0.0)?)
}

// ── Whole-document forward pass ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub binary: Vec<bool>,
    pub threshold: f64,
}

impl Prediction {
    fn from_probs(probs: Vec<f64>, threshold: f64) -> Self {
        let binary = probs.iter().map(|&p| p >= threshold).collect();
        Prediction { probs, binary, threshold }
    }
}

/// Attention state retained from one forward pass, for tests and
/// explainability reports.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub n_labels: usize,
    pub slot_count: usize,
    /// Per chunk: row-major n_labels x slot_count token weights
    /// (exactly zero on masked slots).
    pub token_weights: Vec<Vec<f64>>,
    /// Per label: n_chunks chunk weights. Empty for pooling variants.
    pub chunk_weights: Vec<Vec<f64>>,
    /// Per chunk: row-major d_model x n_labels representation C_n.
    pub chunk_reprs: Vec<Vec<f64>>,
    /// Per label: row-major d_model x n_chunks stack M_l.
    pub label_stacks: Vec<Vec<f64>>,
    /// Per label: document representation d_l.
    pub doc_reprs: Vec<Vec<f64>>,
}

pub struct ForwardPass {
    pub y_hat: Tensor,
    pub prediction: Prediction,
    pub attention: Option<AttentionRecord>,
}

/// Run the head over one chunked document on `tape`.
pub fn forward(
    tape: &Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    chunk_encoder: &ChunkEncoder,
    doc: &ChunkedDocument,
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    record: bool,
) -> Result<ForwardPass> {
    if doc.chunks.len() != cfg.n_chunks {
        return Err(ModelError::Config(format!(
            "document {} has {} chunks, model expects {}",
            doc.id,
            doc.chunks.len(),
            cfg.n_chunks
        )));
    }
    let slot_count = cfg.slot_count();
    let mut chunk_reprs: Vec<Tensor> = Vec::with_capacity(cfg.n_chunks);
    let mut rec_token: Vec<Vec<f64>> = Vec::new();
    let mut rec_chunk_repr: Vec<Vec<f64>> = Vec::new();

    for chunk in &doc.chunks {
        let slots: Vec<usize> = if cfg.mask_pads {
            chunk.unmasked_slots()
        } else {
            (0..slot_count).collect()
        };
        let enc = chunk_encoder.encode(
            tape,
            bound,
            &doc.id,
            chunk,
            &slots,
            dropout.as_mut().map(|(p, rng)| (*p, &mut **rng)),
        )?;
        let (w_name, u_name) = token_attention_names(cfg, chunk.chunk_index);
        let w = bound.get(&w_name)?;
        let u = bound.get(&u_name)?;
        let (c, a) = token_attention(&enc.h, w, u, None)?;
        if record {
            rec_token.push(expand_token_weights(&a.values(), &slots, cfg.n_labels, slot_count));
            rec_chunk_repr.push(c.values());
        }
        chunk_reprs.push(c);
    }

    let mut doc_cols: Vec<Tensor> = Vec::with_capacity(cfg.n_labels);
    let mut rec_o: Vec<Vec<f64>> = Vec::new();
    let mut rec_m: Vec<Vec<f64>> = Vec::new();
    let mut rec_d: Vec<Vec<f64>> = Vec::new();
    for label in 0..cfg.n_labels {
        let m = stack_label_chunks(&chunk_reprs, label)?;
        let d_repr = match cfg.doc_repr {
            DocRepr::ChunkAttention => {
                let (d_repr, o) = chunk_attention(&m, bound.get(HEAD_K)?, bound.get(HEAD_V)?)?;
                if record {
                    rec_o.push(o.values());
                }
                d_repr
            }
            kind => document_repr(&m, kind)?,
        };
        if record {
            rec_m.push(m.values());
            rec_d.push(d_repr.values());
        }
        doc_cols.push(d_repr);
    }

    let d_matrix = Tensor::hstack(&doc_cols)?;
    let logits = bound.get(HEAD_BETA)?.colwise_dot(&d_matrix)?.add(bound.get(HEAD_BIAS)?)?;
    let y_hat = logits.sigmoid()?;
    let prediction = Prediction::from_probs(y_hat.values(), cfg.threshold);

    let attention = record.then(|| AttentionRecord {
        n_labels: cfg.n_labels,
        slot_count,
        token_weights: rec_token,
        chunk_weights: rec_o,
        chunk_reprs: rec_chunk_repr,
        label_stacks: rec_m,
        doc_reprs: rec_d,
    });
    Ok(ForwardPass { y_hat, prediction, attention })
}

fn expand_token_weights(a: &[f64], slots: &[usize], n_labels: usize, slot_count: usize) -> Vec<f64> {
    let s = slots.len();
    let mut out = vec![0.0; n_labels * slot_count];
    for l in 0..n_labels {
        for (j, &slot) in slots.iter().enumerate() {
            out[l * slot_count + slot] = a[l * s + j];
        }
    }
    out
}

/// Inference convenience: fresh tape, no dropout, attention retained.
pub fn predict(params: &ModelParams, doc: &ChunkedDocument) -> Result<(Prediction, AttentionRecord)> {
    let tape = Tape::new();
    let bound = params.set.bind(&tape)?;
    let enc = ChunkEncoder::Trainable { mixing: params.config.mixing };
    let pass = forward(&tape, &bound, &params.config, &enc, doc, None, true)?;
    Ok((pass.prediction, pass.attention.expect("attention requested")))
}
