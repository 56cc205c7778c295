//! Chunk encoders: produce the per-chunk token representation matrix
//! H (d_model x slots, one column per token slot).
//!
//! Two implementations stand behind one interface: a trainable embedding
//! encoder (token table + learned positions + optional tanh mixing layer)
//! and a loader for externally produced vectors, so real transformer
//! outputs can be plugged in without touching the attention head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::params::{BoundParams, ParamSet, Parameter};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::textprep::{TokenChunk, PAD_ID};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] CheckpointError),
    #[error("missing vectors for document {doc_id:?} chunk {chunk_index}")]
    MissingChunk { doc_id: String, chunk_index: usize },
    #[error("invalid encoder configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

pub const EMBED: &str = "encoder.embed";
pub const POS: &str = "encoder.pos";
pub const MIX: &str = "encoder.mix";

/// Which encoder tensors the optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeMode {
    None,
    All,
    /// Freeze embeddings and positions; train only the mixing layer.
    AllButLast,
}

impl FreezeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FreezeMode::None),
            "all" => Ok(FreezeMode::All),
            "all_but_last" | "all-but-last" => Ok(FreezeMode::AllButLast),
            other => Err(EncoderError::Config(format!("unknown freeze mode {other:?}"))),
        }
    }
}

/// Token representations for one chunk: columns of `h` follow `slots`.
#[derive(Debug)]
pub struct EncoderOutput {
    pub h: Tensor,
    /// Which chunk slots the columns of `h` correspond to.
    pub slots: Vec<usize>,
}

/// Initialize trainable encoder parameters. The PAD embedding row starts at
/// zero; everything else is uniform +-0.1 except the mixing layer (Xavier).
pub fn init_encoder_params(vocab_size: usize, d_model: usize, slot_count: usize, mixing: bool, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut set = ParamSet::new();
    let mut embed = Parameter::uniform(EMBED, vocab_size, d_model, 0.1, rng);
    embed.values[..d_model].iter_mut().for_each(|v| *v = 0.0); // PAD row
    set.push(embed);
    set.push(Parameter::uniform(POS, slot_count, d_model, 0.1, rng));
    if mixing {
        set.push(Parameter::xavier(MIX, d_model, d_model, rng));
    }
    set
}

/// Apply a freeze mode to the encoder tensors of a parameter set.
pub fn set_frozen(set: &mut ParamSet, mode: FreezeMode) -> Result<()> {
    if mode == FreezeMode::AllButLast && set.get(MIX).is_none() {
        return Err(EncoderError::Config(
            "freeze mode all_but_last requires the mixing layer".into(),
        ));
    }
    for p in set.iter_mut() {
        if !p.name.starts_with("encoder.") {
            continue;
        }
        p.frozen = match mode {
            FreezeMode::None => false,
            FreezeMode::All => true,
            FreezeMode::AllButLast => p.name != MIX,
        };
    }
    Ok(())
}

/// Encode the given slots of a chunk with the trainable encoder:
/// H[:, j] = embed[token_ids[slots[j]]] + pos[slots[j]], then the optional
/// tanh mixing layer, then (in training) an inverted-dropout mask.
pub fn encode_chunk_slots(
    tape: &Tape,
    bound: &BoundParams,
    chunk: &TokenChunk,
    slots: &[usize],
    mixing: bool,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<EncoderOutput> {
    let ids: Vec<usize> = slots.iter().map(|&s| chunk.token_ids[s] as usize).collect();
    let token_vecs = bound.get(EMBED)?.gather_rows(&ids)?;
    let pos_vecs = bound.get(POS)?.gather_rows(slots)?;
    let mut h = token_vecs.add(&pos_vecs)?.transpose()?;
    if mixing {
        h = bound.get(MIX)?.matmul(&h)?.tanh()?;
    }
    if let Some((p, rng)) = dropout {
        if p > 0.0 {
            let keep = 1.0 - p;
            let mask: Vec<f64> = (0..h.len())
                .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = tape.constant(h.rows(), h.cols(), mask)?;
            h = h.mul(&mask)?;
        }
    }
    Ok(EncoderOutput { h, slots: slots.to_vec() })
}

/// Encode every slot of a chunk (PAD columns included; downstream masking
/// decides whether they participate in attention).
pub fn encode_chunk(
    tape: &Tape,
    bound: &BoundParams,
    chunk: &TokenChunk,
    mixing: bool,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<EncoderOutput> {
    let all: Vec<usize> = (0..chunk.slot_count()).collect();
    encode_chunk_slots(tape, bound, chunk, &all, mixing, dropout)
}

/// Externally produced encoder outputs, keyed by `doc_id/chunk_index`.
/// Always frozen: columns enter the tape as constants.
pub struct VectorArchive {
    d_model: usize,
    slot_count: usize,
    checkpoint: Checkpoint,
}

impl VectorArchive {
    /// Open an archive, validating the embedding width and per-tensor shapes.
    pub fn open(path: &std::path::Path, expected_d_model: usize, slot_count: usize) -> Result<Self> {
        let checkpoint = Checkpoint::read(path)?;
        Self::from_checkpoint(checkpoint, expected_d_model, slot_count)
    }

    pub fn from_checkpoint(checkpoint: Checkpoint, expected_d_model: usize, slot_count: usize) -> Result<Self> {
        if checkpoint.d_model != expected_d_model {
            return Err(CheckpointError::ShapeMismatch {
                field: "d_model".into(),
                msg: format!("archive has {}, configuration wants {}", checkpoint.d_model, expected_d_model),
            }
            .into());
        }
        for t in &checkpoint.tensors {
            if t.rows != expected_d_model || t.cols != slot_count {
                return Err(CheckpointError::ShapeMismatch {
                    field: t.name.clone(),
                    msg: format!("expected {}x{}, found {}x{}", expected_d_model, slot_count, t.rows, t.cols),
                }
                .into());
            }
        }
        Ok(VectorArchive { d_model: expected_d_model, slot_count, checkpoint })
    }

    pub fn key(doc_id: &str, chunk_index: usize) -> String {
        format!("{doc_id}/{chunk_index}")
    }

    /// H columns for the requested slots of one chunk, as tape constants.
    pub fn encode_slots(&self, tape: &Tape, doc_id: &str, chunk_index: usize, slots: &[usize]) -> Result<EncoderOutput> {
        let entry = self
            .checkpoint
            .get(&Self::key(doc_id, chunk_index))
            .map_err(|_| EncoderError::MissingChunk { doc_id: doc_id.to_string(), chunk_index })?;
        let mut values = vec![0.0; self.d_model * slots.len()];
        for r in 0..self.d_model {
            for (j, &s) in slots.iter().enumerate() {
                values[r * slots.len() + j] = entry.values[r * self.slot_count + s];
            }
        }
        let h = tape.constant(self.d_model, slots.len(), values)?;
        Ok(EncoderOutput { h, slots: slots.to_vec() })
    }
}

/// Load the full H matrix for one chunk from an external-vector file.
pub fn load_external_vectors(
    path: &std::path::Path,
    doc_id: &str,
    chunk_index: usize,
    expected_d_model: usize,
    slot_count: usize,
) -> Result<EncoderOutput> {
    let archive = VectorArchive::open(path, expected_d_model, slot_count)?;
    let tape = Tape::new();
    let all: Vec<usize> = (0..slot_count).collect();
    archive.encode_slots(&tape, doc_id, chunk_index, &all)
}

/// The encoder the model forward pass uses for a batch.
pub enum ChunkEncoder<'a> {
    Trainable { mixing: bool },
    External(&'a VectorArchive),
}

impl ChunkEncoder<'_> {
    pub fn encode(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        doc_id: &str,
        chunk: &TokenChunk,
        slots: &[usize],
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<EncoderOutput> {
        match self {
            ChunkEncoder::Trainable { mixing } => {
                encode_chunk_slots(tape, bound, chunk, slots, *mixing, dropout)
            }
            ChunkEncoder::External(archive) => {
                archive.encode_slots(tape, doc_id, chunk.chunk_index, slots)
            }
        }
    }
}

/// True when a token id row of the embedding table is PAD.
pub fn is_pad(id: u32) -> bool {
    id == PAD_ID
}
