//! End-to-end wiring: ablation variants, vocabulary + chunk preparation,
//! training runs, evaluation reports and explanation reports.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::FreezeMode;
use crate::explain::{self, ExplainError, LabelSection};
use crate::metrics::{MetricsError, MetricsReport, ScoreMatrix};
use crate::model::{predict, InitScheme, ModelConfig, ModelError, ModelParams};
use crate::synthgen::SynthError;
use crate::textprep::{
    build_vocab, chunk_document, ChunkStrategy, ChunkedDocument, Document, LabelVocab, PrepConfig,
    PrepError, SectionMap, Vocabulary,
};
use crate::train::{self, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("invalid variant: {0}")]
    Variant(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// One experimental configuration: preprocessing options, head options,
/// encoder freezing and attention-parameter initialization.
#[derive(Debug, Clone)]
pub struct VariantSpec {
    /// Ablation letter a..=j, None for the full model.
    pub letter: Option<char>,
    pub prep: PrepConfig,
    pub model: ModelConfig,
    pub freeze: FreezeMode,
    pub label_embedding_init: bool,
}

impl VariantSpec {
    pub fn full(model: ModelConfig) -> Self {
        let prep = PrepConfig {
            n_chunks: model.n_chunks,
            content_len: model.content_len,
            ..PrepConfig::default()
        };
        VariantSpec { letter: None, prep, model, freeze: FreezeMode::None, label_embedding_init: false }
    }

    /// Ablation variants by letter:
    /// a keep non-alphabetic words, b remove stop words, c raw text order,
    /// d meaningful chunking, e freeze all but the last encoder layer,
    /// f label-embedding attention init, g per-chunk token attention,
    /// h mean pooling, i max pooling, j flat concatenation.
    pub fn ablation(letter: char, model: ModelConfig) -> Result<Self> {
        let mut v = VariantSpec::full(model);
        v.letter = Some(letter);
        match letter {
            'a' => v.prep.keep_nonalpha = true,
            'b' => v.prep.remove_stopwords = true,
            'c' => v.prep.raw_order = true,
            'd' => v.prep.strategy = ChunkStrategy::Meaningful(SectionMap::default_groups()),
            'e' => v.freeze = FreezeMode::AllButLast,
            'f' => v.label_embedding_init = true,
            'g' => v.model.multihead = true,
            'h' => v.model.doc_repr = crate::model::DocRepr::MeanPool,
            'i' => v.model.doc_repr = crate::model::DocRepr::MaxPool,
            'j' => v.model.doc_repr = crate::model::DocRepr::FlatConcat,
            other => return Err(PipelineError::Variant(format!("unknown ablation letter {other:?}"))),
        }
        Ok(v)
    }

    pub fn describe(&self) -> &'static str {
        match self.letter {
            None => "full model",
            Some('a') => "keep non-alphabetic words",
            Some('b') => "remove stop words",
            Some('c') => "raw text order",
            Some('d') => "meaningful chunking",
            Some('e') => "freeze encoder except last layer",
            Some('f') => "label-embedding attention init",
            Some('g') => "per-chunk token attention",
            Some('h') => "mean pooling document representation",
            Some('i') => "max pooling document representation",
            Some('j') => "flat concatenation document representation",
            Some(_) => "unknown",
        }
    }
}

/// Vocabulary over the tokenizer pieces of the prepared training text.
pub fn build_vocab_for(docs: &[Document], prep: &PrepConfig, min_freq: usize) -> Result<Vocabulary> {
    let mut piece_corpus: Vec<String> = Vec::with_capacity(docs.len());
    for doc in docs {
        let words = prep.prepare_words(&doc.text);
        let pieces: Vec<String> = words
            .iter()
            .flat_map(|w| prep.tokenizer.pieces(w).into_iter().map(|p| p.to_string()).collect::<Vec<_>>())
            .collect();
        piece_corpus.push(pieces.join(" "));
    }
    Ok(build_vocab(&piece_corpus, min_freq)?)
}

pub fn prepare_docs(
    docs: &[Document],
    vocab: &Vocabulary,
    labels: &LabelVocab,
    prep: &PrepConfig,
) -> Result<Vec<ChunkedDocument>> {
    docs.iter()
        .map(|d| chunk_document(d, vocab, labels, prep).map_err(PipelineError::from))
        .collect()
}

/// A completed training run plus everything needed to evaluate it.
pub struct TrainedRun {
    pub variant: VariantSpec,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub outcome_log: String,
    pub aborted_at: Option<usize>,
    pub best_val_f1: Option<f64>,
    pub best_params: Option<ModelParams>,
}

/// Train a variant from raw documents: build the vocabulary from the train
/// split, chunk all splits, initialize, freeze, train.
pub fn run_training(
    train_docs: &[Document],
    val_docs: &[Document],
    labels: &LabelVocab,
    variant: &VariantSpec,
    cfg: &TrainConfig,
    label_descriptions: Option<&[String]>,
) -> Result<TrainedRun> {
    let vocab = build_vocab_for(train_docs, &variant.prep, 1)?;
    let train_chunked = prepare_docs(train_docs, &vocab, labels, &variant.prep)?;
    let val_chunked = prepare_docs(val_docs, &vocab, labels, &variant.prep)?;

    let params = init_params(variant, &vocab, labels, cfg.seed, label_descriptions)?;
    let outcome = train::train(
        params,
        &train_chunked,
        (!val_chunked.is_empty()).then_some(val_chunked.as_slice()),
        None,
        cfg,
    )?;
    let TrainOutcome { params, best, log, aborted_at } = outcome;
    let (best_val_f1, best_params) = match best {
        Some(b) => (Some(b.val_micro_f1), Some(b.params)),
        None => (None, None),
    };
    Ok(TrainedRun {
        variant: variant.clone(),
        vocab,
        params,
        outcome_log: log,
        aborted_at,
        best_val_f1,
        best_params,
    })
}

pub fn init_params(
    variant: &VariantSpec,
    vocab: &Vocabulary,
    labels: &LabelVocab,
    seed: u64,
    label_descriptions: Option<&[String]>,
) -> Result<ModelParams> {
    let mut cfg = variant.model.clone();
    cfg.n_labels = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scheme = if variant.label_embedding_init {
        let descriptions = label_descriptions.ok_or_else(|| {
            PipelineError::Variant("label-embedding initialization needs label descriptions".into())
        })?;
        InitScheme::LabelEmbedding { descriptions, vocab, tokenizer: &variant.prep.tokenizer }
    } else {
        InitScheme::Random
    };
    let mut params = ModelParams::init(cfg, vocab.len(), scheme, &mut rng)?;
    params.set_encoder_frozen(variant.freeze)?;
    Ok(params)
}

/// Probabilities over a chunked document list.
pub fn predict_scores(params: &ModelParams, docs: &[ChunkedDocument]) -> Result<ScoreMatrix> {
    Ok(train::score_documents(params, docs, None)?)
}

pub fn evaluate(params: &ModelParams, docs: &[ChunkedDocument], labels: &LabelVocab) -> Result<MetricsReport> {
    let scores = predict_scores(params, docs)?;
    Ok(MetricsReport::compute(&scores, params.config.threshold, labels.codes())?)
}

/// Heatmap sections for one document: every label predicted at or above the
/// threshold, plus (optionally) the top-k scored labels regardless.
pub fn explain_document(
    params: &ModelParams,
    doc: &ChunkedDocument,
    labels: &LabelVocab,
    include_top_k: Option<usize>,
) -> Result<Vec<LabelSection>> {
    let (prediction, record) = predict(params, doc)?;
    let mut selected: Vec<usize> = (0..labels.len()).filter(|&l| prediction.binary[l]).collect();
    if let Some(k) = include_top_k {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by(|&a, &b| prediction.probs[b].partial_cmp(&prediction.probs[a]).expect("finite").then(a.cmp(&b)));
        for &l in order.iter().take(k) {
            if !selected.contains(&l) {
                selected.push(l);
            }
        }
        selected.sort_unstable();
    }
    selected
        .into_iter()
        .map(|l| {
            let words = explain::word_attention(doc, &record, l)?;
            Ok(LabelSection {
                label_code: labels.code(l).to_string(),
                probability: prediction.probs[l],
                words,
            })
        })
        .collect()
}
