//! Attention explainability: global token weights (token weight scaled by
//! its chunk's weight), aggregation to word-level weights, and HTML heatmap
//! reports with a machine-readable sidecar.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::AttentionRecord;
use crate::textprep::ChunkedDocument;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("chunk attention weights unavailable (pooling document representation)")]
    MissingChunkWeights,
    #[error("label {0} out of range")]
    BadLabel(usize),
    #[error("document has no real words to attribute attention to")]
    EmptyDocument,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// Scale one chunk's token attention row by that chunk's attention weight.
pub fn global_token_attention(token_weights: &[f64], chunk_weight: f64) -> Vec<f64> {
    token_weights.iter().map(|&a| a * chunk_weight).collect()
}

/// Global token weights for one label: per chunk, the token attention row
/// scaled by the chunk weight. Total mass over the document is 1.
#[derive(Debug, Clone)]
pub struct GlobalAttention {
    pub label: usize,
    /// Per chunk: one weight per slot (zero on masked slots).
    pub per_chunk: Vec<Vec<f64>>,
}

pub fn global_attention(record: &AttentionRecord, label: usize) -> Result<GlobalAttention> {
    if label >= record.n_labels {
        return Err(ExplainError::BadLabel(label));
    }
    let chunk_weights = record.chunk_weights.get(label).ok_or(ExplainError::MissingChunkWeights)?;
    if chunk_weights.len() != record.token_weights.len() {
        return Err(ExplainError::MissingChunkWeights);
    }
    let s = record.slot_count;
    let per_chunk = record
        .token_weights
        .iter()
        .zip(chunk_weights)
        .map(|(rows, &o)| global_token_attention(&rows[label * s..(label + 1) * s], o))
        .collect();
    Ok(GlobalAttention { label, per_chunk })
}

#[derive(Debug, Clone)]
pub struct WordWeight {
    pub word_index: usize,
    pub word: String,
    pub weight: f64,
}

/// Per-label word weights: global token weights summed over each word's
/// slots (specials and padding excluded), normalized over the whole
/// document so the weights sum to 1.
#[derive(Debug, Clone)]
pub struct WordAttention {
    pub label: usize,
    pub entries: Vec<WordWeight>,
}

impl WordAttention {
    pub fn top(&self, k: usize) -> Vec<&WordWeight> {
        let mut refs: Vec<&WordWeight> = self.entries.iter().collect();
        refs.sort_by(|a, b| b.weight.partial_cmp(&a.weight).expect("finite").then(a.word_index.cmp(&b.word_index)));
        refs.truncate(k);
        refs
    }
}

pub fn word_attention(doc: &ChunkedDocument, record: &AttentionRecord, label: usize) -> Result<WordAttention> {
    if doc.words.is_empty() {
        return Err(ExplainError::EmptyDocument);
    }
    let global = global_attention(record, label)?;
    let mut mass = vec![0.0f64; doc.words.len()];
    for (chunk, weights) in doc.chunks.iter().zip(&global.per_chunk) {
        for span in &chunk.word_spans {
            for slot in span.start..span.end {
                mass[span.word] += weights[slot];
            }
        }
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(ExplainError::EmptyDocument);
    }
    let entries = mass
        .into_iter()
        .enumerate()
        .map(|(word_index, m)| WordWeight {
            word_index,
            word: doc.words[word_index].clone(),
            weight: m / total,
        })
        .collect();
    Ok(WordAttention { label, entries })
}

/// One rendered section of the report.
pub struct LabelSection {
    pub label_code: String,
    pub probability: f64,
    pub words: WordAttention,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static heatmap page: one section per label, word background intensity
/// proportional to weight / max weight. Byte-deterministic for fixed input.
pub fn render_html(doc_id: &str, sections: &[LabelSection]) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n");
    out.push_str(&format!("<title>attention report: {}</title>\n", escape(doc_id)));
    out.push_str("<style>\nbody{font-family:sans-serif;max-width:70rem;margin:2rem auto;padding:0 1rem;line-height:1.8}\n");
    out.push_str(".word{padding:0 .12em;border-radius:.2em}\nh2{margin-top:2rem}\n</style>\n</head>\n<body>\n");
    out.push_str(&format!("<h1>Attention report &mdash; {}</h1>\n", escape(doc_id)));
    if sections.is_empty() {
        out.push_str("<p>No label crossed the prediction threshold; nothing to visualize.</p>\n");
    }
    for section in sections {
        out.push_str(&format!(
            "<section>\n<h2>{} (p = {:.4})</h2>\n<p>\n",
            escape(&section.label_code),
            section.probability
        ));
        let max_w = section
            .words
            .entries
            .iter()
            .map(|e| e.weight)
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        for entry in &section.words.entries {
            let opacity = entry.weight / max_w;
            out.push_str(&format!(
                "<span class=\"word\" style=\"background:rgba(235,120,16,{:.4})\">{}</span>\n",
                opacity,
                escape(&entry.word)
            ));
        }
        out.push_str("</p>\n</section>\n");
    }
    out.push_str("</body>\n</html>\n");
    out
}

/// Tab-separated sidecar: label_code, word_index, word, weight. Weights are
/// printed with six decimal places of mantissa so they re-sum to 1 within
/// 1e-6 per label.
pub fn render_sidecar(sections: &[LabelSection]) -> String {
    let mut out = String::from("label_code\tword_index\tword\tweight\n");
    for section in sections {
        for entry in &section.words.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6e}\n",
                section.label_code, entry.word_index, entry.word, entry.weight
            ));
        }
    }
    out
}

/// Write `<doc_id>.html` and `<doc_id>.attn.tsv` under `dir`.
pub fn write_report(dir: &Path, doc_id: &str, sections: &[LabelSection]) -> Result<(PathBuf, PathBuf)> {
    let html_path = dir.join(format!("{doc_id}.html"));
    let sidecar_path = dir.join(format!("{doc_id}.attn.tsv"));
    let io_err = |path: &Path, source| ExplainError::Io { path: path.display().to_string(), source };
    std::fs::write(&html_path, render_html(doc_id, sections)).map_err(|e| io_err(&html_path, e))?;
    std::fs::write(&sidecar_path, render_sidecar(sections)).map_err(|e| io_err(&sidecar_path, e))?;
    Ok((html_path, sidecar_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textprep::{TokenChunk, WordSpan};

    #[test]
    fn global_scaling_cases() {
        let alpha = vec![0.5, 0.3, 0.2];
        assert_eq!(global_token_attention(&alpha, 0.1), vec![0.05, 0.03, 0.020000000000000004]);
        assert_eq!(global_token_attention(&alpha, 0.0), vec![0.0, 0.0, 0.0]);
        assert_eq!(global_token_attention(&alpha, 1.0), alpha);
    }

    /// Record with one label, two chunks of 5 slots (CLS + 3 content + SEP).
    fn toy_record(alpha0: [f64; 5], alpha1: [f64; 5], o: [f64; 2]) -> AttentionRecord {
        AttentionRecord {
            n_labels: 1,
            slot_count: 5,
            token_weights: vec![alpha0.to_vec(), alpha1.to_vec()],
            chunk_weights: vec![o.to_vec()],
            chunk_reprs: vec![],
            label_stacks: vec![],
            doc_reprs: vec![],
        }
    }

    fn toy_doc(words: &[&str], spans0: Vec<WordSpan>, spans1: Vec<WordSpan>) -> ChunkedDocument {
        let mut c0 = TokenChunk::empty(0, 3);
        c0.word_spans = spans0;
        let mut c1 = TokenChunk::empty(1, 3);
        c1.word_spans = spans1;
        ChunkedDocument {
            id: "doc".into(),
            chunks: vec![c0, c1],
            labels: vec![true],
            words: words.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn single_word_normalizes_to_one() {
        // One word spanning two slots with global masses 0.03 and 0.01.
        let record = toy_record([0.0, 0.3, 0.1, 0.0, 0.0], [0.0; 5], [0.1, 0.9]);
        let doc = toy_doc(&["solo"], vec![WordSpan { word: 0, start: 1, end: 3 }], vec![]);
        let wa = word_attention(&doc, &record, 0).unwrap();
        assert_eq!(wa.entries.len(), 1);
        assert!((wa.entries[0].weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_words_l1_normalized() {
        // Masses 0.2 and 0.6 -> weights 0.25 and 0.75.
        let record = toy_record([0.0, 0.2, 0.6, 0.0, 0.0], [0.0; 5], [1.0, 0.0]);
        let doc = toy_doc(
            &["first", "second"],
            vec![WordSpan { word: 0, start: 1, end: 2 }, WordSpan { word: 1, start: 2, end: 3 }],
            vec![],
        );
        let wa = word_attention(&doc, &record, 0).unwrap();
        assert!((wa.entries[0].weight - 0.25).abs() < 1e-12);
        assert!((wa.entries[1].weight - 0.75).abs() < 1e-12);
        assert!((wa.entries.iter().map(|e| e.weight).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_document_errors() {
        let record = toy_record([0.2; 5], [0.2; 5], [0.5, 0.5]);
        let doc = toy_doc(&[], vec![], vec![]);
        assert!(matches!(word_attention(&doc, &record, 0), Err(ExplainError::EmptyDocument)));
    }

    #[test]
    fn missing_chunk_weights_errors() {
        let mut record = toy_record([0.2; 5], [0.2; 5], [0.5, 0.5]);
        record.chunk_weights.clear();
        let doc = toy_doc(&["w"], vec![WordSpan { word: 0, start: 1, end: 2 }], vec![]);
        assert!(matches!(word_attention(&doc, &record, 0), Err(ExplainError::MissingChunkWeights)));
    }

    fn sample_sections() -> Vec<LabelSection> {
        vec![LabelSection {
            label_code: "L03".into(),
            probability: 0.91,
            words: WordAttention {
                label: 3,
                entries: vec![
                    WordWeight { word_index: 0, word: "alpha".into(), weight: 0.25 },
                    WordWeight { word_index: 1, word: "<beta>".into(), weight: 0.75 },
                ],
            },
        }]
    }

    #[test]
    fn html_is_deterministic_and_escaped() {
        let s = sample_sections();
        let h1 = render_html("doc1", &s);
        let h2 = render_html("doc1", &s);
        assert_eq!(h1, h2);
        assert!(h1.contains("&lt;beta&gt;"));
        assert!(h1.contains("rgba(235,120,16,1.0000)")); // max word at full opacity
        assert_eq!(h1.matches("<section>").count(), 1);
    }

    #[test]
    fn sidecar_sums_and_argmax() {
        let s = sample_sections();
        let sidecar = render_sidecar(&s);
        let mut sum = 0.0;
        let mut best: Option<(f64, String)> = None;
        for line in sidecar.lines().skip(1) {
            let fields: Vec<&str> = line.split('\t').collect();
            let w: f64 = fields[3].parse().unwrap();
            sum += w;
            if best.as_ref().map_or(true, |(bw, _)| w > *bw) {
                best = Some((w, fields[2].to_string()));
            }
        }
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(best.unwrap().1, "<beta>");
    }
}
