//! Seeded synthetic multi-label corpora with planted label-specific keyword
//! phrases. Label assignment is exactly recoverable from the planted
//! phrases (at zero noise), which gives ground truth for classification,
//! metric and attention-explanation tests without any real clinical data.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::textprep::{Document, LabelVocab};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct CorpusSpec {
    pub n_docs: usize,
    pub n_labels: usize,
    /// Planted phrases per label; generated when `phrases` is None.
    pub phrases_per_label: usize,
    /// Explicit phrases (outer index = label). Must be pairwise disjoint.
    pub phrases: Option<Vec<Vec<String>>>,
    pub min_labels_per_doc: usize,
    pub mean_labels_per_doc: f64,
    pub max_labels_per_doc: usize,
    pub std_labels_per_doc: f64,
    pub mean_doc_words: f64,
    pub std_doc_words: f64,
    pub min_doc_words: usize,
    pub background_vocab: usize,
    /// Probability of flipping each (document, label) gold assignment.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        // Shape mirrors the clinical corpus statistics the pipeline targets:
        // ~2000 words per document, 2..=73 labels with mean 15 (capped by
        // the label count).
        CorpusSpec {
            n_docs: 200,
            n_labels: 10,
            phrases_per_label: 1,
            phrases: None,
            min_labels_per_doc: 2,
            mean_labels_per_doc: 15.0,
            max_labels_per_doc: 73,
            std_labels_per_doc: 4.0,
            mean_doc_words: 2000.0,
            std_doc_words: 500.0,
            min_doc_words: 120,
            background_vocab: 2000,
            noise_rate: 0.0,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.n_docs == 0 || self.n_labels == 0 {
            return Err(SynthError::Spec("need at least one document and one label".into()));
        }
        if self.phrases.is_none() && self.phrases_per_label == 0 {
            return Err(SynthError::Spec("phrases_per_label must be >= 1".into()));
        }
        if self.min_labels_per_doc > self.max_labels_per_doc {
            return Err(SynthError::Spec("min_labels_per_doc exceeds max_labels_per_doc".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(SynthError::Spec("noise_rate must be in [0, 1]".into()));
        }
        if let Some(phrases) = &self.phrases {
            if phrases.len() != self.n_labels {
                return Err(SynthError::Spec(format!(
                    "{} phrase lists for {} labels",
                    phrases.len(),
                    self.n_labels
                )));
            }
            let mut seen: BTreeSet<&String> = BTreeSet::new();
            for list in phrases {
                if list.is_empty() {
                    return Err(SynthError::Spec("every label needs at least one phrase".into()));
                }
                for p in list {
                    if !seen.insert(p) {
                        return Err(SynthError::Spec(format!("phrase {p:?} appears under two labels")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct GeneratedCorpus {
    pub train: Vec<Document>,
    pub val: Vec<Document>,
    pub test: Vec<Document>,
    pub labels: LabelVocab,
    /// Ground truth: label code -> planted phrases.
    pub keywords: BTreeMap<String, Vec<String>>,
}

const BACKGROUND_SYLLABLES: &[&str] = &[
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "ne", "po", "ra", "su", "ti", "vo",
    "wa", "sen", "tor", "mal", "der",
];
// Distinct alphabet so planted keyword words can never collide with
// background words.
const KEYWORD_SYLLABLES: &[&str] = &[
    "zyx", "qua", "vex", "jor", "wiz", "kro", "phy", "dax", "bli", "gnu", "zep", "qim",
];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: &[&str], min_syl: usize, max_syl: usize) -> String {
    let n = rng.gen_range(min_syl..=max_syl);
    (0..n).map(|_| syllables[rng.gen_range(0..syllables.len())]).collect()
}

fn distinct_words(rng: &mut ChaCha8Rng, syllables: &[&str], count: usize, min_syl: usize, max_syl: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w = pseudo_word(rng, syllables, min_syl, max_syl);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn sample_clamped_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64, min: f64, max: f64) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    (mean + std * z).clamp(min, max)
}

struct Section {
    header: &'static str,
    share: f64,
    /// Candidate target for planted phrases.
    plantable: bool,
}

// Discharge-summary-like layout; the diagnosis block sits near the end so
// front-section reordering has something to do.
const SECTIONS: &[Section] = &[
    Section { header: "admission date", share: 0.02, plantable: false },
    Section { header: "chief complaint", share: 0.05, plantable: false },
    Section { header: "history of present illness", share: 0.25, plantable: true },
    Section { header: "past medical history", share: 0.10, plantable: true },
    Section { header: "allergies", share: 0.03, plantable: false },
    Section { header: "physical exam", share: 0.10, plantable: true },
    Section { header: "brief hospital course", share: 0.29, plantable: true },
    Section { header: "discharge medications", share: 0.08, plantable: false },
    Section { header: "discharge diagnosis", share: 0.04, plantable: false },
    Section { header: "discharge disposition", share: 0.02, plantable: false },
    Section { header: "discharge condition", share: 0.02, plantable: false },
];

pub fn generate(spec: &CorpusSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let label_width = (spec.n_labels as f64).log10().floor() as usize + 1;
    let codes: Vec<String> = (0..spec.n_labels).map(|l| format!("L{l:0label_width$}")).collect();
    let labels = LabelVocab::from_codes(codes.clone()).expect("generated codes are distinct");

    let background = distinct_words(&mut rng, BACKGROUND_SYLLABLES, spec.background_vocab, 2, 4);
    let phrases: Vec<Vec<String>> = match &spec.phrases {
        Some(p) => p.clone(),
        None => {
            let words_needed: usize = spec.n_labels * spec.phrases_per_label * 3;
            let pool = distinct_words(&mut rng, KEYWORD_SYLLABLES, words_needed, 2, 3);
            let mut next = 0usize;
            (0..spec.n_labels)
                .map(|_| {
                    (0..spec.phrases_per_label)
                        .map(|_| {
                            let len = rng.gen_range(2..=3);
                            let phrase = pool[next..next + len].join(" ");
                            next += len;
                            phrase
                        })
                        .collect()
                })
                .collect()
        }
    };

    let keywords: BTreeMap<String, Vec<String>> = codes.iter().cloned().zip(phrases.iter().cloned()).collect();

    let max_labels = spec.max_labels_per_doc.min(spec.n_labels);
    let min_labels = spec.min_labels_per_doc.min(max_labels);
    let mut docs = Vec::with_capacity(spec.n_docs);
    for d in 0..spec.n_docs {
        let k = sample_clamped_normal(
            &mut rng,
            spec.mean_labels_per_doc,
            spec.std_labels_per_doc,
            min_labels as f64,
            max_labels as f64,
        )
        .round() as usize;
        let mut order: Vec<usize> = (0..spec.n_labels).collect();
        order.shuffle(&mut rng);
        let mut chosen: Vec<usize> = order[..k].to_vec();
        chosen.sort_unstable();

        let target_words = sample_clamped_normal(
            &mut rng,
            spec.mean_doc_words,
            spec.std_doc_words,
            spec.min_doc_words as f64,
            spec.mean_doc_words + 4.0 * spec.std_doc_words,
        ) as usize;

        // Per-section background word lists.
        let mut bodies: Vec<Vec<String>> = SECTIONS
            .iter()
            .map(|s| {
                let n = ((target_words as f64) * s.share).round().max(2.0) as usize;
                (0..n).map(|_| background[rng.gen_range(0..background.len())].clone()).collect()
            })
            .collect();

        // De-identification spans and marker runs for the cleaner to strip,
        // plus numeric-only words for the non-alphabetic filter.
        let date = format!("[**21{:02}-{}-{}**]", rng.gen_range(0..20), rng.gen_range(1..13), rng.gen_range(1..29));
        bodies[0].insert(0, date);
        bodies[0].push("==".into());
        let bp = format!("{}/{}", rng.gen_range(90..160), rng.gen_range(50..100));
        bodies[5].push(bp);
        bodies[5].push(rng.gen_range(80..120).to_string());

        // Plant phrases for the chosen labels: one to two occurrences, each
        // going into the diagnosis section half the time. A phrase goes in
        // as one unit so later insertions cannot split it.
        let diagnosis_idx = SECTIONS.iter().position(|s| s.header == "discharge diagnosis").expect("present");
        let plantable: Vec<usize> = SECTIONS
            .iter()
            .enumerate()
            .filter(|(_, s)| s.plantable)
            .map(|(i, _)| i)
            .collect();
        for &label in &chosen {
            let phrase = phrases[label][rng.gen_range(0..phrases[label].len())].clone();
            let occurrences = rng.gen_range(1..=2);
            for _ in 0..occurrences {
                let section = if rng.gen_range(0..2) == 1 {
                    diagnosis_idx
                } else {
                    plantable[rng.gen_range(0..plantable.len())]
                };
                let body = &mut bodies[section];
                let at = rng.gen_range(0..=body.len());
                body.insert(at, phrase.clone());
            }
        }

        let mut text = String::new();
        for (section, body) in SECTIONS.iter().zip(&bodies) {
            text.push_str(section.header);
            text.push_str(": ");
            text.push_str(&body.join(" "));
            text.push('\n');
        }

        let mut gold: Vec<bool> = (0..spec.n_labels).map(|l| chosen.contains(&l)).collect();
        if spec.noise_rate > 0.0 {
            for g in gold.iter_mut() {
                if rng.gen_range(0.0..1.0) < spec.noise_rate {
                    *g = !*g;
                }
            }
        }
        let doc_labels: Vec<String> = gold
            .iter()
            .enumerate()
            .filter(|(_, &g)| g)
            .map(|(l, _)| codes[l].clone())
            .collect();

        docs.push(Document { id: format!("d{d:04}"), text, labels: doc_labels });
    }

    let n_train = (spec.n_docs as f64 * 0.70).floor() as usize;
    let n_val = (spec.n_docs as f64 * 0.15).floor() as usize;
    let val_split = docs.split_off(n_train);
    let (val, test) = {
        let mut v = val_split;
        let t = v.split_off(n_val.min(v.len()));
        (v, t)
    };

    Ok(GeneratedCorpus { train: docs, val, test, labels, keywords })
}

#[derive(Serialize)]
struct JsonDoc<'a> {
    id: &'a str,
    text: &'a str,
    labels: &'a [String],
}

pub fn to_jsonl(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        let row = JsonDoc { id: &d.id, text: &d.text, labels: &d.labels };
        out.push_str(&serde_json::to_string(&row).expect("document serializes"));
        out.push('\n');
    }
    out
}

impl GeneratedCorpus {
    pub fn keyword_map_json(&self) -> String {
        serde_json::to_string_pretty(&self.keywords).expect("keyword map serializes")
    }

    /// Write train/val/test JSON-lines, the label vocabulary and the
    /// keyword map under `dir`. Returns the five paths.
    pub fn write_all(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let write = |name: &str, contents: String| -> Result<PathBuf> {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|source| SynthError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Ok(path)
        };
        Ok(vec![
            write("train.jsonl", to_jsonl(&self.train))?,
            write("val.jsonl", to_jsonl(&self.val))?,
            write("test.jsonl", to_jsonl(&self.test))?,
            write("labels.txt", self.labels.to_file_string())?,
            write("keywords.json", self.keyword_map_json())?,
        ])
    }

    pub fn all_docs(&self) -> impl Iterator<Item = &Document> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Oracle keyword matcher: predicted labels are exactly those with a
/// planted phrase occurring (contiguously) in the cleaned text. Used to
/// validate the generator itself.
pub fn keyword_match_labels(text: &str, keywords: &BTreeMap<String, Vec<String>>) -> Vec<String> {
    let cleaned = crate::textprep::clean_text(text, false, false);
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    let mut out = Vec::new();
    for (code, phrases) in keywords {
        let hit = phrases.iter().any(|phrase| {
            let pw: Vec<&str> = phrase.split_whitespace().collect();
            words.windows(pw.len()).any(|w| w == pw.as_slice())
        });
        if hit {
            out.push(code.clone());
        }
    }
    out
}
