//! Document preprocessing: text cleaning, section reordering, vocabulary
//! construction, tokenization and fixed-length chunking.

mod chunk;
mod dataset;
mod stopwords;

pub use chunk::{chunk_document, chunk_words, ChunkStrategy, ChunkedDocument, SectionMap, TokenChunk, WordSpan};
pub use dataset::{load_dataset, load_label_vocab, Document, LabelVocab};
pub use stopwords::is_stopword;

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PrepError>;

/// Reserved vocabulary ids.
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<cls>", "<sep>"];

const DEID_OPEN: &str = "[**";
const DEID_CLOSE: &str = "**]";

/// Default headers moved to the front of a document, in target order.
/// Both "condition" spellings are matched since real documents use either.
pub fn default_front_sections() -> Vec<String> {
    ["discharge diagnosis", "discharge disposition", "discharge conditions", "discharge condition"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Lowercase, strip de-identification brackets and `==`/`--`/`__` runs,
/// normalize whitespace, and drop words without alphabetic characters
/// (unless `keep_nonalpha`). `remove_stopwords` additionally drops words in
/// the bundled stop-word list. Idempotent.
pub fn clean_text(raw: &str, keep_nonalpha: bool, remove_stopwords: bool) -> String {
    let mut text = raw.to_lowercase();
    // Removal can expose new marker pairs ("[__**x**]" -> "[**x**]"), so
    // iterate to a fixpoint; every round strictly shrinks the text.
    loop {
        let next = strip_deid_brackets(&text).replace("==", "").replace("--", "").replace("__", "");
        if next == text {
            break;
        }
        text = next;
    }
    let words = text.split_whitespace().filter(|w| {
        if !keep_nonalpha && !w.chars().any(|c| c.is_alphabetic()) {
            return false;
        }
        !(remove_stopwords && is_stopword(w))
    });
    words.collect::<Vec<_>>().join(" ")
}

fn strip_deid_brackets(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find(DEID_OPEN) {
        match rest[start + DEID_OPEN.len()..].find(DEID_CLOSE) {
            Some(end) => {
                out.push_str(&rest[..start]);
                out.push(' ');
                rest = &rest[start + DEID_OPEN.len() + end + DEID_CLOSE.len()..];
            }
            None => break, // unterminated span: leave as-is
        }
    }
    out.push_str(rest);
    out
}

/// A line is treated as a section header when everything before its first
/// colon is a short run of alphabetic words. Returns the lowercased header.
fn header_of_line(line: &str) -> Option<String> {
    let trimmed = line.trim_start();
    let colon = trimmed.find(':')?;
    let head = &trimmed[..colon];
    if head.is_empty() || head.len() > 40 {
        return None;
    }
    let ok = head.chars().all(|c| c.is_ascii_alphabetic() || c == ' ')
        && head.chars().any(|c| c.is_ascii_alphabetic());
    ok.then(|| head.trim().to_lowercase())
}

/// Split text into (header, body-lines) sections. Text before the first
/// recognized header becomes a section with no header.
pub(crate) fn split_sections(text: &str) -> Vec<(Option<String>, Vec<&str>)> {
    let mut sections: Vec<(Option<String>, Vec<&str>)> = Vec::new();
    for line in text.lines() {
        if let Some(h) = header_of_line(line) {
            sections.push((Some(h), vec![line]));
        } else {
            match sections.last_mut() {
                Some((_, lines)) => lines.push(line),
                None => sections.push((None, vec![line])),
            }
        }
    }
    sections
}

/// Move the sections named in `front_sections` (matched case-insensitively
/// on `header:` lines) to the beginning of the text, in `front_sections`
/// order. Everything else keeps its original relative order. Idempotent.
pub fn reorder_sections(text: &str, front_sections: &[String]) -> String {
    let had_trailing_newline = text.ends_with('\n');
    let sections = split_sections(text);
    let wanted: Vec<String> = front_sections.iter().map(|s| s.to_lowercase()).collect();

    let is_front = |h: &Option<String>| h.as_deref().map_or(None, |h| wanted.iter().position(|w| w == h));

    let mut front: Vec<(usize, &Vec<&str>)> = Vec::new();
    let mut rest: Vec<&Vec<&str>> = Vec::new();
    for (h, lines) in &sections {
        match is_front(h) {
            Some(rank) => front.push((rank, lines)),
            None => rest.push(lines),
        }
    }
    if front.is_empty() {
        return text.to_string();
    }
    front.sort_by_key(|(rank, _)| *rank); // stable: original order within a header name

    let mut out_lines: Vec<&str> = Vec::new();
    for (_, lines) in &front {
        out_lines.extend(lines.iter());
    }
    for lines in &rest {
        out_lines.extend(lines.iter());
    }
    let mut out = out_lines.join("\n");
    if had_trailing_newline {
        out.push('\n');
    }
    out
}

/// Token-to-id mapping with fixed reserved ids (PAD=0, UNK=1, CLS=2, SEP=3).
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn reserved_only() -> Self {
        let id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { token_to_id, id_to_token }
    }

    fn insert(&mut self, token: String) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
    }

    /// Id for a token, or UNK when absent.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    /// Total id count, reserved ids included.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always present
    }

    /// Serialize as one non-reserved token per line, in id order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token[RESERVED_TOKENS.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(s: &str) -> Self {
        let mut v = Vocabulary::reserved_only();
        for line in s.lines() {
            if !line.is_empty() {
                v.insert(line.to_string());
            }
        }
        v
    }
}

/// Build a vocabulary from whitespace tokens with frequency >= `min_freq`.
/// Ids are assigned after the reserved ids, by descending frequency then
/// lexicographic order, so two builds of the same corpus agree exactly.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocabulary> {
    build_vocab_from_tokens(corpus.iter().flat_map(|s| s.as_ref().split_whitespace().map(|t| t.to_string())), min_freq)
}

pub(crate) fn build_vocab_from_tokens(tokens: impl Iterator<Item = String>, min_freq: usize) -> Result<Vocabulary> {
    if min_freq < 1 {
        return Err(PrepError::Config("min_freq must be >= 1".into()));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for t in tokens {
        *freq.entry(t).or_insert(0) += 1;
    }
    let mut entries: Vec<(String, usize)> = freq.into_iter().filter(|(_, f)| *f >= min_freq).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut v = Vocabulary::reserved_only();
    for (t, _) in entries {
        v.insert(t);
    }
    Ok(v)
}

/// Word tokenizer. One word is one token, except in the test-only subword
/// mode where words longer than the threshold split into two pieces so the
/// multi-token-per-word aggregation path gets exercised.
#[derive(Debug, Clone, Default)]
pub struct Tokenizer {
    pub subword_threshold: Option<usize>,
}

impl Tokenizer {
    pub fn word_level() -> Self {
        Tokenizer { subword_threshold: None }
    }

    pub fn with_subword_split(threshold: usize) -> Self {
        Tokenizer { subword_threshold: Some(threshold) }
    }

    /// Token pieces for one word (one or two strings).
    pub fn pieces<'a>(&self, word: &'a str) -> Vec<&'a str> {
        match self.subword_threshold {
            Some(th) if word.chars().count() > th => {
                let mid_char = word.chars().count() / 2;
                let mid = word.char_indices().nth(mid_char).map(|(i, _)| i).unwrap_or(0);
                vec![&word[..mid], &word[mid..]]
            }
            _ => vec![word],
        }
    }
}

/// Cleaning and chunking options used across ablation variants.
#[derive(Debug, Clone)]
pub struct PrepConfig {
    pub keep_nonalpha: bool,
    pub remove_stopwords: bool,
    /// Keep the raw text order instead of moving key sections to the front.
    pub raw_order: bool,
    pub front_sections: Vec<String>,
    pub n_chunks: usize,
    pub content_len: usize,
    pub strategy: ChunkStrategy,
    pub tokenizer: Tokenizer,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            keep_nonalpha: false,
            remove_stopwords: false,
            raw_order: false,
            front_sections: default_front_sections(),
            n_chunks: 10,
            content_len: 510,
            strategy: ChunkStrategy::Sequential,
            tokenizer: Tokenizer::word_level(),
        }
    }
}

impl PrepConfig {
    /// Cleaned word sequence for a document under this configuration
    /// (section reordering followed by cleaning).
    pub fn prepare_words(&self, raw: &str) -> Vec<String> {
        let ordered = if self.raw_order {
            raw.to_string()
        } else {
            reorder_sections(raw, &self.front_sections)
        };
        clean_text(&ordered, self.keep_nonalpha, self.remove_stopwords)
            .split_whitespace()
            .map(|w| w.to_string())
            .collect()
    }
}
