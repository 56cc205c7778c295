//! Fixed-length token windows. A document becomes `n_chunks` chunks of
//! `content_len` content slots each, with CLS at slot 0, content in slots
//! 1..=content_len, and SEP at the final slot. Shorter documents are padded,
//! longer ones truncated at `n_chunks * content_len` tokens.

use std::collections::HashMap;

use super::{PrepConfig, PrepError, Result, Vocabulary, CLS_ID, PAD_ID, SEP_ID};
use crate::textprep::dataset::{Document, LabelVocab};

/// Slots occupied by the tokens of one word within one chunk (`end` exclusive).
/// A word whose pieces straddle a chunk boundary has a span in each chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub word: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct TokenChunk {
    pub token_ids: Vec<u32>,
    /// True on CLS, SEP and content slots; false on PAD slots.
    pub pad_mask: Vec<bool>,
    pub word_spans: Vec<WordSpan>,
    pub chunk_index: usize,
}

impl TokenChunk {
    /// Chunk with no content tokens: CLS, PAD padding, SEP.
    pub fn empty(chunk_index: usize, content_len: usize) -> Self {
        let slots = content_len + 2;
        let mut token_ids = vec![PAD_ID; slots];
        let mut pad_mask = vec![false; slots];
        token_ids[0] = CLS_ID;
        token_ids[slots - 1] = SEP_ID;
        pad_mask[0] = true;
        pad_mask[slots - 1] = true;
        TokenChunk { token_ids, pad_mask, word_spans: Vec::new(), chunk_index }
    }

    pub fn slot_count(&self) -> usize {
        self.token_ids.len()
    }

    /// Number of real content tokens (specials excluded).
    pub fn content_token_count(&self) -> usize {
        let last = self.slot_count() - 1;
        (1..last).filter(|&i| self.pad_mask[i]).count()
    }

    /// Content token ids in slot order (PAD and specials excluded).
    pub fn content_token_ids(&self) -> Vec<u32> {
        let last = self.slot_count() - 1;
        (1..last).filter(|&i| self.pad_mask[i]).map(|i| self.token_ids[i]).collect()
    }

    /// Slot indices flagged real (CLS, content, SEP).
    pub fn unmasked_slots(&self) -> Vec<usize> {
        (0..self.slot_count()).filter(|&i| self.pad_mask[i]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ChunkedDocument {
    pub id: String,
    pub chunks: Vec<TokenChunk>,
    /// Binary gold vector over the label vocabulary.
    pub labels: Vec<bool>,
    /// Words that received at least one token slot, in chunk order.
    /// `WordSpan::word` indexes into this list.
    pub words: Vec<String>,
}

/// How section headers map to chunk indices under meaningful chunking.
#[derive(Debug, Clone)]
pub struct SectionMap {
    entries: HashMap<String, usize>,
    catch_all: Option<usize>,
}

impl SectionMap {
    /// Default ten-group mapping for discharge-summary-like documents.
    /// A stand-in, not a canonical grouping; override via a mapping file.
    pub fn default_groups() -> Self {
        let groups: &[(&str, usize)] = &[
            ("discharge diagnosis", 0),
            ("discharge disposition", 1),
            ("discharge condition", 1),
            ("discharge conditions", 1),
            ("chief complaint", 2),
            ("history of present illness", 2),
            ("past medical history", 3),
            ("family history", 3),
            ("social history", 3),
            ("allergies", 4),
            ("medications on admission", 4),
            ("physical exam", 5),
            ("pertinent results", 5),
            ("brief hospital course", 6),
            ("major surgical or invasive procedure", 7),
            ("discharge medications", 8),
            ("discharge instructions", 9),
            ("followup instructions", 9),
        ];
        SectionMap {
            entries: groups.iter().map(|(h, i)| (h.to_string(), *i)).collect(),
            catch_all: Some(6),
        }
    }

    /// Parse a mapping file: one `header<TAB>chunk_index` per line, `*` as
    /// the catch-all header. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut catch_all = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (header, idx) = line.split_once('\t').ok_or_else(|| PrepError::Parse {
                line: i + 1,
                msg: "expected header<TAB>chunk_index".into(),
            })?;
            let idx: usize = idx.trim().parse().map_err(|_| PrepError::Parse {
                line: i + 1,
                msg: format!("invalid chunk index {idx:?}"),
            })?;
            if header == "*" {
                catch_all = Some(idx);
            } else {
                entries.insert(header.to_lowercase(), idx);
            }
        }
        Ok(SectionMap { entries, catch_all })
    }

    pub fn to_file_string(&self) -> String {
        let mut rows: Vec<(String, usize)> =
            self.entries.iter().map(|(h, i)| (h.clone(), *i)).collect();
        rows.sort();
        let mut out = String::new();
        for (h, i) in rows {
            out.push_str(&format!("{h}\t{i}\n"));
        }
        if let Some(i) = self.catch_all {
            out.push_str(&format!("*\t{i}\n"));
        }
        out
    }

    /// Chunk index for a section header (None for unmapped without catch-all).
    pub fn chunk_for(&self, header: Option<&str>) -> Option<usize> {
        match header {
            Some(h) => self.entries.get(h).copied().or(self.catch_all),
            None => self.catch_all,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ChunkStrategy {
    Sequential,
    Meaningful(SectionMap),
}

/// Preprocess and chunk one document.
pub fn chunk_document(
    doc: &Document,
    vocab: &Vocabulary,
    labels: &LabelVocab,
    prep: &PrepConfig,
) -> Result<ChunkedDocument> {
    let gold = labels.binarize(&doc.labels);
    let (chunks, words) = match &prep.strategy {
        ChunkStrategy::Sequential => {
            let words = prep.prepare_words(&doc.text);
            chunk_words(&words, vocab, prep)?
        }
        ChunkStrategy::Meaningful(map) => chunk_meaningful(&doc.text, vocab, map, prep)?,
    };
    Ok(ChunkedDocument { id: doc.id.clone(), chunks, labels: gold, words })
}

/// Sequential strategy over an already-prepared word sequence.
pub fn chunk_words(words: &[String], vocab: &Vocabulary, prep: &PrepConfig) -> Result<(Vec<TokenChunk>, Vec<String>)> {
    let mut tokens: Vec<(usize, u32)> = Vec::with_capacity(words.len());
    for (wi, w) in words.iter().enumerate() {
        for piece in prep.tokenizer.pieces(w) {
            tokens.push((wi, vocab.id(piece)));
        }
    }
    let cap = prep.n_chunks * prep.content_len;
    tokens.truncate(cap);

    let mut chunks = Vec::with_capacity(prep.n_chunks);
    for ci in 0..prep.n_chunks {
        let lo = ci * prep.content_len;
        if lo >= tokens.len() {
            chunks.push(TokenChunk::empty(ci, prep.content_len));
            continue;
        }
        let hi = ((ci + 1) * prep.content_len).min(tokens.len());
        chunks.push(fill_chunk(ci, prep.content_len, &tokens[lo..hi]));
    }
    let used_words = tokens.last().map(|&(wi, _)| wi + 1).unwrap_or(0);
    Ok((chunks, words[..used_words].to_vec()))
}

/// Meaningful strategy: each chunk holds only the tokens of the sections
/// mapped to it, padded and truncated per chunk.
fn chunk_meaningful(
    raw: &str,
    vocab: &Vocabulary,
    map: &SectionMap,
    prep: &PrepConfig,
) -> Result<(Vec<TokenChunk>, Vec<String>)> {
    let mut group_words: Vec<Vec<String>> = vec![Vec::new(); prep.n_chunks];
    for (header, lines) in super::split_sections(raw) {
        let Some(ci) = map.chunk_for(header.as_deref()) else { continue };
        if ci >= prep.n_chunks {
            return Err(PrepError::Config(format!(
                "section map assigns chunk {ci} but n_chunks is {}",
                prep.n_chunks
            )));
        }
        let cleaned = super::clean_text(&lines.join("\n"), prep.keep_nonalpha, prep.remove_stopwords);
        group_words[ci].extend(cleaned.split_whitespace().map(|w| w.to_string()));
    }

    let mut chunks = Vec::with_capacity(prep.n_chunks);
    let mut all_words = Vec::new();
    for (ci, words) in group_words.iter().enumerate() {
        let mut tokens: Vec<(usize, u32)> = Vec::new();
        for (wi, w) in words.iter().enumerate() {
            for piece in prep.tokenizer.pieces(w) {
                tokens.push((all_words.len() + wi, vocab.id(piece)));
            }
        }
        tokens.truncate(prep.content_len);
        if tokens.is_empty() {
            chunks.push(TokenChunk::empty(ci, prep.content_len));
            continue;
        }
        let used = tokens.last().map(|&(wi, _)| wi + 1 - all_words.len()).unwrap_or(0);
        // Word indices must stay contiguous with `all_words`.
        chunks.push(fill_chunk(ci, prep.content_len, &tokens));
        all_words.extend(words[..used].iter().cloned());
    }
    Ok((chunks, all_words))
}

fn fill_chunk(chunk_index: usize, content_len: usize, tokens: &[(usize, u32)]) -> TokenChunk {
    debug_assert!(tokens.len() <= content_len);
    let mut chunk = TokenChunk::empty(chunk_index, content_len);
    let mut spans: Vec<WordSpan> = Vec::new();
    for (k, &(wi, id)) in tokens.iter().enumerate() {
        let slot = 1 + k;
        chunk.token_ids[slot] = id;
        chunk.pad_mask[slot] = true;
        match spans.last_mut() {
            Some(span) if span.word == wi && span.end == slot => span.end = slot + 1,
            _ => spans.push(WordSpan { word: wi, start: slot, end: slot + 1 }),
        }
    }
    chunk.word_spans = spans;
    chunk
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textprep::{build_vocab, Tokenizer};
    use proptest::prelude::*;

    fn vocab_for(words: &[String]) -> Vocabulary {
        build_vocab(&[words.join(" ")], 1).unwrap()
    }

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    fn prep(n_chunks: usize, content_len: usize) -> PrepConfig {
        PrepConfig { n_chunks, content_len, ..PrepConfig::default() }
    }

    #[test]
    fn short_doc_pads_tail_chunks() {
        let w = words(100);
        let v = vocab_for(&w);
        let (chunks, used) = chunk_words(&w, &v, &prep(10, 510)).unwrap();
        assert_eq!(chunks.len(), 10);
        assert_eq!(chunks[0].content_token_count(), 100);
        assert_eq!(chunks[0].slot_count(), 512);
        for c in &chunks[1..] {
            assert_eq!(c.content_token_count(), 0);
            assert!(c.pad_mask[0] && c.pad_mask[511]);
        }
        assert_eq!(used.len(), 100);
    }

    #[test]
    fn long_doc_truncates_at_budget() {
        let w = words(6000);
        let v = vocab_for(&w);
        let (chunks, used) = chunk_words(&w, &v, &prep(10, 510)).unwrap();
        let total: usize = chunks.iter().map(|c| c.content_token_count()).sum();
        assert_eq!(total, 5100);
        assert_eq!(used.len(), 5100);
    }

    #[test]
    fn layout_is_cls_content_sep() {
        let w = words(3);
        let v = vocab_for(&w);
        let (chunks, _) = chunk_words(&w, &v, &prep(2, 5)).unwrap();
        let c = &chunks[0];
        assert_eq!(c.token_ids[0], CLS_ID);
        assert_eq!(c.token_ids[6], SEP_ID);
        assert_eq!(c.token_ids[4], PAD_ID);
        assert_eq!(c.pad_mask, vec![true, true, true, true, false, false, true]);
    }

    #[test]
    fn word_spans_reconstruct_word_sequence() {
        let w: Vec<String> = ["alpha", "hypertension", "beta", "cardiomyopathy", "x"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut cfg = prep(2, 4);
        cfg.tokenizer = Tokenizer::with_subword_split(6);
        // Build vocab over the same pieces the tokenizer will emit.
        let pieces: Vec<String> = w
            .iter()
            .flat_map(|word| cfg.tokenizer.pieces(word).into_iter().map(|p| p.to_string()))
            .collect();
        let v = build_vocab(&[pieces.join(" ")], 1).unwrap();
        let (chunks, used) = chunk_words(&w, &v, &cfg).unwrap();

        // Spans must partition the content slots, in order, and map back to
        // the word sequence prefix.
        let mut seen_words = Vec::new();
        for c in &chunks {
            let mut next_slot = 1;
            for s in &c.word_spans {
                assert_eq!(s.start, next_slot);
                assert!(s.end > s.start);
                next_slot = s.end;
                if seen_words.last() != Some(&s.word) {
                    seen_words.push(s.word);
                }
            }
            assert_eq!(next_slot - 1, c.content_token_count());
        }
        let expect: Vec<usize> = (0..used.len()).collect();
        assert_eq!(seen_words, expect);
        // "hypertension" (12 chars) splits in two; spans include both slots.
        let hyper_span = chunks[0].word_spans.iter().find(|s| s.word == 1).unwrap();
        assert_eq!(hyper_span.end - hyper_span.start, 2);
    }

    #[test]
    fn meaningful_chunking_routes_sections() {
        let raw = "discharge diagnosis: flu pneumonia\nbrief hospital course: stable recovery seen\ndischarge medications: aspirin\n";
        let map = SectionMap::default_groups();
        let all_words = "discharge diagnosis: flu pneumonia brief hospital course: stable recovery seen medications aspirin";
        let v = build_vocab(&[all_words], 1).unwrap();
        let cfg = PrepConfig {
            strategy: ChunkStrategy::Meaningful(map),
            n_chunks: 10,
            content_len: 8,
            ..PrepConfig::default()
        };
        let doc = Document { id: "d0".into(), text: raw.into(), labels: vec![] };
        let lv = LabelVocab::from_codes(vec!["L0".into()]).unwrap();
        let cd = chunk_document(&doc, &v, &lv, &cfg).unwrap();
        assert_eq!(cd.chunks.len(), 10);
        // diagnosis section -> chunk 0, course -> chunk 6, medications -> chunk 8
        assert_eq!(cd.chunks[0].content_token_count(), 4);
        assert_eq!(cd.chunks[6].content_token_count(), 6);
        assert_eq!(cd.chunks[8].content_token_count(), 3);
        assert_eq!(cd.chunks[1].content_token_count(), 0);
        // words list follows chunk order
        assert_eq!(cd.words[0], "discharge");
        assert!(cd.words.contains(&"aspirin".to_string()));
    }

    #[test]
    fn section_map_file_round_trip() {
        let map = SectionMap::default_groups();
        let text = map.to_file_string();
        let parsed = SectionMap::parse(&text).unwrap();
        assert_eq!(parsed.chunk_for(Some("discharge diagnosis")), Some(0));
        assert_eq!(parsed.chunk_for(Some("unknown header")), Some(6));
        assert_eq!(parsed.chunk_for(None), Some(6));
    }

    #[test]
    fn section_map_parse_error_names_line() {
        let err = SectionMap::parse("discharge diagnosis\t0\nbad line\n").unwrap_err();
        assert!(matches!(err, PrepError::Parse { line: 2, .. }));
    }

    proptest! {
        /// Concatenating content slots across chunks reproduces the first
        /// min(len, n_chunks*content_len) tokens.
        #[test]
        fn chunk_round_trip(n in 0usize..600, n_chunks in 1usize..6, content_len in 1usize..40) {
            let w = words(n);
            let v = vocab_for(&w);
            let cfg = prep(n_chunks, content_len);
            let (chunks, _) = chunk_words(&w, &v, &cfg).unwrap();
            let got: Vec<u32> = chunks.iter().flat_map(|c| c.content_token_ids()).collect();
            let expect: Vec<u32> = w.iter().take(n_chunks * content_len).map(|t| v.id(t)).collect();
            prop_assert_eq!(got, expect);

            // pad_mask is never true on a PAD slot
            for c in &chunks {
                for (slot, &id) in c.token_ids.iter().enumerate() {
                    if c.pad_mask[slot] {
                        prop_assert!(id != PAD_ID);
                    }
                }
            }
        }
    }
}
