//! Byte-level subword tokenizer with offset tracking.
//!
//! The vocabulary is fixed at the bottom: five special tokens, then the 256
//! byte symbols, then learned pair merges. Encoding normalizes whitespace
//! (runs collapse to a single space, ends trimmed) but every emitted token
//! carries byte offsets into the *original* string, so downstream span
//! bookkeeping never sees the normalized form.

use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
pub const NUM_BASE_BYTES: u32 = 256;
/// Id of the first learned merge token.
pub const FIRST_MERGE_ID: u32 = NUM_SPECIALS + NUM_BASE_BYTES;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus contains no text")]
    EmptyCorpus,
    #[error("vocab_size {requested} too small; need more than {floor} (specials + byte symbols)")]
    VocabTooSmall { requested: usize, floor: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("vocabulary file: {0}")]
    VocabIo(#[from] serde_json::Error),
    #[error("span {start}..{end} out of bounds for text of {len} bytes")]
    SpanOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
}

/// An attribution span in some source text, in byte offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarSpan {
    pub variable_id: u32,
    pub start: usize,
    pub end: usize,
}

/// Learned subword vocabulary.
///
/// Ids are dense: specials `0..5`, byte symbols `5..261`, merges from 261 in
/// learned order. Serialization stores only the merge list, so the file
/// cannot express a vocabulary violating that layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    split_digits: bool,
    /// Byte expansion for every id; empty for specials.
    token_bytes: Vec<Vec<u8>>,
    /// Merge pair -> rank (application priority) for encoding.
    ranks: HashMap<(u32, u32), u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: BTreeMap<String, u32>,
    num_base_bytes: u32,
    split_digits: bool,
    merges: Vec<(u32, u32)>,
}

impl Vocab {
    pub fn from_merges(merges: Vec<(u32, u32)>, split_digits: bool) -> Result<Self, TokenizerError> {
        let mut token_bytes: Vec<Vec<u8>> = Vec::with_capacity(
            NUM_SPECIALS as usize + NUM_BASE_BYTES as usize + merges.len(),
        );
        for _ in 0..NUM_SPECIALS {
            token_bytes.push(Vec::new());
        }
        for b in 0..=255u8 {
            token_bytes.push(vec![b]);
        }
        for (i, &(l, r)) in merges.iter().enumerate() {
            let id = FIRST_MERGE_ID as usize + i;
            for half in [l, r] {
                if (half as usize) < NUM_SPECIALS as usize || half as usize >= id {
                    return Err(TokenizerError::InvalidVocab(format!(
                        "merge {i} references id {half}, outside {NUM_SPECIALS}..{id}"
                    )));
                }
            }
            let mut bytes = token_bytes[l as usize].clone();
            bytes.extend_from_slice(&token_bytes[r as usize]);
            token_bytes.push(bytes);
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i as u32))
            .collect();
        Ok(Self {
            merges,
            split_digits,
            token_bytes,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn split_digits(&self) -> bool {
        self.split_digits
    }

    /// Byte expansion of a token id (empty for specials; `None` if out of range).
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(|v| v.as_slice())
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: 1,
            specials: [
                ("pad".to_string(), PAD),
                ("cls".to_string(), CLS),
                ("sep".to_string(), SEP),
                ("mask".to_string(), MASK),
                ("unk".to_string(), UNK),
            ]
            .into_iter()
            .collect(),
            num_base_bytes: NUM_BASE_BYTES,
            split_digits: self.split_digits,
            merges: self.merges.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serialization")
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(json)?;
        if file.version != 1 {
            return Err(TokenizerError::InvalidVocab(format!(
                "unsupported version {}",
                file.version
            )));
        }
        if file.num_base_bytes != NUM_BASE_BYTES {
            return Err(TokenizerError::InvalidVocab(format!(
                "expected {NUM_BASE_BYTES} base byte symbols, file declares {}",
                file.num_base_bytes
            )));
        }
        let expect: &[(&str, u32)] = &[
            ("pad", PAD),
            ("cls", CLS),
            ("sep", SEP),
            ("mask", MASK),
            ("unk", UNK),
        ];
        for &(name, id) in expect {
            if file.specials.get(name) != Some(&id) {
                return Err(TokenizerError::InvalidVocab(format!(
                    "special token {name:?} missing or not id {id}"
                )));
            }
        }
        Self::from_merges(file.merges, file.split_digits)
    }

    /// Wrap `text` as CLS + subwords + SEP, truncated to `max_len` with SEP
    /// always last. Offsets index bytes of the original `text`.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenizedSequence {
        assert!(max_len >= 2, "max_len must fit CLS and SEP");
        let (norm, orig_at) = normalize_whitespace(text);
        let norm = norm.as_bytes();

        let mut ids = vec![CLS];
        let mut offsets: Vec<Option<(usize, usize)>> = vec![None];
        let budget = max_len - 2;
        'outer: for (cs, ce) in chunk_ranges(norm, self.split_digits) {
            let mut piece: Vec<(u32, usize, usize)> = (cs..ce)
                .map(|i| (NUM_SPECIALS + norm[i] as u32, i, i + 1))
                .collect();
            self.apply_merges(&mut piece);
            for (id, ns, ne) in piece {
                if ids.len() - 1 == budget {
                    break 'outer;
                }
                ids.push(id);
                offsets.push(Some((orig_at[ns], orig_at[ne - 1] + 1)));
            }
        }
        ids.push(SEP);
        offsets.push(None);
        let attention_mask = vec![1u8; ids.len()];
        TokenizedSequence {
            ids,
            offsets,
            attention_mask,
        }
    }

    fn apply_merges(&self, piece: &mut Vec<(u32, usize, usize)>) {
        loop {
            let mut best: Option<(u32, usize)> = None;
            for i in 0..piece.len().saturating_sub(1) {
                if let Some(&rank) = self.ranks.get(&(piece[i].0, piece[i + 1].0)) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, i)) = best else { break };
            let merged_id = FIRST_MERGE_ID + rank;
            piece[i] = (merged_id, piece[i].1, piece[i + 1].2);
            piece.remove(i + 1);
        }
    }

    /// Inverse of [`Vocab::encode`] up to whitespace normalization. Special
    /// ids and out-of-range ids contribute nothing.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if let Some(b) = self.token_bytes(id) {
                bytes.extend_from_slice(b);
            }
        }
        let text = String::from_utf8_lossy(&bytes).into_owned();
        text.strip_prefix(' ').map(str::to_owned).unwrap_or(text)
    }
}

/// Tokenized text: ids, per-token byte offsets into the source (None for
/// specials and padding), and a 0/1 attention mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    pub offsets: Vec<Option<(usize, usize)>>,
    pub attention_mask: Vec<u8>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Extend with PAD up to `len` (mask 0, no offsets).
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.offsets.push(None);
            self.attention_mask.push(0);
        }
    }
}

/// Assign each token the variable whose span overlaps its offsets by the most
/// bytes. Specials, padding, tokens made only of separator characters, and
/// tokens outside every span get `None`. Overlap ties go to the span listed
/// first.
pub fn map_tokens_to_variables(
    seq: &TokenizedSequence,
    text: &str,
    spans: &[VarSpan],
) -> Result<Vec<Option<u32>>, TokenizerError> {
    for s in spans {
        if s.start > s.end || s.end > text.len() {
            return Err(TokenizerError::SpanOutOfBounds {
                start: s.start,
                end: s.end,
                len: text.len(),
            });
        }
    }
    let labels = seq
        .offsets
        .iter()
        .map(|off| {
            let &(ts, te) = off.as_ref()?;
            let piece = text.get(ts..te)?;
            if piece.chars().all(is_joiner) {
                return None;
            }
            let mut best: Option<(usize, u32)> = None;
            for s in spans {
                let overlap = te.min(s.end).saturating_sub(ts.max(s.start));
                if overlap > 0 && best.map_or(true, |(b, _)| overlap > b) {
                    best = Some((overlap, s.variable_id));
                }
            }
            best.map(|(_, id)| id)
        })
        .collect();
    Ok(labels)
}

fn is_joiner(c: char) -> bool {
    c.is_whitespace() || matches!(c, ',' | ';' | ':')
}

/// Collapse whitespace runs to single spaces and trim the ends. Returns the
/// normalized string plus, for each normalized byte, the index of the source
/// byte it stands for (a collapsed run is represented by its first byte).
fn normalize_whitespace(text: &str) -> (String, Vec<usize>) {
    let mut out = String::with_capacity(text.len());
    let mut map = Vec::with_capacity(text.len());
    let mut pending_ws: Option<usize> = None;
    for (pos, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if pending_ws.is_none() {
                pending_ws = Some(pos);
            }
            continue;
        }
        if let Some(ws) = pending_ws.take() {
            if !out.is_empty() {
                out.push(' ');
                map.push(ws);
            }
        }
        out.push(ch);
        for i in 0..ch.len_utf8() {
            map.push(pos + i);
        }
    }
    (out, map)
}

/// Split normalized bytes into merge domains: each chunk is an optional
/// leading space plus a run of non-space bytes. With `split_digits` every
/// digit stands alone (the space too, so digits never merge with anything).
/// Merges never cross chunk boundaries.
fn chunk_ranges(norm: &[u8], split_digits: bool) -> Vec<(usize, usize)> {
    let stop = |b: u8| b == b' ' || (split_digits && b.is_ascii_digit());
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < norm.len() {
        let start = i;
        if norm[i] == b' ' {
            i += 1;
            if split_digits && i < norm.len() && norm[i].is_ascii_digit() {
                chunks.push((start, i));
                continue;
            }
        }
        if i < norm.len() && split_digits && norm[i].is_ascii_digit() {
            i += 1;
        } else {
            while i < norm.len() && !stop(norm[i]) {
                i += 1;
            }
        }
        chunks.push((start, i));
    }
    chunks
}

/// Learn a vocabulary by greedy pair merging over the corpus word counts.
///
/// `vocab_size` bounds the total id count (specials + bytes + merges);
/// training stops early when no adjacent pair occurs twice. The procedure is
/// deterministic: ties on pair count go to the numerically smallest pair.
pub fn train_subword<'a, I>(
    corpus: I,
    vocab_size: usize,
    split_digits: bool,
) -> Result<Vocab, TokenizerError>
where
    I: IntoIterator<Item = &'a str>,
{
    let floor = (NUM_SPECIALS + NUM_BASE_BYTES) as usize;
    if vocab_size <= floor {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            floor,
        });
    }

    // Chunk frequency table, insertion-ordered for determinism.
    let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut words: Vec<(Vec<u32>, u64)> = Vec::new();
    for doc in corpus {
        let (norm, _) = normalize_whitespace(doc);
        let norm = norm.as_bytes();
        for (cs, ce) in chunk_ranges(norm, split_digits) {
            let chunk = &norm[cs..ce];
            match index.get(chunk) {
                Some(&i) => words[i].1 += 1,
                None => {
                    index.insert(chunk.to_vec(), words.len());
                    let ids = chunk.iter().map(|&b| NUM_SPECIALS + b as u32).collect();
                    words.push((ids, 1));
                }
            }
        }
    }
    if words.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut merges: Vec<(u32, u32)> = Vec::new();
    while floor + merges.len() < vocab_size {
        let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (ids, n) in &words {
            for w in ids.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += n;
            }
        }
        // Highest count wins; ties go to the numerically smallest pair, which
        // ascending traversal with a strict comparison delivers.
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &c) in &counts {
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let new_id = FIRST_MERGE_ID + merges.len() as u32;
        for (ids, _) in &mut words {
            let mut i = 0;
            while i + 1 < ids.len() {
                if (ids[i], ids[i + 1]) == pair {
                    ids[i] = new_id;
                    ids.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        merges.push(pair);
    }
    Vocab::from_merges(merges, split_digits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base_vocab() -> Vocab {
        Vocab::from_merges(Vec::new(), false).unwrap()
    }

    fn byte_id(b: u8) -> u32 {
        NUM_SPECIALS + b as u32
    }

    #[test]
    fn repeated_letter_pair_is_learned_first() {
        let vocab = train_subword(["aaaa aaaa"], 300, false).unwrap();
        assert_eq!(vocab.merges()[0], (byte_id(b'a'), byte_id(b'a')));
        // "aa"+"aa" repeats across both words; the space pair occurs once.
        assert_eq!(vocab.merges().len(), 2);
        assert_eq!(vocab.merges()[1], (FIRST_MERGE_ID, FIRST_MERGE_ID));
    }

    #[test]
    fn too_small_vocab_size_is_rejected() {
        let err = train_subword(["text"], 261, false).unwrap_err();
        assert!(matches!(err, TokenizerError::VocabTooSmall { .. }));
    }

    #[test]
    fn whitespace_only_corpus_is_rejected() {
        let err = train_subword(["   ", "\t\n"], 300, false).unwrap_err();
        assert!(matches!(err, TokenizerError::EmptyCorpus));
    }

    #[test]
    fn training_is_deterministic() {
        let docs = ["temp: 99.4; hr: 76", "temp: 98.6; hr: 80", "hr: 76"];
        let a = train_subword(docs, 280, false).unwrap();
        let b = train_subword(docs, 280, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_text_encodes_to_cls_sep() {
        let seq = base_vocab().encode("", 16);
        assert_eq!(seq.ids, vec![CLS, SEP]);
        assert_eq!(seq.offsets, vec![None, None]);
        assert_eq!(seq.attention_mask, vec![1, 1]);
    }

    #[test]
    fn truncation_keeps_sep_last() {
        let seq = base_vocab().encode("abcdefgh", 5);
        assert_eq!(seq.ids.len(), 5);
        assert_eq!(seq.ids[0], CLS);
        assert_eq!(*seq.ids.last().unwrap(), SEP);
        assert_eq!(seq.ids[1..4], [byte_id(b'a'), byte_id(b'b'), byte_id(b'c')]);
    }

    #[test]
    fn offsets_point_into_original_text_across_messy_whitespace() {
        let text = "ab   cd";
        let seq = base_vocab().encode(text, 32);
        let spans: Vec<&str> = seq
            .offsets
            .iter()
            .flatten()
            .map(|&(s, e)| &text[s..e])
            .collect();
        assert_eq!(spans, vec!["a", "b", " ", "c", "d"]);
    }

    #[test]
    fn digit_splitting_keeps_digits_single() {
        let vocab = train_subword(["99.4 99.4 99.4"], 300, true).unwrap();
        for &(l, r) in vocab.merges() {
            for id in [l, r] {
                let b = vocab.token_bytes(id).unwrap();
                assert!(!b.iter().any(u8::is_ascii_digit) || b.len() == 1);
            }
        }
        let seq = vocab.encode("99", 16);
        assert_eq!(seq.ids, vec![CLS, byte_id(b'9'), byte_id(b'9'), SEP]);
    }

    #[test]
    fn comorbidity_tokens_labeled_but_comma_is_not() {
        let text = "Coagulopathy, Dementia";
        let seq = TokenizedSequence {
            ids: vec![CLS, 300, 301, 302, byte_id(b','), 303, SEP],
            offsets: vec![
                None,
                Some((0, 2)),   // Co
                Some((2, 6)),   // agul
                Some((6, 12)),  // opathy
                Some((12, 13)), // ,
                Some((13, 22)), // " Dementia"
                None,
            ],
            attention_mask: vec![1; 7],
        };
        let spans = [VarSpan {
            variable_id: 7,
            start: 0,
            end: 22,
        }];
        let labels = map_tokens_to_variables(&seq, text, &spans).unwrap();
        assert_eq!(
            labels,
            vec![None, Some(7), Some(7), Some(7), None, Some(7), None]
        );
    }

    #[test]
    fn no_spans_means_no_labels() {
        let text = "abc";
        let seq = base_vocab().encode(text, 16);
        let labels = map_tokens_to_variables(&seq, text, &[]).unwrap();
        assert!(labels.iter().all(Option::is_none));
    }

    #[test]
    fn straddling_token_goes_to_larger_overlap() {
        let text = "abcd";
        let seq = TokenizedSequence {
            ids: vec![300],
            offsets: vec![Some((0, 4))],
            attention_mask: vec![1],
        };
        let spans = [
            VarSpan {
                variable_id: 1,
                start: 0,
                end: 1,
            },
            VarSpan {
                variable_id: 2,
                start: 1,
                end: 4,
            },
        ];
        let labels = map_tokens_to_variables(&seq, text, &spans).unwrap();
        assert_eq!(labels, vec![Some(2)]);
    }

    #[test]
    fn overlap_tie_goes_to_earlier_span() {
        let text = "abcd";
        let seq = TokenizedSequence {
            ids: vec![300],
            offsets: vec![Some((0, 4))],
            attention_mask: vec![1],
        };
        let spans = [
            VarSpan {
                variable_id: 9,
                start: 0,
                end: 2,
            },
            VarSpan {
                variable_id: 4,
                start: 2,
                end: 4,
            },
        ];
        let labels = map_tokens_to_variables(&seq, text, &spans).unwrap();
        assert_eq!(labels, vec![Some(9)]);
    }

    #[test]
    fn out_of_bounds_span_is_an_error() {
        let text = "ab";
        let seq = base_vocab().encode(text, 8);
        let err = map_tokens_to_variables(
            &seq,
            text,
            &[VarSpan {
                variable_id: 0,
                start: 1,
                end: 5,
            }],
        )
        .unwrap_err();
        assert!(matches!(err, TokenizerError::SpanOutOfBounds { .. }));
    }

    #[test]
    fn vocab_json_roundtrip() {
        let vocab = train_subword(["heart rate 76 heart rate 80"], 300, false).unwrap();
        let json = vocab.to_json();
        let loaded = Vocab::from_json(&json).unwrap();
        assert_eq!(vocab, loaded);
    }

    #[test]
    fn vocab_json_rejects_forward_merge_reference() {
        let json = r#"{
            "version": 1,
            "specials": {"pad":0,"cls":1,"sep":2,"mask":3,"unk":4},
            "num_base_bytes": 256,
            "split_digits": false,
            "merges": [[262, 10]]
        }"#;
        assert!(matches!(
            Vocab::from_json(json),
            Err(TokenizerError::InvalidVocab(_))
        ));
    }

    #[test]
    fn pad_to_extends_mask_with_zeros() {
        let mut seq = base_vocab().encode("ab", 8);
        seq.pad_to(6);
        assert_eq!(seq.ids.len(), 6);
        assert_eq!(seq.attention_mask, vec![1, 1, 1, 1, 0, 0]);
        assert_eq!(seq.ids[4], PAD);
    }

    proptest! {
        #[test]
        fn roundtrip_equals_normalized_text(s in "[ a-zA-Z0-9.,;:%-]{0,60}") {
            let vocab = train_subword(
                ["temp: 99.4; hr: 76, rr: 16", "alpha beta gamma alpha beta"],
                320,
                false,
            ).unwrap();
            let seq = vocab.encode(&s, 1024);
            let (norm, _) = normalize_whitespace(&s);
            prop_assert_eq!(vocab.decode(&seq.ids), norm);
        }

        #[test]
        fn offsets_are_monotone_in_bounds_and_cover_content(s in "[ a-zA-Z0-9.,;:%-]{0,60}") {
            let vocab = base_vocab();
            let seq = vocab.encode(&s, 4096);
            let mut last_end = 0usize;
            let mut covered = vec![false; s.len()];
            for off in seq.offsets.iter().flatten() {
                let (a, b) = *off;
                prop_assert!(a < b && b <= s.len());
                prop_assert!(a >= last_end);
                last_end = b;
                for c in covered[a..b].iter_mut() {
                    *c = true;
                }
            }
            for (i, byte) in s.bytes().enumerate() {
                if !byte.is_ascii_whitespace() {
                    prop_assert!(covered[i], "byte {} uncovered", i);
                }
            }
        }

        #[test]
        fn plain_text_never_encodes_to_specials(s in "[ a-zA-Z0-9.,;:%-]{0,60}") {
            let vocab = train_subword(["some shared text some shared"], 300, false).unwrap();
            let seq = vocab.encode(&s, 1024);
            for &id in &seq.ids[1..seq.ids.len() - 1] {
                prop_assert!(id >= NUM_SPECIALS);
            }
        }
    }
}
