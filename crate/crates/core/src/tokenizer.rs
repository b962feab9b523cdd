//! Greedy longest-match subword tokenization and `[CLS] source [SEP] auxiliary` packing.
//!
//! Offsets are half-open ranges of *character* indices (Unicode scalar values)
//! into the original, un-normalized text.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";

/// Words longer than this map straight to `[UNK]`.
const MAX_CHARS_PER_WORD: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub cls: usize,
    pub sep: usize,
    pub unk: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    specials: Specials,
    continuation_prefix: String,
    lowercase: bool,
}

impl Vocabulary {
    /// Builds a vocabulary where the position in `tokens` is the id.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Vocabulary(format!("empty token at id {id}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {tok:?}")));
            }
        }
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Vocabulary(format!("missing special token {s}")))
        };
        let specials = Specials {
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            unk: lookup(UNK)?,
            pad: lookup(PAD)?,
        };
        Ok(Self {
            tokens,
            index,
            specials,
            continuation_prefix: "##".to_string(),
            lowercase: true,
        })
    }

    /// Reads a newline-delimited token file; line number is the id.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_file_contents(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    /// Frequency-based builder for synthetic corpora: the specials, the
    /// `max_words` most frequent whole words, then every observed character
    /// both as a word-initial and a `##` continuation piece.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        max_words: usize,
        lowercase: bool,
    ) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut chars = std::collections::BTreeSet::new();
        for text in texts {
            for word in split_words(text, lowercase) {
                let s: String = word.iter().map(|(c, _)| *c).collect();
                chars.extend(word.iter().map(|(c, _)| *c));
                *counts.entry(s).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let mut push = |t: String, tokens: &mut Vec<String>| {
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        };
        for (w, _) in words.into_iter().take(max_words) {
            push(w, &mut tokens);
        }
        for c in chars {
            push(c.to_string(), &mut tokens);
            push(format!("##{c}"), &mut tokens);
        }
        let mut vocab = Self::from_tokens(tokens).expect("builder emits a valid vocabulary");
        vocab.lowercase = lowercase;
        vocab
    }

    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn continuation_prefix(&self) -> &str {
        &self.continuation_prefix
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    fn is_special(&self, id: usize) -> bool {
        let s = self.specials;
        id == s.cls || id == s.sep || id == s.unk || id == s.pad
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub offsets: Vec<Range<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Character range covered by tokens `first..=last`.
    pub fn char_span(&self, first: usize, last: usize) -> Range<usize> {
        self.offsets[first].start..self.offsets[last].end
    }

    fn push(&mut self, token: String, id: usize, offset: Range<usize>) {
        self.tokens.push(token);
        self.ids.push(id);
        self.offsets.push(offset);
    }
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits on whitespace and isolates punctuation characters. Each word is a
/// list of `(normalized char, original char index)` pairs.
fn split_words(text: &str, lowercase: bool) -> Vec<Vec<(char, usize)>> {
    let mut words = Vec::new();
    let mut current: Vec<(char, usize)> = Vec::new();
    for (idx, c) in text.chars().enumerate() {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            continue;
        }
        let normalized: Vec<(char, usize)> = if lowercase {
            c.to_lowercase().map(|l| (l, idx)).collect()
        } else {
            vec![(c, idx)]
        };
        if is_punctuation(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(normalized);
        } else {
            current.extend(normalized);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match subword tokenization. Unknown words become a single
/// `[UNK]` covering the whole word; this never fails.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for word in split_words(text, vocab.lowercase) {
        let whole = word[0].1..word[word.len() - 1].1 + 1;
        if word.len() > MAX_CHARS_PER_WORD {
            seq.push(UNK.to_string(), vocab.specials.unk, whole);
            continue;
        }
        let chars: Vec<char> = word.iter().map(|(c, _)| *c).collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut failed = false;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, &vocab.continuation_prefix);
                }
                if let Some(id) = vocab.id(&piece).filter(|&id| !vocab.is_special(id)) {
                    found = Some((piece, id));
                    break;
                }
                end -= 1;
            }
            match found {
                Some((piece, id)) => {
                    // Several normalized chars may share one original index.
                    let offset = word[start].1..word[end - 1].1 + 1;
                    pieces.push((piece, id, offset));
                    start = end;
                }
                None => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            seq.push(UNK.to_string(), vocab.specials.unk, whole);
        } else {
            // Lowercasing that expands one char into several can leave two
            // pieces on the same original char; merge their offsets.
            let mut last_end = whole.start;
            for (piece, id, mut offset) in pieces {
                if offset.start < last_end {
                    offset.start = last_end;
                }
                if offset.end <= offset.start {
                    offset.end = offset.start + 1;
                }
                last_end = offset.end;
                seq.push(piece, id, offset);
            }
        }
    }
    seq
}

/// Encoded `[CLS] source [SEP] auxiliary` sequence, optionally followed by
/// padding positions that attention ignores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub source_mask: Vec<bool>,
    /// False only on padding positions.
    pub attention_mask: Vec<bool>,
    pub source_token_count: usize,
    pub auxiliary_token_count: usize,
}

impl ModelInput {
    /// Total length including padding.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unpadded length `m + n + 2`.
    pub fn content_len(&self) -> usize {
        self.source_token_count + self.auxiliary_token_count + 2
    }

    /// Positions holding source tokens.
    pub fn source_positions(&self) -> Range<usize> {
        1..1 + self.source_token_count
    }

    /// Extends the sequence with `[PAD]` up to `len` positions.
    pub fn pad_to(&self, len: usize, pad_id: usize) -> ModelInput {
        let mut out = self.clone();
        for pos in self.len()..len {
            out.ids.push(pad_id);
            out.segment_ids.push(0);
            out.position_ids.push(pos);
            out.source_mask.push(false);
            out.attention_mask.push(false);
        }
        out
    }
}

/// Packs source and auxiliary tokens into `[CLS] s_1..s_m [SEP] a_1..a_n`.
///
/// When the pair exceeds `max_len`, auxiliary tokens are dropped from the tail
/// first and then source tokens from the tail.
pub fn encode_pair(
    source: &TokenSequence,
    auxiliary: &TokenSequence,
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<ModelInput> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be at least 3, got {max_len}")));
    }
    let mut m = source.len();
    let mut n = auxiliary.len();
    let mut excess = (m + n + 2).saturating_sub(max_len);
    let cut = excess.min(n);
    n -= cut;
    excess -= cut;
    m = m.saturating_sub(excess);
    if m == 0 {
        return Err(Error::EmptySource { max_len });
    }

    let p = m + n + 2;
    let specials = vocab.specials();
    let mut ids = Vec::with_capacity(p);
    ids.push(specials.cls);
    ids.extend_from_slice(&source.ids[..m]);
    ids.push(specials.sep);
    ids.extend_from_slice(&auxiliary.ids[..n]);

    let mut segment_ids = vec![0; m + 2];
    segment_ids.resize(p, 1);
    let source_mask = (0..p).map(|t| (1..=m).contains(&t)).collect();

    Ok(ModelInput {
        ids,
        segment_ids,
        position_ids: (0..p).collect(),
        source_mask,
        attention_mask: vec![true; p],
        source_token_count: m,
        auxiliary_token_count: n,
    })
}

/// Minimal token range `(first, last)` (inclusive) whose offsets cover `char_range`.
pub fn align_char_span(char_range: Range<usize>, seq: &TokenSequence) -> Result<(usize, usize)> {
    let mut hits = seq
        .offsets
        .iter()
        .enumerate()
        .filter(|(_, o)| o.start < char_range.end && char_range.start < o.end)
        .map(|(i, _)| i);
    let first = hits.next().ok_or(Error::Unaligned {
        start: char_range.start,
        end: char_range.end,
    })?;
    let last = hits.last().unwrap_or(first);
    Ok((first, last))
}

/// Slices `text` by a character range.
pub fn char_slice(text: &str, range: Range<usize>) -> &str {
    let mut indices = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let start = indices.nth(range.start).unwrap_or(text.len());
    let end = if range.end > range.start {
        indices.nth(range.end - range.start - 1).unwrap_or(text.len())
    } else {
        start
    };
    &text[start..end]
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}
