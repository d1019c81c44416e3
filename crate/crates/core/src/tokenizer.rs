//! Byte-level BPE compatible with published GPT-2 `vocab.json` / `merges.txt`
//! files, plus alignment of tokens to whitespace-delimited words.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

/// The pre-tokenisation pattern published with GPT-2.
pub const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// GPT-2's reversible map from bytes to printable characters.
///
/// Printable Latin-1 bytes map to themselves; the other 68 bytes are shifted to
/// code points from U+0100 upward, in byte order.
pub fn bytes_to_unicode() -> [char; 256] {
    let keep = |b: u32| {
        (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b)
    };
    let mut table = ['\0'; 256];
    let mut shifted = 0;
    for b in 0..256u32 {
        table[b as usize] = if keep(b) {
            char::from_u32(b).expect("Latin-1 code point")
        } else {
            shifted += 1;
            char::from_u32(255 + shifted).expect("Latin Extended code point")
        };
    }
    table
}

/// A corpus word and the tokens that make it up.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordSpan {
    /// 0-based position among the text's words.
    pub index: usize,
    /// Byte offsets into the encoded text.
    pub bytes: Range<usize>,
    /// Positions in the token sequence.
    pub tokens: Range<usize>,
}

/// Word-to-token alignment.
///
/// A word is a maximal run of non-whitespace characters. Each token belongs to
/// the word holding its first non-whitespace byte; whitespace-only tokens join
/// the following word, or the last word when nothing follows. The spans are
/// therefore contiguous and cover every token, unless the text has no words.
pub type Alignment = Vec<WordSpan>;

#[derive(Debug)]
pub struct BpeVocab {
    encoder: HashMap<String, u32>,
    decoder: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
}

impl BpeVocab {
    pub fn load(vocab_file: impl AsRef<Path>, merges_file: impl AsRef<Path>) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Self::from_strs(&read(vocab_file.as_ref())?, &read(merges_file.as_ref())?)
    }

    /// Loads `vocab.json` and `merges.txt` from one directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::load(dir.join("vocab.json"), dir.join("merges.txt"))
    }

    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let encoder: HashMap<String, u32> = serde_json::from_str(vocab_json)
            .map_err(|e| Error::Vocab(format!("vocab.json: {e}")))?;
        let mut decoder = vec![None; encoder.len()];
        for (tok, &id) in &encoder {
            match decoder.get_mut(id as usize) {
                Some(slot @ None) => *slot = Some(tok.clone()),
                Some(Some(other)) => {
                    return Err(Error::Vocab(format!(
                        "id {id} assigned to both {other:?} and {tok:?}"
                    )))
                }
                None => {
                    return Err(Error::Vocab(format!(
                        "id {id} of {tok:?} is outside 0..{}; ids must be dense",
                        encoder.len()
                    )))
                }
            }
        }
        let decoder: Vec<String> = decoder
            .into_iter()
            .map(|t| t.expect("ids are dense"))
            .collect();

        let byte_encoder = bytes_to_unicode();
        for (b, c) in byte_encoder.iter().enumerate() {
            if !encoder.contains_key(&c.to_string()) {
                return Err(Error::Vocab(format!(
                    "byte {b:#04x} (symbol {c:?}) has no token"
                )));
            }
        }
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();

        let mut ranks = HashMap::new();
        let lines = merges_txt
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.starts_with("#version") && !l.trim().is_empty());
        for (rank, (lineno, line)) in lines.enumerate() {
            let (a, b) = line
                .split_once(' ')
                .filter(|(_, b)| !b.contains(' '))
                .ok_or_else(|| {
                    Error::Vocab(format!(
                        "merges.txt line {}: expected two symbols",
                        lineno + 1
                    ))
                })?;
            for sym in [a.to_string(), b.to_string(), format!("{a}{b}")] {
                if !encoder.contains_key(&sym) {
                    return Err(Error::Vocab(format!(
                        "merges.txt line {}: symbol {sym:?} is not in the vocabulary",
                        lineno + 1
                    )));
                }
            }
            if ranks.insert((a.to_string(), b.to_string()), rank).is_some() {
                return Err(Error::Vocab(format!(
                    "merges.txt line {}: duplicate merge {a:?} {b:?}",
                    lineno + 1
                )));
            }
        }

        let pattern = Regex::new(GPT2_PATTERN).expect("pattern compiles");
        Ok(BpeVocab {
            encoder,
            decoder,
            ranks,
            byte_encoder,
            byte_decoder,
            pattern,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn n_merges(&self) -> usize {
        self.ranks.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.encoder.get(token).copied()
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.decoder.get(id as usize).map(String::as_str)
    }

    /// Applies merges to one pre-split piece, lowest rank first, merging every
    /// occurrence of the chosen pair left to right.
    fn bpe(&self, piece: &[u8]) -> Vec<String> {
        let mut word: Vec<String> = piece
            .iter()
            .map(|&b| self.byte_encoder[b as usize].to_string())
            .collect();
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, w))
                })
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            let Some((a, b)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut k = 0;
            while k < word.len() {
                if k + 1 < word.len() && word[k] == a && word[k + 1] == b {
                    merged.push(format!("{a}{b}"));
                    k += 2;
                } else {
                    merged.push(std::mem::take(&mut word[k]));
                    k += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// Token ids plus the byte range each token covers.
    fn encode_with_offsets(&self, text: &str) -> (Vec<u32>, Vec<Range<usize>>) {
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        for m in self.pattern.find_iter(text) {
            let m = m.expect("GPT-2 pattern cannot hit the backtrack limit");
            let mut at = m.start();
            for sym in self.bpe(m.as_str().as_bytes()) {
                // Every symbol is a product of validated merges, so it has an id.
                ids.push(self.encoder[&sym]);
                let len = sym.chars().count();
                offsets.push(at..at + len);
                at += len;
            }
        }
        (ids, offsets)
    }

    pub fn encode_ids(&self, text: &str) -> Vec<u32> {
        self.encode_with_offsets(text).0
    }

    pub fn encode(&self, text: &str) -> (Vec<u32>, Alignment) {
        let (ids, offsets) = self.encode_with_offsets(text);
        let words = words(text);
        let mut owner = vec![None; text.len()];
        for (w, r) in words.iter().enumerate() {
            owner[r.clone()].iter_mut().for_each(|o| *o = Some(w));
        }
        let mut spans: Vec<WordSpan> = words
            .iter()
            .enumerate()
            .map(|(index, r)| WordSpan {
                index,
                bytes: r.clone(),
                tokens: 0..0,
            })
            .collect();
        if spans.is_empty() {
            return (ids, spans);
        }
        let mut next_word = 0;
        for (t, range) in offsets.iter().enumerate() {
            let w = owner[range.clone()]
                .iter()
                .find_map(|o| *o)
                .unwrap_or_else(|| {
                    // Whitespace-only: the first word starting at or after this token.
                    while next_word < words.len() && words[next_word].start < range.end {
                        next_word += 1;
                    }
                    next_word.min(words.len() - 1)
                });
            let span = &mut spans[w].tokens;
            if span.start == span.end {
                *span = t..t + 1;
            } else {
                span.end = t + 1;
            }
        }
        (ids, spans)
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token_str(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            })?;
            for c in tok.chars() {
                let b = self.byte_decoder.get(&c).ok_or_else(|| {
                    Error::Vocab(format!("token {tok:?} has non-byte symbol {c:?}"))
                })?;
                out.push(*b);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?)
            .map_err(|e| Error::InvalidInput(format!("decoded bytes are not UTF-8: {e}")))
    }
}

/// Byte ranges of maximal non-whitespace runs.
pub fn words(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..text.len());
    }
    out
}
