//! Byte-pair tokenizer over printable ASCII.
//!
//! Base symbols are the 95 printable ASCII characters; merge rules are learned
//! from a corpus (most-frequent adjacent pair first) and frozen alongside the
//! dataset so every stage tokenizes identically. Merges never cross piece
//! boundaries, where a piece is a space-prefixed alphabetic/digit run or a
//! single other character — so learned tokens look like `" color"`.
//!
//! Specials: PAD=0, BOS=1, SEP=2, EOS=3. Base chars occupy 4..99, merged
//! tokens 99 onward.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
pub const N_SPECIAL: usize = 4;
pub const N_BASE: usize = 95; // 0x20..=0x7E
pub const FIRST_MERGED: u32 = (N_SPECIAL + N_BASE) as u32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenizeError {
    /// Input contains a character outside printable ASCII.
    UnsupportedChar { byte_offset: usize },
    /// Decode saw an id outside the vocabulary.
    InvalidId { id: u32 },
    /// Merge table references an id that does not exist yet.
    BadMergeTable { rank: usize },
}

impl core::fmt::Display for TokenizeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TokenizeError::UnsupportedChar { byte_offset } => {
                write!(f, "unsupported character at byte {}", byte_offset)
            }
            TokenizeError::InvalidId { id } => write!(f, "unknown token id {}", id),
            TokenizeError::BadMergeTable { rank } => {
                write!(f, "merge rule {} references an unknown id", rank)
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TokenizeError {}

/// Token ids paired with each token's (start, end) byte span in the input.
pub type EncodedSpans = (Vec<u32>, Vec<(usize, usize)>);

#[derive(Clone, Debug)]
pub struct MiniTokenizer {
    merges: Vec<(u32, u32)>,
    merge_rank: BTreeMap<(u32, u32), u32>,
    token_text: Vec<String>,
}

fn is_base(b: u8) -> bool {
    (0x20..=0x7e).contains(&b)
}

fn base_id(b: u8) -> u32 {
    N_SPECIAL as u32 + (b - 0x20) as u32
}

/// Byte ranges of the pretokenizer pieces covering `s` exactly.
fn piece_ranges(s: &str) -> Vec<(usize, usize)> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let start = i;
        let lead_space = b[i] == b' ';
        let j = if lead_space { i + 1 } else { i };
        if j < b.len() && b[j].is_ascii_alphabetic() {
            let mut k = j;
            while k < b.len() && b[k].is_ascii_alphabetic() {
                k += 1;
            }
            i = k;
        } else if j < b.len() && b[j].is_ascii_digit() {
            let mut k = j;
            while k < b.len() && b[k].is_ascii_digit() {
                k += 1;
            }
            i = k;
        } else {
            i = start + 1;
        }
        out.push((start, i));
    }
    out
}

impl MiniTokenizer {
    /// Tokenizer with no merges: every base character is its own token.
    pub fn char_level() -> Self {
        MiniTokenizer::from_merges(Vec::new()).unwrap()
    }

    /// Rebuild from an ordered merge table (the frozen form on disk).
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self, TokenizeError> {
        let mut token_text: Vec<String> = Vec::with_capacity(N_SPECIAL + N_BASE + merges.len());
        for _ in 0..N_SPECIAL {
            token_text.push(String::new());
        }
        for b in 0x20u8..=0x7e {
            token_text.push(String::from_utf8(alloc::vec![b]).unwrap());
        }
        let mut merge_rank = BTreeMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let limit = (N_SPECIAL + N_BASE + rank) as u32;
            let valid = |id: u32| id >= N_SPECIAL as u32 && id < limit;
            if !valid(a) || !valid(b) {
                return Err(TokenizeError::BadMergeTable { rank });
            }
            let joined = alloc::format!("{}{}", token_text[a as usize], token_text[b as usize]);
            token_text.push(joined);
            merge_rank.insert((a, b), rank as u32);
        }
        Ok(MiniTokenizer { merges, merge_rank, token_text })
    }

    /// Learn up to `max_merges` pair merges from the corpus (pairs must occur
    /// at least twice). Ties break on the smaller id pair, so training is
    /// deterministic.
    pub fn train(corpus: &[&str], max_merges: usize) -> Result<Self, TokenizeError> {
        let mut tok = MiniTokenizer::char_level();
        // piece id-sequence → frequency
        let mut pieces: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
        for text in corpus {
            for &(s, e) in &piece_ranges(text) {
                let ids = tok.base_ids(&text[s..e])?;
                *pieces.entry(ids).or_insert(0) += 1;
            }
        }
        for _ in 0..max_merges {
            let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            for (ids, &freq) in &pieces {
                for w in ids.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += freq;
                }
            }
            let Some((&pair, &best)) = counts
                .iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)))
            else {
                break;
            };
            if best < 2 {
                break;
            }
            let new_id = tok.vocab_size() as u32;
            let joined = alloc::format!(
                "{}{}",
                tok.token_text[pair.0 as usize],
                tok.token_text[pair.1 as usize]
            );
            tok.merge_rank.insert(pair, tok.merges.len() as u32);
            tok.merges.push(pair);
            tok.token_text.push(joined);

            let mut next: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
            for (ids, freq) in pieces {
                let mut out = Vec::with_capacity(ids.len());
                let mut i = 0;
                while i < ids.len() {
                    if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                        out.push(new_id);
                        i += 2;
                    } else {
                        out.push(ids[i]);
                        i += 1;
                    }
                }
                *next.entry(out).or_insert(0) += freq;
            }
            pieces = next;
        }
        Ok(tok)
    }

    fn base_ids(&self, s: &str) -> Result<Vec<u32>, TokenizeError> {
        let mut ids = Vec::with_capacity(s.len());
        for (off, &b) in s.as_bytes().iter().enumerate() {
            if !is_base(b) {
                return Err(TokenizeError::UnsupportedChar { byte_offset: off });
            }
            ids.push(base_id(b));
        }
        Ok(ids)
    }

    fn bpe_piece(&self, ids: &mut Vec<u32>) {
        loop {
            let mut best: Option<(u32, (u32, u32))> = None;
            for w in ids.windows(2) {
                if let Some(&r) = self.merge_rank.get(&(w[0], w[1])) {
                    if best.is_none_or(|(br, _)| r < br) {
                        best = Some((r, (w[0], w[1])));
                    }
                }
            }
            let Some((rank, pair)) = best else { break };
            let new_id = FIRST_MERGED + rank;
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
        }
    }

    pub fn encode(&self, s: &str) -> Result<Vec<u32>, TokenizeError> {
        Ok(self.encode_with_spans(s)?.0)
    }

    /// Encode and report each token's byte span in the input.
    pub fn encode_with_spans(&self, s: &str) -> Result<EncodedSpans, TokenizeError> {
        // Validate up front so piece splitting can assume pure ASCII.
        if let Some(off) = s.bytes().position(|b| !is_base(b)) {
            return Err(TokenizeError::UnsupportedChar { byte_offset: off });
        }
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        for &(start, end) in &piece_ranges(s) {
            let mut piece = self.base_ids(&s[start..end])?;
            self.bpe_piece(&mut piece);
            let mut off = start;
            for &id in &piece {
                let len = self.token_text[id as usize].len();
                spans.push((off, off + len));
                off += len;
            }
            debug_assert_eq!(off, end);
            ids.extend(piece);
        }
        Ok((ids, spans))
    }

    /// Concatenate token surfaces. Special ids render as nothing; unknown ids
    /// are an error.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizeError> {
        let mut out = String::new();
        for &id in ids {
            if id as usize >= self.token_text.len() {
                return Err(TokenizeError::InvalidId { id });
            }
            out.push_str(&self.token_text[id as usize]);
        }
        Ok(out)
    }

    pub fn vocab_size(&self) -> usize {
        self.token_text.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_text(&self, id: u32) -> Option<&str> {
        self.token_text.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_special(id: u32) -> bool {
        id < N_SPECIAL as u32
    }

    /// Stable byte form used for hashing/persisting the merge table.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = alloc::vec![b'M', b'B', b'P', b'E', b'1'];
        out.extend_from_slice(&(self.merges.len() as u32).to_le_bytes());
        for &(a, b) in &self.merges {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }
}
