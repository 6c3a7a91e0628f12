//! Byte-level tokenizer: one token per input byte plus three specials.
//!
//! Ids 0..=255 are the raw byte values; the specials sit directly above so
//! any vocabulary of at least 259 entries works. Truncation drops payload
//! bytes from the tail while keeping BOS and EOS, which preserves the task
//! prefix at the head of the text.

use crate::error::{Error, Result};

pub const PAD_ID: usize = 256;
pub const BOS_ID: usize = 257;
pub const EOS_ID: usize = 258;

/// Bytes plus PAD, BOS, EOS.
pub const MIN_VOCAB: usize = 259;

/// Tokenized text before padding: `length` counts real tokens and equals
/// `ids.len()` here; batching appends PAD ids after position `length - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub length: usize,
}

/// Tokenize UTF-8 text into `[BOS, bytes.., EOS]`, truncated to
/// `max_seq_len` by dropping tail bytes (never BOS or EOS). A degenerate
/// budget of 1 yields just `[BOS]`.
pub fn tokenize(text: &str, max_seq_len: usize) -> TokenSequence {
    let bytes = text.as_bytes();
    if max_seq_len < 2 {
        return TokenSequence {
            ids: vec![BOS_ID],
            length: 1,
        };
    }
    let keep = bytes.len().min(max_seq_len - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(BOS_ID);
    ids.extend(bytes[..keep].iter().map(|&b| b as usize));
    ids.push(EOS_ID);
    let length = ids.len();
    TokenSequence { ids, length }
}

/// A right-padded batch of token sequences laid out as one `[n, max_len]`
/// id matrix.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub n: usize,
    pub max_len: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty token batch".into()));
        }
        let max_len = seqs.iter().map(|s| s.length).max().unwrap();
        let n = seqs.len();
        let mut ids = vec![PAD_ID; n * max_len];
        let mut lengths = Vec::with_capacity(n);
        for (i, s) in seqs.iter().enumerate() {
            ids[i * max_len..i * max_len + s.length].copy_from_slice(&s.ids);
            lengths.push(s.length);
        }
        Ok(Self {
            ids,
            lengths,
            n,
            max_len,
        })
    }
}
