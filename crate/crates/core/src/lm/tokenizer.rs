use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const BYTE_TOKENS: u32 = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const SEP: u32 = 258;
pub const PAD: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

/// Byte-level tokenizer: byte `b` is token `b`; the four specials sit at
/// 256..=259 and are never produced by [`Tokenizer::encode`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        text.iter().map(|&b| u32::from(b)).collect()
    }

    /// Decodes byte tokens; specials decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                BOS | EOS | SEP | PAD => {}
                _ => return Err(Error::Vocabulary { id, vocab: VOCAB_SIZE }),
            }
        }
        Ok(out)
    }

    /// Lays out `BOS · prompt · SEP · response · EOS` and returns it with the
    /// index of the first response token (the EOS when the response is empty).
    pub fn format_pair(&self, prompt: &[u8], response: &[u8], max_seq_len: usize) -> Result<(Vec<u32>, usize)> {
        let len = prompt.len() + response.len() + 3;
        if len > max_seq_len {
            return Err(Error::Truncation {
                len,
                limit: max_seq_len,
            });
        }
        let mut ids = Vec::with_capacity(len);
        ids.push(BOS);
        ids.extend(self.encode(prompt));
        ids.push(SEP);
        let start = ids.len();
        ids.extend(self.encode(response));
        ids.push(EOS);
        Ok((ids, start))
    }

    /// `BOS · prompt · SEP`, the conditioning prefix used for generation.
    pub fn format_prompt(&self, prompt: &[u8], max_seq_len: usize) -> Result<Vec<u32>> {
        let len = prompt.len() + 2;
        if len > max_seq_len {
            return Err(Error::Truncation {
                len,
                limit: max_seq_len,
            });
        }
        let mut ids = Vec::with_capacity(len);
        ids.push(BOS);
        ids.extend(self.encode(prompt));
        ids.push(SEP);
        Ok(ids)
    }
}
