//! Byte-level tokenizer with three reserved specials.

use super::ModelError;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const SEP: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Raw bytes as token ids. No specials are added.
pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|b| u32::from(*b)).collect()
}

/// `<bos> text <eos>`.
pub fn tokenize_caption(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    out.extend(text.bytes().map(u32::from));
    out.push(EOS);
    out
}

/// Bytes of `tokens` with specials stripped.
pub fn detokenize_bytes(tokens: &[u32]) -> Result<Vec<u8>, ModelError> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            0..=255 => out.push(t as u8),
            BOS | EOS | SEP => {}
            _ => return Err(ModelError::InvalidTokenId(t)),
        }
    }
    Ok(out)
}

/// Lossy UTF-8 decode of [`detokenize_bytes`].
pub fn detokenize(tokens: &[u32]) -> Result<String, ModelError> {
    Ok(String::from_utf8_lossy(&detokenize_bytes(tokens)?).into_owned())
}
