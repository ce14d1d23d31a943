//! Pluggable tokenization. The default is byte-level (256 byte values plus
//! BOS/EOS specials) so any UTF-8 corpus works without training a vocabulary.

pub const BYTE_BOS: u32 = 256;
pub const BYTE_EOS: u32 = 257;
pub const BYTE_VOCAB_SIZE: usize = 258;

pub trait Tokenizer: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, tokens: &[u32]) -> String;
}

/// One token per UTF-8 byte. Ids 256/257 are reserved specials that
/// `encode` never emits and `decode` skips.
#[derive(Debug, Clone, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        BYTE_VOCAB_SIZE
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    fn decode(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Hash-based word-level tokenizer: each whitespace-separated word maps to
/// a stable id below `vocab_size`. Lossy (decode emits ids), but keeps
/// sequences short, which makes it handy for small fixture models.
#[derive(Debug, Clone)]
pub struct HashWordTokenizer {
    vocab_size: usize,
}

impl HashWordTokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size >= 1);
        HashWordTokenizer { vocab_size }
    }
}

impl Tokenizer for HashWordTokenizer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|word| {
                // FNV-1a
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for b in word.bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
                (h % self.vocab_size as u64) as u32
            })
            .collect()
    }

    fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|t| format!("<{t}>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let tok = ByteTokenizer;
        let text = "Q: Why?\nA: Because.";
        let ids = tok.encode(text);
        assert_eq!(ids.len(), text.len());
        assert!(ids.iter().all(|&t| t < 256));
        assert_eq!(tok.decode(&ids), text);
    }

    #[test]
    fn decode_skips_specials() {
        let tok = ByteTokenizer;
        assert_eq!(tok.decode(&[BYTE_BOS, b'h' as u32, b'i' as u32, BYTE_EOS]), "hi");
    }
}
