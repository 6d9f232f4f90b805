//! Bag-of-words feature-hashing embedder. Needs no model and is stable across
//! runs, which makes it the default embedder for offline runs.

use async_trait::async_trait;

use super::{estimate_tokens, BackendError, EmbedBackend, EmbedReply, TokenUsage};

pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(token.to_lowercase().as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dimension as u64) as usize] += sign;
        }
        // Texts made only of punctuation still need a nonzero direction.
        if v.iter().all(|x| *x == 0.0) {
            v[(fnv1a(text.as_bytes()) % self.dimension as u64) as usize] = 1.0;
        }
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[async_trait]
impl EmbedBackend for HashingEmbedder {
    async fn embed(&self, text: &str) -> Result<EmbedReply, BackendError> {
        Ok(EmbedReply {
            vector: self.vector(text),
            usage: Some(TokenUsage {
                prompt_tokens: estimate_tokens(text),
                completion_tokens: 0,
            }),
        })
    }

    fn model(&self) -> &str {
        "hashing"
    }
}
