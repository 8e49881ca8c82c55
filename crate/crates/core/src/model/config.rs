use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape and initialisation seed of a toy encoder-decoder transformer.
///
/// The architecture is pre-norm with learned positional embeddings, GELU
/// feed-forward blocks and a final layer norm on each stream. The token
/// embedding table is shared between encoder and decoder; the output
/// projection is a separate matrix unless `tie_output` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub tie_output: bool,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Demo-scale configuration used by the pipeline defaults.
    pub fn demo(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 48,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 96,
            max_len: 48,
            seed: 17,
            tie_output: false,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return bad("d_ff and max_len must be positive".into());
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
