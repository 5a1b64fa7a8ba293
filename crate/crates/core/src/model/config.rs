use serde::{Deserialize, Serialize};

use crate::error::{Result, VtiError};
use crate::perturb::CHANNELS;

/// Architecture of the toy vision-language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_layers: usize,
    pub enc_width: usize,
    pub enc_heads: usize,
    pub dec_layers: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    /// Maximum decoder sequence, vision prefix included.
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            enc_layers: 4,
            enc_width: 32,
            enc_heads: 4,
            dec_layers: 4,
            dec_width: 64,
            dec_heads: 4,
            mlp_ratio: 4,
            vocab_size: crate::vocab::VOCAB_SIZE,
            max_seq: 128,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            enc_layers: 2,
            enc_width: 8,
            enc_heads: 2,
            dec_layers: 2,
            dec_width: 8,
            dec_heads: 2,
            mlp_ratio: 2,
            vocab_size: 16,
            max_seq: 16,
        }
    }

    /// Number of vision tokens `T`.
    pub fn vision_tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Flattened patch length.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    /// Longest text sequence that fits after the vision prefix.
    pub fn max_text_len(&self) -> usize {
        self.max_seq.saturating_sub(self.vision_tokens())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(VtiError::config(format!("model.{field}"), msg));
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("enc_layers", self.enc_layers),
            ("enc_width", self.enc_width),
            ("enc_heads", self.enc_heads),
            ("dec_layers", self.dec_layers),
            ("dec_width", self.dec_width),
            ("dec_heads", self.dec_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(name, "must be positive".into());
            }
        }
        if self.image_size % self.patch_size != 0 {
            return bad(
                "patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            );
        }
        if self.enc_width % self.enc_heads != 0 {
            return bad("enc_heads", format!("{} does not divide enc_width {}", self.enc_heads, self.enc_width));
        }
        if self.dec_width % self.dec_heads != 0 {
            return bad("dec_heads", format!("{} does not divide dec_width {}", self.dec_heads, self.dec_width));
        }
        if self.max_seq <= self.vision_tokens() {
            return bad(
                "max_seq",
                format!("{} leaves no room after {} vision tokens", self.max_seq, self.vision_tokens()),
            );
        }
        Ok(())
    }

    /// Integers written into the checkpoint config block, in order.
    pub(crate) fn to_words(self) -> [usize; 11] {
        [
            self.image_size,
            self.patch_size,
            self.enc_layers,
            self.enc_width,
            self.enc_heads,
            self.dec_layers,
            self.dec_width,
            self.dec_heads,
            self.mlp_ratio,
            self.vocab_size,
            self.max_seq,
        ]
    }

    pub(crate) fn from_words(w: [usize; 11]) -> Self {
        ModelConfig {
            image_size: w[0],
            patch_size: w[1],
            enc_layers: w[2],
            enc_width: w[3],
            enc_heads: w[4],
            dec_layers: w[5],
            dec_width: w[6],
            dec_heads: w[7],
            mlp_ratio: w[8],
            vocab_size: w[9],
            max_seq: w[10],
        }
    }
}
