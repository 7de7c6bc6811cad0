use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    /// Two-stage long-memory encoder followed by the short-term decoder.
    #[default]
    TwoStage,
    /// `n1` latent tokens, every unit cross-attending to the full long memory.
    OneStage,
    /// Self-attention over the concatenated long and short memories.
    EncoderOnly,
    /// Short-term decoder reading the raw long memory.
    DecoderOnly,
    /// Two-stage encoder over both memories, pooled into one prediction for
    /// the newest frame.
    NoDecoder,
}

impl Design {
    pub const ALL: [Design; 5] = [
        Design::TwoStage,
        Design::OneStage,
        Design::EncoderOnly,
        Design::DecoderOnly,
        Design::NoDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Design::TwoStage => "two-stage",
            Design::OneStage => "one-stage",
            Design::EncoderOnly => "encoder-only",
            Design::DecoderOnly => "decoder-only",
            Design::NoDecoder => "no-decoder",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Design::TwoStage => 0,
            Design::OneStage => 1,
            Design::EncoderOnly => 2,
            Design::DecoderOnly => 3,
            Design::NoDecoder => 4,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.code() == code)
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown design `{s}`")))
    }
}

/// Model hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-frame feature width `C`.
    pub feature_dim: usize,
    /// Short-memory length `m_S`.
    pub short_len: usize,
    /// Long-memory length `m_L`.
    pub long_len: usize,
    /// First-stage latent tokens `n0`.
    pub stage1_tokens: usize,
    /// Second-stage latent tokens `n1`.
    pub stage2_tokens: usize,
    /// Second-stage units `l_enc`.
    pub encoder_layers: usize,
    /// Short-term decoder units `l_dec`.
    pub decoder_layers: usize,
    pub heads: usize,
    /// Foreground classes `K`; outputs have `K + 1` columns, column 0 is
    /// background.
    pub classes: usize,
    pub ff_width: usize,
    #[serde(default)]
    pub design: Design,
}

impl ModelConfig {
    /// Default architecture for the given feature width and class count.
    pub fn default_for(feature_dim: usize, classes: usize) -> Self {
        Self {
            feature_dim,
            short_len: 32,
            long_len: 2048,
            stage1_tokens: 16,
            stage2_tokens: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 8,
            classes,
            ff_width: 4 * feature_dim,
            design: Design::TwoStage,
        }
    }

    pub fn outputs(&self) -> usize {
        self.classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "feature_dim {} is not divisible by {} heads",
                self.feature_dim, self.heads
            ));
        }
        if self.short_len == 0 {
            return fail("short_len must be positive".into());
        }
        if self.stage1_tokens == 0 || self.stage2_tokens == 0 {
            return fail("latent token counts must be positive".into());
        }
        if self.classes == 0 {
            return fail("classes must be positive".into());
        }
        if self.ff_width == 0 {
            return fail("ff_width must be positive".into());
        }
        if self.decoder_layers == 0 && self.design != Design::NoDecoder {
            return fail(format!("design {} needs at least one decoder layer", self.design));
        }
        Ok(())
    }
}
