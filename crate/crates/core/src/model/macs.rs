//! Attention MAC accounting.
//!
//! Convention shared by the closed forms below and by the instrumented
//! forward passes: one MAC per query–key product term (`n_q · n_k · C`
//! for one attention call over all heads). Projections and feed-forward
//! layers are not counted in any mode. Attention-weighted sums are tallied
//! separately in [`MacCounters::weighted`] and are not part of
//! [`count_macs`].

use std::fmt;

use super::ModelConfig;

/// Block of the model an attention call belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Stage1,
    Stage2,
    Decoder,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttnKind {
    SelfAttn,
    Cross,
}

/// Where an attention call is charged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Site {
    pub region: Region,
    pub kind: AttnKind,
}

impl Site {
    pub fn self_attn(region: Region) -> Self {
        Self {
            region,
            kind: AttnKind::SelfAttn,
        }
    }

    pub fn cross(region: Region) -> Self {
        Self {
            region,
            kind: AttnKind::Cross,
        }
    }
}

const REGIONS: usize = 4;

fn slot(site: Site) -> (usize, usize) {
    let r = match site.region {
        Region::Stage1 => 0,
        Region::Stage2 => 1,
        Region::Decoder => 2,
        Region::Other => 3,
    };
    let k = match site.kind {
        AttnKind::SelfAttn => 0,
        AttnKind::Cross => 1,
    };
    (r, k)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacCounters {
    scores: [[u64; 2]; REGIONS],
    weighted: [[u64; 2]; REGIONS],
    /// Multiplies spent projecting a graduating frame onto the cached
    /// stage-1 queries.
    pub assembly_mults: u64,
    /// Additions spent forming stage-1 scores from the cached halves.
    pub assembly_adds: u64,
}

impl MacCounters {
    pub fn record_scores(&mut self, site: Site, macs: u64) {
        let (r, k) = slot(site);
        self.scores[r][k] += macs;
    }

    pub fn record_weighted(&mut self, site: Site, macs: u64) {
        let (r, k) = slot(site);
        self.weighted[r][k] += macs;
    }

    pub fn scores_at(&self, site: Site) -> u64 {
        let (r, k) = slot(site);
        self.scores[r][k]
    }

    pub fn scores(&self, region: Region) -> u64 {
        self.scores_at(Site::self_attn(region)) + self.scores_at(Site::cross(region))
    }

    pub fn weighted(&self, region: Region) -> u64 {
        let (r, _) = slot(Site::self_attn(region));
        self.weighted[r][0] + self.weighted[r][1]
    }

    /// Score MACs of the long-memory encoder (both compression stages).
    pub fn encoder_scores(&self) -> u64 {
        self.scores(Region::Stage1) + self.scores(Region::Stage2)
    }

    pub fn total_scores(&self) -> u64 {
        self.scores.iter().flatten().sum()
    }

    pub fn total_weighted(&self) -> u64 {
        self.weighted.iter().flatten().sum()
    }

    /// Multiplies that produce stage-1 cross-attention scores: the full
    /// query–key products on the reference path, or the cache update on
    /// the streaming path.
    pub fn stage1_weight_mults(&self) -> u64 {
        self.scores_at(Site::cross(Region::Stage1)) + self.assembly_mults
    }

    pub fn merge(&mut self, other: &MacCounters) {
        for r in 0..REGIONS {
            for k in 0..2 {
                self.scores[r][k] += other.scores[r][k];
                self.weighted[r][k] += other.weighted[r][k];
            }
        }
        self.assembly_mults += other.assembly_mults;
        self.assembly_adds += other.assembly_adds;
    }
}

/// Encoder variants compared by [`count_macs`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MacMode {
    /// `(1 + l_enc)` self-attention layers over the long memory.
    NaiveEncoder,
    /// `(1 + l_enc)` decoder units with `n1` latent tokens, each reading the
    /// whole long memory.
    StackedDecoder,
    TwoStage,
    /// Two-stage with cached stage-1 scores.
    StreamingAmortized,
}

impl MacMode {
    pub const ALL: [MacMode; 4] = [
        MacMode::NaiveEncoder,
        MacMode::StackedDecoder,
        MacMode::TwoStage,
        MacMode::StreamingAmortized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MacMode::NaiveEncoder => "naive_encoder",
            MacMode::StackedDecoder => "stacked_decoder",
            MacMode::TwoStage => "two_stage",
            MacMode::StreamingAmortized => "streaming_amortized",
        }
    }
}

impl fmt::Display for MacMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Closed-form encoder score MACs for one step.
pub fn count_macs(config: &ModelConfig, mode: MacMode) -> u64 {
    let c = config.feature_dim as u64;
    let ml = config.long_len as u64;
    let n0 = config.stage1_tokens as u64;
    let n1 = config.stage2_tokens as u64;
    let l_enc = config.encoder_layers as u64;
    let stage2 = (n1 * n1 + n1 * n0) * l_enc * c;
    // An empty long memory skips stage 1 entirely (null-memory path).
    let stage1 = |weights: u64| if ml == 0 { 0 } else { n0 * n0 * c + weights };
    match mode {
        MacMode::NaiveEncoder => ml * ml * (1 + l_enc) * c,
        MacMode::StackedDecoder => (n1 * n1 + n1 * ml) * (1 + l_enc) * c,
        MacMode::TwoStage => stage1(n0 * ml * c) + stage2,
        MacMode::StreamingAmortized => stage1(n0 * (ml + c)) + stage2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 1024,
            long_len: 2048,
            ..ModelConfig::default_for(1024, 20)
        }
    }

    #[test]
    fn two_stage_closed_form() {
        let c = default_config();
        let expected: u64 = 16 * 16 * 1024 + 16 * 2048 * 1024 + (32 * 32 + 32 * 16) * 2 * 1024;
        assert_eq!(expected, 36_962_304);
        assert_eq!(count_macs(&c, MacMode::TwoStage), expected);
    }

    #[test]
    fn ordering_and_ratio() {
        let c = default_config();
        let naive = count_macs(&c, MacMode::NaiveEncoder);
        let stacked = count_macs(&c, MacMode::StackedDecoder);
        let two = count_macs(&c, MacMode::TwoStage);
        let amortized = count_macs(&c, MacMode::StreamingAmortized);
        assert!(naive > stacked && stacked > two && two > amortized);
        let ratio = naive as f64 / two as f64;
        assert!((ratio - 348.6).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn empty_long_memory_leaves_stage_two() {
        let c = ModelConfig {
            long_len: 0,
            ..default_config()
        };
        let stage2 = (32 * 32 + 32 * 16) * 2 * 1024;
        assert_eq!(count_macs(&c, MacMode::TwoStage), stage2);
        assert_eq!(count_macs(&c, MacMode::StreamingAmortized), stage2);
        assert_eq!(count_macs(&c, MacMode::NaiveEncoder), 0);
    }
}
