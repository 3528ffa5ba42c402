//! Model variants and architecture hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DaliError, Result};

/// World-model conditioning variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No context input; trained across randomised contexts.
    DreamerDr,
    /// Inferred context fed to the posterior only.
    DaliS,
    /// Inferred context fed to the sequence model, heads, actor and critic.
    DaliD,
    /// Ground-truth context fed to the posterior only.
    CrssmS,
    /// Ground-truth context fed to the sequence model, heads, actor and critic.
    CrssmD,
}

/// Where a variant's context vector comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextSource {
    None,
    Inferred,
    GroundTruth,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::DreamerDr, Variant::DaliS, Variant::DaliD, Variant::CrssmS, Variant::CrssmD];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DreamerDr => "dreamer_dr",
            Variant::DaliS => "dali_s",
            Variant::DaliD => "dali_d",
            Variant::CrssmS => "crssm_s",
            Variant::CrssmD => "crssm_d",
        }
    }

    pub fn source(self) -> ContextSource {
        match self {
            Variant::DreamerDr => ContextSource::None,
            Variant::DaliS | Variant::DaliD => ContextSource::Inferred,
            Variant::CrssmS | Variant::CrssmD => ContextSource::GroundTruth,
        }
    }

    /// Context enters the posterior only.
    pub fn shallow(self) -> bool {
        matches!(self, Variant::DaliS | Variant::CrssmS)
    }

    /// Context enters the recurrence, heads, actor and critic.
    pub fn deep(self) -> bool {
        matches!(self, Variant::DaliD | Variant::CrssmD)
    }

    pub fn uses_encoder(self) -> bool {
        self.source() == ContextSource::Inferred
    }

    pub fn uses_ground_truth(self) -> bool {
        self.source() == ContextSource::GroundTruth
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = DaliError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| DaliError::UnknownVariant(s.to_string()))
    }
}

/// Sequence pooling inside the context encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Final,
    Mean,
}

impl FromStr for Pooling {
    type Err = DaliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Pooling::Final),
            "mean" => Ok(Pooling::Mean),
            other => Err(DaliError::Invalid(format!("unknown pooling `{other}`"))),
        }
    }
}

/// Dimension of the inferred context embedding.
pub const EMBED_DIM: usize = 8;

/// Architecture hyperparameters shared by every component of an agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Ground-truth context dimension (used by the cRSSM variants).
    pub ctx_dim: usize,
    /// Encoder width (dense, attention and MLP layers).
    pub enc_width: usize,
    /// Forward-model hidden width.
    pub fwd_hidden: usize,
    /// Context history length `K`; windows hold `K + 1` observations.
    pub window: usize,
    pub pos_encoding: bool,
    pub pooling: Pooling,
    /// Recurrent state size.
    pub deter: usize,
    /// Number of categorical latents and classes per latent.
    pub stoch_groups: usize,
    pub stoch_classes: usize,
    /// Hidden width of the posterior, prior and head networks.
    pub hidden: usize,
    pub unimix: f64,
    pub free_bits: f64,
    pub kl_balance: f64,
    pub learned_init: bool,
    pub actor_hidden: usize,
    pub critic_hidden: usize,
    pub min_std: f64,
    pub max_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs_dim: 4,
            act_dim: 1,
            ctx_dim: 2,
            enc_width: 256,
            fwd_hidden: 128,
            window: 32,
            pos_encoding: true,
            pooling: Pooling::Final,
            deter: 128,
            stoch_groups: 4,
            stoch_classes: 8,
            hidden: 128,
            unimix: 0.01,
            free_bits: 1.0,
            kl_balance: 0.8,
            learned_init: false,
            actor_hidden: 128,
            critic_hidden: 128,
            min_std: 0.1,
            max_std: 1.0,
        }
    }
}

impl ModelConfig {
    /// Narrow widths for single-core experiments; latent and embedding sizes unchanged.
    pub fn desk() -> Self {
        Self {
            enc_width: 32,
            fwd_hidden: 64,
            deter: 64,
            hidden: 64,
            actor_hidden: 64,
            critic_hidden: 64,
            ..Self::default()
        }
    }

    pub fn stoch(&self) -> usize {
        self.stoch_groups * self.stoch_classes
    }

    /// Width of the context vector a variant consumes (0 for none).
    pub fn ctx_width(&self, v: Variant) -> usize {
        match v.source() {
            ContextSource::None => 0,
            ContextSource::Inferred => EMBED_DIM,
            ContextSource::GroundTruth => self.ctx_dim,
        }
    }

    /// Rows per encoder window.
    pub fn window_rows(&self) -> usize {
        self.window + 1
    }

    pub fn feat_dim(&self) -> usize {
        self.deter + self.stoch()
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |k: &str, v: usize| {
            if v == 0 {
                Err(DaliError::config(k, "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("model.obs_dim", self.obs_dim)?;
        pos("model.act_dim", self.act_dim)?;
        pos("model.enc_width", self.enc_width)?;
        pos("model.fwd_hidden", self.fwd_hidden)?;
        pos("model.window", self.window)?;
        pos("model.deter", self.deter)?;
        pos("model.stoch_groups", self.stoch_groups)?;
        pos("model.stoch_classes", self.stoch_classes)?;
        pos("model.hidden", self.hidden)?;
        pos("model.actor_hidden", self.actor_hidden)?;
        pos("model.critic_hidden", self.critic_hidden)?;
        if !(0.0..1.0).contains(&self.unimix) {
            return Err(DaliError::config("model.unimix", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.kl_balance) {
            return Err(DaliError::config("model.kl_balance", "must lie in [0, 1]"));
        }
        if self.free_bits < 0.0 {
            return Err(DaliError::config("model.free_bits", "must be >= 0"));
        }
        if !(self.min_std > 0.0 && self.min_std <= self.max_std) {
            return Err(DaliError::config("model.min_std", "need 0 < min_std <= max_std"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_roundtrip_and_wiring_flags() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert!(!(v.shallow() && v.deep()));
        }
        assert!("dali_x".parse::<Variant>().is_err());
        assert!(!Variant::DreamerDr.shallow() && !Variant::DreamerDr.deep());
        assert_eq!(ModelConfig::default().stoch(), 32);
    }
}
