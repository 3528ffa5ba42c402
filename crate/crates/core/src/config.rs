//! Flat `key = value` experiment configuration with dotted keys.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys and
//! unparsable values are rejected with an error naming the key.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::envs::Regime;
use crate::error::{DaliError, Result};
use crate::model::Pooling;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Contexts per regime grid.
    pub contexts: usize,
    /// Episodes per context.
    pub episodes: usize,
    /// Seed of the grid and evaluation episodes.
    pub seed: u64,
    pub regimes: Vec<Regime>,
    pub bootstrap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { contexts: 20, episodes: 5, seed: 0, regimes: Regime::ALL.to_vec(), bootstrap: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), eval: EvalConfig::default(), output_dir: PathBuf::from("runs") }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse::<V>().map_err(|e| DaliError::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(DaliError::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_regimes(key: &str, value: &str) -> Result<Vec<Regime>> {
    let out: Vec<Regime> = value.split(',').map(|s| parse::<Regime>(key, s.trim())).collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(DaliError::config(key, "needs at least one regime"));
    }
    Ok(out)
}

fn pooling_str(p: Pooling) -> &'static str {
    match p {
        Pooling::Final => "final",
        Pooling::Mean => "mean",
    }
}

impl ExperimentConfig {
    /// Every key in canonical order with its current value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let m = &t.model;
        let e = &self.eval;
        vec![
            ("env", t.env.to_string()),
            ("variant", t.variant.to_string()),
            ("mode", t.mode.to_string()),
            ("lambda_cross", t.lambda_cross.to_string()),
            ("seed", t.seed.to_string()),
            ("seed_episodes", t.seed_episodes.to_string()),
            ("collect_interval", t.collect_interval.to_string()),
            ("batch", t.batch.to_string()),
            ("seq_len", t.seq_len.to_string()),
            ("horizon", t.horizon.to_string()),
            ("gamma", t.gamma.to_string()),
            ("lambda", t.lambda.to_string()),
            ("entropy", t.entropy.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_ctx", t.lr_ctx.to_string()),
            ("clip", t.clip.to_string()),
            ("episode_len", t.episode_len.to_string()),
            ("sigma", t.sigma.to_string()),
            ("total_steps", t.total_steps.to_string()),
            ("imagine_starts", t.imagine_starts.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("replay_capacity", t.replay_capacity.to_string()),
            ("model.enc_width", m.enc_width.to_string()),
            ("model.fwd_hidden", m.fwd_hidden.to_string()),
            ("model.window", m.window.to_string()),
            ("model.pos_encoding", m.pos_encoding.to_string()),
            ("model.pooling", pooling_str(m.pooling).to_string()),
            ("model.deter", m.deter.to_string()),
            ("model.stoch_groups", m.stoch_groups.to_string()),
            ("model.stoch_classes", m.stoch_classes.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("model.unimix", m.unimix.to_string()),
            ("model.free_bits", m.free_bits.to_string()),
            ("model.kl_balance", m.kl_balance.to_string()),
            ("model.learned_init", m.learned_init.to_string()),
            ("model.actor_hidden", m.actor_hidden.to_string()),
            ("model.critic_hidden", m.critic_hidden.to_string()),
            ("model.min_std", m.min_std.to_string()),
            ("model.max_std", m.max_std.to_string()),
            ("eval.contexts", e.contexts.to_string()),
            ("eval.episodes", e.episodes.to_string()),
            ("eval.seed", e.seed.to_string()),
            ("eval.regimes", e.regimes.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(",")),
            ("eval.bootstrap", e.bootstrap.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        let m = &mut t.model;
        let e = &mut self.eval;
        match key {
            "env" => t.env = parse(key, value)?,
            "variant" => t.variant = parse(key, value)?,
            "mode" => t.mode = parse(key, value)?,
            "lambda_cross" => t.lambda_cross = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "seed_episodes" => t.seed_episodes = parse(key, value)?,
            "collect_interval" => t.collect_interval = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "seq_len" => t.seq_len = parse(key, value)?,
            "horizon" => t.horizon = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "entropy" => t.entropy = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "lr_ctx" => t.lr_ctx = parse(key, value)?,
            "clip" => t.clip = parse(key, value)?,
            "episode_len" => t.episode_len = parse(key, value)?,
            "sigma" => t.sigma = parse(key, value)?,
            "total_steps" => t.total_steps = parse(key, value)?,
            "imagine_starts" => t.imagine_starts = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "replay_capacity" => t.replay_capacity = parse(key, value)?,
            "model.enc_width" => m.enc_width = parse(key, value)?,
            "model.fwd_hidden" => m.fwd_hidden = parse(key, value)?,
            "model.window" => m.window = parse(key, value)?,
            "model.pos_encoding" => m.pos_encoding = parse_bool(key, value)?,
            "model.pooling" => m.pooling = parse(key, value)?,
            "model.deter" => m.deter = parse(key, value)?,
            "model.stoch_groups" => m.stoch_groups = parse(key, value)?,
            "model.stoch_classes" => m.stoch_classes = parse(key, value)?,
            "model.hidden" => m.hidden = parse(key, value)?,
            "model.unimix" => m.unimix = parse(key, value)?,
            "model.free_bits" => m.free_bits = parse(key, value)?,
            "model.kl_balance" => m.kl_balance = parse(key, value)?,
            "model.learned_init" => m.learned_init = parse_bool(key, value)?,
            "model.actor_hidden" => m.actor_hidden = parse(key, value)?,
            "model.critic_hidden" => m.critic_hidden = parse(key, value)?,
            "model.min_std" => m.min_std = parse(key, value)?,
            "model.max_std" => m.max_std = parse(key, value)?,
            "eval.contexts" => e.contexts = parse(key, value)?,
            "eval.episodes" => e.episodes = parse(key, value)?,
            "eval.seed" => e.seed = parse(key, value)?,
            "eval.regimes" => e.regimes = parse_regimes(key, value)?,
            "eval.bootstrap" => e.bootstrap = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(DaliError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key=value` override strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| DaliError::config(o, "override must be key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DaliError::config(format!("line {}", n + 1), "expected `key = value`"))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.contexts == 0 {
            return Err(DaliError::config("eval.contexts", "must be positive"));
        }
        if self.eval.episodes == 0 {
            return Err(DaliError::config("eval.episodes", "must be positive"));
        }
        if self.eval.bootstrap == 0 {
            return Err(DaliError::config("eval.bootstrap", "must be positive"));
        }
        Ok(())
    }
}
