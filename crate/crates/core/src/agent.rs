//! A complete agent: world model, optional context encoder, actor and critic,
//! plus the online filter used while interacting with an environment.

use rand::Rng;

use crate::behavior::{Actor, Critic};
use crate::checkpoint::Checkpoint;
use crate::context_encoder::{episode_window_rows, ContextModule};
use crate::envs::{ContextSpace, EnvId};
use crate::error::{DaliError, Result};
use crate::model::{ModelConfig, Variant};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::world_model::{Latent, WorldModel};

#[derive(Debug)]
pub struct Agent<T> {
    pub env: EnvId,
    pub variant: Variant,
    pub cfg: ModelConfig,
    pub space: ContextSpace,
    pub wm: WorldModel<T>,
    pub context: Option<ContextModule<T>>,
    pub actor: Actor<T>,
    pub critic: Critic<T>,
}

impl<T: Scalar> Clone for Agent<T> {
    fn clone(&self) -> Self {
        Self {
            env: self.env,
            variant: self.variant,
            cfg: self.cfg.clone(),
            space: self.space.clone(),
            wm: self.wm.clone(),
            context: self.context.clone(),
            actor: self.actor.clone(),
            critic: self.critic.clone(),
        }
    }
}

/// Parameter hashes of each update partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionHashes {
    pub world_model: String,
    pub context: String,
    pub actor: String,
    pub critic: String,
}

impl<T: Scalar> Agent<T> {
    /// Builds an agent; observation, action and context sizes come from `env`.
    pub fn new<R: Rng>(env: EnvId, variant: Variant, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let space = env.space();
        let mut cfg = cfg.clone();
        cfg.obs_dim = env.obs_dim();
        cfg.act_dim = env.act_dim();
        cfg.ctx_dim = space.dim();
        cfg.validate()?;
        let wm = WorldModel::new(&cfg, variant, rng);
        let context = variant.uses_encoder().then(|| ContextModule::new(&cfg, rng));
        let actor = Actor::new(&cfg, variant, rng);
        let critic = Critic::new(&cfg, variant, rng);
        Ok(Self { env, variant, cfg, space, wm, context, actor, critic })
    }

    /// Normalised ground-truth context row for the cRSSM variants.
    pub fn ground_truth(&self, values: &[f64]) -> Matrix<T> {
        Matrix::row_f64(&self.space.normalize(values))
    }

    pub fn encoder(&self) -> Result<&ContextModule<T>> {
        self.context.as_ref().ok_or_else(|| DaliError::Wiring(format!("{} has no context encoder", self.variant)))
    }

    pub fn hashes(&self) -> PartitionHashes {
        PartitionHashes {
            world_model: self.wm.params.hash(),
            context: self.context.as_ref().map_or_else(String::new, |c| c.params.hash()),
            actor: self.actor.params.hash(),
            critic: self.critic.params.hash(),
        }
    }

    pub fn save_params(&self, ck: &mut Checkpoint) {
        ck.put_params("wm", &self.wm.params);
        if let Some(c) = &self.context {
            ck.put_params("ctx", &c.params);
        }
        ck.put_params("actor", &self.actor.params);
        ck.put_params("critic", &self.critic.params);
    }

    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_params("wm", &mut self.wm.params)?;
        if let Some(c) = &mut self.context {
            ck.load_params("ctx", &mut c.params)?;
        }
        ck.load_params("actor", &mut self.actor.params)?;
        ck.load_params("critic", &mut self.critic.params)
    }

    /// Starts filtering a fresh episode in the given ground-truth context.
    pub fn filter(&self, context_values: &[f64]) -> Filter<T> {
        Filter {
            latent: self.wm.initial_latent(1),
            prev_action: Matrix::zeros(1, self.cfg.act_dim),
            obs: Vec::new(),
            act: Vec::new(),
            ctx: None,
            truth: self.variant.uses_ground_truth().then(|| self.ground_truth(context_values)),
            t: 0,
        }
    }
}

/// How actions are chosen while interacting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    /// Uniform in `[-1, 1]`; no model evaluation at all.
    Random,
    /// Stochastic actor with sampled posterior latents.
    Sample,
    /// Distribution mean with posterior mode latents.
    Greedy,
}

/// Per-episode online inference state.
#[derive(Clone, Debug)]
pub struct Filter<T> {
    pub latent: Latent<T>,
    pub prev_action: Matrix<T>,
    /// Flat observation and action history of the episode so far.
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    /// Context consumed at the latest step (inferred or ground truth).
    pub ctx: Option<Matrix<T>>,
    truth: Option<Matrix<T>>,
    pub t: usize,
}

impl<T: Scalar> Filter<T> {
    /// Consumes observation `o_t` and returns the action `a_t`.
    pub fn step<R: Rng>(&mut self, agent: &Agent<T>, obs: &[f64], mode: ActMode, rng: &mut R) -> Result<Vec<f64>> {
        let d_a = agent.cfg.act_dim;
        self.obs.extend_from_slice(obs);
        let action = if mode == ActMode::Random {
            (0..d_a).map(|_| rng.gen_range(-1.0..=1.0)).collect::<Vec<f64>>()
        } else {
            self.infer(agent, mode, rng)?;
            let feat = self.latent.features();
            let deep = agent.variant.deep().then(|| self.ctx.as_ref().expect("deep context"));
            agent.actor.act(&feat, deep, mode == ActMode::Greedy, rng)?.to_f64()
        };
        self.act.extend_from_slice(&action);
        self.prev_action = Matrix::row_f64(&action);
        self.t += 1;
        Ok(action)
    }

    /// Updates the context and posterior latent for the newest observation.
    fn infer<R: Rng>(&mut self, agent: &Agent<T>, mode: ActMode, rng: &mut R) -> Result<()> {
        let cfg = &agent.cfg;
        self.ctx = match (&agent.context, &self.truth) {
            (Some(enc), _) => {
                let mut rows = Vec::with_capacity(cfg.window_rows() * enc.token_dim());
                episode_window_rows(&self.obs, &self.act, cfg.obs_dim, cfg.act_dim, self.t, cfg.window, &mut rows);
                Some(enc.encode_rows(Matrix::from_vec(cfg.window_rows(), enc.token_dim(), rows), 1))
            }
            (None, Some(c)) => Some(c.clone()),
            (None, None) => None,
        };
        let o = Matrix::row_f64(&self.obs[self.t * cfg.obs_dim..]);
        self.latent = if mode == ActMode::Greedy {
            agent.wm.observe_step::<R>(&self.latent, &self.prev_action, &o, self.ctx.as_ref(), None)?
        } else {
            agent.wm.observe_step(&self.latent, &self.prev_action, &o, self.ctx.as_ref(), Some(rng))?
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_env;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            enc_width: 16,
            fwd_hidden: 16,
            window: 4,
            deter: 16,
            hidden: 16,
            actor_hidden: 16,
            critic_hidden: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn filter_runs_every_variant() {
        for v in Variant::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let agent = Agent::<f64>::new(EnvId::Swing, v, &small(), &mut rng).unwrap();
            let c = agent.space.default_context();
            let mut env = make_env(EnvId::Swing, &c, 0).unwrap();
            let mut f = agent.filter(&c.values);
            let mut o = env.reset();
            for _ in 0..6 {
                let a = f.step(&agent, &o, ActMode::Sample, &mut rng).unwrap();
                assert!(a.iter().all(|x| x.abs() <= 1.0));
                o = env.step(&a).unwrap().obs;
            }
            assert_eq!(f.ctx.is_some(), v != Variant::DreamerDr);
            let calls = agent.context.as_ref().map_or(0, |c| c.encode_calls());
            assert_eq!(calls, if v.uses_encoder() { 6 } else { 0 });
        }
    }
}
