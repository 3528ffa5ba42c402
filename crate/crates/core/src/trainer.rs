//! Training loop: seeding, world-model, context and behavior phases, and
//! environment interaction with online context inference.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, Agent};
use crate::autodiff::Graph;
use crate::behavior::{behavior_update, BehaviorConfig, BehaviorLosses};
use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::context_encoder::{check_lambda, episode_window_rows};
use crate::envs::{sample_contexts, Context, Env, EnvConfig, EnvId, VariationMode};
use crate::error::{DaliError, Result};
use crate::model::{ModelConfig, Variant};
use crate::nn::Adam;
use crate::replay::{Episode, ReplayBuffer, ReplayHeader, ReplayWriter, SeqRef};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::world_model::{ElboTerms, Latent, Step};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvId,
    pub variant: Variant,
    pub mode: VariationMode,
    pub lambda_cross: f64,
    pub seed: u64,
    /// Random episodes collected before learning starts.
    pub seed_episodes: usize,
    /// Update steps per collected episode.
    pub collect_interval: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy: f64,
    pub lr: f64,
    pub lr_ctx: f64,
    pub clip: f64,
    pub episode_len: usize,
    pub sigma: f64,
    pub total_steps: usize,
    /// Posterior states used as imagination starts per update (0 = all `B * L`).
    pub imagine_starts: usize,
    /// Env steps between checkpoints (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    pub replay_capacity: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvId::Swing,
            variant: Variant::DaliS,
            mode: VariationMode::Double,
            lambda_cross: 1.0,
            seed: 0,
            seed_episodes: 5,
            collect_interval: 4,
            batch: 16,
            seq_len: 64,
            horizon: 15,
            gamma: 0.99,
            lambda: 0.95,
            entropy: 3e-4,
            lr: 3e-4,
            lr_ctx: 1e-3,
            clip: 100.0,
            episode_len: 200,
            sigma: 0.01,
            total_steps: 50_000,
            imagine_starts: 256,
            checkpoint_every: 5_000,
            replay_capacity: 1_000_000,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |k: &str, v: usize| if v == 0 { Err(DaliError::config(k, "must be positive")) } else { Ok(()) };
        pos("seed_episodes", self.seed_episodes)?;
        pos("collect_interval", self.collect_interval)?;
        pos("batch", self.batch)?;
        pos("seq_len", self.seq_len)?;
        pos("episode_len", self.episode_len)?;
        pos("total_steps", self.total_steps)?;
        pos("replay_capacity", self.replay_capacity)?;
        check_lambda(self.lambda_cross).map_err(|_| DaliError::config("lambda_cross", "must be 0 or 1"))?;
        for (k, v) in [("lr", self.lr), ("lr_ctx", self.lr_ctx), ("clip", self.clip)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DaliError::config(k, "must be positive and finite"));
            }
        }
        for (k, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DaliError::config(k, "must lie in [0, 1]"));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DaliError::config("sigma", "must be finite and >= 0"));
        }
        if self.entropy < 0.0 {
            return Err(DaliError::config("entropy", "must be >= 0"));
        }
        if self.seq_len > self.episode_len + 1 {
            return Err(DaliError::config("seq_len", "longer than an episode"));
        }
        if let VariationMode::Single(k) = self.mode {
            if k >= self.env.space().dim() {
                return Err(DaliError::config("mode", format!("single_{k} on a {}-dimensional space", self.env.space().dim())));
            }
        }
        self.model.validate()
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig { sigma: self.sigma, horizon: self.episode_len }
    }

    pub fn behavior(&self) -> BehaviorConfig {
        BehaviorConfig { horizon: self.horizon, gamma: self.gamma, lambda: self.lambda, entropy: self.entropy }
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub episode: usize,
    pub env_steps: usize,
    pub updates: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub context: Vec<f64>,
    pub wm_loss: Option<f64>,
    pub recon: Option<f64>,
    pub kl: Option<f64>,
    pub ctx_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub imagined_return: Option<f64>,
}

/// Optimisers for every update partition.
#[derive(Clone, Debug)]
pub struct Optimizers<T> {
    pub wm: Adam<T>,
    pub ctx: Option<Adam<T>>,
    pub actor: Adam<T>,
    pub critic: Adam<T>,
}

impl<T: Scalar> Optimizers<T> {
    pub fn new(agent: &Agent<T>, cfg: &TrainConfig) -> Self {
        Self {
            wm: Adam::new(&agent.wm.params, cfg.lr, cfg.clip),
            ctx: agent.context.as_ref().map(|c| Adam::new(&c.params, cfg.lr_ctx, cfg.clip)),
            actor: Adam::new(&agent.actor.params, cfg.lr, cfg.clip),
            critic: Adam::new(&agent.critic.params, cfg.lr, cfg.clip),
        }
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub cfg: TrainConfig,
    pub agent: Agent<T>,
    pub opt: Optimizers<T>,
    pub rng: ChaCha8Rng,
    pub buffer: ReplayBuffer,
    pub env_steps: usize,
    pub episodes: usize,
    pub updates: usize,
    pub log: Vec<LogRecord>,
}

/// Collects one episode in `context`, appending `T + 1` records.
#[allow(clippy::too_many_arguments)]
pub fn collect_episode<T: Scalar, R: Rng>(
    agent: &Agent<T>,
    context: &Context,
    env_seed: u64,
    env_cfg: EnvConfig,
    mode: ActMode,
    rng: &mut R,
) -> Result<Episode> {
    let mut env = Env::new(agent.env, context, env_seed, env_cfg)?;
    let mut filter = agent.filter(&context.values);
    let mut ep = Episode::new(agent.cfg.obs_dim, agent.cfg.act_dim, context.values.clone());
    let mut obs = env.reset();
    let mut reward = 0.0;
    let mut done = false;
    loop {
        if done {
            ep.push(&obs, &vec![0.0; agent.cfg.act_dim], reward, true);
            return Ok(ep);
        }
        let a = filter.step(agent, &obs, mode, rng)?;
        ep.push(&obs, &a, reward, false);
        let step = env.step(&a)?;
        obs = step.obs;
        reward = step.reward;
        done = step.done;
    }
}

/// Encoder windows for the given `(episode, t)` cells, stacked in order.
pub fn window_rows<T: Scalar>(buffer: &ReplayBuffer, cells: &[(usize, usize)], k: usize) -> Matrix<T> {
    let (d_o, d_a) = (buffer.obs_dim, buffer.act_dim);
    let mut out = Vec::with_capacity(cells.len() * (k + 1) * (d_o + d_a));
    for &(e, t) in cells {
        let ep = buffer.episode(e);
        episode_window_rows(&ep.obs, &ep.act, d_o, d_a, t, k, &mut out);
    }
    Matrix::from_vec(cells.len() * (k + 1), d_o + d_a, out)
}

/// Per-cell context rows consumed by the variant, detached from the encoder.
pub fn context_rows<T: Scalar>(agent: &Agent<T>, buffer: &ReplayBuffer, cells: &[(usize, usize)]) -> Option<Matrix<T>> {
    if let Some(enc) = &agent.context {
        let rows = window_rows::<T>(buffer, cells, agent.cfg.window);
        Some(enc.encode_rows(rows, cells.len()))
    } else if agent.variant.uses_ground_truth() {
        let rows: Vec<Matrix<T>> = cells.iter().map(|&(e, _)| agent.ground_truth(&buffer.episode(e).context)).collect();
        let refs: Vec<&Matrix<T>> = rows.iter().collect();
        Some(Matrix::concat_rows(&refs))
    } else {
        None
    }
}

fn gather<T: Scalar>(buffer: &ReplayBuffer, cells: &[(usize, usize)], f: impl Fn(&Episode, usize) -> Vec<f64>) -> Matrix<T> {
    let rows: Vec<Vec<f64>> = cells.iter().map(|&(e, t)| f(buffer.episode(e), t)).collect();
    let cols = rows.first().map_or(0, |r| r.len());
    Matrix::from_fn(rows.len(), cols, |r, c| T::of(rows[r][c]))
}

/// Builds the time-major step batch for sequences `refs` of length `len`.
pub fn build_steps<T: Scalar>(agent: &Agent<T>, buffer: &ReplayBuffer, refs: &[SeqRef], len: usize) -> Vec<Step<T>> {
    let b = refs.len();
    let cells: Vec<(usize, usize)> =
        (0..len).flat_map(|i| refs.iter().map(move |r| (r.episode, r.start + i))).collect();
    let ctx = context_rows(agent, buffer, &cells);
    (0..len)
        .map(|i| {
            let c = &cells[i * b..(i + 1) * b];
            Step {
                obs: gather(buffer, c, |ep, t| ep.obs_at(t).to_vec()),
                act: gather(buffer, c, |ep, t| ep.act_at(t).to_vec()),
                reward: gather(buffer, c, |ep, t| vec![ep.reward[t]]),
                cont: gather(buffer, c, |ep, t| vec![if ep.done[t] { 0.0 } else { 1.0 }]),
                ctx: ctx.as_ref().map(|m| m.slice_rows(i * b, b)),
            }
        })
        .collect()
}

/// Output of the world-model phase reused as imagination starts.
pub struct WorldModelPhase<T> {
    pub terms: ElboTerms,
    pub states: Latent<T>,
    pub ctx: Option<Matrix<T>>,
}

/// World-model update on a sampled batch; only world-model parameters change.
pub fn world_model_phase<T: Scalar, R: Rng>(
    agent: &mut Agent<T>,
    opt: &mut Adam<T>,
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<WorldModelPhase<T>> {
    let refs = buffer.sample_sequences(cfg.batch, cfg.seq_len, rng)?;
    let steps = build_steps(agent, buffer, &refs, cfg.seq_len);
    let mut g = Graph::new();
    let p = agent.wm.params.bind(&mut g, true);
    let out = agent.wm.observe_sequence(&mut g, &p, &steps, rng)?;
    let grads = p.grads(&g.backward(out.loss), &agent.wm.params);
    drop(g);
    if grads.iter().any(|m| !m.is_finite()) {
        return Err(DaliError::NonFinite("world-model gradients".into()));
    }
    opt.apply(&mut agent.wm.params, &grads);
    let ctx = if agent.variant.deep() {
        let parts: Vec<&Matrix<T>> = steps.iter().map(|s| s.ctx.as_ref().expect("deep context")).collect();
        Some(Matrix::concat_rows(&parts))
    } else {
        None
    };
    Ok(WorldModelPhase { terms: out.terms, states: out.states, ctx })
}

/// Context-encoder update. Returns the optimised loss, or `None` for
/// variants without an encoder.
pub fn context_phase<T: Scalar, R: Rng>(
    agent: &mut Agent<T>,
    opt: Option<&mut Adam<T>>,
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<f64>> {
    let (Some(enc), Some(opt)) = (agent.context.as_ref(), opt) else { return Ok(None) };
    let k = agent.cfg.window;
    let d_a = buffer.act_dim;
    let mut g = Graph::new();
    let p = enc.params.bind(&mut g, true);
    let loss = if cfg.lambda_cross == 0.0 {
        // K forward-dynamics terms per sampled chunk
        let refs = buffer.sample_sequences(cfg.batch, k + 1, rng)?;
        let cells: Vec<(usize, usize)> = refs.iter().flat_map(|r| (0..k).map(move |i| (r.episode, r.start + i))).collect();
        let tokens = g.constant(window_rows(buffer, &cells, k));
        let embed = enc.encode(&mut g, &p, tokens, cells.len());
        let o = g.constant(gather(buffer, &cells, |ep, t| ep.obs_at(t).to_vec()));
        let a = g.constant(gather(buffer, &cells, |ep, t| ep.act_at(t).to_vec()));
        let next = g.constant(gather(buffer, &cells, |ep, t| ep.obs_at(t + 1).to_vec()));
        let fd = enc.loss_fd(&mut g, &p, o, a, embed, next);
        enc.loss_total(&mut g, fd, None, 0.0)?
    } else {
        let refs = buffer.sample_transitions(cfg.batch, rng)?;
        let b = refs.len();
        // Inner unroll over τ = t − K .. t from a zero state; h, z and the
        // recurrent context are detached, so it runs without a tape.
        let mut latent = Latent::zeros(b, &agent.cfg);
        let mut prev_a = Matrix::<T>::zeros(b, d_a);
        for i in 0..=k {
            let taus: Vec<isize> = refs.iter().map(|r| r.start as isize - k as isize + i as isize).collect();
            if taus.iter().all(|&t| t < 0) {
                continue;
            }
            let cells: Vec<(usize, usize)> = refs.iter().zip(&taus).map(|(r, &t)| (r.episode, t.max(0) as usize)).collect();
            let ctx = context_rows(agent, buffer, &cells);
            let obs = gather(buffer, &cells, |ep, t| ep.obs_at(t).to_vec());
            let mut next = agent.wm.observe_step(&latent, &prev_a, &obs, ctx.as_ref(), Some(&mut *rng))?;
            let mut act = gather::<T>(buffer, &cells, |ep, t| ep.act_at(t).to_vec());
            for (row, &t) in taus.iter().enumerate() {
                if t < 0 {
                    next.h.row_mut(row).fill(T::zero());
                    next.z.row_mut(row).fill(T::zero());
                    act.row_mut(row).fill(T::zero());
                }
            }
            latent = next;
            prev_a = act;
        }
        let cells: Vec<(usize, usize)> = refs.iter().map(|r| (r.episode, r.start)).collect();
        let tokens = g.constant(window_rows(buffer, &cells, k));
        let embed = enc.encode(&mut g, &p, tokens, b);
        let o = g.constant(gather(buffer, &cells, |ep, t| ep.obs_at(t).to_vec()));
        let a = g.constant(gather(buffer, &cells, |ep, t| ep.act_at(t).to_vec()));
        let next = g.constant(gather(buffer, &cells, |ep, t| ep.obs_at(t + 1).to_vec()));
        let fd = enc.loss_fd(&mut g, &p, o, a, embed, next);
        let z = g.constant(latent.z);
        let cross = enc.loss_cross(&mut g, &p, embed, z);
        enc.loss_total(&mut g, fd, Some(cross), cfg.lambda_cross)?
    };
    let value = g.value(loss).item().f64();
    if !value.is_finite() {
        return Err(DaliError::NonFinite("context loss".into()));
    }
    let grads = p.grads(&g.backward(loss), &enc.params);
    drop(g);
    if grads.iter().any(|m| !m.is_finite()) {
        return Err(DaliError::NonFinite("context gradients".into()));
    }
    let enc = agent.context.as_mut().expect("encoder present");
    opt.apply(&mut enc.params, &grads);
    Ok(Some(value))
}

/// Actor-critic update from a subset of world-model posterior states.
pub fn behavior_phase<T: Scalar, R: Rng>(
    agent: &mut Agent<T>,
    opt: &mut Optimizers<T>,
    wm_out: &WorldModelPhase<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<BehaviorLosses> {
    let n = wm_out.states.rows();
    let take = if cfg.imagine_starts == 0 { n } else { cfg.imagine_starts.min(n) };
    let mut idx = sample_indices(rng, n, take).into_vec();
    idx.sort_unstable();
    let pick = |m: &Matrix<T>| Matrix::from_fn(idx.len(), m.cols(), |r, c| m.get(idx[r], c));
    let start = Latent { h: pick(&wm_out.states.h), z: pick(&wm_out.states.z) };
    let ctx = wm_out.ctx.as_ref().map(pick);
    let Agent { wm, actor, critic, .. } = agent;
    behavior_update(wm, actor, &mut opt.actor, critic, &mut opt.critic, &start, ctx.as_ref(), &cfg.behavior(), rng)
}

#[derive(Clone, Copy, Debug, Default)]
struct PhaseSums {
    wm: f64,
    recon: f64,
    kl: f64,
    ctx: f64,
    actor: f64,
    critic: f64,
    imagined: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let agent = Agent::new(cfg.env, cfg.variant, &cfg.model, &mut rng)?;
        let opt = Optimizers::new(&agent, cfg);
        let space = cfg.env.space();
        let buffer = ReplayBuffer::new(cfg.env.obs_dim(), cfg.env.act_dim(), space.dim(), cfg.replay_capacity);
        Ok(Self { cfg: cfg.clone(), agent, opt, rng, buffer, env_steps: 0, episodes: 0, updates: 0, log: Vec::new() })
    }

    fn next_context(&mut self) -> Result<(Context, u64)> {
        let seed: u64 = self.rng.gen();
        let env_seed: u64 = self.rng.gen();
        let c = sample_contexts(&self.cfg.env.space(), self.cfg.mode, 1, seed)?.remove(0);
        Ok((c, env_seed))
    }

    /// Collects one episode with the given mode and records it.
    pub fn collect(&mut self, mode: ActMode) -> Result<Episode> {
        let (c, env_seed) = self.next_context()?;
        let ep = collect_episode(&self.agent, &c, env_seed, self.cfg.env_config(), mode, &mut self.rng)?;
        self.env_steps += ep.len() - 1;
        self.episodes += 1;
        self.buffer.add(ep.clone())?;
        Ok(ep)
    }

    /// Random seeding episodes; one log record each.
    pub fn seed_buffer(&mut self) -> Result<Vec<Episode>> {
        let mut out = Vec::new();
        while self.episodes < self.cfg.seed_episodes {
            let ep = self.collect(ActMode::Random)?;
            self.log.push(self.record(&ep, None, 0));
            out.push(ep);
        }
        Ok(out)
    }

    /// One update step: world model, then context encoder, then behavior.
    pub fn update(&mut self) -> Result<(ElboTerms, Option<f64>, BehaviorLosses)> {
        let wm_out = world_model_phase(&mut self.agent, &mut self.opt.wm, &self.buffer, &self.cfg, &mut self.rng)?;
        let ctx = context_phase(&mut self.agent, self.opt.ctx.as_mut(), &self.buffer, &self.cfg, &mut self.rng)?;
        let beh = behavior_phase(&mut self.agent, &mut self.opt, &wm_out, &self.cfg, &mut self.rng)?;
        self.updates += 1;
        Ok((wm_out.terms, ctx, beh))
    }

    /// `C` update steps followed by one actor-driven episode.
    pub fn train_iteration(&mut self) -> Result<Episode> {
        let need = self.cfg.batch.max(1) * self.cfg.seq_len;
        if self.buffer.num_steps() < need.min(self.cfg.seq_len) {
            return Err(DaliError::Invalid("replay buffer too small for a batch".into()));
        }
        let mut sums = PhaseSums::default();
        for _ in 0..self.cfg.collect_interval {
            let (wm, ctx, beh) = self.update()?;
            sums.wm += wm.total;
            sums.recon += wm.recon;
            sums.kl += wm.kl;
            sums.ctx += ctx.unwrap_or(0.0);
            sums.actor += beh.actor;
            sums.critic += beh.critic;
            sums.imagined += beh.mean_return;
        }
        let ep = self.collect(ActMode::Sample)?;
        let rec = self.record(&ep, Some(sums), self.cfg.collect_interval);
        self.log.push(rec);
        Ok(ep)
    }

    fn record(&self, ep: &Episode, sums: Option<PhaseSums>, n: usize) -> LogRecord {
        let mean = |v: f64| v / n.max(1) as f64;
        let has_ctx = self.agent.context.is_some();
        LogRecord {
            episode: self.episodes,
            env_steps: self.env_steps,
            updates: self.updates,
            episode_return: ep.total_reward(),
            context: ep.context.clone(),
            wm_loss: sums.map(|s| mean(s.wm)),
            recon: sums.map(|s| mean(s.recon)),
            kl: sums.map(|s| mean(s.kl)),
            ctx_loss: sums.filter(|_| has_ctx).map(|s| mean(s.ctx)),
            actor_loss: sums.map(|s| mean(s.actor)),
            critic_loss: sums.map(|s| mean(s.critic)),
            imagined_return: sums.map(|s| mean(s.imagined)),
        }
    }

    pub fn finished(&self) -> bool {
        self.env_steps >= self.cfg.total_steps
    }

    /// Serialises the full training state (parameters, optimisers, rng, counters).
    pub fn checkpoint(&self) -> Checkpoint {
        let rng = serde_json::json!({
            "seed": hex::encode(self.rng.get_seed()),
            "stream": self.rng.get_stream().to_string(),
            "word_pos": self.rng.get_word_pos().to_string(),
        });
        let meta = serde_json::json!({
            "kind": "dali-train-state",
            "dtype": T::DTYPE,
            "variant": self.cfg.variant,
            "env": self.cfg.env,
            "config": self.cfg,
            "config_hash": self.cfg.hash(),
            "env_steps": self.env_steps,
            "episodes": self.episodes,
            "updates": self.updates,
            "replay_episodes": self.buffer.num_episodes(),
            "log_records": self.log.len(),
            "rng": rng,
        });
        let mut ck = Checkpoint::new(meta);
        self.agent.save_params(&mut ck);
        ck.put_adam("opt/wm", &self.opt.wm);
        if let Some(o) = &self.opt.ctx {
            ck.put_adam("opt/ctx", o);
        }
        ck.put_adam("opt/actor", &self.opt.actor);
        ck.put_adam("opt/critic", &self.opt.critic);
        ck
    }

    /// Restores a state saved by [`TrainState::checkpoint`]; the replay
    /// episodes and log records are supplied by the caller.
    pub fn restore(ck: &Checkpoint, episodes: Vec<Episode>, log: Vec<LogRecord>) -> Result<Self> {
        let meta = &ck.meta;
        if meta["kind"] != "dali-train-state" {
            return Err(DaliError::Format("checkpoint does not hold a training state".into()));
        }
        if meta["dtype"] != T::DTYPE {
            return Err(DaliError::Format(format!("checkpoint dtype {} does not match {}", meta["dtype"], T::DTYPE)));
        }
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        let mut st = Self::new(&cfg)?;
        st.agent.load_params(ck)?;
        ck.load_adam("opt/wm", &mut st.opt.wm)?;
        if let Some(o) = &mut st.opt.ctx {
            ck.load_adam("opt/ctx", o)?;
        }
        ck.load_adam("opt/actor", &mut st.opt.actor)?;
        ck.load_adam("opt/critic", &mut st.opt.critic)?;
        let field = |k: &str| meta[k].as_u64().map(|v| v as usize).ok_or_else(|| DaliError::Format(format!("missing `{k}`")));
        st.env_steps = field("env_steps")?;
        st.episodes = field("episodes")?;
        st.updates = field("updates")?;
        // the file holds every episode ever collected; the buffer re-applies eviction
        let want = st.episodes;
        let nlog = field("log_records")?;
        if episodes.len() < want || log.len() < nlog {
            return Err(DaliError::Format("replay or log shorter than the checkpoint expects".into()));
        }
        for ep in episodes.into_iter().take(want) {
            st.buffer.add(ep)?;
        }
        st.log = log.into_iter().take(nlog).collect();
        let r = &meta["rng"];
        let parse_err = || DaliError::Format("bad rng state".into());
        let seed: [u8; 32] = hex::decode(r["seed"].as_str().ok_or_else(parse_err)?)
            .map_err(|_| parse_err())?
            .try_into()
            .map_err(|_| parse_err())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r["stream"].as_str().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?);
        rng.set_word_pos(r["word_pos"].as_str().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?);
        st.rng = rng;
        Ok(st)
    }
}

/// Rebuilds the trained agent and its configuration from a training checkpoint.
pub fn load_agent<T: Scalar>(ck: &Checkpoint) -> Result<(Agent<T>, TrainConfig)> {
    if ck.meta["kind"] != "dali-train-state" {
        return Err(DaliError::Format("checkpoint does not hold a training state".into()));
    }
    let cfg: TrainConfig = serde_json::from_value(ck.meta["config"].clone())?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut agent = Agent::new(cfg.env, cfg.variant, &cfg.model, &mut rng)?;
    agent.load_params(ck)?;
    Ok((agent, cfg))
}

/// Output file locations of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("log.jsonl")
    }
    pub fn replay(&self) -> PathBuf {
        self.dir.join("replay.bin")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
    pub fn checkpoint_at(&self, steps: usize) -> PathBuf {
        self.dir.join(format!("step_{steps:08}.ckpt"))
    }
    pub fn crash(&self) -> PathBuf {
        self.dir.join("crash.ckpt")
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome<T: Scalar> {
    pub state: TrainState<T>,
    pub log_hash: String,
}

/// Deterministic hash of a training log.
pub fn log_hash(log: &[LogRecord]) -> String {
    let mut bytes = Vec::new();
    for r in log {
        bytes.extend(serde_json::to_vec(r).expect("log record serialises"));
        bytes.push(b'\n');
    }
    sha256_hex(&bytes)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

struct Sinks {
    paths: RunPaths,
    log: File,
    replay: ReplayWriter,
}

impl Sinks {
    fn write<T: Scalar>(&mut self, st: &TrainState<T>, from_log: usize, eps: &[Episode]) -> Result<()> {
        for r in &st.log[from_log..] {
            serde_json::to_writer(&mut self.log, r)?;
            self.log.write_all(b"\n")?;
        }
        self.log.flush()?;
        for ep in eps {
            self.replay.append(ep)?;
        }
        Ok(())
    }
}

/// Drives a state until the step budget, writing outputs when `paths` is set.
/// `stop_after` halts early (after that many env steps) for resume tests.
pub fn drive<T: Scalar>(mut st: TrainState<T>, paths: Option<RunPaths>, stop_after: Option<usize>) -> Result<RunOutcome<T>> {
    let mut sinks = match paths {
        Some(p) => {
            fs::create_dir_all(&p.dir)?;
            let fresh = st.episodes == 0;
            let replay = if fresh {
                let space = st.cfg.env.space();
                ReplayWriter::create(&p.replay(), ReplayHeader::new(st.cfg.env.obs_dim(), st.cfg.env.act_dim(), space.dim()))?
            } else {
                ReplayWriter::reopen(&p.replay(), st.episodes)?
            };
            if !fresh {
                // drop any log lines written after the checkpoint
                let mut text = String::new();
                for r in &st.log {
                    text.push_str(&serde_json::to_string(r)?);
                    text.push('\n');
                }
                fs::write(p.log(), text)?;
            }
            let log = OpenOptions::new().create(true).append(true).open(p.log())?;
            Some(Sinks { paths: p, log, replay })
        }
        None => None,
    };
    let seeded = st.seed_buffer()?;
    if let Some(s) = &mut sinks {
        s.write(&st, st.log.len() - seeded.len(), &seeded)?;
    }
    let every = st.cfg.checkpoint_every;
    while !st.finished() {
        if stop_after.is_some_and(|n| st.env_steps >= n) {
            break;
        }
        let before = st.env_steps;
        let res = st.train_iteration();
        let ep = match res {
            Ok(ep) => ep,
            Err(e) => {
                if let Some(s) = &sinks {
                    st.checkpoint().save(&s.paths.crash())?;
                }
                return Err(e);
            }
        };
        if let Some(s) = &mut sinks {
            s.write(&st, st.log.len() - 1, std::slice::from_ref(&ep))?;
            if every > 0 && st.env_steps / every > before / every {
                st.checkpoint().save(&s.paths.checkpoint_at(st.env_steps))?;
            }
        }
        log::debug!("episode {} steps {} return {:.3}", st.episodes, st.env_steps, ep.total_reward());
    }
    if let Some(s) = &sinks {
        st.checkpoint().save(&s.paths.final_checkpoint())?;
    }
    let log_hash = log_hash(&st.log);
    Ok(RunOutcome { state: st, log_hash })
}

/// Runs a full experiment from scratch.
pub fn run_experiment<T: Scalar>(cfg: &TrainConfig, paths: Option<RunPaths>) -> Result<RunOutcome<T>> {
    drive(TrainState::new(cfg)?, paths, None)
}

/// Continues a run from `checkpoint` inside `dir` (replay and log are read from there).
pub fn resume_experiment<T: Scalar>(dir: &Path, checkpoint: &Path) -> Result<RunOutcome<T>> {
    let paths = RunPaths::new(dir);
    let ck = Checkpoint::load(checkpoint)?;
    let (_, episodes) = crate::replay::read_replay(&paths.replay())?;
    let log = read_log(&paths.log())?;
    let st = TrainState::restore(&ck, episodes, log)?;
    drive(st, Some(paths), None)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            seed_episodes: 2,
            collect_interval: 1,
            batch: 3,
            seq_len: 6,
            horizon: 3,
            episode_len: 12,
            total_steps: 48,
            imagine_starts: 8,
            checkpoint_every: 12,
            model: ModelConfig {
                enc_width: 8,
                fwd_hidden: 8,
                window: 3,
                deter: 8,
                hidden: 8,
                actor_hidden: 8,
                critic_hidden: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn episodes_have_terminal_record() {
        let cfg = tiny(Variant::DreamerDr);
        let mut st = TrainState::<f64>::new(&cfg).unwrap();
        let ep = st.collect(ActMode::Random).unwrap();
        assert_eq!(ep.len(), cfg.episode_len + 1);
        assert!(ep.done[cfg.episode_len] && !ep.done[..cfg.episode_len].iter().any(|&d| d));
        assert_eq!(ep.reward[0], 0.0);
        assert_eq!(st.env_steps, cfg.episode_len);
    }

    #[test]
    fn every_variant_trains_and_is_deterministic() {
        for v in Variant::ALL {
            for lc in [0.0, 1.0] {
                let cfg = TrainConfig { lambda_cross: lc, ..tiny(v) };
                let a = run_experiment::<f64>(&cfg, None).unwrap();
                let b = run_experiment::<f64>(&cfg, None).unwrap();
                assert_eq!(a.log_hash, b.log_hash, "{v}");
                assert_eq!(a.state.log.len(), 4);
                assert!(a.state.log.iter().skip(2).all(|r| r.wm_loss.is_some()));
                assert_eq!(a.state.log[3].ctx_loss.is_some(), v.uses_encoder());
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = tiny(Variant::DaliD);
        let dir = tempfile::tempdir().unwrap();
        let full = run_experiment::<f32>(&cfg, Some(RunPaths::new(dir.path().join("a")))).unwrap();
        let part_dir = dir.path().join("b");
        drive(TrainState::<f32>::new(&cfg).unwrap(), Some(RunPaths::new(&part_dir)), Some(30)).unwrap();
        let ck = RunPaths::new(&part_dir).checkpoint_at(36);
        assert!(ck.exists());
        let resumed = resume_experiment::<f32>(&part_dir, &ck).unwrap();
        assert_eq!(full.log_hash, resumed.log_hash);
        assert_eq!(full.state.agent.hashes(), resumed.state.agent.hashes());
        let a = fs::read(dir.path().join("a/log.jsonl")).unwrap();
        let b = fs::read(part_dir.join("log.jsonl")).unwrap();
        assert_eq!(a, b);
    }
}
