//! Recurrent state-space world model.
//!
//! Latent state is a GRU state `h` and a stochastic state `z` made of
//! `stoch_groups` categoricals with `stoch_classes` classes, flattened. The
//! prior sees only `h`. Shallow variants feed context to the posterior;
//! deep variants feed it to the recurrence input, the decoder, the reward and
//! continue heads.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{DaliError, Result};
use crate::model::{ModelConfig, Variant};
use crate::nn::{Bound, Gru, Linear, Mlp, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Deterministic and stochastic state for a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent<T> {
    pub h: Matrix<T>,
    pub z: Matrix<T>,
}

impl<T: Scalar> Latent<T> {
    pub fn zeros(rows: usize, cfg: &ModelConfig) -> Self {
        Self { h: Matrix::zeros(rows, cfg.deter), z: Matrix::zeros(rows, cfg.stoch()) }
    }

    pub fn rows(&self) -> usize {
        self.h.rows()
    }

    pub fn features(&self) -> Matrix<T> {
        Matrix::concat_cols(&[&self.h, &self.z])
    }
}

/// Input widths of every network, for wiring checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FanIn {
    pub sequence: usize,
    pub posterior: usize,
    pub prior: usize,
    pub decoder: usize,
    pub reward: usize,
    pub cont: usize,
}

/// One time step of a training batch, `B` rows each.
#[derive(Clone, Debug)]
pub struct Step<T> {
    pub obs: Matrix<T>,
    /// Action taken after observing `obs`.
    pub act: Matrix<T>,
    /// Reward received on arrival at `obs`.
    pub reward: Matrix<T>,
    /// `1 − done`.
    pub cont: Matrix<T>,
    /// Context consumed by this variant, if any.
    pub ctx: Option<Matrix<T>>,
}

/// Per-term world-model losses, summed over time and averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboTerms {
    pub recon: f64,
    pub reward: f64,
    pub cont: f64,
    /// Raw KL(q ‖ p) before free bits.
    pub kl: f64,
    /// Balanced, free-bits-clamped KL term actually optimised.
    pub kl_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct WorldModel<T> {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub params: ParamSet<T>,
    pub seq_in: Linear,
    pub gru: Gru,
    pub posterior_net: Mlp,
    pub prior_net: Mlp,
    pub decoder: Mlp,
    pub reward_head: Mlp,
    pub cont_head: Mlp,
    pub h0: Option<ParamId>,
}

/// Output of [`WorldModel::observe_sequence`].
pub struct SequenceOutput<T> {
    pub loss: Var,
    pub terms: ElboTerms,
    /// Posterior states for every (t, b), time-major.
    pub states: Latent<T>,
}

impl<T: Scalar> WorldModel<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, variant: Variant, rng: &mut R) -> Self {
        let mut ps = ParamSet::new();
        let c = cfg.ctx_width(variant);
        let deep = if variant.deep() { c } else { 0 };
        let shallow = if variant.shallow() { c } else { 0 };
        let stoch = cfg.stoch();
        let seq_in = Linear::new(&mut ps, "wm.seq_in", stoch + cfg.act_dim + deep, cfg.deter, true, rng);
        let gru = Gru::new(&mut ps, "wm.gru", cfg.deter, cfg.deter, rng);
        let posterior_net =
            Mlp::new(&mut ps, "wm.posterior", &[cfg.deter + cfg.obs_dim + shallow, cfg.hidden, stoch], 1.0, rng);
        let prior_net = Mlp::new(&mut ps, "wm.prior", &[cfg.deter, cfg.hidden, stoch], 1.0, rng);
        let head_in = cfg.deter + stoch + deep;
        let decoder = Mlp::new(&mut ps, "wm.decoder", &[head_in, cfg.hidden, cfg.obs_dim], 1.0, rng);
        let reward_head = Mlp::new(&mut ps, "wm.reward", &[head_in, cfg.hidden, 1], 0.1, rng);
        let cont_head = Mlp::new(&mut ps, "wm.cont", &[head_in, cfg.hidden, 1], 0.1, rng);
        let h0 = cfg.learned_init.then(|| ps.add("wm.h0", Matrix::zeros(1, cfg.deter)));
        Self { cfg: cfg.clone(), variant, params: ps, seq_in, gru, posterior_net, prior_net, decoder, reward_head, cont_head, h0 }
    }

    pub fn fan_in(&self) -> FanIn {
        FanIn {
            sequence: self.seq_in.fan_in,
            posterior: self.posterior_net.fan_in(),
            prior: self.prior_net.fan_in(),
            decoder: self.decoder.fan_in(),
            reward: self.reward_head.fan_in(),
            cont: self.cont_head.fan_in(),
        }
    }

    pub fn head_param_count(&self) -> usize {
        self.decoder.param_count() + self.reward_head.param_count() + self.cont_head.param_count()
    }

    fn check_ctx(&self, wants: bool, ctx: Option<Var>, g: &Graph<T>, what: &str) -> Result<()> {
        match (wants, ctx) {
            (true, None) => Err(DaliError::Wiring(format!("{} requires a context for the {what}", self.variant))),
            (false, Some(_)) => Err(DaliError::Wiring(format!("{} takes no context in the {what}", self.variant))),
            (true, Some(c)) => {
                let w = self.cfg.ctx_width(self.variant);
                if g.shape(c).1 != w {
                    Err(DaliError::Shape(format!("{what} context has {} columns, expected {w}", g.shape(c).1)))
                } else {
                    Ok(())
                }
            }
            (false, None) => Ok(()),
        }
    }

    /// Initial recurrent state for `rows` sequences.
    pub fn initial_h(&self, g: &mut Graph<T>, p: &Bound, rows: usize) -> Var {
        match self.h0 {
            Some(id) => {
                let h = g.tanh(p.var(id));
                g.broadcast_rows(h, rows)
            }
            None => g.constant(Matrix::zeros(rows, self.cfg.deter)),
        }
    }

    /// `h_t = f(h_{t−1}, z_{t−1}, a_{t−1}[, ctx])`.
    pub fn sequence_step(&self, g: &mut Graph<T>, p: &Bound, h: Var, z: Var, a: Var, ctx: Option<Var>) -> Result<Var> {
        self.check_ctx(self.variant.deep(), ctx, g, "sequence model")?;
        let x = match ctx {
            Some(c) => g.concat_cols(&[z, a, c]),
            None => g.concat_cols(&[z, a]),
        };
        let x = self.seq_in.forward(g, p, x);
        let x = g.silu(x);
        Ok(self.gru.forward(g, p, x, h))
    }

    /// Posterior logits `q(z_t | h_t, o_t[, ctx])`.
    pub fn posterior(&self, g: &mut Graph<T>, p: &Bound, h: Var, o: Var, ctx: Option<Var>) -> Result<Var> {
        self.check_ctx(self.variant.shallow(), ctx, g, "posterior")?;
        let x = match ctx {
            Some(c) => g.concat_cols(&[h, o, c]),
            None => g.concat_cols(&[h, o]),
        };
        Ok(self.posterior_net.forward(g, p, x))
    }

    /// Prior logits `p(ẑ_t | h_t)`.
    pub fn prior(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Var {
        self.prior_net.forward(g, p, h)
    }

    /// Decoder mean, reward mean and continue logit.
    pub fn heads(&self, g: &mut Graph<T>, p: &Bound, h: Var, z: Var, ctx: Option<Var>) -> Result<(Var, Var, Var)> {
        self.check_ctx(self.variant.deep(), ctx, g, "heads")?;
        let x = match ctx {
            Some(c) => g.concat_cols(&[h, z, c]),
            None => g.concat_cols(&[h, z]),
        };
        let o = self.decoder.forward(g, p, x);
        let r = self.reward_head.forward(g, p, x);
        let n = self.cont_head.forward(g, p, x);
        Ok((o, r, n))
    }

    pub fn reward_and_cont(&self, g: &mut Graph<T>, p: &Bound, h: Var, z: Var, ctx: Option<Var>) -> Result<(Var, Var)> {
        self.check_ctx(self.variant.deep(), ctx, g, "heads")?;
        let x = match ctx {
            Some(c) => g.concat_cols(&[h, z, c]),
            None => g.concat_cols(&[h, z]),
        };
        Ok((self.reward_head.forward(g, p, x), self.cont_head.forward(g, p, x)))
    }

    /// Class probabilities with uniform mixing, and their logarithms.
    pub fn dist(&self, g: &mut Graph<T>, logits: Var) -> (Var, Var) {
        let c = self.cfg.stoch_classes;
        let u = T::of(self.cfg.unimix);
        let probs = g.group_softmax(logits, c);
        let probs = if self.cfg.unimix > 0.0 {
            let s = g.scale(probs, T::one() - u);
            g.add_scalar(s, u / T::of(c as f64))
        } else {
            probs
        };
        let logp = g.log(probs);
        (probs, logp)
    }

    /// One-hot sample per categorical block with straight-through gradients.
    pub fn sample<R: Rng>(&self, g: &mut Graph<T>, probs: Var, rng: &mut R) -> Var {
        let hard = sample_one_hot(g.value(probs), self.cfg.stoch_classes, rng);
        g.straight_through(probs, hard)
    }

    /// One-hot of the most likely class per block, no gradient.
    pub fn mode(&self, g: &mut Graph<T>, probs: Var) -> Var {
        let hard = argmax_one_hot(g.value(probs), self.cfg.stoch_classes);
        g.constant(hard)
    }

    /// Unrolls the posterior over a batch of sequences and builds the loss.
    pub fn observe_sequence<R: Rng>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        steps: &[Step<T>],
        rng: &mut R,
    ) -> Result<SequenceOutput<T>> {
        let b = steps.first().map(|s| s.obs.rows()).ok_or_else(|| DaliError::Invalid("empty sequence batch".into()))?;
        let cfg = &self.cfg;
        let mut h = self.initial_h(g, p, b);
        let mut z = g.constant(Matrix::zeros(b, cfg.stoch()));
        let mut a_prev = g.constant(Matrix::zeros(b, cfg.act_dim));
        let mut parts = Vec::with_capacity(steps.len());
        let mut terms = ElboTerms::default();
        let mut hs = Vec::with_capacity(steps.len());
        let mut zs = Vec::with_capacity(steps.len());
        for st in steps {
            let ctx = st.ctx.as_ref().map(|c| g.constant(c.clone()));
            let deep_ctx = if self.variant.deep() { ctx } else { None };
            let shallow_ctx = if self.variant.shallow() { ctx } else { None };
            h = self.sequence_step(g, p, h, z, a_prev, deep_ctx)?;
            let o = g.constant(st.obs.clone());
            let post = self.posterior(g, p, h, o, shallow_ctx)?;
            let prior = self.prior(g, p, h);
            let (q, logq) = self.dist(g, post);
            let (_, logp) = self.dist(g, prior);
            z = self.sample(g, q, rng);
            let (o_hat, r_hat, n_logit) = self.heads(g, p, h, z, deep_ctx)?;
            let r = g.constant(st.reward.clone());
            let n = g.constant(st.cont.clone());
            let (loss_t, t_terms) = self.step_loss(g, o_hat, o, r_hat, r, n_logit, n, q, logq, logp);
            terms.recon += t_terms.recon;
            terms.reward += t_terms.reward;
            terms.cont += t_terms.cont;
            terms.kl += t_terms.kl;
            terms.kl_loss += t_terms.kl_loss;
            parts.push(loss_t);
            hs.push(g.value_owned(h));
            zs.push(g.value_owned(z));
            a_prev = g.constant(st.act.clone());
        }
        let cat = g.concat_cols(&parts);
        let total = g.sum(cat);
        let loss = g.scale(total, T::one() / T::of(b as f64));
        let inv_b = 1.0 / b as f64;
        terms.recon *= inv_b;
        terms.reward *= inv_b;
        terms.cont *= inv_b;
        terms.kl *= inv_b;
        terms.kl_loss *= inv_b;
        terms.total = g.value(loss).item().f64();
        if !terms.total.is_finite() {
            return Err(DaliError::NonFinite("world-model loss".into()));
        }
        let hr: Vec<&Matrix<T>> = hs.iter().collect();
        let zr: Vec<&Matrix<T>> = zs.iter().collect();
        Ok(SequenceOutput { loss, terms, states: Latent { h: Matrix::concat_rows(&hr), z: Matrix::concat_rows(&zr) } })
    }

    /// Batch-summed loss for one step; returns the `1 x 1` node and its parts.
    #[allow(clippy::too_many_arguments)]
    fn step_loss(
        &self,
        g: &mut Graph<T>,
        o_hat: Var,
        o: Var,
        r_hat: Var,
        r: Var,
        n_logit: Var,
        n: Var,
        q: Var,
        logq: Var,
        logp: Var,
    ) -> (Var, ElboTerms) {
        let half = T::of(0.5);
        let d = g.sub(o_hat, o);
        let d = g.square(d);
        let recon = g.sum(d);
        let recon = g.scale(recon, half);
        let dr = g.sub(r_hat, r);
        let dr = g.square(dr);
        let rew = g.sum(dr);
        let rew = g.scale(rew, half);
        // BCE with logits: softplus(x) − y x
        let sp = g.softplus(n_logit);
        let yx = g.mul(n, n_logit);
        let bce = g.sub(sp, yx);
        let cont = g.sum(bce);
        let classes = self.cfg.stoch_classes;
        let free = T::of(self.cfg.free_bits);
        let q_sg = g.detach(q);
        let logq_sg = g.detach(logq);
        let diff = g.sub(logq_sg, logp);
        let kd = g.mul(q_sg, diff);
        let kd = g.group_sum(kd, classes);
        let raw_kl = g.value(kd).sum().f64();
        let kd = g.clamp_min(kd, free);
        let kd = g.sum(kd);
        let logp_sg = g.detach(logp);
        let diff = g.sub(logq, logp_sg);
        let kr = g.mul(q, diff);
        let kr = g.group_sum(kr, classes);
        let kr = g.clamp_min(kr, free);
        let kr = g.sum(kr);
        let kd = g.scale(kd, T::of(self.cfg.kl_balance));
        let kr = g.scale(kr, T::of(1.0 - self.cfg.kl_balance));
        let kl = g.add(kd, kr);
        let a = g.add(recon, rew);
        let bsum = g.add(cont, kl);
        let total = g.add(a, bsum);
        let terms = ElboTerms {
            recon: g.value(recon).item().f64(),
            reward: g.value(rew).item().f64(),
            cont: g.value(cont).item().f64(),
            kl: raw_kl,
            kl_loss: g.value(kl).item().f64(),
            total: g.value(total).item().f64(),
        };
        (total, terms)
    }

    /// Gradient-free posterior filter step used while acting.
    ///
    /// Returns the new latent; `z` is sampled when `rng` is given, otherwise the mode.
    pub fn observe_step<R: Rng>(
        &self,
        prev: &Latent<T>,
        prev_action: &Matrix<T>,
        obs: &Matrix<T>,
        ctx: Option<&Matrix<T>>,
        rng: Option<&mut R>,
    ) -> Result<Latent<T>> {
        let mut g = Graph::no_grad();
        let p = self.params.bind(&mut g, false);
        let ctx = ctx.map(|c| g.constant(c.clone()));
        let deep_ctx = if self.variant.deep() { ctx } else { None };
        let shallow_ctx = if self.variant.shallow() { ctx } else { None };
        let h = g.constant(prev.h.clone());
        let z = g.constant(prev.z.clone());
        let a = g.constant(prev_action.clone());
        let h = self.sequence_step(&mut g, &p, h, z, a, deep_ctx)?;
        let o = g.constant(obs.clone());
        let post = self.posterior(&mut g, &p, h, o, shallow_ctx)?;
        let (q, _) = self.dist(&mut g, post);
        let z = match rng {
            Some(r) => self.sample(&mut g, q, r),
            None => self.mode(&mut g, q),
        };
        Ok(Latent { h: g.value_owned(h), z: g.value_owned(z) })
    }

    /// Initial latent for `rows` fresh episodes (before any observation).
    pub fn initial_latent(&self, rows: usize) -> Latent<T> {
        let mut l = Latent::zeros(rows, &self.cfg);
        if let Some(id) = self.h0 {
            let h = self.params.get(id).map(|v| v.tanh());
            for r in 0..rows {
                l.h.row_mut(r).copy_from_slice(h.data());
            }
        }
        l
    }
}

/// Samples one class per block of width `classes` from row-wise probabilities.
pub fn sample_one_hot<T: Scalar, R: Rng>(probs: &Matrix<T>, classes: usize, rng: &mut R) -> Matrix<T> {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for (pb, ob) in probs.data().chunks(classes).zip(out.data_mut().chunks_mut(classes)) {
        let u: f64 = rng.gen::<f64>();
        let total: f64 = pb.iter().map(|v| v.f64()).sum();
        let mut acc = 0.0;
        let mut pick = classes - 1;
        for (i, v) in pb.iter().enumerate() {
            acc += v.f64() / total;
            if u < acc {
                pick = i;
                break;
            }
        }
        ob[pick] = T::one();
    }
    out
}

/// One-hot of the arg-max per block (first index on ties).
pub fn argmax_one_hot<T: Scalar>(probs: &Matrix<T>, classes: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for (pb, ob) in probs.data().chunks(classes).zip(out.data_mut().chunks_mut(classes)) {
        let mut best = 0;
        for i in 1..classes {
            if pb[i] > pb[best] {
                best = i;
            }
        }
        ob[best] = T::one();
    }
    out
}

/// Reference world-model loss for one step from explicit predictions (all `f64`).
///
/// `post_logits` and `prior_logits` are raw logits; unimix, KL balance and
/// free bits follow `cfg`. Values are summed over rows (not averaged).
#[allow(clippy::too_many_arguments)]
pub fn elbo_terms(
    cfg: &ModelConfig,
    obs: &[f64],
    obs_pred: &[f64],
    reward: f64,
    reward_pred: f64,
    cont: f64,
    cont_logit: f64,
    post_logits: &[f64],
    prior_logits: &[f64],
) -> ElboTerms {
    let recon = 0.5 * obs.iter().zip(obs_pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let rew = 0.5 * (reward - reward_pred) * (reward - reward_pred);
    let softplus = cont_logit.max(0.0) + (1.0 + (-cont_logit.abs()).exp()).ln();
    let bce = softplus - cont * cont_logit;
    let c = cfg.stoch_classes;
    let probs = |logits: &[f64]| -> Vec<f64> {
        logits
            .chunks(c)
            .flat_map(|blk| {
                let m = blk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = blk.iter().map(|v| (v - m).exp()).sum();
                blk.iter().map(move |v| (1.0 - cfg.unimix) * (v - m).exp() / s + cfg.unimix / c as f64).collect::<Vec<_>>()
            })
            .collect()
    };
    let q = probs(post_logits);
    let p = probs(prior_logits);
    let mut kl = 0.0;
    let mut kl_loss = 0.0;
    for (qb, pb) in q.chunks(c).zip(p.chunks(c)) {
        let k: f64 = qb.iter().zip(pb).map(|(a, b)| a * (a.ln() - b.ln())).sum();
        kl += k;
        let clamped = k.max(cfg.free_bits);
        kl_loss += cfg.kl_balance * clamped + (1.0 - cfg.kl_balance) * clamped;
    }
    ElboTerms { recon, reward: rew, cont: bce, kl, kl_loss, total: recon + rew + bce + kl_loss }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { deter: 6, hidden: 5, enc_width: 4, fwd_hidden: 4, window: 2, ..ModelConfig::default() }
    }

    #[test]
    fn shallow_sequence_model_rejects_context() {
        let c = cfg();
        let wm = WorldModel::<f64>::new(&c, Variant::DaliS, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let p = wm.params.bind(&mut g, false);
        let h = g.constant(Matrix::zeros(1, 6));
        let z = g.constant(Matrix::zeros(1, 32));
        let a = g.constant(Matrix::zeros(1, 1));
        let ctx = g.constant(Matrix::zeros(1, 8));
        assert!(matches!(wm.sequence_step(&mut g, &p, h, z, a, Some(ctx)), Err(DaliError::Wiring(_))));
        let dr = WorldModel::<f64>::new(&c, Variant::DreamerDr, &mut ChaCha8Rng::seed_from_u64(0));
        let p2 = dr.params.bind(&mut g, false);
        let h1 = dr.sequence_step(&mut g, &p2, h, z, a, None).unwrap();
        assert_eq!(g.shape(h1), (1, 6));
        let deep = WorldModel::<f64>::new(&c, Variant::DaliD, &mut ChaCha8Rng::seed_from_u64(0));
        let p3 = deep.params.bind(&mut g, false);
        assert!(deep.sequence_step(&mut g, &p3, h, z, a, None).is_err());
    }

    #[test]
    fn equal_logits_give_uniform_blocks() {
        let c = cfg();
        let wm = WorldModel::<f64>::new(&c, Variant::DreamerDr, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let l = g.constant(Matrix::filled(2, 32, 0.3));
        let (q, _) = wm.dist(&mut g, l);
        assert!(g.value(q).data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = wm.sample(&mut g, q, &mut rng);
        for blk in g.value(z).data().chunks(8) {
            assert_eq!(blk.iter().sum::<f64>(), 1.0);
            assert!(blk.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn optimum_leaves_only_free_bits() {
        let c = cfg();
        let logits: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = elbo_terms(&c, &[0.1, 0.2, 0.3, 0.4], &[0.1, 0.2, 0.3, 0.4], 0.5, 0.5, 1.0, 60.0, &logits, &logits);
        assert!(t.kl.abs() < 1e-15);
        assert!((t.total - 4.0 * c.free_bits).abs() < 1e-12);
    }

    #[test]
    fn graph_step_loss_matches_reference() {
        let c = cfg();
        let wm = WorldModel::<f64>::new(&c, Variant::DreamerDr, &mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let mk = |g: &mut Graph<f64>, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            g.constant(Matrix::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0)))
        };
        let o_hat = mk(&mut g, 1, 4, &mut rng);
        let o = mk(&mut g, 1, 4, &mut rng);
        let r_hat = mk(&mut g, 1, 1, &mut rng);
        let r = mk(&mut g, 1, 1, &mut rng);
        let nl = mk(&mut g, 1, 1, &mut rng);
        let n = g.constant(Matrix::scalar(1.0));
        let pl = mk(&mut g, 1, 32, &mut rng);
        let prl = mk(&mut g, 1, 32, &mut rng);
        let (q, logq) = wm.dist(&mut g, pl);
        let (_, logp) = wm.dist(&mut g, prl);
        let (total, terms) = wm.step_loss(&mut g, o_hat, o, r_hat, r, nl, n, q, logq, logp);
        let v = |x: Var| g.value(x).data().to_vec();
        let reference =
            elbo_terms(&c, &v(o), &v(o_hat), v(r)[0], v(r_hat)[0], 1.0, v(nl)[0], &v(pl), &v(prl));
        assert!((g.value(total).item() - reference.total).abs() < 1e-12);
        assert!((terms.kl - reference.kl).abs() < 1e-12);
    }
}
