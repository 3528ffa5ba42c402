//! Actor-critic learning inside the world model's imagination.
//!
//! Rollouts follow the prior from posterior start states. The actor is a
//! tanh-squashed Gaussian trained by backpropagating λ-returns through the
//! frozen dynamics; the critic regresses stop-gradient λ-return targets.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{DaliError, Result};
use crate::model::{ModelConfig, Variant};
use crate::nn::{Adam, Bound, Mlp, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::world_model::{Latent, WorldModel};

#[derive(Clone, Debug)]
pub struct Actor<T> {
    pub params: ParamSet<T>,
    pub net: Mlp,
    pub act_dim: usize,
    pub min_std: f64,
    pub max_std: f64,
    pub uses_ctx: bool,
}

impl<T: Scalar> Actor<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, variant: Variant, rng: &mut R) -> Self {
        let mut ps = ParamSet::new();
        let ctx = if variant.deep() { cfg.ctx_width(variant) } else { 0 };
        let h = cfg.actor_hidden;
        let net = Mlp::new(&mut ps, "actor", &[cfg.feat_dim() + ctx, h, h, 2 * cfg.act_dim], 0.1, rng);
        Self { params: ps, net, act_dim: cfg.act_dim, min_std: cfg.min_std, max_std: cfg.max_std, uses_ctx: variant.deep() }
    }

    pub fn fan_in(&self) -> usize {
        self.net.fan_in()
    }

    fn input(&self, g: &mut Graph<T>, feat: Var, ctx: Option<Var>) -> Result<Var> {
        match (self.uses_ctx, ctx) {
            (true, Some(c)) => Ok(g.concat_cols(&[feat, c])),
            (false, None) => Ok(feat),
            (true, None) => Err(DaliError::Wiring("actor requires a context".into())),
            (false, Some(_)) => Err(DaliError::Wiring("actor takes no context".into())),
        }
    }

    /// Pre-squash mean and standard deviation.
    pub fn dist(&self, g: &mut Graph<T>, p: &Bound, feat: Var, ctx: Option<Var>) -> Result<(Var, Var)> {
        let x = self.input(g, feat, ctx)?;
        let out = self.net.forward(g, p, x);
        let mean = g.slice_cols(out, 0, self.act_dim);
        let raw = g.slice_cols(out, self.act_dim, self.act_dim);
        let raw = g.add_scalar(raw, T::of(2.0));
        let s = g.sigmoid(raw);
        let s = g.scale(s, T::of(self.max_std - self.min_std));
        let std = g.add_scalar(s, T::of(self.min_std));
        Ok((mean, std))
    }

    /// Reparameterised sample `tanh(μ + σ ε)` and the per-row Gaussian entropy.
    pub fn sample<R: Rng>(&self, g: &mut Graph<T>, p: &Bound, feat: Var, ctx: Option<Var>, rng: &mut R) -> Result<(Var, Var)> {
        let (mean, std) = self.dist(g, p, feat, ctx)?;
        let (n, d) = g.shape(mean);
        let eps = g.constant(Matrix::from_fn(n, d, |_, _| T::of(StandardNormal.sample(rng))));
        let noise = g.mul(std, eps);
        let pre = g.add(mean, noise);
        let a = g.tanh(pre);
        let ls = g.log(std);
        let ent = g.row_sum(ls);
        let c = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() * d as f64;
        let ent = g.add_scalar(ent, T::of(c));
        Ok((a, ent))
    }

    /// Gradient-free action; the distribution mean squashed when `greedy`.
    pub fn act<R: Rng>(&self, feat: &Matrix<T>, ctx: Option<&Matrix<T>>, greedy: bool, rng: &mut R) -> Result<Matrix<T>> {
        let mut g = Graph::no_grad();
        let p = self.params.bind(&mut g, false);
        let f = g.constant(feat.clone());
        let c = ctx.map(|c| g.constant(c.clone()));
        let a = if greedy {
            let (mean, _) = self.dist(&mut g, &p, f, c)?;
            g.tanh(mean)
        } else {
            self.sample(&mut g, &p, f, c, rng)?.0
        };
        Ok(g.value_owned(a))
    }
}

#[derive(Clone, Debug)]
pub struct Critic<T> {
    pub params: ParamSet<T>,
    pub net: Mlp,
    pub uses_ctx: bool,
}

impl<T: Scalar> Critic<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, variant: Variant, rng: &mut R) -> Self {
        let mut ps = ParamSet::new();
        let ctx = if variant.deep() { cfg.ctx_width(variant) } else { 0 };
        let h = cfg.critic_hidden;
        let net = Mlp::new(&mut ps, "critic", &[cfg.feat_dim() + ctx, h, h, 1], 0.1, rng);
        Self { params: ps, net, uses_ctx: variant.deep() }
    }

    pub fn fan_in(&self) -> usize {
        self.net.fan_in()
    }

    pub fn value(&self, g: &mut Graph<T>, p: &Bound, feat: Var, ctx: Option<Var>) -> Result<Var> {
        let x = match (self.uses_ctx, ctx) {
            (true, Some(c)) => g.concat_cols(&[feat, c]),
            (false, None) => feat,
            (true, None) => return Err(DaliError::Wiring("critic requires a context".into())),
            (false, Some(_)) => return Err(DaliError::Wiring("critic takes no context".into())),
        };
        Ok(self.net.forward(g, p, x))
    }
}

/// Imagined rollout as graph nodes. `feats` has `H + 1` entries; the rest `H`.
pub struct ImaginedGraph {
    pub feats: Vec<Var>,
    pub actions: Vec<Var>,
    pub entropies: Vec<Var>,
    /// Predicted reward on arrival at state `i + 1`.
    pub rewards: Vec<Var>,
    /// Continue probability at state `i + 1`.
    pub conts: Vec<Var>,
    /// The single context node fed at every step (deep variants).
    pub ctx: Option<Var>,
}

/// Value copy of an imagined rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImaginedTrajectory<T> {
    pub h: Vec<Matrix<T>>,
    pub z: Vec<Matrix<T>>,
    pub actions: Vec<Matrix<T>>,
    pub rewards: Vec<Matrix<T>>,
    pub conts: Vec<Matrix<T>>,
    pub ctx: Option<Matrix<T>>,
}

/// Rolls the prior forward `horizon` steps under the actor.
#[allow(clippy::too_many_arguments)]
pub fn imagine_graph<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    wm: &WorldModel<T>,
    wm_p: &Bound,
    actor: &Actor<T>,
    actor_p: &Bound,
    start: &Latent<T>,
    ctx: Option<&Matrix<T>>,
    horizon: usize,
    rng: &mut R,
) -> Result<ImaginedGraph> {
    let deep = wm.variant.deep();
    if deep != ctx.is_some() {
        return Err(DaliError::Wiring(format!("{} imagination context presence mismatch", wm.variant)));
    }
    let ctx = ctx.map(|c| g.constant(c.clone()));
    let mut h = g.constant(start.h.clone());
    let mut z = g.constant(start.z.clone());
    let mut out = ImaginedGraph {
        feats: vec![g.concat_cols(&[h, z])],
        actions: Vec::with_capacity(horizon),
        entropies: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        conts: Vec::with_capacity(horizon),
        ctx,
    };
    for _ in 0..horizon {
        let feat = *out.feats.last().expect("start feature");
        let (a, ent) = actor.sample(g, actor_p, feat, ctx, rng)?;
        h = wm.sequence_step(g, wm_p, h, z, a, ctx)?;
        let prior = wm.prior(g, wm_p, h);
        let (probs, _) = wm.dist(g, prior);
        z = wm.sample(g, probs, rng);
        let (r, n_logit) = wm.reward_and_cont(g, wm_p, h, z, ctx)?;
        let n = g.sigmoid(n_logit);
        out.feats.push(g.concat_cols(&[h, z]));
        out.actions.push(a);
        out.entropies.push(ent);
        out.rewards.push(r);
        out.conts.push(n);
        if !g.value(h).is_finite() {
            return Err(DaliError::NonFinite("imagined recurrent state".into()));
        }
    }
    Ok(out)
}

/// Gradient-free imagination returning plain values.
#[allow(clippy::too_many_arguments)]
pub fn imagine<T: Scalar, R: Rng>(
    wm: &WorldModel<T>,
    actor: &Actor<T>,
    start: &Latent<T>,
    ctx: Option<&Matrix<T>>,
    horizon: usize,
    rng: &mut R,
) -> Result<ImaginedTrajectory<T>> {
    let mut g = Graph::no_grad();
    let wp = wm.params.bind(&mut g, false);
    let ap = actor.params.bind(&mut g, false);
    let im = imagine_graph(&mut g, wm, &wp, actor, &ap, start, ctx, horizon, rng)?;
    let d = wm.cfg.deter;
    let s = wm.cfg.stoch();
    Ok(ImaginedTrajectory {
        h: im.feats.iter().map(|&f| g.value(f).slice_cols(0, d)).collect(),
        z: im.feats.iter().map(|&f| g.value(f).slice_cols(d, s)).collect(),
        actions: im.actions.iter().map(|&v| g.value_owned(v)).collect(),
        rewards: im.rewards.iter().map(|&v| g.value_owned(v)).collect(),
        conts: im.conts.iter().map(|&v| g.value_owned(v)).collect(),
        ctx: im.ctx.map(|c| g.value_owned(c)),
    })
}

fn check_discounts(gamma: f64, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DaliError::Invalid(format!("discount {gamma} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DaliError::Invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// TD(λ) targets for `H` transitions.
///
/// `rewards[i]` and `continues[i]` belong to the transition into state `i + 1`;
/// `values` has `H + 1` entries. `ret[i] = r[i] + γ n[i] ((1 − λ) v[i+1] + λ ret[i+1])`
/// with `ret[H] = v[H]`.
pub fn lambda_returns(rewards: &[f64], values: &[f64], continues: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    check_discounts(gamma, lambda)?;
    let h = rewards.len();
    if continues.len() != h || values.len() != h + 1 {
        return Err(DaliError::Shape(format!(
            "lambda returns need H rewards/continues and H + 1 values, got {}/{}/{}",
            h,
            continues.len(),
            values.len()
        )));
    }
    let mut ret = vec![0.0; h];
    let mut next = values[h];
    for i in (0..h).rev() {
        next = rewards[i] + gamma * continues[i] * ((1.0 - lambda) * values[i + 1] + lambda * next);
        ret[i] = next;
    }
    Ok(ret)
}

/// Graph version of [`lambda_returns`] over `N x 1` columns.
pub fn lambda_returns_graph<T: Scalar>(
    g: &mut Graph<T>,
    rewards: &[Var],
    values: &[Var],
    continues: &[Var],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Var>> {
    check_discounts(gamma, lambda)?;
    let h = rewards.len();
    assert_eq!(values.len(), h + 1);
    let mut out = vec![values[h]; h];
    let mut next = values[h];
    for i in (0..h).rev() {
        let a = g.scale(values[i + 1], T::of(1.0 - lambda));
        let b = g.scale(next, T::of(lambda));
        let mix = g.add(a, b);
        let disc = g.scale(continues[i], T::of(gamma));
        let m = g.mul(disc, mix);
        next = g.add(rewards[i], m);
        out[i] = next;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BehaviorConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy: f64,
}

impl BehaviorConfig {
    pub fn desk() -> Self {
        Self { horizon: 15, gamma: 0.99, lambda: 0.95, entropy: 3e-4 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BehaviorLosses {
    pub actor: f64,
    pub critic: f64,
    pub entropy: f64,
    pub mean_return: f64,
    pub mean_reward: f64,
}

/// Actor and critic losses as graph nodes.
pub struct BehaviorGraph {
    pub actor_loss: Var,
    pub critic_loss: Var,
    pub entropy_term: Option<Var>,
    pub losses: BehaviorLosses,
}

/// Builds imagination plus actor and critic losses on `g`.
///
/// `actor_p` and `critic_p` are trainable bindings; `critic_frozen` is a
/// non-trainable binding used for bootstrap values inside the returns.
#[allow(clippy::too_many_arguments)]
pub fn behavior_losses<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    wm: &WorldModel<T>,
    wm_p: &Bound,
    actor: &Actor<T>,
    actor_p: &Bound,
    critic: &Critic<T>,
    critic_p: &Bound,
    critic_frozen: &Bound,
    start: &Latent<T>,
    ctx: Option<&Matrix<T>>,
    cfg: &BehaviorConfig,
    rng: &mut R,
) -> Result<BehaviorGraph> {
    let im = imagine_graph(g, wm, wm_p, actor, actor_p, start, ctx, cfg.horizon, rng)?;
    let h = cfg.horizon;
    let n = start.rows();
    let values: Vec<Var> =
        im.feats.iter().map(|&f| critic.value(g, critic_frozen, f, im.ctx)).collect::<Result<_>>()?;
    let rets = lambda_returns_graph(g, &im.rewards, &values, &im.conts, cfg.gamma, cfg.lambda)?;
    // w_0 = 1, w_i = Π_{j<i} n_j, detached
    let mut weights: Vec<Var> = Vec::with_capacity(h);
    let mut w = g.constant(Matrix::filled(n, 1, T::one()));
    for i in 0..h {
        weights.push(w);
        let c = g.detach(im.conts[i]);
        w = g.mul(w, c);
    }
    let denom = T::one() / T::of((n * h.max(1)) as f64);
    let mut actor_parts = Vec::with_capacity(h);
    let mut ent_parts = Vec::with_capacity(h);
    let mut critic_parts = Vec::with_capacity(h);
    let mut mean_return = 0.0;
    for i in 0..h {
        let wv = weights[i];
        actor_parts.push(g.mul(wv, rets[i]));
        if cfg.entropy != 0.0 {
            ent_parts.push(g.mul(wv, im.entropies[i]));
        }
        let f = g.detach(im.feats[i]);
        let v = critic.value(g, critic_p, f, im.ctx)?;
        let target = g.detach(rets[i]);
        let d = g.sub(v, target);
        let d = g.square(d);
        let d = g.scale(d, T::of(0.5));
        critic_parts.push(g.mul(wv, d));
        mean_return += g.value(rets[i]).sum().f64();
    }
    if h == 0 {
        let z = g.constant(Matrix::scalar(T::zero()));
        return Ok(BehaviorGraph { actor_loss: z, critic_loss: z, entropy_term: None, losses: BehaviorLosses::default() });
    }
    let ret_cat = g.concat_cols(&actor_parts);
    let ret_sum = g.sum(ret_cat);
    let mut actor_loss = g.scale(ret_sum, -denom);
    let mut entropy_term = None;
    let mut ent_value = 0.0;
    if cfg.entropy != 0.0 {
        let cat = g.concat_cols(&ent_parts);
        let s = g.sum(cat);
        let s = g.scale(s, denom);
        ent_value = g.value(s).item().f64();
        let bonus = g.scale(s, T::of(-cfg.entropy));
        entropy_term = Some(bonus);
        actor_loss = g.add(actor_loss, bonus);
    }
    let cc = g.concat_cols(&critic_parts);
    let cs = g.sum(cc);
    let critic_loss = g.scale(cs, denom);
    let mean_reward = im.rewards.iter().map(|&r| g.value(r).sum().f64()).sum::<f64>() / (n * h) as f64;
    let losses = BehaviorLosses {
        actor: g.value(actor_loss).item().f64(),
        critic: g.value(critic_loss).item().f64(),
        entropy: ent_value,
        mean_return: mean_return / (n * h) as f64,
        mean_reward,
    };
    if !(losses.actor.is_finite() && losses.critic.is_finite()) {
        return Err(DaliError::NonFinite("behavior losses".into()));
    }
    Ok(BehaviorGraph { actor_loss, critic_loss, entropy_term, losses })
}

/// One actor and critic update with the world model frozen.
#[allow(clippy::too_many_arguments)]
pub fn behavior_update<T: Scalar, R: Rng>(
    wm: &WorldModel<T>,
    actor: &mut Actor<T>,
    actor_opt: &mut Adam<T>,
    critic: &mut Critic<T>,
    critic_opt: &mut Adam<T>,
    start: &Latent<T>,
    ctx: Option<&Matrix<T>>,
    cfg: &BehaviorConfig,
    rng: &mut R,
) -> Result<BehaviorLosses> {
    let mut g = Graph::new();
    let wp = wm.params.bind(&mut g, false);
    let ap = actor.params.bind(&mut g, true);
    let cp = critic.params.bind(&mut g, true);
    let cf = critic.params.bind(&mut g, false);
    let bg = behavior_losses(&mut g, wm, &wp, actor, &ap, critic, &cp, &cf, start, ctx, cfg, rng)?;
    let total = g.add(bg.actor_loss, bg.critic_loss);
    let grads = g.backward(total);
    let ag = ap.grads(&grads, &actor.params);
    let cg = cp.grads(&grads, &critic.params);
    drop(g);
    if ag.iter().chain(&cg).any(|m| !m.is_finite()) {
        return Err(DaliError::NonFinite("behavior gradients".into()));
    }
    actor_opt.apply(&mut actor.params, &ag);
    critic_opt.apply(&mut critic.params, &cg);
    Ok(bg.losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_zero_is_one_step() {
        let r = [0.5, 0.2, 0.9];
        let v = [1.0, 2.0, 3.0, 4.0];
        let n = [1.0, 0.5, 1.0];
        let ret = lambda_returns(&r, &v, &n, 0.9, 0.0).unwrap();
        for i in 0..3 {
            assert!((ret[i] - (r[i] + 0.9 * n[i] * v[i + 1])).abs() < 1e-15);
        }
    }

    #[test]
    fn lambda_one_is_discounted_sum() {
        let r = [0.5, 0.2, 0.9];
        let v = [0.0, 0.0, 0.0, 4.0];
        let ret = lambda_returns(&r, &v, &[1.0; 3], 0.9, 1.0).unwrap();
        let expect = 0.5 + 0.9 * 0.2 + 0.81 * 0.9 + 0.729 * 4.0;
        assert!((ret[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_horizon_and_bad_discounts() {
        assert!(lambda_returns(&[], &[1.0], &[], 0.99, 0.95).unwrap().is_empty());
        assert!(lambda_returns(&[1.0], &[1.0, 1.0], &[1.0], 1.5, 0.95).is_err());
        assert!(lambda_returns(&[1.0], &[1.0, 1.0], &[1.0], 0.9, -0.1).is_err());
    }
}
