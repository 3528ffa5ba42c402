//! Desk-scale contextual environments.
//!
//! Both tasks are integrated with semi-implicit Euler at `dt = 0.05`
//! (velocity first, then position with the new velocity).
//!
//! **swing**: a ball on a rigid string of length `l` under gravity `g`, with a
//! horizontal actuator of authority `SWING_FORCE`:
//!
//! ```text
//! ω' = ω + dt · ((−g sin θ + SWING_FORCE · a) / l − SWING_DAMPING · ω)
//! θ' = θ + dt · ω'
//! ```
//!
//! The state vector is the ball relative to the pivot,
//! `s = (l sin θ, −l cos θ, l ω cos θ, l ω sin θ)`, and the reward
//! `(1 − cos θ) / 2` pays for lifting the ball up towards the cup above the pivot.
//! `ω` is clamped to `±SWING_MAX_OMEGA`.
//!
//! **hopper**: a unit mass on a periodic bumpy track, with gravity `g` and
//! actuator strength `k`:
//!
//! ```text
//! v' = v + dt · (HOPPER_FORCE · k · a − HOPPER_BUMP · g · sin x − HOPPER_DAMPING · v)
//! x' = x + dt · v'
//! ```
//!
//! State `s = (sin x, cos x, v)`, reward `clip(v / HOPPER_TARGET_SPEED, 0, 1)`,
//! and `v` is clamped to `±HOPPER_MAX_SPEED`.
//!
//! Observations are `o = s + η`, `η ~ N(0, σ² I)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DaliError, Result};

pub const DT: f64 = 0.05;
pub const SWING_FORCE: f64 = 5.0;
pub const SWING_DAMPING: f64 = 0.1;
pub const SWING_MAX_OMEGA: f64 = 40.0;
pub const HOPPER_FORCE: f64 = 6.0;
pub const HOPPER_BUMP: f64 = 0.5;
pub const HOPPER_DAMPING: f64 = 0.5;
pub const HOPPER_TARGET_SPEED: f64 = 2.0;
pub const HOPPER_MAX_SPEED: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Swing,
    Hopper,
}

impl EnvId {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Swing => "swing",
            EnvId::Hopper => "hopper",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvId::Swing => 4,
            EnvId::Hopper => 3,
        }
    }

    pub fn act_dim(self) -> usize {
        1
    }

    /// Names of the observation coordinates.
    pub fn observation_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            EnvId::Swing => &["x", "y", "vx", "vy"],
            EnvId::Hopper => &["sin_x", "cos_x", "v"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn space(self) -> ContextSpace {
        match self {
            EnvId::Swing => ContextSpace::swing(),
            EnvId::Hopper => ContextSpace::hopper(),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = DaliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swing" => Ok(EnvId::Swing),
            "hopper" => Ok(EnvId::Hopper),
            other => Err(DaliError::UnknownEnv(other.to_string())),
        }
    }
}

/// One context dimension: default, closed train interval and the two eval
/// intervals `[eval_lo, train_lo)` and `(train_hi, eval_hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextDim {
    pub name: String,
    pub default: f64,
    pub train: (f64, f64),
    pub eval_lo: f64,
    pub eval_hi: f64,
}

impl ContextDim {
    pub fn new(name: &str, default: f64, train: (f64, f64), eval_lo: f64, eval_hi: f64) -> Self {
        Self { name: name.to_string(), default, train, eval_lo, eval_hi }
    }

    pub fn in_train(&self, v: f64) -> bool {
        v >= self.train.0 && v <= self.train.1
    }

    pub fn in_eval(&self, v: f64) -> bool {
        (v >= self.eval_lo && v < self.train.0) || (v > self.train.1 && v <= self.eval_hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v.is_finite() && (self.in_train(v) || self.in_eval(v))
    }

    /// Lower and upper bound of train ∪ eval.
    pub fn full_range(&self) -> (f64, f64) {
        (self.eval_lo, self.eval_hi)
    }

    /// Uniform draw from the train interval.
    pub fn sample_train<R: Rng>(&self, rng: &mut R) -> f64 {
        rng.gen_range(self.train.0..=self.train.1)
    }

    /// Uniform draw from the union of the two eval intervals.
    pub fn sample_eval<R: Rng>(&self, rng: &mut R) -> f64 {
        let w_lo = self.train.0 - self.eval_lo;
        let w_hi = self.eval_hi - self.train.1;
        let u: f64 = rng.gen_range(0.0..w_lo + w_hi);
        if u < w_lo {
            self.eval_lo + u
        } else {
            // (train_hi, eval_hi]: reflect so the open end is excluded
            self.eval_hi - (u - w_lo)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSpace {
    pub dims: Vec<ContextDim>,
}

impl ContextSpace {
    pub fn swing() -> Self {
        Self {
            dims: vec![
                ContextDim::new("gravity", 9.81, (4.9, 14.7), 0.98, 19.6),
                ContextDim::new("length", 0.3, (0.15, 0.45), 0.03, 0.6),
            ],
        }
    }

    pub fn hopper() -> Self {
        Self {
            dims: vec![
                ContextDim::new("gravity", 9.81, (4.9, 14.7), 0.98, 19.6),
                ContextDim::new("actuator", 1.0, (0.5, 1.5), 0.1, 2.0),
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.dims.iter().map(|d| d.name.clone()).collect()
    }

    pub fn default_context(&self) -> Context {
        Context::new(self.names(), self.dims.iter().map(|d| d.default).collect())
    }

    /// Builds a context after validating its dimension and ranges.
    pub fn context(&self, values: &[f64]) -> Result<Context> {
        self.validate(values)?;
        Ok(Context::new(self.names(), values.to_vec()))
    }

    pub fn validate(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.dims.len() {
            return Err(DaliError::ContextDim { expected: self.dims.len(), got: values.len() });
        }
        for (d, &v) in self.dims.iter().zip(values) {
            if !d.contains(v) {
                return Err(DaliError::ContextOutOfRange { name: d.name.clone(), value: v });
            }
        }
        Ok(())
    }

    /// Maps each dimension affinely from train ∪ eval onto `[-1, 1]`.
    pub fn normalize(&self, values: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(values)
            .map(|(d, &v)| {
                let (lo, hi) = d.full_range();
                2.0 * (v - lo) / (hi - lo) - 1.0
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl Context {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Self {
        Self { names, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// How training contexts vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariationMode {
    /// Only dimension `k` varies; the other stays at its default.
    Single(usize),
    /// Both dimensions vary jointly.
    Double,
}

impl VariationMode {
    pub fn varied(self, dim: usize) -> Vec<usize> {
        match self {
            VariationMode::Single(k) => vec![k],
            VariationMode::Double => (0..dim).collect(),
        }
    }
}

impl fmt::Display for VariationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariationMode::Single(k) => write!(f, "single_{k}"),
            VariationMode::Double => f.write_str("double"),
        }
    }
}

impl FromStr for VariationMode {
    type Err = DaliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_0" => Ok(VariationMode::Single(0)),
            "single_1" => Ok(VariationMode::Single(1)),
            "double" => Ok(VariationMode::Double),
            other => Err(DaliError::Invalid(format!("unknown context mode `{other}`"))),
        }
    }
}

/// Draws `n` training contexts.
pub fn sample_contexts(space: &ContextSpace, mode: VariationMode, n: usize, seed: u64) -> Result<Vec<Context>> {
    if n == 0 {
        return Err(DaliError::Invalid("need at least one context".into()));
    }
    if let VariationMode::Single(k) = mode {
        if k >= space.dim() {
            return Err(DaliError::Invalid(format!("mode single_{k} on a {}-dimensional space", space.dim())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let varied = mode.varied(space.dim());
    Ok((0..n)
        .map(|_| {
            let values = space
                .dims
                .iter()
                .enumerate()
                .map(|(i, d)| if varied.contains(&i) { d.sample_train(&mut rng) } else { d.default })
                .collect();
            Context::new(space.names(), values)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Interpolate,
    Extrapolate,
    Mixed,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Interpolate, Regime::Extrapolate, Regime::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Interpolate => "interpolate",
            Regime::Extrapolate => "extrapolate",
            Regime::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = DaliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interpolate" => Ok(Regime::Interpolate),
            "extrapolate" => Ok(Regime::Extrapolate),
            "mixed" => Ok(Regime::Mixed),
            other => Err(DaliError::Invalid(format!("unknown regime `{other}`"))),
        }
    }
}

/// Interpolate when every dimension is in its train range, extrapolate when
/// every dimension is out of it, mixed otherwise.
pub fn regime_of(space: &ContextSpace, c: &Context) -> Result<Regime> {
    space.validate(&c.values)?;
    let ood = space.dims.iter().zip(&c.values).filter(|(d, &v)| !d.in_train(v)).count();
    Ok(if ood == 0 {
        Regime::Interpolate
    } else if ood == space.dim() {
        Regime::Extrapolate
    } else {
        Regime::Mixed
    })
}

/// Evaluation contexts for one regime.
///
/// Interpolation follows the training variation mode; extrapolation moves every
/// dimension out of range; mixed alternates which dimension is out of range.
pub fn eval_grid(space: &ContextSpace, regime: Regime, mode: VariationMode, n: usize, seed: u64) -> Vec<Context> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 + regime as u64));
    let varied = mode.varied(space.dim());
    (0..n)
        .map(|i| {
            let values = space
                .dims
                .iter()
                .enumerate()
                .map(|(k, d)| match regime {
                    Regime::Interpolate => {
                        if varied.contains(&k) {
                            d.sample_train(&mut rng)
                        } else {
                            d.default
                        }
                    }
                    Regime::Extrapolate => d.sample_eval(&mut rng),
                    Regime::Mixed => {
                        if k == i % space.dim() {
                            d.sample_eval(&mut rng)
                        } else {
                            d.sample_train(&mut rng)
                        }
                    }
                })
                .collect();
            Context::new(space.names(), values)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Observation noise standard deviation.
    pub sigma: f64,
    /// Episode length.
    pub horizon: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { sigma: 0.01, horizon: 200 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub s: Vec<f64>,
    pub t: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Single contextual environment instance.
#[derive(Clone, Debug)]
pub struct Env {
    id: EnvId,
    ctx: Context,
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    /// (θ, ω) for swing, (x, v) for hopper.
    q: [f64; 2],
    t: usize,
}

/// Creates an environment with default noise and horizon.
pub fn make_env(id: EnvId, c: &Context, seed: u64) -> Result<Env> {
    Env::new(id, c, seed, EnvConfig::default())
}

impl Env {
    pub fn new(id: EnvId, c: &Context, seed: u64, cfg: EnvConfig) -> Result<Self> {
        id.space().validate(&c.values)?;
        if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
            return Err(DaliError::Invalid(format!("observation noise {} must be finite and >= 0", cfg.sigma)));
        }
        if cfg.horizon == 0 {
            return Err(DaliError::Invalid("episode length must be positive".into()));
        }
        let noise = Normal::new(0.0, cfg.sigma.max(0.0)).map_err(|e| DaliError::Invalid(e.to_string()))?;
        let mut env = Self { id, ctx: c.clone(), cfg, rng: ChaCha8Rng::seed_from_u64(seed), noise, q: [0.0; 2], t: 0 };
        env.reset();
        Ok(env)
    }

    pub fn id(&self) -> EnvId {
        self.id
    }

    pub fn context(&self) -> &Context {
        &self.ctx
    }

    pub fn config(&self) -> EnvConfig {
        self.cfg
    }

    pub fn obs_dim(&self) -> usize {
        self.id.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.id.act_dim()
    }

    pub fn done(&self) -> bool {
        self.t >= self.cfg.horizon
    }

    /// Starts a new episode from a small random perturbation of the rest state.
    pub fn reset(&mut self) -> Vec<f64> {
        self.t = 0;
        self.q = match self.id {
            EnvId::Swing => [self.rng.gen_range(-0.2..0.2), 0.0],
            EnvId::Hopper => [self.rng.gen_range(-0.2..0.2), 0.0],
        };
        self.observe()
    }

    /// Overrides the internal generalised coordinates: (θ, ω) or (x, v).
    pub fn set_coordinates(&mut self, q: [f64; 2]) {
        self.q = q;
    }

    pub fn coordinates(&self) -> [f64; 2] {
        self.q
    }

    pub fn state(&self) -> EnvState {
        EnvState { s: self.state_vector(), t: self.t, horizon: self.cfg.horizon }
    }

    fn state_vector(&self) -> Vec<f64> {
        match self.id {
            EnvId::Swing => {
                let l = self.ctx.values[1];
                let (th, om) = (self.q[0], self.q[1]);
                vec![l * th.sin(), -l * th.cos(), l * om * th.cos(), l * om * th.sin()]
            }
            EnvId::Hopper => vec![self.q[0].sin(), self.q[0].cos(), self.q[1]],
        }
    }

    fn observe(&mut self) -> Vec<f64> {
        let mut s = self.state_vector();
        if self.cfg.sigma > 0.0 {
            for v in &mut s {
                *v += self.noise.sample(&mut self.rng);
            }
        }
        s
    }

    fn reward(&self) -> f64 {
        match self.id {
            EnvId::Swing => 0.5 * (1.0 - self.q[0].cos()),
            EnvId::Hopper => (self.q[1] / HOPPER_TARGET_SPEED).clamp(0.0, 1.0),
        }
    }

    /// Advances one Euler step; actions are clipped to `[-1, 1]`.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done() {
            return Err(DaliError::EpisodeDone);
        }
        if action.len() != self.act_dim() {
            return Err(DaliError::Shape(format!("action has {} entries, expected {}", action.len(), self.act_dim())));
        }
        let a = if action[0].is_finite() { action[0].clamp(-1.0, 1.0) } else { 0.0 };
        let g = self.ctx.values[0];
        match self.id {
            EnvId::Swing => {
                let l = self.ctx.values[1];
                let (th, om) = (self.q[0], self.q[1]);
                let acc = (-g * th.sin() + SWING_FORCE * a) / l - SWING_DAMPING * om;
                let om2 = (om + DT * acc).clamp(-SWING_MAX_OMEGA, SWING_MAX_OMEGA);
                let th2 = th + DT * om2;
                // keep θ in (−π, π] so positions stay exact over long episodes
                let th2 = (th2 + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
                self.q = [th2, om2];
            }
            EnvId::Hopper => {
                let k = self.ctx.values[1];
                let (x, v) = (self.q[0], self.q[1]);
                let acc = HOPPER_FORCE * k * a - HOPPER_BUMP * g * x.sin() - HOPPER_DAMPING * v;
                let v2 = (v + DT * acc).clamp(-HOPPER_MAX_SPEED, HOPPER_MAX_SPEED);
                let x2 = (x + DT * v2).rem_euclid(2.0 * std::f64::consts::PI);
                self.q = [x2, v2];
            }
        }
        self.t += 1;
        let reward = self.reward();
        let obs = self.observe();
        Ok(StepResult { obs, reward, done: self.done() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(id: EnvId, c: &[f64]) -> Env {
        let ctx = id.space().context(c).unwrap();
        Env::new(id, &ctx, 0, EnvConfig { sigma: 0.0, horizon: 200 }).unwrap()
    }

    #[test]
    fn swing_default_context_is_accepted() {
        let c = EnvId::Swing.space().context(&[9.81, 0.3]).unwrap();
        assert!(make_env(EnvId::Swing, &c, 0).is_ok());
    }

    #[test]
    fn zero_gravity_is_rejected() {
        let space = EnvId::Swing.space();
        assert!(matches!(space.context(&[0.0, 0.3]), Err(DaliError::ContextOutOfRange { .. })));
        let raw = Context::new(space.names(), vec![0.0, 0.3]);
        assert!(make_env(EnvId::Swing, &raw, 0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let raw = Context::new(vec!["gravity".into()], vec![9.81]);
        assert!(matches!(make_env(EnvId::Hopper, &raw, 0), Err(DaliError::ContextDim { .. })));
    }

    #[test]
    fn same_seed_same_first_observation() {
        let c = EnvId::Hopper.space().context(&[9.81, 1.0]).unwrap();
        let a = make_env(EnvId::Hopper, &c, 7).unwrap().state();
        let mut e1 = make_env(EnvId::Hopper, &c, 7).unwrap();
        let mut e2 = make_env(EnvId::Hopper, &c, 7).unwrap();
        assert_eq!(e1.reset(), e2.reset());
        assert_eq!(a, make_env(EnvId::Hopper, &c, 7).unwrap().state());
    }

    #[test]
    fn rest_is_a_fixed_point() {
        let mut e = quiet(EnvId::Swing, &[9.81, 0.3]);
        e.set_coordinates([0.0, 0.0]);
        let before = e.state().s;
        let r = e.step(&[0.0]).unwrap();
        assert_eq!(r.obs, before);
    }

    #[test]
    fn swing_step_matches_hand_computed_euler() {
        let (g, l) = (7.5, 0.25);
        let mut e = quiet(EnvId::Swing, &[g, l]);
        let (th, om, a) = (0.4_f64, -1.3_f64, 0.6_f64);
        e.set_coordinates([th, om]);
        let r = e.step(&[a]).unwrap();
        let om2 = om + 0.05 * ((-g * th.sin() + 5.0 * a) / l - 0.1 * om);
        let th2 = th + 0.05 * om2;
        let expect = [l * th2.sin(), -l * th2.cos(), l * om2 * th2.cos(), l * om2 * th2.sin()];
        for (x, y) in r.obs.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((r.reward - 0.5 * (1.0 - th2.cos())).abs() < 1e-12);
    }

    #[test]
    fn hopper_step_matches_hand_computed_euler() {
        let (g, k) = (12.0, 0.7);
        let mut e = quiet(EnvId::Hopper, &[g, k]);
        let (x, v, a) = (1.1_f64, 0.8_f64, -0.4_f64);
        e.set_coordinates([x, v]);
        let r = e.step(&[a]).unwrap();
        let v2 = v + 0.05 * (6.0 * k * a - 0.5 * g * x.sin() - 0.5 * v);
        let x2 = x + 0.05 * v2;
        let expect = [x2.sin(), x2.cos(), v2];
        for (p, q) in r.obs.iter().zip(expect) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!((r.reward - (v2 / 2.0).clamp(0.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn episode_ends_at_horizon() {
        let c = EnvId::Swing.space().default_context();
        let mut e = Env::new(EnvId::Swing, &c, 1, EnvConfig { sigma: 0.01, horizon: 5 }).unwrap();
        for t in 1..=5 {
            let r = e.step(&[0.3]).unwrap();
            assert_eq!(r.done, t == 5);
        }
        assert!(matches!(e.step(&[0.0]), Err(DaliError::EpisodeDone)));
    }

    #[test]
    fn gravity_lipschitz_bound() {
        let step_at = |g: f64| {
            let mut e = quiet(EnvId::Swing, &[g, 0.3]);
            e.set_coordinates([0.7, 0.5]);
            e.step(&[0.2]).unwrap().obs
        };
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        let base = step_at(9.0);
        let lip = l1(&base, &step_at(9.01)) / 0.01;
        for dg in [0.001, 0.003, 0.005] {
            assert!(l1(&base, &step_at(9.0 + dg)) <= lip * dg * 1.01 + 1e-12);
        }
    }

    fn period(g: f64) -> f64 {
        let mut e = quiet(EnvId::Swing, &[g, 0.3]);
        e.set_coordinates([0.1, 0.0]);
        let mut xs = vec![e.state().s[0]];
        for _ in 0..199 {
            xs.push(e.step(&[0.0]).unwrap().obs[0]);
        }
        let crossings: Vec<f64> = xs
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] > 0.0 && w[1] <= 0.0)
            .map(|(i, w)| i as f64 + w[0] / (w[0] - w[1]))
            .collect();
        (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64
    }

    #[test]
    fn doubling_gravity_shortens_period() {
        assert!(period(14.0) < period(7.0));
    }

    #[test]
    fn observation_noise_law() {
        let sigma = 0.05;
        let c = EnvId::Hopper.space().default_context();
        let mut e = Env::new(EnvId::Hopper, &c, 3, EnvConfig { sigma, horizon: 100_000 }).unwrap();
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let r = e.step(&[0.1]).unwrap();
            let s = e.state().s;
            let d = r.obs[2] - s[2];
            sum += d;
            sq += d * d;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let se_mean = sigma / (n as f64).sqrt();
        let se_var = sigma * sigma * (2.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - sigma * sigma).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn sample_contexts_single_and_double() {
        let space = EnvId::Swing.space();
        let cs = sample_contexts(&space, VariationMode::Single(0), 100, 4).unwrap();
        assert_eq!(cs.len(), 100);
        assert!(cs.iter().all(|c| c.values[1] == 0.3 && (4.9..=14.7).contains(&c.values[0])));
        let a = sample_contexts(&space, VariationMode::Double, 3, 9).unwrap();
        assert_eq!(a, sample_contexts(&space, VariationMode::Double, 3, 9).unwrap());
        assert!(a.iter().all(|c| space.dims[0].in_train(c.values[0]) && space.dims[1].in_train(c.values[1])));
        let one_d = ContextSpace { dims: vec![space.dims[0].clone()] };
        assert!(sample_contexts(&one_d, VariationMode::Single(1), 3, 0).is_err());
    }

    #[test]
    fn gravity_samples_cover_train_range() {
        let cs = sample_contexts(&EnvId::Swing.space(), VariationMode::Single(0), 100_000, 11).unwrap();
        let (lo, hi) = cs.iter().fold((f64::MAX, f64::MIN), |(lo, hi), c| (lo.min(c.values[0]), hi.max(c.values[0])));
        assert!(lo >= 4.9 && hi <= 14.7);
        assert!((hi - lo) >= 0.99 * 9.8);
    }

    #[test]
    fn regime_examples() {
        let s = EnvId::Swing.space();
        let r = |v: &[f64]| regime_of(&s, &Context::new(s.names(), v.to_vec()));
        assert_eq!(r(&[9.81, 0.3]).unwrap(), Regime::Interpolate);
        assert_eq!(r(&[19.6, 0.6]).unwrap(), Regime::Extrapolate);
        assert_eq!(r(&[19.6, 0.3]).unwrap(), Regime::Mixed);
        assert!(r(&[25.0, 0.3]).is_err());
    }

    #[test]
    fn eval_grids_agree_with_regime_labels() {
        for id in [EnvId::Swing, EnvId::Hopper] {
            let s = id.space();
            for mode in [VariationMode::Single(0), VariationMode::Single(1), VariationMode::Double] {
                for regime in Regime::ALL {
                    for c in eval_grid(&s, regime, mode, 20, 5) {
                        assert_eq!(regime_of(&s, &c).unwrap(), regime);
                    }
                }
            }
        }
    }

    #[test]
    fn extreme_contexts_stay_finite() {
        for (id, c) in [(EnvId::Swing, [19.6, 0.03]), (EnvId::Swing, [0.98, 0.6]), (EnvId::Hopper, [19.6, 2.0])] {
            let ctx = id.space().context(&c).unwrap();
            let mut e = Env::new(id, &ctx, 2, EnvConfig { sigma: 0.01, horizon: 1000 }).unwrap();
            for t in 0..1000 {
                let a = if (t / 7) % 2 == 0 { 1.0 } else { -1.0 };
                let r = e.step(&[a]).unwrap();
                assert!(r.obs.iter().all(|v| v.is_finite()));
                assert!((0.0..=1.0).contains(&r.reward));
            }
        }
    }
}
