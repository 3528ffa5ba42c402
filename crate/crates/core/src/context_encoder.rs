//! Self-supervised context encoder, forward model and cross-modal maps.
//!
//! The encoder reads a window of `K + 1` rows `[o_τ, a_τ]` (the last row
//! carries a zero action), runs one pre-norm transformer block with a single
//! attention head, pools the final row and projects to an 8-dimensional
//! context embedding. It is trained by next-observation prediction through a
//! small forward model, optionally with a bidirectional linear alignment to
//! the world model's stochastic state.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{DaliError, Result};
use crate::model::{ModelConfig, Pooling, EMBED_DIM};
use crate::nn::{Bound, LayerNorm, Linear, Mlp, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `K + 1` observations and `K` actions ending at the current step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    pub obs: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
    /// Number of real (unpadded) observations.
    pub valid: usize,
}

impl TrajectoryWindow {
    pub fn k(&self) -> usize {
        self.act.len()
    }

    /// Encoder input rows `[o_τ, a_τ]`, zero action on the final row.
    pub fn tokens<T: Scalar>(&self) -> Matrix<T> {
        let d_o = self.obs[0].len();
        let d_a = self.act.first().map_or(0, |a| a.len());
        let rows = self.obs.len();
        Matrix::from_fn(rows, d_o + d_a, |r, c| {
            if c < d_o {
                T::of(self.obs[r][c])
            } else if r < self.act.len() {
                T::of(self.act[r][c - d_o])
            } else {
                T::zero()
            }
        })
    }
}

/// Window of the last `K + 1` observations of `o_1..o_t` and the `K`
/// actions `a_{t-K}..a_{t-1}`, zero-padded at the front when `t <= K`.
pub fn pad_window(obs: &[Vec<f64>], act: &[Vec<f64>], k: usize, act_dim: usize) -> Result<TrajectoryWindow> {
    let t = obs.len();
    if t == 0 {
        return Err(DaliError::Invalid("empty observation history".into()));
    }
    if act.len() + 1 != t {
        return Err(DaliError::Shape(format!("{t} observations need {} actions, got {}", t - 1, act.len())));
    }
    let d_o = obs[0].len();
    let mut w_obs = vec![vec![0.0; d_o]; (k + 1).saturating_sub(t)];
    w_obs.extend_from_slice(&obs[t.saturating_sub(k + 1)..]);
    let mut w_act = vec![vec![0.0; act_dim]; k.saturating_sub(t - 1)];
    w_act.extend_from_slice(&act[(t - 1).saturating_sub(k)..]);
    Ok(TrajectoryWindow { obs: w_obs, act: w_act, valid: t.min(k + 1) })
}

/// Appends the encoder rows for the window ending at episode index `t`
/// (0-based) to `out`. `obs` and `act` are flat row-major episode arrays.
/// Indices before the episode start are zero.
#[allow(clippy::too_many_arguments)]
pub fn episode_window_rows<T: Scalar>(
    obs: &[f64],
    act: &[f64],
    d_o: usize,
    d_a: usize,
    t: usize,
    k: usize,
    out: &mut Vec<T>,
) {
    for i in 0..=k {
        let tau = t as isize - k as isize + i as isize;
        if tau < 0 {
            out.extend(std::iter::repeat_n(T::zero(), d_o + d_a));
            continue;
        }
        let tau = tau as usize;
        out.extend(obs[tau * d_o..(tau + 1) * d_o].iter().map(|&v| T::of(v)));
        if i < k {
            out.extend(act[tau * d_a..(tau + 1) * d_a].iter().map(|&v| T::of(v)));
        } else {
            out.extend(std::iter::repeat_n(T::zero(), d_a));
        }
    }
}

/// Sinusoidal position table, `rows x width`.
pub fn positional_table<T: Scalar>(rows: usize, width: usize) -> Matrix<T> {
    Matrix::from_fn(rows, width, |p, i| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
        let angle = p as f64 * freq;
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Context encoder, forward model and the two cross-modal maps.
#[derive(Debug)]
pub struct ContextModule<T> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    pub dense_in: Linear,
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub dense_out: Linear,
    pub forward_model: Mlp,
    /// `32 x 8`: maps an embedding to the stochastic-state space.
    pub w_z: ParamId,
    /// `8 x 32`: maps a stochastic state to the embedding space.
    pub w_zz: ParamId,
    pos: Matrix<T>,
    calls: AtomicU64,
}

impl<T: Scalar> Clone for ContextModule<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            dense_in: self.dense_in.clone(),
            ln1: self.ln1.clone(),
            query: self.query.clone(),
            key: self.key.clone(),
            value: self.value.clone(),
            attn_out: self.attn_out.clone(),
            ln2: self.ln2.clone(),
            mlp1: self.mlp1.clone(),
            mlp2: self.mlp2.clone(),
            dense_out: self.dense_out.clone(),
            forward_model: self.forward_model.clone(),
            w_z: self.w_z,
            w_zz: self.w_zz,
            pos: self.pos.clone(),
            calls: AtomicU64::new(self.calls.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> ContextModule<T> {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut ps = ParamSet::new();
        let w = cfg.enc_width;
        let d_in = cfg.obs_dim + cfg.act_dim;
        let dense_in = Linear::new(&mut ps, "enc.dense_in", d_in, w, true, rng);
        let ln1 = LayerNorm::new(&mut ps, "enc.ln1", w);
        let query = Linear::new(&mut ps, "enc.attn.q", w, w, false, rng);
        let key = Linear::new(&mut ps, "enc.attn.k", w, w, false, rng);
        let value = Linear::new(&mut ps, "enc.attn.v", w, w, false, rng);
        let attn_out = Linear::new(&mut ps, "enc.attn.out", w, w, true, rng);
        let ln2 = LayerNorm::new(&mut ps, "enc.ln2", w);
        let mlp1 = Linear::new(&mut ps, "enc.mlp.0", w, w, true, rng);
        let mlp2 = Linear::new(&mut ps, "enc.mlp.1", w, w, true, rng);
        let dense_out = Linear::new(&mut ps, "enc.dense_out", w, EMBED_DIM, true, rng);
        let fwd_in = cfg.obs_dim + cfg.act_dim + EMBED_DIM;
        let forward_model = Mlp::new(&mut ps, "fwd", &[fwd_in, cfg.fwd_hidden, cfg.fwd_hidden, cfg.obs_dim], 1.0, rng);
        let stoch = cfg.stoch();
        let w_z = ps.add("w_z", crate::nn::glorot(rng, stoch, EMBED_DIM));
        let w_zz = ps.add("w_zz", crate::nn::glorot(rng, EMBED_DIM, stoch));
        Self {
            cfg: cfg.clone(),
            params: ps,
            dense_in,
            ln1,
            query,
            key,
            value,
            attn_out,
            ln2,
            mlp1,
            mlp2,
            dense_out,
            forward_model,
            w_z,
            w_zz,
            pos: positional_table(cfg.window_rows(), w),
            calls: AtomicU64::new(0),
        }
    }

    /// Number of windows encoded since construction.
    pub fn encode_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn token_dim(&self) -> usize {
        self.cfg.obs_dim + self.cfg.act_dim
    }

    /// Encodes `n` stacked windows (`n * (K + 1)` rows) into `n x 8` embeddings.
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, tokens: Var, n: usize) -> Var {
        let s = self.cfg.window_rows();
        let w = self.cfg.enc_width;
        assert_eq!(g.shape(tokens), (n * s, self.token_dim()), "encoder token shape");
        self.calls.fetch_add(n as u64, Ordering::Relaxed);
        let x = self.dense_in.forward(g, p, tokens);
        let mut x0 = g.silu(x);
        if self.cfg.pos_encoding {
            let mut tiled = Vec::with_capacity(n * s * w);
            for _ in 0..n {
                tiled.extend_from_slice(self.pos.data());
            }
            let pe = g.constant(Matrix::from_vec(n * s, w, tiled));
            x0 = g.add(x0, pe);
        }
        let l1 = self.ln1.forward(g, p, x0);
        let keys = self.key.forward(g, p, l1);
        let vals = self.value.forward(g, p, l1);
        let scale = T::one() / T::of(w as f64).sqrt();
        let (q_src, resid) = match self.cfg.pooling {
            Pooling::Final => {
                let idx: Vec<usize> = (0..n).map(|i| i * s + s - 1).collect();
                (g.gather_rows(l1, &idx), g.gather_rows(x0, &idx))
            }
            Pooling::Mean => (l1, x0),
        };
        let q = self.query.forward(g, p, q_src);
        let scores = g.block_matmul_nt(q, keys, n);
        let scores = g.scale(scores, scale);
        let attn = g.group_softmax(scores, s);
        let mixed = g.block_matmul(attn, vals, n);
        let mixed = self.attn_out.forward(g, p, mixed);
        let a = g.add(resid, mixed);
        let l2 = self.ln2.forward(g, p, a);
        let m = self.mlp1.forward(g, p, l2);
        let m = g.silu(m);
        let m = self.mlp2.forward(g, p, m);
        let m = g.silu(m);
        let y = g.add(l2, m);
        let pooled = match self.cfg.pooling {
            Pooling::Final => y,
            Pooling::Mean => g.group_mean_rows(y, s),
        };
        self.dense_out.forward(g, p, pooled)
    }

    /// Gradient-free encoding of stacked window rows.
    pub fn encode_rows(&self, rows: Matrix<T>, n: usize) -> Matrix<T> {
        let mut g = Graph::no_grad();
        let p = self.params.bind(&mut g, false);
        let t = g.constant(rows);
        let z = self.encode(&mut g, &p, t, n);
        g.value_owned(z)
    }

    /// Encodes validated windows into 8-dimensional embeddings.
    pub fn encode_windows(&self, windows: &[TrajectoryWindow]) -> Result<Matrix<T>> {
        let s = self.cfg.window_rows();
        let d = self.token_dim();
        let mut rows = Vec::with_capacity(windows.len() * s * d);
        for w in windows {
            if w.obs.len() != s || w.act.len() != self.cfg.window {
                return Err(DaliError::Shape(format!(
                    "window has {} observations / {} actions, expected {} / {}",
                    w.obs.len(),
                    w.act.len(),
                    s,
                    self.cfg.window
                )));
            }
            if w.obs.iter().any(|o| o.len() != self.cfg.obs_dim) || w.act.iter().any(|a| a.len() != self.cfg.act_dim) {
                return Err(DaliError::Shape("window row width does not match the configured dimensions".into()));
            }
            let tok = w.tokens::<T>();
            if !tok.is_finite() {
                return Err(DaliError::NonFinite("context window".into()));
            }
            rows.extend_from_slice(tok.data());
        }
        Ok(self.encode_rows(Matrix::from_vec(windows.len() * s, d, rows), windows.len()))
    }

    /// Forward model `f(o_t, a_t, 𝔷_t)` predicting `o_{t+1}`.
    pub fn predict(&self, g: &mut Graph<T>, p: &Bound, obs: Var, act: Var, embed: Var) -> Var {
        let x = g.concat_cols(&[obs, act, embed]);
        self.forward_model.forward(g, p, x)
    }

    /// Mean over rows of `‖target − f(o, a, 𝔷)‖²`.
    pub fn loss_fd(&self, g: &mut Graph<T>, p: &Bound, obs: Var, act: Var, embed: Var, target: Var) -> Var {
        let pred = self.predict(g, p, obs, act, embed);
        squared_error_mean(g, pred, target)
    }

    /// Mean over rows of `‖z − W_z 𝔷‖² + ‖𝔷 − W_𝔷 z‖²`; `z` is detached here.
    pub fn loss_cross(&self, g: &mut Graph<T>, p: &Bound, embed: Var, z: Var) -> Var {
        let z = g.detach(z);
        let z_hat = g.matmul_nt(embed, p.var(self.w_z));
        let e_hat = g.matmul_nt(z, p.var(self.w_zz));
        let a = squared_error_mean(g, z_hat, z);
        let b = squared_error_mean(g, e_hat, embed);
        g.add(a, b)
    }

    /// `L_FD + λ · L_cross` with `λ ∈ {0, 1}`; with `λ = 0` the forward loss node is returned as is.
    pub fn loss_total(&self, g: &mut Graph<T>, fd: Var, cross: Option<Var>, lambda_cross: f64) -> Result<Var> {
        check_lambda(lambda_cross)?;
        Ok(match cross {
            Some(c) if lambda_cross == 1.0 => g.add(fd, c),
            _ => fd,
        })
    }
}

/// Rejects any `λ_cross` outside `{0, 1}`.
pub fn check_lambda(lambda: f64) -> Result<()> {
    if lambda == 0.0 || lambda == 1.0 {
        Ok(())
    } else {
        Err(DaliError::config("model.lambda_cross", format!("must be 0 or 1, got {lambda}")))
    }
}

/// Mean over rows of the squared Euclidean distance.
pub fn squared_error_mean<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Var {
    let n = g.shape(pred).0;
    let d = g.sub(pred, target);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, T::one() / T::of(n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig { enc_width: 8, fwd_hidden: 6, window: 3, ..ModelConfig::default() }
    }

    #[test]
    fn full_padding_at_first_step() {
        let w = pad_window(&[vec![1.0, 2.0]], &[], 3, 1).unwrap();
        assert_eq!(w.obs, vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 2.0]]);
        assert_eq!(w.act, vec![vec![0.0]; 3]);
        assert_eq!(w.valid, 1);
    }

    #[test]
    fn exact_window_at_boundary() {
        let obs: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let act: Vec<Vec<f64>> = (0..3).map(|i| vec![10.0 + i as f64]).collect();
        let w = pad_window(&obs, &act, 3, 1).unwrap();
        assert_eq!(w.obs, obs);
        assert_eq!(w.act, act);
        assert_eq!(w.valid, 4);
    }

    #[test]
    fn long_history_keeps_most_recent() {
        let k = 3;
        let t = k + 5;
        let obs: Vec<Vec<f64>> = (1..=t).map(|i| vec![i as f64]).collect();
        let act: Vec<Vec<f64>> = (1..t).map(|i| vec![100.0 + i as f64]).collect();
        let w = pad_window(&obs, &act, k, 1).unwrap();
        let expect_obs: Vec<Vec<f64>> = (t - k..=t).map(|i| vec![i as f64]).collect();
        let expect_act: Vec<Vec<f64>> = (t - k..t).map(|i| vec![100.0 + i as f64]).collect();
        assert_eq!(w.obs, expect_obs);
        assert_eq!(w.act, expect_act);
    }

    #[test]
    fn empty_history_is_an_error() {
        assert!(pad_window(&[], &[], 3, 1).is_err());
    }

    #[test]
    fn episode_rows_match_pad_window() {
        let d_o = 2;
        let obs: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let act: Vec<f64> = (0..10).map(|i| -(i as f64)).collect();
        for t in 0..10 {
            let ob: Vec<Vec<f64>> = (0..=t).map(|i| obs[i * d_o..(i + 1) * d_o].to_vec()).collect();
            let ac: Vec<Vec<f64>> = (0..t).map(|i| vec![act[i]]).collect();
            let w = pad_window(&ob, &ac, 3, 1).unwrap();
            let mut rows = Vec::new();
            episode_window_rows::<f64>(&obs, &act, d_o, 1, t, 3, &mut rows);
            assert_eq!(rows, w.tokens::<f64>().into_vec());
        }
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ContextModule::<f64>::new(&cfg, &mut rng);
        let obs: Vec<Vec<f64>> = (0..4).map(|i| vec![0.1 * i as f64; 4]).collect();
        let act = vec![vec![0.5]; 3];
        let w = pad_window(&obs, &act, 3, 1).unwrap();
        let a = m.encode_windows(&[w.clone(), w.clone()]).unwrap();
        assert_eq!(a.shape(), (2, 8));
        assert_eq!(a.row(0), a.row(1));
        assert_eq!(m.encode_calls(), 2);
    }

    #[test]
    fn wrong_window_shape_rejected() {
        let cfg = small_cfg();
        let m = ContextModule::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let w = pad_window(&[vec![0.0; 4]], &[], 5, 1).unwrap();
        assert!(m.encode_windows(&[w]).is_err());
        let bad = pad_window(&[vec![f64::NAN; 4]], &[], 3, 1).unwrap();
        assert!(matches!(m.encode_windows(&[bad]), Err(DaliError::NonFinite(_))));
    }

    #[test]
    fn zero_final_layer_predicts_zero() {
        let cfg = small_cfg();
        let mut m = ContextModule::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let last = m.forward_model.last().clone();
        m.params.get_mut(last.w).scale_assign(0.0);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let o = g.constant(Matrix::filled(3, 4, 0.7));
        let a = g.constant(Matrix::filled(3, 1, -0.2));
        let e = g.constant(Matrix::filled(3, 8, 0.3));
        let y = m.predict(&mut g, &p, o, a, e);
        assert_eq!(g.shape(y), (3, 4));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_must_be_zero_or_one() {
        assert!(check_lambda(0.0).is_ok());
        assert!(check_lambda(1.0).is_ok());
        assert!(check_lambda(0.5).is_err());
    }
}
