//! How much context information a representation carries, measured by
//! decodability: ridge probes from frozen-model states to the true context,
//! and the held-out error of decoding a binned context from raw windows of
//! growing length under a uniform random policy.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::classifiers::{ClassifierConfig, MlpClassifier};
use crate::context_encoder::episode_window_rows;
use crate::envs::{Context, ContextSpace, Env, EnvConfig, EnvId, VariationMode};
use crate::error::{DaliError, Result};
use crate::evaluation::{quantile_sorted, Interval};
use crate::replay::Episode;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// State probed for context information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// The encoder's window embedding.
    CtxEmbedding,
    /// The world model's deterministic state.
    RecurrentState,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::CtxEmbedding => "ctx_embedding",
            Representation::RecurrentState => "recurrent_state",
        })
    }
}

impl FromStr for Representation {
    type Err = DaliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctx_embedding" => Ok(Representation::CtxEmbedding),
            "recurrent_state" => Ok(Representation::RecurrentState),
            _ => Err(DaliError::Invalid(format!("unknown representation `{s}` (ctx_embedding | recurrent_state)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// First probed step; also the encoder window when probing embeddings.
    pub window: usize,
    /// Probe every `stride`-th step from `window` on.
    pub stride: usize,
    /// Fraction of episodes held out.
    pub holdout: f64,
    pub ridge: f64,
    /// Bins per context dimension for the discretised accuracy.
    pub bins: usize,
    pub min_episodes: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { window: 32, stride: 5, holdout: 0.3, ridge: 1.0, bins: 4, min_episodes: 100, seed: 0 }
    }
}

/// Probe results for one representation of one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub representation: Representation,
    pub variant: String,
    pub seed: u64,
    /// Environment steps the probed model was trained for.
    pub train_steps: usize,
    pub window: usize,
    pub dims: Vec<String>,
    /// Held-out R² per context dimension; `None` where the context is constant.
    pub r2: Vec<Option<f64>>,
    pub train_r2: Vec<Option<f64>>,
    /// Held-out accuracy of the binned prediction against the binned truth.
    pub accuracy: Vec<Option<f64>>,
    pub n_train: usize,
    pub n_test: usize,
}

impl ProbeReport {
    /// Mean held-out R² over the varied dimensions.
    pub fn mean_r2(&self) -> Option<f64> {
        let v: Vec<f64> = self.r2.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Labels a probe report with the run it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunTag {
    pub variant: String,
    pub seed: u64,
    pub train_steps: usize,
}

/// Posterior-filters every episode with mode latents and returns, per
/// episode, the recurrent states and (if the agent has an encoder) the
/// window embeddings at every step.
#[allow(clippy::type_complexity)]
pub fn filter_episodes<T: Scalar>(
    agent: &Agent<T>,
    episodes: &[Episode],
) -> Result<Vec<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)>> {
    let cfg = &agent.cfg;
    let mut out = vec![(Vec::new(), None); episodes.len()];
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, ep) in episodes.iter().enumerate() {
        by_len.entry(ep.len()).or_default().push(i);
    }
    for (len, ids) in by_len {
        let n = ids.len();
        let mut latent = agent.wm.initial_latent(n);
        let mut prev_action = Matrix::zeros(n, cfg.act_dim);
        let mut hs = vec![Vec::with_capacity(len); n];
        let mut zs = vec![Vec::with_capacity(len); n];
        for t in 0..len {
            let ctx = match (&agent.context, agent.variant.uses_ground_truth()) {
                (Some(enc), _) => {
                    let mut rows = Vec::with_capacity(n * cfg.window_rows() * enc.token_dim());
                    for &i in &ids {
                        let ep = &episodes[i];
                        episode_window_rows(&ep.obs, &ep.act, cfg.obs_dim, cfg.act_dim, t, cfg.window, &mut rows);
                    }
                    Some(enc.encode_rows(Matrix::from_vec(n * cfg.window_rows(), enc.token_dim(), rows), n))
                }
                (None, true) => {
                    let mut m = Matrix::zeros(n, cfg.ctx_dim);
                    for (r, &i) in ids.iter().enumerate() {
                        m.row_mut(r).copy_from_slice(agent.ground_truth(&episodes[i].context).data());
                    }
                    Some(m)
                }
                (None, false) => None,
            };
            let obs = Matrix::from_fn(n, cfg.obs_dim, |r, c| T::of(episodes[ids[r]].obs_at(t)[c]));
            latent = agent.wm.observe_step::<ChaCha8Rng>(&latent, &prev_action, &obs, ctx.as_ref(), None)?;
            prev_action = Matrix::from_fn(n, cfg.act_dim, |r, c| T::of(episodes[ids[r]].act_at(t)[c]));
            for r in 0..n {
                hs[r].push(latent.h.row(r).iter().map(|v| v.f64()).collect());
                if agent.context.is_some() {
                    let c = ctx.as_ref().expect("encoder context");
                    zs[r].push(c.row(r).iter().map(|v| v.f64()).collect());
                }
            }
        }
        for (r, &i) in ids.iter().enumerate() {
            let emb = agent.context.is_some().then(|| std::mem::take(&mut zs[r]));
            out[i] = (std::mem::take(&mut hs[r]), emb);
        }
    }
    Ok(out)
}

/// Ridge regression with standardised inputs and an unpenalised intercept.
#[derive(Clone, Debug)]
pub struct RidgeProbe {
    mean: DVector<f64>,
    scale: DVector<f64>,
    beta: DMatrix<f64>,
    intercept: DVector<f64>,
}

impl RidgeProbe {
    pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || y.nrows() != n {
            return Err(DaliError::Shape(format!("{n} inputs for {} targets", y.nrows())));
        }
        if lambda.is_nan() || lambda <= 0.0 {
            return Err(DaliError::Invalid("ridge penalty must be positive".into()));
        }
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let scale = DVector::from_fn(d, |j, _| {
            let sd = (x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        });
        let xs = DMatrix::from_fn(n, d, |i, j| (x[(i, j)] - mean[j]) / scale[j]);
        let intercept = DVector::from_fn(y.ncols(), |k, _| y.column(k).mean());
        let yc = DMatrix::from_fn(n, y.ncols(), |i, k| y[(i, k)] - intercept[k]);
        let mut gram = xs.transpose() * &xs;
        for j in 0..d {
            gram[(j, j)] += lambda;
        }
        let rhs = xs.transpose() * yc;
        let chol = gram.cholesky().ok_or_else(|| DaliError::NonFinite("ridge normal equations".into()))?;
        Ok(Self { mean, scale, beta: chol.solve(&rhs), intercept })
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let xs = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j]);
        let mut p = xs * &self.beta;
        for mut row in p.row_iter_mut() {
            row += self.intercept.transpose();
        }
        p
    }
}

/// Coefficient of determination of `pred` against `truth`; `None` for a
/// constant target.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Option<f64> {
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if sst <= 1e-12 * n.max(1.0) {
        return None;
    }
    let sse: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    Some(1.0 - sse / sst)
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((u * bins as f64) as usize).min(bins - 1)
}

/// Per-context-dimension probe scores; `None` where the dimension is constant.
#[derive(Clone, Debug)]
pub struct FeatureProbe {
    pub r2: Vec<Option<f64>>,
    pub train_r2: Vec<Option<f64>>,
    pub accuracy: Vec<Option<f64>>,
    pub n_train: usize,
    pub n_test: usize,
}

/// Probes features against contexts with an episode-level split. `groups`
/// gives the episode of every row.
pub fn probe_features(
    x: &DMatrix<f64>,
    c: &DMatrix<f64>,
    groups: &[usize],
    cfg: &ProbeConfig,
) -> Result<FeatureProbe> {
    if cfg.bins < 2 {
        return Err(DaliError::Invalid("need at least two bins".into()));
    }
    if !(0.0 < cfg.holdout && cfg.holdout < 1.0) {
        return Err(DaliError::Invalid("holdout fraction must lie in (0, 1)".into()));
    }
    let n_groups = groups.iter().max().map_or(0, |&g| g + 1);
    let mut order: Vec<usize> = (0..n_groups).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_test_groups = ((n_groups as f64 * cfg.holdout).round() as usize).clamp(1, n_groups.saturating_sub(1).max(1));
    let mut is_test = vec![false; n_groups];
    for &g in &order[..n_test_groups] {
        is_test[g] = true;
    }
    let train: Vec<usize> = (0..groups.len()).filter(|&i| !is_test[groups[i]]).collect();
    let test: Vec<usize> = (0..groups.len()).filter(|&i| is_test[groups[i]]).collect();
    if train.is_empty() || test.is_empty() {
        return Err(DaliError::Invalid("probe split left an empty side".into()));
    }
    let rows = |m: &DMatrix<f64>, idx: &[usize]| DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)]);
    let (xtr, xte, ctr, cte) = (rows(x, &train), rows(x, &test), rows(c, &train), rows(c, &test));
    let varied: Vec<bool> = (0..c.ncols())
        .map(|k| {
            let col = c.column(k);
            col.max() - col.min() > 1e-12
        })
        .collect();
    if !varied.iter().any(|&v| v) {
        return Err(DaliError::Invalid("context is constant across the probed episodes".into()));
    }
    let probe = RidgeProbe::fit(&xtr, &ctr, cfg.ridge)?;
    let (ptr, pte) = (probe.predict(&xtr), probe.predict(&xte));
    let mut r2 = Vec::new();
    let mut train_r2 = Vec::new();
    let mut acc = Vec::new();
    for k in 0..c.ncols() {
        if !varied[k] {
            r2.push(None);
            train_r2.push(None);
            acc.push(None);
            continue;
        }
        let col = |m: &DMatrix<f64>| m.column(k).iter().copied().collect::<Vec<f64>>();
        r2.push(r_squared(&col(&cte), &col(&pte)));
        train_r2.push(r_squared(&col(&ctr), &col(&ptr)));
        let (lo, hi) = (ctr.column(k).min(), ctr.column(k).max());
        let hits = (0..cte.nrows())
            .filter(|&i| bin_of(cte[(i, k)], lo, hi, cfg.bins) == bin_of(pte[(i, k)], lo, hi, cfg.bins))
            .count();
        acc.push(Some(hits as f64 / cte.nrows() as f64));
    }
    Ok(FeatureProbe { r2, train_r2, accuracy: acc, n_train: train.len(), n_test: test.len() })
}

/// Held-out ridge-probe R² of the true context from one representation of
/// a frozen agent, extracted at steps `t >= window`.
pub fn fit_context_probe<T: Scalar>(
    agent: &Agent<T>,
    episodes: &[Episode],
    representation: Representation,
    tag: &RunTag,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if episodes.len() < cfg.min_episodes {
        return Err(DaliError::Invalid(format!(
            "probing needs at least {} episodes, got {}",
            cfg.min_episodes,
            episodes.len()
        )));
    }
    if representation == Representation::CtxEmbedding && agent.context.is_none() {
        return Err(DaliError::Wiring(format!("{} has no context embedding to probe", agent.variant)));
    }
    if cfg.stride == 0 {
        return Err(DaliError::Invalid("probe stride must be positive".into()));
    }
    let filtered = filter_episodes(agent, episodes)?;
    let mut feats = Vec::new();
    let mut ctxs = Vec::new();
    let mut groups = Vec::new();
    for (e, ((hs, zs), ep)) in filtered.iter().zip(episodes).enumerate() {
        let src = match representation {
            Representation::RecurrentState => hs,
            Representation::CtxEmbedding => zs.as_ref().expect("encoder embeddings"),
        };
        for t in (cfg.window..ep.len()).step_by(cfg.stride) {
            feats.push(src[t].clone());
            ctxs.push(ep.context.clone());
            groups.push(e);
        }
    }
    if feats.is_empty() {
        return Err(DaliError::Invalid(format!("no episode reaches step {}", cfg.window)));
    }
    let x = crate::classifiers::rows_to_matrix(&feats);
    let c = crate::classifiers::rows_to_matrix(&ctxs);
    let FeatureProbe { r2, train_r2, accuracy, n_train, n_test } = probe_features(&x, &c, &groups, cfg)?;
    Ok(ProbeReport {
        representation,
        variant: tag.variant.clone(),
        seed: tag.seed,
        train_steps: tag.train_steps,
        window: cfg.window,
        dims: agent.space.names(),
        r2,
        train_r2,
        accuracy,
        n_train,
        n_test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    pub kgrid: Vec<usize>,
    pub bins: usize,
    /// Context dimension that is binned.
    pub dim: usize,
    pub episodes_per_bin: usize,
    pub windows_per_episode: usize,
    pub holdout: f64,
    pub episode_len: usize,
    pub sigma: f64,
    pub classifier: ClassifierConfig,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            kgrid: vec![1, 2, 4, 8, 16, 32],
            bins: 4,
            dim: 0,
            episodes_per_bin: 40,
            windows_per_episode: 4,
            holdout: 0.3,
            episode_len: 100,
            sigma: 0.01,
            classifier: ClassifierConfig { mlp_epochs: 200, ..ClassifierConfig::default() },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub k: usize,
    pub error: f64,
}

/// Held-out context-decoding error against window length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub points: Vec<DecayPoint>,
    /// Misclassification rate of always guessing one class.
    pub chance: f64,
    /// Fitted rate of `log e_K ≈ log C − λ K`; `None` with fewer than two
    /// unsaturated points.
    pub lambda: Option<f64>,
    pub log_c: Option<f64>,
}

impl DecayCurve {
    pub fn spearman(&self) -> Option<f64> {
        let k: Vec<f64> = self.points.iter().map(|p| p.k as f64).collect();
        let e: Vec<f64> = self.points.iter().map(|p| p.error).collect();
        spearman(&k, &e)
    }
}

/// Least-squares fit of `log e = log C − λ K` over points strictly between
/// zero and `chance`. Returns `(λ, log C)`.
pub fn fit_decay(points: &[DecayPoint], chance: f64) -> Option<(f64, f64)> {
    let used: Vec<(f64, f64)> =
        points.iter().filter(|p| p.error > 0.0 && p.error < chance).map(|p| (p.k as f64, p.error.ln())).collect();
    if used.len() < 2 {
        return None;
    }
    let n = used.len() as f64;
    let mx = used.iter().map(|p| p.0).sum::<f64>() / n;
    let my = used.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = used.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    Some((-slope, my - slope * mx))
}

/// Average ranks, ties sharing the mean rank (1-based).
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Contexts stratified over `bins` equal-width bins of dimension `dim`'s
/// training range; the other dimensions follow `mode`. Returns
/// `(context, bin)` pairs, `per_bin` per bin.
pub fn binned_contexts(
    space: &ContextSpace,
    mode: VariationMode,
    dim: usize,
    bins: usize,
    per_bin: usize,
    seed: u64,
) -> Result<Vec<(Context, usize)>> {
    if bins < 4 {
        return Err(DaliError::Invalid(format!("decay curves need at least 4 context bins, got {bins}")));
    }
    if dim >= space.dim() {
        return Err(DaliError::Invalid(format!("context dimension {dim} outside 0..{}", space.dim())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let varied = mode.varied(space.dim());
    let (lo, hi) = space.dims[dim].train;
    let width = (hi - lo) / bins as f64;
    let mut out = Vec::with_capacity(bins * per_bin);
    for b in 0..bins {
        for _ in 0..per_bin {
            let values = space
                .dims
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    if i == dim {
                        lo + width * (b as f64 + rng.gen::<f64>())
                    } else if varied.contains(&i) {
                        d.sample_train(&mut rng)
                    } else {
                        d.default
                    }
                })
                .collect();
            out.push((Context::new(space.names(), values), b));
        }
    }
    Ok(out)
}

/// One uniform-random-policy episode per labelled context.
pub fn random_episodes(
    env: EnvId,
    contexts: &[(Context, usize)],
    cfg: EnvConfig,
    seed: u64,
) -> Result<Vec<(Episode, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    contexts
        .iter()
        .map(|(c, label)| {
            let mut e = Env::new(env, c, rng.gen(), cfg)?;
            let mut ep = Episode::new(e.obs_dim(), e.act_dim(), c.values.clone());
            let mut o = e.reset();
            loop {
                let a: Vec<f64> = (0..e.act_dim()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let r = e.step(&a)?;
                ep.push(&o, &a, 0.0, false);
                o = r.obs;
                if r.done {
                    ep.push(&o, &vec![0.0; e.act_dim()], r.reward, true);
                    break;
                }
            }
            Ok((ep, *label))
        })
        .collect()
}

/// Flattened `[o_{t-k}, a_{t-k}, …, o_{t-1}, a_{t-1}, o_t]`: `k` transitions.
fn raw_window(ep: &Episode, t: usize, k: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(k * (ep.obs_dim + ep.act_dim) + ep.obs_dim);
    for tau in t - k..t {
        v.extend_from_slice(ep.obs_at(tau));
        v.extend_from_slice(ep.act_at(tau));
    }
    v.extend_from_slice(ep.obs_at(t));
    v
}

fn standardize_with(train: &mut DMatrix<f64>, test: &mut DMatrix<f64>) {
    let n = train.nrows() as f64;
    for j in 0..train.ncols() {
        let mean = train.column(j).sum() / n;
        let sd = (train.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let s = if sd > 1e-12 { sd } else { 1.0 };
        for m in [&mut *train, &mut *test] {
            for v in m.column_mut(j).iter_mut() {
                *v = (*v - mean) / s;
            }
        }
    }
}

/// What the window classifier sees.
#[derive(Clone, Copy, Debug)]
pub enum WindowFeatures<'a, T> {
    /// The flattened window itself.
    Raw,
    /// Per-transition evidence: one classifier on single transitions
    /// `(o_{τ-1}, a_{τ-1}, o_τ)`, trained on every transition inside the
    /// training windows, with log-probabilities summed over the window.
    Pooled,
    /// The frozen encoder's embedding of the window, earlier steps zeroed.
    Encoder(&'a Agent<T>),
}

fn window_matrix<T: Scalar>(
    features: WindowFeatures<'_, T>,
    episodes: &[(Episode, usize)],
    set: &[(usize, usize)],
    k: usize,
) -> Result<DMatrix<f64>> {
    match features {
        WindowFeatures::Raw | WindowFeatures::Pooled => {
            let rows: Vec<Vec<f64>> = set.iter().map(|&(e, t)| raw_window(&episodes[e].0, t, k)).collect();
            Ok(crate::classifiers::rows_to_matrix(&rows))
        }
        WindowFeatures::Encoder(agent) => {
            let enc = agent.encoder()?;
            let cfg = &agent.cfg;
            if k > cfg.window {
                return Err(DaliError::Invalid(format!("K = {k} exceeds the encoder window {}", cfg.window)));
            }
            let (d_o, d_a) = (cfg.obs_dim, cfg.act_dim);
            let mut rows = Vec::with_capacity(set.len() * cfg.window_rows() * enc.token_dim());
            for &(e, t) in set {
                let ep = &episodes[e].0;
                let obs = &ep.obs[(t - k) * d_o..(t + 1) * d_o];
                let act = &ep.act[(t - k) * d_a..(t + 1) * d_a];
                episode_window_rows(obs, act, d_o, d_a, k, cfg.window, &mut rows);
            }
            let emb = enc.encode_rows(Matrix::<T>::from_vec(set.len() * cfg.window_rows(), enc.token_dim(), rows), set.len());
            Ok(DMatrix::from_fn(set.len(), emb.cols(), |i, j| emb.get(i, j).f64()))
        }
    }
}

/// Transitions ending at `t - k + 1 ..= t` of every window.
fn transitions(episodes: &[(Episode, usize)], set: &[(usize, usize)], k: usize) -> Vec<Vec<f64>> {
    set.iter().flat_map(|&(e, t)| (t + 1 - k..=t).map(move |tau| raw_window(&episodes[e].0, tau, 1))).collect()
}

#[allow(clippy::too_many_arguments)]
fn pooled_predictions(
    episodes: &[(Episode, usize)],
    train: &[(usize, usize)],
    ytr: &[usize],
    test: &[(usize, usize)],
    k: usize,
    classes: usize,
    cfg: &DecayConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut xtr = crate::classifiers::rows_to_matrix(&transitions(episodes, train, k));
    let mut xte = crate::classifiers::rows_to_matrix(&transitions(episodes, test, k));
    let labels: Vec<usize> = ytr.iter().flat_map(|&y| std::iter::repeat_n(y, k)).collect();
    standardize_with(&mut xtr, &mut xte);
    let proba = MlpClassifier::fit(&xtr, &labels, classes, &cfg.classifier, rng)?.predict_proba(&xte);
    Ok((0..test.len())
        .map(|w| {
            let score = |c: usize| (w * k..(w + 1) * k).map(|r| proba[(r, c)].max(1e-12).ln()).sum::<f64>();
            (0..classes).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap_or(0)
        })
        .collect())
}

/// Decoding error of the binned context from windows of every length in
/// the grid. Episodes are split into train and held-out sets once; all
/// window lengths share the same end steps, so only the window length
/// changes along the curve.
pub fn decay_curve_from_episodes<T: Scalar>(
    episodes: &[(Episode, usize)],
    classes: usize,
    features: WindowFeatures<'_, T>,
    cfg: &DecayConfig,
    seed: u64,
) -> Result<DecayCurve> {
    if cfg.kgrid.is_empty() || cfg.kgrid.windows(2).any(|w| w[0] >= w[1]) || cfg.kgrid[0] == 0 {
        return Err(DaliError::Invalid("window grid must be positive and strictly increasing".into()));
    }
    let kmax = *cfg.kgrid.last().expect("non-empty grid");
    let min_len = episodes.iter().map(|(e, _)| e.len()).min().unwrap_or(0);
    if min_len <= kmax {
        return Err(DaliError::Invalid(format!("episodes of {min_len} records are too short for K = {kmax}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.shuffle(&mut rng);
    let n_test = ((episodes.len() as f64 * cfg.holdout).round() as usize).clamp(1, episodes.len() - 1);
    let (test_eps, train_eps) = order.split_at(n_test);
    let ends = |ids: &[usize], rng: &mut ChaCha8Rng| -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for &e in ids {
            for _ in 0..cfg.windows_per_episode {
                v.push((e, rng.gen_range(kmax..episodes[e].0.len())));
            }
        }
        v
    };
    let train_ends = ends(train_eps, &mut rng);
    let test_ends = ends(test_eps, &mut rng);
    for (name, set) in [("train", &train_ends), ("held-out", &test_ends)] {
        let first = episodes[set[0].0].1;
        if set.iter().all(|&(e, _)| episodes[e].1 == first) {
            return Err(DaliError::Invalid(format!("{name} windows contain a single context class")));
        }
    }
    let ytr: Vec<usize> = train_ends.iter().map(|&(e, _)| episodes[e].1).collect();
    let yte: Vec<usize> = test_ends.iter().map(|&(e, _)| episodes[e].1).collect();
    let mut counts = vec![0usize; classes];
    for &y in &ytr {
        counts[y] += 1;
    }
    let majority = counts.iter().copied().max().unwrap_or(0) as f64 / ytr.len() as f64;
    let mut points = Vec::with_capacity(cfg.kgrid.len());
    for &k in &cfg.kgrid {
        let mut fit_rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9));
        let predicted = if let WindowFeatures::Pooled = features {
            pooled_predictions(episodes, &train_ends, &ytr, &test_ends, k, classes, cfg, &mut fit_rng)?
        } else {
            let mut xtr = window_matrix(features, episodes, &train_ends, k)?;
            let mut xte = window_matrix(features, episodes, &test_ends, k)?;
            standardize_with(&mut xtr, &mut xte);
            MlpClassifier::fit(&xtr, &ytr, classes, &cfg.classifier, &mut fit_rng)?.predict(&xte)
        };
        let wrong = predicted.iter().zip(&yte).filter(|(p, y)| p != y).count();
        points.push(DecayPoint { k, error: wrong as f64 / yte.len() as f64 });
    }
    let chance = 1.0 - majority;
    let fit = fit_decay(&points, chance);
    Ok(DecayCurve { points, chance, lambda: fit.map(|f| f.0), log_c: fit.map(|f| f.1) })
}

/// Decay curve on fresh uniform-random-policy episodes with dimension
/// `cfg.dim` of the context binned into `cfg.bins` classes.
pub fn entropy_decay_curve<T: Scalar>(
    env: EnvId,
    mode: VariationMode,
    features: WindowFeatures<'_, T>,
    cfg: &DecayConfig,
    seed: u64,
) -> Result<DecayCurve> {
    let contexts = binned_contexts(&env.space(), mode, cfg.dim, cfg.bins, cfg.episodes_per_bin, seed)?;
    let env_cfg = EnvConfig { sigma: cfg.sigma, horizon: cfg.episode_len };
    let episodes = random_episodes(env, &contexts, env_cfg, seed.wrapping_add(1))?;
    decay_curve_from_episodes(&episodes, cfg.bins, features, cfg, seed.wrapping_add(2))
}

/// Exact two-sided binomial sign test with ties dropped.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    // log C(n, i) accumulated to stay finite for large n
    let mut log_c = 0.0f64;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (log_c - n as f64 * std::f64::consts::LN_2).exp();
    }
    (2.0 * tail).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub candidate: f64,
    pub reference: f64,
    pub difference: f64,
}

/// Paired per-seed comparison of mean probe R² between two representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InformationComparison {
    pub candidate: String,
    pub reference: String,
    pub rows: Vec<ComparisonRow>,
    pub wins: usize,
    pub losses: usize,
    pub sign_p: f64,
    pub median_candidate: f64,
    pub median_reference: f64,
    /// Percentile bootstrap interval of the mean difference over seeds.
    pub mean_difference: f64,
    pub difference_ci: Interval,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

fn label(r: &ProbeReport) -> String {
    format!("{}:{}", r.variant, r.representation)
}

/// Compares `(candidate, reference)` reports seed by seed. Both reports of
/// a pair must come from the same seed and training budget.
pub fn compare_information(pairs: &[(ProbeReport, ProbeReport)], n_boot: usize, seed: u64) -> Result<InformationComparison> {
    let (first_c, first_r) = pairs.first().ok_or_else(|| DaliError::Invalid("no probe reports to compare".into()))?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (c, r) in pairs {
        if c.train_steps != r.train_steps {
            return Err(DaliError::Invalid(format!(
                "mismatched budgets: {} trained {} steps, {} trained {}",
                label(c),
                c.train_steps,
                label(r),
                r.train_steps
            )));
        }
        if c.seed != r.seed {
            return Err(DaliError::Invalid(format!("mismatched seeds {} and {}", c.seed, r.seed)));
        }
        let cand = c.mean_r2().ok_or_else(|| DaliError::Invalid("candidate report has no varied dimension".into()))?;
        let refr = r.mean_r2().ok_or_else(|| DaliError::Invalid("reference report has no varied dimension".into()))?;
        rows.push(ComparisonRow { seed: c.seed, candidate: cand, reference: refr, difference: cand - refr });
    }
    let wins = rows.iter().filter(|r| r.difference > 0.0).count();
    let losses = rows.iter().filter(|r| r.difference < 0.0).count();
    let diffs: Vec<f64> = rows.iter().map(|r| r.difference).collect();
    let mean_difference = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boots: Vec<f64> = (0..n_boot.max(1))
        .map(|_| (0..diffs.len()).map(|_| diffs[rng.gen_range(0..diffs.len())]).sum::<f64>() / diffs.len() as f64)
        .collect();
    boots.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&boots, 0.025);
    let hi = quantile_sorted(&boots, 0.975);
    Ok(InformationComparison {
        candidate: label(first_c),
        reference: label(first_r),
        median_candidate: median(&rows.iter().map(|r| r.candidate).collect::<Vec<_>>()),
        median_reference: median(&rows.iter().map(|r| r.reference).collect::<Vec<_>>()),
        rows,
        wins,
        losses,
        sign_p: sign_test(wins, losses),
        mean_difference,
        difference_ci: Interval { lo, hi, degenerate: diffs.len() < 2 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        Distribution::<f64>::sample(&StandardNormal, rng)
    }

    fn contexts(n_eps: usize, per: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut groups = Vec::new();
        for e in 0..n_eps {
            let c = [rng.gen_range(4.9..14.7), rng.gen_range(0.15..0.45)];
            for _ in 0..per {
                rows.push(c.to_vec());
                groups.push(e);
            }
        }
        (crate::classifiers::rows_to_matrix(&rows), groups)
    }

    #[test]
    fn identity_representation_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, groups) = contexts(120, 3, &mut rng);
        let cfg = ProbeConfig { ridge: 1e-8, ..ProbeConfig::default() };
        let FeatureProbe { r2, accuracy: acc, .. } = probe_features(&c, &c, &groups, &cfg).unwrap();
        for v in r2.iter().flatten() {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
        for a in acc.iter().flatten() {
            assert!(*a > 0.97, "{a}");
        }
    }

    #[test]
    fn noise_representation_carries_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, groups) = contexts(150, 5, &mut rng);
        let x = DMatrix::from_fn(c.nrows(), 16, |_, _| gauss(&mut rng));
        let FeatureProbe { r2, train_r2, .. } = probe_features(&x, &c, &groups, &ProbeConfig::default()).unwrap();
        for (te, tr) in r2.iter().flatten().zip(train_r2.iter().flatten()) {
            assert!(*te <= 0.05, "held-out R² {te}");
            assert!(tr >= te);
        }
    }

    #[test]
    fn constant_context_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = DMatrix::from_element(300, 2, 1.0);
        let x = DMatrix::from_fn(300, 3, |_, _| gauss(&mut rng));
        let groups: Vec<usize> = (0..300).map(|i| i / 3).collect();
        assert!(probe_features(&x, &c, &groups, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn constant_dimension_reports_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut c, groups) = contexts(100, 2, &mut rng);
        c.column_mut(1).fill(0.3);
        let FeatureProbe { r2, accuracy: acc, .. } = probe_features(&c.clone(), &c, &groups, &ProbeConfig::default()).unwrap();
        assert!(r2[0].is_some() && r2[1].is_none() && acc[1].is_none());
    }

    #[test]
    fn decay_fit_recovers_known_rate() {
        let ks = [1, 2, 4, 8, 16, 32];
        let points: Vec<DecayPoint> = ks.iter().map(|&k| DecayPoint { k, error: 0.5 * (-0.1 * k as f64).exp() }).collect();
        let (lambda, log_c) = fit_decay(&points, 0.75).unwrap();
        assert!((lambda - 0.1).abs() < 0.02, "{lambda}");
        assert!((log_c - 0.5f64.ln()).abs() < 1e-9);
        // saturated points are ignored
        let mut sat = points.clone();
        sat.push(DecayPoint { k: 64, error: 0.0 });
        sat.insert(0, DecayPoint { k: 0, error: 0.75 });
        assert!((fit_decay(&sat, 0.75).unwrap().0 - 0.1).abs() < 1e-9);
        assert!(fit_decay(&points[..1], 0.75).is_none());
    }

    #[test]
    fn spearman_and_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[9.0, 5.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0], &[4.0, 4.0]).is_none());
    }

    #[test]
    fn sign_test_matches_binomial_tail() {
        assert!((sign_test(10, 0) - 2.0 / 1024.0).abs() < 1e-15);
        assert!((sign_test(5, 5) - 1.0).abs() < 1e-12);
        // 2·P(X <= 2), X ~ Bin(10, 1/2) = 2·56/1024
        assert!((sign_test(8, 2) - 112.0 / 1024.0).abs() < 1e-12);
        assert_eq!(sign_test(0, 0), 1.0);
    }

    fn report(seed: u64, r2: [f64; 2], steps: usize) -> ProbeReport {
        ProbeReport {
            representation: Representation::RecurrentState,
            variant: "dreamer_dr".into(),
            seed,
            train_steps: steps,
            window: 32,
            dims: vec!["gravity".into(), "length".into()],
            r2: r2.iter().map(|&v| Some(v)).collect(),
            train_r2: r2.iter().map(|&v| Some(v)).collect(),
            accuracy: vec![Some(0.5); 2],
            n_train: 10,
            n_test: 5,
        }
    }

    #[test]
    fn self_comparison_is_zero() {
        let pairs: Vec<_> = (0..5).map(|s| (report(s, [0.3 + s as f64 * 0.1, 0.2], 100), report(s, [0.3 + s as f64 * 0.1, 0.2], 100))).collect();
        let cmp = compare_information(&pairs, 200, 0).unwrap();
        assert!(cmp.rows.iter().all(|r| r.difference == 0.0));
        assert_eq!((cmp.wins, cmp.losses, cmp.sign_p), (0, 0, 1.0));
        assert_eq!(cmp.mean_difference, 0.0);
    }

    #[test]
    fn mismatched_budgets_are_rejected() {
        let pairs = vec![(report(0, [0.5, 0.5], 100), report(0, [0.4, 0.4], 200))];
        assert!(compare_information(&pairs, 10, 0).is_err());
    }

    #[test]
    fn separable_gravity_decodes_from_long_windows() {
        let space = EnvId::Swing.space();
        let mut contexts = Vec::new();
        for i in 0..40 {
            let g = if i % 2 == 0 { 4.9 } else { 14.7 };
            contexts.push((space.context(&[g, space.dims[1].default]).unwrap(), i % 2));
        }
        let cfg = DecayConfig { kgrid: vec![32], episode_len: 60, ..DecayConfig::default() };
        let eps = random_episodes(EnvId::Swing, &contexts, EnvConfig { sigma: 0.01, horizon: 60 }, 0).unwrap();
        let curve = decay_curve_from_episodes(&eps, 2, WindowFeatures::<f64>::Pooled, &cfg, 0).unwrap();
        assert_eq!(curve.points.len(), 1);
        assert!(curve.points[0].error < 0.1, "{:?}", curve.points);
    }

    #[test]
    fn decay_curve_shape_and_errors() {
        let cfg = DecayConfig { episodes_per_bin: 6, windows_per_episode: 2, episode_len: 40, ..DecayConfig::default() };
        let c = entropy_decay_curve(EnvId::Swing, VariationMode::Double, WindowFeatures::<f64>::Raw, &cfg, 1).unwrap();
        assert_eq!(c.points.len(), 6);
        assert!(c.points.iter().all(|p| (0.0..=1.0).contains(&p.error)));
        assert!(c.chance >= 0.0);
        let bad = DecayConfig { kgrid: vec![4, 2], ..cfg.clone() };
        assert!(entropy_decay_curve(EnvId::Swing, VariationMode::Double, WindowFeatures::<f64>::Raw, &bad, 1).is_err());
        let few = DecayConfig { bins: 3, ..cfg.clone() };
        assert!(entropy_decay_curve(EnvId::Swing, VariationMode::Double, WindowFeatures::<f64>::Raw, &few, 1).is_err());
        let long = DecayConfig { kgrid: vec![1, 64], ..cfg };
        assert!(entropy_decay_curve(EnvId::Swing, VariationMode::Double, WindowFeatures::<f64>::Raw, &long, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn probe_bounds_and_fit_dominance(seed in 0u64..10_000, d in 1usize..6, signal in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, groups) = contexts(40, 4, &mut rng);
            let x = DMatrix::from_fn(c.nrows(), d, |i, j| if j == 0 { signal * c[(i, 0)] } else { 0.0 } + gauss(&mut rng));
            let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
            let FeatureProbe { r2, train_r2, accuracy: acc, .. } = probe_features(&x, &c, &groups, &cfg).unwrap();
            for v in r2.iter().chain(&train_r2).flatten() {
                prop_assert!(*v <= 1.0);
            }
            for a in acc.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(a));
            }
        }

        #[test]
        fn sign_test_is_a_probability(w in 0usize..200, l in 0usize..200) {
            let p = sign_test(w, l);
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((p - sign_test(l, w)).abs() < 1e-12);
        }
    }
}
