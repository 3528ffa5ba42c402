//! Counterfactual analysis of the inferred context: perturb one embedding
//! dimension, roll the frozen world model out twice from the same filtered
//! state, and measure how distinguishable the decoded trajectories are.
//!
//! Both rollouts of a pair sample their stochastic latents from one shared
//! seed, so a zero perturbation reproduces the baseline bit for bit and any
//! difference comes from the perturbed context alone.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::autodiff::Graph;
use crate::classifiers::{ensemble_proba, select_rows, standardize, ClassifierConfig};
use crate::context_encoder::episode_window_rows;
use crate::error::{DaliError, Result};
use crate::evaluation::{quantile_sorted, Interval};
use crate::model::EMBED_DIM;
use crate::replay::Episode;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::world_model::Latent;

/// Actions fed to both rollouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    /// All-zero actions, exposing passive dynamics.
    Zero,
    /// Greedy policy actions computed along the baseline and replayed unchanged
    /// in the perturbed rollout.
    Policy,
}

impl fmt::Display for ActionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionMode::Zero => "zero",
            ActionMode::Policy => "policy",
        })
    }
}

impl FromStr for ActionMode {
    type Err = DaliError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(ActionMode::Zero),
            "policy" => Ok(ActionMode::Policy),
            _ => Err(DaliError::Invalid(format!("unknown action mode `{s}` (zero | policy)"))),
        }
    }
}

/// Filtered states just before step `t` for a batch of start points.
#[derive(Clone, Debug)]
pub struct StartBatch<T> {
    /// Posterior latent after `o_{t-1}`.
    pub prev: Latent<T>,
    /// `a_{t-1}`.
    pub prev_action: Matrix<T>,
    /// `o_t`.
    pub obs: Matrix<T>,
    /// Embedding of the window ending at `t`.
    pub embed: Matrix<T>,
    /// `(episode index, t)` of every row.
    pub sources: Vec<(usize, usize)>,
    /// Ground-truth context of every row.
    pub contexts: Vec<Vec<f64>>,
}

impl<T: Scalar> StartBatch<T> {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Rows `idx` of the batch.
    pub fn select(&self, idx: &[usize]) -> Self {
        let rows = |m: &Matrix<T>| Matrix::from_fn(idx.len(), m.cols(), |r, c| m.get(idx[r], c));
        Self {
            prev: Latent { h: rows(&self.prev.h), z: rows(&self.prev.z) },
            prev_action: rows(&self.prev_action),
            obs: rows(&self.obs),
            embed: rows(&self.embed),
            sources: idx.iter().map(|&i| self.sources[i]).collect(),
            contexts: idx.iter().map(|&i| self.contexts[i].clone()).collect(),
        }
    }

    /// Population standard deviation of every embedding dimension.
    pub fn embedding_std(&self) -> Vec<f64> {
        let n = self.embed.rows() as f64;
        (0..self.embed.cols())
            .map(|j| {
                let col: Vec<f64> = (0..self.embed.rows()).map(|r| self.embed.get(r, j).f64()).collect();
                let mean = col.iter().sum::<f64>() / n;
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect()
    }
}

fn require_encoder<T: Scalar>(agent: &Agent<T>) -> Result<()> {
    if agent.context.is_none() {
        return Err(DaliError::Wiring(format!(
            "counterfactual analysis needs an inferred-context agent, got {}",
            agent.variant
        )));
    }
    Ok(())
}

fn encode_at<T: Scalar>(agent: &Agent<T>, episodes: &[&Episode], ts: &[usize]) -> Result<Matrix<T>> {
    let enc = agent.encoder()?;
    let cfg = &agent.cfg;
    let mut rows = Vec::with_capacity(ts.len() * cfg.window_rows() * enc.token_dim());
    for (ep, &t) in episodes.iter().zip(ts) {
        episode_window_rows(&ep.obs, &ep.act, cfg.obs_dim, cfg.act_dim, t, cfg.window, &mut rows);
    }
    Ok(enc.encode_rows(Matrix::from_vec(ts.len() * cfg.window_rows(), enc.token_dim(), rows), ts.len()))
}

fn gather<T: Scalar>(episodes: &[&Episode], ts: &[usize], width: usize, f: impl Fn(&Episode, usize) -> &[f64]) -> Matrix<T> {
    let mut m = Matrix::zeros(ts.len(), width);
    for (r, (ep, &t)) in episodes.iter().zip(ts).enumerate() {
        for (c, &v) in f(ep, t).iter().enumerate() {
            m.set(r, c, T::of(v));
        }
    }
    m
}

/// Samples `n` distinct start points with at least `history` earlier steps
/// and filters the posterior over that history with the frozen model.
pub fn collect_starts<T: Scalar, R: Rng>(
    agent: &Agent<T>,
    episodes: &[Episode],
    n: usize,
    history: usize,
    rng: &mut R,
) -> Result<StartBatch<T>> {
    require_encoder(agent)?;
    if history == 0 {
        return Err(DaliError::Invalid("history length must be positive".into()));
    }
    let mut cells = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for t in history..ep.len() {
            cells.push((e, t));
        }
    }
    if n == 0 || n > cells.len() {
        return Err(DaliError::Invalid(format!(
            "requested {n} start states but only {} have {history} steps of history",
            cells.len()
        )));
    }
    let mut pick = sample_indices(rng, cells.len(), n).into_vec();
    pick.sort_unstable();
    let sources: Vec<(usize, usize)> = pick.iter().map(|&i| cells[i]).collect();
    let eps: Vec<&Episode> = sources.iter().map(|&(e, _)| &episodes[e]).collect();
    let cfg = &agent.cfg;

    let mut latent = agent.wm.initial_latent(n);
    let mut prev_action = Matrix::zeros(n, cfg.act_dim);
    for k in 0..history {
        let ts: Vec<usize> = sources.iter().map(|&(_, t)| t - history + k).collect();
        let ctx = encode_at(agent, &eps, &ts)?;
        let o = gather(&eps, &ts, cfg.obs_dim, |ep, t| ep.obs_at(t));
        latent = agent.wm.observe_step::<ChaCha8Rng>(&latent, &prev_action, &o, Some(&ctx), None)?;
        prev_action = gather(&eps, &ts, cfg.act_dim, |ep, t| ep.act_at(t));
    }
    let ts: Vec<usize> = sources.iter().map(|&(_, t)| t).collect();
    Ok(StartBatch {
        prev: latent,
        prev_action,
        obs: gather(&eps, &ts, cfg.obs_dim, |ep, t| ep.obs_at(t)),
        embed: encode_at(agent, &eps, &ts)?,
        contexts: eps.iter().map(|ep| ep.context.clone()).collect(),
        sources,
    })
}

/// Decoded observations `ô_t..ô_{t+H}` and the actions between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout<T> {
    pub obs: Vec<Matrix<T>>,
    pub actions: Vec<Matrix<T>>,
}

/// Rolls the frozen model out from every start. `perturb` adds `Δ` to one
/// embedding dimension wherever the context is consumed; `replay` fixes the
/// actions instead of computing them.
pub fn rollout<T: Scalar>(
    agent: &Agent<T>,
    starts: &StartBatch<T>,
    perturb: Option<(usize, f64)>,
    horizon: usize,
    mode: ActionMode,
    replay: Option<&[Matrix<T>]>,
    seed: u64,
) -> Result<Rollout<T>> {
    require_encoder(agent)?;
    let wm = &agent.wm;
    let n = starts.len();
    let mut ctx_m = starts.embed.clone();
    if let Some((j, delta)) = perturb {
        if j >= EMBED_DIM {
            return Err(DaliError::Invalid(format!("embedding dimension {j} outside 0..{EMBED_DIM}")));
        }
        if delta != 0.0 {
            for r in 0..n {
                ctx_m.set(r, j, ctx_m.get(r, j) + T::of(delta));
            }
        }
    }
    if let Some(acts) = replay {
        if acts.len() < horizon {
            return Err(DaliError::Shape(format!("{} replayed actions for horizon {horizon}", acts.len())));
        }
    }
    let deep = agent.variant.deep();
    let mut g = Graph::no_grad();
    let p = wm.params.bind(&mut g, false);
    let ctx = g.constant(ctx_m.clone());
    let deep_ctx = deep.then_some(ctx);
    let shallow_ctx = agent.variant.shallow().then_some(ctx);

    let h = g.constant(starts.prev.h.clone());
    let z = g.constant(starts.prev.z.clone());
    let a = g.constant(starts.prev_action.clone());
    let mut h = wm.sequence_step(&mut g, &p, h, z, a, deep_ctx)?;
    let o = g.constant(starts.obs.clone());
    let post = wm.posterior(&mut g, &p, h, o, shallow_ctx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, _) = wm.dist(&mut g, post);
    let mut z = wm.sample(&mut g, q, &mut rng);
    let mut out = Rollout { obs: Vec::with_capacity(horizon + 1), actions: Vec::with_capacity(horizon) };
    let (dec, _, _) = wm.heads(&mut g, &p, h, z, deep_ctx)?;
    out.obs.push(g.value_owned(dec));
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    for k in 0..horizon {
        let act = match (replay, mode) {
            (Some(acts), _) => acts[k].clone(),
            (None, ActionMode::Zero) => Matrix::zeros(n, agent.cfg.act_dim),
            (None, ActionMode::Policy) => {
                let feat = Matrix::concat_cols(&[g.value(h), g.value(z)]);
                agent.actor.act(&feat, deep.then_some(&ctx_m), true, &mut dummy)?
            }
        };
        let a = g.constant(act.clone());
        h = wm.sequence_step(&mut g, &p, h, z, a, deep_ctx)?;
        let prior = wm.prior(&mut g, &p, h);
        let q = wm.dist(&mut g, prior).0;
        z = wm.sample(&mut g, q, &mut rng);
        let (dec, _, _) = wm.heads(&mut g, &p, h, z, deep_ctx)?;
        if !g.value(dec).is_finite() {
            return Err(DaliError::NonFinite("counterfactual rollout".into()));
        }
        out.obs.push(g.value_owned(dec));
        out.actions.push(act);
    }
    Ok(out)
}

/// One baseline / perturbed trajectory pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub baseline: Vec<Vec<f64>>,
    pub perturbed: Vec<Vec<f64>>,
    pub dim: usize,
    pub delta: f64,
    pub mode: ActionMode,
}

/// Baseline and perturbed rollouts for a whole start batch.
#[derive(Clone, Debug)]
pub struct CounterfactualBatch<T> {
    pub baseline: Rollout<T>,
    pub perturbed: Rollout<T>,
    pub dim: usize,
    pub delta: f64,
    pub mode: ActionMode,
}

impl<T: Scalar> CounterfactualBatch<T> {
    pub fn len(&self) -> usize {
        self.baseline.obs[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn trajectory(r: &Rollout<T>, i: usize) -> Vec<Vec<f64>> {
        r.obs.iter().map(|m| m.row(i).iter().map(|v| v.f64()).collect()).collect()
    }

    pub fn pair(&self, i: usize) -> CounterfactualPair {
        CounterfactualPair {
            baseline: Self::trajectory(&self.baseline, i),
            perturbed: Self::trajectory(&self.perturbed, i),
            dim: self.dim,
            delta: self.delta,
            mode: self.mode,
        }
    }
}

/// Rolls out baseline and `𝔷 + Δ e_dim` trajectories from the same starts.
pub fn perturb_and_rollout<T: Scalar>(
    agent: &Agent<T>,
    starts: &StartBatch<T>,
    dim: usize,
    delta: f64,
    horizon: usize,
    mode: ActionMode,
    seed: u64,
) -> Result<CounterfactualBatch<T>> {
    if dim >= EMBED_DIM {
        return Err(DaliError::Invalid(format!("embedding dimension {dim} outside 0..{EMBED_DIM}")));
    }
    let baseline = rollout(agent, starts, None, horizon, mode, None, seed)?;
    let replay = (mode == ActionMode::Policy).then_some(baseline.actions.as_slice());
    let perturbed = rollout(agent, starts, Some((dim, delta)), horizon, mode, replay, seed)?;
    Ok(CounterfactualBatch { baseline, perturbed, dim, delta, mode })
}

/// Labelled trajectory features; pair `i` contributes rows `2i` (baseline,
/// label 0) and `2i + 1` (perturbed, label 1) sharing group `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<bool>,
    pub groups: Vec<usize>,
}

/// Flattens every trajectory to `(H + 1) · d_o` features and standardises
/// each coordinate over the dataset.
pub fn build_dataset<T: Scalar>(batch: &CounterfactualBatch<T>) -> Result<Dataset> {
    let n = batch.len();
    if n < 2 {
        return Err(DaliError::Invalid("a counterfactual dataset needs at least two pairs".into()));
    }
    let steps = batch.baseline.obs.len();
    let d_o = batch.baseline.obs[0].cols();
    let mut x = DMatrix::zeros(2 * n, steps * d_o);
    for (k, (b, p)) in batch.baseline.obs.iter().zip(&batch.perturbed.obs).enumerate() {
        for i in 0..n {
            for c in 0..d_o {
                x[(2 * i, k * d_o + c)] = b.get(i, c).f64();
                x[(2 * i + 1, k * d_o + c)] = p.get(i, c).f64();
            }
        }
    }
    standardize(&mut x);
    Ok(Dataset { x, y: (0..2 * n).map(|r| r % 2 == 1).collect(), groups: (0..2 * n).map(|r| r / 2).collect() })
}

/// Area under the ROC curve via the rank-sum statistic; ties count half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DaliError::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DaliError::Invalid("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// Fold index per sample. Groups never straddle folds, and groups with the
/// same label composition are dealt round-robin so every fold keeps the
/// class balance.
pub fn group_folds<R: Rng>(labels: &[bool], groups: &[usize], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(DaliError::Invalid("cross-validation needs at least two folds".into()));
    }
    let ng = groups.iter().max().map_or(0, |&g| g + 1);
    let mut comp = vec![(0usize, 0usize); ng];
    for (&l, &g) in labels.iter().zip(groups) {
        if l {
            comp[g].0 += 1;
        } else {
            comp[g].1 += 1;
        }
    }
    let mut order: Vec<usize> = (0..ng).filter(|&g| comp[g] != (0, 0)).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], rng);
    order.sort_by_key(|&g| comp[g]);
    let mut fold_of = vec![0; ng];
    for (i, &g) in order.iter().enumerate() {
        fold_of[g] = i % k;
    }
    let folds: Vec<usize> = groups.iter().map(|&g| fold_of[g]).collect();
    for f in 0..k {
        let (mut p, mut q) = (false, false);
        for (&l, &ff) in labels.iter().zip(&folds) {
            if ff == f {
                p |= l;
                q |= !l;
            }
        }
        if !(p && q) {
            return Err(DaliError::Invalid(format!("fold {f} holds a single class")));
        }
    }
    Ok(folds)
}

/// Out-of-fold ensemble probabilities for every sample.
pub fn out_of_fold<R: Rng>(ds: &Dataset, folds: usize, cfg: &ClassifierConfig, rng: &mut R) -> Result<Vec<f64>> {
    let assign = group_folds(&ds.y, &ds.groups, folds, rng)?;
    let mut out = vec![0.0; ds.y.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..ds.y.len()).filter(|&i| assign[i] != f).collect();
        let test: Vec<usize> = (0..ds.y.len()).filter(|&i| assign[i] == f).collect();
        let ty: Vec<bool> = train.iter().map(|&i| ds.y[i]).collect();
        let p = ensemble_proba(&select_rows(&ds.x, &train), &ty, &select_rows(&ds.x, &test), cfg, rng)?;
        for (&i, v) in test.iter().zip(p) {
            out[i] = v;
        }
    }
    Ok(out)
}

fn resample_groups(groups: &[usize], rng: &mut ChaCha8Rng, members: &[Vec<usize>]) -> Vec<usize> {
    let ng = members.len();
    let mut idx = Vec::with_capacity(groups.len());
    for _ in 0..ng {
        idx.extend_from_slice(&members[rng.gen_range(0..ng)]);
    }
    idx
}

fn group_members(groups: &[usize]) -> Vec<Vec<usize>> {
    let ng = groups.iter().max().map_or(0, |&g| g + 1);
    let mut m = vec![Vec::new(); ng];
    for (i, &g) in groups.iter().enumerate() {
        m[g].push(i);
    }
    m.retain(|v| !v.is_empty());
    m
}

/// Percentile bootstrap interval of the AUC, resampling whole groups.
pub fn bootstrap_auc_ci(scores: &[f64], labels: &[bool], groups: &[usize], n_boot: usize, level: f64, seed: u64) -> Result<Interval> {
    auc(scores, labels)?;
    let members = group_members(groups);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reps = Vec::with_capacity(n_boot);
    let (mut s, mut l) = (Vec::new(), Vec::new());
    while reps.len() < n_boot {
        let idx = resample_groups(groups, &mut rng, &members);
        s.clear();
        l.clear();
        s.extend(idx.iter().map(|&i| scores[i]));
        l.extend(idx.iter().map(|&i| labels[i]));
        // a resample holding one class has no AUC; draw again
        if let Ok(a) = auc(&s, &l) {
            reps.push(a);
        }
    }
    reps.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(Interval { lo: quantile_sorted(&reps, alpha / 2.0), hi: quantile_sorted(&reps, 1.0 - alpha / 2.0), degenerate: false })
}

/// Two-sided permutation p-value for the AUC gap between two dimensions
/// scored on the same samples. Each permutation swaps the dimension
/// assignment of a random subset of samples; `p = (1 + #extreme) / (1 + iters)`.
pub fn permutation_p(a: &[f64], b: &[f64], labels: &[bool], iters: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DaliError::Shape("permutation test needs paired score lists".into()));
    }
    let observed = (auc(a, labels)? - auc(b, labels)?).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pa, mut pb) = (a.to_vec(), b.to_vec());
    let mut extreme = 0usize;
    for _ in 0..iters {
        for i in 0..a.len() {
            if rng.gen::<bool>() {
                pa[i] = b[i];
                pb[i] = a[i];
            } else {
                pa[i] = a[i];
                pb[i] = b[i];
            }
        }
        let gap = (auc(&pa, labels)? - auc(&pb, labels)?).abs();
        if gap >= observed - 1e-12 {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (1 + iters) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Start states (pairs) per dimension.
    pub pairs: usize,
    pub horizon: usize,
    /// Filtering warm-up before each start.
    pub history: usize,
    pub folds: usize,
    pub bootstrap: usize,
    pub permutations: usize,
    pub mode: ActionMode,
    /// Perturbation size in units of the dimension's standard deviation.
    pub delta_scale: f64,
    /// Adjacent pairs in the ranking tested for significance.
    pub top: usize,
    pub classifier: ClassifierConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            pairs: 2500,
            horizon: 50,
            history: 50,
            folds: 5,
            bootstrap: 500,
            permutations: 1000,
            mode: ActionMode::Zero,
            delta_scale: 1.0,
            top: 3,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionScore {
    pub dim: usize,
    pub delta: f64,
    pub auc: f64,
    pub ci: Interval,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub better: usize,
    pub worse: usize,
    pub gap: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub scores: Vec<DimensionScore>,
    /// Dimensions by decreasing AUC.
    pub ranking: Vec<usize>,
    pub significance: Vec<Significance>,
    pub bootstrap: usize,
    pub permutations: usize,
}

impl RankingResult {
    pub fn top(&self) -> usize {
        self.ranking[0]
    }
}

/// Scores every dataset with out-of-fold ensemble probabilities, ranks the
/// dimensions by AUC and tests adjacent ranks for significance.
pub fn rank_dimensions(datasets: &[(usize, f64, Dataset)], cfg: &AnalysisConfig, seed: u64) -> Result<RankingResult> {
    if datasets.is_empty() {
        return Err(DaliError::Invalid("no datasets to rank".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::new();
    let mut oof = Vec::new();
    for (dim, delta, ds) in datasets {
        let pos = ds.y.iter().filter(|&&v| v).count();
        if 2 * pos != ds.y.len() {
            return Err(DaliError::Invalid(format!("dataset for dimension {dim} is not balanced")));
        }
        let p = out_of_fold(ds, cfg.folds, &cfg.classifier, &mut rng)?;
        let a = auc(&p, &ds.y)?;
        let ci = bootstrap_auc_ci(&p, &ds.y, &ds.groups, cfg.bootstrap, 0.95, rng.gen())?;
        scores.push(DimensionScore { dim: *dim, delta: *delta, auc: a, ci, samples: ds.y.len() });
        oof.push(p);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].auc.total_cmp(&scores[a].auc).then(a.cmp(&b)));
    let mut significance = Vec::new();
    for w in order.windows(2).take(cfg.top) {
        let (i, j) = (w[0], w[1]);
        if datasets[i].2.y != datasets[j].2.y {
            return Err(DaliError::Invalid("significance needs datasets over the same samples".into()));
        }
        significance.push(Significance {
            better: scores[i].dim,
            worse: scores[j].dim,
            gap: scores[i].auc - scores[j].auc,
            p: permutation_p(&oof[i], &oof[j], &datasets[i].2.y, cfg.permutations, rng.gen())?,
        });
    }
    Ok(RankingResult {
        ranking: order.iter().map(|&i| scores[i].dim).collect(),
        scores,
        significance,
        bootstrap: cfg.bootstrap,
        permutations: cfg.permutations,
    })
}

/// Full analysis on a frozen agent: shared starts, one dataset per
/// requested dimension, ranking. Returns the starts for follow-up plots.
pub fn analyze<T: Scalar>(
    agent: &Agent<T>,
    episodes: &[Episode],
    dims: &[usize],
    cfg: &AnalysisConfig,
    seed: u64,
) -> Result<(RankingResult, StartBatch<T>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = collect_starts(agent, episodes, cfg.pairs, cfg.history, &mut rng)?;
    let std = starts.embedding_std();
    let roll_seed: u64 = rng.gen();
    let mut datasets = Vec::new();
    for &j in dims {
        let delta = cfg.delta_scale * std.get(j).copied().ok_or_else(|| DaliError::Invalid(format!("dimension {j} outside 0..{EMBED_DIM}")))?;
        let batch = perturb_and_rollout(agent, &starts, j, delta, cfg.horizon, cfg.mode, roll_seed)?;
        datasets.push((j, delta, build_dataset(&batch)?));
    }
    Ok((rank_dimensions(&datasets, cfg, rng.gen())?, starts, std))
}

/// Oscillation period in steps from mean crossings of a signal, with
/// linear interpolation between samples. Needs at least three crossings.
pub fn oscillation_period(signal: &[f64]) -> Option<f64> {
    let mean = signal.iter().sum::<f64>() / signal.len() as f64;
    let mut crossings = Vec::new();
    for i in 1..signal.len() {
        let (a, b) = (signal[i - 1] - mean, signal[i] - mean);
        if a == 0.0 || a.signum() != b.signum() && b != 0.0 {
            crossings.push(if a == b { (i - 1) as f64 } else { (i - 1) as f64 + a / (a - b) });
        }
    }
    if crossings.len() < 3 {
        return None;
    }
    Some(2.0 * (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64)
}

/// Change of the decoded oscillation period (perturbed minus baseline) of
/// observation coordinate `coord` for every start; `None` where either
/// trajectory shows no measurable oscillation.
pub fn period_shifts<T: Scalar>(batch: &CounterfactualBatch<T>, coord: usize) -> Vec<Option<f64>> {
    (0..batch.len())
        .map(|i| {
            let pair = batch.pair(i);
            let b: Vec<f64> = pair.baseline.iter().map(|o| o[coord]).collect();
            let p: Vec<f64> = pair.perturbed.iter().map(|o| o[coord]).collect();
            Some(oscillation_period(&p)? - oscillation_period(&b)?)
        })
        .collect()
}

/// Period shift per start averaged over `samples` latent sampling seeds.
/// Each seed is shared by the baseline and the perturbed rollout, so the
/// average estimates the expected effect of the perturbation under the
/// model's own stochasticity. Starts never measurable give `None`.
#[allow(clippy::too_many_arguments)]
pub fn expected_period_shifts<T: Scalar>(
    agent: &Agent<T>,
    starts: &StartBatch<T>,
    dim: usize,
    delta: f64,
    horizon: usize,
    coord: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    if samples == 0 {
        return Err(DaliError::Invalid("need at least one sampling seed".into()));
    }
    if coord >= agent.cfg.obs_dim {
        return Err(DaliError::Invalid(format!("observation coordinate {coord} outside 0..{}", agent.cfg.obs_dim)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![(0.0, 0usize); starts.len()];
    for _ in 0..samples {
        let batch = perturb_and_rollout(agent, starts, dim, delta, horizon, ActionMode::Zero, rng.gen())?;
        for (a, s) in acc.iter_mut().zip(period_shifts(&batch, coord)) {
            if let Some(v) = s {
                a.0 += v;
                a.1 += 1;
            }
        }
    }
    Ok(acc.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
}

/// Largest number of shifts sharing one strict sign; unmeasured or zero
/// shifts count against consistency.
pub fn sign_consistency(shifts: &[Option<f64>]) -> usize {
    let up = shifts.iter().filter(|s| matches!(s, Some(v) if *v > 0.0)).count();
    let down = shifts.iter().filter(|s| matches!(s, Some(v) if *v < 0.0)).count();
    up.max(down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::poi;
    use crate::model::{ModelConfig, Variant};
    use crate::trainer::collect_episode;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small() -> ModelConfig {
        ModelConfig { enc_width: 8, fwd_hidden: 8, window: 4, deter: 8, hidden: 8, actor_hidden: 8, critic_hidden: 8, ..ModelConfig::default() }
    }

    fn episodes(agent: &Agent<f64>, n: usize) -> Vec<Episode> {
        let env = crate::envs::EnvConfig { sigma: 0.01, horizon: 40 };
        let c = agent.space.default_context();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n)
            .map(|i| collect_episode(agent, &c, i as u64, env, crate::agent::ActMode::Random, &mut rng).unwrap())
            .collect()
    }

    #[test]
    fn zero_perturbation_is_bit_exact_and_frozen() {
        for v in [Variant::DaliS, Variant::DaliD] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let agent = Agent::<f64>::new(crate::envs::EnvId::Swing, v, &small(), &mut rng).unwrap();
            let before = agent.hashes();
            let eps = episodes(&agent, 3);
            let starts = collect_starts(&agent, &eps, 6, 10, &mut rng).unwrap();
            for mode in [ActionMode::Zero, ActionMode::Policy] {
                let b = perturb_and_rollout(&agent, &starts, 3, 0.0, 50, mode, 7).unwrap();
                assert_eq!(b.baseline, b.perturbed);
                assert_eq!(b.baseline.obs.len(), 51);
                let moved = perturb_and_rollout(&agent, &starts, 3, 5.0, 50, mode, 7).unwrap();
                assert_ne!(moved.baseline.obs, moved.perturbed.obs);
                if mode == ActionMode::Policy {
                    assert_eq!(moved.baseline.actions, moved.perturbed.actions);
                }
                let ds = build_dataset(&moved).unwrap();
                assert_eq!(ds.x.ncols(), 51 * 4);
                assert_eq!(ds.y.iter().filter(|&&l| l).count(), 6);
            }
            assert_eq!(agent.hashes(), before);
            assert!(perturb_and_rollout(&agent, &starts, 8, 1.0, 5, ActionMode::Zero, 7).is_err());
            assert!(collect_starts(&agent, &eps, 6, 41, &mut rng).is_err());
        }
    }

    #[test]
    fn baselines_without_an_encoder_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let agent = Agent::<f64>::new(crate::envs::EnvId::Swing, Variant::DreamerDr, &small(), &mut rng).unwrap();
        let eps = episodes(&agent, 1);
        assert!(matches!(collect_starts(&agent, &eps, 2, 5, &mut rng), Err(DaliError::Wiring(_))));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(s in proptest::collection::vec(0u8..5, 2..30), l in proptest::collection::vec(any::<bool>(), 2..30)) {
            let n = s.len().min(l.len());
            let (s, l): (Vec<f64>, Vec<bool>) = (s[..n].iter().map(|&v| f64::from(v)).collect(), l[..n].to_vec());
            let pos: Vec<f64> = s.iter().zip(&l).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
            let neg: Vec<f64> = s.iter().zip(&l).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
            match auc(&s, &l) {
                Ok(a) => prop_assert!((a - poi(&pos, &neg).unwrap()).abs() < 1e-12),
                Err(_) => prop_assert!(pos.is_empty() || neg.is_empty()),
            }
        }
    }

    fn synthetic(n: usize, shift: f64, shuffle: bool, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y: Vec<bool> = (0..2 * n).map(|r| r % 2 == 1).collect();
        let x = DMatrix::from_fn(2 * n, 6, |r, _| Distribution::<f64>::sample(&StandardNormal, &mut rng) + if y[r] { shift } else { 0.0 });
        if shuffle {
            rand::seq::SliceRandom::shuffle(&mut y[..], &mut rng);
            Dataset { x, y, groups: (0..2 * n).collect() }
        } else {
            Dataset { x, y, groups: (0..2 * n).map(|r| r / 2).collect() }
        }
    }

    fn quick() -> AnalysisConfig {
        AnalysisConfig {
            bootstrap: 200,
            permutations: 200,
            classifier: ClassifierConfig { rff_features: 64, mlp_epochs: 60, stumps: 30, ..ClassifierConfig::default() },
            ..AnalysisConfig::default()
        }
    }

    #[test]
    fn shuffled_labels_sit_at_chance_and_separable_data_at_one() {
        let cfg = AnalysisConfig { top: 0, ..quick() };
        let null: Vec<(usize, f64, Dataset)> = (0..EMBED_DIM).map(|j| (j, 1.0, synthetic(600, 3.0, true, j as u64))).collect();
        let r = rank_dimensions(&null, &cfg, 3).unwrap();
        assert_eq!(r.scores.len(), 8);
        for s in &r.scores {
            assert!((0.45..=0.55).contains(&s.auc), "{}", s.auc);
            assert!(s.ci.lo <= s.auc && s.auc <= s.ci.hi);
        }
        let sep = vec![(0, 1.0, synthetic(100, 20.0, false, 1)), (1, 1.0, synthetic(100, 0.0, false, 2))];
        let r = rank_dimensions(&sep, &quick(), 3).unwrap();
        assert_eq!(r.ranking, vec![0, 1]);
        assert_eq!(r.scores[0].auc, 1.0);
        assert!(r.significance[0].p < 0.01);
    }

    #[test]
    fn permutation_test_is_calibrated_under_the_null() {
        let mut passes = 0;
        for rep in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(rep);
            let labels: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                labels.iter().map(|&l| Distribution::<f64>::sample(&StandardNormal, rng) + if l { 0.5 } else { 0.0 }).collect()
            };
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let p = permutation_p(&a, &b, &labels, 200, rep).unwrap();
            assert!((0.0..=1.0).contains(&p));
            passes += (p > 0.05) as usize;
            assert_eq!(permutation_p(&a, &a, &labels, 50, rep).unwrap(), 1.0);
        }
        assert!(passes >= 45, "{passes}");
    }

    #[test]
    fn folds_keep_pairs_together_and_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y: Vec<bool> = (0..40).map(|r| r % 2 == 1).collect();
        let groups: Vec<usize> = (0..40).map(|r| r / 2).collect();
        let f = group_folds(&y, &groups, 5, &mut rng).unwrap();
        for i in 0..20 {
            assert_eq!(f[2 * i], f[2 * i + 1]);
        }
        for k in 0..5 {
            assert_eq!(f.iter().filter(|&&v| v == k).count(), 8);
        }
        assert!(group_folds(&[true, true, false, false], &[0, 1, 2, 3], 3, &mut rng).is_err());
    }

    #[test]
    fn period_of_a_sine() {
        let s: Vec<f64> = (0..101).map(|i| (2.0 * std::f64::consts::PI * i as f64 / 20.0 + 0.3).sin()).collect();
        assert!((oscillation_period(&s).unwrap() - 20.0).abs() < 0.1);
        assert!(oscillation_period(&[1.0, 2.0, 3.0]).is_none());
        assert_eq!(sign_consistency(&[Some(1.0), Some(2.0), Some(-1.0), None, Some(0.0)]), 2);
    }
}
