//! Zero-shot evaluation across context regimes and the aggregate metrics:
//! interquartile mean, stratified bootstrap intervals and probability of
//! improvement.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, Agent};
use crate::config::EvalConfig;
use crate::envs::{eval_grid, regime_of, Env, EnvConfig, Regime, VariationMode};
use crate::error::{DaliError, Result};
use crate::scalar::Scalar;

/// Mean of the sorted scores after trimming `floor(n / 4)` from each end.
pub fn iqm(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(DaliError::Invalid("iqm of an empty score list".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() / 4;
    let mid = &s[k..s.len() - k];
    Ok(mid.iter().sum::<f64>() / mid.len() as f64)
}

/// Probability that a draw from `a` beats a draw from `b`, ties counted half.
pub fn poi(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(DaliError::Invalid("poi needs two nonempty score lists".into()));
    }
    let mut wins = 0.0;
    for &x in a {
        for &y in b {
            if x > y {
                wins += 1.0;
            } else if x == y {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (a.len() * b.len()) as f64)
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Episode scores arranged by seed and context.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrid {
    pub seeds: usize,
    pub contexts: usize,
    /// `seeds * contexts` cells, seed-major; each holds episode scores.
    pub cells: Vec<Vec<f64>>,
}

impl ScoreGrid {
    pub fn new(seeds: usize, contexts: usize) -> Self {
        Self { seeds, contexts, cells: vec![Vec::new(); seeds * contexts] }
    }

    pub fn from_cells(cells: Vec<Vec<f64>>, contexts: usize) -> Self {
        let seeds = cells.len() / contexts.max(1);
        Self { seeds, contexts, cells }
    }

    pub fn cell_mut(&mut self, seed: usize, context: usize) -> &mut Vec<f64> {
        &mut self.cells[seed * self.contexts + context]
    }

    pub fn cell(&self, seed: usize, context: usize) -> &[f64] {
        &self.cells[seed * self.contexts + context]
    }

    pub fn pooled(&self) -> Vec<f64> {
        self.cells.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    /// Set when fewer than two seeds made the interval meaningless.
    pub degenerate: bool,
}

/// Percentile bootstrap of the IQM, resampling seeds and contexts as
/// independent strata with replacement.
pub fn stratified_bootstrap_ci(grid: &ScoreGrid, n_boot: usize, level: f64, seed: u64) -> Result<Interval> {
    if grid.seeds == 0 || grid.contexts == 0 || grid.cells.iter().all(|c| c.is_empty()) {
        return Err(DaliError::Invalid("bootstrap over an empty score grid".into()));
    }
    if n_boot == 0 || !(0.0..1.0).contains(&level) {
        return Err(DaliError::Invalid("bootstrap needs n_boot >= 1 and level in (0, 1)".into()));
    }
    let degenerate = grid.seeds < 2;
    if degenerate {
        log::warn!("bootstrap interval over a single seed is degenerate");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reps = Vec::with_capacity(n_boot);
    let mut pool = Vec::new();
    for _ in 0..n_boot {
        pool.clear();
        let seeds: Vec<usize> = (0..grid.seeds).map(|_| rng.gen_range(0..grid.seeds)).collect();
        let ctxs: Vec<usize> = (0..grid.contexts).map(|_| rng.gen_range(0..grid.contexts)).collect();
        for &s in &seeds {
            for &c in &ctxs {
                pool.extend_from_slice(grid.cell(s, c));
            }
        }
        if !pool.is_empty() {
            reps.push(iqm(&pool)?);
        }
    }
    reps.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(Interval { lo: quantile_sorted(&reps, alpha / 2.0), hi: quantile_sorted(&reps, 1.0 - alpha / 2.0), degenerate })
}

/// One evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub seed: u64,
    pub regime: Regime,
    pub context_id: usize,
    pub context: Vec<f64>,
    pub episode: usize,
    /// Episode return divided by the episode length, in `[0, 1]`.
    pub score: f64,
}

fn episode_seed(base: u64, regime: Regime, ctx: usize, episode: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(base ^ ((regime as u64 + 1) << 40) ^ ((ctx as u64) << 20) ^ episode as u64);
    r.gen()
}

/// Evaluates an agent on the regime grids with the greedy policy and online
/// context inference.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_checkpoint<T: Scalar>(
    agent: &Agent<T>,
    method: &str,
    train_seed: u64,
    mode: VariationMode,
    env_cfg: EnvConfig,
    eval: &EvalConfig,
) -> Result<Vec<EvalRecord>> {
    let space = agent.env.space();
    let mut out = Vec::new();
    for &regime in &eval.regimes {
        let grid = eval_grid(&space, regime, mode, eval.contexts, eval.seed);
        for (ci, c) in grid.iter().enumerate() {
            let label = regime_of(&space, c)?;
            if label != regime {
                return Err(DaliError::Invalid(format!("grid context {:?} labelled {label}, expected {regime}", c.values)));
            }
            for e in 0..eval.episodes {
                let seed = episode_seed(eval.seed, regime, ci, e);
                let mut env = Env::new(agent.env, c, seed, env_cfg)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut filter = agent.filter(&c.values);
                let mut obs = env.reset();
                let mut total = 0.0;
                while !env.done() {
                    let a = filter.step(agent, &obs, ActMode::Greedy, &mut rng)?;
                    let s = env.step(&a)?;
                    total += s.reward;
                    obs = s.obs;
                }
                out.push(EvalRecord {
                    method: method.to_string(),
                    seed: train_seed,
                    regime,
                    context_id: ci,
                    context: c.values.clone(),
                    episode: e,
                    score: total / env_cfg.horizon as f64,
                });
            }
        }
    }
    Ok(out)
}

/// Writes records as CSV: method, seed, regime, context_id, one column per
/// context dimension, episode, score.
pub fn write_archive(path: &Path, names: &[String], records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string(), "seed".into(), "regime".into(), "context_id".into()];
    header.extend(names.iter().cloned());
    header.extend(["episode".to_string(), "score".into()]);
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.method.clone(), r.seed.to_string(), r.regime.to_string(), r.context_id.to_string()];
        row.extend(r.context.iter().map(|v| v.to_string()));
        row.extend([r.episode.to_string(), r.score.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let ncols = rd.headers()?.len();
    if ncols < 6 {
        return Err(DaliError::Format("archive has too few columns".into()));
    }
    let d = ncols - 6;
    let bad = |what: &str| DaliError::Format(format!("bad archive field `{what}`"));
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let f = |i: usize| row.get(i).ok_or_else(|| bad("missing"));
        out.push(EvalRecord {
            method: f(0)?.to_string(),
            seed: f(1)?.parse().map_err(|_| bad("seed"))?,
            regime: f(2)?.parse().map_err(|_| bad("regime"))?,
            context_id: f(3)?.parse().map_err(|_| bad("context_id"))?,
            context: (0..d).map(|k| f(4 + k)?.parse().map_err(|_| bad("context"))).collect::<Result<_>>()?,
            episode: f(4 + d)?.parse().map_err(|_| bad("episode"))?,
            score: f(5 + d)?.parse().map_err(|_| bad("score"))?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub iqm: f64,
    pub ci: Interval,
    pub seeds: usize,
    pub contexts: usize,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSection {
    pub regime: Regime,
    pub methods: Vec<MethodSummary>,
    /// `poi[i][j]`: probability method `i` beats method `j` over pooled scores.
    pub poi: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub sections: Vec<RegimeSection>,
    pub archive_sha256: Option<String>,
}

/// Groups records into per-(method, regime) score grids.
pub fn grids(records: &[EvalRecord]) -> BTreeMap<(Regime, String), ScoreGrid> {
    let mut seeds: BTreeMap<(Regime, String), Vec<u64>> = BTreeMap::new();
    let mut ctxs: BTreeMap<(Regime, String), usize> = BTreeMap::new();
    for r in records {
        let k = (r.regime, r.method.clone());
        let s = seeds.entry(k.clone()).or_default();
        if !s.contains(&r.seed) {
            s.push(r.seed);
        }
        let c = ctxs.entry(k).or_default();
        *c = (*c).max(r.context_id + 1);
    }
    let mut out: BTreeMap<(Regime, String), ScoreGrid> =
        seeds.iter().map(|(k, s)| (k.clone(), ScoreGrid::new(s.len(), ctxs[k]))).collect();
    for r in records {
        let k = (r.regime, r.method.clone());
        let si = seeds[&k].iter().position(|&s| s == r.seed).expect("seed indexed");
        out.get_mut(&k).expect("grid").cell_mut(si, r.context_id).push(r.score);
    }
    out
}

/// Builds the report from raw records only, so it can be recomputed from an archive.
pub fn build_report(records: &[EvalRecord], n_boot: usize, rng_seed: u64) -> Result<GeneralizationReport> {
    let grids = grids(records);
    let mut sections = Vec::new();
    for regime in Regime::ALL {
        let methods: Vec<(&String, &ScoreGrid)> =
            grids.iter().filter(|((r, _), _)| *r == regime).map(|((_, m), g)| (m, g)).collect();
        if methods.is_empty() {
            continue;
        }
        let mut summaries = Vec::new();
        for (m, g) in &methods {
            let pooled = g.pooled();
            summaries.push(MethodSummary {
                method: (*m).clone(),
                iqm: iqm(&pooled)?,
                ci: stratified_bootstrap_ci(g, n_boot, 0.95, rng_seed)?,
                seeds: g.seeds,
                contexts: g.contexts,
                episodes: pooled.len(),
            });
        }
        let pooled: Vec<Vec<f64>> = methods.iter().map(|(_, g)| g.pooled()).collect();
        let poi_m = pooled.iter().map(|a| pooled.iter().map(|b| poi(a, b)).collect::<Result<Vec<_>>>()).collect::<Result<_>>()?;
        sections.push(RegimeSection { regime, methods: summaries, poi: poi_m });
    }
    Ok(GeneralizationReport { sections, archive_sha256: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&[0.0, 1.0, 2.0, 3.0]).unwrap(), 1.5);
        assert_eq!(iqm(&[5.0]).unwrap(), 5.0);
        assert!(iqm(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
        assert!((iqm(&u).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn poi_examples() {
        assert_eq!(poi(&[1.0, 2.0], &[0.0, 3.0]).unwrap(), 0.5);
        assert_eq!(poi(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert_eq!(poi(&[5.0, 6.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!(poi(&[], &[1.0]).is_err());
    }

    #[test]
    fn constant_scores_give_zero_width_interval() {
        let g = ScoreGrid::from_cells(vec![vec![0.7; 3]; 12], 4);
        let ci = stratified_bootstrap_ci(&g, 200, 0.95, 1).unwrap();
        assert_eq!(ci.hi - ci.lo, 0.0);
        assert!((ci.lo - 0.7).abs() < 1e-12);
        assert!(!ci.degenerate);
        let one = ScoreGrid::from_cells(vec![vec![0.1, 0.2]; 3], 3);
        assert!(stratified_bootstrap_ci(&one, 50, 0.95, 1).unwrap().degenerate);
    }

    proptest! {
        #[test]
        fn iqm_permutation_and_translation(mut xs in proptest::collection::vec(-1e3f64..1e3, 1..40), d in -10.0f64..10.0, seed in 0u64..100) {
            let base = iqm(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + d).collect();
            prop_assert!((iqm(&shifted).unwrap() - (base + d)).abs() < 1e-9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(&mut xs[..], &mut rng);
            prop_assert_eq!(iqm(&xs).unwrap(), base);
        }

        #[test]
        fn poi_complement_and_rank_invariance(a in proptest::collection::vec(0u8..6, 1..12), b in proptest::collection::vec(0u8..6, 1..12)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let p = poi(&a, &b).unwrap();
            prop_assert_eq!(p + poi(&b, &a).unwrap(), 1.0);
            let f = |x: &f64| x.powi(3) + 2.0 * x;
            let fa: Vec<f64> = a.iter().map(f).collect();
            let fb: Vec<f64> = b.iter().map(f).collect();
            prop_assert_eq!(poi(&fa, &fb).unwrap(), p);
        }
    }

    #[test]
    fn archive_roundtrip_reproduces_report() {
        let mut recs = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for m in ["a", "b"] {
            for seed in 0..3 {
                for regime in [Regime::Interpolate, Regime::Mixed] {
                    for c in 0..4 {
                        for e in 0..2 {
                            recs.push(EvalRecord {
                                method: m.into(),
                                seed,
                                regime,
                                context_id: c,
                                context: vec![rng.gen::<f64>() * 10.0, 0.3],
                                episode: e,
                                score: rng.gen(),
                            });
                        }
                    }
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        write_archive(&p, &["gravity".into(), "length".into()], &recs).unwrap();
        let back = read_archive(&p).unwrap();
        assert_eq!(back, recs);
        let r1 = build_report(&recs, 300, 4).unwrap();
        let r2 = build_report(&back, 300, 4).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.sections.len(), 2);
        for s in &r1.sections {
            for m in &s.methods {
                assert!(m.ci.lo <= m.iqm && m.iqm <= m.ci.hi);
            }
            assert_eq!(s.poi[0][1] + s.poi[1][0], 1.0);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        use crate::model::{ModelConfig, Variant};
        let cfg = ModelConfig { enc_width: 8, fwd_hidden: 8, window: 4, deter: 8, hidden: 8, actor_hidden: 8, critic_hidden: 8, ..ModelConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let agent = Agent::<f64>::new(crate::envs::EnvId::Swing, Variant::DaliS, &cfg, &mut rng).unwrap();
        let eval = EvalConfig { contexts: 3, episodes: 2, ..EvalConfig::default() };
        let env = EnvConfig { sigma: 0.01, horizon: 12 };
        let a = evaluate_checkpoint(&agent, "dali_s", 0, VariationMode::Double, env, &eval).unwrap();
        let b = evaluate_checkpoint(&agent, "dali_s", 0, VariationMode::Double, env, &eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 3 * 2);
        let space = agent.env.space();
        for r in &a {
            assert!((0.0..=1.0).contains(&r.score));
            assert_eq!(regime_of(&space, &space.context(&r.context).unwrap()).unwrap(), r.regime);
        }
    }
}
