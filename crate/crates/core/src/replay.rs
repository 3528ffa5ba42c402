//! Episodic replay storage, sequence sampling and the on-disk episode file.
//!
//! An episode of `T` environment steps holds `T + 1` records. Record `i`
//! carries the observation `o_i`, the action taken after it (zeros on the
//! final record), the reward received on arrival at `o_i` (zero for the reset
//! observation) and the done flag. The ground-truth context is stored per
//! episode for probes and the cRSSM baselines.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DaliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub reward: Vec<f64>,
    pub done: Vec<bool>,
    pub context: Vec<f64>,
}

impl Episode {
    pub fn new(obs_dim: usize, act_dim: usize, context: Vec<f64>) -> Self {
        Self { obs_dim, act_dim, obs: Vec::new(), act: Vec::new(), reward: Vec::new(), done: Vec::new(), context }
    }

    pub fn push(&mut self, obs: &[f64], act: &[f64], reward: f64, done: bool) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(act.len(), self.act_dim);
        self.obs.extend_from_slice(obs);
        self.act.extend_from_slice(act);
        self.reward.push(reward);
        self.done.push(done);
    }

    /// Overwrites the action stored with the latest record.
    pub fn set_last_action(&mut self, act: &[f64]) {
        let n = self.act.len();
        self.act[n - self.act_dim..].copy_from_slice(act);
    }

    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    pub fn obs_at(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn act_at(&self, i: usize) -> &[f64] {
        &self.act[i * self.act_dim..(i + 1) * self.act_dim]
    }

    /// Undiscounted return over the episode.
    pub fn total_reward(&self) -> f64 {
        self.reward.iter().sum()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.obs.len() != n * self.obs_dim || self.act.len() != n * self.act_dim || self.done.len() != n {
            return Err(DaliError::Shape("episode arrays have inconsistent lengths".into()));
        }
        Ok(())
    }
}

/// Position of a sampled subsequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqRef {
    pub episode: usize,
    pub start: usize,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub ctx_dim: usize,
    pub capacity: usize,
    episodes: VecDeque<Episode>,
    steps: usize,
}

impl ReplayBuffer {
    pub fn new(obs_dim: usize, act_dim: usize, ctx_dim: usize, capacity: usize) -> Self {
        Self { obs_dim, act_dim, ctx_dim, capacity, episodes: VecDeque::new(), steps: 0 }
    }

    /// Adds an episode, evicting the oldest ones beyond capacity.
    pub fn add(&mut self, ep: Episode) -> Result<()> {
        ep.check()?;
        if ep.obs_dim != self.obs_dim || ep.act_dim != self.act_dim || ep.context.len() != self.ctx_dim {
            return Err(DaliError::Shape("episode dimensions do not match the buffer".into()));
        }
        if ep.is_empty() {
            return Err(DaliError::Invalid("empty episode".into()));
        }
        self.steps += ep.len();
        self.episodes.push_back(ep);
        while self.steps > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("nonempty");
            self.steps -= old.len();
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.steps
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episode(&self, i: usize) -> &Episode {
        &self.episodes[i]
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Samples `batch` length-`len` subsequences, each inside a single episode.
    pub fn sample_sequences<R: Rng>(&self, batch: usize, len: usize, rng: &mut R) -> Result<Vec<SeqRef>> {
        let eligible: Vec<usize> = (0..self.episodes.len()).filter(|&i| self.episodes[i].len() >= len).collect();
        if eligible.is_empty() || len == 0 {
            return Err(DaliError::Invalid(format!("no episode holds a sequence of length {len}")));
        }
        Ok((0..batch)
            .map(|_| {
                let episode = eligible[rng.gen_range(0..eligible.len())];
                let start = rng.gen_range(0..=self.episodes[episode].len() - len);
                SeqRef { episode, start }
            })
            .collect())
    }

    /// Samples `batch` record indices `t` with `t + 1` still inside the episode.
    pub fn sample_transitions<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<SeqRef>> {
        self.sample_sequences(batch, 2, rng)
    }
}

const REPLAY_MAGIC: &[u8; 8] = b"DALIREPL";
const REPLAY_VERSION: u32 = 1;

/// Header of a replay file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayHeader {
    pub version: u32,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub ctx_dim: usize,
    pub dtype: String,
    /// Per-record layout in order.
    pub record: Vec<String>,
}

impl ReplayHeader {
    pub fn new(obs_dim: usize, act_dim: usize, ctx_dim: usize) -> Self {
        Self {
            version: REPLAY_VERSION,
            obs_dim,
            act_dim,
            ctx_dim,
            dtype: "f64le".into(),
            record: vec!["obs".into(), "act".into(), "reward".into(), "done".into(), "context".into()],
        }
    }

    fn record_width(&self) -> usize {
        self.obs_dim + self.act_dim + 2 + self.ctx_dim
    }
}

/// Append-only episode file: magic, `u32` version, `u64` header length,
/// JSON header, then per episode a `u32` record count followed by
/// contiguous little-endian `f64` records.
pub struct ReplayWriter {
    out: BufWriter<File>,
    header: ReplayHeader,
}

impl ReplayWriter {
    pub fn create(path: &Path, header: ReplayHeader) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let json = serde_json::to_vec(&header)?;
        out.write_all(REPLAY_MAGIC)?;
        out.write_all(&REPLAY_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        out.flush()?;
        Ok(Self { out, header })
    }

    /// Reopens an existing file for appending after keeping its first `keep` episodes.
    pub fn reopen(path: &Path, keep: usize) -> Result<Self> {
        let (header, episodes) = read_replay(path)?;
        if episodes.len() < keep {
            return Err(DaliError::Format(format!("replay file has {} episodes, need {keep}", episodes.len())));
        }
        let mut w = Self::create(path, header)?;
        for ep in &episodes[..keep] {
            w.append(ep)?;
        }
        Ok(w)
    }

    pub fn append(&mut self, ep: &Episode) -> Result<()> {
        let h = &self.header;
        if ep.obs_dim != h.obs_dim || ep.act_dim != h.act_dim || ep.context.len() != h.ctx_dim {
            return Err(DaliError::Shape("episode does not match the replay header".into()));
        }
        self.out.write_all(&(ep.len() as u32).to_le_bytes())?;
        for i in 0..ep.len() {
            let vals = ep
                .obs_at(i)
                .iter()
                .chain(ep.act_at(i))
                .copied()
                .chain([ep.reward[i], if ep.done[i] { 1.0 } else { 0.0 }])
                .chain(ep.context.iter().copied());
            for v in vals {
                self.out.write_all(&v.to_le_bytes())?;
            }
        }
        self.out.flush()?;
        Ok(())
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(DaliError::Format(format!("truncated {what}")));
        }
        filled += n;
    }
    Ok(true)
}

pub fn read_replay(path: &Path) -> Result<(ReplayHeader, Vec<Episode>)> {
    let mut r = BufReader::new(OpenOptions::new().read(true).open(path)?);
    let mut magic = [0u8; 8];
    if !read_exact_or(&mut r, &mut magic, "magic")? || &magic != REPLAY_MAGIC {
        return Err(DaliError::Format("not a replay file".into()));
    }
    let mut u4 = [0u8; 4];
    let mut u8b = [0u8; 8];
    r.read_exact(&mut u4)?;
    if u32::from_le_bytes(u4) != REPLAY_VERSION {
        return Err(DaliError::Format("unsupported replay version".into()));
    }
    r.read_exact(&mut u8b)?;
    let mut json = vec![0u8; u64::from_le_bytes(u8b) as usize];
    r.read_exact(&mut json)?;
    let header: ReplayHeader = serde_json::from_slice(&json)?;
    let w = header.record_width();
    let mut episodes = Vec::new();
    while read_exact_or(&mut r, &mut u4, "episode length")? {
        let n = u32::from_le_bytes(u4) as usize;
        let mut raw = vec![0u8; n * w * 8];
        if !read_exact_or(&mut r, &mut raw, "episode records")? && n > 0 {
            return Err(DaliError::Format("truncated episode records".into()));
        }
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let ctx = if n > 0 { vals[w - header.ctx_dim..w].to_vec() } else { vec![0.0; header.ctx_dim] };
        let mut ep = Episode::new(header.obs_dim, header.act_dim, ctx);
        for rec in vals.chunks_exact(w) {
            let (o, rest) = rec.split_at(header.obs_dim);
            let (a, rest) = rest.split_at(header.act_dim);
            ep.push(o, a, rest[0], rest[1] != 0.0);
        }
        episodes.push(ep);
    }
    Ok((header, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(len: usize, tag: f64) -> Episode {
        let mut ep = Episode::new(2, 1, vec![tag]);
        for i in 0..len {
            ep.push(&[tag, i as f64], &[0.5], i as f64 * 0.1, i + 1 == len);
        }
        ep
    }

    proptest! {
        #[test]
        fn sequences_stay_inside_one_episode(lens in proptest::collection::vec(1usize..40, 1..12), l in 1usize..20, seed in 0u64..1000) {
            let mut buf = ReplayBuffer::new(2, 1, 1, usize::MAX);
            for (k, &n) in lens.iter().enumerate() {
                buf.add(episode(n, k as f64)).unwrap();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match buf.sample_sequences(16, l, &mut rng) {
                Ok(refs) => {
                    for r in refs {
                        let ep = buf.episode(r.episode);
                        prop_assert!(r.start + l <= ep.len());
                        // every record carries the episode tag
                        for i in r.start..r.start + l {
                            prop_assert_eq!(ep.obs_at(i)[0], r.episode as f64);
                        }
                    }
                }
                Err(_) => prop_assert!(lens.iter().all(|&n| n < l)),
            }
        }
    }

    #[test]
    fn capacity_evicts_oldest() {
        let mut buf = ReplayBuffer::new(2, 1, 1, 25);
        for k in 0..4 {
            buf.add(episode(10, k as f64)).unwrap();
        }
        assert_eq!(buf.num_episodes(), 2);
        assert_eq!(buf.episode(0).context, vec![2.0]);
        assert_eq!(buf.num_steps(), 20);
    }

    #[test]
    fn file_roundtrip_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.bin");
        let mut w = ReplayWriter::create(&path, ReplayHeader::new(2, 1, 1)).unwrap();
        let eps = [episode(5, 1.0), episode(3, 2.0), episode(7, 3.0)];
        for e in &eps {
            w.append(e).unwrap();
        }
        drop(w);
        let (h, back) = read_replay(&path).unwrap();
        assert_eq!(h, ReplayHeader::new(2, 1, 1));
        assert_eq!(back, eps.to_vec());
        let mut w = ReplayWriter::reopen(&path, 2).unwrap();
        w.append(&episode(4, 9.0)).unwrap();
        drop(w);
        let (_, back) = read_replay(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2].context, vec![9.0]);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTREPLAYxxxxxxxx").unwrap();
        assert!(read_replay(&path).is_err());
    }
}
