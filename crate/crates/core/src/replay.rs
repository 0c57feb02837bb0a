//! Episode-segment replay buffer carrying expert action distributions, and
//! the lazy re-planning that refreshes them.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterSet;
use crate::error::{Error, Result};
use crate::planner::{plan, PlannerConfig, PriorNoise};
use crate::world_model::{DiagGaussian, WorldModel};

/// Widen a policy log-std from `[-3, 1]` to `[-2, 1]` for re-planning.
pub fn remap_log_std(log_std: f64) -> f64 {
    log_std * 0.75 + 0.25
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// Expert action distribution at `obs`.
    pub pi: DiagGaussian,
    /// Update step of the parameters that produced `pi`.
    pub pi_version: u64,
    pub episode: u64,
    pub step: usize,
}

/// Address of a record that survives later pushes (until eviction).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RecordLoc {
    pub episode: u64,
    pub step: usize,
}

/// `horizon + 1` consecutive records of one episode.
#[derive(Clone, Debug)]
pub struct Segment {
    pub records: Vec<TransitionRecord>,
}

impl Segment {
    pub fn loc(&self, t: usize) -> RecordLoc {
        let r = &self.records[t];
        RecordLoc { episode: r.episode, step: r.step }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReanalyzeConfig {
    /// Re-plan after every `interval`-th update.
    pub interval: u64,
    /// Segments re-planned per tick.
    pub batch: usize,
    pub horizon: usize,
}

impl Default for ReanalyzeConfig {
    fn default() -> Self {
        Self { interval: 10, batch: 20, horizon: 3 }
    }
}

impl ReanalyzeConfig {
    /// An interval no run reaches: stored targets never change.
    pub fn disabled() -> Self {
        Self { interval: u64::MAX, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 || self.batch == 0 {
            return Err(Error::Config("reanalyze: interval and batch must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("reanalyze: horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether the update numbered `update_step` (1-based) triggers a tick.
    pub fn due(&self, update_step: u64) -> bool {
        update_step > 0 && update_step.is_multiple_of(self.interval)
    }

    /// Re-planned segments per sampled training segment.
    pub fn ratio(&self, batch_size: usize) -> f64 {
        self.batch as f64 / (self.interval as f64 * batch_size as f64)
    }
}

struct Episode {
    id: u64,
    records: Vec<TransitionRecord>,
}

/// FIFO buffer of whole episodes, bounded in transitions.
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    len: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Replay("capacity must be positive".into()));
        }
        Ok(Self { capacity, episodes: VecDeque::new(), len: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored transitions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episode_ids(&self) -> Vec<u64> {
        self.episodes.iter().map(|e| e.id).collect()
    }

    /// Append one episode, evicting the oldest ones beyond capacity.
    pub fn push_episode(&mut self, records: Vec<TransitionRecord>) -> Result<()> {
        let Some(first) = records.first() else { return Ok(()) };
        let id = first.episode;
        for (i, r) in records.iter().enumerate() {
            if r.episode != id {
                return Err(Error::Replay(format!("record {i} belongs to episode {} not {id}", r.episode)));
            }
            if r.step != i {
                return Err(Error::Replay(format!("record {i} carries step index {}", r.step)));
            }
            if !r.reward.is_finite() {
                return Err(Error::Replay(format!("record {i} has non-finite reward")));
            }
        }
        if self.episodes.iter().any(|e| e.id == id) {
            return Err(Error::Replay(format!("episode {id} already stored")));
        }
        self.len += records.len();
        self.episodes.push_back(Episode { id, records });
        while self.len > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("non-empty");
            self.len -= old.records.len();
        }
        Ok(())
    }

    fn episode(&self, id: u64) -> Option<&Episode> {
        // ids increase along the deque
        let idx = self.episodes.binary_search_by_key(&id, |e| e.id).ok()?;
        self.episodes.get(idx)
    }

    pub fn get(&self, loc: RecordLoc) -> Option<&TransitionRecord> {
        self.episode(loc.episode)?.records.get(loc.step)
    }

    /// Segment of `horizon + 1` records starting at `loc`.
    pub fn segment(&self, loc: RecordLoc, horizon: usize) -> Option<Segment> {
        let ep = self.episode(loc.episode)?;
        let end = loc.step + horizon + 1;
        (end <= ep.records.len()).then(|| Segment { records: ep.records[loc.step..end].to_vec() })
    }

    /// Number of valid segment starts.
    pub fn valid_starts(&self, horizon: usize) -> usize {
        self.episodes.iter().map(|e| (e.records.len()).saturating_sub(horizon)).sum()
    }

    /// `count` segments with start indices drawn uniformly over every valid
    /// start in the buffer. Segments never cross episodes.
    pub fn sample_segments(&self, count: usize, horizon: usize, rng: &mut impl Rng) -> Result<Vec<Segment>> {
        let total = self.valid_starts(horizon);
        if total == 0 {
            return Err(Error::Replay(format!("no episode holds {} transitions", horizon + 1)));
        }
        let mut cumulative = Vec::with_capacity(self.episodes.len());
        let mut acc = 0;
        for e in &self.episodes {
            acc += e.records.len().saturating_sub(horizon);
            cumulative.push(acc);
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let k = rng.random_range(0..total);
            let ei = cumulative.partition_point(|&c| c <= k);
            let before = if ei == 0 { 0 } else { cumulative[ei - 1] };
            let start = k - before;
            let ep = &self.episodes[ei];
            out.push(Segment { records: ep.records[start..start + horizon + 1].to_vec() });
        }
        Ok(out)
    }

    /// Replace one record's expert distribution. Returns false when the
    /// record has been evicted.
    pub fn update_pi(&mut self, loc: RecordLoc, pi: DiagGaussian, version: u64) -> bool {
        let Ok(idx) = self.episodes.binary_search_by_key(&loc.episode, |e| e.id) else { return false };
        match self.episodes[idx].records.get_mut(loc.step) {
            Some(r) => {
                r.pi = pi;
                r.pi_version = version;
                true
            }
            None => false,
        }
    }

    /// Counts of records by `current - pi_version`, bucketed by powers of
    /// two: `[0, 1, 2-3, 4-7, ...]`.
    pub fn freshness_histogram(&self, current: u64) -> Vec<usize> {
        let mut hist = Vec::new();
        for r in self.episodes.iter().flat_map(|e| &e.records) {
            let age = current.saturating_sub(r.pi_version);
            let bucket = if age == 0 { 0 } else { 64 - age.leading_zeros() as usize };
            if hist.len() <= bucket {
                hist.resize(bucket + 1, 0);
            }
            hist[bucket] += 1;
        }
        hist
    }

    /// Write every record with the same versioned, checksummed framing as
    /// parameter sets.
    pub fn dump(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(BUFFER_MAGIC);
        buf.extend_from_slice(&BUFFER_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.capacity as u64).to_le_bytes());
        buf.extend_from_slice(&(self.len as u64).to_le_bytes());
        let put_vec = |buf: &mut Vec<u8>, v: &[f64]| {
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        };
        for r in self.episodes.iter().flat_map(|e| &e.records) {
            buf.extend_from_slice(&r.episode.to_le_bytes());
            buf.extend_from_slice(&(r.step as u64).to_le_bytes());
            buf.extend_from_slice(&r.pi_version.to_le_bytes());
            buf.extend_from_slice(&r.reward.to_le_bytes());
            put_vec(&mut buf, &r.obs);
            put_vec(&mut buf, &r.action);
            put_vec(&mut buf, &r.next_obs);
            put_vec(&mut buf, &r.pi.mean);
            put_vec(&mut buf, &r.pi.log_std);
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn restore(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 28 {
            return Err(Error::Format("truncated replay dump".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
            return Err(Error::Format("replay dump checksum mismatch".into()));
        }
        let mut cur = Cursor { buf: body, pos: 0 };
        if cur.take(4)? != BUFFER_MAGIC {
            return Err(Error::Format("bad replay dump magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != BUFFER_VERSION {
            return Err(Error::Format(format!("unsupported replay dump version {version}")));
        }
        let capacity = cur.u64()? as usize;
        let count = cur.u64()? as usize;
        let mut buffer = Self::new(capacity)?;
        let mut pending: Vec<TransitionRecord> = Vec::new();
        for _ in 0..count {
            let episode = cur.u64()?;
            let step = cur.u64()? as usize;
            let pi_version = cur.u64()?;
            let reward = f64::from_bits(cur.u64()?);
            let obs = cur.vec()?;
            let action = cur.vec()?;
            let next_obs = cur.vec()?;
            let pi = DiagGaussian::new(cur.vec()?, cur.vec()?)?;
            if pending.first().is_some_and(|p| p.episode != episode) {
                buffer.push_episode(std::mem::take(&mut pending))?;
            }
            pending.push(TransitionRecord { obs, action, reward, next_obs, pi, pi_version, episode, step });
        }
        buffer.push_episode(pending)?;
        Ok(buffer)
    }
}

const BUFFER_MAGIC: &[u8; 4] = b"BMPR";
const BUFFER_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Format("truncated replay dump".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize;
        (0..n).map(|_| self.u64().map(f64::from_bits)).collect()
    }
}

/// Per-state seed for re-planning, shared with the exact objective. Keyed
/// by the stored location so a state shared by overlapping segments gets
/// one plan.
pub fn replan_seed(base: u64, update_step: u64, loc: RecordLoc) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for v in [update_step, loc.episode, loc.step as u64] {
        h = (h ^ v).wrapping_mul(0x1000_0000_01B3).rotate_left(29);
        h ^= h >> 31;
    }
    h
}

/// A fresh expert distribution for one stored state.
#[derive(Clone, Debug)]
pub struct Reanalyzed {
    pub loc: RecordLoc,
    pub pi: DiagGaussian,
}

#[derive(Clone, Debug, Default)]
pub struct ReanalyzeOutcome {
    pub updated: Vec<Reanalyzed>,
    pub failures: usize,
}

/// Re-plan every state of `segments` with the widened policy prior.
///
/// Runs without touching the buffer so it can execute on a snapshot in a
/// worker thread; [`apply_reanalyze`] writes the results back.
pub fn reanalyze_segments(
    model: &WorldModel,
    params: &ParameterSet,
    segments: &[Segment],
    planner: &PlannerConfig,
    cfg: &ReanalyzeConfig,
    update_step: u64,
    seed: u64,
) -> ReanalyzeOutcome {
    let pcfg = PlannerConfig { horizon: cfg.horizon, ..planner.clone() };
    let mut out = ReanalyzeOutcome::default();
    for seg in segments {
        for (t, rec) in seg.records.iter().enumerate() {
            let planned = model.encode_obs(params, &rec.obs).and_then(|z| {
                plan(model, params, &z, PriorNoise::Widened, None, &pcfg, replan_seed(seed, update_step, seg.loc(t)))
            });
            match planned {
                Ok(r) => out.updated.push(Reanalyzed { loc: seg.loc(t), pi: r.first }),
                Err(_) => out.failures += 1,
            }
        }
    }
    out
}

/// Write re-planned targets into the buffer. Only `pi` and `pi_version`
/// change. Returns how many records were still present.
pub fn apply_reanalyze(buffer: &mut ReplayBuffer, outcome: &ReanalyzeOutcome, version: u64) -> usize {
    outcome.updated.iter().filter(|u| buffer.update_pi(u.loc, u.pi.clone(), version)).count()
}

/// One inline lazy-reanalyze tick: re-plan the first `cfg.batch` segments
/// of `batch` and store the new targets, stamped with `update_step`.
#[allow(clippy::too_many_arguments)]
pub fn reanalyze_tick(
    buffer: &mut ReplayBuffer,
    batch: &[Segment],
    model: &WorldModel,
    params: &ParameterSet,
    planner: &PlannerConfig,
    cfg: &ReanalyzeConfig,
    update_step: u64,
    seed: u64,
) -> ReanalyzeOutcome {
    if !cfg.due(update_step) {
        return ReanalyzeOutcome::default();
    }
    let take = cfg.batch.min(batch.len());
    let outcome = reanalyze_segments(model, params, &batch[..take], planner, cfg, update_step, seed);
    apply_reanalyze(buffer, &outcome, update_step);
    outcome
}
