use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::eval::{evaluate, EvalReport, MpcActor, PolicyKind};
use super::metrics::MetricsSink;
use crate::autodiff::ParameterSet;
use crate::envs::make_env;
use crate::error::{Error, Result};
use crate::learner::Learner;
use crate::planner::{act, ActMode, PlannerConfig};
use crate::replay::{apply_reanalyze, reanalyze_segments, ReanalyzeConfig, ReplayBuffer, Segment, TransitionRecord};
use crate::world_model::{DiagGaussian, WorldModel};

/// Log-std of the Gaussian matching the variance of `U(-1, 1)`.
const UNIFORM_LOG_STD: f64 = -0.549_306_144_334_054_8;

/// Seed of the `episode`-th training reset.
pub fn episode_seed(run_seed: u64, episode: u64) -> u64 {
    let mut h = run_seed.wrapping_add(0xA076_1D64_78BD_642F).wrapping_mul(0xE703_7ED1_A0B4_28DB);
    h ^= episode.wrapping_mul(0x8EBC_6AF0_9C88_C6E3);
    h ^ (h >> 29)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ReanalyzeStats {
    pub ticks: u64,
    pub segments: u64,
    pub states: u64,
    pub failures: u64,
    /// Targets written back (re-planned states still in the buffer).
    pub applied: u64,
}

impl ReanalyzeStats {
    /// Re-planned segments per segment sampled for training.
    pub fn ratio(&self, updates: u64, batch_size: usize) -> f64 {
        if updates == 0 {
            0.0
        } else {
            self.segments as f64 / (updates as f64 * batch_size as f64)
        }
    }
}

struct Job {
    segments: Vec<Segment>,
    params: Arc<ParameterSet>,
    update_step: u64,
}

/// Runs re-planning either inline on the trainer thread or on a worker
/// that consumes parameter snapshots.
enum Reanalyzer {
    Inline,
    Worker { tx: SyncSender<Job>, handle: JoinHandle<Result<()>> },
}

struct Shared {
    buffer: Arc<RwLock<ReplayBuffer>>,
    stats: Arc<Mutex<ReanalyzeStats>>,
    model: WorldModel,
    planner: PlannerConfig,
    cfg: ReanalyzeConfig,
    seed: u64,
}

impl Shared {
    fn run(&self, segments: &[Segment], params: &ParameterSet, update_step: u64) {
        let outcome =
            reanalyze_segments(&self.model, params, segments, &self.planner, &self.cfg, update_step, self.seed);
        let applied = apply_reanalyze(&mut self.buffer.write().expect("buffer lock"), &outcome, update_step);
        let mut s = self.stats.lock().expect("stats lock");
        s.ticks += 1;
        s.segments += segments.len() as u64;
        s.states += segments.iter().map(|g| g.records.len() as u64).sum::<u64>();
        s.failures += outcome.failures as u64;
        s.applied += applied as u64;
    }
}

impl Reanalyzer {
    fn start(concurrent: bool, shared: Arc<Shared>) -> Self {
        if !concurrent {
            return Self::Inline;
        }
        let (tx, rx) = sync_channel::<Job>(2);
        let handle = std::thread::spawn(move || {
            while let Ok(job) = rx.recv() {
                shared.run(&job.segments, &job.params, job.update_step);
            }
            Ok(())
        });
        Self::Worker { tx, handle }
    }

    fn tick(&self, shared: &Shared, segments: Vec<Segment>, params: &ParameterSet, update_step: u64) -> Result<()> {
        match self {
            Self::Inline => {
                shared.run(&segments, params, update_step);
                Ok(())
            }
            Self::Worker { tx, .. } => tx
                .send(Job { segments, params: Arc::new(params.clone()), update_step })
                .map_err(|_| Error::Replay("reanalyze worker stopped".into())),
        }
    }

    /// Drain outstanding work.
    fn finish(self) -> Result<()> {
        match self {
            Self::Inline => Ok(()),
            Self::Worker { tx, handle } => {
                drop(tx);
                handle.join().map_err(|_| Error::Replay("reanalyze worker panicked".into()))?
            }
        }
    }
}

#[derive(Serialize)]
struct EpisodeEvent {
    episode: u64,
    #[serde(rename = "return")]
    ret: f64,
    seeding: bool,
}

#[derive(Serialize)]
struct UpdateEvent {
    update_step: u64,
    model_loss: f64,
    value_loss: f64,
    policy_kl: f64,
    policy_entropy: f64,
    #[serde(rename = "S")]
    s: f64,
    grad_norm: f64,
}

#[derive(Serialize)]
struct ReplayEvent {
    transitions: usize,
    updates: u64,
    #[serde(flatten)]
    reanalyze: ReanalyzeStats,
    ratio: f64,
    /// Counts of stored targets by age in updates: 0, 1, 2-3, 4-7, ...
    freshness: Vec<usize>,
}

/// Result of a finished run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Evaluations with their environment-step stamps.
    pub evals: Vec<(u64, EvalReport)>,
    pub env_steps: u64,
    pub updates: u64,
    pub reanalyze: ReanalyzeStats,
    /// The event stream, when kept in memory.
    pub events: Vec<serde_json::Value>,
    pub out_dir: Option<PathBuf>,
}

impl TrainOutcome {
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.evals.last().map(|(_, r)| r)
    }
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    learner: Learner,
    shared: Arc<Shared>,
    sink: MetricsSink,
    rng: ChaCha8Rng,
    out_dir: Option<PathBuf>,
    env_steps: u64,
    evals: Vec<(u64, EvalReport)>,
}

impl Trainer<'_> {
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            env: self.cfg.env.clone(),
            env_steps: self.env_steps,
            update_steps: self.learner.steps,
            scale: self.learner.scale,
            model_config: self.learner.model.config().clone(),
            params: self.learner.params.clone(),
            target: self.learner.target.clone(),
        }
    }

    fn save(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            self.checkpoint().save(&dir.join(name))?;
        }
        Ok(())
    }

    fn collect_episode(&mut self, episode: u64) -> Result<(Vec<TransitionRecord>, f64, bool)> {
        let mut env = make_env(&self.cfg.env)?;
        let spec = env.spec().clone();
        let seeding = self.env_steps < self.cfg.seed_steps as u64;
        let mut obs = env.reset(episode_seed(self.cfg.seed, episode));
        let mut actor = MpcActor::new(&self.learner.model, &self.learner.params, &self.cfg.planner);
        let mut records = Vec::with_capacity(spec.decisions());
        let mut total = 0.0;
        for t in 0..spec.decisions() {
            let (action, pi) = if self.env_steps < self.cfg.seed_steps as u64 {
                let a: Vec<f64> = (0..spec.action_dim).map(|_| self.rng.random_range(-1.0..=1.0)).collect();
                (a, DiagGaussian::new(vec![0.0; spec.action_dim], vec![UNIFORM_LOG_STD; spec.action_dim])?)
            } else {
                let r = actor.plan(&obs, self.rng.random())?;
                (act(&r, ActMode::Stochastic, &mut self.rng), r.first)
            };
            let step = env.step(&action)?;
            total += step.reward;
            records.push(TransitionRecord {
                obs: std::mem::replace(&mut obs, step.obs.clone()),
                action,
                reward: step.reward,
                next_obs: step.obs,
                pi,
                pi_version: self.learner.steps,
                episode,
                step: t,
            });
            self.env_steps += spec.action_repeat as u64;
        }
        Ok((records, total, seeding))
    }

    fn update(&mut self, reanalyzer: &Reanalyzer) -> Result<()> {
        let segments = self.shared.buffer.read().expect("buffer lock").sample_segments(
            self.cfg.learner.batch_size,
            self.cfg.learner.horizon,
            &mut self.rng,
        )?;
        let m = match self.learner.update(&segments) {
            Ok(m) => m,
            Err(e) => {
                #[derive(Serialize)]
                struct Abort {
                    update_step: u64,
                    error: String,
                }
                let abort = Abort { update_step: self.learner.steps, error: e.to_string() };
                self.sink.emit("abort", self.env_steps, &abort)?;
                self.save("abort.ckpt")?;
                return Err(e);
            }
        };
        self.sink.emit(
            "update",
            self.env_steps,
            &UpdateEvent {
                update_step: m.step,
                model_loss: m.model_loss,
                value_loss: m.value_loss,
                policy_kl: m.policy_kl,
                policy_entropy: m.policy_entropy,
                s: m.s,
                grad_norm: m.grad_norm,
            },
        )?;
        if self.cfg.reanalyze.due(self.learner.steps) {
            let take = self.cfg.reanalyze.batch.min(segments.len());
            let mut segments = segments;
            segments.truncate(take);
            reanalyzer.tick(&self.shared, segments, &self.learner.params, self.learner.steps)?;
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let report = evaluate(
            &self.learner.model,
            &self.learner.params,
            &self.cfg.env,
            self.cfg.eval_episodes,
            &[PolicyKind::Mpc, PolicyKind::Network],
            &self.cfg.planner,
            self.cfg.eval_seed,
        )?;
        self.sink.emit("eval", self.env_steps, &report)?;
        let buffer = self.shared.buffer.read().expect("buffer lock");
        let stats = *self.shared.stats.lock().expect("stats lock");
        let replay = ReplayEvent {
            transitions: buffer.len(),
            updates: self.learner.steps,
            reanalyze: stats,
            ratio: stats.ratio(self.learner.steps, self.cfg.learner.batch_size),
            freshness: buffer.freshness_histogram(self.learner.steps),
        };
        drop(buffer);
        self.sink.emit("replay", self.env_steps, &replay)?;
        self.evals.push((self.env_steps, report));
        Ok(())
    }
}

/// Run training. With `out_dir`, writes `config.txt`, `metrics.jsonl` and
/// checkpoints there; otherwise the event stream is kept in memory.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.sync_dims()?;
    cfg.validate()?;
    let sink = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.txt"), cfg.to_text())?;
            MetricsSink::create(&dir.join("metrics.jsonl"), false)?
        }
        None => MetricsSink::in_memory(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, params) = WorldModel::new(cfg.model.clone(), &mut rng)?;
    let learner = Learner::new(cfg.learner.clone(), model.clone(), params)?;
    let shared = Arc::new(Shared {
        buffer: Arc::new(RwLock::new(ReplayBuffer::new(cfg.buffer_capacity)?)),
        stats: Arc::new(Mutex::new(ReanalyzeStats::default())),
        model,
        planner: cfg.planner.clone(),
        cfg: cfg.reanalyze.clone(),
        seed: cfg.seed,
    });
    let reanalyzer = Reanalyzer::start(cfg.concurrent_reanalyze, Arc::clone(&shared));
    let mut trainer = Trainer {
        cfg: &cfg,
        learner,
        shared,
        sink,
        rng,
        out_dir: out_dir.map(Path::to_path_buf),
        env_steps: 0,
        evals: Vec::new(),
    };

    let result = run_loop(&mut trainer, &reanalyzer);
    let finished = reanalyzer.finish();
    result?;
    finished?;
    if trainer.env_steps > 0 && trainer.evals.last().map(|e| e.0) != Some(trainer.env_steps) {
        trainer.evaluate()?;
    }
    trainer.save("final.ckpt")?;
    let stats = *trainer.shared.stats.lock().expect("stats lock");
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        evals: trainer.evals,
        env_steps: trainer.env_steps,
        updates: trainer.learner.steps,
        reanalyze: stats,
        events: trainer.sink.events().to_vec(),
        out_dir: trainer.out_dir,
    })
}

fn run_loop(t: &mut Trainer<'_>, reanalyzer: &Reanalyzer) -> Result<()> {
    let cfg = t.cfg;
    let total = cfg.total_steps as u64;
    let mut episode = 0u64;
    let mut pretrained = false;
    let mut owed = 0.0;
    let mut next_eval = if cfg.eval_interval > 0 { cfg.eval_interval as u64 } else { u64::MAX };
    let mut next_ckpt = if cfg.checkpoint_interval > 0 { cfg.checkpoint_interval as u64 } else { u64::MAX };
    while t.env_steps < total {
        let before = t.env_steps;
        let (records, ret, seeding) = t.collect_episode(episode)?;
        t.shared.buffer.write().expect("buffer lock").push_episode(records)?;
        t.sink.emit("episode", t.env_steps, &EpisodeEvent { episode, ret, seeding })?;
        episode += 1;

        let updates = if t.env_steps < cfg.seed_steps as u64 {
            0
        } else if !pretrained {
            pretrained = true;
            if cfg.pretrain_updates > 0 {
                cfg.pretrain_updates
            } else {
                (t.env_steps as f64 * cfg.utd).round() as usize
            }
        } else {
            owed += (t.env_steps - before) as f64 * cfg.utd;
            let n = owed.floor();
            owed -= n;
            n as usize
        };
        for _ in 0..updates {
            t.update(reanalyzer)?;
        }
        if pretrained && cfg.freeze_policy {
            t.learner.freeze_policy = true;
        }
        if t.env_steps >= next_eval {
            t.evaluate()?;
            while next_eval <= t.env_steps {
                next_eval = next_eval.saturating_add(cfg.eval_interval as u64);
            }
            let reached = t.evals.last().and_then(|(_, r)| r.mpc.as_ref()).map(|r| r.mean);
            if let (Some(goal), Some(ret)) = (cfg.stop_return, reached) {
                if ret >= goal {
                    break;
                }
            }
        }
        if t.env_steps >= next_ckpt {
            t.save(&format!("step{}.ckpt", t.env_steps))?;
            while next_ckpt <= t.env_steps {
                next_ckpt = next_ckpt.saturating_add(cfg.checkpoint_interval as u64);
            }
        }
    }
    Ok(())
}
