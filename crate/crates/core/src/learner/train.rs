use nalgebra::DVector;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::replay::{ReplayBuffer, Transition, sample_sequences};
use super::update::{UpdateConfig, update_step};
use super::{batch_gradient, td_error};
use crate::approximator::{ThetaParams, policy};
use crate::env::{NoiseModel, PointMassEnv, PointMassParams};
use crate::error::{Error, Result};
use crate::qp::QpSettings;
use crate::structure::{BandedReference, band_metrics, build_c_mask, deviation_penalty_value, si_penalty_value};

/// Episode and logging schedule of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Gradient steps after each episode.
    pub updates_per_episode: usize,
    pub buffer_capacity: usize,
    /// Episodes between log rows; a row is also written before training and at the end.
    pub log_every: usize,
    pub eval_rollouts: usize,
    pub eval_steps: usize,
    pub exploration_start: f64,
    pub exploration_end: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            episodes: 200,
            steps_per_episode: 50,
            updates_per_episode: 10,
            buffer_capacity: 10_000,
            log_every: 10,
            eval_rollouts: 10,
            eval_steps: 50,
            exploration_start: 0.1,
            exploration_end: 0.01,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("episodes", self.episodes),
            ("steps_per_episode", self.steps_per_episode),
            ("buffer_capacity", self.buffer_capacity),
            ("log_every", self.log_every),
            ("eval_rollouts", self.eval_rollouts),
            ("eval_steps", self.eval_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParams(format!("{name} must be positive")));
            }
        }
        if !(self.exploration_start >= 0.0 && self.exploration_end >= 0.0) {
            return Err(Error::InvalidParams("exploration scales must be nonnegative".into()));
        }
        Ok(())
    }

    /// Exploration standard deviation for episode `ep`, linear from start to end.
    pub fn exploration(&self, ep: usize) -> f64 {
        let frac = if self.episodes > 1 {
            ep as f64 / (self.episodes - 1) as f64
        } else {
            0.0
        };
        self.exploration_start + (self.exploration_end - self.exploration_start) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSeeds {
    /// Environment noise and initial states.
    pub env: u64,
    /// Exploration noise, batch and sequence sampling.
    pub exploration: u64,
    /// Evaluation initial states and noise.
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// Completed episodes.
    pub iteration: usize,
    pub j_eval: f64,
    pub td_error_mean: f64,
    pub deviation_penalty: f64,
    pub si_penalty: f64,
    pub off_band_l1: f64,
    pub on_band_l1: f64,
    /// Cumulative count of skipped update steps.
    pub skipped_updates: usize,
}

/// TD error of a logged diagnostic transition under the snapshot at `iteration`.
#[derive(Debug, Clone, PartialEq)]
pub struct TdSample {
    pub iteration: usize,
    pub transition: Transition,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub theta: ThetaParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub theta: ThetaParams,
    pub log: Vec<LogRow>,
    pub snapshots: Vec<Snapshot>,
    pub td_samples: Vec<TdSample>,
    /// Transitions dropped from batches because a QP was not solved.
    pub skipped_transitions: usize,
    /// Rollout steps where the policy QP failed and the zero action was used.
    pub policy_failures: usize,
}

/// Mean cumulative cost of the greedy policy from each initial state, with
/// rollout `i` driven by noise seeded from `seed + i`.
pub fn evaluate_policy(
    theta: &ThetaParams,
    params: &PointMassParams,
    noise: &NoiseModel,
    initial_states: &[DVector<f64>],
    steps: usize,
    seed: u64,
    settings: &QpSettings,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut failures = 0;
    for (i, s0) in initial_states.iter().enumerate() {
        let mut env = PointMassEnv::new(params.clone(), noise.clone(), seed.wrapping_add(i as u64));
        env.reset_to(s0.clone());
        let mut s = s0.clone();
        for _ in 0..steps {
            let a = policy(theta, &s, settings).unwrap_or_else(|_| {
                failures += 1;
                DVector::zeros(params.n_u())
            });
            let (next, cost) = env.step(&a);
            total += cost;
            s = next;
        }
    }
    (total / initial_states.len().max(1) as f64, failures)
}

fn gaussian<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        std * z
    })
}

/// Independent streams so that configurations differing only in their
/// penalties draw identical exploration noise and batches.
struct SamplingRngs {
    exploration: ChaCha8Rng,
    batch: ChaCha8Rng,
    sequences: ChaCha8Rng,
}

impl SamplingRngs {
    fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Self {
            exploration: stream(0),
            batch: stream(1),
            sequences: stream(2),
        }
    }
}

struct Trainer<'a> {
    params: &'a PointMassParams,
    noise: &'a NoiseModel,
    cfg: &'a UpdateConfig,
    band: &'a BandedReference,
    schedule: &'a Schedule,
    seeds: TrainSeeds,
    eval_states: Vec<DVector<f64>>,
    out: TrainOutput,
    skipped_updates: usize,
}

impl Trainer<'_> {
    fn log(&mut self, iteration: usize, buffer: &ReplayBuffer) -> Result<()> {
        let theta = &self.out.theta;
        let (j_eval, failures) = evaluate_policy(
            theta,
            self.params,
            self.noise,
            &self.eval_states,
            self.schedule.eval_steps,
            self.seeds.eval,
            &self.cfg.settings,
        );
        self.out.policy_failures += failures;

        let recent = buffer.len().saturating_sub(self.cfg.batch_size);
        let mut deltas = Vec::new();
        for t in buffer.iter().skip(recent) {
            if let Ok(delta) = td_error(theta, t, self.cfg.gamma, &self.cfg.settings) {
                deltas.push(delta);
                self.out.td_samples.push(TdSample {
                    iteration,
                    transition: t.clone(),
                    delta,
                });
            }
        }
        let td_error_mean = if deltas.is_empty() {
            f64::NAN
        } else {
            deltas.iter().sum::<f64>() / deltas.len() as f64
        };

        let mask = build_c_mask(&self.cfg.mask, self.band);
        let sequences = buffer.recent_sequences(self.cfg.si_samples, self.band.horizon);
        let metrics = band_metrics(&theta.eq_matrix, self.band)?;
        self.out.log.push(LogRow {
            iteration,
            j_eval,
            td_error_mean,
            deviation_penalty: deviation_penalty_value(&theta.eq_matrix, self.band, &mask)?,
            si_penalty: si_penalty_value(&theta.eq_matrix, &sequences, self.cfg.beta)?,
            off_band_l1: metrics.off_band_l1,
            on_band_l1: metrics.on_band_l1,
            skipped_updates: self.skipped_updates,
        });
        self.out.snapshots.push(Snapshot {
            iteration,
            theta: theta.clone(),
        });
        Ok(())
    }

    fn update_epoch(&mut self, buffer: &ReplayBuffer, rngs: &mut SamplingRngs) -> Result<()> {
        if buffer.len() < self.cfg.batch_size {
            return Ok(());
        }
        for _ in 0..self.schedule.updates_per_episode {
            let batch = buffer.sample_batch(self.cfg.batch_size, &mut rngs.batch);
            let grad = match batch_gradient(&self.out.theta, &batch, self.cfg.gamma, &self.cfg.settings) {
                Ok(grad) => grad,
                Err(Error::EmptyBatch) => {
                    self.out.skipped_transitions += batch.len();
                    self.skipped_updates += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            self.out.skipped_transitions += grad.skipped;
            let sequences = if self.cfg.beta > 0.0 {
                sample_sequences(buffer, self.cfg.si_samples, self.band.horizon, &mut rngs.sequences)
                    .unwrap_or_default()
            } else {
                Vec::new()
            };
            let g = self.cfg.clip_gradient(&self.out.theta, &grad.gradient);
            let (theta, diag) = update_step(&self.out.theta, &g, &sequences, self.cfg, self.band)?;
            if diag.accepted {
                self.out.theta = theta;
            } else {
                self.skipped_updates += 1;
            }
        }
        Ok(())
    }
}

/// Q-learning with replay: each episode collects a rollout of the greedy
/// policy plus decaying Gaussian exploration, then runs the scheduled
/// update steps.
pub fn train(
    params: &PointMassParams,
    noise: &NoiseModel,
    theta0: ThetaParams,
    cfg: &UpdateConfig,
    band: &BandedReference,
    schedule: &Schedule,
    seeds: TrainSeeds,
) -> Result<TrainOutput> {
    cfg.validate()?;
    schedule.validate()?;
    theta0.validate()?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seeds.eval);
    let mut scratch = noise.clone();
    let eval_states = (0..schedule.eval_rollouts)
        .map(|_| crate::env::reset(&mut scratch, &mut eval_rng))
        .collect();
    let mut trainer = Trainer {
        params,
        noise,
        cfg,
        band,
        schedule,
        seeds,
        eval_states,
        out: TrainOutput {
            theta: theta0,
            log: Vec::new(),
            snapshots: Vec::new(),
            td_samples: Vec::new(),
            skipped_transitions: 0,
            policy_failures: 0,
        },
        skipped_updates: 0,
    };
    let mut env = PointMassEnv::new(params.clone(), noise.clone(), seeds.env);
    let mut rngs = SamplingRngs::new(seeds.exploration);
    let mut buffer = ReplayBuffer::new(schedule.buffer_capacity);
    trainer.log(0, &buffer)?;

    for ep in 0..schedule.episodes {
        let std = schedule.exploration(ep);
        buffer.start_episode();
        let mut s = env.reset();
        for _ in 0..schedule.steps_per_episode {
            let greedy = policy(&trainer.out.theta, &s, &cfg.settings).unwrap_or_else(|_| {
                trainer.out.policy_failures += 1;
                DVector::zeros(params.n_u())
            });
            let a = params.clip_action(&(greedy + gaussian(params.n_u(), std, &mut rngs.exploration)));
            let (next, cost) = env.step(&a);
            buffer.push(Transition::new(s, a, next.clone(), cost)?);
            s = next;
        }
        trainer.update_epoch(&buffer, &mut rngs)?;
        let done = ep + 1;
        if done % schedule.log_every == 0 || done == schedule.episodes {
            trainer.log(done, &buffer)?;
        }
    }
    Ok(trainer.out)
}
