use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::approximator::format::fmt_f64;
use crate::env::{NoiseKind, NoiseModel};
use crate::error::{Error, Result, io_err};
use crate::learner::{Schedule, UpdateConfig};
use crate::qp::QpSettings;
use crate::structure::MaskSpec;

/// The five penalty configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConfigId {
    FixedConstraints,
    FreeC,
    DeviationPenalty,
    SiPenalty,
    Combined,
}

impl ConfigId {
    pub const ALL: [ConfigId; 5] = [
        ConfigId::FixedConstraints,
        ConfigId::FreeC,
        ConfigId::DeviationPenalty,
        ConfigId::SiPenalty,
        ConfigId::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConfigId::FixedConstraints => "fixed_constraints",
            ConfigId::FreeC => "free_c",
            ConfigId::DeviationPenalty => "deviation_penalty",
            ConfigId::SiPenalty => "si_penalty",
            ConfigId::Combined => "combined",
        }
    }

    pub fn learns_constraints(self) -> bool {
        self != ConfigId::FixedConstraints
    }

    pub fn uses_deviation(self) -> bool {
        matches!(self, ConfigId::DeviationPenalty | ConfigId::Combined)
    }

    pub fn uses_si(self) -> bool {
        matches!(self, ConfigId::SiPenalty | ConfigId::Combined)
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConfigId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConfigId::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown config_id {s:?}")))
    }
}

pub fn parse_noise(s: &str) -> Result<NoiseKind> {
    match s {
        "gaussian" => Ok(NoiseKind::Gaussian),
        "brownian" => Ok(NoiseKind::Brownian),
        _ => Err(Error::Config(format!("unknown noise {s:?}, expected gaussian or brownian"))),
    }
}

pub fn noise_name(kind: NoiseKind) -> &'static str {
    match kind {
        NoiseKind::None => "none",
        NoiseKind::Gaussian => "gaussian",
        NoiseKind::Brownian => "brownian",
    }
}

/// Model behind the reference matrix of the deviation penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceModel {
    /// The corrupted model the approximator is initialized from.
    Corrupted,
    True,
}

impl FromStr for ReferenceModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrupted" => Ok(ReferenceModel::Corrupted),
            "true" => Ok(ReferenceModel::True),
            _ => Err(Error::Config(format!("unknown reference model {s:?}; expected corrupted or true"))),
        }
    }
}

impl fmt::Display for ReferenceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReferenceModel::Corrupted => "corrupted",
            ReferenceModel::True => "true",
        })
    }
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub config_id: ConfigId,
    pub noise: NoiseKind,
    /// Apply process noise to the velocity coordinates only.
    pub noise_velocity_only: bool,
    pub reference_model: ReferenceModel,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub beta: f64,
    pub delta: f64,
    pub horizon: usize,
    pub seed_env: u64,
    pub seed_corruption: u64,
    pub seed_init: u64,
    pub seed_exploration: u64,
    pub seed_eval: u64,
    pub alpha_cost: f64,
    pub alpha_constraint: f64,
    pub batch_size: usize,
    pub si_samples: usize,
    pub psd_floor: f64,
    pub slack_weight: f64,
    pub max_grad_cost: f64,
    pub max_grad_constraint: f64,
    /// Range of the random initial diagonal stage cost.
    pub init_cost_min: f64,
    pub init_cost_max: f64,
    /// Range of the random initial constant term.
    pub init_offset_min: f64,
    pub init_offset_max: f64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub updates_per_episode: usize,
    pub buffer_capacity: usize,
    pub log_every: usize,
    pub eval_rollouts: usize,
    pub eval_steps: usize,
    pub exploration_start: f64,
    pub exploration_end: f64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let schedule = Schedule::default();
        let update = UpdateConfig::default();
        let mask = MaskSpec::default();
        Self {
            config_id: ConfigId::FreeC,
            noise: NoiseKind::Gaussian,
            noise_velocity_only: false,
            reference_model: ReferenceModel::Corrupted,
            c1: mask.c1,
            c2: mask.c2,
            c3: mask.c3,
            beta: 1e-6,
            delta: 0.05,
            horizon: 10,
            seed_env: 1,
            seed_corruption: 2,
            seed_init: 3,
            seed_exploration: 4,
            seed_eval: 5,
            alpha_cost: update.alpha_cost,
            alpha_constraint: update.alpha_constraint,
            batch_size: update.batch_size,
            si_samples: update.si_samples,
            psd_floor: update.psd_floor,
            slack_weight: 100.0,
            max_grad_cost: update.max_grad_cost,
            max_grad_constraint: update.max_grad_constraint,
            init_cost_min: 0.1,
            init_cost_max: 1.0,
            init_offset_min: 0.0,
            init_offset_max: 1.0,
            solver_tol: 1e-8,
            solver_max_iter: 100,
            episodes: 40,
            steps_per_episode: schedule.steps_per_episode,
            updates_per_episode: 3,
            buffer_capacity: schedule.buffer_capacity,
            log_every: schedule.log_every,
            eval_rollouts: schedule.eval_rollouts,
            eval_steps: schedule.eval_steps,
            exploration_start: schedule.exploration_start,
            exploration_end: schedule.exploration_end,
            out: default_out_root().join("run"),
        }
    }
}

/// Output root: `$QPRL_OUT` when set, else `./qprl_out`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("QPRL_OUT").map_or_else(|| PathBuf::from("qprl_out"), PathBuf::from)
}

/// Fields that must agree for two runs to be compared.
pub const SCHEDULE_KEYS: &[&str] = &[
    "noise",
    "noise_velocity_only",
    "horizon",
    "delta",
    "episodes",
    "steps_per_episode",
    "updates_per_episode",
    "batch_size",
    "log_every",
    "eval_rollouts",
    "eval_steps",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl ExperimentConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "config_id" => self.config_id = value.parse()?,
            "noise" => self.noise = parse_noise(value)?,
            "noise_velocity_only" => self.noise_velocity_only = parse(key, value)?,
            "reference_model" => self.reference_model = value.parse()?,
            "c1" => self.c1 = parse(key, value)?,
            "c2" => self.c2 = parse(key, value)?,
            "c3" => self.c3 = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "seed_env" => self.seed_env = parse(key, value)?,
            "seed_corruption" => self.seed_corruption = parse(key, value)?,
            "seed_init" => self.seed_init = parse(key, value)?,
            "seed_exploration" => self.seed_exploration = parse(key, value)?,
            "seed_eval" => self.seed_eval = parse(key, value)?,
            "alpha_cost" => self.alpha_cost = parse(key, value)?,
            "alpha_constraint" => self.alpha_constraint = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "si_samples" => self.si_samples = parse(key, value)?,
            "psd_floor" => self.psd_floor = parse(key, value)?,
            "slack_weight" => self.slack_weight = parse(key, value)?,
            "max_grad_cost" => self.max_grad_cost = parse(key, value)?,
            "max_grad_constraint" => self.max_grad_constraint = parse(key, value)?,
            "init_cost_min" => self.init_cost_min = parse(key, value)?,
            "init_cost_max" => self.init_cost_max = parse(key, value)?,
            "init_offset_min" => self.init_offset_min = parse(key, value)?,
            "init_offset_max" => self.init_offset_max = parse(key, value)?,
            "solver_tol" => self.solver_tol = parse(key, value)?,
            "solver_max_iter" => self.solver_max_iter = parse(key, value)?,
            "episodes" => self.episodes = parse(key, value)?,
            "steps_per_episode" => self.steps_per_episode = parse(key, value)?,
            "updates_per_episode" => self.updates_per_episode = parse(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "eval_rollouts" => self.eval_rollouts = parse(key, value)?,
            "eval_steps" => self.eval_steps = parse(key, value)?,
            "exploration_start" => self.exploration_start = parse(key, value)?,
            "exploration_end" => self.exploration_end = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text)
    }

    /// Every field as `(key, value)`, in a fixed order; floats are written exactly.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| fmt_f64(v);
        vec![
            ("config_id", self.config_id.to_string()),
            ("noise", noise_name(self.noise).to_string()),
            ("noise_velocity_only", self.noise_velocity_only.to_string()),
            ("reference_model", self.reference_model.to_string()),
            ("c1", f(self.c1)),
            ("c2", f(self.c2)),
            ("c3", f(self.c3)),
            ("beta", f(self.beta)),
            ("delta", f(self.delta)),
            ("horizon", self.horizon.to_string()),
            ("seed_env", self.seed_env.to_string()),
            ("seed_corruption", self.seed_corruption.to_string()),
            ("seed_init", self.seed_init.to_string()),
            ("seed_exploration", self.seed_exploration.to_string()),
            ("seed_eval", self.seed_eval.to_string()),
            ("alpha_cost", f(self.alpha_cost)),
            ("alpha_constraint", f(self.alpha_constraint)),
            ("batch_size", self.batch_size.to_string()),
            ("si_samples", self.si_samples.to_string()),
            ("psd_floor", f(self.psd_floor)),
            ("slack_weight", f(self.slack_weight)),
            ("max_grad_cost", f(self.max_grad_cost)),
            ("max_grad_constraint", f(self.max_grad_constraint)),
            ("init_cost_min", f(self.init_cost_min)),
            ("init_cost_max", f(self.init_cost_max)),
            ("init_offset_min", f(self.init_offset_min)),
            ("init_offset_max", f(self.init_offset_max)),
            ("solver_tol", f(self.solver_tol)),
            ("solver_max_iter", self.solver_max_iter.to_string()),
            ("episodes", self.episodes.to_string()),
            ("steps_per_episode", self.steps_per_episode.to_string()),
            ("updates_per_episode", self.updates_per_episode.to_string()),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("log_every", self.log_every.to_string()),
            ("eval_rollouts", self.eval_rollouts.to_string()),
            ("eval_steps", self.eval_steps.to_string()),
            ("exploration_start", f(self.exploration_start)),
            ("exploration_end", f(self.exploration_end)),
            ("out", self.out.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return bad("delta must be finite and nonnegative");
        }
        if !(self.slack_weight.is_finite() && self.slack_weight >= 0.0) {
            return bad("slack_weight must be finite and nonnegative");
        }
        if !(self.init_cost_min <= self.init_cost_max && self.init_offset_min <= self.init_offset_max) {
            return bad("initialization ranges are inverted");
        }
        if !(self.solver_tol > 0.0) || self.solver_max_iter == 0 {
            return bad("solver tolerance and iteration limit must be positive");
        }
        if self.noise == NoiseKind::None {
            return bad("noise must be gaussian or brownian");
        }
        self.update_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.schedule().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Default noise of the configured kind, with the position coordinates
    /// silenced when requested.
    pub fn noise_model(&self) -> NoiseModel {
        let mut noise = NoiseModel::default_for(self.noise);
        if self.noise_velocity_only {
            noise.sigma[0] = 0.0;
            noise.sigma[1] = 0.0;
        }
        noise
    }

    pub fn mask(&self) -> MaskSpec {
        if self.config_id.uses_deviation() {
            MaskSpec {
                c1: self.c1,
                c2: self.c2,
                c3: self.c3,
            }
        } else {
            MaskSpec::ZERO
        }
    }

    pub fn effective_beta(&self) -> f64 {
        if self.config_id.uses_si() { self.beta } else { 0.0 }
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            alpha_cost: self.alpha_cost,
            alpha_constraint: self.alpha_constraint,
            gamma: 0.9,
            batch_size: self.batch_size,
            mask: self.mask(),
            beta: self.effective_beta(),
            si_samples: self.si_samples,
            psd_floor: self.psd_floor,
            max_grad_cost: self.max_grad_cost,
            max_grad_constraint: self.max_grad_constraint,
            settings: QpSettings {
                tol: self.solver_tol,
                max_iter: self.solver_max_iter,
                polish: false,
                check_degeneracy: false,
            },
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            episodes: self.episodes,
            steps_per_episode: self.steps_per_episode,
            updates_per_episode: self.updates_per_episode,
            buffer_capacity: self.buffer_capacity,
            log_every: self.log_every,
            eval_rollouts: self.eval_rollouts,
            eval_steps: self.eval_steps,
            exploration_start: self.exploration_start,
            exploration_end: self.exploration_end,
        }
    }
}
