use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, SCHEDULE_KEYS, noise_name};
use super::run::{LEARNING_CURVE, MANIFEST, read_learning_curve};
use crate::approximator::format::fmt_f64;
use crate::error::{Error, Result, io_err};
use crate::learner::LogRow;

/// Number of final log rows averaged into the tail cost.
pub const TAIL_ROWS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub initial_j: f64,
    pub final_j: f64,
    /// Mean `J_eval` over the last [`TAIL_ROWS`] rows after the initial one.
    pub tail_j: f64,
    /// `1 - tail_j / initial_j`.
    pub improvement: f64,
    pub off_band_l1: f64,
    pub on_band_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFlags {
    pub first: usize,
    pub second: usize,
    pub tail_j_diff: f64,
    pub first_lower_j: bool,
    pub off_band_diff: f64,
    pub first_sparser: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunSummary>,
    pub pairs: Vec<PairFlags>,
}

pub fn tail_mean(log: &[LogRow]) -> f64 {
    let trained = if log.len() > 1 { &log[1..] } else { log };
    let tail = &trained[trained.len().saturating_sub(TAIL_ROWS)..];
    tail.iter().map(|r| r.j_eval).sum::<f64>() / tail.len() as f64
}

pub fn summarize(dir: &Path, config: ExperimentConfig, log: &[LogRow]) -> Result<RunSummary> {
    let (Some(first), Some(last)) = (log.first(), log.last()) else {
        return Err(Error::InsufficientData(format!("{}: empty learning curve", dir.display())));
    };
    let tail_j = tail_mean(log);
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        config,
        initial_j: first.j_eval,
        final_j: last.j_eval,
        tail_j,
        improvement: 1.0 - tail_j / first.j_eval,
        off_band_l1: last.off_band_l1,
        on_band_l1: last.on_band_l1,
    })
}

pub fn load_run(dir: &Path) -> Result<RunSummary> {
    if !dir.is_dir() {
        return Err(Error::Io {
            path: dir.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
        });
    }
    let config = ExperimentConfig::load(&dir.join(MANIFEST))?;
    let log = read_learning_curve(&dir.join(LEARNING_CURVE))?;
    summarize(dir, config, &log)
}

fn schedule_value(cfg: &ExperimentConfig, key: &str) -> String {
    cfg.entries()
        .into_iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
        .unwrap_or_default()
}

/// Summaries of every run plus pairwise ordering flags.
pub fn compare(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let base = &runs[0];
    let mut mismatched = Vec::new();
    for key in SCHEDULE_KEYS {
        let want = schedule_value(&base.config, key);
        for r in &runs[1..] {
            let got = schedule_value(&r.config, key);
            if got != want {
                mismatched.push(format!("{key} ({} has {got}, {} has {want})", r.dir.display(), base.dir.display()));
            }
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::Config(format!("incompatible schedules: {}", mismatched.join("; "))));
    }
    let mut pairs = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let (a, b) = (&runs[i], &runs[j]);
            pairs.push(PairFlags {
                first: i,
                second: j,
                tail_j_diff: a.tail_j - b.tail_j,
                first_lower_j: a.tail_j < b.tail_j,
                off_band_diff: a.off_band_l1 - b.off_band_l1,
                first_sparser: a.off_band_l1 < b.off_band_l1,
            });
        }
    }
    Ok(Comparison { runs, pairs })
}

pub fn summary_csv(cmp: &Comparison) -> String {
    let mut out = String::from(
        "run,dir,config_id,noise,seed_env,seed_corruption,initial_J,final_J,tail_J,improvement,off_band_l1,on_band_l1\n",
    );
    for (i, r) in cmp.runs.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{},{},{},{}",
            r.dir.display(),
            r.config.config_id,
            noise_name(r.config.noise),
            r.config.seed_env,
            r.config.seed_corruption,
            fmt_f64(r.initial_j),
            fmt_f64(r.final_j),
            fmt_f64(r.tail_j),
            fmt_f64(r.improvement),
            fmt_f64(r.off_band_l1),
            fmt_f64(r.on_band_l1),
        )
        .unwrap();
    }
    out
}

pub fn pairwise_csv(cmp: &Comparison) -> String {
    let mut out = String::from("first,second,tail_J_diff,first_lower_J,off_band_diff,first_sparser\n");
    for p in &cmp.pairs {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.first,
            p.second,
            fmt_f64(p.tail_j_diff),
            p.first_lower_j,
            fmt_f64(p.off_band_diff),
            p.first_sparser
        )
        .unwrap();
    }
    out
}

/// Write `summary.csv` and `pairwise.csv` into `dir`.
pub fn write_comparison(cmp: &Comparison, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let summary = dir.join("summary.csv");
    std::fs::write(&summary, summary_csv(cmp)).map_err(io_err(&summary))?;
    let pairwise = dir.join("pairwise.csv");
    std::fs::write(&pairwise, pairwise_csv(cmp)).map_err(io_err(&pairwise))?;
    Ok((summary, pairwise))
}
