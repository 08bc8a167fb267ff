use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, ReferenceModel};
use crate::approximator::format::fmt_f64;
use crate::approximator::{PointMassTheta, ThetaParams, write_theta};
use crate::env::{PointMassParams, corrupt_model};
use crate::error::{Error, Result, io_err};
use crate::learner::{LogRow, TdSample, TrainOutput, TrainSeeds, train};
use crate::structure::{BandedReference, band_metrics, build_banded_c};

pub const LEARNING_CURVE: &str = "learning_curve.csv";
pub const BAND_METRICS: &str = "band_metrics.csv";
pub const TD_SAMPLES: &str = "td_samples.csv";
pub const MANIFEST: &str = "manifest.txt";
pub const LEARNING_CURVE_HEADER: [&str; 8] = [
    "iteration",
    "J_eval",
    "td_error_mean",
    "deviation_penalty",
    "si_penalty",
    "off_band_l1",
    "on_band_l1",
    "skipped_updates",
];

/// Paths of everything a run writes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub learning_curve: PathBuf,
    pub band_metrics: PathBuf,
    pub td_samples: PathBuf,
    pub c_dumps: Vec<PathBuf>,
    pub snapshots: Vec<PathBuf>,
    pub manifest: PathBuf,
}

/// Corrupted model, banded references and initial parameters of a run.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub params: PointMassParams,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    /// Banded matrix of the corrupted model; the initial equality matrix.
    pub band: BandedReference,
    /// Target of the deviation penalty.
    pub reference: BandedReference,
    pub theta0: ThetaParams,
}

pub fn setup(cfg: &ExperimentConfig) -> Result<RunSetup> {
    let params = PointMassParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_corruption);
    let (a_hat, b_hat) = corrupt_model(&params.a, &params.b, cfg.delta, &mut rng);
    let band = build_banded_c(&a_hat, &b_hat, cfg.horizon)?;
    let mut init = ChaCha8Rng::seed_from_u64(cfg.seed_init);
    let mut draw = |lo: f64, hi: f64| if lo < hi { init.random_range(lo..hi) } else { lo };
    let state_cost = (0..params.n_x()).map(|_| draw(cfg.init_cost_min, cfg.init_cost_max)).collect();
    let offset = draw(cfg.init_offset_min, cfg.init_offset_max);
    let to_vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<_>>();
    let theta0 = PointMassTheta {
        horizon: cfg.horizon,
        discount: params.gamma,
        state_cost,
        offset,
        state_lower: to_vec(&params.state_lower),
        state_upper: to_vec(&params.state_upper),
        action_lower: to_vec(&params.action_lower),
        action_upper: to_vec(&params.action_upper),
        slack_weight: cfg.slack_weight,
        learn_constraints: cfg.config_id.learns_constraints(),
    }
    .build(&band)?;
    let reference = match cfg.reference_model {
        ReferenceModel::Corrupted => band.clone(),
        ReferenceModel::True => build_banded_c(&params.a, &params.b, cfg.horizon)?,
    };
    Ok(RunSetup {
        params,
        a_hat,
        b_hat,
        band,
        reference,
        theta0,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..m.nrows() {
        w.write_record(m.row(r).iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = rec?
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse {
            line: 0,
            msg: format!("{}: ragged matrix", path.display()),
        });
    }
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.into_iter().flatten()))
}

fn write_learning_curve(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(LEARNING_CURVE_HEADER)?;
    for row in log {
        w.write_record([
            row.iteration.to_string(),
            fmt_f64(row.j_eval),
            fmt_f64(row.td_error_mean),
            fmt_f64(row.deviation_penalty),
            fmt_f64(row.si_penalty),
            fmt_f64(row.off_band_l1),
            fmt_f64(row.on_band_l1),
            row.skipped_updates.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_learning_curve(path: &Path) -> Result<Vec<LogRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != LEARNING_CURVE_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{}: unexpected header {header:?}", path.display()),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |msg: String| Error::Parse { line: i + 2, msg };
        let f = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("column {}", LEARNING_CURVE_HEADER[k])))
        };
        let u = |k: usize| -> Result<usize> {
            rec.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("column {}", LEARNING_CURVE_HEADER[k])))
        };
        out.push(LogRow {
            iteration: u(0)?,
            j_eval: f(1)?,
            td_error_mean: f(2)?,
            deviation_penalty: f(3)?,
            si_penalty: f(4)?,
            off_band_l1: f(5)?,
            on_band_l1: f(6)?,
            skipped_updates: u(7)?,
        });
    }
    Ok(out)
}

fn write_td_samples(path: &Path, samples: &[TdSample]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let Some(first) = samples.first() else {
        w.write_record(["iteration", "delta", "cost"])?;
        return w.flush().map_err(io_err(path));
    };
    let n_x = first.transition.s.len();
    let n_u = first.transition.a.len();
    let mut header = vec!["iteration".to_string(), "delta".to_string(), "cost".to_string()];
    header.extend((0..n_x).map(|i| format!("s{i}")));
    header.extend((0..n_u).map(|i| format!("a{i}")));
    header.extend((0..n_x).map(|i| format!("s_next{i}")));
    w.write_record(&header)?;
    for t in samples {
        let mut rec = vec![t.iteration.to_string(), fmt_f64(t.delta), fmt_f64(t.transition.cost)];
        let tr = &t.transition;
        rec.extend(tr.s.iter().chain(tr.a.iter()).chain(tr.s_next.iter()).map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))
}

fn write_band_metrics(path: &Path, out: &TrainOutput, band: &BandedReference) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "on_band_l1", "off_band_l1", "deviation_from_c0_l1"])?;
    for snap in &out.snapshots {
        let m = band_metrics(&snap.theta.eq_matrix, band)?;
        w.write_record([
            snap.iteration.to_string(),
            fmt_f64(m.on_band_l1),
            fmt_f64(m.off_band_l1),
            fmt_f64(m.deviation_from_c0_l1),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

fn write_manifest(path: &Path, cfg: &ExperimentConfig, status: &str) -> Result<()> {
    let mut text = format!(
        "# qprl {} run manifest\n# status: {status}\n",
        env!("CARGO_PKG_VERSION")
    );
    text.push_str(&cfg.to_text());
    std::fs::write(path, text).map_err(io_err(path))
}

/// Train one configuration and write its artifacts under `cfg.out`.
///
/// On a runtime failure the manifest records the error and the error is returned.
pub fn run(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let dir = cfg.out.clone();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let manifest = dir.join(MANIFEST);
    write_manifest(&manifest, cfg, "running")?;
    match execute(cfg, &dir) {
        Ok(mut artifacts) => {
            write_manifest(&manifest, cfg, "ok")?;
            artifacts.manifest = manifest;
            Ok(artifacts)
        }
        Err(e) => {
            let one_line = e.to_string().replace('\n', " ");
            write_manifest(&manifest, cfg, &format!("error: {one_line}"))?;
            Err(e)
        }
    }
}

fn execute(cfg: &ExperimentConfig, dir: &Path) -> Result<RunArtifacts> {
    let setup = setup(cfg)?;
    let noise = cfg.noise_model();
    let seeds = TrainSeeds {
        env: cfg.seed_env,
        exploration: cfg.seed_exploration,
        eval: cfg.seed_eval,
    };
    let out = train(
        &setup.params,
        &noise,
        setup.theta0.clone(),
        &cfg.update_config(),
        &setup.reference,
        &cfg.schedule(),
        seeds,
    )?;
    let learning_curve = dir.join(LEARNING_CURVE);
    write_learning_curve(&learning_curve, &out.log)?;
    let band_metrics = dir.join(BAND_METRICS);
    write_band_metrics(&band_metrics, &out, &setup.reference)?;
    let td_samples = dir.join(TD_SAMPLES);
    write_td_samples(&td_samples, &out.td_samples)?;
    write_matrix_csv(&dir.join("c0.csv"), &setup.reference.c0)?;
    let mut c_dumps = Vec::new();
    let mut snapshots = Vec::new();
    for snap in &out.snapshots {
        let c_path = dir.join(format!("c_theta_{:06}.csv", snap.iteration));
        write_matrix_csv(&c_path, &snap.theta.eq_matrix)?;
        c_dumps.push(c_path);
        let t_path = dir.join(format!("theta_{:06}.txt", snap.iteration));
        write_theta(&t_path, &snap.theta)?;
        snapshots.push(t_path);
    }
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        learning_curve,
        band_metrics,
        td_samples,
        c_dumps,
        snapshots,
        manifest: PathBuf::new(),
    })
}
