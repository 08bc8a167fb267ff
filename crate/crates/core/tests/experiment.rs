use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use qprl::env::PointMassParams;
use qprl::experiment::{
    ConfigId, ExperimentConfig, MANIFEST, ReferenceModel, compare, read_learning_curve, read_matrix_csv, run, setup,
    summary_csv,
};
use qprl::structure::build_banded_c;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("episodes", "3"),
        ("steps_per_episode", "12"),
        ("updates_per_episode", "1"),
        ("batch_size", "8"),
        ("log_every", "1"),
        ("eval_rollouts", "2"),
        ("eval_steps", "8"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.out = out.to_path_buf();
    cfg
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn config_text_round_trip() {
    let mut cfg = ExperimentConfig::default();
    cfg.set("config_id", "combined").unwrap();
    cfg.set("noise", "brownian").unwrap();
    cfg.set("beta", "0.25").unwrap();
    let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    assert!(ExperimentConfig::from_text("no_such_key = 1").is_err());
    assert!(ExperimentConfig::from_text("episodes = many").is_err());
    assert!("config_9".parse::<ConfigId>().is_err());
}

#[test]
fn zero_rate_run_keeps_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.config_id = ConfigId::FreeC;
    cfg.set("alpha_cost", "0").unwrap();
    cfg.set("alpha_constraint", "0").unwrap();
    let art = run(&cfg).unwrap();
    let log = read_learning_curve(&art.learning_curve).unwrap();
    assert_eq!(log.len(), 4);
    assert!(log.windows(2).all(|w| w[0].j_eval == w[1].j_eval));
    let c0 = read_matrix_csv(&tmp.path().join("c0.csv")).unwrap();
    assert_eq!((c0.nrows(), c0.ncols()), (40, 64));
    for path in &art.c_dumps {
        assert_eq!(read_matrix_csv(path).unwrap(), c0);
    }
    let header = std::fs::read_to_string(&art.learning_curve).unwrap();
    assert!(header.starts_with(
        "iteration,J_eval,td_error_mean,deviation_penalty,si_penalty,off_band_l1,on_band_l1,skipped_updates"
    ));
}

#[test]
fn reference_and_noise_switches() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.set("episodes", "1").unwrap();
    cfg.set("reference_model", "true").unwrap();
    cfg.set("noise_velocity_only", "true").unwrap();
    assert_eq!(cfg.reference_model, ReferenceModel::True);
    assert_eq!(cfg.noise_model().sigma.rows(0, 2).amax(), 0.0);
    assert!(cfg.noise_model().sigma[2] > 0.0);
    run(&cfg).unwrap();
    let params = PointMassParams::default();
    let truth = build_banded_c(&params.a, &params.b, 10).unwrap();
    assert_eq!(read_matrix_csv(&tmp.path().join("c0.csv")).unwrap(), truth.c0);
    let initial = read_matrix_csv(&tmp.path().join("c_theta_000000.csv")).unwrap();
    assert_eq!(initial, setup(&cfg).unwrap().band.c0);
    assert_ne!(initial, truth.c0);
    assert!(ExperimentConfig::from_text("reference_model = guess").is_err());
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.config_id = ConfigId::Combined;
    run(&cfg).unwrap();
    let first = read_dir(tmp.path());
    let manifest = ExperimentConfig::load(&tmp.path().join(MANIFEST)).unwrap();
    assert_eq!(manifest, cfg);
    run(&manifest).unwrap();
    assert_eq!(read_dir(tmp.path()), first);
}

#[test]
fn compare_with_itself_and_missing_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("a");
    run(&tiny(&dir)).unwrap();
    let cmp = compare(&[dir.clone(), dir.clone()]).unwrap();
    assert_eq!(cmp.pairs.len(), 1);
    assert_eq!(cmp.pairs[0].tail_j_diff, 0.0);
    assert_eq!(cmp.pairs[0].off_band_diff, 0.0);
    assert!(summary_csv(&cmp).lines().count() == 3);
    let missing = tmp.path().join("missing_run");
    let err = compare(&[dir, missing.clone()]).unwrap_err().to_string();
    assert!(err.contains("missing_run"), "{err}");
}

fn qprl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qprl"))
}

#[test]
fn cli_run_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.conf");
    std::fs::write(&config, tiny(Path::new("unused")).to_text()).unwrap();
    let dirs: Vec<PathBuf> = ["fixed_constraints", "free_c"].iter().map(|id| tmp.path().join(id)).collect();
    for (id, dir) in ["fixed_constraints", "free_c"].iter().zip(&dirs) {
        let status = qprl()
            .args(["run", "--config"])
            .arg(&config)
            .args(["--config-id", id, "--noise", "brownian", "--seed-env", "7", "--out"])
            .arg(dir)
            .status()
            .unwrap();
        assert!(status.success());
        let manifest = ExperimentConfig::load(&dir.join(MANIFEST)).unwrap();
        assert_eq!(manifest.seed_env, 7);
        assert_eq!(manifest.config_id.name(), *id);
    }
    let out = qprl().arg("compare").args(&dirs).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("fixed_constraints") && text.contains("free_c"));

    let bad = qprl().args(["run", "--config-id", "nope"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let missing = qprl().arg("compare").arg(&dirs[0]).arg(tmp.path().join("gone")).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn qprl_out_sets_default_root() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.conf");
    let mut cfg = tiny(Path::new("unused"));
    cfg.set("episodes", "1").unwrap();
    let text: String = cfg.to_text().lines().filter(|l| !l.starts_with("out")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&config, text).unwrap();
    let status = qprl()
        .env("QPRL_OUT", tmp.path().join("root"))
        .args(["run", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(status.success());
    let made: Vec<_> = std::fs::read_dir(tmp.path().join("root")).unwrap().collect();
    assert_eq!(made.len(), 1);
}
