// Named to sort before the long acceptance run: cargo runs test targets in
// name order and stops at the first failing one.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use sems::channel::ScenarioFlags;
use sems::config::{FrameConfig, LabConfig, TaskKind};
use sems::dataset::{generate_dataset, load_dataset};
use sems::harness::{
    emit_plots, parse_csv, sweep, train, Family, Method, Metric, PreparedData, SweepSpec, TrainSpec, TrainedModel,
};

fn small_lab(frames: usize, epochs: usize) -> LabConfig {
    let mut lab = LabConfig::default();
    lab.train.frames = frames;
    lab.train.epochs = epochs;
    lab
}

#[test]
fn dataset_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FrameConfig::default();
    let scenario = ScenarioFlags {
        clutter: true,
        ..ScenarioFlags::default()
    };
    let ds = generate_dataset(&cfg, TaskKind::DelayEstimation, 20, scenario, 9).unwrap();
    let path = dir.path().join("d.bin");
    ds.write(&path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.to_bytes(), ds.to_bytes());
    assert!(back.check_config(&cfg, scenario).is_ok());
    assert!(back.check_config(&cfg, ScenarioFlags::default()).is_err());
}

#[test]
fn identical_training_runs_give_identical_checkpoints() {
    let lab = small_lab(60, 3);
    let ds = generate_dataset(&lab.frame, TaskKind::Classification, 60, ScenarioFlags::default(), 1).unwrap();
    let data = PreparedData::new(&ds, &lab.frame).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::SemS, Method::MseRecon] {
        let spec = TrainSpec::from_config(&lab, TaskKind::Classification, method, 5).unwrap();
        let a = train(&spec, &data).unwrap();
        let b = train(&spec, &data).unwrap();
        let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        a.model.save(&pa).unwrap();
        b.model.save(&pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap(), "{method}");
        assert_eq!(TrainedModel::load(&pa).unwrap(), a.model);
        assert_eq!(a.history, b.history);
    }
}

fn small_sweep(dir: &Path) -> SweepSpec {
    let mut spec = SweepSpec::new(Family::Classification, &small_lab(60, 1), dir);
    spec.seeds = vec![1, 2];
    spec.snr_grid_db = vec![0.0, 20.0];
    spec.methods = vec![Method::FeatureSvmUniform, Method::FeatureSvmOptimized];
    spec
}

#[test]
fn sweep_cross_product_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_sweep(dir.path());
    let first = sweep(&spec).unwrap();
    let mut per_metric: BTreeMap<Metric, usize> = BTreeMap::new();
    for r in &first {
        *per_metric.entry(r.metric).or_default() += 1;
    }
    assert_eq!(per_metric.get(&Metric::Accuracy), Some(&8));
    assert_eq!(per_metric.get(&Metric::MacroF1), Some(&8));

    let on_disk = parse_csv(std::fs::File::open(spec.records_path()).unwrap()).unwrap();
    assert_eq!(on_disk, first);
    assert!(sweep(&spec).unwrap().is_empty(), "re-run must add nothing");

    // a fresh sweep with more workers writes the same file
    let other = tempfile::tempdir().unwrap();
    let mut parallel = small_sweep(other.path());
    parallel.workers = 3;
    sweep(&parallel).unwrap();
    assert_eq!(
        std::fs::read(spec.records_path()).unwrap(),
        std::fs::read(parallel.records_path()).unwrap()
    );

    let plots = emit_plots(&first, dir.path()).unwrap();
    assert!(!plots.is_empty());
}

#[test]
fn budget_family_has_six_groups() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SweepSpec::new(Family::Budget, &small_lab(40, 1), dir.path());
    assert_eq!(spec.pilot_budgets, vec![2, 8, 16, 32, 64, 128]);
    spec.seeds = vec![1];
    spec.snr_grid_db = vec![20.0];
    spec.methods = vec![Method::Omp];
    let records = sweep(&spec).unwrap();
    let groups: std::collections::BTreeSet<usize> = records.iter().map(|r| r.n_pilots).collect();
    assert_eq!(groups.len(), 6);
}

#[test]
fn missing_artifacts_name_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_sweep(dir.path());
    spec.build_missing = false;
    let err = sweep(&spec).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("seed"), "{err}");
}

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sems")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

#[test]
fn cli_round_trip_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).display().to_string();
    let cfg = d("lab.ini");
    std::fs::write(&cfg, "[train]\nepochs = 1\nframes = 40\n").unwrap();

    let (code, text) = cli(&["gen", "--config", &cfg, "--task", "classification", "--out", &d("cls.bin"), "--seed", "3"]);
    assert_eq!(code, 0, "{text}");
    let (code, text) = cli(&[
        "train", "--config", &cfg, "--task", "classification", "--method", "FeatureSVM-OP", "--data", &d("cls.bin"), "--out",
        &d("svm.ckpt"),
    ]);
    assert_eq!(code, 0, "{text}");
    let (code, text) = cli(&["eval", "--config", &cfg, "--ckpt", &d("svm.ckpt"), "--data", &d("cls.bin"), "--snr-db", "-5"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("accuracy"), "{text}");

    let (code, text) = cli(&["sweep", "--config", &cfg, "--family", "fig4_cls", "--out-dir", &d("sw"), "--methods", "FeatureSVM-UP"]);
    assert_eq!(code, 0, "{text}");
    let (code, text) = cli(&["plot", "--records", &d("sw/fig4_cls.csv"), "--out-dir", &d("plots")]);
    assert_eq!(code, 0, "{text}");
    assert!(Path::new(&d("plots")).read_dir().unwrap().next().is_some());

    // validation errors exit 1, missing artifacts 2
    let (code, _) = cli(&[
        "train", "--config", &cfg, "--task", "delay", "--method", "FeatureSVM-OP", "--data", &d("cls.bin"), "--out", &d("x"),
    ]);
    assert_eq!(code, 1);
    let (code, _) = cli(&["train", "--task", "classification", "--method", "bogus", "--data", "x", "--out", "y"]);
    assert_eq!(code, 1);
    let (code, _) = cli(&["eval", "--ckpt", &d("nope.ckpt"), "--data", &d("cls.bin")]);
    assert_eq!(code, 2);
    let (code, _) = cli(&["plot", "--records", &d("nope.csv"), "--out-dir", &d("p2")]);
    assert_eq!(code, 2);
    std::fs::write(&cfg, "[train]\nbatch_size = 0\n").unwrap();
    let (code, _) = cli(&["gen", "--config", &cfg, "--task", "classification", "--out", &d("z.bin")]);
    assert_eq!(code, 1);
}

#[test]
fn sems_loss_falls_by_epoch_ten() {
    let lab = small_lab(3000, 11);
    let ds = generate_dataset(&lab.frame, TaskKind::Classification, 3000, ScenarioFlags::default(), 1).unwrap();
    let data = PreparedData::new(&ds, &lab.frame).unwrap();
    let falling = (1..=5)
        .filter(|&seed| {
            let spec = TrainSpec::from_config(&lab, TaskKind::Classification, Method::SemS, seed).unwrap();
            let h = train(&spec, &data).unwrap().history;
            h[10].train_loss < h[0].train_loss
        })
        .count();
    assert!(falling >= 3, "{falling}/5 seeds");
}
