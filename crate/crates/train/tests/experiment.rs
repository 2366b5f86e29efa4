use std::path::Path;

use cmtkd_train::config::ExperimentConfig;
use cmtkd_train::data::Splits;
use cmtkd_train::experiment::{run_with_splits, METRICS_FILE, PI_FILE};
use cmtkd_train::generate::{generate, GeneratorConfig};
use cmtkd_train::metrics::{read_metrics, MetricsRow};

fn splits() -> Splits {
    generate(&GeneratorConfig::new(5, 16, [8, 8], 11)).unwrap()
}

fn config(preset: &str, extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
        preset = "{preset}"
        teacher_bits = [4, 8]
        student_bits = 2
        gamma = 1.0
        epochs = 2
        batch_size = 8
        base_lr = 0.05
        data_path = "."
        {extra}
        [arch]
        widths = [4, 4]
        "#
    ))
    .unwrap()
}

fn run(cfg: &ExperimentConfig, data: &Splits, out: &Path) -> Vec<MetricsRow> {
    run_with_splits::<f32>(cfg, data, out).unwrap();
    read_metrics(&out.join(METRICS_FILE)).unwrap()
}

#[test]
fn same_seed_same_logs() {
    let data = splits();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("cmtkd", "seed = 4");
    run(&cfg, &data, &tmp.path().join("a"));
    run(&cfg, &data, &tmp.path().join("b"));
    for f in [METRICS_FILE, PI_FILE] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    let other = run(&config("cmtkd", "seed = 5"), &data, &tmp.path().join("c"));
    let first = run(&cfg, &data, &tmp.path().join("d"));
    assert_ne!(other[0].loss_total, first[0].loss_total);
}

#[test]
fn presets_log_only_their_terms() {
    let data = splits();
    let tmp = tempfile::tempdir().unwrap();
    let rows = run(&config("cmtkd_no_ml", ""), &data, &tmp.path().join("no_ml"));
    assert!(rows.iter().all(|r| r.kl_s == 0.0 && r.kl_t == 0.0));
    assert!(rows.iter().all(|r| r.feat > 0.0));
    let rows = run(&config("cmtkd_no_att", ""), &data, &tmp.path().join("no_att"));
    assert!(rows.iter().all(|r| r.feat == 0.0));
    assert!(rows.iter().all(|r| r.kl_s > 0.0 && r.kl_t > 0.0));
    let rows = run(&config("single", ""), &data, &tmp.path().join("single"));
    assert!(rows.iter().all(|r| r.loss_total == r.ce_s && r.ce_t == 0.0));
    assert!(rows.iter().all(|r| r.top1_combined_teacher.is_none()));
}

#[test]
fn pretrained_teacher_presets_run() {
    let data = splits();
    let tmp = tempfile::tempdir().unwrap();
    for preset in ["kd_fp", "average_teacher"] {
        let rows = run(&config(preset, "teacher_epochs = 1"), &data, &tmp.path().join(preset));
        assert!(rows.iter().all(|r| r.ce_t == 0.0 && r.feat == 0.0));
        assert!(rows.iter().all(|r| r.kl_s > 0.0 && r.kl_t == 0.0));
    }
}

#[test]
fn combined_teacher_eval_scores_the_ensemble() {
    let data = splits();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cte");
    run_with_splits::<f32>(&config("combined_teacher_eval", ""), &data, &out).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["best"]["top1_combined_teacher"].is_number(), "{report}");
}

#[test]
fn f64_runs_match_their_own_logs() {
    let data = splits();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config("cmtkd", "dtype = \"f64\"");
    cfg.epochs = 1;
    run_with_splits::<f64>(&cfg, &data, tmp.path()).unwrap();
    let rows = read_metrics(&tmp.path().join(METRICS_FILE)).unwrap();
    let w = cmtkd_train::model::LossWeights::from_config(&cfg);
    for r in rows {
        let l = r.loss();
        assert!((l.total - w.combine(&l)).abs() <= 1e-9 * l.total.abs().max(1.0));
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.network_spec([1, 32, 32], 100).unwrap();
            n += 1;
        }
    }
    assert!(n >= 4);
}
