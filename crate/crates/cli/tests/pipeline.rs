mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use qappp_cli::pipeline::{load_features, Layout, Report};
use qappp_cli::{run_stage, Outcome, Overrides, PipelineConfig, PipelineError, Stage};

fn load(config: &Path) -> PipelineConfig {
    PipelineConfig::load(config, &Overrides::default()).unwrap()
}

fn run_through(config: &PipelineConfig, last: Stage) {
    for stage in Stage::ALL {
        run_stage(stage, config, false).unwrap_or_else(|e| panic!("{stage}: {e}"));
        if stage == last {
            break;
        }
    }
}

#[test]
fn full_run_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(tmp.path(), 50, 1);
    let config = load(&fx.config);
    run_through(&config, Stage::Report);
    let out = fx.output();
    for rel in [
        "questions.jsonl",
        "counts.json",
        "quality.json",
        "answers/stub-model.jsonl",
        "features/stub-model.csv",
        "models/stub-model/fit_report.json",
        "models/stub-model/coefficients.csv",
        "models/stub-model/wald.csv",
        "models/stub-model/eval.json",
        "models/stub-model/ablation.csv",
        "models/stub-model/diagnostics.csv",
        "models/stub-model/kde.csv",
        "report.json",
        "report.md",
    ] {
        assert!(out.join(rel).is_file(), "missing {rel}");
    }
    let features = load_features(&out.join("features/stub-model.csv")).unwrap();
    assert_eq!(features.n_rows(), 200);
    let csv = fs::read_to_string(out.join("features/stub-model.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "question_id,category,log_spop,scons,cert,correct"
    );
    let report: Report = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let m = &report.models["stub-model"];
    assert!(m.fit.converged);
    assert_eq!(m.fit.n_params, 16);
    assert_eq!(m.ablation.rows.len(), 6);
    assert_eq!(report.counts.report.grand_total, 800);
    assert!(!out.join(".qappp.lock").exists());
}

#[test]
fn answer_without_expand_is_a_missing_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(tmp.path(), 5, 2);
    let err = run_stage(Stage::Answer, &load(&fx.config), false).unwrap_err();
    assert!(
        matches!(
            err,
            PipelineError::MissingPrerequisite {
                stage: Stage::Answer,
                prerequisite: Stage::Expand
            }
        ),
        "{err}"
    );
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn rerun_is_a_noop_and_changed_inputs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(tmp.path(), 50, 3);
    let config = load(&fx.config);
    run_through(&config, Stage::Fit);
    let manifest = fs::read(fx.output().join("manifests/fit.json")).unwrap();
    assert_eq!(run_stage(Stage::Fit, &config, false).unwrap(), Outcome::UpToDate);
    assert_eq!(fs::read(fx.output().join("manifests/fit.json")).unwrap(), manifest);

    let mut changed = config.clone();
    changed.formula = "correct ~ QCat + SCons + Cert".into();
    let err = run_stage(Stage::Fit, &changed, false).unwrap_err();
    assert!(
        matches!(err, PipelineError::StaleManifest { stage: Stage::Fit, .. }),
        "{err}"
    );
    assert_eq!(err.exit_code(), 4);
    assert_eq!(run_stage(Stage::Fit, &changed, true).unwrap(), Outcome::Ran);
    // a stage upstream of fit is unaffected by the formula
    assert_eq!(run_stage(Stage::Featurize, &changed, false).unwrap(), Outcome::UpToDate);
}

#[test]
fn deleted_output_is_rebuilt_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(tmp.path(), 50, 4);
    let config = load(&fx.config);
    run_through(&config, Stage::Fit);
    let path = fx.output().join("models/stub-model/coefficients.csv");
    let before = fs::read(&path).unwrap();
    fs::remove_file(&path).unwrap();
    assert_eq!(run_stage(Stage::Fit, &config, false).unwrap(), Outcome::Ran);
    assert_eq!(fs::read(&path).unwrap(), before);

    let answers = fx.output().join("answers/stub-model.jsonl");
    let before = fs::read(&answers).unwrap();
    fs::remove_file(&answers).unwrap();
    // featurize now lacks its prerequisite
    assert!(matches!(
        run_stage(Stage::Featurize, &config, false),
        Err(PipelineError::MissingPrerequisite {
            prerequisite: Stage::Answer,
            ..
        })
    ));
    assert_eq!(run_stage(Stage::Answer, &config, false).unwrap(), Outcome::Ran);
    assert_eq!(fs::read(&answers).unwrap(), before);
}

#[test]
fn config_hash_tracks_only_relevant_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(tmp.path(), 50, 5);
    let config = load(&fx.config);
    run_through(&config, Stage::Diagnose);
    let mut c = config.clone();
    c.diagnostics.n_bins = 10;
    // only diagnose depends on the bin count
    for stage in [
        Stage::Expand,
        Stage::Answer,
        Stage::Featurize,
        Stage::Fit,
        Stage::Ablate,
    ] {
        assert_eq!(run_stage(stage, &c, false).unwrap(), Outcome::UpToDate, "{stage}");
    }
    assert!(matches!(
        run_stage(Stage::Diagnose, &c, false),
        Err(PipelineError::StaleManifest { .. })
    ));

    let mut c = config.clone();
    c.seed += 1;
    assert!(matches!(
        run_stage(Stage::Answer, &c, false),
        Err(PipelineError::StaleManifest { .. })
    ));
    assert!(matches!(
        run_stage(Stage::Fit, &c, false),
        Err(PipelineError::StaleManifest { .. })
    ));
    assert_eq!(run_stage(Stage::Diagnose, &c, false).unwrap(), Outcome::UpToDate);
}

#[test]
fn lock_file_blocks_a_second_run() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(tmp.path(), 5, 6);
    let config = load(&fx.config);
    fs::create_dir_all(fx.output()).unwrap();
    fs::write(fx.output().join(".qappp.lock"), "1").unwrap();
    let err = run_stage(Stage::Expand, &config, false).unwrap_err();
    assert!(matches!(err, PipelineError::Locked(_)));
    assert_eq!(err.exit_code(), 5);
}

#[test]
fn interrupted_answer_store_is_resumed() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(tmp.path(), 10, 7);
    let config = load(&fx.config);
    run_through(&config, Stage::Answer);
    let answers = fx.output().join(Layout::answers("stub-model"));
    let full = fs::read(&answers).unwrap();
    // simulate a crash: no manifest, half the records and a torn line
    fs::remove_file(fx.output().join("manifests/answer.json")).unwrap();
    let cut = full.len() / 2;
    fs::write(&answers, &full[..cut]).unwrap();
    assert_eq!(run_stage(Stage::Answer, &config, false).unwrap(), Outcome::Ran);
    assert_eq!(fs::read(&answers).unwrap(), full);
}

#[test]
fn environment_and_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(tmp.path(), 5, 8);
    let mut c = load(&fx.config);
    c.apply_env(|k| match k {
        "QAPPP_ENDPOINT_STUB_MODEL" => Some("http://localhost:9/v1/completions".into()),
        "QAPPP_API_KEY" => Some("k".into()),
        "QAPPP_PAGEVIEWS_URL" => Some("http://localhost:9".into()),
        _ => None,
    });
    assert_eq!(c.models[0].endpoint_url, "http://localhost:9/v1/completions");
    assert_eq!(c.models[0].api_key.as_deref(), Some("k"));
    assert_eq!(c.popularity.client.base_url, "http://localhost:9");
    c.apply_overrides(&Overrides {
        seed: Some(3),
        threshold: Some(0.2),
        test_fraction: Some(0.3),
        formula: Some("correct ~ Cert".into()),
    });
    assert_eq!((c.seed, c.category_threshold, c.test_fraction), (3, 0.2, 0.3));
    assert_eq!(c.formula, "correct ~ Cert");
    c.test_fraction = 1.0;
    assert!(c.validate().is_err());
}

#[test]
fn binary_reports_stages_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::write_fixture(tmp.path(), 5, 9);
    let bin = env!("CARGO_BIN_EXE_qappp");
    let run = |stage: &str| {
        Command::new(bin)
            .args([stage, "--config", fx.config.to_str().unwrap()])
            .env("RUST_LOG", "off")
            .output()
            .unwrap()
    };
    let out = run("answer");
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs `expand`"));
    let out = run("expand");
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "expand: done\n");
    assert_eq!(String::from_utf8_lossy(&run("expand").stdout), "expand: up to date\n");
    let bad = Command::new(bin).args(["bogus", "--config", "x"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
