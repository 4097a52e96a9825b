use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use maskprompt::backend::BackendError;
use maskprompt::corpus::StyleLabel;
use maskprompt::embed::{CachedProvider, MockProvider};
use maskprompt::lingua::LexiconTagger;
use maskprompt::mock::{write_mock_dataset, MockCounts};
use maskprompt::pipeline::{run_experiment, stage_report, Backends, CellState, ExperimentConfig, REPORT_JSON};
use maskprompt::promptkit::MockLlm;
use maskprompt::synth::{GenRequest, MockT2I, T2IBackend};

/// Fails the first `fail_first` calls, then behaves like [`MockT2I`].
struct FlakyT2I {
    calls: AtomicUsize,
    fail_first: usize,
}

impl T2IBackend for FlakyT2I {
    fn generate(&self, req: &GenRequest) -> Result<Vec<u8>, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail_first {
            return Err(BackendError::Status {
                code: 503,
                body: "busy".into(),
            });
        }
        MockT2I.generate(req)
    }
}

fn backends(t2i: Box<dyn T2IBackend>) -> Backends {
    Backends {
        llm: Box::new(MockLlm),
        t2i,
        embed: Box::new(CachedProvider::new(MockProvider::new(16, 0.05).unwrap())),
        tagger: Box::new(LexiconTagger::builtin()),
    }
}

fn config(root: &Path, out: &str) -> ExperimentConfig {
    let data = root.join("data");
    if !data.exists() {
        write_mock_dataset(&data, &StyleLabel::ALL, MockCounts { train: 3, val: 1, test: 2 }, 24, 1).unwrap();
    }
    let json = serde_json::json!({
        "dataset_root": data,
        "output_dir": root.join(out),
        "run_id": "t",
        "seeds": [0, 1],
        "generation": {"samples_per_style": 2, "width": 24, "height": 24},
        "training": {"max_epochs": 20},
        "backends": {"mock": true, "max_in_flight": 1}
    });
    ExperimentConfig::from_json_str(&json.to_string()).unwrap()
}

#[test]
fn failed_cell_does_not_stop_the_others() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "out");
    let flaky = FlakyT2I {
        calls: AtomicUsize::new(0),
        fail_first: 1,
    };
    let report = run_experiment(&cfg, &backends(Box::new(flaky)), false).unwrap();
    assert_eq!(report.cells.len(), 2);
    assert_eq!(report.cells[0].status, CellState::Failed);
    assert_eq!(report.cells[0].exit_code, Some(3));
    assert!(report.cells[0].error.as_deref().unwrap().contains("503"));
    assert_eq!(report.cells[1].status, CellState::Ok);
    let mlp = report.accuracy.iter().find(|r| r.method == "MLP").unwrap();
    assert_eq!(mlp.per_seed[0], None);
    assert!(mlp.per_seed[1].is_some());
    assert_eq!(mlp.mean, mlp.per_seed[1]);
    let text = std::fs::read_to_string(cfg.workspace().root.join(REPORT_JSON)).unwrap();
    assert!(!text.contains(tmp.path().to_str().unwrap()), "report leaks absolute paths");
}

#[test]
fn resume_after_failure_matches_a_clean_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "flaky");
    let flaky = FlakyT2I {
        calls: AtomicUsize::new(0),
        fail_first: 1,
    };
    run_experiment(&cfg, &backends(Box::new(flaky)), false).unwrap();
    let resumed = run_experiment(&cfg, &backends(Box::new(MockT2I)), true).unwrap();
    assert!(resumed.failed().is_empty());

    let clean_cfg = config(tmp.path(), "clean");
    run_experiment(&clean_cfg, &backends(Box::new(MockT2I)), false).unwrap();
    for rel in ["report.json", "report.csv", "quality.csv", "n1_s0/mlp/manifest.jsonl", "n1_s0/llm_log.jsonl"] {
        let a = std::fs::read(cfg.workspace().root.join(rel)).unwrap();
        let b = std::fs::read(clean_cfg.workspace().root.join(rel)).unwrap();
        assert!(a == b, "{rel} differs after resume");
    }
}

#[test]
fn report_stage_rebuilds_the_run_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "out");
    let from_run = run_experiment(&cfg, &backends(Box::new(MockT2I)), false).unwrap();
    let path = cfg.workspace().root.join(REPORT_JSON);
    let before = std::fs::read(&path).unwrap();
    let rebuilt = stage_report(&cfg).unwrap();
    assert_eq!(rebuilt, from_run);
    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[test]
fn class_strategy_skips_the_llm() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), "out");
    cfg.strategy = maskprompt::PromptStrategy::Class;
    let report = run_experiment(&cfg, &backends(Box::new(MockT2I)), false).unwrap();
    assert!(report.failed().is_empty());
    let cell = cfg.workspace().cell_dir(cfg.cells()[0]);
    assert!(!cell.join("captions.jsonl").exists());
    assert!(cell.join("class/manifest.jsonl").exists());
    assert_eq!(report.accuracy[1].method, "Class");
}

#[test]
fn preprocess_hook_rewrites_real_images_only() {
    let tmp = tempfile::tempdir().unwrap();
    let plain = config(tmp.path(), "plain");
    let mut cfg = config(tmp.path(), "pre");
    cfg.backends.preprocess = Some(maskprompt::pipeline::PreprocessConfig {
        program: "cp".into(),
        args: vec![],
    });
    let a = run_experiment(&plain, &backends(Box::new(MockT2I)), false).unwrap();
    let b = run_experiment(&cfg, &backends(Box::new(MockT2I)), false).unwrap();
    assert!(b.failed().is_empty());
    assert_eq!(a.accuracy, b.accuracy);
    let pre = cfg.workspace().root.join("preprocessed");
    let mut top: Vec<String> = std::fs::read_dir(&pre)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, ["test", "train", "val"]);
    let styles: Vec<_> = std::fs::read_dir(pre.join("test")).unwrap().map(|d| d.unwrap().path()).collect();
    assert!(!styles.is_empty());
    for dir in styles {
        assert_eq!(std::fs::read_dir(dir).unwrap().count(), 2);
    }

    let mut broken = config(tmp.path(), "broken");
    broken.backends.preprocess = Some(maskprompt::pipeline::PreprocessConfig {
        program: "false".into(),
        args: vec![],
    });
    let err = run_experiment(&broken, &backends(Box::new(MockT2I)), false).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
