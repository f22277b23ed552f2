mod common;

use std::fs;
use std::io::Write;
use std::process::Command;

use common::{mock_config, strip_timing, Reply, StubServer};
use nextplace::gateway::{mock_scores, BackendConfig, HttpBackend};
use nextplace::prompt::ExtractedData;
use nextplace::runner::{
    ablate_with, effective_config, evaluate, load_dataset, render_report, run_experiment, run_prepared, Predictor,
    RunOptions, RunnerError, SampleRecord,
};

fn records(path: &std::path::Path) -> Vec<SampleRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn mock_runs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg_a = mock_config(a.path(), 4);
    let mut cfg_b = mock_config(b.path(), 4);
    cfg_a.backend.max_in_flight = 1;
    cfg_b.backend.max_in_flight = 8;
    let ra = run_experiment(&cfg_a).unwrap();
    let rb = run_experiment(&cfg_b).unwrap();
    assert_eq!(strip_timing(&ra.results_path), strip_timing(&rb.results_path));
    let recs = records(&ra.results_path);
    assert!(recs.windows(2).all(|w| w[0].sample_id < w[1].sample_id));
    assert_eq!(evaluate(&ra.results_path).unwrap().report, evaluate(&rb.results_path).unwrap().report);
}

#[test]
fn interrupted_run_resumes_to_the_same_file() {
    let full_dir = tempfile::tempdir().unwrap();
    let cfg = mock_config(full_dir.path(), 3);
    let full = run_experiment(&cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let cfg = mock_config(dir.path(), 3);
    let dataset = load_dataset(&cfg).unwrap();
    let partial = run_prepared(&cfg, &dataset, None, RunOptions { stop_after: Some(7) }).unwrap();
    assert!(partial.interrupted);
    assert_eq!(partial.processed, 7);
    // A writer killed mid-line leaves a fragment behind.
    let mut f = fs::OpenOptions::new().append(true).open(&partial.results_path).unwrap();
    f.write_all(br#"{"sample_id":"user001#0001"#).unwrap();
    drop(f);

    let resumed = run_prepared(&cfg, &dataset, None, RunOptions::default()).unwrap();
    assert_eq!(resumed.already_done, 7);
    assert_eq!(resumed.processed, full.total_samples - 7);
    assert_eq!(strip_timing(&resumed.results_path), strip_timing(&full.results_path));
    assert_eq!(
        evaluate(&resumed.results_path).unwrap().report,
        evaluate(&full.results_path).unwrap().report
    );

    // A second resume has nothing left to do.
    let again = run_prepared(&cfg, &dataset, None, RunOptions::default()).unwrap();
    assert_eq!(again.processed, 0);
}

#[test]
fn resume_refuses_a_file_from_another_predictor() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mock_config(dir.path(), 2);
    cfg.results_name = Some("shared.jsonl".into());
    run_experiment(&cfg).unwrap();
    cfg.predictor = Predictor::Markov;
    assert!(matches!(run_experiment(&cfg), Err(RunnerError::ResultsMismatch(_))));
}

#[test]
fn evaluate_recomputes_from_places_and_skips_corrupt_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mock_config(dir.path(), 2);
    let path = run_experiment(&cfg).unwrap().results_path;
    let original = evaluate(&path).unwrap();

    // Without reasons and with bogus stored ranks the metrics do not move.
    let edited: String = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let obj = v.as_object_mut().unwrap();
            obj.remove("reason");
            obj.insert("hit_rank".into(), serde_json::json!(1));
            format!("{v}\n")
        })
        .collect();
    let stripped = dir.path().join("stripped.jsonl");
    fs::write(&stripped, format!("{edited}not json at all\n{{\"sample_id\": 3}}\n")).unwrap();
    let eval = evaluate(&stripped).unwrap();
    assert_eq!(eval.report, original.report);
    let n = original.samples.len();
    assert_eq!(eval.corrupt_lines, vec![n + 1, n + 2]);
    assert_eq!(evaluate(&stripped).unwrap().report, eval.report);

    // Every first place correct gives acc1 = 1.
    let perfect: String = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let truth = v["ground_truth"].clone();
            v["places"] = serde_json::json!([truth]);
            format!("{v}\n")
        })
        .collect();
    let perfect_path = dir.path().join("perfect.jsonl");
    fs::write(&perfect_path, perfect).unwrap();
    assert_eq!(evaluate(&perfect_path).unwrap().report.acc1, 1.0);
}

#[test]
fn ablation_writes_six_named_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mock_config(dir.path(), 2);
    cfg.sample_limit = Some(25);
    let dataset = load_dataset(&cfg).unwrap();
    let outcome = ablate_with(&cfg, &dataset, None).unwrap();
    let names: Vec<String> = outcome.variants.iter().map(|v| v.variant.to_string()).collect();
    assert_eq!(names, ["Full", "NoHistory", "NoContext", "NoTime", "NoGuide", "NoReason"]);
    for v in &outcome.variants {
        assert!(v.result.is_ok(), "{}: {:?}", v.variant, v.result);
        let file = dir.path().join("out").join(format!("ablate_{}.jsonl", v.variant));
        assert_eq!(v.results_path, file);
        assert_eq!(records(&file).len(), 25);
        assert!(dir.path().join("out").join(format!("ablate_{}.report.txt", v.variant)).is_file());
    }
    assert_eq!(outcome.table.csv.lines().count(), 7);
    assert!(dir.path().join("out/ablate_comparison.csv").is_file());

    // Without a target slot the mock ranks by plain visit counts.
    let full = records(&dir.path().join("out/ablate_Full.jsonl"));
    let no_time = records(&dir.path().join("out/ablate_NoTime.jsonl"));
    let samples: Vec<_> = nextplace::runner::select_samples(&dataset.samples, Some(25), cfg.seed);
    let mut differs = 0;
    for ((s, f), t) in samples.iter().zip(&full).zip(&no_time) {
        let plain = mock_scores(&ExtractedData {
            history: Some(s.history.clone()),
            context: Some(s.context.clone()),
            target: None,
        });
        let expected: Vec<u64> = plain.iter().take(10).map(|(p, _)| p.0).collect();
        assert_eq!(t.places, expected, "{}", s.sample_id);
        differs += usize::from(f.places != t.places);
    }
    assert!(differs > 0, "the time bonus never changed a ranking");
}

#[test]
fn report_marks_unreachable_cutoffs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mock_config(dir.path(), 2);
    cfg.prompt.k = 1;
    let k1 = run_experiment(&cfg).unwrap().results_path;
    cfg.predictor = Predictor::Markov;
    cfg.prompt.k = 10;
    let markov = run_experiment(&cfg).unwrap().results_path;
    let rows = vec![
        ("mock_k1".to_string(), evaluate(&k1).unwrap().report),
        ("1mmc_k10".to_string(), evaluate(&markov).unwrap().report),
    ];
    let tables = render_report(&rows);
    let lines: Vec<&str> = tables.csv.lines().collect();
    assert_eq!(lines[0], "name,acc1,acc5,acc10,weighted_f1,ndcg10,parse_failure_rate,n_samples");
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!((cells[2], cells[3], cells[5]), ("-", "-", "-"));
    assert!(!lines[2].contains('-'));
    assert_eq!(render_report(&rows).csv, tables.csv);
}

fn llm_config(dir: &std::path::Path, server: &StubServer) -> nextplace::runner::ExperimentConfig {
    let mut cfg = mock_config(dir, 1);
    cfg.predictor = Predictor::Llm;
    cfg.sample_limit = Some(6);
    cfg.backend = BackendConfig {
        endpoint_url: server.url.clone(),
        api_key_env: "NEXTPLACE_TEST_KEY_UNSET".into(),
        backoff_base_ms: 1,
        backoff_max_ms: 5,
        ..BackendConfig::default()
    };
    cfg
}

#[test]
fn unreadable_answers_get_one_repair_round() {
    // Odd-numbered requests answer in prose; the repair request gets JSON.
    let server = StubServer::start(|_, body| {
        if body.contains("could not be read") {
            Reply::ok(r#"{"prediction": [1, 2, 3], "reason": "fixed"}"#)
        } else {
            Reply::ok("I believe the user goes home.")
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let cfg = llm_config(dir.path(), &server);
    let dataset = load_dataset(&cfg).unwrap();
    let backend = HttpBackend::new(cfg.backend.clone()).unwrap();
    let summary = run_prepared(&cfg, &dataset, Some(&backend), RunOptions::default()).unwrap();
    assert_eq!(server.requests(), 12);
    for rec in records(&summary.results_path) {
        assert_eq!(rec.calls, 2);
        assert!(rec.diagnostics.repair_round);
        assert!(!rec.parse_failed);
        assert_eq!(rec.places, vec![1, 2, 3]);
        assert_eq!(rec.raw_text, "I believe the user goes home.");
    }
}

#[test]
fn valid_answers_are_requested_once_per_sample() {
    let server = StubServer::start(|_, _| Reply::ok(r#"{"prediction": [5], "reason": ""}"#));
    let dir = tempfile::tempdir().unwrap();
    let cfg = llm_config(dir.path(), &server);
    let dataset = load_dataset(&cfg).unwrap();
    let backend = HttpBackend::new(cfg.backend.clone()).unwrap();
    let summary = run_prepared(&cfg, &dataset, Some(&backend), RunOptions::default()).unwrap();
    assert_eq!(server.requests(), 6);
    assert_eq!(summary.gateway.requests, 6);
}

#[test]
fn failed_repairs_are_recorded_as_misses() {
    let server = StubServer::start(|_, _| Reply::ok("no idea"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = llm_config(dir.path(), &server);
    let dataset = load_dataset(&cfg).unwrap();
    let backend = HttpBackend::new(cfg.backend.clone()).unwrap();
    let summary = run_prepared(&cfg, &dataset, Some(&backend), RunOptions::default()).unwrap();
    assert_eq!(summary.failures, 6);
    let report = evaluate(&summary.results_path).unwrap().report;
    assert_eq!(report.parse_failure_rate, 1.0);
    assert_eq!(report.acc1, 0.0);
}

#[test]
fn auth_errors_abort_the_run() {
    let server = StubServer::start(|_, _| Reply::status(401, "{}".into()));
    let dir = tempfile::tempdir().unwrap();
    let cfg = llm_config(dir.path(), &server);
    let dataset = load_dataset(&cfg).unwrap();
    let backend = HttpBackend::new(cfg.backend.clone()).unwrap();
    let err = run_prepared(&cfg, &dataset, Some(&backend), RunOptions::default()).unwrap_err();
    assert!(matches!(err, RunnerError::Gateway(ref e) if e.is_fatal()), "{err}");
    assert!(server.requests() <= cfg.backend.max_in_flight);
}

#[test]
fn no_network_swaps_in_the_mock() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mock_config(dir.path(), 1);
    cfg.predictor = Predictor::Llm;
    std::env::set_var("NO_NETWORK", "1");
    let (effective, note) = effective_config(&cfg);
    std::env::remove_var("NO_NETWORK");
    assert_eq!(effective.predictor, Predictor::Mock);
    assert!(note.is_some());
}

#[test]
fn cli_runs_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    common::write_synthetic(dir.path(), 2);
    let cfg_path = dir.path().join("exp.cfg");
    fs::write(&cfg_path, "# relative paths resolve against this file\nstays_path = stays.csv\noutput_dir = results\npredictor = mock\nk = 5\n").unwrap();
    let bin = env!("CARGO_BIN_EXE_nextplace");
    let run = Command::new(bin).arg("--config").arg(&cfg_path).arg("run").output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let results = dir.path().join("results/run_mock_k5.jsonl");
    assert!(results.is_file());

    let eval = Command::new(bin).arg("evaluate").arg(&results).output().unwrap();
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("acc5="));
    assert!(stdout.contains("acc10=-"));

    let first = records(&results)[0].sample_id.clone();
    let case = Command::new(bin)
        .args(["--config"])
        .arg(&cfg_path)
        .args(["casestudy", "--results"])
        .arg(&results)
        .args(["--sample", &first])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&case.stdout);
    assert!(stdout.contains("<history>: ") && stdout.contains("--- response ---"), "{stdout}");
    assert!(!stdout.contains("hash differs"));

    let bad = Command::new(bin).args(["--set", "nonsense=1", "run"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
