// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sweep runner: cardinality, failure isolation and judge-cache reuse.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use saeval::judge::{JudgeConfig, JudgeMode};
use saeval::report::read_report;
use saeval::sae::{SaeKind, TrainConfig};
use saeval::scr::{ScrConfig, ScrMethod};
use saeval::store::SyntheticSpec;
use saeval::sweep::{run_sweep, SaeSource, SweepConfig};
use saeval::tpp::TppConfig;

const CLASSES_PREFIX: &str = "As a reminder, we only want to use these classes: ";

fn base_config(out: &Path) -> SweepConfig {
    let json = serde_json::json!({
        "synthetic": SyntheticSpec { num_samples: 8000, ..SyntheticSpec::desk_suite(0) },
        "saes": [],
        "scr": ScrConfig { n_sweep: vec![4], ..ScrConfig::default() },
        "tpp": TppConfig { n_sweep: vec![2], task_size: 1000, ..TppConfig::default() },
        "output_dir": out,
        "workers": 2,
    });
    SweepConfig::from_json(json.to_string().as_bytes()).unwrap()
}

fn short_training(kind: SaeKind, seed: u64) -> SaeSource {
    SaeSource::Train {
        kind,
        train: TrainConfig {
            num_samples: 20_000,
            checkpoint_fractions: vec![0.0, 0.5, 1.0],
            ..TrainConfig::desk()
        },
        seed,
        fractions: None,
    }
}

#[test]
fn two_saes_with_three_checkpoints_give_six_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config(dir.path());
    cfg.saes = vec![
        short_training(SaeKind::TopK { k: 8 }, 0),
        short_training(SaeKind::Standard, 1),
    ];
    let outcome = run_sweep(&cfg).unwrap();
    assert!(outcome.succeeded(), "{:?}", outcome.failures);
    assert_eq!(outcome.records.len(), 6);
    let doc = read_report(dir.path().join("report.json")).unwrap();
    assert_eq!(doc.records, outcome.records);
    let fractions: Vec<f64> = doc.records.iter().map(|r| r.checkpoint_fraction).collect();
    assert_eq!(fractions, [0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    for r in &doc.records {
        assert!(dir.path().join(&r.provenance.sae).is_file(), "{}", r.provenance.sae);
        assert!(r.score("scr_spurious", 4).is_some() && r.score("tpp", 2).is_some());
    }
}

#[test]
fn unreadable_checkpoint_fails_alone() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let mut cfg = base_config(&dir.path().join("out"));
    cfg.saes = vec![
        SaeSource::Checkpoint { path: junk },
        SaeSource::Random {
            kind: SaeKind::Standard,
            expansion_factor: 8,
            seed: 0,
        },
    ];
    let outcome = run_sweep(&cfg).unwrap();
    assert!(!outcome.succeeded());
    assert_eq!(outcome.failures.len(), 1);
    assert_eq!(outcome.records.len(), 1);
    assert!(outcome.failures[0].combination.starts_with("0:"));
    assert!(outcome.failures[0].combination.ends_with("junk.bin"));
    let failures = std::fs::read_to_string(dir.path().join("out/failures.json")).unwrap();
    assert!(failures.contains("junk.bin"), "{failures}");
}

/// Minimal chat-completions service: scores the spurious attribute 1 and
/// every other concept 0. Returns the endpoint and a request counter.
fn stand_in_judge() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let count = Arc::new(AtomicUsize::new(0));
    let served = Arc::clone(&count);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    if name.eq_ignore_ascii_case("content-length") {
                        length = value.trim().parse().unwrap_or(0);
                    }
                }
            }
            let mut body = vec![0; length];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            served.fetch_add(1, Ordering::SeqCst);
            let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
            let user = request["messages"][1]["content"].as_str().unwrap_or_default();
            let concepts = user
                .lines()
                .rev()
                .find_map(|l| l.strip_prefix(CLASSES_PREFIX))
                .unwrap_or_default();
            let scores: serde_json::Map<String, serde_json::Value> = concepts
                .split(", ")
                .map(|c| (c.to_owned(), serde_json::json!(u8::from(c == "gender"))))
                .collect();
            let content = format!("Step 1. Summary.\n{}", serde_json::Value::Object(scores));
            let payload =
                serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] })
                    .to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    (format!("http://{addr}/v1/chat/completions"), count)
}

#[test]
fn warm_judge_cache_makes_no_requests_and_reproduces_reports() {
    let (endpoint, requests) = stand_in_judge();
    let dir = tempfile::tempdir().unwrap();
    let judge = JudgeConfig {
        mode: JudgeMode::Http,
        endpoint,
        model: "stand-in".into(),
        cache_dir: Some(dir.path().join("cache")),
        requests_per_second: 1000.0,
        timeout_secs: 10,
        ..JudgeConfig::default()
    };
    let run = |name: &str| {
        let mut cfg = base_config(&dir.path().join(name));
        cfg.saes = vec![SaeSource::Oracle {
            dict_size: 256,
            seed: 0,
        }];
        cfg.scr_methods = vec![ScrMethod::JudgeFiltered];
        cfg.tpp_judge = true;
        cfg.judge = Some(judge.clone());
        let outcome = run_sweep(&cfg).unwrap();
        assert!(outcome.succeeded(), "{:?}", outcome.failures);
        ["report.json", "report.csv"].map(|f| std::fs::read(cfg.output_dir.join(f)).unwrap())
    };
    let cold = run("cold");
    let after_cold = requests.load(Ordering::SeqCst);
    assert!(after_cold > 0);
    let warm = run("warm");
    assert_eq!(
        requests.load(Ordering::SeqCst),
        after_cold,
        "warm run reached the service"
    );
    assert_eq!(cold, warm);
}
