use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use dpsmc::fixedpoint::{FixedPointCodec, FixedVector};
use dpsmc::harness::{
    execute, inject_adversary, run_experiment, AdversaryReport, ExperimentConfig, HarnessError, MemoryNetwork,
    MessageTamper, Network, Outcome, TcpNetwork, TransportAggregator,
};
use dpsmc::keystream::Seed;
use dpsmc::securesum::{InProcessSummation, ProtocolConfig, SecureSumError, SecureSummation, WireMessage};
use serde_json::{json, Value};

fn networks() -> [&'static dyn Network; 2] {
    [&MemoryNetwork, &TcpNetwork]
}

fn base_json() -> Value {
    json!({
        "name": "test",
        "parties": { "count": 10, "role": "honest_tee" },
        "protocol": { "kind": "pairwise" },
        "transport": "memory",
        "timeout_ms": 10000,
        "data": {
            "source": { "kind": "gaussian_mixture", "samples": 600, "features": 6, "classes": 3, "separation": 3.0 },
            "test_fraction": 0.2
        },
        "train": {
            "model": { "kind": "logistic_regression", "features": 6, "classes": 3 },
            "regime": "dp_smc",
            "batch": { "kind": "swor", "b": 60 },
            "privacy": { "noise_multiplier": 1.0 },
            "steps": 10,
            "eval_every": 5
        },
        "seeds": { "master": 3 }
    })
}

fn parse(v: Value) -> Result<ExperimentConfig, HarnessError> {
    let config = ExperimentConfig::from_json(&v.to_string())?;
    config.validate()?;
    Ok(config)
}

fn codec() -> FixedPointCodec {
    FixedPointCodec::default()
}

#[test]
fn loopback_echo_of_a_large_vector() {
    let big = FixedVector::from_words_reduced(codec(), (0..1_000_000u64).map(|i| i.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    let sent = big.to_bytes();
    for net in networks() {
        let mut eps = net.connect(&[1, 2]).unwrap();
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        a.send(2, sent.clone()).unwrap();
        let (from, got) = b.recv_timeout(Duration::from_secs(20)).unwrap();
        assert_eq!(from, 1);
        b.send(1, got).unwrap();
        let (from, back) = a.recv_timeout(Duration::from_secs(20)).unwrap();
        assert_eq!(from, 2, "{}", net.name());
        assert_eq!(back, sent, "{}", net.name());
        assert_eq!(FixedVector::from_bytes(codec(), &back).unwrap().0, big);
    }
}

#[test]
fn both_transports_agree_with_the_in_process_sum() {
    let ids: Vec<u32> = (0..10).collect();
    let setup = Seed::from_u64(12);
    for protocol in [
        ProtocolConfig::Pairwise { group_size: None },
        ProtocolConfig::Pairwise { group_size: Some(3) },
        ProtocolConfig::Dca {
            nodes: 4,
            subsets: Default::default(),
        },
    ] {
        let mut local = InProcessSummation::new(&protocol, &ids, &setup, codec()).unwrap();
        let mut remote: Vec<TransportAggregator> = networks()
            .iter()
            .map(|n| TransportAggregator::new(&protocol, &ids, &setup, codec(), *n, Duration::from_secs(10)).unwrap())
            .collect();
        for round in 0..3 {
            let inputs: Vec<FixedVector> = (0..10)
                .map(|i| codec().encode(&[i as f64 * 0.5, round as f64, -1.0]).unwrap())
                .collect();
            let want = local.sum_round(round, &inputs).unwrap().sum;
            for r in &mut remote {
                assert_eq!(r.sum_round(round, &inputs).unwrap().sum, want, "{protocol:?}");
            }
        }
        assert!(remote.iter().all(|r| r.transcript().verify()));
        assert_eq!(remote[0].transcript().entries(), remote[1].transcript().entries());
    }
}

struct Drop(u32);

impl MessageTamper for Drop {
    fn outgoing(&self, _round: u64, msg: &mut WireMessage) -> bool {
        msg.sender != self.0
    }
}

#[test]
fn a_dropped_message_aborts_within_the_timeout() {
    let ids: Vec<u32> = (0..4).collect();
    for net in networks() {
        let mut agg = TransportAggregator::new(
            &ProtocolConfig::Pairwise { group_size: None },
            &ids,
            &Seed::from_u64(1),
            codec(),
            net,
            Duration::from_millis(200),
        )
        .unwrap()
        .with_tamper(Arc::new(Drop(2)));
        let inputs = vec![FixedVector::zeros(codec(), 5); 4];
        let start = Instant::now();
        let err = agg.sum_round(0, &inputs).unwrap_err();
        assert!(start.elapsed() < Duration::from_secs(3), "{}", net.name());
        assert!(matches!(err, SecureSumError::IncompleteRound { received: 3, .. }), "{err:?}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let cases: Vec<(&str, Box<dyn Fn(&mut Value)>)> = vec![
        ("schema", Box::new(|v| v["schema_version"] = json!(99))),
        ("no clients", Box::new(|v| v["parties"] = json!([{ "id": 0, "capabilities": ["master"] }]))),
        (
            "duplicate ids",
            Box::new(|v| v["parties"] = json!([{ "id": 1 }, { "id": 1 }])),
        ),
        ("zero timeout", Box::new(|v| v["timeout_ms"] = json!(0))),
        ("slack", Box::new(|v| v["amplification_slack"] = json!(1.5))),
        ("negative steps", Box::new(|v| v["train"]["steps"] = json!(-1))),
        ("dca without nodes", Box::new(|v| v["protocol"] = json!({ "kind": "dca", "nodes": 0 }))),
        ("group size", Box::new(|v| v["protocol"] = json!({ "kind": "pairwise", "group_size": 1 }))),
        (
            "file mode without path",
            Box::new(|v| v["token_list"] = json!({ "mode": "file" })),
        ),
        (
            "honest adversary",
            Box::new(|v| v["adversary"] = json!([{ "behavior": "observe_all", "parties": [0] }])),
        ),
        (
            "too many colluders",
            Box::new(|v| {
                v["train"]["privacy"] = json!({ "noise_multiplier": 1.0, "noise_mode": "collusion_robust", "colluders": 9 })
            }),
        ),
    ];
    assert!(parse(base_json()).is_ok());
    for (name, edit) in cases {
        let mut v = base_json();
        edit(&mut v);
        assert!(parse(v).is_err(), "{name} accepted");
    }
}

#[test]
fn adversaries_need_malicious_targets_and_known_behaviors() {
    let mut v = base_json();
    v["parties"] = json!({ "count": 4, "role": "malicious" });
    let config = parse(v).unwrap();
    assert!(matches!(
        inject_adversary(&config, "steal_keys", &[0]),
        Err(HarnessError::UnknownBehavior(_))
    ));
    let injected = inject_adversary(&config, "reveal-noise-share", &[1]).unwrap();
    assert_eq!(injected.adversary.len(), 1);
    let honest = parse(base_json()).unwrap();
    assert!(inject_adversary(&honest, "observe_all", &[0]).is_err());
}

fn strip_timings(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("timings");
            map.values_mut().for_each(strip_timings);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

#[test]
fn reruns_are_identical_apart_from_timings() {
    let mut v = base_json();
    v["transport"] = json!("tcp");
    v["parties"] = json!({ "count": 5, "role": "malicious" });
    v["token_list"] = json!({ "mode": "mixnet" });
    v["adversary"] = json!([{ "behavior": "observe_all", "parties": [0] }]);
    let config = parse(v).unwrap();
    let run = || {
        let mut j: Value = serde_json::from_str(&execute(&config).unwrap().result.to_json()).unwrap();
        strip_timings(&mut j);
        j
    };
    assert_eq!(run(), run());
}

#[test]
fn revealed_share_leaves_the_predicted_residual() {
    let mut v = base_json();
    v["parties"] = json!((0..10)
        .map(|i| json!({ "id": i, "role": if i == 0 { "malicious" } else { "honest_tee" } }))
        .collect::<Vec<_>>());
    v["train"]["steps"] = json!(120);
    v["train"]["model"] = json!({ "kind": "logistic_regression", "features": 20, "classes": 4 });
    v["data"]["source"] = json!({ "kind": "gaussian_mixture", "samples": 600, "features": 20, "classes": 4, "separation": 3.0 });
    v["adversary"] = json!([{ "behavior": "reveal_noise_share", "parties": [0] }]);
    let result = execute(&parse(v).unwrap()).unwrap().result;
    assert!(result.completed());
    let sigma = result.report.as_ref().unwrap().aggregate_noise_std;
    match &result.adversary[0] {
        AdversaryReport::RevealNoiseShare {
            predicted_residual_variance,
            measured_residual_variance,
            samples,
            ..
        } => {
            assert!(*samples >= 10_000, "{samples}");
            assert!((predicted_residual_variance / (sigma * sigma) - 0.9).abs() < 1e-9);
            let measured = measured_residual_variance.unwrap();
            assert!((measured / predicted_residual_variance - 1.0).abs() < 0.05, "{measured}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn dropped_token_is_detected() {
    let mut v = base_json();
    v["parties"] = json!({ "count": 4, "role": "malicious" });
    v["token_list"] = json!({ "mode": "mixnet" });
    v["adversary"] = json!([{ "behavior": "drop_token", "parties": [2] }]);
    let result = execute(&parse(v).unwrap()).unwrap().result;
    match &result.outcome {
        Outcome::Aborted { phase, .. } => assert_eq!(phase, "token list"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(result.adversary[0], AdversaryReport::DropToken { detected: true, .. }));
}

#[test]
fn substituted_message_shifts_the_sum_by_the_offset() {
    for transport in ["memory", "tcp"] {
        let mut v = base_json();
        v["transport"] = json!(transport);
        v["parties"] = json!({ "count": 4, "role": "malicious" });
        v["adversary"] = json!([{ "behavior": "substitute_message", "parties": [1], "offset": 777 }]);
        let result = execute(&parse(v).unwrap()).unwrap().result;
        match &result.adversary[0] {
            AdversaryReport::SubstituteMessage { offset, deviations, .. } => {
                assert_eq!(*offset, 777);
                assert_eq!(deviations.len(), 10);
                assert!(deviations.iter().all(|d| d.uniform_offset == Some(777)), "{deviations:?}");
            }
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn empty_and_busy_rounds_look_the_same_on_the_wire() {
    let mut v = base_json();
    v["parties"] = json!({ "count": 6, "role": "malicious" });
    // a tiny Poisson rate leaves many party batches empty
    v["train"]["batch"] = json!({ "kind": "poisson", "gamma": 0.01 });
    v["train"]["steps"] = json!(20);
    v["adversary"] = json!([{ "behavior": "observe_all", "parties": [3] }]);
    let run = execute(&parse(v).unwrap()).unwrap();
    let transcript = run.transcript.unwrap();
    assert!(transcript.verify());
    let shapes: Vec<_> = (0..20).map(|r| transcript.round_shape(r)).collect();
    assert!(shapes.windows(2).all(|w| w[0] == w[1]));
    let summary = run.result.transcript.unwrap();
    assert!(summary.uniform_rounds && summary.verified);
    match &run.result.adversary[0] {
        AdversaryReport::ObserveAll { uniform_rounds, messages_observed, .. } => {
            assert!(*uniform_rounds);
            assert!(*messages_observed > 0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn results_are_written_to_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base_json();
    v["transport"] = json!("tcp");
    let result = run_experiment(&parse(v).unwrap(), Some(dir.path())).unwrap();
    assert!(result.completed());
    for file in ["result.json", "curve.csv", "transcript.json"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert!(csv.starts_with("step,train_loss,train_accuracy,test_accuracy\n"));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dpsmc")).args(args).output().unwrap()
}

#[test]
fn command_line_subcommands() {
    let out = cli(&["solve-sensitivity", "-k", "1", "-C", "1", "--delta-prime", "0.05"]);
    assert!(out.status.success());
    let value: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((value - 1.95996).abs() < 1e-4);

    let out = cli(&["analyze-amplification", "-n", "100", "-b", "10"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("adv_frac,slack,swor_frac,poisson_frac\n"), "{text}");

    assert!(!cli(&["solve-sensitivity", "-k", "0"]).status.success());

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let mut v = base_json();
    v["parties"] = json!({ "count": 3, "role": "hbc" });
    v["token_list"] = json!({ "mode": "mixnet" });
    std::fs::write(&config, v.to_string()).unwrap();
    let list = dir.path().join("tokens.bin");
    let out = cli(&["make-token-list", "--config", config.to_str().unwrap(), "--out", list.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(list.exists());

    v["token_list"] = json!({ "mode": "file", "path": list });
    std::fs::write(&config, v.to_string()).unwrap();
    let results = dir.path().join("out");
    let out = cli(&["run-experiment", "--config", config.to_str().unwrap(), "--out", results.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result: Value = serde_json::from_str(&std::fs::read_to_string(results.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["status"], "completed");
}
