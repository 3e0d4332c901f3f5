use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use netgpt::cli::{self, CliError};
use netgpt::trainer::EvalMode;
use serde_json::Value;

fn netgpt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netgpt"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn forced_direct_answer_has_no_agent_segments() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["run", "--task-class", "direct", "--force-answer", "qa_answer", "--seed", "5"];
    let first = netgpt(dir.path(), &args);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let second = netgpt(dir.path(), &args);
    assert_eq!(second.status.code(), Some(0));

    let log = fs::read_to_string(dir.path().join("trajectories.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], lines[1], "same seed gives byte-identical log lines");
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    let segments = v["segments"].as_array().unwrap();
    assert!(segments.iter().all(|s| s["source"] != "agent"));
    assert_eq!(v["terminal"]["kind"], "answered");
    assert_eq!(v["reward_vector"]["accuracy"], 1.0);
}

#[test]
fn failed_episode_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = netgpt(
        dir.path(),
        &["run", "--task-class", "network_analysis", "--force-answer", "root_cause"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ungrounded_answer"));
}

#[test]
fn invalid_weights_exit_1_naming_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let out = netgpt(dir.path(), &["run", "--set", "lambda_fmt=1.0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("lambda_fmt must be less than lambda_acc"), "{}", stderr(&out));

    let out = netgpt(dir.path(), &["train", "--set", "group_size=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("group_size"), "{}", stderr(&out));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 3, "trainer": {"iterations": 4}, "rewards": {"lambda_acc": 2.0, "lambda_fmt": 0.2, "lambda_eff": 0.2, "lambda_qos": 0.2, "lambda_exp": 0.1}}"#).unwrap();
    let loaded = cli::load_config(Some(&cfg), &["trainer.iterations=6".into()]).unwrap();
    assert_eq!(loaded.config.seed, 3);
    assert_eq!(loaded.config.trainer.iterations, 6);
    assert_eq!(loaded.config.rewards.lambda_acc(), 2.0);
    assert_eq!(loaded.config.trainer.group_size, 8);

    fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    assert!(matches!(cli::load_config(Some(&cfg), &[]), Err(CliError::BadConfig(_))));
}

#[test]
fn sft_dataset_roundtrip_and_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("demos.jsonl");
    fs::write(
        &data,
        concat!(
            r#"{"features":[0,1,0,1],"step":0,"last_outcome":"none","demo_action":3}"#,
            "\n",
            r#"{"features":[0,1,0,1],"step":1,"last_outcome":"agent_success","demo_action":1}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = netgpt(dir.path(), &["sft", "--dataset", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dir.path().join("checkpoint.json").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let loss: f64 = stdout
        .split_whitespace()
        .find_map(|w| w.strip_prefix("final_loss="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(loss.is_finite());

    let mut text = fs::read_to_string(&data).unwrap();
    text.push_str("{\"features\": oops}\n");
    fs::write(&data, text).unwrap();
    let out = netgpt(dir.path(), &["sft", "--dataset", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    let loaded = cli::load_config(None, &[]).unwrap();
    match cli::cmd_sft(&loaded, Some(&data)) {
        Err(CliError::BadDataset { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected BadDataset, got {other:?}"),
    }
}

#[test]
fn generated_demos_reach_high_demo_probability() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = cli::load_config(None, &[format!("output_dir={}", serde_json::to_string(dir.path()).unwrap())]).unwrap();
    let (_, res) = cli::cmd_sft(&loaded, None).unwrap();
    assert!(res.mean_demo_prob >= 0.9, "{}", res.mean_demo_prob);
    assert_eq!(fs::read_to_string(dir.path().join("sft_demos.jsonl")).unwrap().lines().count(), 200);
}

#[test]
fn train_writes_report_and_rejects_bad_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = netgpt(dir.path(), &["train", "--set", "iterations=10", "--set", "checkpoint_every=5"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[0], "iteration,mean_reward,success_rate,mean_entropy,triggers");
    assert!(dir.path().join("checkpoint_00005.json").exists());
    assert!(dir.path().join("checkpoint_00010.json").exists());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"shape":[2,2],"values":[0,0,0,0]}"#).unwrap();
    let out = netgpt(dir.path(), &["train", "--checkpoint", bad.to_str().unwrap(), "--set", "iterations=2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad checkpoint"), "{}", stderr(&out));
}

#[test]
fn eval_is_deterministic_and_counts_are_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let a = netgpt(dir.path(), &["eval", "--episodes", "100", "--sample"]);
    let b = netgpt(dir.path(), &["eval", "--episodes", "100", "--sample"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    let failures: u64 = v["failure_counts"].as_object().unwrap().values().map(|x| x.as_u64().unwrap()).sum();
    assert!(failures <= 100);

    let out = netgpt(dir.path(), &["eval", "--episodes", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn default_training_beats_uniform_in_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = format!("output_dir={}", serde_json::to_string(dir.path()).unwrap());
    let loaded = cli::load_config(None, &[out]).unwrap();
    let (_, report) = cli::cmd_train(&loaded, None).unwrap();
    assert!(report.last().unwrap().success_rate >= 0.95);

    let ckpt = dir.path().join("checkpoint.json");
    let (_, trained) = cli::cmd_eval(&loaded, Some(&ckpt), 500, EvalMode::Greedy).unwrap();
    let (_, uniform) = cli::cmd_eval(&loaded, None, 500, EvalMode::Sample).unwrap();
    assert!(trained.success_rate > uniform.success_rate);
}
