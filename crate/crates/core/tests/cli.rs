// SPDX-License-Identifier: Apache-2.0

mod common;

use std::process::{Command, Output};
use std::time::Duration;

fn sandboxd(args: &[&str]) -> Output {
    Command::new(common::sandboxd())
        .args(args)
        .env_remove("SANDBOX_FORCE_ARCH")
        .env_remove("SANDBOX_FORCE_ACCEL")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

const ROOMY: [&str; 4] = ["--cpu-limit", "8", "--mem-limit", "17179869184"];

#[test]
fn run_with_mock_guest_exits_cleanly_after_three_states() {
    let tmp = tempfile::tempdir().unwrap();
    let cli = common::spawn_run(
        tmp.path(),
        &["--mock-boot-ms", "100", "--mock-run-ms", "500", "--monitor-interval-ms", "50"],
    );
    let part = reqwest::blocking::multipart::Part::bytes(common::qcow2_bytes(64 * 1024)).file_name("a.qcow2");
    let r = reqwest::blocking::Client::new()
        .post(format!("http://{}/upload", cli.addr))
        .multipart(reqwest::blocking::multipart::Form::new().part("image", part))
        .send()
        .unwrap();
    assert_eq!(r.status(), 202);
    let (code, lines) = cli.finish(Duration::from_secs(10));
    assert_eq!(code, Some(0));
    let transitions: Vec<serde_json::Value> =
        lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    let path: Vec<&str> = std::iter::once(transitions[0]["from"].as_str().unwrap())
        .chain(transitions.iter().map(|t| t["to"].as_str().unwrap()))
        .collect();
    assert_eq!(path, ["loader", "vm_running", "terminated"]);
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0, "workspace left behind");
}

#[test]
fn run_json_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cli = common::spawn_run(tmp.path(), &["--json", "--mock-boot-ms", "50", "--mock-run-ms", "200"]);
    let r = reqwest::blocking::Client::new()
        .post(format!("http://{}/upload", cli.addr))
        .header("content-type", "application/octet-stream")
        .body(common::qcow2_bytes(4096))
        .send()
        .unwrap();
    assert_eq!(r.status(), 202);
    let (code, lines) = cli.finish(Duration::from_secs(10));
    assert_eq!(code, Some(0));
    let summary: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
    for key in ["session_id", "endpoint", "config_id", "cause", "wipe", "boot", "transitions", "exit_code"] {
        assert!(summary.get(key).is_some(), "missing {key}: {summary}");
    }
    assert_eq!(summary["exit_code"], 0);
    assert_eq!(summary["cause"]["kind"], "guest_exited");
    assert_eq!(summary["wipe"]["status"], "complete");
}

#[test]
fn unreadable_catalog_fails_before_binding() {
    let tmp = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let listen = format!("127.0.0.1:{port}");
    let mut args = vec!["run", "--listen", &listen, "--catalog", "/nonexistent/catalog.json"];
    args.extend(ROOMY);
    let workspace = tmp.path().to_string_lossy().into_owned();
    args.extend(["--workspace-root", &workspace]);
    let out = sandboxd(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(!stderr(&out).contains("listening on"));
    assert!(std::net::TcpStream::connect(&listen).is_err());
}

#[test]
fn loader_timeout_exits_with_its_own_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cli = common::spawn_run(tmp.path(), &["--loader-timeout", "1", "--json"]);
    let (code, lines) = cli.finish(Duration::from_secs(10));
    assert_eq!(code, Some(4));
    let summary: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
    assert_eq!(summary["cause"]["kind"], "loader_timeout");
}

#[test]
fn qemu_backend_requires_acknowledgement() {
    let out = sandboxd(&["run", "--backend", "qemu", "--listen", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("RiskNotAcknowledged"), "{}", stderr(&out));
}

#[test]
fn select_config_honours_forced_host() {
    let mut args = vec!["select-config", "--arch", "aarch64", "--accel", "1"];
    args.extend(ROOMY);
    let out = sandboxd(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().next(), Some("aarch64-kvm-base"));

    let mut args = vec!["select-config", "--arch", "x86_64", "--accel", "0", "--json"];
    args.extend(ROOMY);
    let v = json(&sandboxd(&args));
    assert_eq!(v["config"]["accel"], "tcg");
    assert_eq!(v["host"]["accel_available"], false);
}

#[test]
fn select_config_reports_infeasibility() {
    let out = sandboxd(&["select-config", "--arch", "x86_64", "--accel", "1", "--cpu-limit", "1", "--mem-limit", "1024"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("NoFeasibleCandidate"));

    let out = sandboxd(&["select-config", "--arch", "x86_64", "--accel", "1", "--cpu-limit", "1", "--mem-limit", "1024", "--json"]);
    assert_eq!(json(&out)["error"], "NoFeasibleCandidate");
}

#[test]
fn synth_cmdline_unknown_profile_fails() {
    let out = sandboxd(&["synth-cmdline", "--config", "riscv-kvm", "--image", "/x.qcow2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn capacity_report() {
    let out = sandboxd(&["capacity", "--lambda", "0.5", "--mu", "1"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("utilization") && l.ends_with(" 0.5")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("mean wait") && l.ends_with(" 1.0")), "{text}");

    let out = sandboxd(&["capacity", "--lambda", "1", "--mu", "1"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("unstable: requires ρ<1"));

    let v = json(&sandboxd(&[
        "capacity", "--lambda", "0.5", "--mu", "1", "--simulate", "200000", "--target-wait", "0.5", "--json",
    ]));
    assert_eq!(v["utilization"], 0.5);
    let sim = v["simulation"]["mean_wait"].as_f64().unwrap();
    assert!((sim - 1.0).abs() < 0.1, "{sim}");
    assert!(v["provision"]["workers"].as_u64().unwrap() >= 1);
}

#[test]
fn capacity_report_file() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("cap.json");
    let out = sandboxd(&["capacity", "--lambda", "0.9", "--mu", "1", "--report", report.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(report).unwrap()).unwrap();
    assert!((v["mean_wait"].as_f64().unwrap() - 9.0).abs() < 1e-9);
}

fn plan(input: serde_json::Value, extra: &[&str]) -> Output {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("plan.json");
    std::fs::write(&path, input.to_string()).unwrap();
    let mut args = vec!["plan", path.to_str().unwrap()];
    args.extend(extra);
    sandboxd(&args)
}

#[test]
fn plan_tables() {
    let input = serde_json::json!({
        "breakdown": {"t_up": 104.0, "t_cfg": 0.01, "t_boot": 25.0, "t_handoff": 1.0, "t_vnc": 0.5},
        "boot_table": [
            {"arch": "aarch64", "accel": true, "samples": [25.0]},
            {"arch": "aarch64", "accel": false, "samples": [250.0]}
        ],
        "risk": {"p_escape": 0.1, "p_reach": 0.5, "p_persist": 0.2, "p_externalized": 0.3,
                 "p_reattach": 0.4, "lambda_vuln": 0.0},
        "surface": 0.8
    });
    let out = plan(input.clone(), &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("boot             25.000 s"), "{text}");
    assert!(text.contains("total           130.510 s"), "{text}");
    assert!(text.contains("η 10.0"), "{text}");
    assert!(text.contains("escape bound     0.0"), "{text}");

    let v = json(&plan(input, &["--json"]));
    assert_eq!(v["risk"]["escape_bound"], 0.0);
    assert!((v["tti"]["total_seconds"].as_f64().unwrap() - 130.51).abs() < 1e-9);
}

#[test]
fn plan_rejects_unknown_fields() {
    let out = plan(serde_json::json!({"breakdown": {"t_up": 1.0, "t_cfg": 0.0, "t_boot": 1.0, "t_handoff": 0.0, "t_bogus": 1.0}}), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("t_bogus"), "{}", stderr(&out));
}

#[test]
fn help_documents_exit_codes() {
    let out = sandboxd(&["--help"]);
    let text = stdout(&out);
    for line in ["0  session ended cleanly", "2  configuration", "3  runtime", "4  loader timed out"] {
        assert!(text.contains(line), "{line}");
    }
}
