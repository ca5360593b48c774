//! Killing the local cluster process and relaunching it with the same
//! working directory must recover the master's state from the persisted
//! event log (and snapshot, when one exists): finished workflows stay
//! queryable with identical counts, and new submissions keep working.

use std::io::BufRead;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hyper")
}

type SimStdout = std::io::Lines<std::io::BufReader<std::process::ChildStdout>>;

/// The returned reader must stay alive as long as the child: dropping the
/// pipe would kill the process with EPIPE on its next print.
fn start_sim(base: &Path) -> (Child, String, SimStdout) {
    let mut child = Command::new(bin())
        .env_remove("HYPER_MASTER")
        .env_remove("HYPER_STORE_ROOT")
        .args([
            "sim",
            "--nodes",
            "3",
            "--capacity",
            "2",
            "--heartbeat-ms",
            "100",
            "--store-root",
            base.join("store").to_str().unwrap(),
            "--workdir",
            base.join("work").to_str().unwrap(),
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let mut lines = std::io::BufReader::new(stdout).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.strip_prefix("master listening on ").unwrap().to_string();
    (child, addr, lines)
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin())
        .env_remove("HYPER_MASTER")
        .env_remove("HYPER_STORE_ROOT")
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn killed_master_recovers_state_on_relaunch() {
    let base = tempfile::tempdir().unwrap();
    let recipe = base.path().join("r.yaml");
    std::fs::write(
        &recipe,
        "version: 1\nexperiments:\n  t:\n    command: \"echo n-{{n}}\"\n    workers: 3\n    params:\n      n: { values: [1, 2, 3, 4] }\n",
    )
    .unwrap();

    let (mut first, addr, _first_stdout) = start_sim(base.path());
    std::thread::sleep(Duration::from_millis(400));
    let (code, out, err) = cli(&["up", recipe.to_str().unwrap(), "--wait", "--master", &addr]);
    assert_eq!(code, 0, "{err}");
    let wf = out.lines().next().unwrap().trim().to_string();
    let (_, status_before, _) = cli(&["status", &wf, "--json", "--master", &addr]);
    let before: serde_json::Value = serde_json::from_str(&status_before).unwrap();
    assert_eq!(before["experiments"]["t"]["succeeded"], 4);

    // Hard kill; no goodbye, no snapshot guarantee (cold replay path).
    first.kill().unwrap();
    first.wait().unwrap();

    let (mut second, addr2, _second_stdout) = start_sim(base.path());
    std::thread::sleep(Duration::from_millis(400));

    let (code, status_after, err) = cli(&["status", &wf, "--json", "--master", &addr2]);
    assert_eq!(code, 0, "restored master must know {wf}: {err}");
    let after: serde_json::Value = serde_json::from_str(&status_after).unwrap();
    assert_eq!(after["phase"], "monitoring-complete");
    assert_eq!(after["experiments"], before["experiments"]);
    assert_eq!(after["started_at_ms"], before["started_at_ms"]);
    assert_eq!(after["finished_at_ms"], before["finished_at_ms"]);

    // The restored master keeps serving: a fresh submission completes and
    // gets the next workflow id.
    let (code, out, err) = cli(&["up", recipe.to_str().unwrap(), "--wait", "--master", &addr2]);
    assert_eq!(code, 0, "{err}");
    let wf2 = out.lines().next().unwrap().trim().to_string();
    assert_ne!(wf2, wf);

    second.kill().unwrap();
    second.wait().unwrap();
}
