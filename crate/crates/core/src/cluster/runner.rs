//! Task execution backends.
//!
//! [`SubprocessRunner`] runs commands as real OS subprocesses (`sh -c`) in a
//! per-task directory, capturing stdout/stderr line by line.
//! [`SimRunner`] interprets commands deterministically for simulation:
//! `exit N` fails with code N, everything else succeeds after a fixed
//! simulated duration, `echo` lines become captured output.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::BufRead;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::clock::{Clock, Millis, SystemClock};
use crate::scheduler::AttemptOutcome;

/// Reported when the subprocess cannot be spawned at all.
pub const SPAWN_FAILURE_EXIT_CODE: i32 = 127;

#[derive(Debug, Clone, PartialEq)]
pub struct AssignedTask {
    pub task_id: String,
    pub attempt: u32,
    pub command: String,
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskCompletion {
    pub task_id: String,
    pub attempt: u32,
    pub outcome: AttemptOutcome,
    /// Captured output as (timestamp, line).
    pub output: Vec<(Millis, String)>,
}

pub trait TaskRunner: Send {
    fn start(&mut self, task: AssignedTask, workdir: &Path, now_ms: Millis);
    /// Completions since the last poll, in completion order.
    fn poll(&mut self, now_ms: Millis) -> Vec<TaskCompletion>;
    fn running(&self) -> usize;
    /// Abrupt halt: kill everything, report nothing.
    fn halt_all(&mut self);
}

// ---------------------------------------------------------------------------
// Real subprocesses
// ---------------------------------------------------------------------------

pub struct SubprocessRunner {
    finished: Arc<Mutex<VecDeque<TaskCompletion>>>,
    children: Arc<Mutex<HashMap<String, Arc<Mutex<Child>>>>>,
    running: Arc<AtomicUsize>,
    halted: bool,
}

impl SubprocessRunner {
    pub fn new() -> Self {
        Self {
            finished: Arc::new(Mutex::new(VecDeque::new())),
            children: Arc::new(Mutex::new(HashMap::new())),
            running: Arc::new(AtomicUsize::new(0)),
            halted: false,
        }
    }
}

impl Default for SubprocessRunner {
    fn default() -> Self {
        Self::new()
    }
}

impl TaskRunner for SubprocessRunner {
    fn start(&mut self, task: AssignedTask, workdir: &Path, _now_ms: Millis) {
        let task_dir = workdir
            .join("tasks")
            .join(format!("{}-a{}", sanitize(&task.task_id), task.attempt));
        let finished = Arc::clone(&self.finished);
        let children = Arc::clone(&self.children);
        let running = Arc::clone(&self.running);
        running.fetch_add(1, Ordering::SeqCst);

        std::thread::spawn(move || {
            let completion = run_subprocess(&task, &task_dir, &children);
            running.fetch_sub(1, Ordering::SeqCst);
            finished.lock().unwrap().push_back(completion);
        });
    }

    fn poll(&mut self, _now_ms: Millis) -> Vec<TaskCompletion> {
        if self.halted {
            return Vec::new();
        }
        self.finished.lock().unwrap().drain(..).collect()
    }

    fn running(&self) -> usize {
        self.running.load(Ordering::SeqCst)
    }

    fn halt_all(&mut self) {
        self.halted = true;
        for child in self.children.lock().unwrap().values() {
            let _ = child.lock().unwrap().kill();
        }
    }
}

fn run_subprocess(
    task: &AssignedTask,
    task_dir: &Path,
    children: &Mutex<HashMap<String, Arc<Mutex<Child>>>>,
) -> TaskCompletion {
    let clock = SystemClock;
    let spawn_failure = |message: String| TaskCompletion {
        task_id: task.task_id.clone(),
        attempt: task.attempt,
        outcome: AttemptOutcome::Failure {
            exit_code: SPAWN_FAILURE_EXIT_CODE,
        },
        output: vec![(clock.now_ms(), message)],
    };

    if let Err(e) = std::fs::create_dir_all(task_dir) {
        return spawn_failure(format!("cannot create task dir: {e}"));
    }
    let spawned = Command::new("sh")
        .arg("-c")
        .arg(&task.command)
        .envs(&task.env)
        .current_dir(task_dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn();
    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => return spawn_failure(format!("spawn failed: {e}")),
    };

    let stdout = child.stdout.take().expect("stdout piped");
    let stderr = child.stderr.take().expect("stderr piped");
    let child = Arc::new(Mutex::new(child));
    children
        .lock()
        .unwrap()
        .insert(task.task_id.clone(), Arc::clone(&child));

    let output = Arc::new(Mutex::new(Vec::<(Millis, String)>::new()));
    let readers: Vec<_> = [
        Box::new(stdout) as Box<dyn std::io::Read + Send>,
        Box::new(stderr),
    ]
    .into_iter()
    .map(|stream| {
        let output = Arc::clone(&output);
        std::thread::spawn(move || {
            for line in std::io::BufReader::new(stream).lines().map_while(Result::ok) {
                output.lock().unwrap().push((SystemClock.now_ms(), line));
            }
        })
    })
    .collect();
    for reader in readers {
        let _ = reader.join();
    }

    let status = child.lock().unwrap().wait();
    children.lock().unwrap().remove(&task.task_id);

    let outcome = match status {
        Ok(status) if status.success() => AttemptOutcome::Success,
        Ok(status) => AttemptOutcome::Failure {
            exit_code: exit_code_of(status),
        },
        Err(_) => AttemptOutcome::Failure {
            exit_code: SPAWN_FAILURE_EXIT_CODE,
        },
    };
    let mut output = Arc::try_unwrap(output)
        .map(|m| m.into_inner().unwrap())
        .unwrap_or_default();
    output.sort_by_key(|(ts, _)| *ts);
    TaskCompletion {
        task_id: task.task_id.clone(),
        attempt: task.attempt,
        outcome,
        output,
    }
}

fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    if let Some(code) = status.code() {
        return code;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(signal) = status.signal() {
            return 128 + signal;
        }
    }
    -1
}

fn sanitize(task_id: &str) -> String {
    task_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

// ---------------------------------------------------------------------------
// Simulated execution
// ---------------------------------------------------------------------------

/// Deterministic executor for simulations: commands complete `exec_ms` of
/// simulated time after start.
pub struct SimRunner {
    exec_ms: u64,
    running: Vec<(AssignedTask, Millis)>,
}

impl SimRunner {
    pub fn new(exec_ms: u64) -> Self {
        Self {
            exec_ms,
            running: Vec::new(),
        }
    }

    fn interpret(command: &str) -> (AttemptOutcome, Vec<String>) {
        let trimmed = command.trim();
        if let Some(rest) = trimmed.strip_prefix("exit ") {
            let code: i32 = rest.trim().parse().unwrap_or(1);
            if code == 0 {
                return (AttemptOutcome::Success, Vec::new());
            }
            return (AttemptOutcome::Failure { exit_code: code }, Vec::new());
        }
        if trimmed == "false" {
            return (AttemptOutcome::Failure { exit_code: 1 }, Vec::new());
        }
        if let Some(rest) = trimmed.strip_prefix("echo ") {
            return (AttemptOutcome::Success, vec![rest.to_string()]);
        }
        (AttemptOutcome::Success, Vec::new())
    }
}

impl TaskRunner for SimRunner {
    fn start(&mut self, task: AssignedTask, _workdir: &Path, now_ms: Millis) {
        let due = now_ms + self.exec_ms;
        self.running.push((task, due));
    }

    fn poll(&mut self, now_ms: Millis) -> Vec<TaskCompletion> {
        let mut done = Vec::new();
        self.running.retain(|(task, due)| {
            if *due <= now_ms {
                let (outcome, lines) = Self::interpret(&task.command);
                done.push(TaskCompletion {
                    task_id: task.task_id.clone(),
                    attempt: task.attempt,
                    outcome,
                    output: lines.into_iter().map(|l| (now_ms, l)).collect(),
                });
                false
            } else {
                true
            }
        });
        done
    }

    fn running(&self) -> usize {
        self.running.len()
    }

    fn halt_all(&mut self) {
        self.running.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(command: &str) -> AssignedTask {
        AssignedTask {
            task_id: "wf-1/t.0".into(),
            attempt: 1,
            command: command.into(),
            env: BTreeMap::new(),
        }
    }

    fn run_real(command: &str) -> TaskCompletion {
        let dir = tempfile::tempdir().unwrap();
        let mut runner = SubprocessRunner::new();
        runner.start(task(command), dir.path(), 0);
        for _ in 0..500 {
            let mut done = runner.poll(0);
            if let Some(c) = done.pop() {
                return c;
            }
            std::thread::sleep(std::time::Duration::from_millis(10));
        }
        panic!("subprocess did not finish");
    }

    #[test]
    fn true_succeeds() {
        assert_eq!(run_real("true").outcome, AttemptOutcome::Success);
    }

    #[test]
    fn exit_code_propagates() {
        assert_eq!(
            run_real("exit 3").outcome,
            AttemptOutcome::Failure { exit_code: 3 }
        );
    }

    #[test]
    fn output_lines_are_captured_in_order() {
        let completion = run_real("echo one; echo two; echo three");
        let lines: Vec<&str> = completion.output.iter().map(|(_, l)| l.as_str()).collect();
        assert_eq!(lines, vec!["one", "two", "three"]);
    }

    #[test]
    fn env_reaches_the_subprocess() {
        let dir = tempfile::tempdir().unwrap();
        let mut runner = SubprocessRunner::new();
        let mut t = task("echo $HYPER_TASK_ID");
        t.env.insert("HYPER_TASK_ID".into(), "wf-1/t.0".into());
        runner.start(t, dir.path(), 0);
        let completion = loop {
            if let Some(c) = runner.poll(0).pop() {
                break c;
            }
            std::thread::sleep(std::time::Duration::from_millis(5));
        };
        assert_eq!(completion.output[0].1, "wf-1/t.0");
    }

    #[test]
    fn unspawnable_command_reports_reserved_code() {
        // An unreadable working directory cannot be created.
        let dir = tempfile::tempdir().unwrap();
        let blocked = dir.path().join("blocked");
        std::fs::write(&blocked, b"file, not dir").unwrap();
        let mut runner = SubprocessRunner::new();
        runner.start(task("true"), &blocked, 0);
        let completion = loop {
            if let Some(c) = runner.poll(0).pop() {
                break c;
            }
            std::thread::sleep(std::time::Duration::from_millis(5));
        };
        assert_eq!(
            completion.outcome,
            AttemptOutcome::Failure {
                exit_code: SPAWN_FAILURE_EXIT_CODE
            }
        );
    }

    #[test]
    fn sim_runner_is_deterministic_and_timed() {
        let dir = std::path::Path::new("/unused");
        let mut runner = SimRunner::new(100);
        runner.start(task("echo hi"), dir, 1_000);
        assert!(runner.poll(1_050).is_empty());
        let done = runner.poll(1_100);
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].outcome, AttemptOutcome::Success);
        assert_eq!(done[0].output[0].1, "hi");

        let mut failing = SimRunner::new(0);
        failing.start(task("exit 4"), dir, 0);
        assert_eq!(
            failing.poll(0)[0].outcome,
            AttemptOutcome::Failure { exit_code: 4 }
        );
    }
}
