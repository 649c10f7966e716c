//! External evaluator protocol (v1): newline-delimited JSON over a child
//! process's stdin/stdout, one outstanding request per worker.
//!
//! ```text
//! worker -> engine  {"type":"hello","protocol":1,"name":"..."}
//! engine -> worker  {"type":"eval","id":7,"phenotype":{...},"budget":{"epochs":5,"seed":42}}
//! worker -> engine  {"type":"result","id":7,"fitness":0.875,"metrics":{...}}
//! worker -> engine  {"type":"error","id":7,"message":"..."}
//! engine -> worker  {"type":"shutdown"}
//! ```
//!
//! Unknown fields are ignored; an unknown `type` is a protocol error.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::{EvalBudget, EvalError, Evaluator, FitnessScore, Metrics};
use crate::hyperspace::Phenotype;

pub const PROTOCOL_VERSION: u32 = 1;
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
/// Initialization attempts per slot before the run aborts.
pub const MAX_INIT_ATTEMPTS: u32 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub id: u64,
    pub phenotype: Phenotype,
    pub budget: EvalBudget,
}

/// Wire form of metrics. Only the confusion matrix is needed to rebuild
/// [`Metrics`]; everything else a worker sends is informational.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<u64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub id: u64,
    pub fitness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsPayload>,
}

impl EvalResult {
    pub fn into_score(self) -> FitnessScore {
        let metrics = self
            .metrics
            .and_then(|m| m.confusion)
            .and_then(|c| Metrics::from_confusion(c).ok());
        FitnessScore {
            value: self.fitness,
            metrics,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EngineMessage {
    Eval(EvalRequest),
    Shutdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum WorkerMessage {
    Hello {
        protocol: u32,
        #[serde(default)]
        name: String,
    },
    Result(EvalResult),
    Error {
        #[serde(default)]
        id: Option<u64>,
        message: String,
    },
}

impl EngineMessage {
    /// One protocol line, `\n` included.
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("message serializes");
        line.push('\n');
        line
    }

    pub fn parse(line: &str) -> Result<Self, WorkerError> {
        serde_json::from_str(line.trim_end()).map_err(|e| WorkerError::Protocol(e.to_string()))
    }
}

impl WorkerMessage {
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("message serializes");
        line.push('\n');
        line
    }

    pub fn parse(line: &str) -> Result<Self, WorkerError> {
        serde_json::from_str(line.trim_end()).map_err(|e| WorkerError::Protocol(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkerPolicy {
    pub timeout_secs: u64,
    pub max_restarts: u32,
    pub parallel_workers: usize,
}

impl Default for WorkerPolicy {
    fn default() -> Self {
        Self {
            timeout_secs: 600,
            max_restarts: 2,
            parallel_workers: 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkerError {
    #[error("cannot spawn worker `{command}`: {reason}")]
    Spawn { command: String, reason: String },
    #[error("worker sent no hello within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("worker speaks protocol {worker}, engine speaks {engine}")]
    VersionMismatch { engine: u32, worker: u32 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no response within {0} s")]
    Timeout(u64),
    #[error("response id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("worker exited")]
    Exited,
    #[error("worker reported an error: {0}")]
    Reported(String),
    #[error("worker is dead after exhausting its restarts")]
    Dead,
    #[error("i/o error talking to worker: {0}")]
    Io(String),
}

impl From<WorkerError> for EvalError {
    fn from(e: WorkerError) -> Self {
        match e {
            WorkerError::Timeout(s) => EvalError::Timeout(s),
            WorkerError::Reported(m) => EvalError::Reported(m),
            other => EvalError::Worker(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPhase {
    Initialization,
    Trial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureAction {
    /// Draw a fresh genotype for the slot and evaluate again.
    Resample,
    /// Give up on the whole run.
    Abort,
    /// Selection keeps the current (target) individual.
    KeepTarget,
}

/// Disposition of a failed evaluation. `attempt` counts evaluations already
/// made for the slot in this phase, the failed one included.
pub fn eval_failure_policy(phase: EvalPhase, attempt: u32) -> FailureAction {
    match phase {
        EvalPhase::Initialization if attempt < MAX_INIT_ATTEMPTS => FailureAction::Resample,
        EvalPhase::Initialization => FailureAction::Abort,
        EvalPhase::Trial => FailureAction::KeepTarget,
    }
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    name: String,
}

impl Process {
    fn start(command: &[String], handshake: Duration) -> Result<Self, WorkerError> {
        let (program, args) = command.split_first().ok_or_else(|| WorkerError::Spawn {
            command: String::new(),
            reason: "empty command".into(),
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| WorkerError::Spawn {
                command: command.join(" "),
                reason: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut process = Process {
            child,
            stdin,
            lines: rx,
            name: String::new(),
        };
        let hello = match process.lines.recv_timeout(handshake) {
            Ok(Ok(line)) => WorkerMessage::parse(&line),
            Ok(Err(e)) => Err(WorkerError::Io(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(WorkerError::HandshakeTimeout(handshake)),
            Err(RecvTimeoutError::Disconnected) => Err(WorkerError::Exited),
        };
        let outcome = match hello {
            Ok(WorkerMessage::Hello { protocol, name }) if protocol == PROTOCOL_VERSION => {
                process.name = name;
                Ok(())
            }
            Ok(WorkerMessage::Hello { protocol, .. }) => Err(WorkerError::VersionMismatch {
                engine: PROTOCOL_VERSION,
                worker: protocol,
            }),
            Ok(other) => Err(WorkerError::Protocol(format!("expected hello, got {other:?}"))),
            Err(e) => Err(e),
        };
        match outcome {
            Ok(()) => Ok(process),
            Err(e) => {
                process.kill();
                Err(e)
            }
        }
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn shutdown(mut self, grace: Duration) {
        let _ = self.stdin.write_all(EngineMessage::Shutdown.to_line().as_bytes());
        let _ = self.stdin.flush();
        drop(self.stdin);
        let deadline = Instant::now() + grace;
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// One live worker process plus its restart budget.
pub struct WorkerHandle {
    command: Vec<String>,
    policy: WorkerPolicy,
    process: Option<Process>,
    restarts: u32,
}

impl WorkerHandle {
    pub fn spawn(command: Vec<String>, policy: WorkerPolicy) -> Result<Self, WorkerError> {
        let process = Process::start(&command, HANDSHAKE_TIMEOUT)?;
        Ok(Self {
            command,
            policy,
            process: Some(process),
            restarts: 0,
        })
    }

    /// Name the worker announced in its hello.
    pub fn name(&self) -> Option<&str> {
        self.process.as_ref().map(|p| p.name.as_str())
    }

    pub fn is_alive(&self) -> bool {
        self.process.is_some()
    }

    pub fn restarts(&self) -> u32 {
        self.restarts
    }

    /// Sends one request and waits for its response. A timeout or exit
    /// kills the process, restarts it while restarts remain, and returns
    /// the failure; the request itself is not retried.
    pub fn request(&mut self, req: &EvalRequest) -> Result<EvalResult, WorkerError> {
        let process = self.process.as_mut().ok_or(WorkerError::Dead)?;
        let line = EngineMessage::Eval(req.clone()).to_line();
        let sent = process
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| process.stdin.flush());
        let response = match sent {
            Err(_) => Err(WorkerError::Exited),
            Ok(()) => match process
                .lines
                .recv_timeout(Duration::from_secs(self.policy.timeout_secs))
            {
                Ok(Ok(line)) => Ok(line),
                Ok(Err(e)) => Err(WorkerError::Io(e.to_string())),
                Err(RecvTimeoutError::Timeout) => Err(WorkerError::Timeout(self.policy.timeout_secs)),
                Err(RecvTimeoutError::Disconnected) => Err(WorkerError::Exited),
            },
        };
        let line = match response {
            Ok(line) => line,
            Err(e) => {
                self.recover();
                return Err(e);
            }
        };
        match WorkerMessage::parse(&line)? {
            WorkerMessage::Result(r) if r.id == req.id => {
                if r.fitness.is_finite() {
                    Ok(r)
                } else {
                    Err(WorkerError::Protocol(format!("non-finite fitness {}", r.fitness)))
                }
            }
            WorkerMessage::Result(r) => Err(WorkerError::IdMismatch {
                expected: req.id,
                got: r.id,
            }),
            WorkerMessage::Error { id: Some(id), .. } if id != req.id => Err(WorkerError::IdMismatch {
                expected: req.id,
                got: id,
            }),
            WorkerMessage::Error { message, .. } => Err(WorkerError::Reported(message)),
            WorkerMessage::Hello { .. } => Err(WorkerError::Protocol("unexpected hello".into())),
        }
    }

    fn recover(&mut self) {
        if let Some(mut p) = self.process.take() {
            p.kill();
        }
        if self.restarts >= self.policy.max_restarts {
            log::error!("worker `{}` exhausted {} restarts", self.command.join(" "), self.restarts);
            return;
        }
        self.restarts += 1;
        match Process::start(&self.command, HANDSHAKE_TIMEOUT) {
            Ok(p) => {
                log::warn!("worker restarted ({}/{})", self.restarts, self.policy.max_restarts);
                self.process = Some(p);
            }
            Err(e) => log::error!("worker restart failed: {e}"),
        }
    }

    pub fn shutdown(mut self) {
        if let Some(p) = self.process.take() {
            p.shutdown(Duration::from_secs(2));
        }
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        if let Some(p) = self.process.take() {
            p.shutdown(Duration::from_secs(2));
        }
    }
}

/// `parallel_workers` handles behind the [`Evaluator`] contract. Each call
/// checks out an idle handle, so concurrent evaluations spread across the
/// processes with one outstanding request each.
pub struct WorkerPool {
    idle: Mutex<Vec<WorkerHandle>>,
    available: Condvar,
    next_id: AtomicU64,
    deterministic: bool,
    name: String,
}

impl WorkerPool {
    pub fn spawn(command: Vec<String>, policy: WorkerPolicy, deterministic: bool) -> Result<Self, WorkerError> {
        let n = policy.parallel_workers.max(1);
        let handles = (0..n)
            .map(|_| WorkerHandle::spawn(command.clone(), policy.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let name = handles[0].name().unwrap_or("worker").to_owned();
        Ok(Self {
            idle: Mutex::new(handles),
            available: Condvar::new(),
            next_id: AtomicU64::new(1),
            deterministic,
            name,
        })
    }

    pub fn request(&self, phenotype: &Phenotype, budget: &EvalBudget) -> Result<EvalResult, WorkerError> {
        let req = EvalRequest {
            id: self.next_id.fetch_add(1, Ordering::Relaxed),
            phenotype: phenotype.clone(),
            budget: *budget,
        };
        let mut handle = {
            let mut idle = self.idle.lock().unwrap();
            loop {
                if let Some(h) = idle.pop() {
                    break h;
                }
                idle = self.available.wait(idle).unwrap();
            }
        };
        let result = handle.request(&req);
        self.idle.lock().unwrap().push(handle);
        self.available.notify_one();
        result
    }

    pub fn shutdown(self) {
        for h in self.idle.into_inner().unwrap() {
            h.shutdown();
        }
    }
}

impl Evaluator for WorkerPool {
    fn evaluate(&self, p: &Phenotype, budget: &EvalBudget) -> Result<FitnessScore, EvalError> {
        Ok(self.request(p, budget)?.into_score())
    }

    fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    fn name(&self) -> &str {
        &self.name
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperspace::default_space;
    use proptest::prelude::*;

    fn sh(script: &str) -> Vec<String> {
        vec!["sh".into(), "-c".into(), script.into()]
    }

    fn quick() -> WorkerPolicy {
        WorkerPolicy {
            timeout_secs: 1,
            max_restarts: 1,
            parallel_workers: 1,
        }
    }

    fn request(id: u64) -> EvalRequest {
        let s = default_space();
        EvalRequest {
            id,
            phenotype: s.phenotype_from_indices(&[0; 15]),
            budget: EvalBudget { epochs: 1, seed: 3 },
        }
    }

    #[test]
    fn failure_policy_table() {
        assert_eq!(eval_failure_policy(EvalPhase::Trial, 1), FailureAction::KeepTarget);
        for attempt in 1..MAX_INIT_ATTEMPTS {
            assert_eq!(eval_failure_policy(EvalPhase::Initialization, attempt), FailureAction::Resample);
        }
        assert_eq!(eval_failure_policy(EvalPhase::Initialization, 5), FailureAction::Abort);
    }

    #[test]
    fn unknown_fields_ignored_unknown_type_rejected() {
        let msg = WorkerMessage::parse(r#"{"type":"result","id":3,"fitness":0.5,"extra":{"x":1}}"#).unwrap();
        assert_eq!(
            msg,
            WorkerMessage::Result(EvalResult { id: 3, fitness: 0.5, metrics: None })
        );
        assert!(matches!(
            WorkerMessage::parse(r#"{"type":"progress","id":3}"#),
            Err(WorkerError::Protocol(_))
        ));
        assert!(matches!(WorkerMessage::parse("not json"), Err(WorkerError::Protocol(_))));
    }

    #[test]
    fn shutdown_line_is_exact() {
        assert_eq!(EngineMessage::Shutdown.to_line(), "{\"type\":\"shutdown\"}\n");
    }

    #[test]
    fn metrics_payload_builds_metrics() {
        let r = EvalResult {
            id: 1,
            fitness: 0.75,
            metrics: Some(MetricsPayload {
                accuracy: Some(0.75),
                confusion: Some(vec![vec![1, 1], vec![0, 2]]),
            }),
        };
        let score = r.into_score();
        assert_eq!(score.metrics.unwrap().accuracy, 0.75);
    }

    #[test]
    fn echo_worker_handshake_and_result() {
        let script = r#"echo '{"type":"hello","protocol":1,"name":"echo"}'
while read line; do
  case "$line" in
    *shutdown*) exit 0;;
    *) id=$(echo "$line" | sed 's/.*"id":\([0-9]*\).*/\1/'); echo "{\"type\":\"result\",\"id\":$id,\"fitness\":0.5}";;
  esac
done"#;
        let mut h = WorkerHandle::spawn(sh(script), quick()).unwrap();
        assert_eq!(h.name(), Some("echo"));
        let r = h.request(&request(11)).unwrap();
        assert_eq!(r.id, 11);
        assert_eq!(r.fitness, 0.5);
        h.shutdown();
    }

    #[test]
    fn spawn_errors() {
        assert!(matches!(
            WorkerHandle::spawn(vec!["/nonexistent/evoline-worker".into()], quick()),
            Err(WorkerError::Spawn { .. })
        ));
        assert_eq!(
            WorkerHandle::spawn(sh(r#"echo '{"type":"hello","protocol":2,"name":"x"}'; cat"#), quick()).err(),
            Some(WorkerError::VersionMismatch { engine: 1, worker: 2 })
        );
        assert_eq!(
            WorkerHandle::spawn(sh("exit 0"), quick()).err(),
            Some(WorkerError::Exited)
        );
    }

    #[test]
    fn wrong_id_and_error_responses() {
        let script = r#"echo '{"type":"hello","protocol":1,"name":"liar"}'
read line; echo '{"type":"result","id":999,"fitness":0.5}'
read line; echo '{"type":"error","id":2,"message":"out of memory"}'
cat > /dev/null"#;
        let mut h = WorkerHandle::spawn(sh(script), quick()).unwrap();
        assert_eq!(
            h.request(&request(1)),
            Err(WorkerError::IdMismatch { expected: 1, got: 999 })
        );
        assert_eq!(h.request(&request(2)), Err(WorkerError::Reported("out of memory".into())));
    }

    #[test]
    fn silent_worker_times_out_then_dies() {
        let script = r#"echo '{"type":"hello","protocol":1,"name":"mute"}'; cat > /dev/null"#;
        let mut h = WorkerHandle::spawn(sh(script), quick()).unwrap();
        let start = Instant::now();
        assert_eq!(h.request(&request(1)), Err(WorkerError::Timeout(1)));
        assert!(start.elapsed() >= Duration::from_secs(1));
        assert_eq!(h.restarts(), 1);
        assert!(h.is_alive());
        assert_eq!(h.request(&request(2)), Err(WorkerError::Timeout(1)));
        assert!(!h.is_alive());
        assert_eq!(h.request(&request(3)), Err(WorkerError::Dead));
    }

    proptest! {
        #[test]
        fn request_round_trip(id in any::<u64>(), idx in proptest::collection::vec(0usize..6, 15),
                              epochs in 1u32..100, seed in any::<u64>()) {
            let s = default_space();
            let idx: Vec<usize> = idx.iter().zip(&s.genes).map(|(i, g)| i % g.levels.len()).collect();
            let msg = EngineMessage::Eval(EvalRequest {
                id,
                phenotype: s.phenotype_from_indices(&idx),
                budget: EvalBudget { epochs, seed },
            });
            let line = msg.to_line();
            prop_assert!(line.ends_with('\n') && !line[..line.len() - 1].contains('\n'));
            prop_assert_eq!(EngineMessage::parse(&line).unwrap(), msg);
        }
    }
}
