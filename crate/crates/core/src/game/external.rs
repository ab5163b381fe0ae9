//! Line-delimited JSON protocol between the trainer and an engine process.
//!
//! Request: `{"cmd":"evaluate","description":..,"playouts":100,"turn_cap":500,"seed":..}`
//! Response: `{"compiled":bool,"playable":bool,"wins":[..],"draws":n,"terminated":n,"faults":n}`
//! An `"error"` field in a response reports a failure of the engine itself.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Evaluation, GameEngine, LocalEvaluator, PlayoutEvaluator, PlayoutStats};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub cmd: String,
    pub description: String,
    pub playouts: usize,
    pub turn_cap: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(default)]
    pub compiled: bool,
    #[serde(default)]
    pub playable: bool,
    #[serde(default)]
    pub wins: Vec<u64>,
    #[serde(default)]
    pub draws: u64,
    #[serde(default)]
    pub terminated: u64,
    #[serde(default)]
    pub faults: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    fn from_evaluation(e: &Evaluation) -> Self {
        let s = e.stats.clone().unwrap_or_else(|| PlayoutStats::empty(0, 0));
        Response {
            compiled: e.compiled,
            playable: e.playable,
            wins: s.wins,
            draws: s.draws,
            terminated: s.terminated,
            faults: s.faults,
            error: None,
        }
    }

    fn into_evaluation(self, playouts: usize, turn_cap: usize) -> Result<Evaluation> {
        if let Some(e) = self.error {
            return Err(Error::Infrastructure(format!("engine reported: {e}")));
        }
        if !self.compiled {
            return Ok(Evaluation {
                compiled: false,
                playable: false,
                stats: None,
            });
        }
        let stats = PlayoutStats {
            attempted: playouts as u64,
            wins: self.wins,
            draws: self.draws,
            terminated: self.terminated,
            faults: self.faults,
            first_move_faults: u64::from(!self.playable),
            turn_cap: turn_cap as u64,
        };
        if !stats.is_consistent() {
            return Err(Error::Infrastructure(
                "engine returned inconsistent playout counts".into(),
            ));
        }
        Ok(Evaluation {
            compiled: true,
            playable: self.playable,
            stats: Some(stats),
        })
    }
}

/// Answers requests from `input` with `engine` until end of input.
pub fn serve<E: GameEngine, R: BufRead, W: Write>(
    engine: E,
    input: R,
    mut output: W,
    delay: Duration,
) -> Result<()> {
    let local = LocalEvaluator { engine };
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) if req.cmd == "evaluate" => {
                std::thread::sleep(delay);
                let e = local.evaluate(&req.description, req.playouts, req.turn_cap, req.seed)?;
                Response::from_evaluation(&e)
            }
            Ok(req) => Response {
                error: Some(format!("unknown command `{}`", req.cmd)),
                ..Default::default()
            },
            Err(e) => Response {
                error: Some(format!("bad request: {e}")),
                ..Default::default()
            },
        };
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Engine in a child process. The process is started on first use and
/// restarted after a timeout or crash.
pub struct ExternalEngine {
    command: PathBuf,
    args: Vec<String>,
    timeout: Duration,
    worker: Mutex<Option<Worker>>,
}

impl ExternalEngine {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

    pub fn new(command: impl Into<PathBuf>, args: Vec<String>, timeout: Duration) -> Self {
        ExternalEngine {
            command: command.into(),
            args,
            timeout,
            worker: Mutex::new(None),
        }
    }

    fn spawn(&self) -> Result<Worker> {
        let mut child = Command::new(&self.command)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                Error::Infrastructure(format!("cannot start {}: {e}", self.command.display()))
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Worker {
            child,
            stdin,
            lines: rx,
        })
    }

    fn round_trip(&self, worker: &mut Worker, request: &Request) -> Result<Response> {
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        worker
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| worker.stdin.flush())
            .map_err(|e| Error::Infrastructure(format!("engine stdin: {e}")))?;
        match worker.lines.recv_timeout(self.timeout) {
            Ok(Ok(text)) => serde_json::from_str(&text)
                .map_err(|e| Error::Infrastructure(format!("malformed engine response: {e}"))),
            Ok(Err(e)) => Err(Error::Infrastructure(format!("engine stdout: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::Infrastructure(format!(
                "engine gave no response within {:?}",
                self.timeout
            ))),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Infrastructure("engine process exited".into()))
            }
        }
    }
}

impl PlayoutEvaluator for ExternalEngine {
    fn evaluate(
        &self,
        description: &str,
        playouts: usize,
        turn_cap: usize,
        seed: u64,
    ) -> Result<Evaluation> {
        let request = Request {
            cmd: "evaluate".into(),
            description: description.to_string(),
            playouts,
            turn_cap,
            seed,
        };
        let mut guard = self
            .worker
            .lock()
            .map_err(|_| Error::Infrastructure("engine lock poisoned".into()))?;
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let result = self.round_trip(guard.as_mut().expect("worker present"), &request);
        if result.is_err() {
            *guard = None;
        }
        result?.into_evaluation(playouts, turn_cap)
    }
}
