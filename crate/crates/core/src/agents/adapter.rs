//! Contract for externally hosted agents (e.g. an LLM behind a process).
//!
//! Wire format, one JSON document per line:
//!
//! ```text
//! request:  {"slate":[{"item_id":7,"rank":1,"visible_count":3|null},...],"history":[{"round":0,"endorse":[7],"ranks":[1]}]}
//! response: {"endorse":[7]}
//! ```
//!
//! Every response must arrive within the configured timeout, otherwise the
//! episode fails. There is no fallback policy.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AgentError, AgentObservation, Decision, HistoryRecord, Policy, TurnContext};
use crate::feed::{ItemId, Rank};
use crate::rng::Stream;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

pub(crate) fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT_MS
}

#[derive(Serialize)]
struct RequestEntry {
    item_id: ItemId,
    rank: Rank,
    visible_count: Option<u64>,
}

#[derive(Serialize)]
struct Request<'a> {
    slate: Vec<RequestEntry>,
    history: &'a [HistoryRecord],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Response {
    endorse: Vec<ItemId>,
}

pub fn encode_request(obs: &AgentObservation) -> String {
    let req = Request {
        slate: obs
            .slate
            .entries
            .iter()
            .map(|e| RequestEntry {
                item_id: e.item_id,
                rank: e.rank,
                visible_count: e.visible_count,
            })
            .collect(),
        history: &obs.history,
    };
    serde_json::to_string(&req).expect("request serializes")
}

/// Parses a response and checks every endorsed id against the observed slate.
pub fn decode_response(text: &str, obs: &AgentObservation) -> Result<Decision, AgentError> {
    let resp: Response = serde_json::from_str(text.trim())
        .map_err(|e| AgentError::MalformedResponse(e.to_string()))?;
    let mut seen = Vec::with_capacity(resp.endorse.len());
    for &id in &resp.endorse {
        if obs.slate.entry_for(id).is_none() {
            return Err(AgentError::MalformedResponse(format!(
                "item {id} is not on the slate"
            )));
        }
        if seen.contains(&id) {
            return Err(AgentError::MalformedResponse(format!("item {id} endorsed twice")));
        }
        seen.push(id);
    }
    Ok(resp.endorse)
}

/// Line-oriented request/response channel to an agent.
pub trait Transport: Send {
    fn send(&mut self, line: &str) -> Result<(), AgentError>;
    fn recv(&mut self, timeout: Duration) -> Result<String, AgentError>;
}

fn recv_line(rx: &Receiver<String>, timeout: Duration) -> Result<String, AgentError> {
    rx.recv_timeout(timeout).map_err(|e| match e {
        RecvTimeoutError::Timeout => AgentError::Timeout(timeout.as_millis() as u64),
        RecvTimeoutError::Disconnected => AgentError::Transport("agent hung up".into()),
    })
}

/// In-process agent running on its own thread.
pub struct ChannelTransport {
    tx: Sender<String>,
    rx: Receiver<String>,
}

impl ChannelTransport {
    pub fn spawn<F>(mut respond: F) -> Self
    where
        F: FnMut(&str) -> String + Send + 'static,
    {
        let (req_tx, req_rx) = mpsc::channel::<String>();
        let (resp_tx, resp_rx) = mpsc::channel::<String>();
        thread::spawn(move || {
            for line in req_rx {
                if resp_tx.send(respond(&line)).is_err() {
                    break;
                }
            }
        });
        ChannelTransport {
            tx: req_tx,
            rx: resp_rx,
        }
    }
}

impl Transport for ChannelTransport {
    fn send(&mut self, line: &str) -> Result<(), AgentError> {
        self.tx
            .send(line.to_string())
            .map_err(|_| AgentError::Transport("agent thread exited".into()))
    }

    fn recv(&mut self, timeout: Duration) -> Result<String, AgentError> {
        recv_line(&self.rx, timeout)
    }
}

/// Agent hosted by a child process speaking JSON lines on stdin/stdout.
pub struct CommandTransport {
    child: Child,
    stdin: ChildStdin,
    rx: Receiver<String>,
}

impl CommandTransport {
    pub fn spawn(command: &[String]) -> Result<Self, AgentError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| AgentError::Transport("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| AgentError::Transport(format!("spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(l) = line else { break };
                if tx.send(l).is_err() {
                    break;
                }
            }
        });
        Ok(CommandTransport { child, stdin, rx })
    }
}

impl Transport for CommandTransport {
    fn send(&mut self, line: &str) -> Result<(), AgentError> {
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| AgentError::Transport(e.to_string()))
    }

    fn recv(&mut self, timeout: Duration) -> Result<String, AgentError> {
        recv_line(&self.rx, timeout)
    }
}

impl Drop for CommandTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Policy that forwards each observation to a transport. Accepted responses
/// are kept in `recorded` so the run can be replayed without the agent.
pub struct ExternalPolicy {
    transport: Box<dyn Transport>,
    timeout: Duration,
    pub recorded: Vec<Decision>,
}

impl ExternalPolicy {
    pub fn new(transport: Box<dyn Transport>, timeout: Duration) -> Self {
        ExternalPolicy {
            transport,
            timeout,
            recorded: Vec::new(),
        }
    }
}

impl Policy for ExternalPolicy {
    fn decide(
        &mut self,
        _ctx: &TurnContext,
        obs: &AgentObservation,
        _stream: &mut Stream,
    ) -> Result<Decision, AgentError> {
        self.transport.send(&encode_request(obs))?;
        let line = self.transport.recv(self.timeout)?;
        let decision = decode_response(&line, obs)?;
        self.recorded.push(decision.clone());
        Ok(decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feed::{ObservedSlate, SlateEntry};
    use crate::rng::split_stream;

    fn obs() -> AgentObservation {
        AgentObservation {
            slate: ObservedSlate {
                entries: vec![
                    SlateEntry {
                        item_id: 4,
                        rank: 1,
                        visible_count: Some(2),
                    },
                    SlateEntry {
                        item_id: 1,
                        rank: 2,
                        visible_count: None,
                    },
                ],
            },
            history: vec![HistoryRecord {
                round: 0,
                endorse: vec![1],
                ranks: vec![2],
            }],
        }
    }

    const CTX: TurnContext = TurnContext {
        round: 0,
        turn_index: 0,
        agent_id: 0,
    };

    #[test]
    fn request_wire_format() {
        assert_eq!(
            encode_request(&obs()),
            r#"{"slate":[{"item_id":4,"rank":1,"visible_count":2},{"item_id":1,"rank":2,"visible_count":null}],"history":[{"round":0,"endorse":[1],"ranks":[2]}]}"#
        );
    }

    #[test]
    fn response_validation() {
        let o = obs();
        assert_eq!(decode_response(r#"{"endorse":[1,4]}"#, &o).unwrap(), vec![1, 4]);
        assert_eq!(decode_response(r#"{"endorse":[]}"#, &o).unwrap(), Vec::<ItemId>::new());
        for bad in [
            r#"{"endorse":[9]}"#,
            r#"{"endorse":[4,4]}"#,
            r#"{"endorse":"4"}"#,
            r#"{"endorse":[4],"why":"x"}"#,
            "not json",
        ] {
            assert!(
                matches!(decode_response(bad, &o), Err(AgentError::MalformedResponse(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn channel_agent_round_trip() {
        let transport = ChannelTransport::spawn(|req| {
            let v: serde_json::Value = serde_json::from_str(req).unwrap();
            format!(r#"{{"endorse":[{}]}}"#, v["slate"][0]["item_id"])
        });
        let mut p = ExternalPolicy::new(Box::new(transport), Duration::from_secs(5));
        let d = p.decide(&CTX, &obs(), &mut split_stream(0, &[])).unwrap();
        assert_eq!(d, vec![4]);
        assert_eq!(p.recorded, vec![vec![4]]);
    }

    #[test]
    fn slow_agent_times_out() {
        let transport = ChannelTransport::spawn(|_| {
            thread::sleep(Duration::from_millis(500));
            r#"{"endorse":[]}"#.to_string()
        });
        let mut p = ExternalPolicy::new(Box::new(transport), Duration::from_millis(20));
        assert_eq!(
            p.decide(&CTX, &obs(), &mut split_stream(0, &[])),
            Err(AgentError::Timeout(20))
        );
    }

    #[cfg(unix)]
    #[test]
    fn subprocess_agent_round_trip() {
        // `head -n1`-style echo agent written in sh: always endorse item 1.
        let cmd: Vec<String> = [
            "sh",
            "-c",
            r#"while read line; do echo '{"endorse":[1]}'; done"#,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut p = ExternalPolicy::new(
            Box::new(CommandTransport::spawn(&cmd).unwrap()),
            Duration::from_secs(10),
        );
        for _ in 0..3 {
            assert_eq!(p.decide(&CTX, &obs(), &mut split_stream(0, &[])).unwrap(), vec![1]);
        }
    }

    #[test]
    fn missing_program_is_transport_error() {
        let cmd = vec!["/definitely/not/here".to_string()];
        assert!(matches!(
            CommandTransport::spawn(&cmd),
            Err(AgentError::Transport(_))
        ));
    }
}
