//! TCP deployment of the protocol.
//!
//! Newline-delimited JSON envelopes over short-lived connections: a party
//! sends by connecting to the recipient's listen address and writing one
//! line. Every party runs a listener feeding a single ordered event queue,
//! so state machines see one message at a time regardless of how many
//! connections arrive concurrently. Nodes learn peer addresses from the
//! routing table in PlanDistribute; the coordinator learns node addresses
//! from their Register messages.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::time::Duration;

use super::coordinator::{Coordinator, Phase, SessionOutcome};
use super::message::{Envelope, Outbound, PartyId, TranscriptEntry, WIRE_VERSION};
use super::node::{Node, NodeConfig, NodePhase};
use super::ProtocolError;

/// Default per-phase wait in socket mode.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

fn send_line(addr: &str, envelope: &Envelope) -> std::io::Result<()> {
    let mut stream = TcpStream::connect(addr)?;
    stream.write_all(envelope.to_line().as_bytes())?;
    stream.flush()?;
    stream.shutdown(std::net::Shutdown::Write)?;
    Ok(())
}

/// Accept loop: forward every parsed envelope into the queue. Runs until
/// the process (or test) drops the receiving end and the socket errors out.
fn spawn_listener(listener: TcpListener, tx: mpsc::Sender<Envelope>) {
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let tx = tx.clone();
            std::thread::spawn(move || {
                let reader = BufReader::new(stream);
                for line in reader.lines() {
                    let Ok(line) = line else { return };
                    if line.trim().is_empty() {
                        continue;
                    }
                    if let Ok(envelope) = Envelope::parse_line(&line) {
                        let _ = tx.send(envelope);
                    }
                }
            });
        }
    });
}

fn accepts(envelope: &Envelope, session_id: &str) -> bool {
    envelope.version == WIRE_VERSION && envelope.session_id == session_id
}

struct Recorder {
    entries: Vec<TranscriptEntry>,
}

impl Recorder {
    fn new() -> Recorder {
        Recorder {
            entries: Vec::new(),
        }
    }

    fn record(&mut self, from: PartyId, to: PartyId, payload: &super::message::Payload) {
        self.entries.push(TranscriptEntry {
            seq: self.entries.len() as u64,
            from,
            to,
            kind: payload.kind().to_string(),
            payload: payload.clone(),
        });
    }
}

/// Run the analytical center over sockets until Done or Failed.
///
/// Returns the session outcome and the transcript of messages this party
/// sent or received.
pub fn run_coordinator_socket(
    coordinator: Coordinator,
    listen_addr: &str,
    timeout: Duration,
) -> Result<(SessionOutcome, Vec<TranscriptEntry>), (ProtocolError, Vec<TranscriptEntry>)> {
    match TcpListener::bind(listen_addr) {
        Ok(listener) => run_coordinator_on(coordinator, listener, timeout),
        Err(e) => Err((ProtocolError::from(e), Vec::new())),
    }
}

/// As [`run_coordinator_socket`], with the listener bound by the caller
/// (which is how a test learns the port before starting nodes).
pub fn run_coordinator_on(
    mut coordinator: Coordinator,
    listener: TcpListener,
    timeout: Duration,
) -> Result<(SessionOutcome, Vec<TranscriptEntry>), (ProtocolError, Vec<TranscriptEntry>)> {
    let mut recorder = Recorder::new();
    let run = || -> Result<SessionOutcome, ProtocolError> {
        let (tx, rx) = mpsc::channel();
        spawn_listener(listener, tx);
        let session = coordinator.session_id().to_string();

        loop {
            let event = rx.recv_timeout(timeout);
            let outs: Vec<Outbound> = match event {
                Ok(envelope) if accepts(&envelope, &session) => {
                    recorder.record(
                        envelope.sender.clone(),
                        PartyId::Coordinator,
                        &envelope.payload,
                    );
                    coordinator.handle(&envelope.sender.clone(), envelope.payload)
                }
                Ok(_) => Vec::new(),
                Err(mpsc::RecvTimeoutError::Timeout) => coordinator.on_timeout(),
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    return Err(ProtocolError::Transport("listener stopped".into()))
                }
            };
            let addrs = coordinator.registered_addrs();
            for out in outs {
                recorder.record(PartyId::Coordinator, out.to.clone(), &out.payload);
                let PartyId::Node(node) = &out.to else { continue };
                let Some(addr) = addrs.get(node) else {
                    continue; // the node never registered an address
                };
                let envelope = Envelope::new(&session, PartyId::Coordinator, out.payload);
                if let Err(e) = send_line(addr, &envelope) {
                    return Err(ProtocolError::Transport(format!(
                        "sending to {node} at {addr}: {e}"
                    )));
                }
            }
            match coordinator.phase() {
                Phase::Done => {
                    return coordinator
                        .outcome()
                        .ok_or_else(|| ProtocolError::Transport("done without outcome".into()));
                }
                Phase::Failed => {
                    return Err(ProtocolError::SessionFailed(
                        coordinator.failure().unwrap_or("unknown").to_string(),
                    ));
                }
                _ => {}
            }
        }
    };
    match run() {
        Ok(outcome) => Ok((outcome, recorder.entries)),
        Err(e) => Err((e, recorder.entries)),
    }
}

/// Run one node over sockets until the session completes or fails.
pub fn run_node_socket(
    cfg: NodeConfig,
    coordinator_addr: &str,
    timeout: Duration,
) -> Result<(NodePhase, Vec<TranscriptEntry>), (ProtocolError, Vec<TranscriptEntry>)> {
    let mut recorder = Recorder::new();
    let run = || -> Result<NodePhase, ProtocolError> {
        let bind_to = cfg
            .listen_addr
            .clone()
            .unwrap_or_else(|| "127.0.0.1:0".to_string());
        let listener = TcpListener::bind(&bind_to).map_err(ProtocolError::from)?;
        let actual = listener.local_addr().map_err(ProtocolError::from)?;
        let (tx, rx) = mpsc::channel();
        spawn_listener(listener, tx);

        let cfg = NodeConfig {
            listen_addr: Some(actual.to_string()),
            ..cfg
        };
        let session = cfg.session_id.clone();
        let me = PartyId::node(&cfg.node_id);
        let (mut node, opening) = Node::new(cfg);

        let route = |node_ref: &Node,
                         recorder: &mut Recorder,
                         from: &PartyId,
                         outs: Vec<Outbound>|
         -> Result<(), ProtocolError> {
            for out in outs {
                recorder.record(from.clone(), out.to.clone(), &out.payload);
                let addr = match &out.to {
                    PartyId::Coordinator => coordinator_addr.to_string(),
                    PartyId::Node(peer) => node_ref
                        .routing()
                        .get(peer)
                        .cloned()
                        .ok_or_else(|| {
                            ProtocolError::Transport(format!("no route to node {peer}"))
                        })?,
                };
                let envelope = Envelope::new(&session, from.clone(), out.payload);
                send_line(&addr, &envelope).map_err(|e| {
                    ProtocolError::Transport(format!("sending to {}: {e}", out.to))
                })?;
            }
            Ok(())
        };
        route(&node, &mut recorder, &me, opening)?;

        loop {
            match rx.recv_timeout(timeout) {
                Ok(envelope) if accepts(&envelope, &session) => {
                    recorder.record(envelope.sender.clone(), me.clone(), &envelope.payload);
                    let outs = node.handle(&envelope.sender.clone(), envelope.payload);
                    route(&node, &mut recorder, &me, outs)?;
                }
                Ok(_) => {}
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    let outs = node.on_timeout();
                    route(&node, &mut recorder, &me, outs)?;
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    return Err(ProtocolError::Transport("listener stopped".into()))
                }
            }
            if node.is_terminal() {
                return Ok(node.phase());
            }
        }
    };
    match run() {
        Ok(phase) => Ok((phase, recorder.entries)),
        Err(e) => Err((e, recorder.entries)),
    }
}
