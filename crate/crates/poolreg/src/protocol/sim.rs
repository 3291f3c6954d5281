//! In-process simulated network.
//!
//! Deterministic driver for one coordinator and its nodes: messages go into
//! a queue and are delivered FIFO or in seeded random order, optionally
//! dropped, duplicated or delayed. Every send is recorded in the transcript
//! before faults apply, so the audit sees exactly what each party emitted.
//! When the queue drains without the session finishing, the coordinator's
//! timeout fires, which is how silent-node faults terminate.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::coordinator::{Coordinator, Phase, SessionOutcome};
use super::message::{Outbound, PartyId, Payload, TranscriptEntry};
use super::node::Node;
use super::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheduling {
    Fifo,
    /// Deliver queued messages in seeded random order.
    Random { seed: u64 },
}

/// Probabilistic message faults, applied at delivery time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Faults {
    pub drop_probability: f64,
    pub duplicate_probability: f64,
    pub delay_probability: f64,
    pub seed: u64,
}

impl Default for Faults {
    fn default() -> Self {
        Self {
            drop_probability: 0.0,
            duplicate_probability: 0.0,
            delay_probability: 0.0,
            seed: 0,
        }
    }
}

impl Faults {
    pub fn none() -> Faults {
        Faults::default()
    }

    fn active(&self) -> bool {
        self.drop_probability > 0.0
            || self.duplicate_probability > 0.0
            || self.delay_probability > 0.0
    }
}

struct InFlight {
    from: PartyId,
    to: PartyId,
    payload: Payload,
}

pub struct SimNet {
    pub coordinator: Coordinator,
    nodes: BTreeMap<String, Node>,
    queue: VecDeque<InFlight>,
    scheduling: Scheduling,
    sched_rng: ChaCha12Rng,
    faults: Faults,
    fault_rng: ChaCha12Rng,
    transcript: Vec<TranscriptEntry>,
    steps: u64,
    max_steps: u64,
}

impl SimNet {
    /// Wire up a session. Roster nodes missing from `nodes` behave as
    /// silent parties (their messages never exist), which exercises the
    /// timeout path.
    pub fn new(
        coordinator: Coordinator,
        nodes: Vec<Node>,
        scheduling: Scheduling,
        faults: Faults,
    ) -> SimNet {
        let sched_seed = match scheduling {
            Scheduling::Fifo => 0,
            Scheduling::Random { seed } => seed,
        };
        let mut net = SimNet {
            coordinator,
            nodes: BTreeMap::new(),
            queue: VecDeque::new(),
            scheduling,
            sched_rng: crate::rng::stream(sched_seed, 0xD15C),
            fault_rng: crate::rng::stream(faults.seed, 0xFA17),
            faults,
            transcript: Vec::new(),
            steps: 0,
            max_steps: 5_000_000,
        };
        for node in nodes {
            net.nodes.insert(node.node_id().to_string(), node);
        }
        net
    }

    /// Node construction happens outside; their opening Register messages
    /// are injected here.
    pub fn inject(&mut self, from: PartyId, outs: Vec<Outbound>) {
        for out in outs {
            self.record_and_enqueue(from.clone(), out);
        }
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn node_phase(&self, node_id: &str) -> Option<super::node::NodePhase> {
        self.nodes.get(node_id).map(Node::phase)
    }

    fn record_and_enqueue(&mut self, from: PartyId, out: Outbound) {
        self.transcript.push(TranscriptEntry {
            seq: self.transcript.len() as u64,
            from: from.clone(),
            to: out.to.clone(),
            kind: out.payload.kind().to_string(),
            payload: out.payload.clone(),
        });
        self.queue.push_back(InFlight {
            from,
            to: out.to,
            payload: out.payload,
        });
    }

    fn pick_index(&mut self) -> usize {
        match self.scheduling {
            Scheduling::Fifo => 0,
            Scheduling::Random { .. } => self.sched_rng.random_range(0..self.queue.len()),
        }
    }

    fn deliver(&mut self, msg: InFlight) {
        let outs = match &msg.to {
            PartyId::Coordinator => self.coordinator.handle(&msg.from, msg.payload),
            PartyId::Node(id) => match self.nodes.get_mut(id) {
                Some(node) => node.handle(&msg.from, msg.payload),
                None => Vec::new(), // silent party
            },
        };
        let sender = msg.to;
        for out in outs {
            self.record_and_enqueue(sender.clone(), out);
        }
    }

    fn step(&mut self) -> Result<(), ProtocolError> {
        self.steps += 1;
        if self.steps > self.max_steps {
            return Err(ProtocolError::Transport(format!(
                "simulation exceeded {} steps",
                self.max_steps
            )));
        }
        let index = self.pick_index();
        let msg = self.queue.remove(index).expect("queue non-empty");
        if self.faults.active() {
            let roll: f64 = self.fault_rng.random();
            if roll < self.faults.drop_probability {
                return Ok(());
            }
            if roll < self.faults.drop_probability + self.faults.duplicate_probability {
                self.queue.push_back(InFlight {
                    from: msg.from.clone(),
                    to: msg.to.clone(),
                    payload: msg.payload.clone(),
                });
            } else if roll
                < self.faults.drop_probability
                    + self.faults.duplicate_probability
                    + self.faults.delay_probability
                && self.queue.len() > 1
            {
                self.queue.push_back(msg);
                return Ok(());
            }
        }
        self.deliver(msg);
        Ok(())
    }

    /// Drive to quiescence, firing the coordinator timeout when traffic
    /// stops early. Terminates at Done or Failed.
    pub fn run(&mut self) -> Result<SessionOutcome, ProtocolError> {
        loop {
            while !self.queue.is_empty() {
                self.step()?;
            }
            match self.coordinator.phase() {
                Phase::Done => {
                    return self
                        .coordinator
                        .outcome()
                        .ok_or_else(|| ProtocolError::Transport("done without outcome".into()));
                }
                Phase::Failed => {
                    return Err(ProtocolError::SessionFailed(
                        self.coordinator
                            .failure()
                            .unwrap_or("unknown failure")
                            .to_string(),
                    ));
                }
                _ => {
                    let outs = self.coordinator.on_timeout();
                    for out in outs {
                        self.record_and_enqueue(PartyId::Coordinator, out);
                    }
                }
            }
        }
    }

    /// Continue after `run`: ask for a new functional form over the same
    /// plan and drive the follow-up round to completion.
    pub fn resend_transformed(
        &mut self,
        new_spec: crate::model::ModelSpec,
    ) -> Result<SessionOutcome, ProtocolError> {
        let outs = self.coordinator.resend_transformed(new_spec)?;
        for out in outs {
            self.record_and_enqueue(PartyId::Coordinator, out);
        }
        self.run()
    }
}

/// Build nodes plus coordinator, run one simulated session to completion.
pub fn run_simulated_session(
    coordinator: Coordinator,
    node_configs: Vec<super::node::NodeConfig>,
    scheduling: Scheduling,
    faults: Faults,
) -> (Result<SessionOutcome, ProtocolError>, SimNet) {
    let mut nodes = Vec::new();
    let mut opening = Vec::new();
    for cfg in node_configs {
        let id = cfg.node_id.clone();
        let (node, outs) = Node::new(cfg);
        nodes.push(node);
        opening.push((PartyId::Node(id), outs));
    }
    let mut net = SimNet::new(coordinator, nodes, scheduling, faults);
    for (from, outs) in opening {
        net.inject(from, outs);
    }
    let result = net.run();
    (result, net)
}
