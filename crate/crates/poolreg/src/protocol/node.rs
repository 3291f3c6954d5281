//! Node state machine.
//!
//! A node holds its share of the microdata and answers the center with
//! aggregates only: stratum counts during Counting, then masked chain
//! contributions during Aggregating. Local records never serialize into any
//! message. Messages may arrive out of order (a running sum can beat its
//! AggregateRequest), so unmatched chain traffic is buffered until the
//! matching assignment lands.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;

use crate::model::{
    evaluate_term, validate_model_spec, MicroRecord, ModelSpec, Term, TransformRegistry,
};
use crate::pooling::Stratum;
use crate::rng::{id_hash, stream, STREAM_NODE_MASKS};
use crate::securesum::{draw_mask, quantized_sum, MaskMode, Value};

use super::message::{parse_virtual_id, ChainAssignment, Outbound, PartyId, Payload, PlanRow};
use super::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodePhase {
    Registering,
    Counting,
    Aggregating,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub session_id: String,
    pub node_id: String,
    pub records: Vec<MicroRecord>,
    /// Resolves `custom:` transform tags; unknown tags reject the spec.
    pub registry: TransformRegistry,
    /// Seeds this node's private mask stream.
    pub mask_seed: u64,
    /// Where this node listens, in socket deployments.
    pub listen_addr: Option<String>,
}

struct Assignment {
    head: bool,
    next: Option<PartyId>,
    done: bool,
}

pub struct Node {
    cfg: NodeConfig,
    phase: NodePhase,
    /// Record indices by stratum, in load order; virtual ids index these.
    case_index: Vec<usize>,
    control_index: Vec<usize>,
    /// pool id -> local record indices (possibly empty for chains routed
    /// through this node).
    memberships: BTreeMap<String, Vec<usize>>,
    plan_received: bool,
    mask_mode: MaskMode,
    routing: BTreeMap<String, String>,
    round: u64,
    terms: BTreeMap<usize, Term>,
    assignments: BTreeMap<(String, usize), Assignment>,
    /// Running sums that arrived before their AggregateRequest.
    pending: BTreeMap<(String, usize), Value>,
    /// Aggregate requests that arrived before the plan; transports do not
    /// guarantee ordering across messages.
    pending_requests: Vec<(u64, usize, super::message::TermWire, Vec<ChainAssignment>)>,
    mask_rng: ChaCha12Rng,
}

impl Node {
    /// Build the node and its opening Register message.
    pub fn new(cfg: NodeConfig) -> (Node, Vec<Outbound>) {
        let case_index = cfg
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_case())
            .map(|(i, _)| i)
            .collect();
        let control_index = cfg
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_case())
            .map(|(i, _)| i)
            .collect();
        let mask_rng = stream(cfg.mask_seed, STREAM_NODE_MASKS ^ id_hash(&cfg.node_id));
        let register = Outbound::to_coordinator(Payload::Register {
            listen_addr: cfg.listen_addr.clone(),
        });
        let node = Node {
            phase: NodePhase::Registering,
            case_index,
            control_index,
            memberships: BTreeMap::new(),
            plan_received: false,
            mask_mode: MaskMode::default(),
            routing: BTreeMap::new(),
            round: 0,
            terms: BTreeMap::new(),
            assignments: BTreeMap::new(),
            pending: BTreeMap::new(),
            pending_requests: Vec::new(),
            mask_rng,
            cfg,
        };
        (node, vec![register])
    }

    pub fn node_id(&self) -> &str {
        &self.cfg.node_id
    }

    pub fn phase(&self) -> NodePhase {
        self.phase
    }

    /// Peer listen addresses learned from the plan distribution.
    pub fn routing(&self) -> &BTreeMap<String, String> {
        &self.routing
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.phase, NodePhase::Done | NodePhase::Failed)
    }

    fn fail(&mut self, error: ProtocolError) -> Vec<Outbound> {
        self.phase = NodePhase::Failed;
        vec![Outbound::to_coordinator(Payload::Error {
            code: error.code().to_string(),
            detail: error.to_string(),
        })]
    }

    /// Driver hook: nothing heard within the configured window.
    pub fn on_timeout(&mut self) -> Vec<Outbound> {
        if self.is_terminal() {
            return Vec::new();
        }
        self.fail(ProtocolError::UpstreamTimeout {
            waiting_in: format!("{:?}", self.phase),
        })
    }

    pub fn handle(&mut self, from: &PartyId, payload: Payload) -> Vec<Outbound> {
        // Done is not fully terminal: a follow-up aggregation round over the
        // retained plan (a new functional form) revives the node.
        if self.phase == NodePhase::Failed {
            return Vec::new();
        }
        if self.phase == NodePhase::Done
            && !matches!(
                payload,
                Payload::AggregateRequest { .. } | Payload::PartialAggregate { .. }
            )
        {
            return Vec::new();
        }
        match payload {
            Payload::CountRequest => {
                self.phase = NodePhase::Counting;
                vec![Outbound::to_coordinator(Payload::CountResponse {
                    cases: self.case_index.len() as u64,
                    controls: self.control_index.len() as u64,
                })]
            }
            Payload::PlanDistribute {
                case_rows,
                control_rows,
                terms,
                privacy_mode: _,
                strict_guard,
                mask_mode,
                routing,
            } => self.on_plan(case_rows, control_rows, terms, strict_guard, mask_mode, routing),
            Payload::AggregateRequest {
                round,
                term_index,
                term,
                chains,
            } => self.on_aggregate_request(round, term_index, term, chains),
            Payload::PartialAggregate {
                round,
                pool_id,
                term_index,
                value,
            } => self.on_partial(round, pool_id, term_index, value),
            Payload::PooledDatasetAck { .. } => {
                self.phase = NodePhase::Done;
                Vec::new()
            }
            Payload::Error { .. } => {
                self.phase = NodePhase::Failed;
                Vec::new()
            }
            other => self.fail(ProtocolError::UnexpectedMessage {
                from: from.to_string(),
                kind: other.kind().to_string(),
                detail: "not valid at a node".into(),
            }),
        }
    }

    fn on_plan(
        &mut self,
        case_rows: Vec<PlanRow>,
        control_rows: Vec<PlanRow>,
        terms: Vec<super::message::TermWire>,
        strict_guard: bool,
        mask_mode: MaskMode,
        routing: BTreeMap<String, String>,
    ) -> Vec<Outbound> {
        let mut g_min = usize::MAX;
        for (rows, stratum) in [(&case_rows, Stratum::Case), (&control_rows, Stratum::Control)] {
            for row in rows {
                g_min = g_min.min(row.members.len());
                let mut local = Vec::new();
                for member in &row.members {
                    let Some((node, member_stratum, index)) = parse_virtual_id(member) else {
                        return self.fail(ProtocolError::UnknownPool {
                            pool_id: format!("{}: bad member id {member}", row.pool_id),
                        });
                    };
                    if node != self.cfg.node_id {
                        continue;
                    }
                    if member_stratum != stratum {
                        return self.fail(ProtocolError::UnknownPool {
                            pool_id: format!("{}: member {member} in wrong stratum", row.pool_id),
                        });
                    }
                    let stratum_index = match stratum {
                        Stratum::Case => &self.case_index,
                        Stratum::Control => &self.control_index,
                    };
                    let Some(record_index) = stratum_index.get(index) else {
                        return self.fail(ProtocolError::UnknownPool {
                            pool_id: format!(
                                "{}: member {member} exceeds local {} count {}",
                                row.pool_id,
                                stratum.as_str(),
                                stratum_index.len()
                            ),
                        });
                    };
                    local.push(*record_index);
                }
                self.memberships.insert(row.pool_id.clone(), local);
            }
        }

        // Node-side privacy guard over the pools this node can see.
        let resolved: Result<Vec<Term>, _> = terms
            .iter()
            .map(|t| t.to_term(&self.cfg.registry))
            .collect();
        let spec = match resolved {
            Ok(terms) => ModelSpec::new(terms),
            Err(e) => return self.fail(ProtocolError::SpecRejected(e.to_string())),
        };
        if g_min != usize::MAX {
            if let Err(e) = validate_model_spec(&spec, g_min, strict_guard) {
                return self.fail(ProtocolError::SpecRejected(e.to_string()));
            }
        }

        self.mask_mode = mask_mode;
        self.routing = routing;
        self.plan_received = true;
        self.phase = NodePhase::Aggregating;

        let parked = std::mem::take(&mut self.pending_requests);
        let mut outs = Vec::new();
        for (round, term_index, term, chains) in parked {
            outs.extend(self.on_aggregate_request(round, term_index, term, chains));
            if self.phase == NodePhase::Failed {
                break;
            }
        }
        outs
    }

    fn on_aggregate_request(
        &mut self,
        round: u64,
        term_index: usize,
        term: super::message::TermWire,
        chains: Vec<ChainAssignment>,
    ) -> Vec<Outbound> {
        if !self.plan_received {
            // The plan is still in flight; park the request until it lands.
            self.pending_requests.push((round, term_index, term, chains));
            return Vec::new();
        }
        self.enter_round(round);
        let term = match term.to_term(&self.cfg.registry) {
            Ok(term) => term,
            Err(e) => return self.fail(ProtocolError::SpecRejected(e.to_string())),
        };
        self.terms.insert(term_index, term);

        let mut outs = Vec::new();
        for chain in chains {
            if !self.memberships.contains_key(&chain.pool_id) {
                // A chain can route through a node without members; treat
                // its local sum as zero rather than rejecting.
                self.memberships.insert(chain.pool_id.clone(), Vec::new());
            }
            let key = (chain.pool_id.clone(), term_index);
            if self.assignments.contains_key(&key) {
                // Duplicate request (retransmitting transport). Chains are
                // planned once per round; re-contributing would emit a
                // second masked total under a fresh mask, and the center
                // could pair mismatched generations.
                continue;
            }
            self.assignments.insert(
                key.clone(),
                Assignment {
                    head: chain.head,
                    next: chain.next.clone(),
                    done: false,
                },
            );
            if chain.head {
                match self.contribute(&key, Value::zero(self.mask_mode)) {
                    Ok(mut msgs) => outs.append(&mut msgs),
                    Err(e) => return self.fail(e),
                }
            } else if let Some(partial) = self.pending.remove(&key) {
                match self.contribute(&key, partial) {
                    Ok(mut msgs) => outs.append(&mut msgs),
                    Err(e) => return self.fail(e),
                }
            }
        }
        outs
    }

    /// A message for a later round moves the node into it, dropping the
    /// finished round's chain state; the retained plan stays.
    fn enter_round(&mut self, round: u64) {
        if round > self.round {
            self.round = round;
            self.assignments.clear();
            self.pending.clear();
            self.pending_requests.retain(|(r, ..)| *r >= round);
            self.phase = NodePhase::Aggregating;
        }
    }

    fn on_partial(
        &mut self,
        round: u64,
        pool_id: String,
        term_index: usize,
        value: Value,
    ) -> Vec<Outbound> {
        self.enter_round(round);
        if round < self.round {
            return Vec::new(); // stale round traffic
        }
        let key = (pool_id, term_index);
        match self.assignments.get(&key) {
            Some(a) if a.done => Vec::new(), // duplicate delivery
            Some(a) if a.head => Vec::new(), // heads take no input
            Some(_) => match self.contribute(&key, value) {
                Ok(msgs) => msgs,
                Err(e) => self.fail(e),
            },
            None => {
                // Sum arrived before the AggregateRequest; hold it.
                self.pending.entry(key).or_insert(value);
                Vec::new()
            }
        }
    }

    /// Local term sum over this node's members of a pool, in wire encoding.
    fn local_sum(&self, pool_id: &str, term_index: usize) -> Result<Value, ProtocolError> {
        let term = self
            .terms
            .get(&term_index)
            .ok_or_else(|| ProtocolError::UnknownPool {
                pool_id: format!("term {term_index} was never requested"),
            })?;
        let members = self.memberships.get(pool_id).map(Vec::as_slice).unwrap_or(&[]);
        let values: Result<Vec<f64>, _> = members
            .iter()
            .map(|&i| evaluate_term(term, &self.cfg.records[i]))
            .collect();
        let values = values.map_err(|e| ProtocolError::Evaluation(e.to_string()))?;
        match self.mask_mode {
            MaskMode::Exact => Ok(Value::Fixed(
                quantized_sum(values)
                    .map_err(|e| ProtocolError::Evaluation(e.to_string()))?
                    .0,
            )),
            MaskMode::Real { .. } => Ok(Value::Real(values.iter().sum())),
        }
    }

    /// Add the local sum (and a mask, unless this is an exact-mode singleton
    /// chain) to the running value and pass it on.
    fn contribute(
        &mut self,
        key: &(String, usize),
        partial_in: Value,
    ) -> Result<Vec<Outbound>, ProtocolError> {
        let (pool_id, term_index) = key.clone();
        let local = self.local_sum(&pool_id, term_index)?;
        let a = self
            .assignments
            .get_mut(key)
            .expect("contribute is called with a live assignment");
        let singleton = a.head && a.next.is_none();
        let skip_mask = singleton && matches!(self.mask_mode, MaskMode::Exact);
        let next = a.next.clone();
        a.done = true;

        let mut value = partial_in
            .add(local)
            .map_err(|e| ProtocolError::Evaluation(e.to_string()))?;
        let mut outs = Vec::new();
        if !skip_mask {
            let mask = draw_mask(&mut self.mask_rng, self.mask_mode);
            value = value
                .add(mask)
                .map_err(|e| ProtocolError::Evaluation(e.to_string()))?;
            outs.push(Outbound::to_coordinator(Payload::MaskReveal {
                round: self.round,
                pool_id: pool_id.clone(),
                term_index,
                mask,
            }));
        }
        let forward = match next {
            Some(peer) => Outbound {
                to: peer,
                payload: Payload::PartialAggregate {
                    round: self.round,
                    pool_id,
                    term_index,
                    value,
                },
            },
            None => Outbound::to_coordinator(Payload::MaskedTotal {
                round: self.round,
                pool_id,
                term_index,
                value,
            }),
        };
        outs.push(forward);
        Ok(outs)
    }
}
