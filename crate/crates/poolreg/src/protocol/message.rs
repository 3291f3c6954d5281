//! Wire messages.
//!
//! One JSON record per line; every record carries the protocol version, the
//! session id, the sender and a kind-discriminated payload. Payloads never
//! pair subject identifiers with covariate values: membership messages carry
//! ids only, aggregation messages carry (pool, term, value) only. Subjects
//! are addressed by node-scoped virtual ids (`node:stratum:index`), so real
//! identifiers never leave their node either.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{ModelError, Term, Transform, TransformRegistry};
use crate::pooling::Stratum;
use crate::securesum::{MaskMode, Value};

/// Wire protocol version; bumped on any incompatible schema change.
pub const WIRE_VERSION: u32 = 1;

/// Parties: the analytical center or a named node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PartyId {
    Coordinator,
    Node(String),
}

impl PartyId {
    pub fn node(id: impl Into<String>) -> PartyId {
        PartyId::Node(id.into())
    }

    pub fn as_str(&self) -> &str {
        match self {
            PartyId::Coordinator => "coordinator",
            PartyId::Node(id) => id,
        }
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<&str> for PartyId {
    fn from(s: &str) -> Self {
        if s == "coordinator" {
            PartyId::Coordinator
        } else {
            PartyId::Node(s.to_string())
        }
    }
}

impl Serialize for PartyId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for PartyId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(PartyId::from(s.as_str()))
    }
}

/// Node-scoped virtual subject id, e.g. `alpha:case:12`.
pub fn virtual_id(node: &str, stratum: Stratum, index: usize) -> String {
    format!("{node}:{}:{index}", stratum.as_str())
}

/// Split a virtual id back into (node, stratum, index).
pub fn parse_virtual_id(id: &str) -> Option<(&str, Stratum, usize)> {
    let mut parts = id.rsplitn(3, ':');
    let index: usize = parts.next()?.parse().ok()?;
    let stratum = Stratum::parse(parts.next()?)?;
    let node = parts.next()?;
    (!node.is_empty()).then_some((node, stratum, index))
}

/// A term as it travels: symbolic tags only, resolved against each party's
/// own registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermWire {
    pub covariate: String,
    pub transform: String,
    pub interaction: Option<(String, String)>,
}

impl TermWire {
    pub fn from_term(term: &Term) -> TermWire {
        TermWire {
            covariate: term.covariate.clone(),
            transform: term.transform.tag(),
            interaction: term
                .interaction
                .as_ref()
                .map(|(c, t)| (c.clone(), t.tag())),
        }
    }

    pub fn to_term(&self, registry: &TransformRegistry) -> Result<Term, ModelError> {
        Ok(Term {
            covariate: self.covariate.clone(),
            transform: Transform::from_tag(&self.transform, registry)?,
            interaction: match &self.interaction {
                None => None,
                Some((c, t)) => Some((c.clone(), Transform::from_tag(t, registry)?)),
            },
        })
    }
}

/// One row of the case-id or control-id table: pool id plus member ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub pool_id: String,
    pub members: Vec<String>,
}

/// A node's place in one chain: whether it starts it, and where its output
/// goes (`None` sends the masked total to the center). Nodes learn only
/// their own neighbors, never the whole ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainAssignment {
    pub pool_id: String,
    pub head: bool,
    pub next: Option<PartyId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Payload {
    /// Node joins the session; `listen_addr` is set in socket deployments.
    Register { listen_addr: Option<String> },
    CountRequest,
    /// Stratum counts only; nothing finer leaves the node at this stage.
    CountResponse { cases: u64, controls: u64 },
    /// Pool memberships relevant to the receiving node (virtual ids, no
    /// covariates), the term list for the node-side privacy guard, and the
    /// peer routing table.
    PlanDistribute {
        case_rows: Vec<PlanRow>,
        control_rows: Vec<PlanRow>,
        terms: Vec<TermWire>,
        privacy_mode: bool,
        strict_guard: bool,
        mask_mode: MaskMode,
        routing: BTreeMap<String, String>,
    },
    /// Ask one node to aggregate one term over its chain assignments.
    AggregateRequest {
        round: u64,
        term_index: usize,
        term: TermWire,
        chains: Vec<ChainAssignment>,
    },
    /// Node-to-node running sum; only (pool, term, value).
    PartialAggregate {
        round: u64,
        pool_id: String,
        term_index: usize,
        value: Value,
    },
    /// Chain tail to center.
    MaskedTotal {
        round: u64,
        pool_id: String,
        term_index: usize,
        value: Value,
    },
    /// Mask disclosure to the center, on its own message kind.
    MaskReveal {
        round: u64,
        pool_id: String,
        term_index: usize,
        mask: Value,
    },
    /// Center to nodes: pooled dataset assembled, session complete.
    PooledDatasetAck { rows: u64 },
    Error { code: String, detail: String },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Register { .. } => "Register",
            Payload::CountRequest => "CountRequest",
            Payload::CountResponse { .. } => "CountResponse",
            Payload::PlanDistribute { .. } => "PlanDistribute",
            Payload::AggregateRequest { .. } => "AggregateRequest",
            Payload::PartialAggregate { .. } => "PartialAggregate",
            Payload::MaskedTotal { .. } => "MaskedTotal",
            Payload::MaskReveal { .. } => "MaskReveal",
            Payload::PooledDatasetAck { .. } => "PooledDatasetAck",
            Payload::Error { .. } => "Error",
        }
    }
}

/// A message with routing decided but not yet enveloped.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: PartyId,
    pub payload: Payload,
}

impl Outbound {
    pub fn to_coordinator(payload: Payload) -> Outbound {
        Outbound {
            to: PartyId::Coordinator,
            payload,
        }
    }
}

/// The on-wire record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub version: u32,
    pub session_id: String,
    pub sender: PartyId,
    #[serde(flatten)]
    pub payload: Payload,
}

impl Envelope {
    pub fn new(session_id: &str, sender: PartyId, payload: Payload) -> Envelope {
        Envelope {
            version: WIRE_VERSION,
            session_id: session_id.to_string(),
            sender,
            payload,
        }
    }

    /// Newline-delimited JSON encoding.
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("envelope serializes");
        line.push('\n');
        line
    }

    pub fn parse_line(line: &str) -> Result<Envelope, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// One observed message, as recorded by a transport for the privacy audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub from: PartyId,
    pub to: PartyId,
    pub kind: String,
    pub payload: Payload,
}

/// Render a transcript as an append-only JSON-lines log.
pub fn transcript_to_jsonl(entries: &[TranscriptEntry]) -> String {
    let mut out = String::new();
    for entry in entries {
        out.push_str(&serde_json::to_string(entry).expect("entry serializes"));
        out.push('\n');
    }
    out
}
