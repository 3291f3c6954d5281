//! Coordinator/node protocol for assembling the pooled dataset across a
//! horizontally partitioned network.
//!
//! Session shape: nodes register, the center collects per-node stratum
//! counts, plans the partition over node-scoped virtual subject ids,
//! distributes each node its pool memberships, then drives one chained
//! masked summation per (pool, term). Unmasked totals become the pooled
//! dataset, which the center fits. Adding a record later means a fresh
//! session: plans are single-shot. Changing the functional form is not —
//! [`Coordinator::resend_transformed`] re-aggregates only new terms over
//! the retained plan.
//!
//! State machines are transport-free; [`sim`] drives them deterministically
//! in process (with fault injection), [`socket`] over TCP.

pub mod audit;
pub mod coordinator;
pub mod message;
pub mod node;
pub mod sim;
pub mod socket;

pub use audit::{audit_transcript, AuditReport};
pub use coordinator::{Coordinator, CoordinatorConfig, Phase, SessionOutcome};
pub use message::{
    transcript_to_jsonl, Envelope, Outbound, PartyId, Payload, TranscriptEntry, WIRE_VERSION,
};
pub use node::{Node, NodeConfig, NodePhase};
pub use sim::{run_simulated_session, Faults, Scheduling, SimNet};

use crate::model::ModelError;
use crate::pooling::PoolingError;
use crate::securesum::SecureSumError;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("timed out in {phase} waiting on {waiting_on:?}")]
    NodeTimeout {
        phase: String,
        waiting_on: Vec<String>,
    },
    #[error("plan infeasible: {0}")]
    PlanInfeasible(String),
    #[error("aggregation incomplete: {missing} (pool, term) slots unresolved")]
    AggregationIncomplete { missing: usize },
    #[error("model spec rejected: {0}")]
    SpecRejected(String),
    #[error("unknown pool: {pool_id}")]
    UnknownPool { pool_id: String },
    #[error("unexpected {kind} from {from}: {detail}")]
    UnexpectedMessage {
        from: String,
        kind: String,
        detail: String,
    },
    #[error("session expired: {0}")]
    SessionExpired(String),
    #[error("node {node} failed ({code}): {detail}")]
    NodeFailure {
        node: String,
        code: String,
        detail: String,
    },
    #[error("upstream silent while {waiting_in}")]
    UpstreamTimeout { waiting_in: String },
    #[error("term evaluation failed: {0}")]
    Evaluation(String),
    #[error("pooled fit failed: {0}")]
    Fit(String),
    #[error("session failed: {0}")]
    SessionFailed(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    SecureSum(#[from] SecureSumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ProtocolError {
    /// Stable code used in Error payloads.
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::Config(_) => "config",
            ProtocolError::NodeTimeout { .. } => "node_timeout",
            ProtocolError::PlanInfeasible(_) => "plan_infeasible",
            ProtocolError::AggregationIncomplete { .. } => "aggregation_incomplete",
            ProtocolError::SpecRejected(_) => "spec_rejected",
            ProtocolError::UnknownPool { .. } => "unknown_pool",
            ProtocolError::UnexpectedMessage { .. } => "unexpected_message",
            ProtocolError::SessionExpired(_) => "session_expired",
            ProtocolError::NodeFailure { .. } => "node_failure",
            ProtocolError::UpstreamTimeout { .. } => "upstream_timeout",
            ProtocolError::Evaluation(_) => "evaluation",
            ProtocolError::Fit(_) => "fit",
            ProtocolError::SessionFailed(_) => "session_failed",
            ProtocolError::Transport(_) => "transport",
            ProtocolError::Model(_) => "model",
            ProtocolError::Pooling(_) => "pooling",
            ProtocolError::SecureSum(_) => "secure_sum",
            ProtocolError::Io(_) => "io",
        }
    }
}
