//! Analytical-center state machine.
//!
//! Counting -> Planning -> Aggregating -> Fitting -> Done, or Failed with a
//! diagnostic. Phases move forward only; a follow-up aggregation round after
//! `Done` (new functional forms over the retained plan) restarts the cycle
//! with the round counter bumped, and phases stay monotone within a round.
//!
//! The center learns per-node stratum counts, plans the partition over
//! virtual subject ids, holds the chain orders, and is the only party that
//! ever sees masks next to masked totals. It never sees a covariate value
//! finer than a pool aggregate.

use std::collections::{BTreeMap, BTreeSet};

use crate::glm::{fit_named, FitOptions, FitResult};
use crate::model::{validate_model_spec, ModelSpec, PrivacyWarning, StudyMeta, Term};
use crate::pooling::{
    build_plan, coefficient_names, design_rows_from_pooled, offsets_for_plan, PoolPlan, PooledRow,
    SizePolicy, Stratum,
};
use crate::securesum::{plan_chains, MaskLedger, MaskMode, Value};

use super::message::{
    parse_virtual_id, virtual_id, ChainAssignment, Outbound, PartyId, Payload, PlanRow, TermWire,
};
use super::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Counting,
    Planning,
    Aggregating,
    Fitting,
    Done,
    Failed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Counting => "counting",
            Phase::Planning => "planning",
            Phase::Aggregating => "aggregating",
            Phase::Fitting => "fitting",
            Phase::Done => "done",
            Phase::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub session_id: String,
    /// Node ids in a fixed order; the order is part of the plan seed's
    /// meaning, since virtual subjects are laid out roster-first.
    pub roster: Vec<String>,
    pub spec: ModelSpec,
    pub policy: SizePolicy,
    pub privacy_mode: bool,
    pub strict_guard: bool,
    pub mask_mode: MaskMode,
    pub seed: u64,
    pub fit_options: FitOptions,
}

/// Everything a completed session produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub fit: FitResult,
    pub pooled: Vec<PooledRow>,
    pub plan: PoolPlan,
    pub warnings: Vec<PrivacyWarning>,
}

pub struct Coordinator {
    cfg: CoordinatorConfig,
    phase: Phase,
    round: u64,
    registered: BTreeMap<String, Option<String>>,
    counts: BTreeMap<String, (u64, u64)>,
    meta: Option<StudyMeta>,
    plan: Option<PoolPlan>,
    offsets: BTreeMap<usize, f64>,
    /// Virtual id -> owning node, fixed at planning.
    membership: BTreeMap<String, String>,
    ledger: Option<MaskLedger>,
    /// Term indices (into the current spec) being aggregated this round.
    active_terms: Vec<usize>,
    /// Masked totals received for the active round.
    totals: BTreeMap<(String, usize), Value>,
    /// Decoded pooled term values, keyed by (pool, index into current spec).
    term_values: BTreeMap<(String, usize), f64>,
    pooled: Option<Vec<PooledRow>>,
    fit: Option<FitResult>,
    warnings: Vec<PrivacyWarning>,
    failure: Option<String>,
}

impl Coordinator {
    pub fn new(cfg: CoordinatorConfig) -> Result<Coordinator, ProtocolError> {
        cfg.spec.validate()?;
        if cfg.roster.is_empty() {
            return Err(ProtocolError::Config("roster is empty".into()));
        }
        let unique: BTreeSet<&String> = cfg.roster.iter().collect();
        if unique.len() != cfg.roster.len() {
            return Err(ProtocolError::Config("duplicate node id in roster".into()));
        }
        if cfg.roster.iter().any(|id| id == "coordinator") {
            return Err(ProtocolError::Config(
                "node id `coordinator` is reserved".into(),
            ));
        }
        Ok(Coordinator {
            cfg,
            phase: Phase::Counting,
            round: 0,
            registered: BTreeMap::new(),
            counts: BTreeMap::new(),
            meta: None,
            plan: None,
            offsets: BTreeMap::new(),
            membership: BTreeMap::new(),
            ledger: None,
            active_terms: Vec::new(),
            totals: BTreeMap::new(),
            term_values: BTreeMap::new(),
            pooled: None,
            fit: None,
            warnings: Vec::new(),
            failure: None,
        })
    }

    pub fn session_id(&self) -> &str {
        &self.cfg.session_id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn plan(&self) -> Option<&PoolPlan> {
        self.plan.as_ref()
    }

    pub fn pooled_rows(&self) -> Option<&[PooledRow]> {
        self.pooled.as_deref()
    }

    pub fn fit_result(&self) -> Option<&FitResult> {
        self.fit.as_ref()
    }

    pub fn privacy_warnings(&self) -> &[PrivacyWarning] {
        &self.warnings
    }

    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    /// Listen addresses collected from Register messages (socket mode).
    pub fn registered_addrs(&self) -> BTreeMap<String, String> {
        self.registered
            .iter()
            .filter_map(|(node, addr)| addr.clone().map(|a| (node.clone(), a)))
            .collect()
    }

    pub fn outcome(&self) -> Option<SessionOutcome> {
        Some(SessionOutcome {
            fit: self.fit.clone()?,
            pooled: self.pooled.clone()?,
            plan: self.plan.clone()?,
            warnings: self.warnings.clone(),
        })
    }

    fn is_terminal(&self) -> bool {
        matches!(self.phase, Phase::Done | Phase::Failed)
    }

    fn fail(&mut self, error: ProtocolError) -> Vec<Outbound> {
        self.phase = Phase::Failed;
        let detail = error.to_string();
        self.failure = Some(detail.clone());
        self.cfg
            .roster
            .iter()
            .map(|node| Outbound {
                to: PartyId::node(node),
                payload: Payload::Error {
                    code: error.code().to_string(),
                    detail: detail.clone(),
                },
            })
            .collect()
    }

    /// Driver hook: the configured wait for the current phase elapsed.
    pub fn on_timeout(&mut self) -> Vec<Outbound> {
        if self.is_terminal() {
            return Vec::new();
        }
        let waiting: Vec<String> = match self.phase {
            Phase::Counting => self
                .cfg
                .roster
                .iter()
                .filter(|n| !self.registered.contains_key(*n) || !self.counts.contains_key(*n))
                .cloned()
                .collect(),
            Phase::Aggregating => {
                let missing = self.missing_slots();
                if missing.is_empty() {
                    Vec::new()
                } else {
                    return self.fail(ProtocolError::AggregationIncomplete {
                        missing: missing.len(),
                    });
                }
            }
            _ => Vec::new(),
        };
        self.fail(ProtocolError::NodeTimeout {
            phase: self.phase.as_str().to_string(),
            waiting_on: waiting,
        })
    }

    pub fn handle(&mut self, from: &PartyId, payload: Payload) -> Vec<Outbound> {
        if self.is_terminal() {
            return Vec::new();
        }
        let PartyId::Node(node) = from else {
            return self.fail(ProtocolError::UnexpectedMessage {
                from: from.to_string(),
                kind: payload.kind().to_string(),
                detail: "coordinator does not message itself".into(),
            });
        };
        if !self.cfg.roster.contains(node) {
            return self.fail(ProtocolError::UnexpectedMessage {
                from: node.clone(),
                kind: payload.kind().to_string(),
                detail: "sender is not on the roster".into(),
            });
        }
        let node = node.clone();
        match payload {
            Payload::Register { listen_addr } => self.on_register(&node, listen_addr),
            Payload::CountResponse { cases, controls } => self.on_counts(&node, cases, controls),
            Payload::MaskedTotal {
                round,
                pool_id,
                term_index,
                value,
            } => self.on_masked_total(round, pool_id, term_index, value),
            Payload::MaskReveal {
                round,
                pool_id,
                term_index,
                mask,
            } => self.on_mask_reveal(round, &node, pool_id, term_index, mask),
            Payload::Error { code, detail } => self.fail(ProtocolError::NodeFailure {
                node,
                code,
                detail,
            }),
            other => self.fail(ProtocolError::UnexpectedMessage {
                from: node,
                kind: other.kind().to_string(),
                detail: format!("not valid in phase {}", self.phase.as_str()),
            }),
        }
    }

    fn on_register(&mut self, node: &str, listen_addr: Option<String>) -> Vec<Outbound> {
        self.registered.insert(node.to_string(), listen_addr);
        if self.phase == Phase::Counting
            && self.cfg.roster.iter().all(|n| self.registered.contains_key(n))
            && self.counts.is_empty()
        {
            return self
                .cfg
                .roster
                .iter()
                .map(|n| Outbound {
                    to: PartyId::node(n),
                    payload: Payload::CountRequest,
                })
                .collect();
        }
        Vec::new()
    }

    fn on_counts(&mut self, node: &str, cases: u64, controls: u64) -> Vec<Outbound> {
        if self.phase != Phase::Counting {
            return Vec::new(); // stale duplicate
        }
        self.counts.insert(node.to_string(), (cases, controls));
        if self.cfg.roster.iter().all(|n| self.counts.contains_key(n)) {
            return self.plan_and_distribute();
        }
        Vec::new()
    }

    fn plan_and_distribute(&mut self) -> Vec<Outbound> {
        self.phase = Phase::Planning;
        let n: u64 = self.counts.values().map(|c| c.0).sum();
        let m: u64 = self.counts.values().map(|c| c.1).sum();
        if n == 0 || m == 0 {
            return self.fail(ProtocolError::PlanInfeasible(format!(
                "network holds {n} cases and {m} controls"
            )));
        }
        let meta = StudyMeta::new(n as usize, m as usize);

        // Virtual subjects laid out roster-first, index order within node.
        let mut case_ids = Vec::with_capacity(n as usize);
        let mut control_ids = Vec::with_capacity(m as usize);
        for node in &self.cfg.roster {
            let (nc, mc) = self.counts[node];
            case_ids.extend((0..nc as usize).map(|i| virtual_id(node, Stratum::Case, i)));
            control_ids.extend((0..mc as usize).map(|i| virtual_id(node, Stratum::Control, i)));
        }
        for id in case_ids.iter().chain(&control_ids) {
            let (node, _, _) = parse_virtual_id(id).expect("generated ids parse");
            self.membership.insert(id.clone(), node.to_string());
        }

        let plan = match build_plan(
            &meta,
            &case_ids,
            &control_ids,
            &self.cfg.policy,
            self.cfg.privacy_mode,
            self.cfg.seed,
        ) {
            Ok(plan) => plan,
            Err(e) => return self.fail(ProtocolError::PlanInfeasible(e.to_string())),
        };
        let g_min = plan.smallest_size().unwrap_or(0);
        match validate_model_spec(&self.cfg.spec, g_min, self.cfg.strict_guard) {
            Ok(warnings) => self.warnings = warnings,
            Err(e) => return self.fail(ProtocolError::SpecRejected(e.to_string())),
        }
        self.offsets = match offsets_for_plan(&plan) {
            Ok(offsets) => offsets,
            Err(e) => return self.fail(ProtocolError::PlanInfeasible(e.to_string())),
        };
        self.meta = Some(meta);
        self.plan = Some(plan);
        let all_terms: Vec<usize> = (0..self.cfg.spec.terms.len()).collect();
        self.start_round(all_terms, true)
    }

    /// Begin aggregating `term_indices` of the current spec. When
    /// `distribute_plan` is set, nodes first get their membership rows.
    fn start_round(&mut self, term_indices: Vec<usize>, distribute_plan: bool) -> Vec<Outbound> {
        let plan = self.plan.as_ref().expect("plan exists").clone();
        let ledger = match plan_chains(
            &plan,
            &self.cfg.spec,
            &self.membership,
            self.cfg.mask_mode,
            // Follow-up rounds draw fresh chain orders.
            self.cfg.seed.wrapping_add(self.round),
        ) {
            Ok(ledger) => ledger,
            Err(e) => return self.fail(e.into()),
        };
        self.phase = Phase::Aggregating;
        self.totals.clear();
        self.active_terms = term_indices;

        let mut outs = Vec::new();
        if distribute_plan {
            let terms: Vec<TermWire> = self.cfg.spec.terms.iter().map(TermWire::from_term).collect();
            let routing: BTreeMap<String, String> = self
                .registered
                .iter()
                .filter_map(|(node, addr)| addr.clone().map(|a| (node.clone(), a)))
                .collect();
            for node in &self.cfg.roster {
                let rows_for = |stratum: Stratum| -> Vec<PlanRow> {
                    plan.pools
                        .iter()
                        .filter(|p| {
                            p.stratum == stratum
                                && p.member_ids
                                    .iter()
                                    .any(|id| self.membership[id] == *node)
                        })
                        .map(|p| PlanRow {
                            pool_id: p.pool_id.clone(),
                            members: p.member_ids.clone(),
                        })
                        .collect()
                };
                outs.push(Outbound {
                    to: PartyId::node(node),
                    payload: Payload::PlanDistribute {
                        case_rows: rows_for(Stratum::Case),
                        control_rows: rows_for(Stratum::Control),
                        terms: terms.clone(),
                        privacy_mode: self.cfg.privacy_mode,
                        strict_guard: self.cfg.strict_guard,
                        mask_mode: self.cfg.mask_mode,
                        routing: routing.clone(),
                    },
                });
            }
        }

        // One AggregateRequest per (term, node), carrying that node's chain
        // neighbors only.
        for &term_index in &self.active_terms {
            let term = TermWire::from_term(&self.cfg.spec.terms[term_index]);
            let mut per_node: BTreeMap<String, Vec<ChainAssignment>> = BTreeMap::new();
            for pool in &plan.pools {
                let order = &ledger.chain_orders[&(pool.pool_id.clone(), term_index)];
                for (pos, node) in order.iter().enumerate() {
                    per_node.entry(node.clone()).or_default().push(ChainAssignment {
                        pool_id: pool.pool_id.clone(),
                        head: pos == 0,
                        next: order.get(pos + 1).map(|n| PartyId::node(n)),
                    });
                }
            }
            for (node, chains) in per_node {
                outs.push(Outbound {
                    to: PartyId::node(&node),
                    payload: Payload::AggregateRequest {
                        round: self.round,
                        term_index,
                        term: term.clone(),
                        chains,
                    },
                });
            }
        }
        self.ledger = Some(ledger);
        outs
    }

    fn expected_slots(&self) -> Vec<(String, usize)> {
        let plan = self.plan.as_ref().expect("plan exists");
        let mut slots = Vec::new();
        for pool in &plan.pools {
            for &t in &self.active_terms {
                slots.push((pool.pool_id.clone(), t));
            }
        }
        slots
    }

    fn missing_slots(&self) -> Vec<(String, usize)> {
        let ledger = self.ledger.as_ref().expect("ledger exists");
        self.expected_slots()
            .into_iter()
            .filter(|slot| {
                !self.totals.contains_key(slot) || !ledger.masks_complete(&slot.0, slot.1)
            })
            .collect()
    }

    fn on_masked_total(
        &mut self,
        round: u64,
        pool_id: String,
        term_index: usize,
        value: Value,
    ) -> Vec<Outbound> {
        if self.phase != Phase::Aggregating || round != self.round {
            return Vec::new(); // stale or duplicate round traffic
        }
        let Some(plan) = self.plan.as_ref() else {
            return Vec::new();
        };
        if !plan.pools.iter().any(|p| p.pool_id == pool_id)
            || !self.active_terms.contains(&term_index)
        {
            return self.fail(ProtocolError::UnknownPool { pool_id });
        }
        // First delivery wins; retransmissions are ignored.
        self.totals.entry((pool_id, term_index)).or_insert(value);
        self.try_complete()
    }

    fn on_mask_reveal(
        &mut self,
        round: u64,
        node: &str,
        pool_id: String,
        term_index: usize,
        mask: Value,
    ) -> Vec<Outbound> {
        if self.phase != Phase::Aggregating || round != self.round {
            return Vec::new();
        }
        let ledger = self.ledger.as_mut().expect("ledger exists");
        if let Err(e) = ledger.record_mask(&pool_id, term_index, node, mask) {
            return self.fail(e.into());
        }
        self.try_complete()
    }

    fn try_complete(&mut self) -> Vec<Outbound> {
        if !self.missing_slots().is_empty() {
            return Vec::new();
        }
        let ledger = self.ledger.as_ref().expect("ledger exists");
        for slot in self.expected_slots() {
            let masked = self.totals[&slot];
            let total = match ledger.unmask_total(&slot.0, slot.1, masked) {
                Ok(total) => total,
                Err(e) => return self.fail(e.into()),
            };
            self.term_values.insert(slot, total.to_f64());
        }
        self.assemble_and_fit()
    }

    fn assemble_and_fit(&mut self) -> Vec<Outbound> {
        self.phase = Phase::Fitting;
        let plan = self.plan.as_ref().expect("plan exists");
        let mut rows = Vec::with_capacity(plan.pools.len());
        for pool in &plan.pools {
            let mut term_values = Vec::with_capacity(self.cfg.spec.terms.len());
            for t in 0..self.cfg.spec.terms.len() {
                match self.term_values.get(&(pool.pool_id.clone(), t)) {
                    Some(v) => term_values.push(*v),
                    None => {
                        return self.fail(ProtocolError::AggregationIncomplete { missing: 1 });
                    }
                }
            }
            rows.push(PooledRow {
                pool_id: pool.pool_id.clone(),
                y: u8::from(pool.stratum == Stratum::Case),
                size_g: pool.size_g(),
                term_values,
                offset: self.offsets[&pool.size_g()],
            });
        }
        let design = design_rows_from_pooled(&rows, self.cfg.spec.include_baseline);
        let names = coefficient_names(&self.cfg.spec, true);
        match fit_named(&design, names, &self.cfg.fit_options) {
            Ok(fit) => {
                self.pooled = Some(rows);
                self.fit = Some(fit);
                self.phase = Phase::Done;
                self.cfg
                    .roster
                    .iter()
                    .map(|node| Outbound {
                        to: PartyId::node(node),
                        payload: Payload::PooledDatasetAck {
                            rows: self.pooled.as_ref().map(Vec::len).unwrap_or(0) as u64,
                        },
                    })
                    .collect()
            }
            Err(e) => self.fail(ProtocolError::Fit(e.to_string())),
        }
    }

    /// Re-aggregate under a new functional form, keeping the plan and pool
    /// memberships. Values of terms shared with the previous spec are
    /// reused; only changed or added terms travel again. Nested re-fits on
    /// the same pools make likelihood-ratio comparisons valid.
    pub fn resend_transformed(&mut self, new_spec: ModelSpec) -> Result<Vec<Outbound>, ProtocolError> {
        if self.phase != Phase::Done {
            return Err(ProtocolError::SessionExpired(format!(
                "resend requires a completed session (phase is {})",
                self.phase.as_str()
            )));
        }
        new_spec.validate()?;
        let g_min = self
            .plan
            .as_ref()
            .and_then(PoolPlan::smallest_size)
            .unwrap_or(0);
        let warnings = validate_model_spec(&new_spec, g_min, self.cfg.strict_guard)
            .map_err(|e| ProtocolError::SpecRejected(e.to_string()))?;

        let old_terms: Vec<Term> = self.cfg.spec.terms.clone();
        let old_values: BTreeMap<(String, usize), f64> = std::mem::take(&mut self.term_values);

        // Carry values of unchanged terms over to their new indices.
        let mut fresh: Vec<usize> = Vec::new();
        for (new_index, term) in new_spec.terms.iter().enumerate() {
            match old_terms.iter().position(|t| t == term) {
                Some(old_index) => {
                    let plan = self.plan.as_ref().expect("plan exists");
                    for pool in &plan.pools {
                        let value = old_values[&(pool.pool_id.clone(), old_index)];
                        self.term_values
                            .insert((pool.pool_id.clone(), new_index), value);
                    }
                }
                None => fresh.push(new_index),
            }
        }
        self.cfg.spec = new_spec;
        self.warnings = warnings;
        self.round += 1;
        if fresh.is_empty() {
            // Same terms (possibly reordered): rebuild and refit directly.
            return Ok(self.assemble_and_fit());
        }
        Ok(self.start_round(fresh, false))
    }
}
