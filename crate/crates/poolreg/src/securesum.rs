//! Chained masked summation.
//!
//! A pooled term value is assembled across nodes by passing a running sum
//! along a chain: each node adds its local contribution plus a private
//! random mask and forwards the result, so no partial sum is ever visible
//! to another node or to the center. Masks travel to the center separately
//! and are subtracted there. Node orderings are drawn independently per
//! (pool, term) so repeated observations do not reveal positions.
//!
//! Two value modes:
//! - exact (default): values quantized to fixed point at 1e-9 resolution,
//!   masks uniform over all 64-bit words, arithmetic wrapping mod 2^64.
//!   Sums reconstruct bit for bit whenever the true total fits the range.
//! - real: plain f64 with masks uniform on [-M, M]; reconstruction carries
//!   round-off, so downstream comparisons use a 1e-9 relative tolerance.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelSpec;
use crate::pooling::PoolPlan;
use crate::rng::{stream, STREAM_CHAIN_ORDER};

/// Fixed-point resolution: 1e-9 in covariate units.
pub const FIXED_SCALE: f64 = 1e9;
/// Largest absolute value encodable without risking per-summand overflow.
pub const FIXED_MAX_ABS: f64 = 1e9;
/// Default half-width of the real-mode mask distribution (2^20). Masks this
/// large cost about six decimal digits of the sum, hence the 1e-9 relative
/// round-trip tolerance documented for real mode.
pub const REAL_MASK_MAGNITUDE: f64 = 1_048_576.0;

/// Fixed-point value in 1e-9 units; arithmetic wraps mod 2^64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fixed(pub i64);

impl Fixed {
    pub const ZERO: Fixed = Fixed(0);

    /// Quantize a real value to the canonical 1e-9 grid.
    pub fn encode(v: f64) -> Result<Fixed, SecureSumError> {
        if !v.is_finite() {
            return Err(SecureSumError::NonFinite(v));
        }
        if v.abs() > FIXED_MAX_ABS {
            return Err(SecureSumError::OutOfRange(v));
        }
        Ok(Fixed((v * FIXED_SCALE).round() as i64))
    }

    pub fn decode(self) -> f64 {
        self.0 as f64 / FIXED_SCALE
    }

    pub fn wrapping_add(self, other: Fixed) -> Fixed {
        Fixed(self.0.wrapping_add(other.0))
    }

    pub fn wrapping_sub(self, other: Fixed) -> Fixed {
        Fixed(self.0.wrapping_sub(other.0))
    }
}

/// Sum of values quantized per summand on the canonical grid.
///
/// Both the centralized aggregator and the node-local sums go through this
/// one function, which is what makes the distributed exact mode reproduce
/// the centralized pooled dataset byte for byte: integer addition is
/// associative across any partition of the summands.
pub fn quantized_sum(values: impl IntoIterator<Item = f64>) -> Result<Fixed, SecureSumError> {
    let mut acc = Fixed::ZERO;
    for v in values {
        acc = acc.wrapping_add(Fixed::encode(v)?);
    }
    Ok(acc)
}

/// Value-and-mask arithmetic shared by the chain operations.
pub trait MaskArith: Copy {
    fn zero() -> Self;
    fn add(self, other: Self) -> Self;
    fn sub(self, other: Self) -> Self;
}

impl MaskArith for f64 {
    fn zero() -> Self {
        0.0
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn sub(self, other: Self) -> Self {
        self - other
    }
}

impl MaskArith for f32 {
    fn zero() -> Self {
        0.0
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn sub(self, other: Self) -> Self {
        self - other
    }
}

impl MaskArith for Fixed {
    fn zero() -> Self {
        Fixed::ZERO
    }
    fn add(self, other: Self) -> Self {
        self.wrapping_add(other)
    }
    fn sub(self, other: Self) -> Self {
        self.wrapping_sub(other)
    }
}

/// One chain step: what a node emits given what it received.
pub fn masked_contribute<T: MaskArith>(partial_in: T, node_local_sum: T, mask: T) -> T {
    partial_in.add(node_local_sum).add(mask)
}

/// Remove all masks from a chain total.
pub fn unmask<T: MaskArith>(masked_total: T, masks: &[T]) -> T {
    masks.iter().fold(masked_total, |acc, m| acc.sub(*m))
}

/// Which representation values take on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum MaskMode {
    #[default]
    Exact,
    Real {
        magnitude: f64,
    },
}

impl MaskMode {
    pub fn real_default() -> MaskMode {
        MaskMode::Real {
            magnitude: REAL_MASK_MAGNITUDE,
        }
    }
}

/// A chain value in either mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Fixed(i64),
    Real(f64),
}

impl Value {
    pub fn zero(mode: MaskMode) -> Value {
        match mode {
            MaskMode::Exact => Value::Fixed(0),
            MaskMode::Real { .. } => Value::Real(0.0),
        }
    }

    pub fn add(self, other: Value) -> Result<Value, SecureSumError> {
        match (self, other) {
            (Value::Fixed(a), Value::Fixed(b)) => Ok(Value::Fixed(Fixed(a).wrapping_add(Fixed(b)).0)),
            (Value::Real(a), Value::Real(b)) => Ok(Value::Real(a + b)),
            _ => Err(SecureSumError::ModeMismatch),
        }
    }

    pub fn sub(self, other: Value) -> Result<Value, SecureSumError> {
        match (self, other) {
            (Value::Fixed(a), Value::Fixed(b)) => Ok(Value::Fixed(Fixed(a).wrapping_sub(Fixed(b)).0)),
            (Value::Real(a), Value::Real(b)) => Ok(Value::Real(a - b)),
            _ => Err(SecureSumError::ModeMismatch),
        }
    }

    /// The real value this represents; exact-mode values decode from the grid.
    pub fn to_f64(self) -> f64 {
        match self {
            Value::Fixed(units) => Fixed(units).decode(),
            Value::Real(v) => v,
        }
    }

    pub fn is_zero(self) -> bool {
        match self {
            Value::Fixed(units) => units == 0,
            Value::Real(v) => v == 0.0,
        }
    }
}

/// Draw a nonzero mask for the given mode.
pub fn draw_mask<G: Rng>(rng: &mut G, mode: MaskMode) -> Value {
    match mode {
        MaskMode::Exact => loop {
            let units = rng.random::<u64>() as i64;
            if units != 0 {
                return Value::Fixed(units);
            }
        },
        MaskMode::Real { magnitude } => loop {
            let v = rng.random_range(-magnitude..=magnitude);
            if v != 0.0 {
                return Value::Real(v);
            }
        },
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SecureSumError {
    #[error("value {0} is not finite")]
    NonFinite(f64),
    #[error("value {0} exceeds the fixed-point range")]
    OutOfRange(f64),
    #[error("mixed exact and real values in one chain")]
    ModeMismatch,
    #[error("subject {0} is not assigned to any node")]
    UnassignedSubject(String),
    #[error("masks incomplete for pool {pool_id} term {term_index}: missing {missing:?}")]
    IncompleteMasks {
        pool_id: String,
        term_index: usize,
        missing: Vec<String>,
    },
    #[error("unexpected mask from node {node} for pool {pool_id} term {term_index}")]
    UnexpectedMask {
        pool_id: String,
        term_index: usize,
        node: String,
    },
}

/// Chain orders plus revealed masks for one session.
///
/// The center plans the orders; nodes fill in mask values as they reveal
/// them. Immutable after planning except for mask arrival.
#[derive(Debug, Clone, Default)]
pub struct MaskLedger {
    pub mode: MaskMode,
    /// (pool_id, term_index) -> node ids in summation order.
    pub chain_orders: BTreeMap<(String, usize), Vec<String>>,
    /// (pool_id, term_index, node_id) -> revealed mask.
    pub masks: BTreeMap<(String, usize, String), Value>,
}

impl MaskLedger {
    /// Nodes expected to reveal a mask for a chain. Exact-mode singleton
    /// chains skip masking: the disclosed value is already an aggregate.
    pub fn expected_masks(&self, pool_id: &str, term_index: usize) -> &[String] {
        let chain = self
            .chain_orders
            .get(&(pool_id.to_string(), term_index))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        if matches!(self.mode, MaskMode::Exact) && chain.len() == 1 {
            &[]
        } else {
            chain
        }
    }

    pub fn record_mask(
        &mut self,
        pool_id: &str,
        term_index: usize,
        node: &str,
        mask: Value,
    ) -> Result<(), SecureSumError> {
        if !self
            .expected_masks(pool_id, term_index)
            .iter()
            .any(|n| n == node)
        {
            return Err(SecureSumError::UnexpectedMask {
                pool_id: pool_id.into(),
                term_index,
                node: node.into(),
            });
        }
        // First reveal wins; duplicates from a retransmitting transport are
        // ignored.
        self.masks
            .entry((pool_id.to_string(), term_index, node.to_string()))
            .or_insert(mask);
        Ok(())
    }

    pub fn masks_complete(&self, pool_id: &str, term_index: usize) -> bool {
        self.expected_masks(pool_id, term_index).iter().all(|n| {
            self.masks
                .contains_key(&(pool_id.to_string(), term_index, n.clone()))
        })
    }

    /// Subtract the revealed masks from a chain total.
    pub fn unmask_total(
        &self,
        pool_id: &str,
        term_index: usize,
        masked_total: Value,
    ) -> Result<Value, SecureSumError> {
        let expected = self.expected_masks(pool_id, term_index).to_vec();
        let mut total = masked_total;
        let mut missing = Vec::new();
        for node in expected {
            match self
                .masks
                .get(&(pool_id.to_string(), term_index, node.clone()))
            {
                Some(mask) => total = total.sub(*mask)?,
                None => missing.push(node),
            }
        }
        if missing.is_empty() {
            Ok(total)
        } else {
            Err(SecureSumError::IncompleteMasks {
                pool_id: pool_id.into(),
                term_index,
                missing,
            })
        }
    }
}

/// Plan per-(pool, term) node orderings.
///
/// Contributing nodes of a pool (sorted, deduplicated) are shuffled
/// independently per term from the chain-order stream, so two terms of the
/// same pool get unrelated orderings. Deterministic given the seed.
pub fn plan_chains(
    plan: &PoolPlan,
    spec: &ModelSpec,
    node_membership: &BTreeMap<String, String>,
    mode: MaskMode,
    seed: u64,
) -> Result<MaskLedger, SecureSumError> {
    use rand::seq::SliceRandom;

    let mut rng = stream(seed, STREAM_CHAIN_ORDER);
    let mut ledger = MaskLedger {
        mode,
        ..MaskLedger::default()
    };
    for pool in &plan.pools {
        let mut nodes: Vec<String> = Vec::new();
        for member in &pool.member_ids {
            let node = node_membership
                .get(member)
                .ok_or_else(|| SecureSumError::UnassignedSubject(member.clone()))?;
            if !nodes.contains(node) {
                nodes.push(node.clone());
            }
        }
        nodes.sort();
        for term_index in 0..spec.terms.len() {
            let mut order = nodes.clone();
            if order.len() >= 2 {
                order.shuffle(&mut rng);
            }
            ledger
                .chain_orders
                .insert((pool.pool_id.clone(), term_index), order);
        }
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Term};
    use crate::pooling::{Pool, PoolPlan, Stratum};

    #[test]
    fn two_node_chain_walkthrough() {
        // A: local 2.5, mask +17.3; B: local 4.0, mask -5.1.
        let a_out: f64 = masked_contribute(0.0, 2.5, 17.3);
        assert!((a_out - 19.8).abs() < 1e-12);
        let b_out: f64 = masked_contribute(a_out, 4.0, -5.1);
        assert!((b_out - 18.7).abs() < 1e-12);
        let total: f64 = unmask(b_out, &[17.3, -5.1]);
        assert!((total - 6.5).abs() < 1e-12);
    }

    #[test]
    fn zero_mask_is_plain_running_sum() {
        assert_eq!(masked_contribute(1.0, 2.0, 0.0), 3.0);
        assert_eq!(unmask(7.5, &[0.0, 0.0]), 7.5);
    }

    #[test]
    fn empty_node_contributes_mask_only() {
        let out = masked_contribute(10.0, 0.0, 3.25);
        assert_eq!(out, 13.25);
    }

    #[test]
    fn fixed_round_trip_and_wrapping() {
        let a = Fixed::encode(2.5).unwrap();
        let b = Fixed::encode(4.0).unwrap();
        assert_eq!(a.wrapping_add(b).decode(), 6.5);

        let mask = Fixed(i64::MAX); // wraps
        let masked = a.wrapping_add(mask);
        assert_eq!(masked.wrapping_sub(mask), a);

        assert!(Fixed::encode(f64::NAN).is_err());
        assert!(Fixed::encode(2e9).is_err());
    }

    #[test]
    fn quantized_sum_is_partition_invariant() {
        let values = [0.1, 2.7, -3.14159, 8.25, -0.000000001];
        let whole = quantized_sum(values.iter().copied()).unwrap();
        let left = quantized_sum(values[..2].iter().copied()).unwrap();
        let right = quantized_sum(values[2..].iter().copied()).unwrap();
        assert_eq!(whole, left.wrapping_add(right));
    }

    fn tiny_plan() -> PoolPlan {
        PoolPlan {
            pools: vec![Pool {
                pool_id: "case-1".into(),
                stratum: Stratum::Case,
                member_ids: vec!["a".into(), "b".into(), "c".into()],
            }],
            leftovers: vec![],
            seed: 0,
        }
    }

    fn membership() -> BTreeMap<String, String> {
        [("a", "n1"), ("b", "n2"), ("c", "n3")]
            .into_iter()
            .map(|(s, n)| (s.to_string(), n.to_string()))
            .collect()
    }

    #[test]
    fn chains_are_permutations_drawn_per_term() {
        let spec = ModelSpec::new(vec![Term::identity("x"), Term::identity("z")]);
        let ledger = plan_chains(&tiny_plan(), &spec, &membership(), MaskMode::Exact, 11).unwrap();
        for t in 0..2 {
            let order = &ledger.chain_orders[&("case-1".to_string(), t)];
            let mut sorted = order.clone();
            sorted.sort();
            assert_eq!(sorted, vec!["n1", "n2", "n3"]);
        }
        let again = plan_chains(&tiny_plan(), &spec, &membership(), MaskMode::Exact, 11).unwrap();
        assert_eq!(ledger.chain_orders, again.chain_orders);
    }

    #[test]
    fn single_node_pool_gets_trivial_chain() {
        let spec = ModelSpec::new(vec![Term::identity("x")]);
        let all_on_two: BTreeMap<String, String> = ["a", "b", "c"]
            .iter()
            .map(|s| (s.to_string(), "n2".to_string()))
            .collect();
        let ledger = plan_chains(&tiny_plan(), &spec, &all_on_two, MaskMode::Exact, 5).unwrap();
        assert_eq!(
            ledger.chain_orders[&("case-1".to_string(), 0)],
            vec!["n2".to_string()]
        );
        // Exact-mode singleton chains expect no masks.
        assert!(ledger.expected_masks("case-1", 0).is_empty());
    }

    #[test]
    fn chain_order_frequencies_are_uniform() {
        let spec = ModelSpec::new(vec![Term::identity("x")]);
        let plan = tiny_plan();
        let membership = membership();
        let mut counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        let trials = 6000;
        for seed in 0..trials {
            let ledger =
                plan_chains(&plan, &spec, &membership, MaskMode::Exact, seed as u64).unwrap();
            let order = ledger.chain_orders[&("case-1".to_string(), 0)].clone();
            *counts.entry(order).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let expected = trials as f64 / 6.0;
        let sigma = (trials as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for (_, count) in counts {
            assert!((count as f64 - expected).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn ledger_unmask_round_trip() {
        let spec = ModelSpec::new(vec![Term::identity("x")]);
        let mut ledger = plan_chains(&tiny_plan(), &spec, &membership(), MaskMode::Exact, 3).unwrap();
        let order = ledger.chain_orders[&("case-1".to_string(), 0)].clone();
        let locals: BTreeMap<&str, f64> = [("n1", 1.5), ("n2", -0.25), ("n3", 4.0)].into();

        let mut rng = stream(9, 77);
        let mut running = Value::zero(MaskMode::Exact);
        for node in &order {
            let mask = draw_mask(&mut rng, MaskMode::Exact);
            let local = Value::Fixed(Fixed::encode(locals[node.as_str()]).unwrap().0);
            running = running.add(local).unwrap().add(mask).unwrap();
            ledger.record_mask("case-1", 0, node, mask).unwrap();
        }
        assert!(ledger.masks_complete("case-1", 0));
        let total = ledger.unmask_total("case-1", 0, running).unwrap();
        assert_eq!(total.to_f64(), 5.25);
    }

    #[test]
    fn incomplete_masks_are_an_error() {
        let spec = ModelSpec::new(vec![Term::identity("x")]);
        let ledger = plan_chains(&tiny_plan(), &spec, &membership(), MaskMode::Exact, 3).unwrap();
        assert!(!ledger.masks_complete("case-1", 0));
        let err = ledger
            .unmask_total("case-1", 0, Value::Fixed(10))
            .unwrap_err();
        assert!(matches!(err, SecureSumError::IncompleteMasks { .. }));
    }

    #[test]
    fn unassigned_subject_is_an_error() {
        let spec = ModelSpec::new(vec![Term::identity("x")]);
        let mut membership = membership();
        membership.remove("b");
        let err = plan_chains(&tiny_plan(), &spec, &membership, MaskMode::Exact, 3).unwrap_err();
        assert!(matches!(err, SecureSumError::UnassignedSubject(_)));
    }

    #[test]
    fn mode_mismatch_is_an_error() {
        assert!(Value::Fixed(1).add(Value::Real(1.0)).is_err());
    }
}
