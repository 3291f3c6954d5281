//! Transcript privacy audit.
//!
//! Checks, over a recorded transcript, that the protocol disclosed nothing
//! finer than pool-level aggregates: no message pairs a subject identifier
//! with a covariate value, every value disclosed without a mask aggregates
//! at least two subjects (privacy mode), and every multi-node chain
//! revealed a nonzero mask per participating node.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::pooling::PoolPlan;
use crate::securesum::MaskMode;

use super::message::{Payload, TranscriptEntry};

#[derive(Debug, Clone, Default, Serialize)]
pub struct AuditReport {
    pub messages: usize,
    /// Messages carrying both a subject id and a data value. Must be 0.
    pub id_value_pairings: usize,
    /// Unmasked disclosed sums aggregating fewer than two subjects. Must be
    /// 0 in privacy mode.
    pub small_unmasked_disclosures: usize,
    /// Chains of two or more nodes that revealed a zero mask. Must be 0.
    pub zero_masks: usize,
    /// Data values observed per payload kind (for reporting).
    pub value_messages_by_kind: BTreeMap<String, usize>,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.id_value_pairings == 0
            && self.small_unmasked_disclosures == 0
            && self.zero_masks == 0
    }
}

/// Walk a JSON value collecting every string and every non-integer number.
fn scan(value: &serde_json::Value, strings: &mut Vec<String>, fractional_numbers: &mut usize) {
    match value {
        serde_json::Value::String(s) => strings.push(s.clone()),
        serde_json::Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if f.fract() != 0.0 {
                    *fractional_numbers += 1;
                }
            }
        }
        serde_json::Value::Array(items) => {
            for item in items {
                scan(item, strings, fractional_numbers);
            }
        }
        serde_json::Value::Object(map) => {
            for item in map.values() {
                scan(item, strings, fractional_numbers);
            }
        }
        _ => {}
    }
}

/// Audit a transcript against the plan it executed.
pub fn audit_transcript(
    entries: &[TranscriptEntry],
    plan: &PoolPlan,
    privacy_mode: bool,
    mask_mode: MaskMode,
) -> AuditReport {
    let member_ids: BTreeSet<&String> = plan
        .pools
        .iter()
        .flat_map(|p| p.member_ids.iter())
        .chain(plan.leftovers.iter())
        .collect();
    let pool_sizes: BTreeMap<&String, usize> = plan
        .pools
        .iter()
        .map(|p| (&p.pool_id, p.size_g()))
        .collect();

    let mut report = AuditReport {
        messages: entries.len(),
        ..AuditReport::default()
    };

    for entry in entries {
        // Structural classification: which kinds carry data values.
        let carries_value = matches!(
            entry.payload,
            Payload::PartialAggregate { .. }
                | Payload::MaskedTotal { .. }
                | Payload::MaskReveal { .. }
        );
        if carries_value {
            *report
                .value_messages_by_kind
                .entry(entry.kind.clone())
                .or_default() += 1;
        }

        // Generic scan: does the serialized payload contain a known subject
        // id next to any fractional number?
        let json = serde_json::to_value(&entry.payload).expect("payload serializes");
        let mut strings = Vec::new();
        let mut fractional = 0usize;
        scan(&json, &mut strings, &mut fractional);
        let has_subject_id = strings.iter().any(|s| member_ids.contains(s));
        if has_subject_id && (carries_value || fractional > 0) {
            report.id_value_pairings += 1;
        }

        // Values disclosed without any mask must cover two or more
        // subjects. In exact mode the only unmasked disclosure is a
        // singleton-chain MaskedTotal; real mode masks everything.
        if privacy_mode && matches!(mask_mode, MaskMode::Exact) {
            if let Payload::MaskedTotal { pool_id, .. } = &entry.payload {
                let masked = entries.iter().any(|e| {
                    matches!(
                        &e.payload,
                        Payload::MaskReveal { pool_id: p, .. } if p == pool_id
                    )
                });
                if !masked {
                    if let Some(size) = pool_sizes.get(pool_id) {
                        if *size < 2 {
                            report.small_unmasked_disclosures += 1;
                        }
                    }
                }
            }
        }

        if let Payload::MaskReveal { mask, .. } = &entry.payload {
            if mask.is_zero() {
                report.zero_masks += 1;
            }
        }
    }
    report
}
