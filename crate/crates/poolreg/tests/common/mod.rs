//! Helpers shared by the integration suites: fixture cohorts, node splits,
//! and the centralized mirror of a distributed session.

#![allow(dead_code)]

use rand::Rng;

use poolreg::glm::{fit_named, FitOptions, FitResult};
use poolreg::model::{MicroRecord, ModelSpec, StudyMeta, Term, Transform};
use poolreg::pooling::{
    aggregate_centralized, build_plan, coefficient_names, design_rows_from_pooled, PooledRow,
    SizePolicy, Stratum,
};
use poolreg::protocol::message::virtual_id;
use poolreg::protocol::{Coordinator, CoordinatorConfig, NodeConfig};
use poolreg::securesum::MaskMode;
use poolreg::simulate::{generate_cohort, SimConfig};

/// Deterministic small cohort drawn from the replication generator.
pub fn fixture_cohort(n_subjects: usize, seed: u64) -> Vec<MicroRecord> {
    let config = SimConfig {
        n_subjects,
        seed,
        ..SimConfig::default()
    };
    generate_cohort(&config, 0)
}

/// Two-term model exercising a transform and an interaction.
pub fn fixture_spec() -> ModelSpec {
    ModelSpec::new(vec![
        Term::identity("x"),
        Term::log("z1"),
        Term::identity("x").interacting("z2", Transform::Identity),
    ])
}

pub fn node_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("n{i}")).collect()
}

/// Split records across k nodes uniformly at random (seeded). Every node is
/// guaranteed at least one record by reassigning from the largest share.
pub fn split_records(records: &[MicroRecord], k: usize, seed: u64) -> Vec<Vec<MicroRecord>> {
    let mut rng = poolreg::rng::stream(seed, 0x5711);
    let mut shares: Vec<Vec<MicroRecord>> = vec![Vec::new(); k];
    for record in records {
        shares[rng.random_range(0..k)].push(record.clone());
    }
    for i in 0..k {
        while shares[i].is_empty() {
            let donor = (0..k).max_by_key(|&j| shares[j].len()).unwrap();
            let moved = shares[donor].pop().unwrap();
            shares[i].push(moved);
        }
    }
    shares
}

pub fn node_configs(session: &str, shares: &[Vec<MicroRecord>], mask_seed: u64) -> Vec<NodeConfig> {
    shares
        .iter()
        .enumerate()
        .map(|(i, records)| NodeConfig {
            session_id: session.to_string(),
            node_id: format!("n{}", i + 1),
            records: records.clone(),
            registry: Default::default(),
            mask_seed: mask_seed.wrapping_add(i as u64),
            listen_addr: None,
        })
        .collect()
}

pub fn coordinator_config(
    session: &str,
    k_nodes: usize,
    spec: ModelSpec,
    policy: SizePolicy,
    seed: u64,
) -> CoordinatorConfig {
    CoordinatorConfig {
        session_id: session.to_string(),
        roster: node_names(k_nodes),
        spec,
        policy,
        privacy_mode: true,
        strict_guard: false,
        mask_mode: MaskMode::Exact,
        seed,
        fit_options: FitOptions::default(),
    }
}

pub fn coordinator(cfg: CoordinatorConfig) -> Coordinator {
    Coordinator::new(cfg).expect("coordinator config is valid")
}

/// What the centralized path produces for the same node layout: records are
/// relabeled with the coordinator's virtual ids (roster order, local load
/// order within node and stratum) so the identical plan applies.
pub fn centralized_mirror(
    shares: &[Vec<MicroRecord>],
    spec: &ModelSpec,
    policy: &SizePolicy,
    privacy: bool,
    seed: u64,
) -> (Vec<PooledRow>, FitResult) {
    let mut case_ids = Vec::new();
    let mut control_ids = Vec::new();
    let mut relabeled = Vec::new();
    for (i, records) in shares.iter().enumerate() {
        let node = format!("n{}", i + 1);
        let mut case_count = 0usize;
        let mut control_count = 0usize;
        for record in records {
            let vid = if record.is_case() {
                let id = virtual_id(&node, Stratum::Case, case_count);
                case_count += 1;
                case_ids.push(id.clone());
                id
            } else {
                let id = virtual_id(&node, Stratum::Control, control_count);
                control_count += 1;
                control_ids.push(id.clone());
                id
            };
            relabeled.push(MicroRecord {
                subject_id: vid,
                ..record.clone()
            });
        }
    }
    let meta = StudyMeta::new(case_ids.len(), control_ids.len());
    let plan = build_plan(&meta, &case_ids, &control_ids, policy, privacy, seed)
        .expect("mirror plan builds");
    let rows = aggregate_centralized(&plan, &relabeled, spec).expect("mirror aggregates");
    let fit = fit_named(
        &design_rows_from_pooled(&rows, spec.include_baseline),
        coefficient_names(spec, true),
        &FitOptions::default(),
    )
    .expect("mirror fit");
    (rows, fit)
}
