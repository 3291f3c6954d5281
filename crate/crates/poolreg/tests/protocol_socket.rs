//! Two-node localhost session over the TCP transport: the distributed fit
//! and pooled dataset must match the centralized path to the last bit, and
//! the merged transcripts must pass the privacy audit.

mod common;

use std::net::TcpListener;
use std::time::Duration;

use common::*;
use poolreg::files::{render_pooled_csv, FileHeader};
use poolreg::pooling::SizePolicy;
use poolreg::protocol::socket::{run_coordinator_on, run_node_socket};
use poolreg::protocol::{audit_transcript, NodePhase};
use poolreg::securesum::MaskMode;

#[test]
fn two_node_localhost_session_matches_centralized_to_the_byte() {
    let records = fixture_cohort(260, 61);
    let shares = split_records(&records, 2, 12);
    let spec = fixture_spec();
    let policy = SizePolicy::single(4);
    let seed = 31;

    let listener = TcpListener::bind("127.0.0.1:0").expect("bind coordinator");
    let coordinator_addr = listener.local_addr().unwrap().to_string();

    let cfg = coordinator_config("s-socket", 2, spec.clone(), policy.clone(), seed);
    let coordinator_handle = std::thread::spawn(move || {
        run_coordinator_on(coordinator(cfg), listener, Duration::from_secs(20))
    });

    let mut node_handles = Vec::new();
    for mut node_cfg in node_configs("s-socket", &shares, 77) {
        node_cfg.listen_addr = Some("127.0.0.1:0".to_string());
        let addr = coordinator_addr.clone();
        node_handles.push(std::thread::spawn(move || {
            run_node_socket(node_cfg, &addr, Duration::from_secs(20))
        }));
    }

    let (outcome, coord_transcript) = coordinator_handle
        .join()
        .expect("coordinator thread")
        .map_err(|(e, _)| e)
        .expect("session completes");
    let mut transcripts = coord_transcript;
    for handle in node_handles {
        let (phase, entries) = handle
            .join()
            .expect("node thread")
            .map_err(|(e, _)| e)
            .expect("node completes");
        assert_eq!(phase, NodePhase::Done);
        transcripts.extend(entries);
    }

    let (rows, fit) = centralized_mirror(&shares, &spec, &policy, true, seed);
    assert_eq!(outcome.pooled, rows);
    assert_eq!(outcome.fit, fit);

    // Byte identity of the published artifact, not just the values.
    let header = FileHeader::new(Some(seed), None);
    let distributed_csv = render_pooled_csv(&outcome.pooled, &spec.term_labels(), &header);
    let centralized_csv = render_pooled_csv(&rows, &spec.term_labels(), &header);
    assert_eq!(distributed_csv, centralized_csv);

    let report = audit_transcript(&transcripts, &outcome.plan, true, MaskMode::Exact);
    assert!(report.clean(), "audit findings: {report:?}");
}

#[test]
fn node_that_never_starts_times_out_the_socket_session() {
    let records = fixture_cohort(150, 62);
    let shares = split_records(&records, 1, 1);

    let listener = TcpListener::bind("127.0.0.1:0").expect("bind coordinator");
    let coordinator_addr = listener.local_addr().unwrap().to_string();

    // Roster says two nodes; only one ever starts.
    let cfg = coordinator_config("s-timeout", 2, fixture_spec(), SizePolicy::single(3), 5);
    let coordinator_handle = std::thread::spawn(move || {
        run_coordinator_on(coordinator(cfg), listener, Duration::from_millis(300))
    });
    let mut node_cfg = node_configs("s-timeout", &shares, 4).remove(0);
    node_cfg.listen_addr = Some("127.0.0.1:0".to_string());
    let addr = coordinator_addr.clone();
    let node_handle =
        std::thread::spawn(move || run_node_socket(node_cfg, &addr, Duration::from_millis(800)));

    let err = coordinator_handle
        .join()
        .expect("coordinator thread")
        .map_err(|(e, _)| e)
        .expect_err("session must fail");
    let text = err.to_string();
    assert!(text.contains("timed out"), "got: {text}");
    assert!(text.contains("n2"), "got: {text}");
    // The live node hears the failure and stops as Failed.
    let (phase, _) = node_handle.join().expect("node thread").expect("node exits");
    assert_eq!(phase, NodePhase::Failed);
}
