//! One pass/fail line per acceptance criterion. Exits non-zero if any fails.

use std::time::{Duration, Instant};

use ownlink_core::chaff::ChaffGenerator;
use ownlink_core::protocol::{derive_keypair, OwnershipState, System, SystemConfig, CLAIM_STRONG_BOUNDARIES};
use ownlink_core::trace::{Trace, TraceEvent};
use ownlink_core::types::Address;
use ownlink_gateway::audit::route_audit;
use ownlink_sim::adversary::{linkage_attack, Strategy};
use ownlink_sim::audit::{audit_trace, denylisted_keys};
use ownlink_sim::scenario::{run, RunReport, Scenario};
use ownlink_sim::workload::{
    atomicity_trials, convergence_trial, deidentification_hits, random_sequence, random_system, replay_mismatches,
    searchability_workload, tumble_trace, tumble_trace_with,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn load(name: &str) -> Scenario {
    let path = format!("{}/scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"));
    Scenario::parse(&std::fs::read_to_string(&path).expect("bundled scenario")).expect("bundled scenario parses")
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn within(d: Duration, limit_s: u64) -> bool {
    d < Duration::from_secs(limit_s)
}

/// Resolution attempts on `contract` by `requester` via the contract path,
/// split at the first revoke of that contract: (total, identified) each side.
fn resolutions_around_revoke(trace: &Trace, contract: &Address, requester: &Address) -> ((usize, usize), (usize, usize)) {
    let mut revoked = false;
    let mut before = (0, 0);
    let mut after = (0, 0);
    for e in trace.events() {
        match e {
            TraceEvent::Transition { contract: c, to: OwnershipState::ClaimedWeakRevoked, .. } if c == contract => revoked = true,
            TraceEvent::Resolution { requester: r, contract: Some(c), via, outcome, .. }
                if c == contract && r == requester && via == "contract" =>
            {
                let side = if revoked { &mut after } else { &mut before };
                side.0 += 1;
                side.1 += outcome.is_identified() as usize;
            }
            _ => {}
        }
    }
    (before, after)
}

fn first_revoked(trace: &Trace) -> Option<Address> {
    trace.events().find_map(|e| match e {
        TraceEvent::Transition { contract, to: OwnershipState::ClaimedWeakRevoked, .. } => Some(*contract),
        _ => None,
    })
}

fn c1(academic: &RunReport, elapsed: Duration) -> Outcome {
    let employer = derive_keypair(academic.seed, "employer").address();
    let Some(alice) = first_revoked(&academic.trace) else {
        return outcome(false, "no revoke in the academic trace");
    };
    let ((nb, ib), (na, ia)) = resolutions_around_revoke(&academic.trace, &alice, &employer);
    let passed = nb >= 100 && ib == nb && na >= 100 && ia == 0 && within(elapsed, 10);
    outcome(passed, format!("before revoke {ib}/{nb} identified, after revoke {ia}/{na} identified, {elapsed:.2?}"))
}

fn c2() -> (Outcome, Trace) {
    let ((report, trace), elapsed) = timed(|| searchability_workload(1000, 2024));
    let all_states = ["custodian_held", "claimed_weak_linked", "claimed_weak_revoked", "claimed_strong"]
        .iter()
        .all(|s| report.states_mid.contains_key(*s) && report.states_after.contains_key(*s));
    let passed = report.mismatches.is_empty() && all_states && within(elapsed, 30);
    let detail = format!(
        "{} users, {} query runs x {} comparisons, {} mismatches, states after {:?}, {elapsed:.2?}",
        report.users,
        report.queries,
        report.comparisons / report.queries.max(1),
        report.mismatches.len(),
        report.states_after
    );
    (outcome(passed, detail), trace)
}

fn c3(info: &mut Vec<String>) -> Outcome {
    let ((k9, k0), elapsed) = timed(|| (tumble_trace(1000, 9, 9), tumble_trace(1000, 0, 10)));
    let endpoint = "https://university.local/identity";
    let u9 = linkage_attack(&k9, endpoint, Strategy::UniformGuess, true, 1);
    let u0 = linkage_attack(&k0, endpoint, Strategy::UniformGuess, true, 1);
    for strategy in Strategy::ALL {
        for include_directory in [true, false] {
            if let Ok(r) = linkage_attack(&k9, endpoint, strategy, include_directory, 2) {
                info.push(format!(
                    "k=9 {} directory={}: {}/{} = {:.3} (95% CI {:.3}..{:.3})",
                    strategy.as_str(),
                    include_directory,
                    r.correct,
                    r.trials,
                    r.accuracy,
                    r.ci95.0,
                    r.ci95.1
                ));
            }
        }
    }
    let constant = tumble_trace_with(1000, 9, 11, ChaffGenerator::Constant);
    if let Ok(r) = linkage_attack(&constant, endpoint, Strategy::PayloadFrequency, true, 2) {
        info.push(format!(
            "k=9 payload-frequency vs constant chaff: {}/{} = {:.3} (95% CI {:.3}..{:.3})",
            r.correct, r.trials, r.accuracy, r.ci95.0, r.ci95.1
        ));
    }
    match (u9, u0) {
        (Ok(a), Ok(b)) => {
            let passed = a.trials == 1000
                && (0.07..=0.13).contains(&a.accuracy)
                && b.trials == 1000
                && b.accuracy == 1.0
                && within(elapsed, 60);
            outcome(passed, format!("k=9 accuracy {:.3} over {} batches, k=0 accuracy {:.3}, {elapsed:.2?}", a.accuracy, a.trials, b.accuracy))
        }
        (a, b) => outcome(false, format!("attack failed: {a:?} {b:?}")),
    }
}

fn c4() -> Outcome {
    let (res, elapsed) = timed(|| {
        let mut claims = 0;
        let mut violations = Vec::new();
        for seed in 0..10_000u64 {
            let o = random_sequence(seed, 30);
            claims += o.claims_checked;
            violations.extend(o.violations.into_iter().map(|v| format!("seed {seed}: {v}")));
        }
        (claims, violations)
    });
    let (claims, violations) = res;
    let detail = format!("10000 sequences, {claims} claims checked, {} violations, {elapsed:.2?}", violations.len());
    outcome(violations.is_empty() && claims > 0, detail)
}

fn c5(randoms: &[System]) -> Outcome {
    let mut mismatches = Vec::new();
    for (i, sys) in randoms.iter().enumerate() {
        mismatches.extend(replay_mismatches(sys).into_iter().map(|m| format!("run {i}: {m}")));
        if let Some(c) = audit_trace(sys.trace()).check("replay_determinism") {
            if !c.passed {
                mismatches.push(format!("run {i}: trace replay {:?}", c.counterexamples.first()));
            }
        }
    }
    let detail = format!("{} runs, ledger and {} node logs each, {} mismatches", randoms.len(), 2, mismatches.len());
    outcome(mismatches.is_empty(), detail)
}

fn c6() -> Outcome {
    let (res, elapsed) = timed(|| (0..100u64).map(|t| convergence_trial(t, 500, 10)).collect::<Vec<_>>());
    let divergent = res.iter().filter(|t| t.distinct_snapshots != 1).count();
    let deliveries: usize = res.iter().map(|t| t.deliveries).sum();
    outcome(divergent == 0, format!("100 trials x 10 orders x 3 nodes, {deliveries} deliveries, {divergent} divergent trials, {elapsed:.2?}"))
}

fn c7(traces: &[(&str, &Trace)], randoms: &[System]) -> Outcome {
    let mut hits = Vec::new();
    let mut scanned = 0;
    for (name, t) in traces {
        let denylist = genesis_denylist(t);
        scanned += 1;
        hits.extend(deidentification_hits(t, &denylist).into_iter().map(|h| format!("{name}: {h}")));
    }
    for (i, sys) in randoms.iter().enumerate() {
        let denylist = sys.config().denylist();
        hits.extend(deidentification_hits(sys.trace(), &denylist).into_iter().map(|h| format!("random {i}: {h}")));
        for node in sys.cluster().nodes() {
            scanned += 1;
            hits.extend(denylisted_keys(&node.export_snapshot(), &denylist).into_iter().map(|h| format!("random {i}: {h}")));
        }
    }
    outcome(hits.is_empty(), format!("{scanned} snapshot sources scanned, {} identifying field names found", hits.len()))
}

fn genesis_denylist(t: &Trace) -> Vec<String> {
    t.events()
        .find_map(|e| match e {
            TraceEvent::Genesis { config, .. } => serde_json::from_value::<SystemConfig>(config.clone()).ok(),
            _ => None,
        })
        .map(|c| c.denylist())
        .unwrap_or_default()
}

fn c8() -> Outcome {
    let (r, elapsed) = timed(|| atomicity_trials(100, 77));
    let passed = r.violations.is_empty()
        && r.trials == 100 * CLAIM_STRONG_BOUNDARIES
        && r.retried_ok == r.trials
        && r.crashes_partial > 0
        && r.crashes_detected == r.crashes_partial;
    let mut detail = format!(
        "{} boundaries x 100 trials, {} rolled back, {} retried ok, {} violations, crash partial states flagged {}/{}, {elapsed:.2?}",
        r.boundaries,
        r.rolled_back,
        r.retried_ok,
        r.violations.len(),
        r.crashes_detected,
        r.crashes_partial
    );
    if let Some(v) = r.violations.first() {
        detail.push_str(&format!("; first: {v}"));
    }
    outcome(passed, detail)
}

fn c9(reports: &[(&RunReport, Duration)]) -> Outcome {
    let mut parts = Vec::new();
    let mut passed = true;
    for (r, d) in reports {
        let ok = r.passed() && within(*d, 10);
        passed &= ok;
        let n = r.assertions.len();
        parts.push(format!("{} {} ({} assertions, {d:.2?})", r.scenario, if ok { "ok" } else { "failed" }, n));
        for f in r.failures().iter().take(3) {
            parts.push(format!("  {f}"));
        }
    }
    outcome(passed, parts.join(", "))
}

fn c10() -> Outcome {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("runtime");
    let report = rt.block_on(route_audit());
    let mut detail = format!("{} routes, {} probes, {} violations", report.routes, report.probes, report.violations.len());
    if let Some(v) = report.violations.first() {
        detail.push_str(&format!("; first: {v}"));
    }
    outcome(report.passed(), detail)
}

fn main() {
    let mut info = Vec::new();
    let (academic, academic_t) = timed(|| run(&load("academic")).expect("academic runs"));
    let (medical, medical_t) = timed(|| run(&load("medical")).expect("medical runs"));
    let randoms: Vec<System> = (0..100u64).map(|s| random_system(1000 + s, 60)).collect();

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "ownership exclusion", c1(&academic, academic_t)));
    let (o2, search_trace) = c2();
    results.push((2, "searchability preservation", o2));
    results.push((3, "tumble anonymity calibration", c3(&mut info)));
    results.push((4, "directory-claim semantics", c4()));
    results.push((5, "replay determinism", c5(&randoms)));
    results.push((6, "replication convergence", c6()));
    let traces = [("academic", &academic.trace), ("medical", &medical.trace), ("searchability", &search_trace)];
    results.push((7, "de-identification scan", c7(&traces, &randoms)));
    results.push((8, "strong-ownership atomicity", c8()));
    results.push((9, "end-to-end narratives", c9(&[(&academic, academic_t), (&medical, medical_t)])));
    results.push((10, "complete mediation", c10()));

    for (n, name, o) in &results {
        println!("criterion {n:>2} {name}: {} | {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    for line in info {
        println!("info linkage {line}");
    }
    let failed = results.iter().filter(|(_, _, o)| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
