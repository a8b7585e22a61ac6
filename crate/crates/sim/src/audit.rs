//! Machine checks of the cross-module invariants over a finished trace.
//! Each check reports the trace indices of its counterexamples.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ownlink_core::canonical::sha256;
use ownlink_core::ledger::{Ledger, LogEntry};
use ownlink_core::protocol::{OwnershipState, ResolutionOutcome, SystemConfig};
use ownlink_core::record_store::{CustodianNode, RecordOp, StoreRules};
use ownlink_core::trace::{SagaPhase, Trace, TraceEvent};
use ownlink_core::types::{Address, Hash32};
use ownlink_gateway::audit::mediation_violations;

pub const CHECKS: [&str; 7] = [
    "state_machine_soundness",
    "authorization_soundness",
    "ownership_exclusion",
    "searchability_preservation",
    "replay_determinism",
    "de_identification",
    "atomicity",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    /// Index of the offending trace record.
    pub step: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub counterexamples: Vec<Counterexample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: Vec<CheckResult>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn result(name: &str, counterexamples: Vec<Counterexample>) -> CheckResult {
    CheckResult { name: name.into(), passed: counterexamples.is_empty(), counterexamples }
}

fn cx(step: u64, detail: impl Into<String>) -> Counterexample {
    Counterexample { step, detail: detail.into() }
}

struct Genesis {
    config: Option<SystemConfig>,
    custodians: Vec<Address>,
}

fn genesis(trace: &Trace) -> Genesis {
    trace
        .records()
        .iter()
        .find_map(|r| match &r.event {
            TraceEvent::Genesis { config, custodians } => Some(Genesis {
                config: serde_json::from_value(config.clone()).ok(),
                custodians: custodians.clone(),
            }),
            _ => None,
        })
        .unwrap_or(Genesis { config: None, custodians: vec![] })
}

pub fn audit_trace(trace: &Trace) -> AuditReport {
    let g = genesis(trace);
    AuditReport {
        checks: vec![
            state_machine(trace),
            authorization(trace, &g),
            ownership_exclusion(trace),
            searchability(trace),
            replay_determinism(trace, &g),
            de_identification(trace, &g),
            atomicity(trace),
        ],
    }
}

fn state_machine(trace: &Trace) -> CheckResult {
    let mut current: BTreeMap<Address, OwnershipState> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.records() {
        match &r.event {
            TraceEvent::Transition { contract, from, to, cause } => {
                if current.get(contract).copied() != *from {
                    out.push(cx(r.index, format!("{contract}: transition claims {from:?} but last state was {:?}", current.get(contract))));
                }
                if !OwnershipState::transition_allowed(*from, *to) {
                    out.push(cx(r.index, format!("{contract}: {from:?} -> {to:?} via {cause} is not a permitted transition")));
                }
                current.insert(*contract, *to);
            }
            TraceEvent::FinalState { states, .. } => {
                for (c, s) in states {
                    if current.get(c) != Some(s) {
                        out.push(cx(r.index, format!("{c}: final state {s:?} was never reached by a logged transition")));
                    }
                }
            }
            _ => {}
        }
    }
    result(CHECKS[0], out)
}

fn ledger_entries(trace: &Trace) -> Vec<(u64, &LogEntry)> {
    trace
        .records()
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::LedgerTx { entry } => Some((r.index, entry)),
            _ => None,
        })
        .collect()
}

/// Every applied transaction must re-validate from genesis, and no plane
/// event may occur inside a gateway request that was not allowed.
fn authorization(trace: &Trace, g: &Genesis) -> CheckResult {
    let mut out = Vec::new();
    let mut ledger = Ledger::new(g.custodians.iter().copied());
    for (index, entry) in ledger_entries(trace) {
        if let Err(e) = ledger.apply_entry(entry) {
            out.push(cx(index, format!("ledger tx {} ({}) does not re-validate: {e}", entry.seq, entry.signed.tx.call.kind())));
            break;
        }
    }
    for v in mediation_violations(trace.events()) {
        let step = v.split_whitespace().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
        out.push(cx(step, v));
    }
    result(CHECKS[1], out)
}

/// No third party obtains identifying data for a revoked owner, nor for a
/// strong owner without an approving consent decision for that requester.
fn ownership_exclusion(trace: &Trace) -> CheckResult {
    let mut out = Vec::new();
    let mut last_approval: Option<Address> = None;
    let mut grants: BTreeSet<(Address, Address)> = BTreeSet::new();
    for r in trace.records() {
        match &r.event {
            TraceEvent::Consent { request, approved, .. } => {
                if *approved {
                    last_approval = Some(request.requester);
                } else {
                    last_approval = None;
                }
            }
            TraceEvent::Grant { contract, grantee, .. } => {
                grants.insert((*contract, *grantee));
            }
            TraceEvent::Resolution { requester, contract, via, state, outcome } => {
                let identified = matches!(outcome, ResolutionOutcome::Identified { .. });
                if identified {
                    match state {
                        Some(OwnershipState::ClaimedWeakRevoked) => {
                            let granted = contract.is_some_and(|c| grants.contains(&(c, *requester)));
                            if !(via == "entry_read" && granted) {
                                out.push(cx(r.index, format!("{requester} identified a revoked owner via {via}")));
                            }
                        }
                        Some(OwnershipState::ClaimedStrong) => {
                            let consented = match via.as_str() {
                                "consent" => true,
                                "contract" => last_approval == Some(*requester),
                                _ => false,
                            };
                            if !consented {
                                out.push(cx(r.index, format!("{requester} identified a strong owner via {via} without consent")));
                            }
                        }
                        _ => {}
                    }
                }
                last_approval = None;
            }
            _ => {}
        }
    }
    result(CHECKS[2], out)
}

/// Identical queries over identical record content must return identical
/// results, whatever ownership transitions happened in between.
fn searchability(trace: &Trace) -> CheckResult {
    let mut seen: BTreeMap<(String, String, u64, Hash32, usize), (u64, Vec<Address>, Hash32)> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.records() {
        if let TraceEvent::Query { node, name, params, whitelist_version, content_digest, result_addresses, projection_digest, .. } =
            &r.event
        {
            let key = (name.clone(), params.to_string(), *whitelist_version, *content_digest, *node);
            match seen.get(&key) {
                Some((first, addrs, proj)) => {
                    if addrs != result_addresses || proj != projection_digest {
                        out.push(cx(r.index, format!("query {name} differs from its first run at step {first}")));
                    }
                }
                None => {
                    seen.insert(key, (r.index, result_addresses.clone(), *projection_digest));
                }
            }
        }
    }
    result(CHECKS[3], out)
}

fn rules_from(g: &Genesis) -> Option<StoreRules> {
    let c = g.config.as_ref()?;
    Some(StoreRules {
        custodians: g.custodians.iter().copied().collect(),
        denylist: c.denylist(),
        schema_tags: c.record_schema_tags.clone(),
    })
}

/// Rebuilds ledger and record nodes from the trace alone and compares
/// their digests with the recorded final state.
fn replay_determinism(trace: &Trace, g: &Genesis) -> CheckResult {
    let mut out = Vec::new();
    let entries: Vec<&LogEntry> = ledger_entries(trace).into_iter().map(|(_, e)| e).collect();
    let ledger = Ledger::replay(g.custodians.iter().copied(), entries.iter().copied());
    let mut ops: BTreeMap<Hash32, RecordOp> = BTreeMap::new();
    let mut nodes: BTreeMap<usize, CustodianNode> = BTreeMap::new();
    let rules = rules_from(g);
    for r in trace.records() {
        match &r.event {
            TraceEvent::RecordOp { op, .. } => {
                ops.insert(op.digest(), op.clone());
            }
            TraceEvent::RecordDelivery { node, op_digest, outcome } => {
                let Some(rules) = &rules else { continue };
                let Some(op) = ops.get(op_digest) else {
                    out.push(cx(r.index, format!("delivery of unknown op {op_digest:?}")));
                    continue;
                };
                let n = nodes.entry(*node).or_insert_with(|| CustodianNode::new(node.to_string(), rules.clone()));
                let replayed = n.receive(op.clone());
                if replayed != *outcome {
                    out.push(cx(r.index, format!("node {node}: replay gave {replayed:?}, trace recorded {outcome:?}")));
                }
            }
            TraceEvent::RecordSnapshot { node, digest, .. } => {
                let empty = rules.as_ref().map(|rl| CustodianNode::new(node.to_string(), rl.clone()));
                let got = nodes.get(node).or(empty.as_ref()).map(|n| sha256(n.export_snapshot().as_bytes()));
                if got != Some(*digest) {
                    out.push(cx(r.index, format!("node {node} snapshot does not match its replayed log")));
                }
            }
            TraceEvent::FinalState { ledger_head, ledger_digest, .. } => match &ledger {
                Ok(l) => {
                    if l.head() != *ledger_head || sha256(l.canonical_state().as_bytes()) != *ledger_digest {
                        out.push(cx(r.index, "replayed ledger state differs from the final state"));
                    }
                }
                Err(e) => out.push(cx(r.index, format!("ledger log does not replay: {e}"))),
            },
            _ => {}
        }
    }
    result(CHECKS[4], out)
}

/// Collects every object key anywhere inside `v`.
pub fn object_keys(v: &Value, out: &mut BTreeSet<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                out.insert(k.clone());
                object_keys(x, out);
            }
        }
        Value::Array(a) => a.iter().for_each(|x| object_keys(x, out)),
        _ => {}
    }
}

/// Denylisted names that occur as keys in `text` (canonical JSON).
pub fn denylisted_keys(text: &str, denylist: &[String]) -> Vec<String> {
    let mut hits: BTreeSet<String> = BTreeSet::new();
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        let mut keys = BTreeSet::new();
        object_keys(&v, &mut keys);
        hits.extend(denylist.iter().filter(|d| keys.contains(*d)).cloned());
    }
    hits.extend(denylist.iter().filter(|d| text.contains(&format!("\"{d}\":"))).cloned());
    hits.into_iter().collect()
}

fn de_identification(trace: &Trace, g: &Genesis) -> CheckResult {
    let mut out = Vec::new();
    let Some(cfg) = &g.config else {
        return result(CHECKS[5], vec![cx(0, "no genesis config; denylist unknown")]);
    };
    let denylist = cfg.denylist();
    for r in trace.records() {
        let text = match &r.event {
            TraceEvent::RecordSnapshot { records, .. } => records.to_string(),
            TraceEvent::RecordOp { op, .. } => serde_json::to_string(op.payload()).expect("payload serializes"),
            _ => continue,
        };
        for hit in denylisted_keys(&text, &denylist) {
            out.push(cx(r.index, format!("record data contains identifying field {hit}")));
        }
    }
    result(CHECKS[5], out)
}

fn atomicity(trace: &Trace) -> CheckResult {
    let mut out = Vec::new();
    for r in trace.records() {
        if let TraceEvent::Saga { saga, saga_id, detail, .. } = &r.event {
            let (phase, obs) = match detail {
                SagaPhase::Committed { observation } => ("commit", observation),
                SagaPhase::RolledBack { observation, .. } => ("rollback", observation),
                SagaPhase::Crashed { observation, .. } => ("crash", observation),
                _ => continue,
            };
            if !obs.is_atomic() {
                out.push(cx(r.index, format!("{saga:?} #{saga_id} left a partial state after {phase}: {obs:?}")));
            }
        }
    }
    result(CHECKS[6], out)
}
