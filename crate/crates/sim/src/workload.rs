//! Seeded bulk workloads used by the property tests and the acceptance run.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use ownlink_core::canonical::to_canonical_string;
use ownlink_core::chaff::ChaffGenerator;
use ownlink_core::crypto::Keypair;
use ownlink_core::identity_store::Payload;
use ownlink_core::ledger::{Call, Ledger};
use ownlink_core::protocol::{
    derive_keypair, FaultMode, FaultPlan, OwnershipState, ResolutionOutcome, System, SystemConfig, CLAIM_STRONG_BOUNDARIES,
};
use ownlink_core::record_store::{CreateBody, CustodianNode, RecordOp, RecordPayload, StoreRules};
use ownlink_core::trace::{SagaKind, SagaPhase, Trace, TraceEvent};
use ownlink_core::types::{Address, EntryId, Hash32, RecordId};
use ownlink_core::vault::ConsentPolicy;
use ownlink_gateway::{Client, Gateway, Role};

use crate::audit::{audit_trace, denylisted_keys};

const FIRST: &[&str] = &["Alice", "Bongani", "Chen", "Dineo", "Emma", "Farid", "Grace", "Hugo", "Imani", "Jabu"];
const LAST: &[&str] = &["Mokoena", "Naidoo", "Smith", "Dlamini", "Botha", "Khumalo", "Pillay", "Nkosi"];
const COURSES: &[&str] = &["CS101", "CS201", "MAT101", "PHY110"];

/// A plausible identity payload. Names collide on purpose.
pub fn identity_payload(rng: &mut impl Rng, serial: usize) -> Payload {
    let mut p = Payload::new();
    p.insert("name".into(), format!("{} {}", FIRST.choose(rng).unwrap(), LAST.choose(rng).unwrap()));
    p.insert("student_number".into(), format!("S{serial:06}"));
    p.insert("date_of_birth".into(), format!("{}-{:02}-{:02}", rng.random_range(1980..2006), rng.random_range(1..13), rng.random_range(1..29)));
    if rng.random_bool(0.7) {
        p.insert("contact".into(), format!("user{serial}@example.org"));
    }
    p
}

fn mark_payload(rng: &mut impl Rng) -> RecordPayload {
    let mut p = RecordPayload::new();
    p.insert("course".into(), json!(COURSES.choose(rng).unwrap()));
    p.insert("mark".into(), json!(rng.random_range(30..100)));
    p.insert("year".into(), json!(rng.random_range(2020..2025)));
    p
}

fn owner_name(i: usize) -> String {
    format!("owner{i}")
}

/// Provisions the vault for owner `i` and returns its address.
fn owner_vault(sys: &mut System, seed: u64, i: usize) -> Address {
    let name = owner_name(i);
    let address = derive_keypair(seed, &name).address();
    if sys.vault(&address).is_none() {
        sys.provision_vault(address, &format!("{seed}:{name}")).expect("seed derives to the owner");
    }
    address
}

fn claim_weak(sys: &mut System, custodian: Address, contract: Address, owner: Address) -> Result<(), String> {
    let token = sys.issue_claim_token(custodian, contract, owner).map_err(|e| e.to_string())?;
    sys.claim_weak(owner, contract, &token).map_err(|e| e.to_string())
}

pub fn store_rules(config: &SystemConfig, custodians: &[Address]) -> StoreRules {
    StoreRules {
        custodians: custodians.iter().copied().collect(),
        denylist: config.denylist(),
        schema_tags: config.record_schema_tags.clone(),
    }
}

// ---------------------------------------------------------------------------
// tumble calibration

/// One custodian registers `users` people; each then claims and revokes
/// once with `k` decoys. Returns the finished trace.
pub fn tumble_trace(users: usize, k: usize, seed: u64) -> Trace {
    tumble_trace_with(users, k, seed, ChaffGenerator::Distributional)
}

/// `tumble_trace` with an explicit chaff generator.
pub fn tumble_trace_with(users: usize, k: usize, seed: u64, generator: ChaffGenerator) -> Trace {
    let mut config = SystemConfig::new(&["university"], seed);
    config.chaff_generator = generator;
    config.unique_key = Some("student_number".into());
    config.chaff_ratio = 0.5;
    let mut sys = System::new(config).expect("valid config");
    let custodian = sys.custodians()[0].address;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7475_6d62);
    let mut contracts = Vec::with_capacity(users);
    for i in 0..users {
        sys.set_time(i as u64 * 10);
        let r = sys.register_user(custodian, identity_payload(&mut rng, i), None).expect("registration succeeds");
        contracts.push(r.contract_address);
    }
    for (i, contract) in contracts.into_iter().enumerate() {
        sys.set_time(1_000_000 + i as u64 * 10);
        let owner = owner_vault(&mut sys, seed, i);
        claim_weak(&mut sys, custodian, contract, owner).expect("claim succeeds");
        sys.revoke_link(owner, contract, Some(k)).expect("enough chaff for the tumble");
    }
    sys.finalize();
    sys.into_trace()
}

// ---------------------------------------------------------------------------
// searchability

#[derive(Debug, Clone, Serialize)]
pub struct SearchabilityReport {
    pub users: usize,
    pub queries: usize,
    pub comparisons: usize,
    pub states_before: BTreeMap<String, usize>,
    pub states_mid: BTreeMap<String, usize>,
    pub states_after: BTreeMap<String, usize>,
    pub mismatches: Vec<String>,
}

struct GatewayHarness {
    gw: Gateway,
    clients: BTreeMap<String, Client>,
}

impl GatewayHarness {
    fn new(config: SystemConfig) -> Self {
        let seed = config.seed;
        let admin = Client::new(derive_keypair(seed, "admin"));
        let names = config.custodians.clone();
        let gw = Gateway::new(config, admin.public_key()).expect("valid config");
        let mut clients: BTreeMap<String, Client> =
            names.iter().map(|n| (n.clone(), Client::new(derive_keypair(seed, n)))).collect();
        clients.insert("admin".into(), admin);
        Self { gw, clients }
    }

    fn add(&mut self, name: &str, role: Role) -> Address {
        let seed = self.gw.system().config().seed;
        let c = Client::new(derive_keypair(seed, name));
        let address = c.address();
        let pk = c.public_key();
        self.clients.insert(name.into(), c);
        self.call("admin", "admin/register_principal", json!({"public_key": pk, "role": role, "name": name}));
        if role == Role::DataOwner {
            self.call(name, "vault/create_identity", json!({"seed": format!("{seed}:{name}")}));
        }
        address
    }

    fn try_call(&mut self, who: &str, op: &str, params: Value) -> Result<Value, Value> {
        let env = self.clients.get_mut(who).expect("known client").envelope(op, params);
        let r = self.gw.handle(&env);
        if r.ok {
            Ok(r.body)
        } else {
            Err(r.body)
        }
    }

    fn call(&mut self, who: &str, op: &str, params: Value) -> Value {
        self.try_call(who, op, params.clone()).unwrap_or_else(|e| panic!("{who} {op} {params} failed: {e}"))
    }
}

fn state_counts(sys: &System) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in sys.states().values() {
        *out.entry(s.as_str().to_string()).or_insert(0) += 1;
    }
    out
}

/// Registers `users` people with marks, runs every whitelisted query, moves
/// the population through all ownership states in two batches and re-runs
/// the queries after each batch. Everything goes through the gateway.
pub fn searchability_workload(users: usize, seed: u64) -> (SearchabilityReport, Trace) {
    let mut config = SystemConfig::new(&["university"], seed);
    config.unique_key = Some("student_number".into());
    config.chaff_ratio = 0.3;
    config.k_default = 2;
    let mut h = GatewayHarness::new(config);
    let tp = "employer";
    h.add(tp, Role::ThirdParty);
    let tp_address = derive_keypair(seed, tp).address();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7365_6172);

    let docs = [
        json!({"name": "course_pass", "schema_tag": "mark", "params": {"course": "string", "min": "number"},
               "predicate": {"op": "and", "clauses": [
                   {"op": "cmp", "field": "course", "cmp": "eq", "value": {"param": "course"}},
                   {"op": "cmp", "field": "mark", "cmp": "ge", "value": {"param": "min"}}]},
               "projection": ["course", "mark"]}),
        json!({"name": "top_students", "schema_tag": "mark", "params": {"p": "number"},
               "predicate": {"op": "all"}, "projection": ["mark"],
               "aggregation": {"kind": "top_percentile", "field": "mark", "percent": {"param": "p"}}}),
        json!({"name": "year_cohort", "schema_tag": "mark", "params": {"year": "number"},
               "predicate": {"op": "cmp", "field": "year", "cmp": "eq", "value": {"param": "year"}},
               "projection": ["year", "course"]}),
        json!({"name": "mean_mark", "schema_tag": "mark", "params": {"course": "string"},
               "predicate": {"op": "cmp", "field": "course", "cmp": "eq", "value": {"param": "course"}},
               "aggregation": {"kind": "mean", "field": "mark"}}),
    ];
    for d in docs {
        h.call("university", "record/manage_whitelist", json!({"action": "add", "document": d}));
    }
    let mut runs: Vec<(String, Value)> = Vec::new();
    for c in COURSES {
        for m in [50, 75] {
            runs.push(("course_pass".into(), json!({"course": c, "min": m})));
        }
        runs.push(("mean_mark".into(), json!({"course": c})));
    }
    for p in [1, 10, 25] {
        runs.push(("top_students".into(), json!({"p": p})));
    }
    for y in 2020..2025 {
        runs.push(("year_cohort".into(), json!({"year": y})));
    }

    let mut contracts = Vec::with_capacity(users);
    for i in 0..users {
        h.gw.advance_time(i as u64);
        let body = h.call("university", "protocol/register_user", json!({"payload": identity_payload(&mut rng, i)}));
        let contract: Address = serde_json::from_value(body["contract_address"].clone()).expect("address");
        for _ in 0..rng.random_range(1..3) {
            h.call(
                "university",
                "record/create_record",
                json!({"contract_address": contract, "schema_tag": "mark", "payload": mark_payload(&mut rng)}),
            );
        }
        contracts.push(contract);
    }
    h.gw.converge();

    let run_all = |h: &mut GatewayHarness| -> Vec<Value> {
        runs.iter()
            .map(|(name, params)| {
                let mut out = h.call(tp, "record/query", json!({"query_name": name, "params": params}));
                // compare address sets, not row order
                let mut addrs: Vec<Value> = out["rows"].as_array().into_iter().flatten().map(|r| r["contract_address"].clone()).collect();
                addrs.sort_by_key(|a| a.to_string());
                addrs.dedup();
                out["addresses"] = Value::Array(addrs);
                out
            })
            .collect()
    };
    let baseline = run_all(&mut h);
    let states_before = state_counts(h.gw.system());

    // batch one: a quarter each stay held, weak-linked, weak-revoked, strong
    let mut owners = BTreeMap::new();
    for (i, contract) in contracts.iter().enumerate() {
        if i % 4 == 0 {
            continue;
        }
        h.gw.advance_time(1_000_000 + i as u64);
        let name = owner_name(i);
        let owner = h.add(&name, Role::DataOwner);
        owners.insert(i, name.clone());
        let token = h.call("university", "protocol/issue_claim_token", json!({"contract": contract, "new_owner": owner}));
        h.call(&name, "protocol/claim_weak", json!({"contract": contract, "token": token}));
        match i % 4 {
            2 => {
                h.call(&name, "protocol/revoke_link", json!({"contract": contract}));
            }
            3 => {
                h.call(&name, "protocol/claim_strong", json!({"contract": contract}));
            }
            _ => {}
        }
    }
    let after_one = run_all(&mut h);
    let states_mid = state_counts(h.gw.system());

    // batch two: linked users revoke or go strong, revoked users relink
    for (i, contract) in contracts.iter().enumerate() {
        let Some(name) = owners.get(&i).cloned() else { continue };
        h.gw.advance_time(2_000_000 + i as u64);
        match (i % 4, i % 8 < 4) {
            (1, true) => {
                h.call(&name, "protocol/revoke_link", json!({"contract": contract}));
            }
            (1, false) => {
                h.call(&name, "protocol/claim_strong", json!({"contract": contract}));
            }
            (2, _) => {
                h.call(&name, "protocol/grant_access", json!({"contract": contract, "grantee": tp_address, "republish": true}));
            }
            _ => {}
        }
    }
    let after_two = run_all(&mut h);

    let mut mismatches = Vec::new();
    for (label, results) in [("after batch one", &after_one), ("after batch two", &after_two)] {
        for ((name, params), (before, now)) in runs.iter().zip(baseline.iter().zip(results.iter())) {
            if before != now {
                mismatches.push(format!("{name} {params} changed {label}"));
            }
        }
    }
    let report = SearchabilityReport {
        users,
        queries: runs.len(),
        comparisons: runs.len() * 2,
        states_before,
        states_mid,
        states_after: state_counts(h.gw.system()),
        mismatches,
    };
    h.gw.finalize();
    (report, h.gw.into_trace())
}

// ---------------------------------------------------------------------------
// random operation sequences

#[derive(Debug, Clone, Default, Serialize)]
pub struct SequenceOutcome {
    pub ops: usize,
    pub succeeded: usize,
    pub claims_checked: usize,
    pub violations: Vec<String>,
}

struct RandomRun {
    sys: System,
    seed: u64,
    rng: ChaCha8Rng,
    tp: Address,
    users: Vec<(Address, usize)>,
    records: Vec<(RecordId, usize)>,
    published: BTreeMap<Address, BTreeSet<EntryId>>,
    scanned: usize,
    serial: usize,
    out: SequenceOutcome,
}

impl RandomRun {
    fn new(seed: u64) -> Self {
        let mut config = SystemConfig::new(&["c0", "c1"], seed);
        config.unique_key = Some("student_number".into());
        config.chaff_ratio = 0.6;
        config.k_default = 2;
        config.network.max_delay_ms = 20;
        config.network.reorder_probability = 0.3;
        let mut sys = System::new(config).expect("valid config");
        let tp = derive_keypair(seed, "tp").address();
        sys.register_third_party(tp);
        Self {
            sys,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tp,
            users: vec![],
            records: vec![],
            published: BTreeMap::new(),
            scanned: 0,
            serial: 0,
            out: SequenceOutcome::default(),
        }
    }

    fn custodian(&self, i: usize) -> Address {
        self.sys.custodians()[i].address
    }

    fn scan_ledger(&mut self) {
        let log = self.sys.ledger().log();
        for e in &log[self.scanned..] {
            if let Call::DirectoryPut { entry_id, contract } = &e.signed.tx.call {
                self.published.entry(*contract).or_default().insert(*entry_id);
            }
        }
        self.scanned = log.len();
    }

    fn check_claim(&mut self, contract: Address, how: &str) {
        self.out.claims_checked += 1;
        for id in self.published.get(&contract).into_iter().flatten() {
            if let Some(mapped) = self.sys.ledger().directory_lookup(id) {
                self.out.violations.push(format!("after {how} of {contract}, published id {id} still maps to {mapped}"));
            }
        }
    }

    fn step(&mut self) {
        let now = self.sys.now() + self.rng.random_range(1..15);
        self.sys.set_time(now);
        let pick_user = |r: &mut Self| -> Option<(usize, Address, usize)> {
            if r.users.is_empty() {
                return None;
            }
            let i = r.rng.random_range(0..r.users.len());
            Some((i, r.users[i].0, r.users[i].1))
        };
        let op = if self.users.is_empty() { 0 } else { self.rng.random_range(0..14) };
        let ok = match op {
            0 | 1 => {
                let ci = self.rng.random_range(0..2);
                let serial = self.serial;
                self.serial += 1;
                let payload = identity_payload(&mut self.rng, serial);
                let custodian = self.custodian(ci);
                match self.sys.register_user(custodian, payload, None) {
                    Ok(r) => {
                        self.users.push((r.contract_address, ci));
                        true
                    }
                    Err(_) => false,
                }
            }
            2 => {
                let Some((i, contract, ci)) = pick_user(self) else { return };
                let owner = owner_vault(&mut self.sys, self.seed, i);
                let custodian = self.custodian(ci);
                let ok = claim_weak(&mut self.sys, custodian, contract, owner).is_ok();
                if ok {
                    self.scan_ledger();
                    self.check_claim(contract, "claim_weak");
                }
                ok
            }
            3 => {
                let Some((i, contract, _)) = pick_user(self) else { return };
                let owner = derive_keypair(self.seed, &owner_name(i)).address();
                let k = self.rng.random_range(0..3);
                self.sys.revoke_link(owner, contract, Some(k)).is_ok()
            }
            4 => {
                let Some((i, contract, _)) = pick_user(self) else { return };
                let owner = derive_keypair(self.seed, &owner_name(i)).address();
                let republish = self.rng.random_bool(0.7);
                self.sys.grant_access(owner, contract, self.tp, republish).is_ok()
            }
            5 => {
                let Some((i, contract, _)) = pick_user(self) else { return };
                let owner = derive_keypair(self.seed, &owner_name(i)).address();
                let ok = self.sys.claim_strong(owner, contract).is_ok();
                if ok {
                    self.scan_ledger();
                    self.check_claim(contract, "claim_strong");
                }
                ok
            }
            6 => {
                let Some((_, contract, ci)) = pick_user(self) else { return };
                let k = self.rng.random_range(0..3);
                self.sys.custodian_rekey(self.custodian(ci), contract, Some(k)).is_ok()
            }
            7 => {
                let Some((_, contract, ci)) = pick_user(self) else { return };
                let serial = self.serial;
                self.serial += 1;
                let payload = identity_payload(&mut self.rng, serial);
                self.sys.update_identity(self.custodian(ci), contract, payload).is_ok()
            }
            8 => {
                let ci = self.rng.random_range(0..2);
                let k = self.rng.random_range(1..3);
                self.sys.chaff_tumble(self.custodian(ci), k).is_ok()
            }
            9 | 10 => {
                let Some((_, contract, _)) = pick_user(self) else { return };
                let ci = self.rng.random_range(0..2);
                let links: Vec<RecordId> = if !self.records.is_empty() && self.rng.random_bool(0.3) {
                    vec![self.records[self.rng.random_range(0..self.records.len())].0]
                } else {
                    vec![]
                };
                let payload = mark_payload(&mut self.rng);
                match self.sys.create_record(self.custodian(ci), contract, "mark", payload, links) {
                    Ok(id) => {
                        self.records.push((id, ci));
                        true
                    }
                    Err(_) => false,
                }
            }
            11 => {
                if self.records.is_empty() {
                    return;
                }
                let (id, ci) = self.records[self.rng.random_range(0..self.records.len())];
                let payload = mark_payload(&mut self.rng);
                self.sys.append_record(self.custodian(ci), id, payload).is_ok()
            }
            12 => {
                let Some((_, contract, _)) = pick_user(self) else { return };
                self.sys.resolve_identity(self.tp, contract, "audit", &[]).is_ok()
            }
            _ => {
                let Some((i, contract, _)) = pick_user(self) else { return };
                let owner = derive_keypair(self.seed, &owner_name(i)).address();
                let flag = self.rng.random_bool(0.5);
                self.sys.set_access_flag(owner, contract, flag).is_ok()
            }
        };
        self.out.ops += 1;
        self.out.succeeded += ok as usize;
        self.scan_ledger();
    }
}

/// Runs `len` random operations. After every successful claim, every id
/// ever published in the directory for that contract must map to nothing.
pub fn random_sequence(seed: u64, len: usize) -> SequenceOutcome {
    let mut r = RandomRun::new(seed);
    for _ in 0..len {
        r.step();
    }
    r.out
}

/// A random run to completion, returning the system for export checks.
pub fn random_system(seed: u64, len: usize) -> System {
    let mut r = RandomRun::new(seed);
    for _ in 0..len {
        r.step();
    }
    r.sys.converge();
    r.sys.finalize();
    r.sys
}

// ---------------------------------------------------------------------------
// replay determinism

/// Replays the exported ledger and each node's exported log from scratch
/// and compares canonical state byte for byte.
pub fn replay_mismatches(sys: &System) -> Vec<String> {
    let mut out = Vec::new();
    let custodians: Vec<Address> = sys.custodians().iter().map(|c| c.address).collect();
    match Ledger::replay_ndjson(custodians.iter().copied(), &sys.ledger().export_ndjson()) {
        Ok(l) if l.canonical_state() == sys.ledger().canonical_state() => {}
        Ok(_) => out.push("replayed ledger state differs".into()),
        Err(e) => out.push(format!("ledger export does not replay: {e}")),
    }
    let rules = store_rules(sys.config(), &custodians);
    for (i, node) in sys.cluster().nodes().iter().enumerate() {
        let ops: Result<Vec<RecordOp>, _> =
            node.export_log().lines().filter(|l| !l.is_empty()).map(serde_json::from_str).collect();
        match ops {
            Ok(ops) => {
                let rebuilt = CustodianNode::from_log(node.node_id(), rules.clone(), ops);
                if rebuilt.export_snapshot() != node.export_snapshot() {
                    out.push(format!("node {i} rebuilt from its log differs"));
                }
            }
            Err(e) => out.push(format!("node {i} log does not parse: {e}")),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// replication convergence

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceTrial {
    pub ops: usize,
    pub deliveries: usize,
    pub distinct_snapshots: usize,
    pub records: usize,
    pub dropped_per_node: u64,
}

/// Builds `n_ops` signed record ops from three custodians (creates,
/// appends, same-timestamp appends, duplicates and tampered copies), then
/// feeds them to three fresh nodes in `orders` different orders each.
pub fn convergence_trial(seed: u64, n_ops: usize, orders: usize) -> ConvergenceTrial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<Keypair> = (0..3).map(|i| derive_keypair(seed, &format!("node{i}"))).collect();
    let config = SystemConfig::new(&["node0", "node1", "node2"], seed);
    let rules = store_rules(&config, &keys.iter().map(Keypair::address).collect::<Vec<_>>());

    let mut ops: Vec<RecordOp> = Vec::with_capacity(n_ops);
    let mut created: Vec<RecordId> = Vec::new();
    while ops.len() < n_ops {
        let key = &keys[rng.random_range(0..3)];
        let roll = rng.random_range(0..100);
        let ts = rng.random_range(0..50);
        let op = if created.is_empty() || roll < 35 {
            let mut contract = [0u8; 32];
            rng.fill(&mut contract);
            let links = if !created.is_empty() && rng.random_bool(0.2) { vec![*created.choose(&mut rng).unwrap()] } else { vec![] };
            let op = RecordOp::create(
                key,
                CreateBody {
                    contract_address: Address(Hash32(contract)),
                    links,
                    schema_tag: "mark".into(),
                    payload: mark_payload(&mut rng),
                    creator: key.address(),
                    logical_ts: ts,
                },
            );
            created.push(op.record_id());
            op
        } else if roll < 75 {
            RecordOp::append(key, *created.choose(&mut rng).unwrap(), mark_payload(&mut rng), ts)
        } else if roll < 85 {
            // concurrent appends from two custodians with one timestamp
            let id = *created.choose(&mut rng).unwrap();
            let other = &keys[(rng.random_range(1..3) + keys.iter().position(|k| k.address() == key.address()).unwrap()) % 3];
            ops.push(RecordOp::append(other, id, mark_payload(&mut rng), ts));
            RecordOp::append(key, id, mark_payload(&mut rng), ts)
        } else if roll < 93 {
            ops.choose(&mut rng).unwrap().clone()
        } else {
            let mut bad = ops.choose(&mut rng).unwrap().clone();
            match &mut bad {
                RecordOp::Create { payload, .. } | RecordOp::Append { payload, .. } => {
                    payload.insert("mark".into(), json!(100));
                }
            }
            bad
        };
        ops.push(op);
    }
    ops.truncate(n_ops);

    let mut snapshots = BTreeSet::new();
    let mut deliveries = 0;
    let mut records = 0;
    let mut dropped = 0;
    for _ in 0..orders {
        for n in 0..3 {
            let mut order = ops.clone();
            order.shuffle(&mut rng);
            let mut node = CustodianNode::new(format!("node{n}"), rules.clone());
            for op in order {
                node.receive(op);
                deliveries += 1;
            }
            records = node.records().count();
            dropped = node.dropped();
            snapshots.insert(node.export_snapshot());
        }
    }
    ConvergenceTrial { ops: n_ops, deliveries, distinct_snapshots: snapshots.len(), records, dropped_per_node: dropped }
}

// ---------------------------------------------------------------------------
// de-identification

/// Denylisted field names found in record snapshots or record ops.
pub fn deidentification_hits(trace: &Trace, denylist: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for r in trace.records() {
        let text = match &r.event {
            TraceEvent::RecordSnapshot { records, .. } => to_canonical_string(records),
            TraceEvent::RecordOp { op, .. } => to_canonical_string(op),
            _ => continue,
        };
        for hit in denylisted_keys(&text, denylist) {
            out.push(format!("event {}: {hit}", r.index));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// strong-ownership atomicity

#[derive(Debug, Clone, Default, Serialize)]
pub struct AtomicityReport {
    pub boundaries: usize,
    pub trials: usize,
    pub rolled_back: usize,
    pub retried_ok: usize,
    pub violations: Vec<String>,
    /// Crash-mode runs whose partial state the trace audit flagged.
    pub crashes_detected: usize,
    pub crashes_partial: usize,
}

/// For every claim_strong boundary, `trials` users each have the saga
/// interrupted there, are checked for full restoration, then retry.
pub fn atomicity_trials(trials: usize, seed: u64) -> AtomicityReport {
    let mut report = AtomicityReport { boundaries: CLAIM_STRONG_BOUNDARIES, ..Default::default() };
    for boundary in 0..CLAIM_STRONG_BOUNDARIES {
        let mut config = SystemConfig::new(&["hospital"], seed + boundary as u64);
        config.chaff_ratio = 0.2;
        let mut sys = System::new(config).expect("valid config");
        let custodian = sys.custodians()[0].address;
        let tp = derive_keypair(seed, "doctor").address();
        sys.register_third_party(tp);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ boundary as u64);
        for i in 0..trials {
            report.trials += 1;
            sys.set_time(sys.now() + 10);
            let payload = identity_payload(&mut rng, i);
            let reg = sys.register_user(custodian, payload.clone(), None).expect("register");
            let contract = reg.contract_address;
            let owner = owner_vault(&mut sys, seed, i);
            sys.set_vault_policy(owner, ConsentPolicy::AlwaysApprove).expect("vault");
            claim_weak(&mut sys, custodian, contract, owner).expect("claim");
            let before_contract = sys.ledger().read_contract(&contract).expect("contract").clone();
            let before_directory = sys.ledger().directory().clone();

            sys.set_fault(Some(FaultPlan { saga: SagaKind::ClaimStrong, boundary, mode: FaultMode::Recover }));
            if sys.claim_strong(owner, contract).is_ok() {
                report.violations.push(format!("boundary {boundary} trial {i}: faulted claim reported success"));
                continue;
            }
            report.rolled_back += 1;
            let in_store = sys.store(0).expect("store").contains(&reg.entry_id);
            let in_vault = sys.vault(&owner).is_some_and(|v| v.holds(&payload));
            if in_store == in_vault {
                report.violations.push(format!("boundary {boundary} trial {i}: in_store={in_store} in_vault={in_vault}"));
            }
            if !in_store {
                report.violations.push(format!("boundary {boundary} trial {i}: payload not restored to the store"));
            }
            if sys.ledger().read_contract(&contract).expect("contract") != &before_contract {
                report.violations.push(format!("boundary {boundary} trial {i}: contract not restored"));
            }
            if sys.ledger().directory() != &before_directory {
                report.violations.push(format!("boundary {boundary} trial {i}: directory not restored"));
            }
            if sys.state_of(&contract) != Some(OwnershipState::ClaimedWeakLinked) {
                report.violations.push(format!("boundary {boundary} trial {i}: state {:?}", sys.state_of(&contract)));
            }
            match sys.resolve_identity(tp, contract, "treatment", &[]) {
                Ok(ResolutionOutcome::Identified { payload: p }) if p == payload => {}
                other => report.violations.push(format!("boundary {boundary} trial {i}: resolution after rollback {other:?}")),
            }

            match sys.claim_strong(owner, contract) {
                Ok(()) => {
                    let in_store = sys.store(0).expect("store").contains(&reg.entry_id);
                    let in_vault = sys.vault(&owner).is_some_and(|v| v.holds(&payload));
                    if in_store || !in_vault {
                        report.violations.push(format!("boundary {boundary} trial {i}: retry left in_store={in_store} in_vault={in_vault}"));
                    } else {
                        report.retried_ok += 1;
                    }
                }
                Err(e) => report.violations.push(format!("boundary {boundary} trial {i}: retry failed: {e}")),
            }
        }
        sys.finalize();
        let audit = audit_trace(sys.trace());
        if let Some(c) = audit.checks.iter().find(|c| !c.passed) {
            report.violations.push(format!("boundary {boundary}: audit {} failed: {:?}", c.name, c.counterexamples.first()));
        }
    }
    // a crash leaves the partial state in place; the audit must notice
    for boundary in 0..CLAIM_STRONG_BOUNDARIES {
        let mut config = SystemConfig::new(&["hospital"], seed);
        config.chaff_ratio = 0.2;
        let mut sys = System::new(config).expect("valid config");
        let custodian = sys.custodians()[0].address;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reg = sys.register_user(custodian, identity_payload(&mut rng, 0), None).expect("register");
        let owner = owner_vault(&mut sys, seed, 0);
        claim_weak(&mut sys, custodian, reg.contract_address, owner).expect("claim");
        sys.set_fault(Some(FaultPlan { saga: SagaKind::ClaimStrong, boundary, mode: FaultMode::Crash }));
        let _ = sys.claim_strong(owner, reg.contract_address);
        let partial = sys.trace().events().any(|e| {
            matches!(e, TraceEvent::Saga { detail: SagaPhase::Crashed { observation, .. }, .. } if !observation.is_atomic())
        });
        sys.finalize();
        let audit = audit_trace(sys.trace());
        if partial {
            report.crashes_partial += 1;
            if !audit.check("atomicity").is_some_and(|c| c.passed) {
                report.crashes_detected += 1;
            }
        }
    }
    report
}
