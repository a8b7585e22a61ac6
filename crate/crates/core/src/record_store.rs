//! Replicated, append-only store of de-identified records.
//!
//! Each custodian hosts a [`CustodianNode`]. Writes are signed ops that the
//! origin node applies and then broadcasts; every node validates and folds
//! the ops it receives. Version order inside a record is fixed by
//! `(logical_ts, creator, payload digest)`, so the folded state does not
//! depend on delivery order.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::{digest_of, to_canonical_bytes, to_canonical_string};
use crate::crypto::{Keypair, PublicKey, Signature};
use crate::query::{QueryDocument, QueryError};
use crate::types::{Address, Hash32, Millis, RecordId};

/// Payload of one record version.
pub type RecordPayload = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("identifying field {0} is not allowed in records")]
    IdentifyingField(String),
    #[error("link to unknown record {0}")]
    DanglingLink(RecordId),
    #[error("{0} is not a consortium custodian")]
    NotCustodian(Address),
    #[error("unknown record {0}")]
    NotFound(RecordId),
    #[error("unknown schema tag {0}")]
    UnknownSchemaTag(String),
    #[error("unknown contract {0}")]
    UnknownContract(Address),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("unknown node {0}")]
    UnknownNode(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateBody {
    pub contract_address: Address,
    pub links: Vec<RecordId>,
    pub schema_tag: String,
    pub payload: RecordPayload,
    pub creator: Address,
    pub logical_ts: Millis,
}

impl CreateBody {
    pub fn record_id(&self) -> RecordId {
        RecordId(digest_of(self))
    }
}

/// A replicated write, as carried on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op_kind", rename_all = "snake_case")]
pub enum RecordOp {
    Create {
        record_id: RecordId,
        contract_address: Address,
        links: Vec<RecordId>,
        schema_tag: String,
        payload: RecordPayload,
        creator: Address,
        creator_key: PublicKey,
        logical_ts: Millis,
        signature: Signature,
    },
    Append {
        record_id: RecordId,
        payload: RecordPayload,
        creator: Address,
        creator_key: PublicKey,
        logical_ts: Millis,
        signature: Signature,
    },
}

#[derive(Serialize)]
struct VersionSigningBytes<'a> {
    record_id: &'a RecordId,
    logical_ts: Millis,
    creator: &'a Address,
    payload: &'a RecordPayload,
}

fn version_signing_bytes(record_id: &RecordId, logical_ts: Millis, creator: &Address, payload: &RecordPayload) -> Vec<u8> {
    to_canonical_bytes(&VersionSigningBytes { record_id, logical_ts, creator, payload })
}

impl RecordOp {
    pub fn create(keypair: &Keypair, body: CreateBody) -> Self {
        let record_id = body.record_id();
        let signature = keypair.sign(&version_signing_bytes(&record_id, body.logical_ts, &body.creator, &body.payload));
        RecordOp::Create {
            record_id,
            contract_address: body.contract_address,
            links: body.links,
            schema_tag: body.schema_tag,
            payload: body.payload,
            creator: body.creator,
            creator_key: keypair.public_key(),
            logical_ts: body.logical_ts,
            signature,
        }
    }

    pub fn append(keypair: &Keypair, record_id: RecordId, payload: RecordPayload, logical_ts: Millis) -> Self {
        let creator = keypair.address();
        let signature = keypair.sign(&version_signing_bytes(&record_id, logical_ts, &creator, &payload));
        RecordOp::Append { record_id, payload, creator, creator_key: keypair.public_key(), logical_ts, signature }
    }

    pub fn record_id(&self) -> RecordId {
        match self {
            RecordOp::Create { record_id, .. } | RecordOp::Append { record_id, .. } => *record_id,
        }
    }

    pub fn payload(&self) -> &RecordPayload {
        match self {
            RecordOp::Create { payload, .. } | RecordOp::Append { payload, .. } => payload,
        }
    }

    pub fn digest(&self) -> Hash32 {
        digest_of(self)
    }

    /// Checks the signature, the signer binding and (for creates) the
    /// content address.
    pub fn verify(&self) -> bool {
        match self {
            RecordOp::Create {
                record_id,
                contract_address,
                links,
                schema_tag,
                payload,
                creator,
                creator_key,
                logical_ts,
                signature,
            } => {
                let body = CreateBody {
                    contract_address: *contract_address,
                    links: links.clone(),
                    schema_tag: schema_tag.clone(),
                    payload: payload.clone(),
                    creator: *creator,
                    logical_ts: *logical_ts,
                };
                body.record_id() == *record_id
                    && creator_key.address() == *creator
                    && creator_key.verify(&version_signing_bytes(record_id, *logical_ts, creator, payload), signature)
            }
            RecordOp::Append { record_id, payload, creator, creator_key, logical_ts, signature } => {
                creator_key.address() == *creator
                    && creator_key.verify(&version_signing_bytes(record_id, *logical_ts, creator, payload), signature)
            }
        }
    }

    fn version(&self) -> Version {
        match self {
            RecordOp::Create { payload, creator, creator_key, logical_ts, signature, .. }
            | RecordOp::Append { payload, creator, creator_key, logical_ts, signature, .. } => Version {
                payload: payload.clone(),
                creator: *creator,
                creator_key: *creator_key,
                logical_ts: *logical_ts,
                signature: *signature,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Version {
    pub payload: RecordPayload,
    pub creator: Address,
    pub creator_key: PublicKey,
    pub logical_ts: Millis,
    pub signature: Signature,
}

impl Version {
    fn order_key(&self) -> (Millis, Address, Hash32) {
        (self.logical_ts, self.creator, digest_of(&self.payload))
    }

    pub fn verify(&self, record_id: &RecordId) -> bool {
        self.creator_key.address() == self.creator
            && self
                .creator_key
                .verify(&version_signing_bytes(record_id, self.logical_ts, &self.creator, &self.payload), &self.signature)
    }
}

/// A de-identified record. Everything but `versions` is fixed at creation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRecord {
    pub record_id: RecordId,
    pub contract_address: Address,
    pub links: Vec<RecordId>,
    pub schema_tag: String,
    pub creator: Address,
    pub versions: Vec<Version>,
}

impl DataRecord {
    pub fn latest(&self) -> &RecordPayload {
        &self.versions.last().expect("records always have a creation version").payload
    }
}

/// Rules every node enforces on incoming ops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreRules {
    pub custodians: BTreeSet<Address>,
    /// Identifying field names. Must never appear in record payloads.
    pub denylist: Vec<String>,
    pub schema_tags: Vec<String>,
}

impl StoreRules {
    pub fn scan_payload(&self, payload: &RecordPayload) -> Result<(), RecordError> {
        match payload.keys().find(|k| self.denylist.iter().any(|d| d == *k)) {
            Some(f) => Err(RecordError::IdentifyingField(f.clone())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    Applied,
    /// Append whose record has not arrived yet; applied once it does.
    Buffered,
    Duplicate,
    Dropped,
}

#[derive(Debug, Clone)]
pub struct CustodianNode {
    node_id: String,
    rules: StoreRules,
    log: Vec<RecordOp>,
    records: BTreeMap<RecordId, DataRecord>,
    pending: BTreeMap<RecordId, Vec<Version>>,
    seen: BTreeSet<Hash32>,
    dropped: u64,
}

impl CustodianNode {
    pub fn new(node_id: impl Into<String>, rules: StoreRules) -> Self {
        Self {
            node_id: node_id.into(),
            rules,
            log: Vec::new(),
            records: BTreeMap::new(),
            pending: BTreeMap::new(),
            seen: BTreeSet::new(),
            dropped: 0,
        }
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn log(&self) -> &[RecordOp] {
        &self.log
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn get(&self, id: &RecordId) -> Option<&DataRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &DataRecord> {
        self.records.values()
    }

    /// Number of ops folded into this node's state.
    pub fn applied_ops(&self) -> usize {
        self.log.len()
    }

    fn insert_version(record: &mut DataRecord, version: Version) {
        let key = version.order_key();
        let appends = &record.versions[1..];
        let pos = appends.partition_point(|v| v.order_key() < key);
        record.versions.insert(pos + 1, version);
    }

    /// Validates and folds one op.
    pub fn receive(&mut self, op: RecordOp) -> Delivery {
        let digest = op.digest();
        if self.seen.contains(&digest) {
            return Delivery::Duplicate;
        }
        let creator = match &op {
            RecordOp::Create { creator, .. } | RecordOp::Append { creator, .. } => *creator,
        };
        let valid = op.verify()
            && self.rules.custodians.contains(&creator)
            && self.rules.scan_payload(op.payload()).is_ok()
            && match &op {
                RecordOp::Create { schema_tag, .. } => self.rules.schema_tags.contains(schema_tag),
                RecordOp::Append { .. } => true,
            };
        if !valid {
            self.dropped += 1;
            return Delivery::Dropped;
        }
        self.seen.insert(digest);
        self.log.push(op.clone());
        self.fold(op)
    }

    fn fold(&mut self, op: RecordOp) -> Delivery {
        let version = op.version();
        match op {
            RecordOp::Create { record_id, contract_address, links, schema_tag, creator, .. } => {
                let mut record =
                    DataRecord { record_id, contract_address, links, schema_tag, creator, versions: vec![version] };
                for v in self.pending.remove(&record_id).unwrap_or_default() {
                    Self::insert_version(&mut record, v);
                }
                self.records.insert(record_id, record);
                Delivery::Applied
            }
            RecordOp::Append { record_id, .. } => match self.records.get_mut(&record_id) {
                Some(record) => {
                    Self::insert_version(record, version);
                    Delivery::Applied
                }
                None => {
                    self.pending.entry(record_id).or_default().push(version);
                    Delivery::Buffered
                }
            },
        }
    }

    /// Rebuilds a node by folding `log` in order.
    pub fn from_log(node_id: impl Into<String>, rules: StoreRules, log: impl IntoIterator<Item = RecordOp>) -> Self {
        let mut node = Self::new(node_id, rules);
        for op in log {
            node.receive(op);
        }
        node
    }

    /// Canonical JSON list of records in record-id order.
    pub fn export_snapshot(&self) -> String {
        let list: Vec<&DataRecord> = self.records.values().collect();
        to_canonical_string(&list)
    }

    /// The local log as newline-delimited canonical JSON ops.
    pub fn export_log(&self) -> String {
        let mut out = String::new();
        for op in &self.log {
            out.push_str(&to_canonical_string(op));
            out.push('\n');
        }
        out
    }

    pub fn reverse_lookup(&self, contract: &Address) -> Vec<DataRecord> {
        self.records.values().filter(|r| r.contract_address == *contract).cloned().collect()
    }

    /// Runs a whitelisted query over latest versions.
    pub fn query(
        &self,
        whitelist: &QueryWhitelist,
        name: &str,
        params: &BTreeMap<String, Value>,
    ) -> Result<QueryResult, RecordError> {
        let doc = whitelist.get(name).ok_or_else(|| QueryError::NotApproved(name.to_string()))?;
        doc.check_params(params)?;
        Ok(run_query(doc, self.records.values(), params))
    }
}

/// Evaluates `doc` over `records`. Rows come out ordered by
/// `(contract_address, record_id)`.
pub fn run_query<'a>(
    doc: &QueryDocument,
    records: impl Iterator<Item = &'a DataRecord>,
    params: &BTreeMap<String, Value>,
) -> QueryResult {
    let mut selected: Vec<&DataRecord> =
        records.filter(|r| doc.schema_tag.as_ref().is_none_or(|t| *t == r.schema_tag)).collect();
    selected.sort_by_key(|r| (r.contract_address, r.record_id));
    let candidates: Vec<(RecordId, &RecordPayload)> = selected.iter().map(|r| (r.record_id, r.latest())).collect();
    let (indices, aggregate) = doc.evaluate(&candidates, params);
    let rows = indices
        .into_iter()
        .map(|i| {
            let r = selected[i];
            let projection =
                doc.projection.iter().filter_map(|f| r.latest().get(f).map(|v| (f.clone(), v.clone()))).collect();
            QueryRow { contract_address: r.contract_address, projection }
        })
        .collect();
    QueryResult { rows, aggregate }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub contract_address: Address,
    pub projection: RecordPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub rows: Vec<QueryRow>,
    pub aggregate: Option<f64>,
}

impl QueryResult {
    pub fn contract_addresses(&self) -> BTreeSet<Address> {
        self.rows.iter().map(|r| r.contract_address).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhitelistAction {
    Add,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhitelistChange {
    pub version: u64,
    pub custodian: Address,
    pub action: WhitelistAction,
    pub document: QueryDocument,
}

/// Versioned set of approved queries with an append-only change history.
#[derive(Debug, Clone, Default)]
pub struct QueryWhitelist {
    active: BTreeMap<String, QueryDocument>,
    history: Vec<WhitelistChange>,
}

impl QueryWhitelist {
    pub fn version(&self) -> u64 {
        self.history.len() as u64
    }

    pub fn get(&self, name: &str) -> Option<&QueryDocument> {
        self.active.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.active.keys()
    }

    pub fn history(&self) -> &[WhitelistChange] {
        &self.history
    }

    pub fn apply(
        &mut self,
        custodian: Address,
        action: WhitelistAction,
        document: QueryDocument,
        denylist: &[String],
    ) -> Result<u64, QueryError> {
        match action {
            WhitelistAction::Add => {
                document.validate(denylist)?;
                self.active.insert(document.name.clone(), document.clone());
            }
            WhitelistAction::Remove => {
                if self.active.remove(&document.name).is_none() {
                    return Err(QueryError::NotApproved(document.name.clone()));
                }
            }
        }
        let version = self.version() + 1;
        self.history.push(WhitelistChange { version, custodian, action, document });
        Ok(version)
    }

    pub fn export_history(&self) -> String {
        to_canonical_string(&self.history)
    }
}

/// Seeded delay and reordering model for replication traffic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub min_delay_ms: Millis,
    pub max_delay_ms: Millis,
    pub reorder_probability: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self { min_delay_ms: 0, max_delay_ms: 0, reorder_probability: 0.0 }
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    to: usize,
    deliver_at: Millis,
    seq: u64,
    op: RecordOp,
}

/// The consortium: one node per custodian plus the messages between them.
#[derive(Debug, Clone)]
pub struct RecordCluster {
    nodes: Vec<CustodianNode>,
    in_flight: Vec<InFlight>,
    network: NetworkModel,
    rng: ChaCha20Rng,
    next_seq: u64,
}

impl RecordCluster {
    pub fn new(node_ids: &[String], rules: StoreRules, network: NetworkModel, seed: u64) -> Self {
        Self {
            nodes: node_ids.iter().map(|id| CustodianNode::new(id.clone(), rules.clone())).collect(),
            in_flight: Vec::new(),
            network,
            rng: ChaCha20Rng::seed_from_u64(seed),
            next_seq: 0,
        }
    }

    pub fn nodes(&self) -> &[CustodianNode] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> Result<&CustodianNode, RecordError> {
        self.nodes.get(index).ok_or(RecordError::UnknownNode(index))
    }

    pub fn pending_messages(&self) -> usize {
        self.in_flight.len()
    }

    /// Applies `op` at `origin` and queues it for every other node.
    /// Returns how the origin handled it.
    pub fn replicate(&mut self, origin: usize, op: RecordOp, now: Millis) -> Result<Delivery, RecordError> {
        let n = self.nodes.len();
        let node = self.nodes.get_mut(origin).ok_or(RecordError::UnknownNode(origin))?;
        let outcome = node.receive(op.clone());
        if matches!(outcome, Delivery::Dropped) {
            return Ok(outcome);
        }
        for to in (0..n).filter(|&i| i != origin) {
            let delay = if self.network.max_delay_ms > self.network.min_delay_ms {
                self.rng.random_range(self.network.min_delay_ms..=self.network.max_delay_ms)
            } else {
                self.network.min_delay_ms
            };
            self.next_seq += 1;
            self.in_flight.push(InFlight { to, deliver_at: now + delay, seq: self.next_seq, op: op.clone() });
        }
        Ok(outcome)
    }

    /// Injects an op directly into one node's inbox without the origin
    /// applying it (models a message forged or corrupted in transit).
    pub fn inject(&mut self, to: usize, op: RecordOp, now: Millis) {
        self.next_seq += 1;
        self.in_flight.push(InFlight { to, deliver_at: now, seq: self.next_seq, op });
    }

    /// Delivers every message due at or before `now`, with seeded reordering
    /// of adjacent deliveries.
    /// Returns `(node, op digest, outcome)` per delivery.
    pub fn deliver_due(&mut self, now: Millis) -> Vec<(usize, Hash32, Delivery)> {
        let (mut due, rest): (Vec<InFlight>, Vec<InFlight>) =
            std::mem::take(&mut self.in_flight).into_iter().partition(|m| m.deliver_at <= now);
        self.in_flight = rest;
        due.sort_by_key(|m| (m.deliver_at, m.seq));
        if self.network.reorder_probability > 0.0 {
            for i in 1..due.len() {
                if self.rng.random_bool(self.network.reorder_probability.min(1.0)) {
                    due.swap(i - 1, i);
                }
            }
        }
        due.into_iter()
            .map(|m| {
                let digest = m.op.digest();
                (m.to, digest, self.nodes[m.to].receive(m.op))
            })
            .collect()
    }

    /// Delivers everything outstanding.
    pub fn converge(&mut self) -> Vec<(usize, Hash32, Delivery)> {
        self.deliver_due(Millis::MAX)
    }

    pub fn is_converged(&self) -> bool {
        self.in_flight.is_empty() && self.nodes.windows(2).all(|w| w[0].export_snapshot() == w[1].export_snapshot())
    }
}
