//! Totally ordered event log of everything a system run did.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canonical::to_canonical_string;
use crate::identity_store::{FeedEvent, SnapshotEntry, TumbleReceipt};
use crate::ledger::{LogEntry, Rejection};
use crate::protocol::{OwnershipState, ResolutionOutcome};
use crate::record_store::{Delivery, RecordOp, WhitelistChange};
use crate::types::{Address, EntryId, Hash32, Millis};
use crate::vault::ConsentRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SagaKind {
    RegisterUser,
    ClaimStrong,
}

/// Which plane holds what after a saga ended. Used by the atomicity audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "saga", rename_all = "snake_case")]
pub enum SagaObservation {
    RegisterUser { entry_exists: bool, contract_linked: bool, directory_mapped: bool },
    ClaimStrong { in_store: bool, in_vault: bool, contract_points_to_vault: bool },
}

impl SagaObservation {
    /// All planes agree: the saga either fully happened or did not happen.
    pub fn is_atomic(&self) -> bool {
        match *self {
            SagaObservation::RegisterUser { entry_exists, contract_linked, directory_mapped } => {
                entry_exists == contract_linked && contract_linked == directory_mapped
            }
            SagaObservation::ClaimStrong { in_store, in_vault, contract_points_to_vault } => {
                in_store != in_vault && in_vault == contract_points_to_vault
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum SagaPhase {
    Begin,
    Step { name: String },
    Committed { observation: SagaObservation },
    RolledBack { boundary: usize, observation: SagaObservation },
    Crashed { boundary: usize, observation: SagaObservation },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Genesis {
        config: Value,
        custodians: Vec<Address>,
    },
    PrincipalRegistered {
        address: Address,
        role: String,
        name: String,
    },
    Request {
        envelope: Value,
    },
    Decision {
        principal: Address,
        role: Option<String>,
        route: String,
        allowed: bool,
    },
    Response {
        route: String,
        ok: bool,
        code: Option<String>,
        body: Value,
    },
    LedgerTx {
        entry: LogEntry,
    },
    LedgerRejected {
        rejection: Rejection,
    },
    StoreFeed {
        endpoint: String,
        feed_event: FeedEvent,
    },
    /// Private: delivered to the owner only. Never part of an adversary view.
    TumbleReceipt {
        endpoint: String,
        owner: Address,
        receipt: TumbleReceipt,
    },
    RecordOp {
        node: usize,
        op: RecordOp,
    },
    RecordDelivery {
        node: usize,
        op_digest: Hash32,
        outcome: Delivery,
    },
    Transition {
        contract: Address,
        from: Option<OwnershipState>,
        to: OwnershipState,
        cause: String,
    },
    Resolution {
        requester: Address,
        contract: Option<Address>,
        via: String,
        state: Option<OwnershipState>,
        outcome: ResolutionOutcome,
    },
    Consent {
        owner: Address,
        request: ConsentRequest,
        approved: bool,
        disclosed: Vec<String>,
    },
    Query {
        requester: Address,
        node: usize,
        name: String,
        params: Value,
        whitelist_version: u64,
        content_digest: Hash32,
        result_addresses: Vec<Address>,
        projection_digest: Hash32,
        aggregate: Option<f64>,
    },
    Whitelist {
        change: WhitelistChange,
    },
    Saga {
        saga: SagaKind,
        saga_id: u64,
        contract: Option<Address>,
        detail: SagaPhase,
    },
    Grant {
        owner: Address,
        contract: Address,
        grantee: Address,
        entry_id: EntryId,
        republished: bool,
    },
    Message {
        message_id: u64,
        to: Address,
        sender_role: String,
    },
    StoreSnapshot {
        endpoint: String,
        entries: BTreeMap<String, SnapshotEntry>,
    },
    RecordSnapshot {
        node: usize,
        digest: Hash32,
        records: Value,
    },
    FinalState {
        ledger_head: u64,
        ledger_digest: Hash32,
        node_digests: Vec<Hash32>,
        states: BTreeMap<Address, OwnershipState>,
    },
    Assertion {
        name: String,
        passed: bool,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: u64,
    pub time: Millis,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, time: Millis, event: TraceEvent) {
        let index = self.records.len() as u64;
        self.records.push(TraceRecord { index, time, event });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.records.iter().map(|r| &r.event)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn from_records(records: Vec<TraceRecord>) -> Self {
        Self { records }
    }

    pub fn into_records(self) -> Vec<TraceRecord> {
        self.records
    }

    /// One canonical-JSON event per line.
    pub fn export_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&to_canonical_string(r));
            out.push('\n');
        }
        out
    }

    pub fn parse_ndjson(text: &str) -> Result<Self, (usize, serde_json::Error)> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}
