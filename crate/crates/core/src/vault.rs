//! Simulated owner-held identity agent: a key pair, an optional personal
//! payload, and a consent policy that answers disclosure requests.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Keypair, PublicKey};
use crate::identity_store::{Payload, TumbleReceipt};
use crate::types::{Address, EntryId, Millis};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VaultError {
    #[error("vault already holds a payload")]
    AlreadyIngested,
    #[error("vault holds no payload")]
    NoPayload,
    #[error("vault has no contract address")]
    NoContract,
}

/// How a vault decides consent requests.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConsentPolicy {
    AlwaysApprove,
    #[default]
    AlwaysDeny,
    Allowlist { allowed: BTreeSet<Address> },
    /// Answers in order regardless of requester; denies once exhausted.
    Scripted { decisions: Vec<bool>, #[serde(default)] cursor: usize },
}

impl ConsentPolicy {
    fn decide(&mut self, requester: &Address) -> bool {
        match self {
            ConsentPolicy::AlwaysApprove => true,
            ConsentPolicy::AlwaysDeny => false,
            ConsentPolicy::Allowlist { allowed } => allowed.contains(requester),
            ConsentPolicy::Scripted { decisions, cursor } => {
                let d = decisions.get(*cursor).copied().unwrap_or(false);
                *cursor += 1;
                d
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRequest {
    pub request_id: u64,
    pub requester: Address,
    pub purpose: String,
    pub requested_fields: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum ConsentResponse {
    Approve { request_id: u64, fields: Payload },
    Deny { request_id: u64 },
}

impl ConsentResponse {
    pub fn request_id(&self) -> u64 {
        match self {
            ConsentResponse::Approve { request_id, .. } | ConsentResponse::Deny { request_id } => *request_id,
        }
    }

    pub fn is_approved(&self) -> bool {
        matches!(self, ConsentResponse::Approve { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decided {
    Consent { request: ConsentRequest },
    Reveal { to: Address },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub subject: Decided,
    pub approved: bool,
    /// Field names disclosed by this decision (empty on deny).
    pub disclosed: Vec<String>,
    pub at: Millis,
}

/// Per-grant disclosure a weak owner made off-ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdDisclosure {
    pub grantee: Address,
    pub entry_id: EntryId,
    pub endpoint_url: String,
}

#[derive(Debug, Clone)]
pub struct Vault {
    keypair: Keypair,
    stored_payload: Option<Payload>,
    policy: ConsentPolicy,
    pending: VecDeque<ConsentRequest>,
    decisions: Vec<DecisionRecord>,
    contract: Option<Address>,
    current_entry: Option<EntryId>,
    receipts: Vec<TumbleReceipt>,
}

impl Vault {
    /// Deterministic vault from a seed. Default policy denies everything.
    pub fn create_identity(seed: &[u8]) -> Self {
        Self::from_keypair(Keypair::from_seed(seed))
    }

    pub fn from_keypair(keypair: Keypair) -> Self {
        Self {
            keypair,
            stored_payload: None,
            policy: ConsentPolicy::default(),
            pending: VecDeque::new(),
            decisions: Vec::new(),
            contract: None,
            current_entry: None,
            receipts: Vec::new(),
        }
    }

    pub fn address(&self) -> Address {
        self.keypair.address()
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public_key()
    }

    pub fn keypair(&self) -> &Keypair {
        &self.keypair
    }

    pub fn policy(&self) -> &ConsentPolicy {
        &self.policy
    }

    pub fn set_policy(&mut self, policy: ConsentPolicy) {
        self.policy = policy;
    }

    pub fn has_payload(&self) -> bool {
        self.stored_payload.is_some()
    }

    /// Field names held, without their values.
    /// Whether the vault currently stores exactly `payload`.
    pub fn holds(&self, payload: &Payload) -> bool {
        self.stored_payload.as_ref() == Some(payload)
    }

    pub fn stored_fields(&self) -> Vec<String> {
        self.stored_payload.iter().flat_map(|p| p.keys().cloned()).collect()
    }

    pub fn contract(&self) -> Option<Address> {
        self.contract
    }

    pub fn set_contract(&mut self, contract: Address) {
        self.contract = Some(contract);
    }

    /// Latest entry id this owner knows its identifying entry by.
    pub fn current_entry(&self) -> Option<EntryId> {
        self.current_entry
    }

    pub fn set_current_entry(&mut self, id: Option<EntryId>) {
        self.current_entry = id;
    }

    pub fn receive_receipt(&mut self, receipt: TumbleReceipt) {
        self.current_entry = Some(receipt.new_id);
        self.receipts.push(receipt);
    }

    pub fn receipts(&self) -> &[TumbleReceipt] {
        &self.receipts
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.decisions
    }

    pub fn ingest_payload(&mut self, payload: Payload) -> Result<(), VaultError> {
        if self.stored_payload.is_some() {
            return Err(VaultError::AlreadyIngested);
        }
        if payload.is_empty() {
            return Err(VaultError::NoPayload);
        }
        self.stored_payload = Some(payload);
        Ok(())
    }

    /// Drops the payload again. Only used to compensate a failed claim.
    pub fn clear_payload(&mut self) -> Option<Payload> {
        self.stored_payload.take()
    }

    /// Decides one request immediately.
    pub fn handle_consent(&mut self, request: ConsentRequest, now: Millis) -> Result<ConsentResponse, VaultError> {
        let stored = self.stored_payload.as_ref().ok_or(VaultError::NoPayload)?;
        let approved = self.policy.decide(&request.requester);
        let fields: Payload = if approved {
            request
                .requested_fields
                .iter()
                .filter_map(|f| stored.get(f).map(|v| (f.clone(), v.clone())))
                .collect()
        } else {
            Payload::new()
        };
        let request_id = request.request_id;
        let approved = approved && !fields.is_empty();
        self.decisions.push(DecisionRecord {
            subject: Decided::Consent { request },
            approved,
            disclosed: if approved { fields.keys().cloned().collect() } else { vec![] },
            at: now,
        });
        Ok(if approved {
            ConsentResponse::Approve { request_id, fields }
        } else {
            ConsentResponse::Deny { request_id }
        })
    }

    /// Queues a request for a later [`Vault::process_pending`].
    pub fn enqueue(&mut self, request: ConsentRequest) {
        self.pending.push_back(request);
    }

    pub fn pending(&self) -> impl Iterator<Item = &ConsentRequest> {
        self.pending.iter()
    }

    /// Answers queued requests in arrival order.
    pub fn process_pending(&mut self, now: Millis) -> Result<Vec<ConsentResponse>, VaultError> {
        let mut out = Vec::new();
        while let Some(req) = self.pending.pop_front() {
            match self.handle_consent(req.clone(), now) {
                Ok(r) => out.push(r),
                Err(e) => {
                    self.pending.push_front(req);
                    return Err(e);
                }
            }
        }
        Ok(out)
    }

    /// Discloses the owner's contract address if the policy permits `to`.
    pub fn reveal_contract_address(&mut self, to: Address, now: Millis) -> Result<Option<Address>, VaultError> {
        let contract = self.contract.ok_or(VaultError::NoContract)?;
        let approved = self.policy.decide(&to);
        self.decisions.push(DecisionRecord { subject: Decided::Reveal { to }, approved, disclosed: vec![], at: now });
        Ok(approved.then_some(contract))
    }

    /// Fields disclosed to each requester, rebuilt from the decision log.
    pub fn disclosed_fields(decisions: &[DecisionRecord]) -> BTreeMap<Address, BTreeSet<String>> {
        let mut out: BTreeMap<Address, BTreeSet<String>> = BTreeMap::new();
        for d in decisions {
            if let (Decided::Consent { request }, true) = (&d.subject, d.approved) {
                out.entry(request.requester).or_default().extend(d.disclosed.iter().cloned());
            }
        }
        out
    }

    pub fn export_decisions(&self) -> String {
        crate::canonical::to_canonical_string(&self.decisions)
    }
}
