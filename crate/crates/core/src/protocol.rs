//! Orchestration of the multi-plane flows: registration, weak and strong
//! claims, revocation and grants, identity resolution with consent, the two
//! third-party search paths, dedup across custodians and anonymous messages.
//!
//! Every plane mutation goes through [`System`], which records it in the
//! [`Trace`]. Multi-step flows run as sagas with compensating rollback.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::{digest_of, sha256, to_canonical_bytes};
use crate::chaff::ChaffGenerator;
use crate::crypto::{Keypair, PublicKey, Signature};
use crate::identity_store::{
    Created, DeletedEntry, EntryView, IdentitySchema, IdentityStore, Payload, StoreConfig, StoreError, TumbleReceipt,
};
use crate::ledger::{Call, Ledger, LedgerError, LinkContract};
use crate::query::{Predicate, QueryDocument, QueryError};
use crate::record_store::{
    CreateBody, DataRecord, NetworkModel, QueryResult, QueryWhitelist, RecordCluster, RecordError, RecordOp,
    RecordPayload, StoreRules, WhitelistAction,
};
use crate::trace::{SagaKind, SagaObservation, SagaPhase, Trace, TraceEvent};
use crate::types::{Address, EntryId, Millis, RecordId};
use crate::vault::{ConsentPolicy, ConsentRequest, ConsentResponse, Decided, IdDisclosure, Vault, VaultError};

/// Deterministic key pair for a named actor under a run seed.
pub fn derive_keypair(seed: u64, name: &str) -> Keypair {
    Keypair::from_seed(format!("{seed}:{name}").as_bytes())
}

fn derive_u64(seed: u64, label: &str) -> u64 {
    let h = sha256(format!("{seed}:{label}").as_bytes());
    u64::from_be_bytes(h.0[..8].try_into().expect("8 bytes"))
}

pub fn endpoint_url_for(custodian_name: &str) -> String {
    format!("https://{custodian_name}.local/identity")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OwnershipState {
    CustodianHeld,
    ClaimedWeakLinked,
    ClaimedWeakRevoked,
    ClaimedStrong,
}

impl OwnershipState {
    pub fn as_str(&self) -> &'static str {
        match self {
            OwnershipState::CustodianHeld => "custodian_held",
            OwnershipState::ClaimedWeakLinked => "claimed_weak_linked",
            OwnershipState::ClaimedWeakRevoked => "claimed_weak_revoked",
            OwnershipState::ClaimedStrong => "claimed_strong",
        }
    }

    /// The transitions the state machine permits. `None` is "not yet registered".
    pub fn transition_allowed(from: Option<Self>, to: Self) -> bool {
        use OwnershipState::*;
        matches!(
            (from, to),
            (None, CustodianHeld)
                | (Some(CustodianHeld), ClaimedWeakLinked)
                | (Some(ClaimedWeakLinked), ClaimedWeakRevoked)
                | (Some(ClaimedWeakRevoked), ClaimedWeakLinked)
                | (Some(ClaimedWeakLinked), ClaimedStrong)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    FlagOff,
    LinkBroken,
    OwnerDenied,
    Unauthorized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ResolutionOutcome {
    Identified { payload: Payload },
    ConsentPending { request_id: u64 },
    Denied { reason: DenyReason },
}

impl ResolutionOutcome {
    pub fn is_identified(&self) -> bool {
        matches!(self, ResolutionOutcome::Identified { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub contract_address: Address,
    pub projection: RecordPayload,
    pub resolution: ResolutionOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub candidates: Vec<Candidate>,
    pub aggregate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LookupOutcome {
    Found { contract_address: Address, records: Vec<DataRecord> },
    Denied { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupHit {
    pub entry_id: EntryId,
    #[serde(flatten)]
    pub outcome: LookupOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: u64,
    pub to: Address,
    pub body: String,
    pub sender_role: String,
}

/// Custodian-signed proof that it authenticated `new_owner` out of band.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimToken {
    pub contract: Address,
    pub new_owner: Address,
    pub custodian_key: PublicKey,
    pub signature: Signature,
}

#[derive(Serialize)]
struct ClaimTokenBody<'a> {
    purpose: &'a str,
    contract: &'a Address,
    new_owner: &'a Address,
}

impl ClaimToken {
    fn signing_bytes(contract: &Address, new_owner: &Address) -> Vec<u8> {
        to_canonical_bytes(&ClaimTokenBody { purpose: "claim", contract, new_owner })
    }

    pub fn issue(custodian: &Keypair, contract: Address, new_owner: Address) -> Self {
        Self {
            contract,
            new_owner,
            custodian_key: custodian.public_key(),
            signature: custodian.sign(&Self::signing_bytes(&contract, &new_owner)),
        }
    }

    pub fn verify(&self, expected_custodian: &Address) -> bool {
        self.custodian_key.address() == *expected_custodian
            && self.custodian_key.verify(&Self::signing_bytes(&self.contract, &self.new_owner), &self.signature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsentMode {
    /// The vault decides within the resolving call.
    #[default]
    Immediate,
    /// Requests queue at the vault until the owner processes them.
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    /// Stop at the boundary and run compensation.
    Recover,
    /// Stop at the boundary and leave state as is.
    Crash,
}

/// Stops the next run of `saga` at `boundary`. One-shot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub saga: SagaKind,
    pub boundary: usize,
    pub mode: FaultMode,
}

/// Boundaries per saga: before the first step, between steps, and after
/// the last step but before commit.
pub const REGISTER_BOUNDARIES: usize = 4;
pub const CLAIM_STRONG_BOUNDARIES: usize = 5;

fn default_identity_schema() -> Vec<String> {
    ["name", "contact", "student_number", "insurance_number", "date_of_birth", "address"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_schema_tags() -> Vec<String> {
    ["degree", "course", "mark", "diagnosis", "prescription", "treatment"].iter().map(|s| s.to_string()).collect()
}

fn default_chaff_ratio() -> f64 {
    0.5
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Custodian names in genesis order. Keys derive from `seed` and name.
    pub custodians: Vec<String>,
    #[serde(default = "default_identity_schema")]
    pub identity_schema: Vec<String>,
    /// Identity field that must be unique across all custodians.
    #[serde(default)]
    pub unique_key: Option<String>,
    #[serde(default = "default_schema_tags")]
    pub record_schema_tags: Vec<String>,
    /// Extra field names banned from records, on top of the identity schema.
    #[serde(default)]
    pub extra_denylist: Vec<String>,
    #[serde(default = "default_chaff_ratio")]
    pub chaff_ratio: f64,
    #[serde(default = "default_k")]
    pub k_default: usize,
    #[serde(default)]
    pub chaff_generator: ChaffGenerator,
    #[serde(default)]
    pub network: NetworkModel,
    #[serde(default)]
    pub consent_mode: ConsentMode,
    #[serde(default)]
    pub seed: u64,
}

impl SystemConfig {
    pub fn new(custodians: &[&str], seed: u64) -> Self {
        Self {
            custodians: custodians.iter().map(|s| s.to_string()).collect(),
            identity_schema: default_identity_schema(),
            unique_key: None,
            record_schema_tags: default_schema_tags(),
            extra_denylist: vec![],
            chaff_ratio: default_chaff_ratio(),
            k_default: default_k(),
            chaff_generator: ChaffGenerator::default(),
            network: NetworkModel::default(),
            consent_mode: ConsentMode::default(),
            seed,
        }
    }

    pub fn denylist(&self) -> Vec<String> {
        let mut d: BTreeSet<String> = self.identity_schema.iter().cloned().collect();
        d.extend(self.extra_denylist.iter().cloned());
        d.into_iter().collect()
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProtocolError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("already registered")]
    AlreadyRegistered,
    #[error("invalid claim token")]
    InvalidToken,
    #[error("contract is already claimed")]
    AlreadyClaimed,
    #[error("operation needs state {expected}, contract is {actual}")]
    WrongState { expected: String, actual: String },
    #[error("{0} does not own this contract")]
    NotOwner(Address),
    #[error("{0} is not a custodian")]
    NotCustodian(Address),
    #[error("{0} is not a registered third party")]
    NotThirdParty(Address),
    #[error("no vault provisioned for {0}")]
    NoVault(Address),
    #[error("a vault is already provisioned for {0}")]
    VaultExists(Address),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("{saga:?} rolled back at boundary {boundary}: {reason}")]
    SagaAborted { saga: SagaKind, boundary: usize, reason: String },
    #[error("{saga:?} crashed at boundary {boundary}")]
    Crashed { saga: SagaKind, boundary: usize },
}

impl ProtocolError {
    /// Stable error class for transport layers.
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::NotFound(_)
            | ProtocolError::NoVault(_)
            | ProtocolError::Store(StoreError::NotFound)
            | ProtocolError::Record(RecordError::NotFound(_))
            | ProtocolError::Ledger(LedgerError::UnknownContract(_)) => "not_found",
            ProtocolError::NotOwner(_)
            | ProtocolError::NotCustodian(_)
            | ProtocolError::NotThirdParty(_)
            | ProtocolError::Store(StoreError::Unauthorized(_)) => "forbidden",
            ProtocolError::BadRequest(_)
            | ProtocolError::Query(QueryError::MissingParam(_))
            | ProtocolError::Query(QueryError::ParamType { .. })
            | ProtocolError::Query(QueryError::Malformed(_)) => "bad_request",
            _ => "rejected",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CustodianInfo {
    pub name: String,
    pub address: Address,
    pub endpoint_url: String,
}

#[derive(Debug, Clone)]
struct Custodian {
    info: CustodianInfo,
    keypair: Keypair,
}

#[derive(Debug, Clone)]
struct UserInfo {
    custodian: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registered {
    pub entry_id: EntryId,
    pub contract_address: Address,
}

#[derive(Debug, Clone)]
struct PendingConsent {
    requester: Address,
    contract: Address,
}

#[derive(Default)]
struct RegisterCtx {
    created: Option<Created>,
    contract: Option<Address>,
    mapped: bool,
}

struct ClaimStrongCtx {
    owner: Address,
    contract: Address,
    entry: EntryId,
    store: usize,
    payload: Option<Payload>,
    deleted: Option<DeletedEntry>,
    ingested: bool,
    vault_set: bool,
    cleared: Vec<EntryId>,
    /// State when the saga began; the last one logged as a transition.
    before: OwnershipState,
}

/// The whole simulated deployment.
pub struct System {
    config: SystemConfig,
    now: Millis,
    ledger: Ledger,
    custodians: Vec<Custodian>,
    stores: Vec<IdentityStore>,
    feed_cursor: Vec<usize>,
    cluster: RecordCluster,
    whitelist: QueryWhitelist,
    rules: StoreRules,
    vaults: BTreeMap<Address, Vault>,
    third_parties: BTreeSet<Address>,
    users: BTreeMap<Address, UserInfo>,
    unique_index: BTreeMap<String, Address>,
    entry_owner: BTreeMap<EntryId, Address>,
    disclosures: BTreeMap<Address, BTreeMap<Address, IdDisclosure>>,
    messages: BTreeMap<Address, Vec<Message>>,
    pending_consents: BTreeMap<u64, PendingConsent>,
    consent_results: BTreeMap<u64, (Address, ResolutionOutcome)>,
    next_message: u64,
    next_request: u64,
    next_saga: u64,
    fault: Option<FaultPlan>,
    trace: Trace,
}

impl System {
    pub fn new(config: SystemConfig) -> Result<Self, ProtocolError> {
        if !(0.0..1.0).contains(&config.chaff_ratio) {
            return Err(ProtocolError::BadRequest(format!("chaff_ratio {} outside [0, 1)", config.chaff_ratio)));
        }
        if let Some(k) = &config.unique_key {
            if !config.identity_schema.contains(k) {
                return Err(ProtocolError::BadRequest(format!("unique key {k} is not an identity field")));
            }
        }
        let names: BTreeSet<&String> = config.custodians.iter().collect();
        if names.len() != config.custodians.len() {
            return Err(ProtocolError::BadRequest("duplicate custodian name".into()));
        }
        let custodians: Vec<Custodian> = config
            .custodians
            .iter()
            .map(|name| {
                let keypair = derive_keypair(config.seed, name);
                Custodian {
                    info: CustodianInfo { name: name.clone(), address: keypair.address(), endpoint_url: endpoint_url_for(name) },
                    keypair,
                }
            })
            .collect();
        let addresses: Vec<Address> = custodians.iter().map(|c| c.info.address).collect();
        let stores = custodians
            .iter()
            .map(|c| {
                IdentityStore::new(StoreConfig {
                    endpoint_url: c.info.endpoint_url.clone(),
                    custodian: c.info.address,
                    schema: IdentitySchema(config.identity_schema.clone()),
                    chaff_generator: config.chaff_generator,
                    seed: derive_u64(config.seed, &format!("{}:store", c.info.name)),
                })
            })
            .collect();
        let rules = StoreRules {
            custodians: addresses.iter().copied().collect(),
            denylist: config.denylist(),
            schema_tags: config.record_schema_tags.clone(),
        };
        let cluster = RecordCluster::new(&config.custodians, rules.clone(), config.network, derive_u64(config.seed, "network"));
        let mut trace = Trace::default();
        trace.push(
            0,
            TraceEvent::Genesis {
                config: serde_json::to_value(&config).expect("config serializes"),
                custodians: addresses.clone(),
            },
        );
        Ok(Self {
            feed_cursor: vec![0; custodians.len()],
            ledger: Ledger::new(addresses),
            custodians,
            stores,
            cluster,
            whitelist: QueryWhitelist::default(),
            rules,
            vaults: BTreeMap::new(),
            third_parties: BTreeSet::new(),
            users: BTreeMap::new(),
            unique_index: BTreeMap::new(),
            entry_owner: BTreeMap::new(),
            disclosures: BTreeMap::new(),
            messages: BTreeMap::new(),
            pending_consents: BTreeMap::new(),
            consent_results: BTreeMap::new(),
            next_message: 1,
            next_request: 1,
            next_saga: 1,
            fault: None,
            trace,
            now: 0,
            config,
        })
    }

    // ---- accessors ----

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn custodians(&self) -> Vec<CustodianInfo> {
        self.custodians.iter().map(|c| c.info.clone()).collect()
    }

    pub fn store(&self, index: usize) -> Option<&IdentityStore> {
        self.stores.get(index)
    }

    pub fn stores(&self) -> &[IdentityStore] {
        &self.stores
    }

    pub fn store_for_endpoint(&self, endpoint_url: &str) -> Option<&IdentityStore> {
        self.stores.iter().find(|s| s.endpoint_url() == endpoint_url)
    }

    pub fn cluster(&self) -> &RecordCluster {
        &self.cluster
    }

    pub fn whitelist(&self) -> &QueryWhitelist {
        &self.whitelist
    }

    pub fn vault(&self, owner: &Address) -> Option<&Vault> {
        self.vaults.get(owner)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    /// Appends an externally produced event (gateway and simulator use this).
    pub fn record_event(&mut self, event: TraceEvent) {
        self.emit(event);
    }

    pub fn set_fault(&mut self, plan: Option<FaultPlan>) {
        self.fault = plan;
    }

    pub fn is_third_party(&self, address: &Address) -> bool {
        self.third_parties.contains(address)
    }

    pub fn register_third_party(&mut self, address: Address) {
        self.third_parties.insert(address);
    }

    pub fn user_contracts(&self) -> impl Iterator<Item = &Address> {
        self.users.keys()
    }

    pub fn disclosures_for(&self, grantee: &Address) -> Vec<IdDisclosure> {
        self.disclosures.get(grantee).map(|m| m.values().cloned().collect()).unwrap_or_default()
    }

    /// Derived ownership state of a registered user's contract.
    pub fn state_of(&self, contract: &Address) -> Option<OwnershipState> {
        let info = self.users.get(contract)?;
        let c = self.ledger.read_contract(contract).ok()?;
        Some(if self.ledger.is_custodian(&c.owner) {
            OwnershipState::CustodianHeld
        } else if c.vault_address.is_some() {
            OwnershipState::ClaimedStrong
        } else if c.entry_id.is_some_and(|id| self.stores[info.custodian].contains(&id)) {
            OwnershipState::ClaimedWeakLinked
        } else {
            OwnershipState::ClaimedWeakRevoked
        })
    }

    pub fn states(&self) -> BTreeMap<Address, OwnershipState> {
        self.users.keys().filter_map(|c| self.state_of(c).map(|s| (*c, s))).collect()
    }

    // ---- internals ----

    fn emit(&mut self, event: TraceEvent) {
        self.trace.push(self.now, event);
    }

    fn exec(&mut self, key: &Keypair, call: Call) -> Result<u64, ProtocolError> {
        match self.ledger.execute(key, call) {
            Ok(seq) => {
                let entry = self.ledger.log().last().expect("just applied").clone();
                self.emit(TraceEvent::LedgerTx { entry });
                Ok(seq)
            }
            Err(e) => {
                let rejection = self.ledger.rejections().last().expect("just rejected").clone();
                self.emit(TraceEvent::LedgerRejected { rejection });
                Err(e.into())
            }
        }
    }

    fn flush_feed(&mut self, store: usize) {
        let endpoint = self.stores[store].endpoint_url().to_string();
        let fresh: Vec<_> = self.stores[store].feed()[self.feed_cursor[store]..].to_vec();
        self.feed_cursor[store] += fresh.len();
        for feed_event in fresh {
            self.emit(TraceEvent::StoreFeed { endpoint: endpoint.clone(), feed_event });
        }
    }

    fn custodian_index(&self, address: &Address) -> Result<usize, ProtocolError> {
        self.custodians.iter().position(|c| c.info.address == *address).ok_or(ProtocolError::NotCustodian(*address))
    }

    fn store_index(&self, endpoint_url: &str) -> Result<usize, ProtocolError> {
        self.stores
            .iter()
            .position(|s| s.endpoint_url() == endpoint_url)
            .ok_or_else(|| ProtocolError::NotFound(format!("endpoint {endpoint_url}")))
    }

    fn user_contract(&self, contract: &Address) -> Result<LinkContract, ProtocolError> {
        if !self.users.contains_key(contract) {
            return Err(ProtocolError::NotFound(format!("contract {contract}")));
        }
        Ok(self.ledger.read_contract(contract)?.clone())
    }

    fn require_owner(&self, caller: &Address, contract: &Address) -> Result<LinkContract, ProtocolError> {
        let c = self.user_contract(contract)?;
        if c.owner != *caller {
            return Err(ProtocolError::NotOwner(*caller));
        }
        Ok(c)
    }

    fn require_state(&self, contract: &Address, allowed: &[OwnershipState]) -> Result<OwnershipState, ProtocolError> {
        let s = self.state_of(contract).ok_or_else(|| ProtocolError::NotFound(format!("contract {contract}")))?;
        if !allowed.contains(&s) {
            return Err(ProtocolError::WrongState {
                expected: allowed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("|"),
                actual: s.as_str().into(),
            });
        }
        Ok(s)
    }

    fn vault_key(&self, owner: &Address) -> Result<Keypair, ProtocolError> {
        Ok(self.vaults.get(owner).ok_or(ProtocolError::NoVault(*owner))?.keypair().clone())
    }

    fn vault_mut(&mut self, owner: &Address) -> Result<&mut Vault, ProtocolError> {
        self.vaults.get_mut(owner).ok_or(ProtocolError::NoVault(*owner))
    }

    fn note_transition(&mut self, contract: Address, before: Option<OwnershipState>, cause: &str) {
        if let Some(after) = self.state_of(&contract) {
            if Some(after) != before {
                self.emit(TraceEvent::Transition { contract, from: before, to: after, cause: cause.into() });
            }
        }
    }

    fn take_fault(&mut self, saga: SagaKind, boundary: usize) -> Option<FaultMode> {
        match self.fault {
            Some(p) if p.saga == saga && p.boundary == boundary => {
                self.fault = None;
                Some(p.mode)
            }
            _ => None,
        }
    }

    fn saga_event(&mut self, saga: SagaKind, saga_id: u64, contract: Option<Address>, detail: SagaPhase) {
        self.emit(TraceEvent::Saga { saga, saga_id, contract, detail });
    }

    // ---- clock and replication ----

    /// Advances the clock and delivers replication messages that are due.
    pub fn set_time(&mut self, now: Millis) {
        self.now = self.now.max(now);
        let delivered = self.cluster.deliver_due(self.now);
        self.emit_deliveries(delivered);
    }

    /// Delivers every outstanding replication message.
    pub fn converge(&mut self) {
        let delivered = self.cluster.converge();
        self.emit_deliveries(delivered);
    }

    fn emit_deliveries(&mut self, delivered: Vec<(usize, crate::types::Hash32, crate::record_store::Delivery)>) {
        for (node, op_digest, outcome) in delivered {
            self.emit(TraceEvent::RecordDelivery { node, op_digest, outcome });
        }
    }

    // ---- vaults ----

    /// Creates the simulated device for `owner`. The seed must derive to
    /// `owner`, which proves the caller holds the key.
    pub fn provision_vault(&mut self, owner: Address, seed: &str) -> Result<Address, ProtocolError> {
        let vault = Vault::create_identity(seed.as_bytes());
        if vault.address() != owner {
            return Err(ProtocolError::BadRequest("seed does not derive to the caller's address".into()));
        }
        if self.vaults.contains_key(&owner) {
            return Err(ProtocolError::VaultExists(owner));
        }
        self.vaults.insert(owner, vault);
        Ok(owner)
    }

    /// Installs an already constructed vault (its address is the owner).
    pub fn install_vault(&mut self, vault: Vault) -> Result<Address, ProtocolError> {
        let owner = vault.address();
        if self.vaults.contains_key(&owner) {
            return Err(ProtocolError::VaultExists(owner));
        }
        self.vaults.insert(owner, vault);
        Ok(owner)
    }

    pub fn set_vault_policy(&mut self, owner: Address, policy: ConsentPolicy) -> Result<(), ProtocolError> {
        self.vault_mut(&owner)?.set_policy(policy);
        Ok(())
    }

    pub fn reveal_contract_address(&mut self, owner: Address, to: Address) -> Result<Option<Address>, ProtocolError> {
        let now = self.now;
        Ok(self.vault_mut(&owner)?.reveal_contract_address(to, now)?)
    }

    // ---- registration ----

    /// Creates the identity entry with chaff, deploys the link contract and
    /// maps it in the directory, all or nothing.
    pub fn register_user(
        &mut self,
        custodian: Address,
        payload: Payload,
        chaff_ratio: Option<f64>,
    ) -> Result<Registered, ProtocolError> {
        let ci = self.custodian_index(&custodian)?;
        self.stores[ci].schema().check(&payload)?;
        let unique = match &self.config.unique_key {
            Some(k) => Some(
                payload.get(k).cloned().ok_or_else(|| ProtocolError::BadRequest(format!("missing unique field {k}")))?,
            ),
            None => None,
        };
        if unique.as_ref().is_some_and(|u| self.unique_index.contains_key(u)) {
            return Err(ProtocolError::AlreadyRegistered);
        }
        let ratio = chaff_ratio.unwrap_or(self.config.chaff_ratio);
        let key = self.custodians[ci].keypair.clone();
        let endpoint_url = self.custodians[ci].info.endpoint_url.clone();

        let saga = SagaKind::RegisterUser;
        let saga_id = self.next_saga;
        self.next_saga += 1;
        self.saga_event(saga, saga_id, None, SagaPhase::Begin);
        let mut ctx = RegisterCtx::default();
        for boundary in 0..REGISTER_BOUNDARIES {
            if let Some(mode) = self.take_fault(saga, boundary) {
                return Err(self.end_register(saga_id, ci, &ctx, boundary, mode, "injected fault".into()));
            }
            let step = match boundary {
                0 => self.stores[ci].create_entry(custodian, payload.clone(), ratio, self.now).map_err(Into::into).map(|c| {
                    ctx.created = Some(c);
                    self.flush_feed(ci);
                    "store_create"
                }),
                1 => {
                    let entry_id = ctx.created.as_ref().expect("step 0 done").entry_id;
                    self.exec(&key, Call::Deploy { endpoint_url: endpoint_url.clone(), entry_id }).map(|seq| {
                        ctx.contract = Some(Ledger::contract_address_for(seq, &entry_id));
                        "deploy"
                    })
                }
                2 => {
                    let entry_id = ctx.created.as_ref().expect("step 0 done").entry_id;
                    let contract = ctx.contract.expect("step 1 done");
                    self.exec(&key, Call::DirectoryPut { entry_id, contract }).map(|_| {
                        ctx.mapped = true;
                        "directory_put"
                    })
                }
                _ => break,
            };
            match step {
                Ok(name) => self.saga_event(saga, saga_id, ctx.contract, SagaPhase::Step { name: name.into() }),
                Err(e) => return Err(self.end_register(saga_id, ci, &ctx, boundary, FaultMode::Recover, e.to_string())),
            }
        }

        let created = ctx.created.as_ref().expect("all steps done");
        let contract = ctx.contract.expect("all steps done");
        self.users.insert(contract, UserInfo { custodian: ci });
        if let Some(u) = unique {
            self.unique_index.insert(u, contract);
        }
        self.entry_owner.insert(created.entry_id, contract);
        let observation = self.register_observation(ci, &ctx);
        self.saga_event(saga, saga_id, Some(contract), SagaPhase::Committed { observation });
        self.note_transition(contract, None, "register_user");
        Ok(Registered { entry_id: created.entry_id, contract_address: contract })
    }

    fn register_observation(&self, ci: usize, ctx: &RegisterCtx) -> SagaObservation {
        let Some(created) = &ctx.created else {
            return SagaObservation::RegisterUser { entry_exists: false, contract_linked: false, directory_mapped: false };
        };
        let id = created.entry_id;
        let contract_linked = ctx.contract.is_some_and(|a| {
            self.ledger.read_contract(&a).is_ok_and(|c| c.entry_id == Some(id) && c.access_flag)
        });
        SagaObservation::RegisterUser {
            entry_exists: self.stores[ci].contains(&id),
            contract_linked,
            directory_mapped: ctx.contract.is_some() && self.ledger.directory_lookup(&id) == ctx.contract,
        }
    }

    fn end_register(
        &mut self,
        saga_id: u64,
        ci: usize,
        ctx: &RegisterCtx,
        boundary: usize,
        mode: FaultMode,
        reason: String,
    ) -> ProtocolError {
        let saga = SagaKind::RegisterUser;
        if mode == FaultMode::Crash {
            let observation = self.register_observation(ci, ctx);
            self.saga_event(saga, saga_id, ctx.contract, SagaPhase::Crashed { boundary, observation });
            return ProtocolError::Crashed { saga, boundary };
        }
        let key = self.custodians[ci].keypair.clone();
        if let Some(created) = &ctx.created {
            if ctx.mapped {
                let _ = self.exec(&key, Call::DirectoryClear { entry_id: created.entry_id });
            }
            if let Some(contract) = ctx.contract {
                let _ = self.exec(&key, Call::SetEntryId { contract, entry_id: None, endpoint_url: None });
                let _ = self.exec(&key, Call::SetAccessFlag { contract, flag: false });
            }
            self.stores[ci].discard_created(created);
            self.flush_feed(ci);
        }
        let observation = self.register_observation(ci, ctx);
        self.saga_event(saga, saga_id, ctx.contract, SagaPhase::RolledBack { boundary, observation });
        ProtocolError::SagaAborted { saga, boundary, reason }
    }

    /// Replaces an unclaimed user's identifying payload and moves the
    /// contract and directory to the new id.
    pub fn update_identity(
        &mut self,
        custodian: Address,
        contract: Address,
        payload: Payload,
    ) -> Result<EntryId, ProtocolError> {
        let ci = self.custodian_index(&custodian)?;
        let c = self.user_contract(&contract)?;
        if self.users[&contract].custodian != ci {
            return Err(ProtocolError::NotOwner(custodian));
        }
        let old = c.entry_id.ok_or_else(|| ProtocolError::NotFound("entry".into()))?;
        let old_unique = self.config.unique_key.as_ref().and_then(|k| self.stores[ci].read_entry(&old).ok()?.payload.get(k).cloned());
        let new_unique = match &self.config.unique_key {
            Some(k) => {
                Some(payload.get(k).cloned().ok_or_else(|| ProtocolError::BadRequest(format!("missing unique field {k}")))?)
            }
            None => None,
        };
        if new_unique != old_unique && new_unique.as_ref().is_some_and(|u| self.unique_index.contains_key(u)) {
            return Err(ProtocolError::AlreadyRegistered);
        }
        let new = self.stores[ci].update_payload(&self.ledger, custodian, &old, payload, self.now)?;
        self.flush_feed(ci);
        let key = self.custodians[ci].keypair.clone();
        self.exec(&key, Call::SetEntryId { contract, entry_id: Some(new), endpoint_url: None })?;
        self.exec(&key, Call::DirectoryClear { entry_id: old })?;
        self.exec(&key, Call::DirectoryPut { entry_id: new, contract })?;
        self.entry_owner.remove(&old);
        self.entry_owner.insert(new, contract);
        if new_unique != old_unique {
            if let Some(u) = old_unique {
                self.unique_index.remove(&u);
            }
            if let Some(u) = new_unique {
                self.unique_index.insert(u, contract);
            }
        }
        Ok(new)
    }

    /// Custodian-side tumble of an unclaimed user, keeping contract and
    /// directory in step with the new id.
    pub fn custodian_rekey(&mut self, custodian: Address, contract: Address, k: Option<usize>) -> Result<EntryId, ProtocolError> {
        let ci = self.custodian_index(&custodian)?;
        let c = self.require_owner(&custodian, &contract)?;
        self.require_state(&contract, &[OwnershipState::CustodianHeld])?;
        let old = c.entry_id.ok_or_else(|| ProtocolError::NotFound("entry".into()))?;
        let k = k.unwrap_or(self.config.k_default);
        let receipt = self.stores[ci].tumble(&self.ledger, custodian, &old, k, self.now)?;
        self.flush_feed(ci);
        let new = receipt.new_id;
        self.emit(TraceEvent::TumbleReceipt { endpoint: c.endpoint_url.clone().unwrap_or_default(), owner: custodian, receipt });
        let key = self.custodians[ci].keypair.clone();
        self.exec(&key, Call::SetEntryId { contract, entry_id: Some(new), endpoint_url: None })?;
        self.exec(&key, Call::DirectoryClear { entry_id: old })?;
        self.exec(&key, Call::DirectoryPut { entry_id: new, contract })?;
        self.entry_owner.remove(&old);
        self.entry_owner.insert(new, contract);
        Ok(new)
    }

    /// Background re-key of `k` fake entries only.
    pub fn chaff_tumble(&mut self, custodian: Address, k: usize) -> Result<u64, ProtocolError> {
        let ci = self.custodian_index(&custodian)?;
        let batch = self.stores[ci].tumble_chaff(custodian, k, self.now)?;
        self.flush_feed(ci);
        Ok(batch)
    }

    // ---- claims ----

    pub fn issue_claim_token(&self, custodian: Address, contract: Address, new_owner: Address) -> Result<ClaimToken, ProtocolError> {
        let ci = self.custodian_index(&custodian)?;
        self.require_owner(&custodian, &contract)?;
        Ok(ClaimToken::issue(&self.custodians[ci].keypair, contract, new_owner))
    }

    /// Transfers the contract from its custodian to `caller`'s vault address.
    pub fn claim_weak(&mut self, caller: Address, contract: Address, token: &ClaimToken) -> Result<(), ProtocolError> {
        let c = self.user_contract(&contract)?;
        if !self.ledger.is_custodian(&c.owner) {
            return Err(ProtocolError::AlreadyClaimed);
        }
        if token.contract != contract || token.new_owner != caller || !token.verify(&c.owner) {
            return Err(ProtocolError::InvalidToken);
        }
        if !self.vaults.contains_key(&caller) {
            return Err(ProtocolError::NoVault(caller));
        }
        let before = self.state_of(&contract);
        let ci = self.custodian_index(&c.owner)?;
        let key = self.custodians[ci].keypair.clone();
        self.exec(&key, Call::Transfer { contract, new_owner: caller })?;
        let vault = self.vault_mut(&caller)?;
        vault.set_contract(contract);
        vault.set_current_entry(c.entry_id);
        self.note_transition(contract, before, "claim_weak");
        Ok(())
    }

    /// Tumbles the owner's entry with `k` decoys without touching the contract.
    pub fn revoke_link(&mut self, caller: Address, contract: Address, k: Option<usize>) -> Result<TumbleReceipt, ProtocolError> {
        let c = self.require_owner(&caller, &contract)?;
        let before = self.require_state(&contract, &[OwnershipState::ClaimedWeakLinked])?;
        let si = self.users[&contract].custodian;
        let current = c.entry_id.expect("linked state has an entry id");
        let k = k.unwrap_or(self.config.k_default);
        let receipt = self.stores[si].tumble(&self.ledger, caller, &current, k, self.now)?;
        self.flush_feed(si);
        self.emit(TraceEvent::TumbleReceipt {
            endpoint: self.stores[si].endpoint_url().to_string(),
            owner: caller,
            receipt: receipt.clone(),
        });
        self.entry_owner.remove(&current);
        self.entry_owner.insert(receipt.new_id, contract);
        self.vault_mut(&caller)?.receive_receipt(receipt.clone());
        self.note_transition(contract, Some(before), "revoke_link");
        Ok(receipt)
    }

    /// Discloses the current entry id to `grantee`. With `republish` a
    /// revoked owner also points the contract and directory at it again.
    pub fn grant_access(
        &mut self,
        caller: Address,
        contract: Address,
        grantee: Address,
        republish: bool,
    ) -> Result<IdDisclosure, ProtocolError> {
        self.require_owner(&caller, &contract)?;
        let before =
            self.require_state(&contract, &[OwnershipState::ClaimedWeakLinked, OwnershipState::ClaimedWeakRevoked])?;
        if !self.third_parties.contains(&grantee) {
            return Err(ProtocolError::NotThirdParty(grantee));
        }
        let entry_id = self
            .vaults
            .get(&caller)
            .and_then(Vault::current_entry)
            .ok_or_else(|| ProtocolError::NotFound("current entry".into()))?;
        let endpoint_url = self.stores[self.users[&contract].custodian].endpoint_url().to_string();
        let disclosure = IdDisclosure { grantee, entry_id, endpoint_url };
        self.disclosures.entry(grantee).or_default().insert(contract, disclosure.clone());
        let republished = republish && before == OwnershipState::ClaimedWeakRevoked;
        self.emit(TraceEvent::Grant { owner: caller, contract, grantee, entry_id, republished });
        if republished {
            let key = self.vault_key(&caller)?;
            self.exec(&key, Call::SetEntryId { contract, entry_id: Some(entry_id), endpoint_url: None })?;
            self.exec(&key, Call::DirectoryPut { entry_id, contract })?;
            self.note_transition(contract, Some(before), "grant_access");
        }
        Ok(disclosure)
    }

    /// Moves the identifying payload from the custodian store into the
    /// owner's vault and points the contract at the vault, all or nothing.
    pub fn claim_strong(&mut self, caller: Address, contract: Address) -> Result<(), ProtocolError> {
        let c = self.require_owner(&caller, &contract)?;
        let before = self.require_state(&contract, &[OwnershipState::ClaimedWeakLinked])?;
        if !self.vaults.contains_key(&caller) {
            return Err(ProtocolError::NoVault(caller));
        }
        let key = self.vault_key(&caller)?;
        let mut ctx = ClaimStrongCtx {
            owner: caller,
            contract,
            entry: c.entry_id.expect("linked state has an entry id"),
            store: self.users[&contract].custodian,
            payload: None,
            deleted: None,
            ingested: false,
            vault_set: false,
            cleared: vec![],
            before,
        };
        let saga = SagaKind::ClaimStrong;
        let saga_id = self.next_saga;
        self.next_saga += 1;
        self.saga_event(saga, saga_id, Some(contract), SagaPhase::Begin);
        for boundary in 0..CLAIM_STRONG_BOUNDARIES {
            if let Some(mode) = self.take_fault(saga, boundary) {
                return Err(self.end_claim_strong(saga_id, ctx, boundary, mode, "injected fault".into()));
            }
            let step: Result<&str, ProtocolError> = match boundary {
                0 => self.stores[ctx.store].delete_entry(&self.ledger, caller, &ctx.entry).map_err(Into::into).map(|d| {
                    ctx.payload = Some(d.payload().clone());
                    ctx.deleted = Some(d);
                    self.flush_feed(ctx.store);
                    "store_delete"
                }),
                1 => {
                    let payload = ctx.payload.clone().expect("step 0 done");
                    self.vault_mut(&caller).and_then(|v| v.ingest_payload(payload).map_err(Into::into)).map(|_| {
                        ctx.ingested = true;
                        "vault_ingest"
                    })
                }
                2 => self.exec(&key, Call::SetVault { contract, vault_address: caller }).map(|_| {
                    ctx.vault_set = true;
                    "set_vault"
                }),
                3 => {
                    let mapped: Vec<EntryId> =
                        self.ledger.directory().iter().filter(|(_, a)| **a == contract).map(|(id, _)| *id).collect();
                    let mut result = Ok("directory_clear");
                    for entry_id in mapped {
                        match self.exec(&key, Call::DirectoryClear { entry_id }) {
                            Ok(_) => ctx.cleared.push(entry_id),
                            Err(e) => {
                                result = Err(e);
                                break;
                            }
                        }
                    }
                    result
                }
                _ => break,
            };
            match step {
                Ok(name) => self.saga_event(saga, saga_id, Some(contract), SagaPhase::Step { name: name.into() }),
                Err(e) => return Err(self.end_claim_strong(saga_id, ctx, boundary, FaultMode::Recover, e.to_string())),
            }
        }
        self.entry_owner.remove(&ctx.entry);
        self.vault_mut(&caller)?.set_current_entry(None);
        let observation = self.claim_strong_observation(&ctx);
        self.saga_event(saga, saga_id, Some(contract), SagaPhase::Committed { observation });
        self.note_transition(contract, Some(before), "claim_strong");
        Ok(())
    }

    fn claim_strong_observation(&self, ctx: &ClaimStrongCtx) -> SagaObservation {
        let in_vault = match (&ctx.payload, self.vaults.get(&ctx.owner)) {
            (Some(p), Some(v)) => v.holds(p),
            _ => false,
        };
        SagaObservation::ClaimStrong {
            in_store: self.stores[ctx.store].contains(&ctx.entry),
            in_vault,
            contract_points_to_vault: self
                .ledger
                .read_contract(&ctx.contract)
                .is_ok_and(|c| c.vault_address == Some(ctx.owner)),
        }
    }

    fn end_claim_strong(
        &mut self,
        saga_id: u64,
        mut ctx: ClaimStrongCtx,
        boundary: usize,
        mode: FaultMode,
        reason: String,
    ) -> ProtocolError {
        let saga = SagaKind::ClaimStrong;
        if mode == FaultMode::Crash {
            let observation = self.claim_strong_observation(&ctx);
            self.saga_event(saga, saga_id, Some(ctx.contract), SagaPhase::Crashed { boundary, observation });
            return ProtocolError::Crashed { saga, boundary };
        }
        let before = Some(ctx.before);
        if let Ok(key) = self.vault_key(&ctx.owner) {
            if ctx.vault_set {
                let endpoint_url = Some(self.stores[ctx.store].endpoint_url().to_string());
                let _ = self.exec(&key, Call::SetEntryId { contract: ctx.contract, entry_id: Some(ctx.entry), endpoint_url });
            }
            for entry_id in std::mem::take(&mut ctx.cleared) {
                let _ = self.exec(&key, Call::DirectoryPut { entry_id, contract: ctx.contract });
            }
        }
        if ctx.ingested {
            if let Some(v) = self.vaults.get_mut(&ctx.owner) {
                v.clear_payload();
            }
        }
        if let Some(deleted) = ctx.deleted.take() {
            self.stores[ctx.store].restore_entry(deleted);
            self.flush_feed(ctx.store);
        }
        let observation = self.claim_strong_observation(&ctx);
        self.saga_event(saga, saga_id, Some(ctx.contract), SagaPhase::RolledBack { boundary, observation });
        self.note_transition(ctx.contract, before, "claim_strong_rollback");
        ProtocolError::SagaAborted { saga, boundary, reason }
    }

    pub fn set_access_flag(&mut self, caller: Address, contract: Address, flag: bool) -> Result<(), ProtocolError> {
        self.require_owner(&caller, &contract)?;
        let key = match self.custodian_index(&caller) {
            Ok(ci) => self.custodians[ci].keypair.clone(),
            Err(_) => self.vault_key(&caller)?,
        };
        self.exec(&key, Call::SetAccessFlag { contract, flag })?;
        Ok(())
    }

    // ---- resolution ----

    fn fields_or_all(&self, requested: &[String]) -> Vec<String> {
        if requested.is_empty() {
            self.config.identity_schema.clone()
        } else {
            requested.to_vec()
        }
    }

    fn select_fields(payload: &Payload, fields: &[String]) -> Payload {
        fields.iter().filter_map(|f| payload.get(f).map(|v| (f.clone(), v.clone()))).collect()
    }

    /// Resolves a contract address to identifying information, subject to
    /// the access flag, link liveness and, for vault owners, consent.
    pub fn resolve_identity(
        &mut self,
        requester: Address,
        contract: Address,
        purpose: &str,
        requested_fields: &[String],
    ) -> Result<ResolutionOutcome, ProtocolError> {
        let state = self.state_of(&contract);
        if !self.third_parties.contains(&requester) {
            let outcome = ResolutionOutcome::Denied { reason: DenyReason::Unauthorized };
            self.emit(TraceEvent::Resolution { requester, contract: Some(contract), via: "contract".into(), state, outcome: outcome.clone() });
            return Ok(outcome);
        }
        let c = self.ledger.read_contract(&contract).map_err(|_| ProtocolError::NotFound(format!("contract {contract}")))?.clone();
        let fields = self.fields_or_all(requested_fields);
        let outcome = if !c.access_flag {
            ResolutionOutcome::Denied { reason: DenyReason::FlagOff }
        } else if let Some(vault_address) = c.vault_address {
            self.request_consent(requester, contract, vault_address, purpose, fields)
        } else {
            match (c.entry_id, c.endpoint_url.as_deref().and_then(|u| self.store_for_endpoint(u))) {
                (Some(id), Some(store)) => match store.read_entry(&id) {
                    Ok(view) => ResolutionOutcome::Identified { payload: Self::select_fields(&view.payload, &fields) },
                    Err(_) => ResolutionOutcome::Denied { reason: DenyReason::LinkBroken },
                },
                _ => ResolutionOutcome::Denied { reason: DenyReason::LinkBroken },
            }
        };
        self.emit(TraceEvent::Resolution { requester, contract: Some(contract), via: "contract".into(), state, outcome: outcome.clone() });
        Ok(outcome)
    }

    fn request_consent(
        &mut self,
        requester: Address,
        contract: Address,
        vault_address: Address,
        purpose: &str,
        fields: Vec<String>,
    ) -> ResolutionOutcome {
        let request_id = self.next_request;
        self.next_request += 1;
        let request = ConsentRequest { request_id, requester, purpose: purpose.into(), requested_fields: fields };
        let mode = self.config.consent_mode;
        let now = self.now;
        let Some(vault) = self.vaults.get_mut(&vault_address) else {
            return ResolutionOutcome::Denied { reason: DenyReason::LinkBroken };
        };
        match mode {
            ConsentMode::Deferred => {
                vault.enqueue(request);
                self.pending_consents.insert(request_id, PendingConsent { requester, contract });
                ResolutionOutcome::ConsentPending { request_id }
            }
            ConsentMode::Immediate => {
                let response = vault.handle_consent(request.clone(), now);
                let outcome = Self::consent_outcome(response.as_ref().ok());
                let disclosed = match &outcome {
                    ResolutionOutcome::Identified { payload } => payload.keys().cloned().collect(),
                    _ => vec![],
                };
                self.emit(TraceEvent::Consent { owner: vault_address, request, approved: outcome.is_identified(), disclosed });
                outcome
            }
        }
    }

    fn consent_outcome(response: Option<&ConsentResponse>) -> ResolutionOutcome {
        match response {
            Some(ConsentResponse::Approve { fields, .. }) => ResolutionOutcome::Identified { payload: fields.clone() },
            _ => ResolutionOutcome::Denied { reason: DenyReason::OwnerDenied },
        }
    }

    /// Answers every queued consent request at the owner's vault.
    pub fn process_consents(&mut self, owner: Address) -> Result<Vec<ConsentResponse>, ProtocolError> {
        let now = self.now;
        let vault = self.vault_mut(&owner)?;
        let start = vault.decisions().len();
        let responses = vault.process_pending(now)?;
        let decided: Vec<_> = vault.decisions()[start..].to_vec();
        for (response, record) in responses.iter().zip(decided) {
            let Decided::Consent { request } = record.subject else { continue };
            self.emit(TraceEvent::Consent { owner, request, approved: record.approved, disclosed: record.disclosed });
            let outcome = Self::consent_outcome(Some(response));
            if let Some(p) = self.pending_consents.remove(&response.request_id()) {
                let state = self.state_of(&p.contract);
                self.emit(TraceEvent::Resolution {
                    requester: p.requester,
                    contract: Some(p.contract),
                    via: "consent".into(),
                    state,
                    outcome: outcome.clone(),
                });
                self.consent_results.insert(response.request_id(), (p.requester, outcome));
            }
        }
        Ok(responses)
    }

    /// Outcome of a deferred consent request. `None` while still pending.
    pub fn consent_result(&self, requester: Address, request_id: u64) -> Result<Option<ResolutionOutcome>, ProtocolError> {
        match self.consent_results.get(&request_id) {
            Some((r, outcome)) if *r == requester => Ok(Some(outcome.clone())),
            Some(_) => Err(ProtocolError::NotFound(format!("request {request_id}"))),
            None if self.pending_consents.get(&request_id).is_some_and(|p| p.requester == requester) => Ok(None),
            None => Err(ProtocolError::NotFound(format!("request {request_id}"))),
        }
    }

    /// Direct read of an identity entry by id (the path a grant enables).
    pub fn read_entry(
        &mut self,
        requester: Address,
        endpoint_url: &str,
        entry_id: EntryId,
    ) -> Result<EntryView, ProtocolError> {
        let si = self.store_index(endpoint_url)?;
        let result = self.stores[si].read_entry(&entry_id);
        let contract = self.entry_owner.get(&entry_id).copied();
        let state = contract.and_then(|c| self.state_of(&c));
        let outcome = match &result {
            Ok(view) => ResolutionOutcome::Identified { payload: view.payload.clone() },
            Err(_) => ResolutionOutcome::Denied { reason: DenyReason::LinkBroken },
        };
        self.emit(TraceEvent::Resolution { requester, contract, via: "entry_read".into(), state, outcome });
        Ok(result?)
    }

    /// Whitelisted record query followed by resolution of every hit.
    #[allow(clippy::too_many_arguments)]
    pub fn search_candidates(
        &mut self,
        requester: Address,
        node: usize,
        query_name: &str,
        params: &BTreeMap<String, Value>,
        purpose: &str,
        requested_fields: &[String],
    ) -> Result<SearchResult, ProtocolError> {
        let result = self.query(requester, node, query_name, params)?;
        let mut resolved: BTreeMap<Address, ResolutionOutcome> = BTreeMap::new();
        let mut candidates = Vec::with_capacity(result.rows.len());
        for row in result.rows {
            let resolution = match resolved.get(&row.contract_address) {
                Some(o) => o.clone(),
                None => {
                    let o = match self.resolve_identity(requester, row.contract_address, purpose, requested_fields) {
                        Ok(o) => o,
                        Err(_) => ResolutionOutcome::Denied { reason: DenyReason::LinkBroken },
                    };
                    resolved.insert(row.contract_address, o.clone());
                    o
                }
            };
            candidates.push(Candidate { contract_address: row.contract_address, projection: row.projection, resolution });
        }
        Ok(SearchResult { candidates, aggregate: result.aggregate })
    }

    /// Known-person path: identity search, directory lookup, reverse lookup.
    pub fn lookup_by_identity(
        &mut self,
        requester: Address,
        endpoint_url: &str,
        criteria: &Predicate,
        node: usize,
    ) -> Result<Vec<LookupHit>, ProtocolError> {
        if !self.third_parties.contains(&requester) {
            return Err(ProtocolError::NotThirdParty(requester));
        }
        let si = self.store_index(endpoint_url)?;
        let ids = self.stores[si].search_payload(criteria)?;
        let records_node = self.cluster.node(node)?;
        let mut hits = Vec::with_capacity(ids.len());
        let mut events = Vec::new();
        for entry_id in ids {
            let outcome = match self.ledger.directory_lookup(&entry_id) {
                Some(contract_address) => {
                    events.push((entry_id, Some(contract_address)));
                    LookupOutcome::Found { contract_address, records: records_node.reverse_lookup(&contract_address) }
                }
                None => {
                    events.push((entry_id, None));
                    LookupOutcome::Denied { reason: "claimed".into() }
                }
            };
            hits.push(LookupHit { entry_id, outcome });
        }
        for (_entry_id, contract) in events {
            let state = contract.and_then(|c| self.state_of(&c));
            let outcome = match contract {
                Some(_) => ResolutionOutcome::Identified { payload: Payload::new() },
                None => ResolutionOutcome::Denied { reason: DenyReason::LinkBroken },
            };
            self.emit(TraceEvent::Resolution { requester, contract, via: "directory".into(), state, outcome });
        }
        Ok(hits)
    }

    pub fn search_payload(&self, endpoint_url: &str, criteria: &Predicate) -> Result<Vec<EntryId>, ProtocolError> {
        let si = self.store_index(endpoint_url)?;
        Ok(self.stores[si].search_payload(criteria)?)
    }

    // ---- messaging ----

    pub fn send_message(&mut self, sender_role: &str, to: Address, body: String) -> Result<u64, ProtocolError> {
        if !self.users.contains_key(&to) {
            return Err(ProtocolError::NotFound(format!("contract {to}")));
        }
        let message_id = self.next_message;
        self.next_message += 1;
        self.messages.entry(to).or_default().push(Message { message_id, to, body, sender_role: sender_role.into() });
        self.emit(TraceEvent::Message { message_id, to, sender_role: sender_role.into() });
        Ok(message_id)
    }

    pub fn fetch_messages(&self, caller: Address, contract: Address) -> Result<Vec<Message>, ProtocolError> {
        self.require_owner(&caller, &contract)?;
        Ok(self.messages.get(&contract).cloned().unwrap_or_default())
    }

    // ---- records ----

    fn origin_node(&self, custodian: &Address) -> Result<usize, ProtocolError> {
        self.custodian_index(custodian)
    }

    pub fn create_record(
        &mut self,
        custodian: Address,
        contract_address: Address,
        schema_tag: &str,
        payload: RecordPayload,
        links: Vec<RecordId>,
    ) -> Result<RecordId, ProtocolError> {
        let node = self.origin_node(&custodian)?;
        self.ledger.read_contract(&contract_address)?;
        self.rules.scan_payload(&payload)?;
        if !self.rules.schema_tags.iter().any(|t| t == schema_tag) {
            return Err(RecordError::UnknownSchemaTag(schema_tag.into()).into());
        }
        let origin = self.cluster.node(node)?;
        if let Some(missing) = links.iter().find(|l| origin.get(l).is_none()) {
            return Err(RecordError::DanglingLink(*missing).into());
        }
        let key = self.custodians[node].keypair.clone();
        let op = RecordOp::create(
            &key,
            CreateBody { contract_address, links, schema_tag: schema_tag.into(), payload, creator: custodian, logical_ts: self.now },
        );
        let id = op.record_id();
        self.submit_record_op(node, op)?;
        Ok(id)
    }

    /// Returns the index of the new version at the origin node.
    pub fn append_record(&mut self, custodian: Address, record_id: RecordId, payload: RecordPayload) -> Result<usize, ProtocolError> {
        let node = self.origin_node(&custodian)?;
        self.rules.scan_payload(&payload)?;
        if self.cluster.node(node)?.get(&record_id).is_none() {
            return Err(RecordError::NotFound(record_id).into());
        }
        let key = self.custodians[node].keypair.clone();
        let op = RecordOp::append(&key, record_id, payload.clone(), self.now);
        let signature = match &op {
            RecordOp::Append { signature, .. } => *signature,
            RecordOp::Create { .. } => unreachable!(),
        };
        self.submit_record_op(node, op)?;
        let record = self.cluster.node(node)?.get(&record_id).expect("checked");
        Ok(record.versions.iter().position(|v| v.signature == signature).unwrap_or(record.versions.len() - 1))
    }

    fn submit_record_op(&mut self, node: usize, op: RecordOp) -> Result<(), ProtocolError> {
        let digest = op.digest();
        self.emit(TraceEvent::RecordOp { node, op: op.clone() });
        let outcome = self.cluster.replicate(node, op, self.now)?;
        self.emit(TraceEvent::RecordDelivery { node, op_digest: digest, outcome });
        Ok(())
    }

    /// Delivers `op` to one node as if it arrived over the network.
    pub fn inject_record_op(&mut self, node: usize, op: RecordOp) {
        self.emit(TraceEvent::RecordOp { node, op: op.clone() });
        self.cluster.inject(node, op, self.now);
    }

    pub fn reverse_lookup(&self, node: usize, contract: &Address) -> Result<Vec<DataRecord>, ProtocolError> {
        Ok(self.cluster.node(node)?.reverse_lookup(contract))
    }

    /// Owner reads their own records.
    pub fn my_records(&self, caller: Address, contract: Address, node: usize) -> Result<Vec<DataRecord>, ProtocolError> {
        self.require_owner(&caller, &contract)?;
        self.reverse_lookup(node, &contract)
    }

    pub fn query(
        &mut self,
        requester: Address,
        node: usize,
        name: &str,
        params: &BTreeMap<String, Value>,
    ) -> Result<QueryResult, ProtocolError> {
        let n = self.cluster.node(node)?;
        let result = n.query(&self.whitelist, name, params)?;
        let content_digest = sha256(n.export_snapshot().as_bytes());
        let mut result_addresses: Vec<Address> = result.rows.iter().map(|r| r.contract_address).collect();
        result_addresses.dedup();
        self.emit(TraceEvent::Query {
            requester,
            node,
            name: name.into(),
            params: serde_json::to_value(params).expect("params serialize"),
            whitelist_version: self.whitelist.version(),
            content_digest,
            result_addresses,
            projection_digest: digest_of(&result.rows),
            aggregate: result.aggregate,
        });
        Ok(result)
    }

    pub fn manage_whitelist(
        &mut self,
        custodian: Address,
        action: WhitelistAction,
        document: QueryDocument,
    ) -> Result<u64, ProtocolError> {
        self.custodian_index(&custodian)?;
        let version = self.whitelist.apply(custodian, action, document, &self.rules.denylist)?;
        let change = self.whitelist.history().last().expect("just applied").clone();
        self.emit(TraceEvent::Whitelist { change });
        Ok(version)
    }

    // ---- export ----

    /// Emits the end-of-run snapshots used by audits and attacks.
    pub fn finalize(&mut self) {
        for si in 0..self.stores.len() {
            self.flush_feed(si);
            let endpoint = self.stores[si].endpoint_url().to_string();
            let entries = self.stores[si].snapshot();
            self.emit(TraceEvent::StoreSnapshot { endpoint, entries });
        }
        let mut node_digests = Vec::new();
        for node in 0..self.cluster.nodes().len() {
            let snapshot = self.cluster.nodes()[node].export_snapshot();
            let digest = sha256(snapshot.as_bytes());
            node_digests.push(digest);
            let records = serde_json::from_str(&snapshot).expect("snapshot is JSON");
            self.emit(TraceEvent::RecordSnapshot { node, digest, records });
        }
        let ledger_digest = sha256(self.ledger.canonical_state().as_bytes());
        let states = self.states();
        self.emit(TraceEvent::FinalState { ledger_head: self.ledger.head(), ledger_digest, node_digests, states });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::Call;
    use crate::trace::TraceEvent;
    use serde_json::json;

    struct Fixture {
        sys: System,
        uni: Address,
        uni_b: Address,
        employer: Address,
        donor: Address,
    }

    fn payload(name: &str, sn: &str) -> Payload {
        [("name", name), ("contact", "012 345 6789"), ("student_number", sn)]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn fixture() -> Fixture {
        let mut cfg = SystemConfig::new(&["uct", "wits"], 42);
        cfg.unique_key = Some("student_number".into());
        cfg.k_default = 3;
        let mut sys = System::new(cfg).unwrap();
        let employer = derive_keypair(42, "employer").address();
        let donor = derive_keypair(42, "donor").address();
        sys.register_third_party(employer);
        sys.register_third_party(donor);
        let c = sys.custodians();
        Fixture { uni: c[0].address, uni_b: c[1].address, employer, donor, sys }
    }

    /// Registers, provisions a vault and weakly claims. Returns (owner, contract).
    fn claimed(f: &mut Fixture, name: &str, sn: &str) -> (Address, Address) {
        let reg = f.sys.register_user(f.uni, payload(name, sn), Some(0.5)).unwrap();
        let seed = format!("42:{name}");
        let owner = Keypair::from_seed(seed.as_bytes()).address();
        f.sys.provision_vault(owner, &seed).unwrap();
        let token = f.sys.issue_claim_token(f.uni, reg.contract_address, owner).unwrap();
        f.sys.claim_weak(owner, reg.contract_address, &token).unwrap();
        (owner, reg.contract_address)
    }

    fn seed_chaff(f: &mut Fixture, n: usize) {
        for i in 0..n {
            f.sys.register_user(f.uni, payload(&format!("Filler {i}"), &format!("F{i:04}")), Some(0.9)).unwrap();
        }
    }

    #[test]
    fn registration_emits_one_create_deploy_and_put() {
        let mut f = fixture();
        let start = f.sys.trace().len();
        let reg = f.sys.register_user(f.uni, payload("Thandi Nkosi", "NKSTHA001"), Some(0.5)).unwrap();
        let events: Vec<&TraceEvent> = f.sys.trace().events().skip(start).collect();
        let kinds: Vec<&str> = events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::LedgerTx { entry } => Some(entry.signed.tx.call.kind()),
                _ => None,
            })
            .collect();
        assert_eq!(kinds, vec!["deploy", "directory_put"]);
        let feed: Vec<u64> = events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::StoreFeed { feed_event, .. } => Some(feed_event.batch_id),
                _ => None,
            })
            .collect();
        let chaff = f.sys.store(0).unwrap().chaff_count();
        assert_eq!(feed.len(), 1 + chaff);
        assert!(feed.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(f.sys.state_of(&reg.contract_address), Some(OwnershipState::CustodianHeld));
        let out = f.sys.resolve_identity(f.employer, reg.contract_address, "hiring", &[]).unwrap();
        assert!(out.is_identified());
    }

    #[test]
    fn dedup_across_custodians() {
        let mut f = fixture();
        f.sys.register_user(f.uni, payload("A", "SN1"), None).unwrap();
        let err = f.sys.register_user(f.uni_b, payload("A again", "SN1"), None).unwrap_err();
        assert_eq!(err, ProtocolError::AlreadyRegistered);
        assert!(!err.to_string().contains("0x"));
    }

    #[test]
    fn weak_claim_clears_directory_but_resolves() {
        let mut f = fixture();
        let reg = f.sys.register_user(f.uni, payload("A", "SN1"), None).unwrap();
        let seed = "42:alice";
        let owner = Keypair::from_seed(seed.as_bytes()).address();
        f.sys.provision_vault(owner, seed).unwrap();
        let forged = ClaimToken::issue(&Keypair::from_seed(b"mallory"), reg.contract_address, owner);
        assert_eq!(f.sys.claim_weak(owner, reg.contract_address, &forged), Err(ProtocolError::InvalidToken));
        let token = f.sys.issue_claim_token(f.uni, reg.contract_address, owner).unwrap();
        f.sys.claim_weak(owner, reg.contract_address, &token).unwrap();
        assert_eq!(f.sys.ledger().directory_lookup(&reg.entry_id), None);
        assert!(f.sys.resolve_identity(f.employer, reg.contract_address, "x", &[]).unwrap().is_identified());
        assert_eq!(f.sys.claim_weak(owner, reg.contract_address, &token), Err(ProtocolError::AlreadyClaimed));
        assert_eq!(f.sys.state_of(&reg.contract_address), Some(OwnershipState::ClaimedWeakLinked));
    }

    #[test]
    fn token_for_another_owner_rejected() {
        let mut f = fixture();
        let reg = f.sys.register_user(f.uni, payload("A", "SN1"), None).unwrap();
        let a = Keypair::from_seed(b"a").address();
        let b = Keypair::from_seed(b"b").address();
        f.sys.provision_vault(b, "b").unwrap();
        let token = f.sys.issue_claim_token(f.uni, reg.contract_address, a).unwrap();
        assert_eq!(f.sys.claim_weak(b, reg.contract_address, &token), Err(ProtocolError::InvalidToken));
    }

    #[test]
    fn revoke_breaks_link_and_grant_restores() {
        let mut f = fixture();
        seed_chaff(&mut f, 10);
        let (owner, contract) = claimed(&mut f, "alice", "SN1");
        let receipt = f.sys.revoke_link(owner, contract, Some(3)).unwrap();
        assert_eq!(receipt.decoy_updates.len(), 3);
        assert_eq!(f.sys.vault(&owner).unwrap().current_entry(), Some(receipt.new_id));
        assert_eq!(f.sys.state_of(&contract), Some(OwnershipState::ClaimedWeakRevoked));
        for _ in 0..5 {
            let out = f.sys.resolve_identity(f.employer, contract, "x", &[]).unwrap();
            assert_eq!(out, ResolutionOutcome::Denied { reason: DenyReason::LinkBroken });
        }
        assert!(matches!(f.sys.revoke_link(owner, contract, None), Err(ProtocolError::WrongState { .. })));
        assert!(matches!(f.sys.claim_strong(owner, contract), Err(ProtocolError::WrongState { .. })));

        // two private grants share the id; one revoke makes both stale
        let ep = endpoint_url_for("uct");
        f.sys.grant_access(owner, contract, f.employer, false).unwrap();
        f.sys.grant_access(owner, contract, f.donor, true).unwrap();
        assert_eq!(f.sys.state_of(&contract), Some(OwnershipState::ClaimedWeakLinked));
        assert_eq!(f.sys.ledger().directory_lookup(&receipt.new_id), Some(contract));
        assert!(f.sys.read_entry(f.employer, &ep, receipt.new_id).is_ok());
        f.sys.revoke_link(owner, contract, Some(2)).unwrap();
        for g in [f.employer, f.donor] {
            let d = &f.sys.disclosures_for(&g)[0];
            assert!(matches!(
                f.sys.read_entry(g, &d.endpoint_url.clone(), d.entry_id),
                Err(ProtocolError::Store(StoreError::NotFound))
            ));
        }
    }

    #[test]
    fn non_owner_cannot_revoke_or_grant() {
        let mut f = fixture();
        seed_chaff(&mut f, 5);
        let (_, contract) = claimed(&mut f, "alice", "SN1");
        assert!(matches!(f.sys.revoke_link(f.employer, contract, None), Err(ProtocolError::NotOwner(_))));
        assert!(matches!(f.sys.grant_access(f.employer, contract, f.donor, false), Err(ProtocolError::NotOwner(_))));
    }

    #[test]
    fn strong_claim_moves_payload() {
        let mut f = fixture();
        let (owner, contract) = claimed(&mut f, "alice", "SN1");
        let entry = f.sys.ledger().read_contract(&contract).unwrap().entry_id.unwrap();
        let before = f.sys.store(0).unwrap().read_entry(&entry).unwrap().payload;
        f.sys.claim_strong(owner, contract).unwrap();
        assert!(f.sys.store(0).unwrap().read_entry(&entry).is_err());
        let c = f.sys.ledger().read_contract(&contract).unwrap();
        assert_eq!(c.vault_address, Some(owner));
        assert!(f.sys.vault(&owner).unwrap().holds(&before));
        assert_eq!(f.sys.state_of(&contract), Some(OwnershipState::ClaimedStrong));

        let fields = vec!["name".to_string()];
        assert_eq!(
            f.sys.resolve_identity(f.employer, contract, "x", &fields).unwrap(),
            ResolutionOutcome::Denied { reason: DenyReason::OwnerDenied }
        );
        f.sys.set_vault_policy(owner, ConsentPolicy::AlwaysApprove).unwrap();
        match f.sys.resolve_identity(f.employer, contract, "x", &fields).unwrap() {
            ResolutionOutcome::Identified { payload } => assert_eq!(payload.keys().collect::<Vec<_>>(), vec!["name"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deferred_consent() {
        let mut f = fixture();
        f.sys.config.consent_mode = ConsentMode::Deferred;
        let (owner, contract) = claimed(&mut f, "alice", "SN1");
        f.sys.claim_strong(owner, contract).unwrap();
        f.sys.set_vault_policy(owner, ConsentPolicy::Allowlist { allowed: [f.employer].into() }).unwrap();
        let ResolutionOutcome::ConsentPending { request_id } = f.sys.resolve_identity(f.employer, contract, "x", &[]).unwrap()
        else {
            panic!()
        };
        assert_eq!(f.sys.consent_result(f.employer, request_id), Ok(None));
        assert!(f.sys.consent_result(f.donor, request_id).is_err());
        f.sys.process_consents(owner).unwrap();
        assert!(f.sys.consent_result(f.employer, request_id).unwrap().unwrap().is_identified());
    }

    fn observations(sys: &System) -> Vec<(SagaPhase, bool)> {
        sys.trace()
            .events()
            .filter_map(|e| match e {
                TraceEvent::Saga { detail, .. } => match detail {
                    SagaPhase::Committed { observation }
                    | SagaPhase::RolledBack { observation, .. }
                    | SagaPhase::Crashed { observation, .. } => Some((detail.clone(), observation.is_atomic())),
                    _ => None,
                },
                _ => None,
            })
            .collect()
    }

    #[test]
    fn claim_strong_rolls_back_at_every_boundary() {
        for boundary in 0..CLAIM_STRONG_BOUNDARIES {
            let mut f = fixture();
            let (owner, contract) = claimed(&mut f, "alice", "SN1");
            let state_before = f.sys.ledger().read_contract(&contract).unwrap().clone();
            f.sys.set_fault(Some(FaultPlan { saga: SagaKind::ClaimStrong, boundary, mode: FaultMode::Recover }));
            assert!(matches!(f.sys.claim_strong(owner, contract), Err(ProtocolError::SagaAborted { .. })));
            let after = f.sys.ledger().read_contract(&contract).unwrap();
            assert_eq!(after.entry_id, state_before.entry_id, "boundary {boundary}");
            assert_eq!(after.vault_address, None);
            assert!(!f.sys.vault(&owner).unwrap().has_payload());
            assert_eq!(f.sys.state_of(&contract), Some(OwnershipState::ClaimedWeakLinked));
            assert!(observations(&f.sys).iter().all(|(_, ok)| *ok));
            // and the claim still works afterwards
            f.sys.claim_strong(owner, contract).unwrap();
        }
    }

    #[test]
    fn crash_mid_claim_is_visible() {
        let mut f = fixture();
        let (owner, contract) = claimed(&mut f, "alice", "SN1");
        f.sys.set_fault(Some(FaultPlan { saga: SagaKind::ClaimStrong, boundary: 1, mode: FaultMode::Crash }));
        assert!(matches!(f.sys.claim_strong(owner, contract), Err(ProtocolError::Crashed { .. })));
        assert!(observations(&f.sys).iter().any(|(_, ok)| !*ok));
    }

    #[test]
    fn ingest_failure_keeps_store_entry() {
        let mut f = fixture();
        let (owner, contract) = claimed(&mut f, "alice", "SN1");
        f.sys.vaults.get_mut(&owner).unwrap().ingest_payload(payload("other", "SNX")).unwrap();
        let entry = f.sys.ledger().read_contract(&contract).unwrap().entry_id.unwrap();
        assert!(matches!(f.sys.claim_strong(owner, contract), Err(ProtocolError::SagaAborted { boundary: 1, .. })));
        assert!(f.sys.store(0).unwrap().read_entry(&entry).is_ok());
        assert_eq!(f.sys.state_of(&contract), Some(OwnershipState::ClaimedWeakLinked));
    }

    #[test]
    fn register_rolls_back_at_every_boundary() {
        for boundary in 0..REGISTER_BOUNDARIES {
            let mut f = fixture();
            let entries_before = f.sys.store(0).unwrap().len();
            f.sys.set_fault(Some(FaultPlan { saga: SagaKind::RegisterUser, boundary, mode: FaultMode::Recover }));
            assert!(f.sys.register_user(f.uni, payload("A", "SN1"), None).is_err());
            assert_eq!(f.sys.store(0).unwrap().len(), entries_before);
            assert!(f.sys.ledger().directory().is_empty());
            assert!(f.sys.ledger().contracts().all(|c| c.entry_id.is_none() && !c.access_flag));
            assert!(f.sys.states().is_empty());
            assert!(observations(&f.sys).iter().all(|(_, ok)| *ok));
            // the unique key was not consumed
            f.sys.register_user(f.uni, payload("A", "SN1"), None).unwrap();
        }
    }

    #[test]
    fn access_flag_gates_resolution() {
        let mut f = fixture();
        let (owner, contract) = claimed(&mut f, "alice", "SN1");
        f.sys.set_access_flag(owner, contract, false).unwrap();
        assert_eq!(
            f.sys.resolve_identity(f.employer, contract, "x", &[]).unwrap(),
            ResolutionOutcome::Denied { reason: DenyReason::FlagOff }
        );
        assert!(f.sys.set_access_flag(f.employer, contract, true).is_err());
    }

    #[test]
    fn unregistered_third_party_denied() {
        let mut f = fixture();
        let reg = f.sys.register_user(f.uni, payload("A", "SN1"), None).unwrap();
        let stranger = Keypair::from_seed(b"stranger").address();
        assert_eq!(
            f.sys.resolve_identity(stranger, reg.contract_address, "x", &[]).unwrap(),
            ResolutionOutcome::Denied { reason: DenyReason::Unauthorized }
        );
    }

    #[test]
    fn lookup_chaff_and_claimed_look_alike() {
        let mut f = fixture();
        f.sys.config.chaff_generator = ChaffGenerator::Constant;
        let mut cfg = f.sys.config.clone();
        cfg.chaff_generator = ChaffGenerator::Constant;
        f.sys = System::new(cfg).unwrap();
        f.sys.register_third_party(f.employer);
        f.sys.register_third_party(f.donor);
        let reg = f.sys.register_user(f.uni, payload("Bob", "SN2"), Some(0.9)).unwrap();
        let (_, _contract) = claimed(&mut f, "alice", "SN1");
        let ep = endpoint_url_for("uct");
        let by_name = |n: &str| Predicate::eq("name", json!(n));
        let hits = f.sys.lookup_by_identity(f.donor, &ep, &by_name("Bob"), 0).unwrap();
        assert!(matches!(&hits[0].outcome, LookupOutcome::Found { contract_address, .. } if *contract_address == reg.contract_address));
        let claimed_hit = f.sys.lookup_by_identity(f.donor, &ep, &by_name("alice"), 0).unwrap();
        let chaff_hit = f.sys.lookup_by_identity(f.donor, &ep, &by_name(crate::chaff::CONSTANT_CHAFF_VALUE), 0).unwrap();
        assert_eq!(claimed_hit.len(), 1);
        assert!(!chaff_hit.is_empty());
        let shape = |h: &LookupHit| {
            let mut v = serde_json::to_value(h).unwrap();
            v.as_object_mut().unwrap().remove("entry_id");
            v
        };
        assert_eq!(shape(&claimed_hit[0]), shape(&chaff_hit[0]));
    }

    #[test]
    fn messages_reach_owner_only() {
        let mut f = fixture();
        seed_chaff(&mut f, 5);
        let (owner, contract) = claimed(&mut f, "alice", "SN1");
        f.sys.revoke_link(owner, contract, Some(2)).unwrap();
        let id = f.sys.send_message("third_party", contract, "bursary available".into()).unwrap();
        let inbox = f.sys.fetch_messages(owner, contract).unwrap();
        assert_eq!(inbox[0].message_id, id);
        assert!(!serde_json::to_string(&inbox[0]).unwrap().contains(&f.employer.to_hex()));
        assert!(f.sys.fetch_messages(f.employer, contract).is_err());
        assert!(f.sys.send_message("third_party", Address::NULL, "x".into()).is_err());
    }

    #[test]
    fn search_candidates_mixes_outcomes() {
        let mut f = fixture();
        seed_chaff(&mut f, 10);
        let doc: QueryDocument = serde_json::from_value(json!({
            "name": "course_marks",
            "schema_tag": "mark",
            "params": {"course": "string"},
            "predicate": {"op": "cmp", "field": "course", "cmp": "eq", "value": {"param": "course"}},
            "projection": ["mark"]
        }))
        .unwrap();
        f.sys.manage_whitelist(f.uni, WhitelistAction::Add, doc).unwrap();
        let held = f.sys.register_user(f.uni, payload("held", "SN9"), None).unwrap().contract_address;
        let (o1, revoked) = claimed(&mut f, "rev", "SN1");
        let (o2, strong) = claimed(&mut f, "str", "SN2");
        f.sys.revoke_link(o1, revoked, Some(2)).unwrap();
        f.sys.claim_strong(o2, strong).unwrap();
        for (i, c) in [held, revoked, strong].iter().enumerate() {
            let p: RecordPayload = serde_json::from_value(json!({"course": "CS101", "mark": 60 + i})).unwrap();
            f.sys.create_record(f.uni, *c, "mark", p, vec![]).unwrap();
        }
        let params: BTreeMap<String, Value> = [("course".to_string(), json!("CS101"))].into();
        let res = f.sys.search_candidates(f.employer, 0, "course_marks", &params, "hiring", &[]).unwrap();
        let by: BTreeMap<Address, &ResolutionOutcome> = res.candidates.iter().map(|c| (c.contract_address, &c.resolution)).collect();
        assert!(by[&held].is_identified());
        assert_eq!(by[&revoked], &ResolutionOutcome::Denied { reason: DenyReason::LinkBroken });
        assert_eq!(by[&strong], &ResolutionOutcome::Denied { reason: DenyReason::OwnerDenied });
        assert!(res.candidates.iter().all(|c| c.projection.keys().all(|k| k == "mark")));
    }

    #[test]
    fn records_reject_identifying_fields_and_dangling_links() {
        let mut f = fixture();
        let reg = f.sys.register_user(f.uni, payload("A", "SN1"), None).unwrap();
        let bad: RecordPayload = serde_json::from_value(json!({"name": "A", "mark": 1})).unwrap();
        assert_eq!(
            f.sys.create_record(f.uni, reg.contract_address, "mark", bad, vec![]),
            Err(ProtocolError::Record(RecordError::IdentifyingField("name".into())))
        );
        let ok: RecordPayload = serde_json::from_value(json!({"mark": 1})).unwrap();
        let ghost = RecordId(sha256(b"ghost"));
        assert!(matches!(
            f.sys.create_record(f.uni, reg.contract_address, "mark", ok.clone(), vec![ghost]),
            Err(ProtocolError::Record(RecordError::DanglingLink(_)))
        ));
        let employer = f.employer;
        assert!(f.sys.create_record(employer, reg.contract_address, "mark", ok, vec![]).is_err());
    }

    #[test]
    fn cross_custodian_append_after_convergence() {
        let mut f = fixture();
        let reg = f.sys.register_user(f.uni, payload("A", "SN1"), None).unwrap();
        let p: RecordPayload = serde_json::from_value(json!({"diagnosis": "J45"})).unwrap();
        let rid = f.sys.create_record(f.uni, reg.contract_address, "diagnosis", p, vec![]).unwrap();
        let p2: RecordPayload = serde_json::from_value(json!({"diagnosis": "J45.2"})).unwrap();
        assert!(f.sys.append_record(f.uni_b, rid, p2.clone()).is_err());
        f.sys.converge();
        f.sys.set_time(10);
        assert_eq!(f.sys.append_record(f.uni_b, rid, p2).unwrap(), 1);
        f.sys.converge();
        assert!(f.sys.cluster().is_converged());
    }

    #[test]
    fn update_identity_moves_directory() {
        let mut f = fixture();
        let reg = f.sys.register_user(f.uni, payload("A", "SN1"), None).unwrap();
        let mut p = payload("A", "SN1");
        p.insert("contact".into(), "new@example".into());
        let new = f.sys.update_identity(f.uni, reg.contract_address, p).unwrap();
        assert_ne!(new, reg.entry_id);
        assert_eq!(f.sys.ledger().directory_lookup(&new), Some(reg.contract_address));
        assert_eq!(f.sys.ledger().directory_lookup(&reg.entry_id), None);
        let (owner, contract) = claimed(&mut f, "alice", "SN2");
        let _ = owner;
        assert_eq!(
            f.sys.update_identity(f.uni, contract, payload("alice", "SN2")),
            Err(ProtocolError::Store(StoreError::Claimed))
        );
    }

    #[test]
    fn custodian_rekey_keeps_user_resolvable() {
        let mut f = fixture();
        seed_chaff(&mut f, 10);
        let reg = f.sys.register_user(f.uni, payload("A", "SN1"), None).unwrap();
        let new = f.sys.custodian_rekey(f.uni, reg.contract_address, Some(4)).unwrap();
        assert_eq!(f.sys.ledger().directory_lookup(&new), Some(reg.contract_address));
        assert!(f.sys.resolve_identity(f.employer, reg.contract_address, "x", &[]).unwrap().is_identified());
        assert_eq!(f.sys.state_of(&reg.contract_address), Some(OwnershipState::CustodianHeld));
    }

    #[test]
    fn ledger_in_system_replays() {
        let mut f = fixture();
        seed_chaff(&mut f, 4);
        let (owner, contract) = claimed(&mut f, "alice", "SN1");
        f.sys.revoke_link(owner, contract, Some(1)).unwrap();
        let text = f.sys.ledger().export_ndjson();
        let replayed = Ledger::replay_ndjson(f.sys.ledger().custodians().iter().copied(), &text).unwrap();
        assert_eq!(replayed.canonical_state(), f.sys.ledger().canonical_state());
        let _ = Call::DirectoryClear { entry_id: EntryId::default() };
    }
}
