//! The mediation point: every request is authenticated, authorized against
//! the role matrix, executed and answered, and each stage lands in the trace.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use ownlink_core::crypto::PublicKey;
use ownlink_core::identity_store::Payload;
use ownlink_core::protocol::{ClaimToken, FaultPlan, ProtocolError, System, SystemConfig};
use ownlink_core::query::{Predicate, QueryDocument};
use ownlink_core::record_store::{RecordOp, RecordPayload, WhitelistAction};
use ownlink_core::trace::{Trace, TraceEvent};
use ownlink_core::types::{Address, EntryId, Millis, RecordId};
use ownlink_core::vault::ConsentPolicy;

use crate::principal::{Principal, RequestEnvelope, Role};
use crate::routes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Unauthorized,
    ReplayDetected,
    Forbidden,
    BadRequest,
    NotFound,
    Rejected,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::Unauthorized => "unauthorized",
            ErrorCode::ReplayDetected => "replay_detected",
            ErrorCode::Forbidden => "forbidden",
            ErrorCode::BadRequest => "bad_request",
            ErrorCode::NotFound => "not_found",
            ErrorCode::Rejected => "rejected",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ErrorCode::Unauthorized => 401,
            ErrorCode::ReplayDetected => 409,
            ErrorCode::Forbidden => 403,
            ErrorCode::BadRequest => 400,
            ErrorCode::NotFound => 404,
            ErrorCode::Rejected => 422,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("nonce {got} is not above {last}")]
    ReplayDetected { last: u64, got: u64 },
    #[error("{role} may not call {operation}")]
    Forbidden { role: String, operation: String },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

impl GatewayError {
    pub fn code(&self) -> ErrorCode {
        match self {
            GatewayError::Unauthorized(_) => ErrorCode::Unauthorized,
            GatewayError::ReplayDetected { .. } => ErrorCode::ReplayDetected,
            GatewayError::Forbidden { .. } => ErrorCode::Forbidden,
            GatewayError::BadRequest(_) => ErrorCode::BadRequest,
            GatewayError::Protocol(e) => match e.code() {
                "not_found" => ErrorCode::NotFound,
                "forbidden" => ErrorCode::Forbidden,
                "bad_request" => ErrorCode::BadRequest,
                _ => ErrorCode::Rejected,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    pub code: Option<ErrorCode>,
    pub body: Value,
}

impl Response {
    pub fn ok(body: Value) -> Self {
        Self { ok: true, code: None, body }
    }

    pub fn error(e: &GatewayError) -> Self {
        Self { ok: false, code: Some(e.code()), body: json!({ "message": e.to_string() }) }
    }
}

fn parse<T: DeserializeOwned>(params: &Value) -> Result<T, GatewayError> {
    let v = if params.is_null() { json!({}) } else { params.clone() };
    serde_json::from_value(v).map_err(|e| GatewayError::BadRequest(e.to_string()))
}

fn to_body<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("responses serialize")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterPrincipal {
    public_key: PublicKey,
    role: Role,
    name: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterUser {
    payload: Payload,
    #[serde(default)]
    chaff_ratio: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IssueToken {
    contract: Address,
    new_owner: Address,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UpdateIdentity {
    contract: Address,
    payload: Payload,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContractK {
    contract: Address,
    #[serde(default)]
    k: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OnlyK {
    k: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRecord {
    contract_address: Address,
    schema_tag: String,
    payload: RecordPayload,
    #[serde(default)]
    links: Vec<RecordId>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AppendVersion {
    record_id: RecordId,
    payload: RecordPayload,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManageWhitelist {
    action: WhitelistAction,
    document: QueryDocument,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContractNode {
    contract: Address,
    #[serde(default)]
    node: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClaimWeak {
    contract: Address,
    token: ClaimToken,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GrantAccess {
    contract: Address,
    grantee: Address,
    #[serde(default)]
    republish: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OnlyContract {
    contract: Address,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetFlag {
    contract: Address,
    flag: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateIdentity {
    seed: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetPolicy {
    policy: ConsentPolicy,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RevealTo {
    to: Address,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Resolve {
    contract: Address,
    #[serde(default)]
    purpose: String,
    #[serde(default)]
    requested_fields: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConsentResult {
    request_id: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Search {
    query_name: String,
    #[serde(default)]
    params: BTreeMap<String, Value>,
    #[serde(default)]
    purpose: String,
    #[serde(default)]
    requested_fields: Vec<String>,
    #[serde(default)]
    node: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Lookup {
    endpoint_url: String,
    criteria: Predicate,
    #[serde(default)]
    node: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SendMessage {
    contract: Address,
    body: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Query {
    query_name: String,
    #[serde(default)]
    params: BTreeMap<String, Value>,
    #[serde(default)]
    node: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReadEntry {
    endpoint_url: String,
    entry_id: EntryId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchPayload {
    endpoint_url: String,
    criteria: Predicate,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DirectoryLookup {
    entry_id: EntryId,
}

/// Owns the system. Service operations reach it only through [`Gateway::handle`];
/// the remaining mutators model the environment (clock, network, faults).
pub struct Gateway {
    system: System,
    principals: BTreeMap<Address, Principal>,
    last_nonce: BTreeMap<Address, u64>,
}

impl Gateway {
    /// Starts a system and registers its custodians plus one admin.
    pub fn new(config: SystemConfig, admin_key: PublicKey) -> Result<Self, ProtocolError> {
        let system = System::new(config)?;
        let mut gw = Self { system, principals: BTreeMap::new(), last_nonce: BTreeMap::new() };
        let custodians = gw.system.custodians();
        // Custodian keys come from the same seed derivation the system uses.
        let seed = gw.system.config().seed;
        for c in custodians {
            let key = ownlink_core::protocol::derive_keypair(seed, &c.name).public_key();
            gw.insert_principal(key, Role::Custodian, c.name);
        }
        gw.insert_principal(admin_key, Role::Admin, "admin".into());
        Ok(gw)
    }

    fn insert_principal(&mut self, public_key: PublicKey, role: Role, name: String) -> Address {
        let address = public_key.address();
        let p = Principal { address, role, public_key, name: name.clone(), registered_at: self.system.now() };
        self.principals.insert(address, p);
        if role == Role::ThirdParty {
            self.system.register_third_party(address);
        }
        self.system.record_event(TraceEvent::PrincipalRegistered { address, role: role.as_str().into(), name });
        address
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    pub fn trace(&self) -> &Trace {
        self.system.trace()
    }

    pub fn into_trace(self) -> Trace {
        self.system.into_trace()
    }

    pub fn principal(&self, address: &Address) -> Option<&Principal> {
        self.principals.get(address)
    }

    pub fn principals(&self) -> impl Iterator<Item = &Principal> {
        self.principals.values()
    }

    // ---- environment ----

    pub fn advance_time(&mut self, now: Millis) {
        self.system.set_time(now);
    }

    pub fn converge(&mut self) {
        self.system.converge();
    }

    pub fn set_fault(&mut self, plan: Option<FaultPlan>) {
        self.system.set_fault(plan);
    }

    /// A replication message arriving at `node` from outside the service.
    pub fn network_deliver(&mut self, node: usize, op: RecordOp) {
        self.system.inject_record_op(node, op);
    }

    pub fn record_event(&mut self, event: TraceEvent) {
        self.system.record_event(event);
    }

    pub fn finalize(&mut self) {
        self.system.finalize();
    }

    // ---- mediation ----

    /// Verifies the signature against the registered key and enforces
    /// strictly increasing nonces.
    pub fn authenticate(&mut self, envelope: &RequestEnvelope) -> Result<Principal, GatewayError> {
        let p = self
            .principals
            .get(&envelope.principal)
            .ok_or_else(|| GatewayError::Unauthorized("unknown principal".into()))?;
        if !envelope.verify(&p.public_key) {
            return Err(GatewayError::Unauthorized("bad signature".into()));
        }
        let last = self.last_nonce.get(&envelope.principal).copied().unwrap_or(0);
        if envelope.nonce <= last {
            return Err(GatewayError::ReplayDetected { last, got: envelope.nonce });
        }
        self.last_nonce.insert(envelope.principal, envelope.nonce);
        Ok(p.clone())
    }

    pub fn authorize(principal: &Principal, operation: &str) -> bool {
        routes::authorize(principal.role, operation)
    }

    /// The single entry point for service operations.
    pub fn handle(&mut self, envelope: &RequestEnvelope) -> Response {
        self.system.record_event(TraceEvent::Request { envelope: to_body(envelope) });
        let result = self.mediate(envelope);
        let response = match &result {
            Ok(body) => Response::ok(body.clone()),
            Err(e) => Response::error(e),
        };
        self.system.record_event(TraceEvent::Response {
            route: envelope.operation.clone(),
            ok: response.ok,
            code: response.code.map(|c| c.as_str().to_string()),
            body: response.body.clone(),
        });
        response
    }

    fn mediate(&mut self, envelope: &RequestEnvelope) -> Result<Value, GatewayError> {
        let principal = self.authenticate(envelope)?;
        let allowed = Self::authorize(&principal, &envelope.operation);
        self.system.record_event(TraceEvent::Decision {
            principal: principal.address,
            role: Some(principal.role.as_str().into()),
            route: envelope.operation.clone(),
            allowed,
        });
        if !allowed {
            return Err(GatewayError::Forbidden {
                role: principal.role.as_str().into(),
                operation: envelope.operation.clone(),
            });
        }
        self.dispatch(&principal, &envelope.operation, &envelope.params)
    }

    fn own_node(&self, custodian: &Address) -> usize {
        self.system.custodians().iter().position(|c| c.address == *custodian).unwrap_or(0)
    }

    fn dispatch(&mut self, p: &Principal, operation: &str, params: &Value) -> Result<Value, GatewayError> {
        let caller = p.address;
        let sys = &mut self.system;
        Ok(match operation {
            "admin/register_principal" => {
                let a: RegisterPrincipal = parse(params)?;
                if matches!(a.role, Role::Custodian | Role::Admin) {
                    return Err(GatewayError::BadRequest("custodians and admins are fixed at genesis".into()));
                }
                if self.principals.contains_key(&a.public_key.address()) {
                    return Err(GatewayError::BadRequest("principal already registered".into()));
                }
                let address = self.insert_principal(a.public_key, a.role, a.name);
                json!({ "address": address })
            }
            "protocol/register_user" => {
                let a: RegisterUser = parse(params)?;
                to_body(&sys.register_user(caller, a.payload, a.chaff_ratio)?)
            }
            "protocol/issue_claim_token" => {
                let a: IssueToken = parse(params)?;
                to_body(&sys.issue_claim_token(caller, a.contract, a.new_owner)?)
            }
            "protocol/update_identity" => {
                let a: UpdateIdentity = parse(params)?;
                json!({ "entry_id": sys.update_identity(caller, a.contract, a.payload)? })
            }
            "protocol/custodian_rekey" => {
                let a: ContractK = parse(params)?;
                json!({ "entry_id": sys.custodian_rekey(caller, a.contract, a.k)? })
            }
            "protocol/chaff_tumble" => {
                let a: OnlyK = parse(params)?;
                json!({ "batch_id": sys.chaff_tumble(caller, a.k)? })
            }
            "record/create_record" => {
                let a: CreateRecord = parse(params)?;
                json!({ "record_id": sys.create_record(caller, a.contract_address, &a.schema_tag, a.payload, a.links)? })
            }
            "record/append_version" => {
                let a: AppendVersion = parse(params)?;
                json!({ "version_index": sys.append_record(caller, a.record_id, a.payload)? })
            }
            "record/manage_whitelist" => {
                let a: ManageWhitelist = parse(params)?;
                json!({ "version": sys.manage_whitelist(caller, a.action, a.document)? })
            }
            "record/reverse_lookup" => {
                let a: ContractNode = parse(params)?;
                let node = a.node.unwrap_or_else(|| self.own_node(&caller));
                to_body(&self.system.reverse_lookup(node, &a.contract)?)
            }
            "identity/export_snapshot" => {
                let _: Empty = parse(params)?;
                let node = self.own_node(&caller);
                let store = self.system.store(node).expect("custodian has a store");
                json!({ "endpoint_url": store.endpoint_url(), "snapshot": store.snapshot() })
            }
            "protocol/claim_weak" => {
                let a: ClaimWeak = parse(params)?;
                sys.claim_weak(caller, a.contract, &a.token)?;
                json!({ "owner": caller })
            }
            "protocol/revoke_link" => {
                let a: ContractK = parse(params)?;
                to_body(&sys.revoke_link(caller, a.contract, a.k)?)
            }
            "protocol/grant_access" => {
                let a: GrantAccess = parse(params)?;
                to_body(&sys.grant_access(caller, a.contract, a.grantee, a.republish)?)
            }
            "protocol/claim_strong" => {
                let a: OnlyContract = parse(params)?;
                sys.claim_strong(caller, a.contract)?;
                json!({ "vault_address": caller })
            }
            "protocol/set_access_flag" => {
                let a: SetFlag = parse(params)?;
                sys.set_access_flag(caller, a.contract, a.flag)?;
                json!({ "flag": a.flag })
            }
            "protocol/fetch_messages" => {
                let a: OnlyContract = parse(params)?;
                to_body(&sys.fetch_messages(caller, a.contract)?)
            }
            "protocol/my_records" => {
                let a: ContractNode = parse(params)?;
                to_body(&sys.my_records(caller, a.contract, a.node.unwrap_or(0))?)
            }
            "vault/create_identity" => {
                let a: CreateIdentity = parse(params)?;
                json!({ "vault_address": sys.provision_vault(caller, &a.seed)? })
            }
            "vault/set_policy" => {
                let a: SetPolicy = parse(params)?;
                sys.set_vault_policy(caller, a.policy)?;
                json!({})
            }
            "vault/process_consents" => {
                let _: Empty = parse(params)?;
                to_body(&sys.process_consents(caller)?)
            }
            "vault/reveal_contract_address" => {
                let a: RevealTo = parse(params)?;
                json!({ "contract_address": sys.reveal_contract_address(caller, a.to)? })
            }
            "protocol/resolve_identity" => {
                let a: Resolve = parse(params)?;
                to_body(&sys.resolve_identity(caller, a.contract, &a.purpose, &a.requested_fields)?)
            }
            "protocol/consent_result" => {
                let a: ConsentResult = parse(params)?;
                match sys.consent_result(caller, a.request_id)? {
                    Some(outcome) => to_body(&outcome),
                    None => json!({ "outcome": "consent_pending", "request_id": a.request_id }),
                }
            }
            "protocol/search_candidates" => {
                let a: Search = parse(params)?;
                let node = a.node.unwrap_or(0);
                to_body(&sys.search_candidates(caller, node, &a.query_name, &a.params, &a.purpose, &a.requested_fields)?)
            }
            "protocol/lookup_by_identity" => {
                let a: Lookup = parse(params)?;
                to_body(&sys.lookup_by_identity(caller, &a.endpoint_url, &a.criteria, a.node.unwrap_or(0))?)
            }
            "protocol/send_message" => {
                let a: SendMessage = parse(params)?;
                json!({ "message_id": sys.send_message(p.role.as_str(), a.contract, a.body)? })
            }
            "record/query" => {
                let a: Query = parse(params)?;
                to_body(&sys.query(caller, a.node.unwrap_or(0), &a.query_name, &a.params)?)
            }
            "identity/read_entry" => {
                let a: ReadEntry = parse(params)?;
                to_body(&sys.read_entry(caller, &a.endpoint_url, a.entry_id)?)
            }
            "identity/search_payload" => {
                let a: SearchPayload = parse(params)?;
                to_body(&sys.search_payload(&a.endpoint_url, &a.criteria)?)
            }
            "ledger/read_contract" => {
                let a: OnlyContract = parse(params)?;
                let c = sys.ledger().read_contract(&a.contract).map_err(ProtocolError::from)?;
                to_body(c)
            }
            "ledger/directory_lookup" => {
                let a: DirectoryLookup = parse(params)?;
                json!({ "contract_address": sys.ledger().directory_lookup(&a.entry_id) })
            }
            "ledger/export" => {
                let _: Empty = parse(params)?;
                json!({ "ndjson": sys.ledger().export_ndjson() })
            }
            other => return Err(GatewayError::BadRequest(format!("operation {other} has no handler"))),
        })
    }
}
