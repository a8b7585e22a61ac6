//! The static role matrix. An operation not listed here is denied for
//! every role, and the HTTP router is built from this table alone.

use crate::principal::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub operation: &'static str,
    pub roles: &'static [Role],
}

use Role::*;

const ADMIN: &[Role] = &[Admin];
const CUSTODIAN: &[Role] = &[Custodian];
const OWNER: &[Role] = &[DataOwner];
const THIRD: &[Role] = &[ThirdParty];

pub static ROUTES: &[Route] = &[
    Route { operation: "admin/register_principal", roles: ADMIN },
    // custodians
    Route { operation: "protocol/register_user", roles: CUSTODIAN },
    Route { operation: "protocol/issue_claim_token", roles: CUSTODIAN },
    Route { operation: "protocol/update_identity", roles: CUSTODIAN },
    Route { operation: "protocol/custodian_rekey", roles: CUSTODIAN },
    Route { operation: "protocol/chaff_tumble", roles: CUSTODIAN },
    Route { operation: "record/create_record", roles: CUSTODIAN },
    Route { operation: "record/append_version", roles: CUSTODIAN },
    Route { operation: "record/manage_whitelist", roles: CUSTODIAN },
    Route { operation: "record/reverse_lookup", roles: CUSTODIAN },
    Route { operation: "identity/export_snapshot", roles: CUSTODIAN },
    // data owners
    Route { operation: "protocol/claim_weak", roles: OWNER },
    Route { operation: "protocol/revoke_link", roles: OWNER },
    Route { operation: "protocol/grant_access", roles: OWNER },
    Route { operation: "protocol/claim_strong", roles: OWNER },
    Route { operation: "protocol/set_access_flag", roles: OWNER },
    Route { operation: "protocol/fetch_messages", roles: OWNER },
    Route { operation: "protocol/my_records", roles: OWNER },
    Route { operation: "vault/create_identity", roles: OWNER },
    Route { operation: "vault/set_policy", roles: OWNER },
    Route { operation: "vault/process_consents", roles: OWNER },
    Route { operation: "vault/reveal_contract_address", roles: OWNER },
    // third parties
    Route { operation: "protocol/resolve_identity", roles: THIRD },
    Route { operation: "protocol/consent_result", roles: THIRD },
    Route { operation: "protocol/search_candidates", roles: THIRD },
    Route { operation: "protocol/lookup_by_identity", roles: THIRD },
    Route { operation: "protocol/send_message", roles: THIRD },
    Route { operation: "record/query", roles: THIRD },
    Route { operation: "identity/read_entry", roles: THIRD },
    Route { operation: "identity/search_payload", roles: THIRD },
    // public ledger reads
    Route { operation: "ledger/read_contract", roles: &[Custodian, DataOwner, ThirdParty] },
    Route { operation: "ledger/directory_lookup", roles: &[Custodian, ThirdParty] },
    Route { operation: "ledger/export", roles: &[Custodian, Admin] },
];

pub fn route(operation: &str) -> Option<&'static Route> {
    ROUTES.iter().find(|r| r.operation == operation)
}

/// Pure decision over the static matrix.
pub fn authorize(role: Role, operation: &str) -> bool {
    route(operation).is_some_and(|r| r.roles.contains(&role))
}
