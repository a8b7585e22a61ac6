//! Principals and signed request envelopes.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ownlink_core::canonical::to_canonical_bytes;
use ownlink_core::crypto::{Keypair, PublicKey, Signature};
use ownlink_core::types::{Address, Millis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Custodian,
    DataOwner,
    ThirdParty,
    Admin,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Custodian, Role::DataOwner, Role::ThirdParty, Role::Admin];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Custodian => "custodian",
            Role::DataOwner => "data_owner",
            Role::ThirdParty => "third_party",
            Role::Admin => "admin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub address: Address,
    pub role: Role,
    pub public_key: PublicKey,
    pub name: String,
    pub registered_at: Millis,
}

/// A request as it crosses the service boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestEnvelope {
    pub principal: Address,
    /// Must exceed every nonce previously accepted from this principal.
    pub nonce: u64,
    /// `module/op`, e.g. `protocol/resolve_identity`.
    pub operation: String,
    #[serde(default)]
    pub params: Value,
    pub signature: Signature,
}

#[derive(Serialize)]
struct SignedPart<'a> {
    domain: &'static str,
    principal: &'a Address,
    nonce: u64,
    operation: &'a str,
    params: &'a Value,
}

impl RequestEnvelope {
    pub fn signing_bytes(principal: &Address, nonce: u64, operation: &str, params: &Value) -> Vec<u8> {
        to_canonical_bytes(&SignedPart { domain: "ownlink-request", principal, nonce, operation, params })
    }

    pub fn sign(key: &Keypair, nonce: u64, operation: &str, params: Value) -> Self {
        let principal = key.address();
        let signature = key.sign(&Self::signing_bytes(&principal, nonce, operation, &params));
        Self { principal, nonce, operation: operation.into(), params, signature }
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.address() == self.principal
            && key.verify(&Self::signing_bytes(&self.principal, self.nonce, &self.operation, &self.params), &self.signature)
    }
}

/// Signs envelopes for one principal with an increasing nonce.
#[derive(Debug, Clone)]
pub struct Client {
    key: Keypair,
    next_nonce: u64,
}

impl Client {
    pub fn new(key: Keypair) -> Self {
        Self { key, next_nonce: 1 }
    }

    pub fn address(&self) -> Address {
        self.key.address()
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public_key()
    }

    pub fn keypair(&self) -> &Keypair {
        &self.key
    }

    pub fn envelope(&mut self, operation: &str, params: Value) -> RequestEnvelope {
        let nonce = self.next_nonce;
        self.next_nonce += 1;
        RequestEnvelope::sign(&self.key, nonce, operation, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn tampering_breaks_signature() {
        let key = Keypair::from_seed(b"k");
        let env = RequestEnvelope::sign(&key, 1, "ledger/read_contract", json!({"a": 1}));
        assert!(env.verify(&key.public_key()));
        let mut bad = env.clone();
        bad.params = json!({"a": 2});
        assert!(!bad.verify(&key.public_key()));
        let mut bad = env.clone();
        bad.nonce = 2;
        assert!(!bad.verify(&key.public_key()));
        assert!(!env.verify(&Keypair::from_seed(b"other").public_key()));
    }

    #[test]
    fn client_nonces_increase() {
        let mut c = Client::new(Keypair::from_seed(b"k"));
        let a = c.envelope("x/y", Value::Null);
        let b = c.envelope("x/y", Value::Null);
        assert!(b.nonce > a.nonce);
    }
}
