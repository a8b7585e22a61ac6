//! Simulated ledger holding per-user link contracts and the directory contract.
//!
//! All state changes are signed transactions applied through a single
//! serialization point that assigns gap-free sequence numbers. The applied
//! log is append-only; replaying it from genesis reproduces the state
//! byte-for-byte (see [`Ledger::replay`]).
//!
//! Invariants maintained by [`Ledger::submit`]:
//!
//! - a contract never carries both an `entry_id` and a `vault_address`;
//! - only the current owner mutates a contract;
//! - transferring a contract to a non-custodian clears every directory
//!   entry that points at it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{sha256_concat, to_canonical_bytes, to_canonical_string};
use crate::crypto::{Keypair, PublicKey, Signature};
use crate::types::{Address, EntryId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("signature does not verify for signer {0}")]
    InvalidSignature(Address),
    #[error("signer address does not match its public key")]
    SignerKeyMismatch,
    #[error("the null address cannot sign")]
    NullSigner,
    #[error("stale signer sequence {got} for {signer} (last applied {last})")]
    StaleSignerSeq { signer: Address, got: u64, last: u64 },
    #[error("{0} is not a custodian")]
    NotCustodian(Address),
    #[error("unknown contract {0}")]
    UnknownContract(Address),
    #[error("signer {signer} does not own contract {contract}")]
    NotOwner { signer: Address, contract: Address },
    #[error("entry id {0} is already mapped in the directory")]
    DuplicateEntryId(EntryId),
    #[error("entry id {entry_id} is mapped to a different contract {existing}")]
    DirectoryCollision { entry_id: EntryId, existing: Address },
    #[error("entry id {0} is not mapped in the directory")]
    NotMapped(EntryId),
    #[error("the null address is not a valid target")]
    NullAddress,
    #[error("log sequence gap: expected {expected}, found {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("malformed log line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Per-user contract binding a data owner's records to identifying information.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkContract {
    pub address: Address,
    pub owner: Address,
    pub endpoint_url: Option<String>,
    pub entry_id: Option<EntryId>,
    pub access_flag: bool,
    pub vault_address: Option<Address>,
}

/// The transaction kinds the ledger understands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Call {
    Deploy { endpoint_url: String, entry_id: EntryId },
    Transfer { contract: Address, new_owner: Address },
    SetEntryId {
        contract: Address,
        entry_id: Option<EntryId>,
        /// `None` keeps the current endpoint.
        endpoint_url: Option<String>,
    },
    SetAccessFlag { contract: Address, flag: bool },
    SetVault { contract: Address, vault_address: Address },
    DirectoryPut { entry_id: EntryId, contract: Address },
    DirectoryClear { entry_id: EntryId },
}

impl Call {
    pub fn kind(&self) -> &'static str {
        match self {
            Call::Deploy { .. } => "deploy",
            Call::Transfer { .. } => "transfer",
            Call::SetEntryId { .. } => "set_entry_id",
            Call::SetAccessFlag { .. } => "set_access_flag",
            Call::SetVault { .. } => "set_vault",
            Call::DirectoryPut { .. } => "directory_put",
            Call::DirectoryClear { .. } => "directory_clear",
        }
    }
}

/// The signed portion of a transaction.
///
/// The ledger assigns the global sequence number after signing, so the
/// signed bytes carry a per-signer counter instead to rule out resubmission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub signer: Address,
    pub signer_key: PublicKey,
    pub signer_seq: u64,
    pub call: Call,
}

impl Transaction {
    pub fn signing_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self)
    }

    pub fn sign(self, keypair: &Keypair) -> SignedTransaction {
        let signature = keypair.sign(&self.signing_bytes());
        SignedTransaction { tx: self, signature }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedTransaction {
    pub tx: Transaction,
    pub signature: Signature,
}

/// One applied transaction in the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub signed: SignedTransaction,
}

/// A rejected submission. Rejections are recorded but never replayed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub signer: Address,
    pub kind: String,
    pub reason: String,
}

/// Canonical view of the mutable ledger state, used for replay comparison.
#[derive(Debug, Serialize)]
struct CanonicalState<'a> {
    head: u64,
    contracts: &'a BTreeMap<Address, LinkContract>,
    directory: &'a BTreeMap<EntryId, Address>,
    signer_seqs: &'a BTreeMap<Address, u64>,
}

#[derive(Debug, Clone)]
pub struct Ledger {
    custodians: BTreeSet<Address>,
    contracts: BTreeMap<Address, LinkContract>,
    directory: BTreeMap<EntryId, Address>,
    signer_seqs: BTreeMap<Address, u64>,
    log: Vec<LogEntry>,
    rejections: Vec<Rejection>,
}

impl Ledger {
    /// A fresh ledger whose genesis recognizes `custodians`.
    pub fn new(custodians: impl IntoIterator<Item = Address>) -> Self {
        Self {
            custodians: custodians.into_iter().collect(),
            contracts: BTreeMap::new(),
            directory: BTreeMap::new(),
            signer_seqs: BTreeMap::new(),
            log: Vec::new(),
            rejections: Vec::new(),
        }
    }

    pub fn custodians(&self) -> &BTreeSet<Address> {
        &self.custodians
    }

    pub fn is_custodian(&self, address: &Address) -> bool {
        self.custodians.contains(address)
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn rejections(&self) -> &[Rejection] {
        &self.rejections
    }

    pub fn head(&self) -> u64 {
        self.log.len() as u64
    }

    /// Next per-signer counter for `signer`.
    pub fn next_signer_seq(&self, signer: &Address) -> u64 {
        self.signer_seqs.get(signer).copied().unwrap_or(0) + 1
    }

    pub fn read_contract(&self, address: &Address) -> Result<&LinkContract, LedgerError> {
        self.contracts.get(address).ok_or(LedgerError::UnknownContract(*address))
    }

    pub fn contracts(&self) -> impl Iterator<Item = &LinkContract> {
        self.contracts.values()
    }

    pub fn directory_lookup(&self, entry_id: &EntryId) -> Option<Address> {
        self.directory.get(entry_id).copied()
    }

    pub fn directory(&self) -> &BTreeMap<EntryId, Address> {
        &self.directory
    }

    /// The address a deploy at sequence number `seq` produces.
    pub fn contract_address_for(seq: u64, entry_id: &EntryId) -> Address {
        Address(sha256_concat(&[b"link-contract", &seq.to_be_bytes(), entry_id.as_bytes()]))
    }

    /// Signs `call` with `keypair` using its next signer counter and submits it.
    pub fn execute(&mut self, keypair: &Keypair, call: Call) -> Result<u64, LedgerError> {
        let signer = keypair.address();
        let tx = Transaction {
            signer,
            signer_key: keypair.public_key(),
            signer_seq: self.next_signer_seq(&signer),
            call,
        };
        self.submit(tx.sign(keypair))
    }

    /// Validates and applies a signed transaction, returning its sequence
    /// number. Rejected submissions are recorded and leave state untouched.
    pub fn submit(&mut self, signed: SignedTransaction) -> Result<u64, LedgerError> {
        let kind = signed.tx.call.kind().to_string();
        let signer = signed.tx.signer;
        match self.apply(&signed) {
            Ok(()) => {
                let seq = self.head() + 1;
                self.log.push(LogEntry { seq, signed });
                Ok(seq)
            }
            Err(err) => {
                self.rejections.push(Rejection { signer, kind, reason: err.to_string() });
                Err(err)
            }
        }
    }

    fn check_owner(&self, signer: &Address, contract: &Address) -> Result<(), LedgerError> {
        let c = self.read_contract(contract)?;
        if c.owner != *signer {
            return Err(LedgerError::NotOwner { signer: *signer, contract: *contract });
        }
        Ok(())
    }

    fn apply(&mut self, signed: &SignedTransaction) -> Result<(), LedgerError> {
        let tx = &signed.tx;
        if tx.signer.is_null() {
            return Err(LedgerError::NullSigner);
        }
        if tx.signer_key.address() != tx.signer {
            return Err(LedgerError::SignerKeyMismatch);
        }
        if !tx.signer_key.verify(&tx.signing_bytes(), &signed.signature) {
            return Err(LedgerError::InvalidSignature(tx.signer));
        }
        let last = self.signer_seqs.get(&tx.signer).copied().unwrap_or(0);
        if tx.signer_seq <= last {
            return Err(LedgerError::StaleSignerSeq { signer: tx.signer, got: tx.signer_seq, last });
        }

        let seq = self.head() + 1;
        match &tx.call {
            Call::Deploy { endpoint_url, entry_id } => {
                if !self.is_custodian(&tx.signer) {
                    return Err(LedgerError::NotCustodian(tx.signer));
                }
                if self.directory.contains_key(entry_id)
                    || self.contracts.values().any(|c| c.entry_id == Some(*entry_id))
                {
                    return Err(LedgerError::DuplicateEntryId(*entry_id));
                }
                let address = Self::contract_address_for(seq, entry_id);
                self.contracts.insert(
                    address,
                    LinkContract {
                        address,
                        owner: tx.signer,
                        endpoint_url: Some(endpoint_url.clone()),
                        entry_id: Some(*entry_id),
                        access_flag: true,
                        vault_address: None,
                    },
                );
            }
            Call::Transfer { contract, new_owner } => {
                self.check_owner(&tx.signer, contract)?;
                if new_owner.is_null() {
                    return Err(LedgerError::NullAddress);
                }
                let to_custodian = self.is_custodian(new_owner);
                self.contracts.get_mut(contract).expect("checked").owner = *new_owner;
                if !to_custodian {
                    self.directory.retain(|_, mapped| mapped != contract);
                }
            }
            Call::SetEntryId { contract, entry_id, endpoint_url } => {
                self.check_owner(&tx.signer, contract)?;
                let c = self.contracts.get_mut(contract).expect("checked");
                c.entry_id = *entry_id;
                if entry_id.is_some() {
                    c.vault_address = None;
                }
                if let Some(url) = endpoint_url {
                    c.endpoint_url = Some(url.clone());
                }
            }
            Call::SetAccessFlag { contract, flag } => {
                self.check_owner(&tx.signer, contract)?;
                self.contracts.get_mut(contract).expect("checked").access_flag = *flag;
            }
            Call::SetVault { contract, vault_address } => {
                self.check_owner(&tx.signer, contract)?;
                if vault_address.is_null() {
                    return Err(LedgerError::NullAddress);
                }
                let c = self.contracts.get_mut(contract).expect("checked");
                c.vault_address = Some(*vault_address);
                c.entry_id = None;
                c.endpoint_url = None;
            }
            Call::DirectoryPut { entry_id, contract } => {
                self.check_owner(&tx.signer, contract)?;
                if let Some(existing) = self.directory.get(entry_id) {
                    if existing != contract {
                        return Err(LedgerError::DirectoryCollision {
                            entry_id: *entry_id,
                            existing: *existing,
                        });
                    }
                }
                self.directory.insert(*entry_id, *contract);
            }
            Call::DirectoryClear { entry_id } => {
                let mapped = self.directory.get(entry_id).copied().ok_or(LedgerError::NotMapped(*entry_id))?;
                self.check_owner(&tx.signer, &mapped)?;
                self.directory.remove(entry_id);
            }
        }
        self.signer_seqs.insert(tx.signer, tx.signer_seq);
        Ok(())
    }

    /// Canonical JSON encoding of the current state.
    pub fn canonical_state(&self) -> String {
        to_canonical_string(&CanonicalState {
            head: self.head(),
            contracts: &self.contracts,
            directory: &self.directory,
            signer_seqs: &self.signer_seqs,
        })
    }

    /// The applied log as newline-delimited canonical JSON, in sequence order.
    pub fn export_ndjson(&self) -> String {
        let mut out = String::new();
        for entry in &self.log {
            out.push_str(&to_canonical_string(entry));
            out.push('\n');
        }
        out
    }

    /// Rebuilds a ledger from genesis by re-applying `entries`. Every entry is
    /// re-validated, so a tampered log fails to replay.
    pub fn replay<'a>(
        custodians: impl IntoIterator<Item = Address>,
        entries: impl IntoIterator<Item = &'a LogEntry>,
    ) -> Result<Self, LedgerError> {
        let mut ledger = Ledger::new(custodians);
        for entry in entries {
            ledger.apply_entry(entry)?;
        }
        Ok(ledger)
    }

    /// Re-applies one logged entry on top of the current state.
    pub fn apply_entry(&mut self, entry: &LogEntry) -> Result<(), LedgerError> {
        let expected = self.head() + 1;
        if entry.seq != expected {
            return Err(LedgerError::SequenceGap { expected, found: entry.seq });
        }
        self.apply(&entry.signed)?;
        self.log.push(entry.clone());
        Ok(())
    }

    pub fn parse_ndjson(text: &str) -> Result<Vec<LogEntry>, LedgerError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| LedgerError::Malformed { line: i + 1, message: e.to_string() })
            })
            .collect()
    }

    pub fn replay_ndjson(custodians: impl IntoIterator<Item = Address>, text: &str) -> Result<Self, LedgerError> {
        let entries = Self::parse_ndjson(text)?;
        Self::replay(custodians, entries.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::sha256;
    use crate::types::Hash32;

    fn id(n: u8) -> EntryId {
        EntryId(sha256(&[n]))
    }

    fn setup() -> (Ledger, Keypair, Keypair) {
        let custodian = Keypair::from_seed(b"custodian");
        let user = Keypair::from_seed(b"user");
        (Ledger::new([custodian.address()]), custodian, user)
    }

    fn deploy(ledger: &mut Ledger, custodian: &Keypair, entry: EntryId) -> Address {
        let seq = ledger
            .execute(custodian, Call::Deploy { endpoint_url: "ep".into(), entry_id: entry })
            .unwrap();
        let address = Ledger::contract_address_for(seq, &entry);
        ledger.execute(custodian, Call::DirectoryPut { entry_id: entry, contract: address }).unwrap();
        address
    }

    #[test]
    fn deploy_publishes_directory_entry() {
        let (mut ledger, c, _) = setup();
        let addr = deploy(&mut ledger, &c, id(1));
        assert_eq!(ledger.directory_lookup(&id(1)), Some(addr));
        let contract = ledger.read_contract(&addr).unwrap();
        assert_eq!(contract.owner, c.address());
        assert!(contract.access_flag);
        assert_eq!(contract.vault_address, None);
    }

    #[test]
    fn duplicate_entry_id_rejected() {
        let (mut ledger, c, _) = setup();
        deploy(&mut ledger, &c, id(1));
        let err = ledger.execute(&c, Call::Deploy { endpoint_url: "ep".into(), entry_id: id(1) });
        assert_eq!(err, Err(LedgerError::DuplicateEntryId(id(1))));
        assert_eq!(ledger.rejections().len(), 1);
    }

    #[test]
    fn hundred_deploys_log_two_hundred_transactions() {
        let (mut ledger, c, _) = setup();
        for n in 0..100u8 {
            deploy(&mut ledger, &c, id(n));
        }
        let seqs: Vec<u64> = ledger.log().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, (1..=200).collect::<Vec<_>>());
    }

    #[test]
    fn non_custodian_cannot_deploy() {
        let (mut ledger, _, user) = setup();
        let err = ledger.execute(&user, Call::Deploy { endpoint_url: "ep".into(), entry_id: id(1) });
        assert_eq!(err, Err(LedgerError::NotCustodian(user.address())));
    }

    #[test]
    fn transfer_to_user_clears_directory() {
        let (mut ledger, c, user) = setup();
        let addr = deploy(&mut ledger, &c, id(1));
        ledger.execute(&c, Call::Transfer { contract: addr, new_owner: user.address() }).unwrap();
        assert_eq!(ledger.read_contract(&addr).unwrap().owner, user.address());
        assert_eq!(ledger.directory_lookup(&id(1)), None);
    }

    #[test]
    fn transfer_between_custodians_keeps_directory() {
        let c1 = Keypair::from_seed(b"c1");
        let c2 = Keypair::from_seed(b"c2");
        let mut ledger = Ledger::new([c1.address(), c2.address()]);
        let addr = deploy(&mut ledger, &c1, id(1));
        ledger.execute(&c1, Call::Transfer { contract: addr, new_owner: c2.address() }).unwrap();
        assert_eq!(ledger.directory_lookup(&id(1)), Some(addr));
    }

    #[test]
    fn transfer_by_non_owner_rejected_and_state_unchanged() {
        let (mut ledger, c, user) = setup();
        let addr = deploy(&mut ledger, &c, id(1));
        let before = ledger.canonical_state();
        let err = ledger.execute(&user, Call::Transfer { contract: addr, new_owner: user.address() });
        assert!(matches!(err, Err(LedgerError::NotOwner { .. })));
        assert_eq!(ledger.canonical_state(), before);
        assert_eq!(ledger.rejections().len(), 1);
    }

    #[test]
    fn transfer_to_null_rejected() {
        let (mut ledger, c, _) = setup();
        let addr = deploy(&mut ledger, &c, id(1));
        let err = ledger.execute(&c, Call::Transfer { contract: addr, new_owner: Address::NULL });
        assert_eq!(err, Err(LedgerError::NullAddress));
    }

    #[test]
    fn update_entry_id_does_not_touch_directory() {
        let (mut ledger, c, _) = setup();
        let addr = deploy(&mut ledger, &c, id(1));
        ledger
            .execute(&c, Call::SetEntryId { contract: addr, entry_id: Some(id(2)), endpoint_url: None })
            .unwrap();
        assert_eq!(ledger.read_contract(&addr).unwrap().entry_id, Some(id(2)));
        assert_eq!(ledger.directory_lookup(&id(2)), None);
        ledger.execute(&c, Call::SetEntryId { contract: addr, entry_id: None, endpoint_url: None }).unwrap();
        assert_eq!(ledger.read_contract(&addr).unwrap().entry_id, None);
    }

    #[test]
    fn access_flag_toggles_and_logs() {
        let (mut ledger, c, user) = setup();
        let addr = deploy(&mut ledger, &c, id(1));
        for flag in [true, false, true] {
            ledger.execute(&c, Call::SetAccessFlag { contract: addr, flag }).unwrap();
        }
        assert!(ledger.read_contract(&addr).unwrap().access_flag);
        let flag_txs = ledger.log().iter().filter(|e| e.signed.tx.call.kind() == "set_access_flag").count();
        assert_eq!(flag_txs, 3);
        assert!(ledger.execute(&user, Call::SetAccessFlag { contract: addr, flag: false }).is_err());
    }

    #[test]
    fn vault_and_entry_id_are_exclusive() {
        let (mut ledger, c, user) = setup();
        let addr = deploy(&mut ledger, &c, id(1));
        let vault = user.address();
        ledger.execute(&c, Call::SetVault { contract: addr, vault_address: vault }).unwrap();
        let k = ledger.read_contract(&addr).unwrap();
        assert_eq!((k.entry_id, k.vault_address, k.endpoint_url.clone()), (None, Some(vault), None));
        ledger
            .execute(&c, Call::SetEntryId { contract: addr, entry_id: Some(id(3)), endpoint_url: None })
            .unwrap();
        let k = ledger.read_contract(&addr).unwrap();
        assert_eq!((k.entry_id, k.vault_address), (Some(id(3)), None));
        assert!(ledger.execute(&user, Call::SetVault { contract: addr, vault_address: vault }).is_err());
    }

    #[test]
    fn directory_put_rules() {
        let (mut ledger, c, user) = setup();
        let a = deploy(&mut ledger, &c, id(1));
        let b = deploy(&mut ledger, &c, id(2));
        let err = ledger.execute(&c, Call::DirectoryPut { entry_id: id(1), contract: b });
        assert!(matches!(err, Err(LedgerError::DirectoryCollision { .. })));
        let err = ledger.execute(&user, Call::DirectoryPut { entry_id: id(9), contract: a });
        assert!(matches!(err, Err(LedgerError::NotOwner { .. })));
        // owner re-publishes a fresh id after claiming
        ledger.execute(&c, Call::Transfer { contract: a, new_owner: user.address() }).unwrap();
        assert_eq!(ledger.directory_lookup(&id(1)), None);
        ledger.execute(&user, Call::DirectoryPut { entry_id: id(9), contract: a }).unwrap();
        assert_eq!(ledger.directory_lookup(&id(9)), Some(a));
    }

    #[test]
    fn lookup_of_unknown_id_is_null() {
        let (ledger, _, _) = setup();
        assert_eq!(ledger.directory_lookup(&id(42)), None);
        assert!(matches!(
            ledger.read_contract(&Address(Hash32([5; 32]))),
            Err(LedgerError::UnknownContract(_))
        ));
    }

    #[test]
    fn forged_signature_rejected() {
        let (mut ledger, c, user) = setup();
        let tx = Transaction {
            signer: c.address(),
            signer_key: c.public_key(),
            signer_seq: 1,
            call: Call::Deploy { endpoint_url: "ep".into(), entry_id: id(1) },
        };
        let mut signed = tx.sign(&user);
        assert_eq!(ledger.submit(signed.clone()), Err(LedgerError::InvalidSignature(c.address())));
        signed.tx.signer_key = user.public_key();
        assert_eq!(ledger.submit(signed), Err(LedgerError::SignerKeyMismatch));
        assert!(ledger.log().is_empty());
    }

    #[test]
    fn resubmitted_transaction_rejected() {
        let (mut ledger, c, _) = setup();
        let tx = Transaction {
            signer: c.address(),
            signer_key: c.public_key(),
            signer_seq: 1,
            call: Call::Deploy { endpoint_url: "ep".into(), entry_id: id(1) },
        }
        .sign(&c);
        ledger.submit(tx.clone()).unwrap();
        assert!(matches!(ledger.submit(tx), Err(LedgerError::StaleSignerSeq { .. })));
    }

    #[test]
    fn replay_reproduces_state() {
        let (mut ledger, c, user) = setup();
        let a = deploy(&mut ledger, &c, id(1));
        deploy(&mut ledger, &c, id(2));
        ledger.execute(&c, Call::Transfer { contract: a, new_owner: user.address() }).unwrap();
        ledger.execute(&user, Call::SetAccessFlag { contract: a, flag: false }).unwrap();
        let text = ledger.export_ndjson();
        let replayed = Ledger::replay_ndjson([c.address()], &text).unwrap();
        assert_eq!(replayed.canonical_state(), ledger.canonical_state());
        assert_eq!(replayed.export_ndjson(), text);
    }

    #[test]
    fn replay_detects_tampering_and_gaps() {
        let (mut ledger, c, _) = setup();
        deploy(&mut ledger, &c, id(1));
        let mut entries = ledger.log().to_vec();
        entries[0].signed.tx.call = Call::Deploy { endpoint_url: "evil".into(), entry_id: id(1) };
        assert!(matches!(
            Ledger::replay([c.address()], entries.iter()),
            Err(LedgerError::InvalidSignature(_))
        ));
        let gap = [ledger.log()[1].clone()];
        assert!(matches!(Ledger::replay([c.address()], gap.iter()), Err(LedgerError::SequenceGap { .. })));
    }
}
