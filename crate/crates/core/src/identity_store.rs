//! Per-custodian CRUD store for identifying information.
//!
//! Entries are keyed by `SHA-256(canonical_json(payload) || created_at_be64 || nonce)`.
//! Each real entry is accompanied by fake entries whose external form is
//! indistinguishable from real ones. A tumble re-keys one real entry
//! together with `k` randomly chosen fake entries in a single batch, so an
//! observer of the mutation feed cannot tell which re-key was the real one.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::{sha256_concat, to_canonical_bytes, to_canonical_string};
use crate::chaff::{ChaffGenerator, FieldMarginals};
use crate::ledger::Ledger;
use crate::query::{Operand, Predicate};
use crate::types::{Address, EntryId, Millis};

/// Flat map of personal fields.
pub type Payload = BTreeMap<String, String>;

pub type Nonce = [u8; 16];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("field {0} is not part of the identifying schema")]
    SchemaViolation(String),
    #[error("chaff ratio {0} outside [0, 1)")]
    InvalidChaffRatio(String),
    #[error("{0} is not authorized for this entry")]
    Unauthorized(Address),
    #[error("entry not found")]
    NotFound,
    #[error("need {needed} chaff entries, only {available} exist (short by {})", needed - available)]
    ChaffShortfall { needed: usize, available: usize },
    #[error("entry belongs to a claimed contract; owner consent required")]
    Claimed,
    #[error("malformed predicate: {0}")]
    MalformedPredicate(String),
}

/// Computes the key of an identity entry.
pub fn compute_entry_id(payload: &Payload, created_at: Millis, nonce: &Nonce) -> Result<EntryId, StoreError> {
    if payload.is_empty() {
        return Err(StoreError::EmptyPayload);
    }
    let body = to_canonical_bytes(payload);
    Ok(EntryId(sha256_concat(&[&body, &created_at.to_be_bytes(), nonce])))
}

/// The fields a deployment stores in identity entries. The same list is
/// the denylist for the record store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentitySchema(pub Vec<String>);

impl IdentitySchema {
    pub fn contains(&self, field: &str) -> bool {
        self.0.iter().any(|f| f == field)
    }

    pub fn check(&self, payload: &Payload) -> Result<(), StoreError> {
        if payload.is_empty() {
            return Err(StoreError::EmptyPayload);
        }
        match payload.keys().find(|k| !self.contains(k)) {
            Some(bad) => Err(StoreError::SchemaViolation(bad.clone())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
struct StoredEntry {
    payload: Payload,
    created_at: Millis,
    nonce: Nonce,
    is_chaff: bool,
    /// Earlier keys of this entry, oldest first.
    lineage: Vec<EntryId>,
}

/// The external form of an entry. Real and fake entries look identical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryView {
    pub entry_id: EntryId,
    pub payload: Payload,
    pub created_at: Millis,
}

/// One event in the public mutation feed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedEvent {
    pub removed_id: Option<EntryId>,
    pub added_id: Option<EntryId>,
    pub batch_id: u64,
}

/// Private result of a tumble, delivered only to the requester.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TumbleReceipt {
    pub batch_id: u64,
    pub old_id: EntryId,
    pub new_id: EntryId,
    pub decoy_updates: Vec<(EntryId, EntryId)>,
    /// New ids in the order the k+1 re-keys were applied.
    pub batch_order: Vec<EntryId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Created {
    pub entry_id: EntryId,
    pub chaff_ids: Vec<EntryId>,
}

/// An entry removed by [`IdentityStore::delete_entry`]. Holds everything
/// needed to put it back exactly as it was.
#[derive(Debug, Clone)]
pub struct DeletedEntry {
    entry_id: EntryId,
    entry: StoredEntry,
}

impl DeletedEntry {
    pub fn entry_id(&self) -> EntryId {
        self.entry_id
    }

    pub fn payload(&self) -> &Payload {
        &self.entry.payload
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreConfig {
    pub endpoint_url: String,
    pub custodian: Address,
    pub schema: IdentitySchema,
    #[serde(default)]
    pub chaff_generator: ChaffGenerator,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct IdentityStore {
    config: StoreConfig,
    entries: BTreeMap<EntryId, StoredEntry>,
    chaff: BTreeSet<EntryId>,
    feed: Vec<FeedEvent>,
    next_batch: u64,
    marginals: FieldMarginals,
    rng: ChaCha20Rng,
}

impl IdentityStore {
    pub fn new(config: StoreConfig) -> Self {
        let rng = ChaCha20Rng::seed_from_u64(config.seed);
        Self {
            config,
            entries: BTreeMap::new(),
            chaff: BTreeSet::new(),
            feed: Vec::new(),
            next_batch: 1,
            marginals: FieldMarginals::default(),
            rng,
        }
    }

    pub fn endpoint_url(&self) -> &str {
        &self.config.endpoint_url
    }

    pub fn custodian(&self) -> Address {
        self.config.custodian
    }

    pub fn schema(&self) -> &IdentitySchema {
        &self.config.schema
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn chaff_count(&self) -> usize {
        self.chaff.len()
    }

    pub fn contains(&self, id: &EntryId) -> bool {
        self.entries.contains_key(id)
    }

    /// Custodian-private: whether `id` is a fake entry.
    pub fn is_chaff(&self, id: &EntryId) -> bool {
        self.chaff.contains(id)
    }

    /// Custodian-private: real entries only.
    pub fn real_entries(&self) -> impl Iterator<Item = (&EntryId, &Payload)> {
        self.entries.iter().filter(|(_, e)| !e.is_chaff).map(|(id, e)| (id, &e.payload))
    }

    pub fn feed(&self) -> &[FeedEvent] {
        &self.feed
    }

    fn fresh_nonce(&mut self) -> Nonce {
        let mut nonce = [0u8; 16];
        self.rng.fill(&mut nonce);
        nonce
    }

    fn next_batch(&mut self) -> u64 {
        let b = self.next_batch;
        self.next_batch += 1;
        b
    }

    fn insert(&mut self, entry: StoredEntry) -> EntryId {
        let id = compute_entry_id(&entry.payload, entry.created_at, &entry.nonce).expect("payload checked");
        if entry.is_chaff {
            self.chaff.insert(id);
        }
        self.entries.insert(id, entry);
        id
    }

    fn remove(&mut self, id: &EntryId) -> Option<StoredEntry> {
        self.chaff.remove(id);
        self.entries.remove(id)
    }

    /// Re-keys an existing entry with a fresh nonce at `now`.
    fn rekey(&mut self, old: &EntryId, now: Millis, batch_id: u64) -> EntryId {
        let mut entry = self.remove(old).expect("caller checked existence");
        entry.lineage.push(*old);
        entry.created_at = now;
        entry.nonce = self.fresh_nonce();
        let new = self.insert(entry);
        self.feed.push(FeedEvent { removed_id: Some(*old), added_id: Some(new), batch_id });
        new
    }

    /// Number of chaff entries to create alongside one real entry:
    /// Poisson with mean `ratio / (1 - ratio)`.
    fn draw_chaff_count(&mut self, chaff_ratio: f64) -> usize {
        let mean = chaff_ratio / (1.0 - chaff_ratio);
        if mean <= 0.0 {
            return 0;
        }
        Poisson::new(mean).expect("positive mean").sample(&mut self.rng) as usize
    }

    /// Creates one real entry and a random number of chaff entries.
    pub fn create_entry(
        &mut self,
        caller: Address,
        payload: Payload,
        chaff_ratio: f64,
        now: Millis,
    ) -> Result<Created, StoreError> {
        if caller != self.config.custodian {
            return Err(StoreError::Unauthorized(caller));
        }
        if !(0.0..1.0).contains(&chaff_ratio) {
            return Err(StoreError::InvalidChaffRatio(chaff_ratio.to_string()));
        }
        self.config.schema.check(&payload)?;
        self.marginals.observe(&payload);

        let batch_id = self.next_batch();
        let n_chaff = self.draw_chaff_count(chaff_ratio);
        let mut chaff_payloads = Vec::with_capacity(n_chaff);
        for _ in 0..n_chaff {
            chaff_payloads.push(self.config.chaff_generator.generate(&payload, &self.marginals, &mut self.rng));
        }

        let nonce = self.fresh_nonce();
        let entry_id = self.insert(StoredEntry { payload, created_at: now, nonce, is_chaff: false, lineage: vec![] });
        let mut added = vec![entry_id];
        let mut chaff_ids = Vec::with_capacity(n_chaff);
        for payload in chaff_payloads {
            let nonce = self.fresh_nonce();
            let id = self.insert(StoredEntry { payload, created_at: now, nonce, is_chaff: true, lineage: vec![] });
            chaff_ids.push(id);
            added.push(id);
        }
        added.shuffle(&mut self.rng);
        for id in added {
            self.feed.push(FeedEvent { removed_id: None, added_id: Some(id), batch_id });
        }
        Ok(Created { entry_id, chaff_ids })
    }

    /// Undoes a creation (compensation for an aborted registration).
    pub(crate) fn discard_created(&mut self, created: &Created) {
        let batch_id = self.next_batch();
        for id in std::iter::once(&created.entry_id).chain(&created.chaff_ids) {
            if self.remove(id).is_some() {
                self.feed.push(FeedEvent { removed_id: Some(*id), added_id: None, batch_id });
            }
        }
    }

    pub fn read_entry(&self, id: &EntryId) -> Result<EntryView, StoreError> {
        self.entries
            .get(id)
            .map(|e| EntryView { entry_id: *id, payload: e.payload.clone(), created_at: e.created_at })
            .ok_or(StoreError::NotFound)
    }

    /// Whether `requester` owns a link contract on this endpoint that points,
    /// or once pointed, at the entry stored under `id`.
    fn is_verified_owner(&self, ledger: &Ledger, requester: &Address, id: &EntryId, entry: &StoredEntry) -> bool {
        ledger.contracts().any(|c| {
            c.owner == *requester
                && c.endpoint_url.as_deref() == Some(self.config.endpoint_url.as_str())
                && c.entry_id.is_some_and(|e| e == *id || entry.lineage.contains(&e))
        })
    }

    /// Re-keys the real entry `id` together with `k` fake entries.
    pub fn tumble(
        &mut self,
        ledger: &Ledger,
        requester: Address,
        id: &EntryId,
        k: usize,
        now: Millis,
    ) -> Result<TumbleReceipt, StoreError> {
        let entry = self.entries.get(id).ok_or(StoreError::NotFound)?;
        if entry.is_chaff || !self.is_verified_owner(ledger, &requester, id, entry) {
            return Err(StoreError::Unauthorized(requester));
        }
        if self.chaff.len() < k {
            return Err(StoreError::ChaffShortfall { needed: k, available: self.chaff.len() });
        }

        let pool: Vec<EntryId> = self.chaff.iter().copied().collect();
        let decoys: Vec<EntryId> = index::sample(&mut self.rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        let mut order: Vec<Option<usize>> = std::iter::once(None).chain((0..k).map(Some)).collect();
        order.shuffle(&mut self.rng);

        let batch_id = self.next_batch();
        let mut new_real = None;
        let mut decoy_new = vec![EntryId::default(); k];
        let mut batch_order = Vec::with_capacity(k + 1);
        for slot in order {
            match slot {
                None => {
                    let n = self.rekey(id, now, batch_id);
                    new_real = Some(n);
                    batch_order.push(n);
                }
                Some(i) => {
                    let n = self.rekey(&decoys[i], now, batch_id);
                    decoy_new[i] = n;
                    batch_order.push(n);
                }
            }
        }
        Ok(TumbleReceipt {
            batch_id,
            old_id: *id,
            new_id: new_real.expect("real entry is always in the batch"),
            decoy_updates: decoys.into_iter().zip(decoy_new).collect(),
            batch_order,
        })
    }

    /// Re-keys `k` uniformly chosen fake entries as one batch, with no real
    /// entry involved. Run by the custodian on its own schedule.
    pub fn tumble_chaff(&mut self, caller: Address, k: usize, now: Millis) -> Result<u64, StoreError> {
        if caller != self.config.custodian {
            return Err(StoreError::Unauthorized(caller));
        }
        if self.chaff.len() < k {
            return Err(StoreError::ChaffShortfall { needed: k, available: self.chaff.len() });
        }
        let pool: Vec<EntryId> = self.chaff.iter().copied().collect();
        let mut picked: Vec<EntryId> = index::sample(&mut self.rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        picked.shuffle(&mut self.rng);
        let batch_id = self.next_batch();
        for id in picked {
            self.rekey(&id, now, batch_id);
        }
        Ok(batch_id)
    }

    /// Replaces the payload of an unclaimed entry and re-keys it.
    pub fn update_payload(
        &mut self,
        ledger: &Ledger,
        caller: Address,
        id: &EntryId,
        new_payload: Payload,
        now: Millis,
    ) -> Result<EntryId, StoreError> {
        if caller != self.config.custodian {
            return Err(StoreError::Unauthorized(caller));
        }
        self.config.schema.check(&new_payload)?;
        let entry = self.entries.get(id).ok_or(StoreError::NotFound)?;
        if entry.is_chaff {
            return Err(StoreError::NotFound);
        }
        let contract = ledger
            .contracts()
            .find(|c| {
                c.endpoint_url.as_deref() == Some(self.config.endpoint_url.as_str())
                    && c.entry_id.is_some_and(|e| e == *id || entry.lineage.contains(&e))
            })
            .ok_or(StoreError::NotFound)?;
        if contract.owner != self.config.custodian {
            return Err(StoreError::Claimed);
        }
        self.marginals.observe(&new_payload);
        let mut entry = self.remove(id).expect("checked");
        entry.lineage.push(*id);
        entry.payload = new_payload;
        entry.created_at = now;
        entry.nonce = self.fresh_nonce();
        let new_id = self.insert(entry);
        let batch_id = self.next_batch();
        self.feed.push(FeedEvent { removed_id: Some(*id), added_id: Some(new_id), batch_id });
        Ok(new_id)
    }

    /// Permanently removes an entry on behalf of its verified owner.
    pub fn delete_entry(&mut self, ledger: &Ledger, requester: Address, id: &EntryId) -> Result<DeletedEntry, StoreError> {
        let entry = self.entries.get(id).ok_or(StoreError::NotFound)?;
        if entry.is_chaff || !self.is_verified_owner(ledger, &requester, id, entry) {
            return Err(StoreError::Unauthorized(requester));
        }
        let entry = self.remove(id).expect("checked");
        let batch_id = self.next_batch();
        self.feed.push(FeedEvent { removed_id: Some(*id), added_id: None, batch_id });
        Ok(DeletedEntry { entry_id: *id, entry })
    }

    /// Puts a deleted entry back under its original key.
    pub(crate) fn restore_entry(&mut self, deleted: DeletedEntry) {
        let batch_id = self.next_batch();
        let id = self.insert(deleted.entry);
        debug_assert_eq!(id, deleted.entry_id);
        self.feed.push(FeedEvent { removed_id: None, added_id: Some(id), batch_id });
    }

    /// Ids of real and fake entries matching `criteria`, in id order.
    pub fn search_payload(&self, criteria: &Predicate) -> Result<Vec<EntryId>, StoreError> {
        let (fields, params) = criteria.references();
        if !params.is_empty() {
            return Err(StoreError::MalformedPredicate("parameters are not allowed".into()));
        }
        if let Some(f) = fields.iter().find(|f| !self.config.schema.contains(f)) {
            return Err(StoreError::MalformedPredicate(format!("unknown field {f}")));
        }
        if has_non_string_literal(criteria) {
            return Err(StoreError::MalformedPredicate("identity fields are strings".into()));
        }
        let none = BTreeMap::new();
        Ok(self
            .entries
            .iter()
            .filter(|(_, e)| {
                let as_values: BTreeMap<String, Value> =
                    e.payload.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
                criteria.matches(&as_values, &none)
            })
            .map(|(id, _)| *id)
            .collect())
    }

    /// Exports `{entry_id_hex: {payload, created_at}}` as canonical JSON.
    /// Nonces and the chaff flag are never exported.
    pub fn export_snapshot(&self) -> String {
        to_canonical_string(&self.snapshot())
    }

    pub fn snapshot(&self) -> BTreeMap<String, SnapshotEntry> {
        self.entries
            .iter()
            .map(|(id, e)| (id.to_hex(), SnapshotEntry { payload: e.payload.clone(), created_at: e.created_at }))
            .collect()
    }

    /// Checks that every key equals the hash of its stored contents.
    pub fn verify_key_integrity(&self) -> bool {
        self.entries
            .iter()
            .all(|(id, e)| compute_entry_id(&e.payload, e.created_at, &e.nonce).as_ref() == Ok(id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub payload: Payload,
    pub created_at: Millis,
}

fn has_non_string_literal(p: &Predicate) -> bool {
    match p {
        Predicate::All | Predicate::Exists { .. } => false,
        Predicate::Cmp { value, .. } => !matches!(value, Operand::Value(Value::String(_))),
        Predicate::And { clauses } | Predicate::Or { clauses } => clauses.iter().any(has_non_string_literal),
        Predicate::Not { clause } => has_non_string_literal(clause),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Keypair;
    use crate::ledger::Call;

    const ENDPOINT: &str = "https://uni.example/identity";

    fn schema() -> IdentitySchema {
        IdentitySchema(vec!["name".into(), "contact".into(), "student_number".into()])
    }

    fn payload(name: &str, num: &str) -> Payload {
        [("name", name), ("contact", "x@uni.example"), ("student_number", num)]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn store(custodian: &Keypair, generator: ChaffGenerator) -> IdentityStore {
        IdentityStore::new(StoreConfig {
            endpoint_url: ENDPOINT.into(),
            custodian: custodian.address(),
            schema: schema(),
            chaff_generator: generator,
            seed: 11,
        })
    }

    /// Store with one registered user whose contract is owned by `owner`.
    fn registered(owner: Option<&Keypair>) -> (IdentityStore, Ledger, Keypair, EntryId, Address) {
        let custodian = Keypair::from_seed(b"custodian");
        let mut s = store(&custodian, ChaffGenerator::Distributional);
        let mut ledger = Ledger::new([custodian.address()]);
        for i in 0..30 {
            s.create_entry(custodian.address(), payload(&format!("Filler {i}"), &format!("F{i:03}")), 0.5, 1)
                .unwrap();
        }
        let created = s.create_entry(custodian.address(), payload("Ada Lovelace", "LVLADA001"), 0.5, 2).unwrap();
        let seq = ledger
            .execute(&custodian, Call::Deploy { endpoint_url: ENDPOINT.into(), entry_id: created.entry_id })
            .unwrap();
        let contract = Ledger::contract_address_for(seq, &created.entry_id);
        if let Some(o) = owner {
            ledger.execute(&custodian, Call::Transfer { contract, new_owner: o.address() }).unwrap();
        }
        (s, ledger, custodian, created.entry_id, contract)
    }

    #[test]
    fn golden_entry_id_vector() {
        let p: Payload = [("name".to_string(), "A".to_string())].into();
        let id = compute_entry_id(&p, 0, &[0u8; 16]).unwrap();
        assert_eq!(id.to_hex(), "95c6e94b1b7705e841d6af93389b1ee4be702a8a441fc650ed403ec33e67961e");
        let p: Payload = [("name", "A"), ("contact", "a@b")].iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let nonce: Nonce = core::array::from_fn(|i| i as u8);
        let id = compute_entry_id(&p, 1_700_000_000_000, &nonce).unwrap();
        assert_eq!(id.to_hex(), "c9ff8eeb71dc144699e1d03791bf5d7eac6a36d403693f82dd6e39d4071deec5");
    }

    #[test]
    fn entry_id_determinism_and_nonce_sensitivity() {
        let p = payload("A", "1");
        let a = compute_entry_id(&p, 5, &[0; 16]).unwrap();
        assert_eq!(a, compute_entry_id(&p, 5, &[0; 16]).unwrap());
        let mut n = [0u8; 16];
        n[15] = 1;
        assert_ne!(a, compute_entry_id(&p, 5, &n).unwrap());
        assert_eq!(compute_entry_id(&Payload::new(), 0, &[0; 16]), Err(StoreError::EmptyPayload));
    }

    #[test]
    fn zero_ratio_creates_exactly_one_entry() {
        let c = Keypair::from_seed(b"c");
        let mut s = store(&c, ChaffGenerator::Distributional);
        let created = s.create_entry(c.address(), payload("A", "1"), 0.0, 0).unwrap();
        assert!(created.chaff_ids.is_empty());
        assert_eq!(s.len(), 1);
        assert_eq!(s.read_entry(&created.entry_id).unwrap().payload, payload("A", "1"));
    }

    #[test]
    fn half_ratio_yields_about_one_chaff_per_entry() {
        let c = Keypair::from_seed(b"c");
        let mut s = store(&c, ChaffGenerator::Distributional);
        for i in 0..1000 {
            s.create_entry(c.address(), payload(&format!("P {i}"), &format!("{i}")), 0.5, i).unwrap();
        }
        let chaff = s.chaff_count();
        assert!((900..=1100).contains(&chaff), "chaff count {chaff}");
        assert!(s.verify_key_integrity());
    }

    #[test]
    fn create_rejects_bad_inputs() {
        let c = Keypair::from_seed(b"c");
        let other = Keypair::from_seed(b"o");
        let mut s = store(&c, ChaffGenerator::Distributional);
        assert_eq!(s.create_entry(other.address(), payload("A", "1"), 0.0, 0), Err(StoreError::Unauthorized(other.address())));
        let mut bad = payload("A", "1");
        bad.insert("shoe_size".into(), "9".into());
        assert_eq!(s.create_entry(c.address(), bad, 0.0, 0), Err(StoreError::SchemaViolation("shoe_size".into())));
        assert!(matches!(s.create_entry(c.address(), payload("A", "1"), 1.0, 0), Err(StoreError::InvalidChaffRatio(_))));
        assert_eq!(s.create_entry(c.address(), Payload::new(), 0.0, 0), Err(StoreError::EmptyPayload));
    }

    #[test]
    fn chaff_reads_look_like_real_reads() {
        let (s, _, _, real, _) = registered(None);
        let chaff_id = *s.chaff.iter().next().unwrap();
        let r = serde_json::to_value(s.read_entry(&real).unwrap()).unwrap();
        let f = serde_json::to_value(s.read_entry(&chaff_id).unwrap()).unwrap();
        let keys = |v: &Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
        assert_eq!(keys(&r), keys(&f));
        assert_eq!(keys(&r["payload"]), keys(&f["payload"]));
        assert!(!r.to_string().contains("chaff"));
    }

    #[test]
    fn tumble_without_decoys() {
        let owner = Keypair::from_seed(b"owner");
        let (mut s, ledger, _, id, _) = registered(Some(&owner));
        let before = s.read_entry(&id).unwrap().payload;
        let r = s.tumble(&ledger, owner.address(), &id, 0, 100).unwrap();
        assert!(r.decoy_updates.is_empty());
        assert_eq!(s.read_entry(&id), Err(StoreError::NotFound));
        assert_eq!(s.read_entry(&r.new_id).unwrap().payload, before);
        assert_eq!(s.read_entry(&r.new_id).unwrap().created_at, 100);
    }

    #[test]
    fn tumble_with_decoys_emits_one_batch() {
        let owner = Keypair::from_seed(b"owner");
        let (mut s, ledger, _, id, _) = registered(Some(&owner));
        let feed_before = s.feed().len();
        let r = s.tumble(&ledger, owner.address(), &id, 9, 100).unwrap();
        let events = &s.feed()[feed_before..];
        assert_eq!(events.len(), 10);
        assert!(events.iter().all(|e| e.batch_id == r.batch_id));
        assert_eq!(r.decoy_updates.len(), 9);
        let mut all: BTreeSet<EntryId> = BTreeSet::new();
        all.insert(r.old_id);
        all.insert(r.new_id);
        for (o, n) in &r.decoy_updates {
            all.insert(*o);
            all.insert(*n);
            assert!(s.is_chaff(n));
            assert!(!s.contains(o));
        }
        assert_eq!(all.len(), 20);
        let order: Vec<EntryId> = events.iter().map(|e| e.added_id.unwrap()).collect();
        assert_eq!(order, r.batch_order);
        assert!(s.verify_key_integrity());
    }

    #[test]
    fn tumble_errors() {
        let owner = Keypair::from_seed(b"owner");
        let stranger = Keypair::from_seed(b"stranger");
        let (mut s, ledger, _, id, _) = registered(Some(&owner));
        assert_eq!(s.tumble(&ledger, stranger.address(), &id, 0, 1), Err(StoreError::Unauthorized(stranger.address())));
        let available = s.chaff_count();
        assert_eq!(
            s.tumble(&ledger, owner.address(), &id, available + 3, 1),
            Err(StoreError::ChaffShortfall { needed: available + 3, available })
        );
        assert_eq!(s.tumble(&ledger, owner.address(), &EntryId::default(), 0, 1), Err(StoreError::NotFound));
    }

    #[test]
    fn owner_can_tumble_again_from_lineage() {
        let owner = Keypair::from_seed(b"owner");
        let (mut s, ledger, _, id, _) = registered(Some(&owner));
        let r1 = s.tumble(&ledger, owner.address(), &id, 2, 10).unwrap();
        let r2 = s.tumble(&ledger, owner.address(), &r1.new_id, 2, 20).unwrap();
        assert!(s.contains(&r2.new_id));
    }

    #[test]
    fn decoy_position_is_uniform() {
        // position of the real update within the batch over many seeds
        let mut counts = [0usize; 4];
        for seed in 0..2000u64 {
            let c = Keypair::from_seed(b"custodian");
            let owner = Keypair::from_seed(b"owner");
            let mut s = IdentityStore::new(StoreConfig {
                endpoint_url: ENDPOINT.into(),
                custodian: c.address(),
                schema: schema(),
                chaff_generator: ChaffGenerator::Constant,
                seed,
            });
            let mut ledger = Ledger::new([c.address()]);
            let created = s.create_entry(c.address(), payload("A", "1"), 0.9, 0).unwrap();
            if created.chaff_ids.len() < 3 {
                continue;
            }
            let seq = ledger.execute(&c, Call::Deploy { endpoint_url: ENDPOINT.into(), entry_id: created.entry_id }).unwrap();
            let contract = Ledger::contract_address_for(seq, &created.entry_id);
            ledger.execute(&c, Call::Transfer { contract, new_owner: owner.address() }).unwrap();
            let r = s.tumble(&ledger, owner.address(), &created.entry_id, 3, 1).unwrap();
            counts[r.batch_order.iter().position(|n| *n == r.new_id).unwrap()] += 1;
        }
        let n: usize = counts.iter().sum();
        let expect = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() < 4.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn update_payload_rekeys_unclaimed_only() {
        let (mut s, mut ledger, custodian, id, contract) = registered(None);
        let mut p = payload("Ada Lovelace", "LVLADA001");
        p.insert("contact".into(), "new@uni.example".into());
        let new_id = s.update_payload(&ledger, custodian.address(), &id, p.clone(), 50).unwrap();
        assert_ne!(new_id, id);
        assert_eq!(s.read_entry(&new_id).unwrap().payload, p);
        // identical payload still re-keys
        ledger
            .execute(&custodian, Call::SetEntryId { contract, entry_id: Some(new_id), endpoint_url: None })
            .unwrap();
        let again = s.update_payload(&ledger, custodian.address(), &new_id, p.clone(), 50).unwrap();
        assert_ne!(again, new_id);

        let owner = Keypair::from_seed(b"owner");
        ledger.execute(&custodian, Call::Transfer { contract, new_owner: owner.address() }).unwrap();
        assert_eq!(s.update_payload(&ledger, custodian.address(), &again, p, 60), Err(StoreError::Claimed));
    }

    #[test]
    fn delete_returns_payload_and_removes() {
        let owner = Keypair::from_seed(b"owner");
        let (mut s, ledger, custodian, id, _) = registered(Some(&owner));
        assert!(matches!(s.delete_entry(&ledger, custodian.address(), &id), Err(StoreError::Unauthorized(_))));
        let stored = s.read_entry(&id).unwrap().payload;
        let deleted = s.delete_entry(&ledger, owner.address(), &id).unwrap();
        assert_eq!(deleted.payload(), &stored);
        assert_eq!(s.read_entry(&id), Err(StoreError::NotFound));
        assert_eq!(s.tumble(&ledger, owner.address(), &id, 0, 1), Err(StoreError::NotFound));
        s.restore_entry(deleted);
        assert_eq!(s.read_entry(&id).unwrap().payload, stored);
    }

    #[test]
    fn search_includes_chaff_and_is_ordered() {
        let (s, _, _, id, _) = registered(None);
        let hits = s.search_payload(&Predicate::eq("name", "Ada Lovelace")).unwrap();
        assert!(hits.contains(&id));
        let mut sorted = hits.clone();
        sorted.sort();
        assert_eq!(hits, sorted);
        assert!(s.search_payload(&Predicate::eq("name", "Nobody")).unwrap().is_empty());
        assert!(matches!(s.search_payload(&Predicate::eq("mark", "1")), Err(StoreError::MalformedPredicate(_))));
        assert!(matches!(s.search_payload(&Predicate::eq("name", 5)), Err(StoreError::MalformedPredicate(_))));
        // prefix-matching chaff that copied the name are eligible hits
        let any_chaff_hit = s
            .search_payload(&Predicate::Exists { field: "name".into() })
            .unwrap()
            .iter()
            .any(|h| s.is_chaff(h));
        assert!(any_chaff_hit);
    }

    #[test]
    fn snapshot_excludes_private_fields() {
        let (s, _, _, _, _) = registered(None);
        let text = s.export_snapshot();
        assert!(!text.contains("nonce"));
        assert!(!text.contains("chaff"));
        assert!(!text.contains("lineage"));
    }
}
