//! Core of the ownership-link system: the link-contract ledger, the
//! identity store with chaff and tumbling, the replicated record store,
//! owner vaults and the protocol that ties them together.

pub mod canonical;
pub mod chaff;
pub mod crypto;
pub mod identity_store;
pub mod ledger;
pub mod protocol;
pub mod query;
pub mod record_store;
pub mod trace;
pub mod types;
pub mod vault;
