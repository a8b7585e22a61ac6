//! The passive adversary: what it can see, and how well it links tumbled
//! entries back to their owners.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ownlink_core::identity_store::Payload;
use ownlink_core::ledger::Call;
use ownlink_core::trace::{Trace, TraceEvent};
use ownlink_core::types::{Address, EntryId, Millis};

/// Field names that must never appear anywhere in a serialized view.
pub const EXCLUDED_FIELDS: &[&str] =
    &["is_chaff", "nonce", "decoy_updates", "batch_order", "receipt", "lineage", "old_id", "new_id"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedObservation {
    pub index: u64,
    pub time: Millis,
    pub batch_id: u64,
    pub removed_id: Option<EntryId>,
    pub added_id: Option<EntryId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerObservation {
    pub index: u64,
    pub time: Millis,
    pub seq: u64,
    pub signer: Address,
    pub call: Call,
}

/// Public observables for one identity store: its mutation feed, the
/// ledger log and, optionally, the directory. Post-hoc reads of entries
/// still present at the end of the run are included as payloads only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryView {
    pub endpoint: String,
    pub include_directory: bool,
    pub feed: Vec<FeedObservation>,
    pub ledger: Vec<LedgerObservation>,
    pub directory: Option<BTreeMap<EntryId, Address>>,
    pub readable: BTreeMap<EntryId, Payload>,
}

impl AdversaryView {
    pub fn from_trace(trace: &Trace, endpoint: &str, include_directory: bool) -> Self {
        let mut feed = Vec::new();
        let mut ledger = Vec::new();
        let mut directory: BTreeMap<EntryId, Address> = BTreeMap::new();
        let mut readable = BTreeMap::new();
        for r in trace.records() {
            match &r.event {
                TraceEvent::StoreFeed { endpoint: ep, feed_event } if ep == endpoint => feed.push(FeedObservation {
                    index: r.index,
                    time: r.time,
                    batch_id: feed_event.batch_id,
                    removed_id: feed_event.removed_id,
                    added_id: feed_event.added_id,
                }),
                TraceEvent::LedgerTx { entry } => {
                    let call = &entry.signed.tx.call;
                    match call {
                        Call::DirectoryPut { entry_id, contract } => {
                            directory.insert(*entry_id, *contract);
                        }
                        Call::DirectoryClear { entry_id } => {
                            directory.remove(entry_id);
                        }
                        // claims drop every mapping to the contract
                        Call::Transfer { contract, .. } => directory.retain(|_, c| c != contract),
                        _ => {}
                    }
                    let directory_call = matches!(call, Call::DirectoryPut { .. } | Call::DirectoryClear { .. });
                    if include_directory || !directory_call {
                        ledger.push(LedgerObservation {
                            index: r.index,
                            time: r.time,
                            seq: entry.seq,
                            signer: entry.signed.tx.signer,
                            call: call.clone(),
                        });
                    }
                }
                TraceEvent::StoreSnapshot { endpoint: ep, entries } if ep == endpoint => {
                    readable = entries
                        .iter()
                        .filter_map(|(id, e)| Some((id.parse().ok()?, e.payload.clone())))
                        .collect();
                }
                _ => {}
            }
        }
        Self {
            endpoint: endpoint.into(),
            include_directory,
            feed,
            ledger,
            directory: include_directory.then_some(directory),
            readable,
        }
    }

    /// Ids the ledger ties to a contract at or after trace index `from`.
    fn ledger_linked_after(&self, from: u64) -> BTreeSet<EntryId> {
        self.ledger
            .iter()
            .filter(|l| l.index >= from)
            .filter_map(|l| match &l.call {
                Call::SetEntryId { entry_id: Some(id), .. } => Some(*id),
                Call::Deploy { entry_id, .. } => Some(*entry_id),
                Call::DirectoryPut { entry_id, .. } => Some(*entry_id),
                _ => None,
            })
            .collect()
    }
}

/// Which new id in each batch is real. Held by the evaluator, never by
/// the attacker.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub real: BTreeMap<u64, EntryId>,
}

impl GroundTruth {
    pub fn from_trace(trace: &Trace, endpoint: &str) -> Self {
        let real = trace
            .events()
            .filter_map(|e| match e {
                TraceEvent::TumbleReceipt { endpoint: ep, receipt, .. } if ep == endpoint => {
                    Some((receipt.batch_id, receipt.new_id))
                }
                _ => None,
            })
            .collect();
        Self { real }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    UniformGuess,
    TimingOrder,
    PayloadFrequency,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::UniformGuess, Strategy::TimingOrder, Strategy::PayloadFrequency];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::UniformGuess => "uniform-guess",
            Strategy::TimingOrder => "timing-order",
            Strategy::PayloadFrequency => "payload-frequency",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub strategy: Strategy,
    /// Decoys per batch, when every scored batch had the same count.
    pub k: Option<usize>,
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Wilson score interval at 95%.
    pub ci95: (f64, f64),
    pub include_directory: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("the trace contains no tumble batches for {0}")]
    NoBatches(String),
}

struct Batch {
    batch_id: u64,
    first_index: u64,
    candidates: Vec<EntryId>,
}

fn tumble_batches(view: &AdversaryView) -> Vec<Batch> {
    let mut by_id: BTreeMap<u64, (u64, bool, Vec<EntryId>)> = BTreeMap::new();
    for f in &view.feed {
        let b = by_id.entry(f.batch_id).or_insert((f.index, false, Vec::new()));
        b.1 |= f.removed_id.is_some();
        if let Some(a) = f.added_id {
            b.2.push(a);
        }
    }
    by_id
        .into_iter()
        .filter(|(_, (_, rekey, added))| *rekey && !added.is_empty())
        .map(|(batch_id, (first_index, _, candidates))| Batch { batch_id, first_index, candidates })
        .collect()
}

fn wilson(correct: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054_f64;
    let n = n as f64;
    let p = correct as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Per-field value counts across everything the attacker could read.
fn field_frequencies(view: &AdversaryView) -> BTreeMap<(String, String), usize> {
    let mut freq = BTreeMap::new();
    for p in view.readable.values() {
        for (k, v) in p {
            *freq.entry((k.clone(), v.clone())).or_insert(0) += 1;
        }
    }
    freq
}

fn pick_uniform(rng: &mut ChaCha8Rng, among: &[EntryId]) -> EntryId {
    among[rng.random_range(0..among.len())]
}

fn guess(
    strategy: Strategy,
    view: &AdversaryView,
    batch: &Batch,
    freq: &BTreeMap<(String, String), usize>,
    rng: &mut ChaCha8Rng,
) -> EntryId {
    if view.include_directory || !view.ledger.is_empty() {
        let linked = view.ledger_linked_after(batch.first_index);
        let hits: Vec<EntryId> = batch.candidates.iter().copied().filter(|c| linked.contains(c)).collect();
        if !hits.is_empty() {
            return pick_uniform(rng, &hits);
        }
    }
    match strategy {
        Strategy::UniformGuess => pick_uniform(rng, &batch.candidates),
        Strategy::TimingOrder => batch.candidates[0],
        Strategy::PayloadFrequency => {
            // rarest payload wins: lowest summed log-frequency of its values
            let scored: Vec<(f64, EntryId)> = batch
                .candidates
                .iter()
                .filter_map(|c| {
                    let p = view.readable.get(c)?;
                    let s: f64 = p.iter().map(|(k, v)| (*freq.get(&(k.clone(), v.clone())).unwrap_or(&1) as f64).ln()).sum();
                    Some((s, *c))
                })
                .collect();
            if scored.is_empty() {
                return pick_uniform(rng, &batch.candidates);
            }
            let best = scored.iter().map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
            let ties: Vec<EntryId> = scored.iter().filter(|(s, _)| (*s - best).abs() < 1e-9).map(|(_, c)| *c).collect();
            pick_uniform(rng, &ties)
        }
    }
}

/// Scores `strategy` against every tumble batch that has a known real id.
pub fn evaluate(view: &AdversaryView, truth: &GroundTruth, strategy: Strategy, seed: u64) -> Result<AttackReport, AttackError> {
    let batches: Vec<Batch> = tumble_batches(view).into_iter().filter(|b| truth.real.contains_key(&b.batch_id)).collect();
    if batches.is_empty() {
        return Err(AttackError::NoBatches(view.endpoint.clone()));
    }
    let freq = field_frequencies(view);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0;
    let mut ks = BTreeSet::new();
    for b in &batches {
        ks.insert(b.candidates.len() - 1);
        if guess(strategy, view, b, &freq, &mut rng) == truth.real[&b.batch_id] {
            correct += 1;
        }
    }
    let trials = batches.len();
    Ok(AttackReport {
        strategy,
        k: (ks.len() == 1).then(|| *ks.iter().next().expect("one k")),
        trials,
        correct,
        accuracy: correct as f64 / trials as f64,
        ci95: wilson(correct, trials),
        include_directory: view.include_directory,
    })
}

/// Builds the view and ground truth from `trace` and runs one strategy.
pub fn linkage_attack(
    trace: &Trace,
    endpoint: &str,
    strategy: Strategy,
    include_directory: bool,
    seed: u64,
) -> Result<AttackReport, AttackError> {
    let view = AdversaryView::from_trace(trace, endpoint, include_directory);
    let truth = GroundTruth::from_trace(trace, endpoint);
    evaluate(&view, &truth, strategy, seed)
}

/// Every identity-store endpoint that appears in the trace's feed.
pub fn endpoints(trace: &Trace) -> Vec<String> {
    let set: BTreeSet<String> = trace
        .events()
        .filter_map(|e| match e {
            TraceEvent::StoreFeed { endpoint, .. } => Some(endpoint.clone()),
            _ => None,
        })
        .collect();
    set.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_brackets_estimate() {
        let (lo, hi) = wilson(100, 1000);
        assert!(lo < 0.1 && hi > 0.1 && hi - lo < 0.05);
        assert_eq!(wilson(0, 0), (0.0, 1.0));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.as_str()), Some(s));
            assert_eq!(serde_json::to_value(s).unwrap(), serde_json::json!(s.as_str()));
        }
    }
}
