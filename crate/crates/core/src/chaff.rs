//! Synthetic payloads for fake identity entries.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::identity_store::Payload;

/// How chaff payloads are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChaffGenerator {
    /// Frequency-weighted resampling of observed real values with token
    /// recombination and digit perturbation.
    #[default]
    Distributional,
    /// Every field gets the same fixed value. Easy to spot; exists only as a
    /// negative control for the payload-frequency attacker.
    Constant,
}

pub const CONSTANT_CHAFF_VALUE: &str = "placeholder";

/// Observed values per field across real entries, with multiplicity.
#[derive(Debug, Clone, Default)]
pub struct FieldMarginals {
    values: BTreeMap<String, Vec<String>>,
}

impl FieldMarginals {
    pub fn observe(&mut self, payload: &Payload) {
        for (field, value) in payload {
            self.values.entry(field.clone()).or_default().push(value.clone());
        }
    }

    pub fn observed(&self, field: &str) -> &[String] {
        self.values.get(field).map(Vec::as_slice).unwrap_or(&[])
    }
}

impl ChaffGenerator {
    /// A payload with exactly the fields of `template`.
    pub fn generate<R: Rng + ?Sized>(&self, template: &Payload, marginals: &FieldMarginals, rng: &mut R) -> Payload {
        template
            .iter()
            .map(|(field, real)| {
                let value = match self {
                    ChaffGenerator::Constant => CONSTANT_CHAFF_VALUE.to_string(),
                    ChaffGenerator::Distributional => {
                        let pool = marginals.observed(field);
                        let base = pool.choose(rng).unwrap_or(real);
                        perturb(base, pool, rng)
                    }
                };
                (field.clone(), value)
            })
            .collect()
    }
}

fn perturb<R: Rng + ?Sized>(base: &str, pool: &[String], rng: &mut R) -> String {
    let recombined: Vec<String> = base
        .split(' ')
        .enumerate()
        .map(|(i, token)| {
            if rng.random_bool(0.5) {
                if let Some(donor) = pool.choose(rng) {
                    if let Some(t) = donor.split(' ').nth(i) {
                        return t.to_string();
                    }
                }
            }
            token.to_string()
        })
        .collect();
    recombined
        .join(" ")
        .chars()
        .map(|c| if c.is_ascii_digit() { char::from(b'0' + rng.random_range(0..10u8)) } else { c })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn p(pairs: &[(&str, &str)]) -> Payload {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn chaff_keeps_schema() {
        let mut m = FieldMarginals::default();
        let real = p(&[("name", "Thandi Nkosi"), ("student_number", "NKSTHA001")]);
        m.observe(&real);
        m.observe(&p(&[("name", "Pieter Botha"), ("student_number", "BTHPIE002")]));
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for gen in [ChaffGenerator::Distributional, ChaffGenerator::Constant] {
            let chaff = gen.generate(&real, &m, &mut rng);
            assert_eq!(chaff.keys().collect::<Vec<_>>(), real.keys().collect::<Vec<_>>());
        }
    }

    #[test]
    fn distributional_values_come_from_observed_tokens() {
        let mut m = FieldMarginals::default();
        m.observe(&p(&[("name", "Thandi Nkosi")]));
        m.observe(&p(&[("name", "Pieter Botha")]));
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..50 {
            let c = ChaffGenerator::Distributional.generate(&p(&[("name", "x y")]), &m, &mut rng);
            let toks: Vec<&str> = c["name"].split(' ').collect();
            assert!(["Thandi", "Pieter"].contains(&toks[0]));
            assert!(["Nkosi", "Botha"].contains(&toks[1]));
        }
    }

    #[test]
    fn digits_are_perturbed() {
        let mut m = FieldMarginals::default();
        m.observe(&p(&[("insurance_number", "8001015009087")]));
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let distinct: std::collections::BTreeSet<String> = (0..20)
            .map(|_| ChaffGenerator::Distributional.generate(&p(&[("insurance_number", "0")]), &m, &mut rng)["insurance_number"].clone())
            .collect();
        assert!(distinct.len() > 15);
        assert!(distinct.iter().all(|v| v.len() == 13 && v.chars().all(|c| c.is_ascii_digit())));
    }
}
