//! Finite, reshuffleable lists of identifiers that feed a pipeline.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::{Mirc, Record, RecordKey};
use crate::error::{bail, Result};
use crate::sample::Sample;

/// Points at one record of a shared catalog.
#[derive(Clone, Debug)]
pub struct CatalogIdentifier {
    catalog: Arc<Mirc>,
    key: RecordKey,
}

impl CatalogIdentifier {
    pub fn new(catalog: Arc<Mirc>, dataset: &str, case: &str, record: &str) -> Result<Self> {
        if catalog.record(dataset, case, record).is_none() {
            bail!(Lookup, "no record {dataset}/{case}/{record} in catalog");
        }
        Ok(CatalogIdentifier {
            catalog,
            key: RecordKey {
                dataset: dataset.to_owned(),
                case: case.to_owned(),
                record: record.to_owned(),
            },
        })
    }

    pub fn key(&self) -> &RecordKey {
        &self.key
    }

    pub fn catalog(&self) -> &Arc<Mirc> {
        &self.catalog
    }

    pub fn record(&self) -> &Record {
        self.catalog
            .record(&self.key.dataset, &self.key.case, &self.key.record)
            .expect("identifier validated at construction")
    }
}

impl PartialEq for CatalogIdentifier {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.catalog, &other.catalog) && self.key == other.key
    }
}

/// What one pipeline step loads its inputs from.
#[derive(Clone, Debug, PartialEq)]
pub enum Identifier {
    Catalog(CatalogIdentifier),
    /// Samples handed over directly, one per direct input node.
    Direct(Vec<Sample>),
}

impl Identifier {
    pub fn catalog(catalog: Arc<Mirc>, dataset: &str, case: &str, record: &str) -> Result<Self> {
        CatalogIdentifier::new(catalog, dataset, case, record).map(Identifier::Catalog)
    }

    pub fn direct(samples: Vec<Sample>) -> Self {
        Identifier::Direct(samples)
    }

    pub fn describe(&self) -> String {
        match self {
            Identifier::Catalog(c) => c.key.to_string(),
            Identifier::Direct(s) => format!("direct[{}]", s.len()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// One identifier per record.
    PerRecord,
    /// One identifier per case; its record is redrawn on every shuffle.
    PerCase,
}

#[derive(Clone, Debug)]
struct Entry {
    identifier: Identifier,
    /// Records to redraw from, for per-case entries.
    choices: Option<Vec<String>>,
}

/// An ordered list of identifiers with optional (weighted) reshuffling.
///
/// Without weights the current ordering is always a permutation of the
/// initial list. With weights, [`Sampler::randomize`] draws a new list of the
/// same length with replacement.
#[derive(Clone, Debug)]
pub struct Sampler {
    base: Vec<Entry>,
    current: Vec<Identifier>,
    shuffle: bool,
    weights: Option<WeightedIndex<f64>>,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(
        items: Vec<Identifier>,
        shuffle: bool,
        weights: Option<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        let entries = items
            .into_iter()
            .map(|identifier| Entry {
                identifier,
                choices: None,
            })
            .collect();
        Sampler::from_entries(entries, shuffle, weights, seed)
    }

    fn from_entries(
        base: Vec<Entry>,
        shuffle: bool,
        weights: Option<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        let weights = match weights {
            None => None,
            Some(w) => {
                if w.len() != base.len() {
                    bail!(
                        Argument,
                        "{} weights for {} items",
                        w.len(),
                        base.len()
                    );
                }
                if let Some(bad) = w.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                    bail!(Argument, "weight {bad} is not a non-negative finite number");
                }
                if !w.iter().any(|v| *v > 0.0) {
                    bail!(Argument, "at least one weight must be positive");
                }
                Some(WeightedIndex::new(&w).map_err(|e| crate::Error::Argument(e.to_string()))?)
            }
        };
        let current = base.iter().map(|e| e.identifier.clone()).collect();
        Ok(Sampler {
            base,
            current,
            shuffle,
            weights,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<&Identifier> {
        match self.current.get(i) {
            Some(id) => Ok(id),
            None => bail!(Index, "index {i} out of range for sampler of length {}", self.len()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Identifier> {
        self.current.iter()
    }

    pub fn shuffle(&self) -> bool {
        self.shuffle
    }

    /// Reorders the list in place. Does nothing when shuffling is off.
    pub fn randomize(&mut self) {
        if !self.shuffle {
            return;
        }
        let picks: Vec<usize> = match &self.weights {
            Some(dist) => (0..self.base.len()).map(|_| dist.sample(&mut self.rng)).collect(),
            None => {
                let mut order: Vec<usize> = (0..self.base.len()).collect();
                order.shuffle(&mut self.rng);
                order
            }
        };
        let mut next = Vec::with_capacity(picks.len());
        for i in picks {
            let entry = &self.base[i];
            let identifier = match (&entry.identifier, &entry.choices) {
                (Identifier::Catalog(c), Some(records)) => {
                    let record = &records[self.rng.random_range(0..records.len())];
                    let mut c = c.clone();
                    c.key.record = record.clone();
                    Identifier::Catalog(c)
                }
                (other, _) => other.clone(),
            };
            next.push(identifier);
        }
        self.current = next;
    }
}

/// Builds a sampler over every record (or every case) of `catalog`. Per-case
/// entries start at their case's first record.
pub fn catalog_sampler(
    catalog: Arc<Mirc>,
    mode: SamplingMode,
    shuffle: bool,
    weights: Option<Vec<f64>>,
    seed: u64,
) -> Result<Sampler> {
    let mut entries = Vec::new();
    for dataset in catalog.datasets() {
        for case in dataset.iter() {
            match mode {
                SamplingMode::PerRecord => {
                    for record in case.iter() {
                        entries.push(Entry {
                            identifier: Identifier::catalog(
                                catalog.clone(),
                                dataset.id(),
                                case.id(),
                                record.id(),
                            )?,
                            choices: None,
                        });
                    }
                }
                SamplingMode::PerCase => {
                    let records: Vec<String> = case.ids().map(str::to_owned).collect();
                    let Some(first) = records.first() else {
                        continue;
                    };
                    entries.push(Entry {
                        identifier: Identifier::catalog(
                            catalog.clone(),
                            dataset.id(),
                            case.id(),
                            first,
                        )?,
                        choices: Some(records),
                    });
                }
            }
        }
    }
    if entries.is_empty() {
        bail!(Argument, "catalog holds no records to sample");
    }
    Sampler::from_entries(entries, shuffle, weights, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Case, Dataset, Modality};
    use crate::Error;
    use proptest::prelude::*;

    fn scalar_items(n: usize) -> Vec<Identifier> {
        (0..n).map(|i| Identifier::direct(vec![Sample::scalar(i as f64)])).collect()
    }

    fn value(id: &Identifier) -> f64 {
        match id {
            Identifier::Direct(s) => s[0].data()[[0, 0, 0, 0, 0]],
            _ => unreachable!(),
        }
    }

    fn tumor_catalog(cases: std::ops::Range<usize>, records_per_case: usize) -> Arc<Mirc> {
        let mut d = Dataset::new("train_dataset");
        for c in cases {
            let mut case = Case::new(format!("subject_{c}"));
            for r in 0..records_per_case {
                case.add(
                    Record::new(format!("r{r}"))
                        .with(Modality::scalar("age", 20.0 + c as f64))
                        .unwrap(),
                )
                .unwrap();
            }
            d.add(case).unwrap();
        }
        Arc::new(Mirc::new().with(d).unwrap())
    }

    #[test]
    fn weighted_frequency_matches_probability() {
        let mut s = Sampler::new(scalar_items(5), true, Some(vec![1.0, 1.0, 10.0, 1.0, 1.0]), 3).unwrap();
        let mut hits = 0usize;
        let mut total = 0usize;
        for _ in 0..20_000 {
            s.randomize();
            total += s.len();
            hits += s.iter().filter(|id| value(id) == 2.0).count();
        }
        assert!((hits as f64 / total as f64 - 10.0 / 14.0).abs() < 0.02);
    }

    #[test]
    fn unshuffled_is_stable() {
        let mut s = Sampler::new(scalar_items(4), false, None, 0).unwrap();
        s.randomize();
        let order: Vec<f64> = s.iter().map(value).collect();
        assert_eq!(order, [0.0, 1.0, 2.0, 3.0]);
        let mut one = Sampler::new(scalar_items(1), true, None, 0).unwrap();
        one.randomize();
        assert_eq!(value(one.get(0).unwrap()), 0.0);
    }

    #[test]
    fn weight_validation() {
        assert!(matches!(
            Sampler::new(scalar_items(2), true, Some(vec![1.0, -1.0]), 0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            Sampler::new(scalar_items(2), true, Some(vec![0.0, 0.0]), 0),
            Err(Error::Argument(_))
        ));
        assert!(Sampler::new(scalar_items(2), true, Some(vec![1.0]), 0).is_err());
    }

    #[test]
    fn catalog_sampler_lengths_and_order() {
        let train = catalog_sampler(tumor_catalog(0..8, 1), SamplingMode::PerCase, false, None, 0).unwrap();
        assert_eq!(train.len(), 8);
        match train.get(0).unwrap() {
            Identifier::Catalog(c) => assert_eq!(c.key().case, "subject_0"),
            _ => unreachable!(),
        }
        assert!(matches!(train.get(8), Err(Error::Index(_))));
        let val = catalog_sampler(tumor_catalog(8..10, 1), SamplingMode::PerCase, false, None, 0).unwrap();
        assert_eq!(val.len(), 2);
        let per_record = catalog_sampler(tumor_catalog(0..3, 2), SamplingMode::PerRecord, false, None, 0).unwrap();
        assert_eq!(per_record.len(), 6);
        assert!(matches!(
            catalog_sampler(Arc::new(Mirc::new()), SamplingMode::PerRecord, true, None, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn per_case_redraws_records_uniformly() {
        let mut s = catalog_sampler(tumor_catalog(0..1, 2), SamplingMode::PerCase, true, None, 9).unwrap();
        let draws = 20_000;
        let mut first = 0;
        for _ in 0..draws {
            s.randomize();
            if let Identifier::Catalog(c) = s.get(0).unwrap() {
                if c.key().record == "r0" {
                    first += 1;
                }
            }
        }
        assert!((first as f64 / draws as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn missing_record_is_lookup_error() {
        assert!(matches!(
            Identifier::catalog(tumor_catalog(0..1, 1), "train_dataset", "subject_0", "r9"),
            Err(Error::Lookup(_))
        ));
    }

    proptest! {
        #[test]
        fn unweighted_randomize_permutes(n in 1usize..40, seed in any::<u64>(), rounds in 1usize..5) {
            let mut s = Sampler::new(scalar_items(n), true, None, seed).unwrap();
            let mut again = Sampler::new(scalar_items(n), true, None, seed).unwrap();
            for _ in 0..rounds {
                s.randomize();
                again.randomize();
                let mut order: Vec<f64> = s.iter().map(value).collect();
                let replay: Vec<f64> = again.iter().map(value).collect();
                prop_assert_eq!(&order, &replay);
                order.sort_by(f64::total_cmp);
                prop_assert_eq!(order, (0..n).map(|i| i as f64).collect::<Vec<_>>());
            }
        }

        #[test]
        fn weighted_randomize_keeps_length(weights in prop::collection::vec(0.0f64..5.0, 1..20), seed in any::<u64>()) {
            prop_assume!(weights.iter().any(|w| *w > 0.0));
            let n = weights.len();
            let mut s = Sampler::new(scalar_items(n), true, Some(weights.clone()), seed).unwrap();
            s.randomize();
            prop_assert_eq!(s.len(), n);
            for id in s.iter() {
                let v = value(id) as usize;
                prop_assert!(v < n && weights[v] > 0.0);
            }
        }
    }
}
