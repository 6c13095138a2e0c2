//! Stratified 5-fold assignment.
//!
//! Within each class, record ids (taken in dataset order) are permuted with a
//! seeded ChaCha8 stream and an in-crate Fisher-Yates shuffle, then dealt
//! into folds 1..=5 in order. Fold `i` gets `n / 5` records, plus one extra iff
//! `i > 5 - n % 5`, so remainders land in the highest-numbered folds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Provenance;
use crate::data::BinaryDataset;
use crate::{fsutil, DatasetName, Error, Result};

pub const NUM_FOLDS: u8 = 5;

/// Name written into fold files; bump if the permutation procedure changes.
pub const GENERATOR: &str = "chacha8-fisher-yates-v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub dataset: DatasetName,
    pub seed: u64,
    pub generator: String,
    pub fold_of: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: u8,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Number of records of a class of size `n` that fold `fold` (1-based) receives.
pub fn fold_size(n: usize, fold: u8) -> usize {
    let k = NUM_FOLDS as usize;
    let extra = (fold as usize > k - n % k) as usize;
    n / k + extra
}

/// Uniform draw from `0..n` by rejection, independent of `rand`'s range sampling.
fn below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    let zone = u64::MAX - u64::MAX % n;
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % n;
        }
    }
}

pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

pub fn assign_folds(dataset: &BinaryDataset, seed: u64) -> Result<FoldAssignment> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput(format!("dataset {} has no records", dataset.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = BTreeMap::new();
    // positives first, then negatives; both in dataset order before shuffling
    for target in [1u8, 0u8] {
        let mut ids: Vec<&str> = dataset
            .records
            .iter()
            .filter(|r| BinaryDataset::target_of(r) == target)
            .map(|r| r.id.as_str())
            .collect();
        shuffle(&mut ids, &mut rng);
        let n = ids.len();
        let mut rest = ids.as_slice();
        for fold in 1..=NUM_FOLDS {
            let (head, tail) = rest.split_at(fold_size(n, fold));
            for id in head {
                if fold_of.insert(id.to_string(), fold).is_some() {
                    return Err(Error::InvalidArgument(format!("duplicate record id {id}")));
                }
            }
            rest = tail;
        }
    }
    Ok(FoldAssignment {
        dataset: dataset.name,
        seed,
        generator: GENERATOR.to_string(),
        fold_of,
    })
}

impl FoldAssignment {
    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }

    /// Test set = fold `k`, train set = the other four folds. Both sorted by id.
    pub fn split(&self, k: u8) -> Result<FoldSplit> {
        if !(1..=NUM_FOLDS).contains(&k) {
            return Err(Error::InvalidArgument(format!(
                "fold index {k} outside 1..={NUM_FOLDS}"
            )));
        }
        let (test, train): (Vec<_>, Vec<_>) = self.fold_of.iter().partition(|(_, f)| **f == k);
        Ok(FoldSplit {
            fold: k,
            train: train.into_iter().map(|(id, _)| id.clone()).collect(),
            test: test.into_iter().map(|(id, _)| id.clone()).collect(),
        })
    }

    /// Serializes as a header block followed by `id<TAB>fold` lines sorted by id.
    pub fn to_text(&self, provenance: &Provenance) -> String {
        let mut out = provenance.header("fold assignment");
        let _ = writeln!(out, "# dataset={}", self.dataset);
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "# generator={}", self.generator);
        out.push_str("id\tfold\n");
        for (id, fold) in &self.fold_of {
            let _ = writeln!(out, "{id}\t{fold}");
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<FoldAssignment> {
        let mut dataset = None;
        let mut seed = None;
        let mut generator = None;
        let mut fold_of = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let err = |reason: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                reason,
            };
            if let Some(meta) = line.strip_prefix("# ") {
                if let Some((key, value)) = meta.split_once('=') {
                    match key {
                        "dataset" => dataset = Some(value.parse().map_err(|e: Error| err(e.to_string()))?),
                        "seed" => seed = Some(value.parse::<u64>().map_err(|e| err(e.to_string()))?),
                        "generator" => generator = Some(value.to_string()),
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() || line == "id\tfold" {
                continue;
            }
            let (id, fold) = line
                .split_once('\t')
                .ok_or_else(|| err("expected id<TAB>fold".into()))?;
            let fold: u8 = fold.parse().map_err(|_| err(format!("bad fold {fold:?}")))?;
            if !(1..=NUM_FOLDS).contains(&fold) {
                return Err(err(format!("fold {fold} out of range")));
            }
            if fold_of.insert(id.to_string(), fold).is_some() {
                return Err(err(format!("duplicate id {id}")));
            }
        }
        let missing = |what: &str| Error::Parse {
            path: origin.to_string(),
            line: 0,
            reason: format!("missing header {what}"),
        };
        Ok(FoldAssignment {
            dataset: dataset.ok_or_else(|| missing("dataset"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            generator: generator.ok_or_else(|| missing("generator"))?,
            fold_of,
        })
    }

    pub fn write(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        fsutil::write_atomic(path, self.to_text(provenance).as_bytes())
    }

    pub fn load(path: &Path) -> Result<FoldAssignment> {
        let text = fsutil::read_to_string(path)?;
        FoldAssignment::parse(&text, &path.display().to_string())
    }

    /// Checks that this assignment covers exactly the ids of `dataset`.
    pub fn matches(&self, dataset: &BinaryDataset) -> bool {
        self.dataset == dataset.name
            && self.fold_of.len() == dataset.len()
            && dataset.records.iter().all(|r| self.fold_of.contains_key(&r.id))
    }
}
