use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledImageDataset, Split};
use crate::error::{Error, Result};

/// Which training samples get watermarked, per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkingSelection {
    pub wm_ratio: f64,
    /// Class -> sorted dataset indices.
    pub per_class_indices: BTreeMap<usize, Vec<usize>>,
    pub seed: u64,
}

impl MarkingSelection {
    pub fn empty(classes: usize, seed: u64) -> Self {
        MarkingSelection {
            wm_ratio: 0.0,
            per_class_indices: (0..classes).map(|c| (c, Vec::new())).collect(),
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.per_class_indices.values().map(Vec::len).sum()
    }

    /// `(class, index)` pairs in class-then-index order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.per_class_indices
            .iter()
            .flat_map(|(&c, idx)| idx.iter().map(move |&i| (c, i)))
            .collect()
    }

    pub fn validate_against(&self, ds: &LabeledImageDataset) -> Result<()> {
        for (&c, idx) in &self.per_class_indices {
            if c >= ds.class_count() {
                return Err(Error::UnknownClass {
                    index: c,
                    classes: ds.class_count(),
                });
            }
            let mut seen = std::collections::HashSet::new();
            for &i in idx {
                if i >= ds.len() || ds.labels[i] != c {
                    return Err(Error::invalid(format!(
                        "selection index {i} is not a sample of class {c}"
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::invalid(format!("selection index {i} repeated")));
                }
            }
        }
        Ok(())
    }
}

/// Number of marked samples for a class of `size` samples (round half up).
pub fn marked_count(wm_ratio: f64, size: usize) -> usize {
    (wm_ratio * size as f64 + 0.5).floor() as usize
}

/// Draws `round(wm_ratio * class_size)` samples per class without replacement.
pub fn select_marking_targets(
    ds: &LabeledImageDataset,
    wm_ratio: f64,
    seed: u64,
) -> Result<MarkingSelection> {
    if !(wm_ratio > 0.0 && wm_ratio <= 1.0) {
        return Err(Error::invalid(format!(
            "wm_ratio {wm_ratio} outside (0, 1]"
        )));
    }
    if ds.split != Split::Train {
        return Err(Error::invalid(
            "marking targets are drawn from a train split",
        ));
    }
    let mut per_class = BTreeMap::new();
    for (c, members) in ds.indices_by_class().into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::invalid(format!("class {c} has no samples")));
        }
        let k = marked_count(wm_ratio, members.len()).min(members.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64 + 1);
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, members.len(), k)
            .into_iter()
            .map(|j| members[j])
            .collect();
        picked.sort_unstable();
        per_class.insert(c, picked);
    }
    Ok(MarkingSelection {
        wm_ratio,
        per_class_indices: per_class,
        seed,
    })
}
