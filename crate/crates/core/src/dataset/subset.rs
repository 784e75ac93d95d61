use serde::{Deserialize, Serialize};

use super::LabeledImageDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSubsetSpec {
    pub source_dataset_id: String,
    pub class_indices: Vec<usize>,
}

impl ClassSubsetSpec {
    pub fn new(source_dataset_id: impl Into<String>, mut class_indices: Vec<usize>) -> Self {
        class_indices.sort_unstable();
        ClassSubsetSpec {
            source_dataset_id: source_dataset_id.into(),
            class_indices,
        }
    }
}

/// Keeps the samples of the chosen classes and relabels them densely in
/// sorted original order.
pub fn build_class_subset(
    ds: &LabeledImageDataset,
    spec: &ClassSubsetSpec,
) -> Result<LabeledImageDataset> {
    if spec.class_indices.is_empty() {
        return Err(Error::invalid("class subset is empty"));
    }
    let mut classes = spec.class_indices.clone();
    classes.sort_unstable();
    if classes.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("class subset contains duplicates"));
    }
    let m = ds.class_count();
    if let Some(&bad) = classes.iter().find(|&&c| c >= m) {
        return Err(Error::UnknownClass {
            index: bad,
            classes: m,
        });
    }
    let mut remap = vec![usize::MAX; m];
    for (new, &old) in classes.iter().enumerate() {
        remap[old] = new;
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (img, &l) in ds.images.iter().zip(&ds.labels) {
        if remap[l] != usize::MAX {
            images.push(img.clone());
            labels.push(remap[l]);
        }
    }
    let id = if classes.len() == m {
        ds.dataset_id.clone()
    } else {
        format!("{}[{}]", ds.dataset_id, classes.len())
    };
    LabeledImageDataset::new(
        id,
        ds.shape,
        classes.iter().map(|&c| ds.class_names[c].clone()).collect(),
        ds.split,
        images,
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::nn::Shape3;

    fn hundred_classes(per: usize) -> LabeledImageDataset {
        let n = 100 * per;
        LabeledImageDataset::new(
            "c100",
            Shape3::new(1, 1, 2),
            (0..100).map(|c| format!("class{c}")).collect(),
            Split::Train,
            (0..n)
                .map(|i| vec![(i % 256) as f32 / 255.0, 0.0])
                .collect(),
            (0..n).map(|i| i % 100).collect(),
        )
        .unwrap()
    }

    #[test]
    fn all_classes_is_identity() {
        let ds = hundred_classes(3);
        let all =
            build_class_subset(&ds, &ClassSubsetSpec::new("c100", (0..100).collect())).unwrap();
        assert_eq!(all, ds);
    }

    #[test]
    fn thirty_of_hundred_classes() {
        let ds = hundred_classes(500);
        let pick: Vec<usize> = (0..30).map(|i| i * 3 + 1).collect();
        let sub = build_class_subset(&ds, &ClassSubsetSpec::new("c100", pick.clone())).unwrap();
        assert_eq!(sub.len(), 15_000);
        assert_eq!(sub.class_count(), 30);
        assert_eq!(sub.class_names[2], format!("class{}", pick[2]));
        assert!(sub.labels.iter().all(|&l| l < 30));
    }

    #[test]
    fn unknown_and_empty() {
        let ds = hundred_classes(1);
        assert!(matches!(
            build_class_subset(&ds, &ClassSubsetSpec::new("c100", vec![3, 250])),
            Err(Error::UnknownClass { index: 250, .. })
        ));
        assert!(build_class_subset(&ds, &ClassSubsetSpec::new("c100", vec![])).is_err());
    }

    #[test]
    fn subsetting_through_the_full_set_is_idempotent() {
        let ds = hundred_classes(2);
        let spec = ClassSubsetSpec::new("c100", vec![5, 9, 42]);
        let direct = build_class_subset(&ds, &spec).unwrap();
        let full =
            build_class_subset(&ds, &ClassSubsetSpec::new("c100", (0..100).collect())).unwrap();
        let via = build_class_subset(&full, &spec).unwrap();
        assert_eq!(direct, via);
    }
}
