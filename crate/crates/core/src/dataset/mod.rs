//! Image-classification datasets, class subsets, marking selections and the
//! dataset owner's watermark secret.

mod formats;
mod secret;
mod selection;
mod subset;
pub mod toy;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use formats::{load_dataset, save_dataset, DatasetFormat};
pub use secret::{load_secret, save_secret, WatermarkSecret, SECRET_MAGIC, SECRET_SCHEMA_VERSION};
pub use selection::{select_marking_targets, MarkingSelection};
pub use subset::{build_class_subset, ClassSubsetSpec};

use crate::error::{Error, Result};
use crate::nn::Shape3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Probe,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Probe => "probe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "probe" => Ok(Split::Probe),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Images in `[0, 1]` (channel-major) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageDataset {
    pub dataset_id: String,
    pub shape: Shape3,
    pub class_names: Vec<String>,
    pub split: Split,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl LabeledImageDataset {
    pub fn new(
        dataset_id: impl Into<String>,
        shape: Shape3,
        class_names: Vec<String>,
        split: Split,
        images: Vec<Vec<f32>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let ds = LabeledImageDataset {
            dataset_id: dataset_id.into(),
            shape,
            class_names,
            split,
            images,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = &self.dataset_id;
        if self.images.len() != self.labels.len() {
            return Err(Error::schema(
                ctx,
                format!(
                    "{} images but {} labels",
                    self.images.len(),
                    self.labels.len()
                ),
            ));
        }
        let m = self.class_names.len();
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            if label >= m {
                return Err(Error::schema(
                    ctx,
                    format!("record {i}: label {label} outside [0, {m})"),
                ));
            }
            if img.len() != self.shape.len() {
                return Err(Error::schema(
                    ctx,
                    format!("record {i}: {} values, expected {}", img.len(), self.shape),
                ));
            }
            if let Some(v) = img.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::schema(
                    ctx,
                    format!("record {i}: pixel {v} outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Sample indices of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.class_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.indices_by_class().iter().map(Vec::len).collect()
    }

    /// One-hot probability rows for the labels.
    pub fn one_hot(&self) -> Vec<Vec<f32>> {
        let m = self.class_count();
        self.labels
            .iter()
            .map(|&l| {
                let mut row = vec![0.0; m];
                row[l] = 1.0;
                row
            })
            .collect()
    }

    /// SHA-256 over shape, class names, labels and raw pixel bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dataset_id.as_bytes());
        for v in [self.shape.c, self.shape.h, self.shape.w] {
            h.update((v as u64).to_le_bytes());
        }
        for name in &self.class_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        h.update(self.split.as_str());
        for (img, &l) in self.images.iter().zip(&self.labels) {
            h.update((l as u64).to_le_bytes());
            for v in img {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Snaps a value in `[0, 1]` to the nearest of 256 levels.
#[inline]
pub fn quantize_8bit(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[inline]
pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
