use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::requirements::{StealthBudget, VerificationSettings};
use super::robustness::Transform;
use crate::dataset::toy::ToyTaskConfig;
use crate::dataset::{
    build_class_subset, load_dataset, ClassSubsetSpec, DatasetFormat, LabeledImageDataset, Split,
};
use crate::error::{Error, Result};
use crate::extraction::DistillMode;
use crate::marker::EmbedParams;
use crate::nn::{Architecture, TrainConfig};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Toy(ToyTaskConfig),
    /// Train and test splits read from one location.
    Files {
        path: PathBuf,
        format: DatasetFormat,
    },
}

impl DatasetSpec {
    pub fn load(
        &self,
        subset: Option<&ClassSubsetSpec>,
    ) -> Result<(LabeledImageDataset, LabeledImageDataset)> {
        let (train, test) = match self {
            DatasetSpec::Toy(cfg) => cfg.generate()?,
            DatasetSpec::Files { path, format } => (
                load_dataset(path, *format, Split::Train)?,
                load_dataset(path, *format, Split::Test)?,
            ),
        };
        match subset {
            Some(s) => Ok((
                build_class_subset(&train, s)?,
                build_class_subset(&test, s)?,
            )),
            None => Ok((train, test)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub hyper: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub name: String,
    pub architecture: Architecture,
    pub hyper: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolSpec {
    /// Images from the toy families that the task does not use, plus bare backgrounds.
    Toy { count: usize, seed: u64 },
    /// Any readable dataset; its labels are ignored.
    Files {
        path: PathBuf,
        format: DatasetFormat,
        split: Split,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSpec {
    pub surrogate: ModelSpec,
    pub pool: PoolSpec,
    /// Number of victim queries used for distillation.
    pub budget: usize,
    /// Pool images kept aside to measure top-1 agreement.
    pub held_out: usize,
    #[serde(default)]
    pub mode: DistillMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub name: String,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub subset: Option<ClassSubsetSpec>,
    pub wm_ratios: Vec<f64>,
    pub embed: EmbedParams,
    pub marker: ModelSpec,
    pub adversary: ModelSpec,
    #[serde(default)]
    pub references: Vec<ReferenceSpec>,
    #[serde(default)]
    pub extraction: Option<ExtractionSpec>,
    #[serde(default)]
    pub verification: VerificationSettings,
    #[serde(default)]
    pub stealth: StealthBudget,
    #[serde(default)]
    pub robustness: Vec<Transform>,
    pub carrier_seed: u64,
    pub selection_seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentManifest {
    /// The desk-scale toy experiment at the given seed. The task is noisier
    /// and training longer than the library defaults: on the easy task the
    /// models fit every marked image without using the carrier direction.
    pub fn desk(seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        let hyper = |s: u64| TrainConfig {
            epochs: 40,
            weight_decay: 0.0,
            lr_milestones: vec![24, 34],
            seed: s,
            ..TrainConfig::default()
        };
        ExperimentManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            name: format!("desk-toy-s{seed}"),
            dataset: DatasetSpec::Toy(ToyTaskConfig {
                pixel_noise: 0.15,
                distractor_prob: 0.9,
                seed,
                ..ToyTaskConfig::default()
            }),
            subset: None,
            wm_ratios: vec![0.2],
            embed: EmbedParams::default(),
            marker: ModelSpec {
                architecture: Architecture::DeskCnn,
                hyper: hyper(seed),
            },
            adversary: ModelSpec {
                architecture: Architecture::DeskCnn,
                hyper: hyper(seed + 1000),
            },
            references: vec![ReferenceSpec {
                name: "desk_resnet".into(),
                architecture: Architecture::DeskResnet,
                hyper: hyper(seed + 2000),
            }],
            extraction: None,
            verification: VerificationSettings::default(),
            stealth: StealthBudget::default(),
            robustness: Vec::new(),
            carrier_seed: seed ^ 0xC0FFEE,
            selection_seed: seed,
            output_dir: output_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::UnsupportedSchema {
                found: self.schema_version,
                supported: MANIFEST_SCHEMA_VERSION,
            });
        }
        if self.name.trim().is_empty() {
            return Err(Error::schema("manifest", "name is empty"));
        }
        if self.wm_ratios.is_empty() {
            return Err(Error::schema("manifest", "wm_ratios is empty"));
        }
        for r in &self.wm_ratios {
            if !(*r > 0.0 && *r <= 1.0) {
                return Err(Error::schema(
                    "manifest",
                    format!("wm_ratio {r} outside (0, 1]"),
                ));
            }
        }
        let tags: BTreeSet<String> = self.wm_ratios.iter().map(|r| ratio_tag(*r)).collect();
        if tags.len() != self.wm_ratios.len() {
            return Err(Error::schema("manifest", "wm_ratios contains duplicates"));
        }
        self.embed.validate()?;
        self.verification.validate()?;
        let mut names = BTreeSet::new();
        for r in &self.references {
            let ok = !r.name.is_empty()
                && r.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok || !names.insert(r.name.as_str()) {
                return Err(Error::schema(
                    "manifest",
                    format!("bad or duplicate reference name `{}`", r.name),
                ));
            }
        }
        if let Some(x) = &self.extraction {
            if x.budget == 0 || x.held_out == 0 {
                return Err(Error::schema(
                    "manifest",
                    "extraction budget and held_out must be positive",
                ));
            }
            if let PoolSpec::Toy { count, .. } = x.pool {
                if x.budget + x.held_out > count {
                    return Err(Error::schema(
                        "manifest",
                        "extraction pool smaller than budget + held_out",
                    ));
                }
            }
            if !matches!(self.dataset, DatasetSpec::Toy(_))
                && matches!(x.pool, PoolSpec::Toy { .. })
            {
                return Err(Error::schema(
                    "manifest",
                    "a toy transfer pool needs a toy dataset",
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let version: serde_json::Value = serde_json::from_str(text)?;
        if let Some(v) = version.get("schema_version").and_then(|v| v.as_u64()) {
            if v != MANIFEST_SCHEMA_VERSION as u64 {
                return Err(Error::UnsupportedSchema {
                    found: v as u32,
                    supported: MANIFEST_SCHEMA_VERSION,
                });
            }
        }
        let m: ExperimentManifest = serde_json::from_value(version)
            .map_err(|e| Error::schema("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// sha256 over the compact JSON encoding.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// File-name tag for a ratio, e.g. `wm0.2`.
pub fn ratio_tag(r: f64) -> String {
    format!("wm{}", (r * 1e6).round() / 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_keeps_digest() {
        let mut m = ExperimentManifest::desk(3, "/tmp/out");
        m.wm_ratios = vec![0.1, 0.2];
        m.robustness = vec![Transform::Requantize { quality: 50 }];
        let back = ExperimentManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest().unwrap(), m.digest().unwrap());
    }

    #[test]
    fn rejects_bad_manifests() {
        let mut m = ExperimentManifest::desk(0, "out");
        m.schema_version = 999;
        let err = ExperimentManifest::from_json(&serde_json::to_string(&m).unwrap()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedSchema { found: 999, .. }));
        let mut m = ExperimentManifest::desk(0, "out");
        m.wm_ratios = vec![0.2, 0.2];
        assert!(m.validate().is_err());
        let mut m = ExperimentManifest::desk(0, "out");
        m.references[0].name = "a/b".into();
        assert!(m.validate().is_err());
        let mut v = serde_json::to_value(ExperimentManifest::desk(0, "out")).unwrap();
        v["wm_ratio"] = 0.3.into();
        assert!(
            ExperimentManifest::from_json(&v.to_string()).is_err(),
            "misspelled key accepted"
        );
    }

    #[test]
    fn ratio_tags() {
        assert_eq!(ratio_tag(0.2), "wm0.2");
        assert_eq!(ratio_tag(0.1), "wm0.1");
        assert_eq!(ratio_tag(1.0), "wm1");
    }
}
