//! Trained classifiers with their training manifests, the feature-extractor /
//! linear-head decomposition, and the checkpoint container.
//!
//! Container layout (little-endian): `b"RMDL"`, `u32` schema version, then
//! `u64`-length-prefixed sections: architecture spec (JSON), normalization
//! stats (JSON), manifest (JSON), weight blob (`f32`), and finally the
//! SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::LabeledImageDataset;
use crate::error::{Error, Result};
use crate::exec::{ComputeProfile, ExecPolicy};
use crate::marker::{params_digest, DifferentiableFeatures};
use crate::nn::{train, Architecture, FeatureTape, Network, Normalization, TrainConfig};

pub const MODEL_MAGIC: &[u8; 4] = b"RMDL";
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Everything needed to retrain a model bit-for-bit on the deterministic
/// profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub architecture: Architecture,
    pub dataset_id: String,
    pub dataset_digest: String,
    pub sample_count: usize,
    /// `"labels"` for supervised training, `"soft_targets"` or `"hard_targets"`
    /// for distillation.
    pub target_kind: String,
    pub init_seed: u64,
    pub hyper: TrainConfig,
    pub profile: ComputeProfile,
    pub epoch_losses: Vec<f64>,
    /// Top-1 accuracy on the training inputs (supervised runs only).
    pub train_accuracy: Option<f64>,
    pub chance_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub architecture: Architecture,
    pub network: Network,
    pub manifest: TrainingManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifierWeights {
    /// `class_count x feature_dim`, row-major.
    pub weight_matrix: Vec<f32>,
    pub bias: Vec<f32>,
    pub class_count: usize,
    pub feature_dim: usize,
}

impl LinearClassifierWeights {
    pub fn row(&self, class: usize) -> &[f32] {
        &self.weight_matrix[class * self.feature_dim..(class + 1) * self.feature_dim]
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Supervised training on hard labels.
pub fn train_classifier(
    ds: &LabeledImageDataset,
    architecture: Architecture,
    hyper: &TrainConfig,
    policy: ExecPolicy,
    profile: ComputeProfile,
) -> Result<TrainedModel> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if ds.split != crate::dataset::Split::Train {
        return Err(Error::invalid("classifiers are trained on a train split"));
    }
    let model = train_on_targets(
        &ds.images,
        &ds.one_hot(),
        ds.shape,
        ds.class_count(),
        architecture,
        hyper,
        (&ds.dataset_id, &ds.digest(), "labels"),
        policy,
        profile,
    )?;
    let mut model = model;
    model.manifest.train_accuracy = Some(evaluate_accuracy_on(
        &model, &ds.images, &ds.labels, policy,
    )?);
    Ok(model)
}

/// Trains on arbitrary probability-row targets; normalization statistics are
/// taken from `inputs`.
#[allow(clippy::too_many_arguments)]
pub fn train_on_targets(
    inputs: &[Vec<f32>],
    targets: &[Vec<f32>],
    shape: crate::nn::Shape3,
    classes: usize,
    architecture: Architecture,
    hyper: &TrainConfig,
    (dataset_id, dataset_digest, target_kind): (&str, &str, &str),
    policy: ExecPolicy,
    profile: ComputeProfile,
) -> Result<TrainedModel> {
    let norm = Normalization::from_images(inputs.iter().map(Vec::as_slice), shape);
    let mut network = Network::new(architecture.spec(shape, classes), norm, hyper.seed)?;
    let manifest_of = |losses: Vec<f64>| TrainingManifest {
        architecture,
        dataset_id: dataset_id.to_string(),
        dataset_digest: dataset_digest.to_string(),
        sample_count: inputs.len(),
        target_kind: target_kind.to_string(),
        init_seed: hyper.seed,
        hyper: hyper.clone(),
        profile,
        epoch_losses: losses,
        train_accuracy: None,
        chance_accuracy: 1.0 / classes as f64,
    };
    let log =
        train(&mut network, inputs, targets, hyper, policy, profile).map_err(|e| match e {
            Error::Diverged { epoch, loss, .. } => Error::Diverged {
                epoch,
                loss,
                manifest: serde_json::to_string(&manifest_of(Vec::new())).unwrap_or_default(),
            },
            other => other,
        })?;
    let manifest = manifest_of(log.epoch_losses);
    Ok(TrainedModel {
        architecture,
        network,
        manifest,
    })
}

impl TrainedModel {
    pub fn feature_dim(&self) -> usize {
        self.network.feature_dim()
    }

    pub fn class_count(&self) -> usize {
        self.network.classes()
    }

    pub fn weights_digest(&self) -> String {
        params_digest(self.network.params())
    }

    fn check_shapes(&self, batch: &[Vec<f32>]) -> Result<()> {
        let n = self.network.input_shape().len();
        if let Some((i, x)) = batch.iter().enumerate().find(|(_, x)| x.len() != n) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} inputs", self.network.input_shape()),
                found: format!("batch item {i} with {} values", x.len()),
            });
        }
        Ok(())
    }

    /// Penultimate-layer features, one row per image.
    pub fn features(&self, batch: &[Vec<f32>], policy: ExecPolicy) -> Result<Vec<Vec<f32>>> {
        self.check_shapes(batch)?;
        policy
            .map_slice(batch, |x| self.network.features(x))
            .into_iter()
            .collect()
    }

    pub fn classifier_weights(&self) -> LinearClassifierWeights {
        LinearClassifierWeights {
            weight_matrix: self.network.head_weights().to_vec(),
            bias: self.network.head_bias().to_vec(),
            class_count: self.class_count(),
            feature_dim: self.feature_dim(),
        }
    }

    pub fn logits(&self, batch: &[Vec<f32>], policy: ExecPolicy) -> Result<Vec<Vec<f32>>> {
        self.check_shapes(batch)?;
        policy
            .map_slice(batch, |x| self.network.logits(x))
            .into_iter()
            .collect()
    }

    pub fn predict_probabilities(
        &self,
        batch: &[Vec<f32>],
        policy: ExecPolicy,
    ) -> Result<Vec<Vec<f32>>> {
        self.check_shapes(batch)?;
        policy
            .map_slice(batch, |x| self.network.probabilities(x))
            .into_iter()
            .collect()
    }

    pub fn predict(&self, batch: &[Vec<f32>], policy: ExecPolicy) -> Result<Vec<usize>> {
        Ok(self
            .logits(batch, policy)?
            .iter()
            .map(|l| argmax(l))
            .collect())
    }

    pub fn evaluate_accuracy(&self, ds: &LabeledImageDataset, policy: ExecPolicy) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::invalid("accuracy of an empty dataset"));
        }
        evaluate_accuracy_on(self, &ds.images, &ds.labels, policy)
    }

    /// Checkpoint bytes; see the module docs for the layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_SCHEMA_VERSION.to_le_bytes());
        let mut section = |payload: &[u8]| {
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        };
        section(serde_json::to_string(self.network.spec())?.as_bytes());
        section(serde_json::to_string(self.network.normalization())?.as_bytes());
        section(serde_json::to_string(&self.manifest)?.as_bytes());
        let blob: Vec<u8> = self
            .network
            .params()
            .iter()
            .flat_map(|p| p.to_le_bytes())
            .collect();
        section(&blob);
        let check = Sha256::digest(&out);
        out.extend_from_slice(&check);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::Corrupt("not a model checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != MODEL_SCHEMA_VERSION {
            return Err(Error::UnsupportedSchema {
                found: version,
                supported: MODEL_SCHEMA_VERSION,
            });
        }
        if bytes.len() < 40 {
            return Err(Error::Corrupt("model checkpoint truncated".into()));
        }
        let (body, check) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != check {
            return Err(Error::Corrupt("model checkpoint checksum mismatch".into()));
        }
        let mut pos = 8;
        let mut next = || -> Result<&[u8]> {
            let len_bytes = body
                .get(pos..pos + 8)
                .ok_or_else(|| Error::Corrupt("model checkpoint truncated".into()))?;
            let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
            let payload = body
                .get(pos + 8..pos + 8 + len)
                .ok_or_else(|| Error::Corrupt("model checkpoint truncated".into()))?;
            pos += 8 + len;
            Ok(payload)
        };
        let spec = serde_json::from_slice(next()?)?;
        let norm = serde_json::from_slice(next()?)?;
        let manifest: TrainingManifest = serde_json::from_slice(next()?)?;
        let blob = next()?;
        if blob.len() % 4 != 0 {
            return Err(Error::Corrupt(
                "weight blob length is not a multiple of 4".into(),
            ));
        }
        let params = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let network = Network::from_parts(spec, params, norm)?;
        Ok(TrainedModel {
            architecture: manifest.architecture,
            network,
            manifest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn evaluate_accuracy_on(
    model: &TrainedModel,
    images: &[Vec<f32>],
    labels: &[usize],
    policy: ExecPolicy,
) -> Result<f64> {
    let pred = model.predict(images, policy)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

impl DifferentiableFeatures for TrainedModel {
    type Tape = FeatureTape;

    fn input_len(&self) -> usize {
        self.network.input_shape().len()
    }

    fn feature_dim(&self) -> usize {
        self.network.feature_dim()
    }

    fn forward(&self, x: &[f32]) -> Result<(Vec<f32>, FeatureTape)> {
        self.network.features_taped(x)
    }

    fn pullback(&self, tape: &FeatureTape, upstream: &[f32]) -> Vec<f32> {
        self.network.feature_pullback(tape, upstream)
    }

    fn fingerprint(&self) -> String {
        self.weights_digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::nn::Shape3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(n_per: usize, seed: u64) -> LabeledImageDataset {
        let shape = Shape3::new(1, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let c = i % 2;
            let center = if c == 0 { 0.3 } else { 0.7 };
            images.push(
                (0..shape.len())
                    .map(|_| (center + rng.random_range(-0.1f32..0.1)).clamp(0.0, 1.0))
                    .collect(),
            );
            labels.push(c);
        }
        LabeledImageDataset::new(
            "blobs",
            shape,
            vec!["dark".into(), "light".into()],
            Split::Train,
            images,
            labels,
        )
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr_milestones: vec![],
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let train_ds = blobs(40, 1);
        let mut test_ds = blobs(20, 2);
        test_ds.split = Split::Test;
        let m = train_classifier(
            &train_ds,
            Architecture::TinySmooth,
            &quick(8),
            ExecPolicy::Parallel,
            ComputeProfile::Deterministic,
        )
        .unwrap();
        assert!(m.evaluate_accuracy(&test_ds, ExecPolicy::Parallel).unwrap() >= 0.95);
        assert!(m.manifest.train_accuracy.unwrap() > m.manifest.chance_accuracy);
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let ds = blobs(10, 1);
        let a = train_classifier(
            &ds,
            Architecture::TinySmooth,
            &quick(0),
            ExecPolicy::Parallel,
            ComputeProfile::Deterministic,
        )
        .unwrap();
        assert_eq!(a.manifest.hyper.epochs, 0);
        assert!(a.manifest.epoch_losses.is_empty());
        let b = train_classifier(
            &ds,
            Architecture::TinySmooth,
            &quick(2),
            ExecPolicy::Parallel,
            ComputeProfile::Deterministic,
        )
        .unwrap();
        let c = train_classifier(
            &ds,
            Architecture::TinySmooth,
            &quick(2),
            ExecPolicy::Sequential,
            ComputeProfile::Deterministic,
        )
        .unwrap();
        assert_eq!(b.weights_digest(), c.weights_digest());
    }

    #[test]
    fn decomposition_and_batching() {
        let ds = blobs(8, 4);
        let m = train_classifier(
            &ds,
            Architecture::DeskCnn,
            &quick(1),
            ExecPolicy::Parallel,
            ComputeProfile::Deterministic,
        );
        let m = m.unwrap();
        let w = m.classifier_weights();
        assert_eq!(w.weight_matrix.len(), w.class_count * w.feature_dim);
        assert_eq!(w, m.classifier_weights());
        let f = m.features(&ds.images, ExecPolicy::Parallel).unwrap();
        let logits = m.logits(&ds.images, ExecPolicy::Sequential).unwrap();
        for (fi, li) in f.iter().zip(&logits) {
            for (c, l) in li.iter().enumerate() {
                let z: f32 = w.row(c).iter().zip(fi).map(|(a, b)| a * b).sum::<f32>() + w.bias[c];
                assert!((z - l).abs() <= 1e-5 * (1.0 + z.abs()));
            }
        }
        let one = m
            .features(&ds.images[3..4], ExecPolicy::Sequential)
            .unwrap();
        assert_eq!(one[0], f[3]);
        let dup = m
            .features(
                &[ds.images[0].clone(), ds.images[0].clone()],
                ExecPolicy::Parallel,
            )
            .unwrap();
        assert_eq!(dup[0], dup[1]);
        for row in m
            .predict_probabilities(&ds.images, ExecPolicy::Parallel)
            .unwrap()
        {
            assert!((row.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(m.features(&[vec![0.0; 3]], ExecPolicy::Parallel).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = blobs(6, 5);
        let m = train_classifier(
            &ds,
            Architecture::TinySmooth,
            &quick(1),
            ExecPolicy::Parallel,
            ComputeProfile::Deterministic,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rmdl");
        m.save(&p).unwrap();
        let back = TrainedModel::load(&p).unwrap();
        assert_eq!(back.weights_digest(), m.weights_digest());
        assert_eq!(back.manifest, m.manifest);
        assert_eq!(back.to_bytes().unwrap(), m.to_bytes().unwrap());
        let bytes = m.to_bytes().unwrap();
        assert!(matches!(
            TrainedModel::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Corrupt(_))
        ));
        let mut v = bytes.clone();
        v[4..8].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(
            TrainedModel::from_bytes(&v),
            Err(Error::UnsupportedSchema { .. })
        ));
    }
}
