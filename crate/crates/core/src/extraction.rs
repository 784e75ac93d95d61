//! Knockoff-style model extraction: query a victim on out-of-task images,
//! distill a surrogate from its answers, and check whether the watermark
//! survives in the surrogate.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_dataset, quantize_8bit, save_dataset, DatasetFormat, LabeledImageDataset, Split,
    WatermarkSecret,
};
use crate::error::{Error, Result};
use crate::exec::{ComputeProfile, ExecPolicy};
use crate::model::{train_on_targets, TrainedModel};
use crate::nn::{Architecture, Shape3, TrainConfig};
use crate::verify::{
    blackbox_verify, marked_probe, query_all, whitebox_verify, BlackBoxOptions, FeatureExtractor,
    ProbabilityOracle, ProbeSource, VerificationVerdict, WhiteBoxOptions, WhiteBoxSuspect,
};

/// Below this surrogate/victim agreement the extraction itself counts as
/// failed and the report flags the accuracy gap.
pub const AGREEMENT_FLOOR: f64 = 0.70;

const QUERY_BATCH: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSet {
    pub queries: Vec<Vec<f32>>,
    pub responses: Vec<Vec<f32>>,
    pub shape: Shape3,
    /// Positions of the queries in the pool they were drawn from.
    pub pool_indices: Vec<usize>,
    pub seed: u64,
    pub victim_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransferMeta {
    victim_digest: String,
    seed: u64,
    pool_indices: Vec<usize>,
    classes: usize,
    complete: bool,
}

impl TransferSet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.responses.first().map_or(0, Vec::len)
    }

    /// Writes `queries.tar` (dataset archive, labels = victim top-1),
    /// `responses.bin` (`u32 n, u32 m`, then `n*m` little-endian `f32`) and
    /// `transfer.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_with(dir, true)
    }

    fn save_with(&self, dir: &Path, complete: bool) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = self.class_count().max(1);
        let ds = LabeledImageDataset::new(
            "transfer",
            self.shape,
            (0..m).map(|c| format!("victim_top1_{c}")).collect(),
            Split::Probe,
            self.queries.clone(),
            self.responses.iter().map(|r| top1(r)).collect(),
        )?;
        save_dataset(&ds, &dir.join("queries.tar"), DatasetFormat::Archive)?;
        let mut blob = Vec::with_capacity(8 + 4 * self.len() * m);
        blob.extend_from_slice(&(self.len() as u32).to_le_bytes());
        blob.extend_from_slice(&(self.class_count() as u32).to_le_bytes());
        for r in &self.responses {
            for v in r {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let p = dir.join("responses.bin");
        std::fs::write(&p, blob).map_err(|e| Error::io(&p, e))?;
        let meta = TransferMeta {
            victim_digest: self.victim_digest.clone(),
            seed: self.seed,
            pool_indices: self.pool_indices.clone(),
            classes: self.class_count(),
            complete,
        };
        let p = dir.join("transfer.json");
        std::fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("transfer.json");
        let meta: TransferMeta =
            serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let ds = load_dataset(
            &dir.join("queries.tar"),
            DatasetFormat::Archive,
            Split::Probe,
        )?;
        let p = dir.join("responses.bin");
        let blob = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if blob.len() < 8 {
            return Err(Error::Corrupt("responses.bin truncated".into()));
        }
        let n = u32::from_le_bytes(blob[0..4].try_into().expect("4 bytes")) as usize;
        let m = u32::from_le_bytes(blob[4..8].try_into().expect("4 bytes")) as usize;
        if blob.len() != 8 + 4 * n * m || n != ds.len() {
            return Err(Error::Corrupt(format!(
                "responses.bin holds {} bytes for {n}x{m} responses and {} queries",
                blob.len(),
                ds.len()
            )));
        }
        let values: Vec<f32> = blob[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let responses = if m == 0 {
            vec![Vec::new(); n]
        } else {
            values.chunks(m).map(<[f32]>::to_vec).collect()
        };
        Ok(TransferSet {
            queries: ds.images,
            responses,
            shape: ds.shape,
            pool_indices: meta.pool_indices,
            seed: meta.seed,
            victim_digest: meta.victim_digest,
        })
    }
}

fn top1(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws `budget` pool images (seeded, without replacement) and queries the
/// victim once per image. If a query fails and `checkpoint` is given, the
/// answers collected so far are written there before the error is returned.
pub fn build_transfer_set(
    victim: &dyn ProbabilityOracle,
    pool: &[Vec<f32>],
    shape: Shape3,
    budget: usize,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<TransferSet> {
    if budget == 0 || budget > pool.len() {
        return Err(Error::invalid(format!(
            "transfer budget {budget} outside [1, {}]",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), budget).into_vec();
    idx.sort_unstable();
    let queries: Vec<Vec<f32>> = idx
        .iter()
        .map(|&i| pool[i].iter().map(|v| quantize_8bit(*v)).collect())
        .collect();
    let mut set = TransferSet {
        queries: Vec::with_capacity(budget),
        responses: Vec::with_capacity(budget),
        shape,
        pool_indices: Vec::with_capacity(budget),
        seed,
        victim_digest: victim.digest(),
    };
    for (chunk, ids) in queries.chunks(QUERY_BATCH).zip(idx.chunks(QUERY_BATCH)) {
        match query_all(victim, chunk, QUERY_BATCH) {
            Ok(rows) => {
                set.queries.extend_from_slice(chunk);
                set.responses.extend(rows);
                set.pool_indices.extend_from_slice(ids);
            }
            Err(e) => {
                if let Some(dir) = checkpoint {
                    if !set.is_empty() {
                        set.save_with(dir, false)?;
                    }
                }
                return Err(Error::Query(format!(
                    "after {} of {budget} queries: {e}",
                    set.len()
                )));
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// Match full probability rows (KL divergence at temperature 1).
    #[default]
    Soft,
    /// Train on the victim's top-1 label only.
    HardLabel,
}

/// Distills a surrogate from a transfer set. The victim is never queried.
pub fn train_surrogate(
    transfer: &TransferSet,
    architecture: Architecture,
    hyper: &TrainConfig,
    mode: DistillMode,
    policy: ExecPolicy,
    profile: ComputeProfile,
) -> Result<TrainedModel> {
    if transfer.is_empty() {
        return Err(Error::invalid("transfer set is empty"));
    }
    let m = transfer.class_count();
    let targets: Vec<Vec<f32>> = match mode {
        DistillMode::Soft => transfer.responses.clone(),
        DistillMode::HardLabel => transfer
            .responses
            .iter()
            .map(|r| {
                let mut row = vec![0.0; m];
                row[top1(r)] = 1.0;
                row
            })
            .collect(),
    };
    let kind = match mode {
        DistillMode::Soft => "soft_targets",
        DistillMode::HardLabel => "hard_targets",
    };
    let id = format!(
        "transfer-from-{}",
        &transfer.victim_digest[..transfer.victim_digest.len().min(12)]
    );
    let digest = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (q, r) in transfer.queries.iter().zip(&transfer.responses) {
            for v in q.iter().chain(r) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    };
    train_on_targets(
        &transfer.queries,
        &targets,
        transfer.shape,
        m,
        architecture,
        hyper,
        (&id, &digest, kind),
        policy,
        profile,
    )
}

/// Fraction of images on which both oracles give the same top-1 class.
pub fn top1_agreement(
    a: &dyn ProbabilityOracle,
    b: &dyn ProbabilityOracle,
    images: &[Vec<f32>],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("agreement over no images"));
    }
    let pa = query_all(a, images, QUERY_BATCH)?;
    let pb = query_all(b, images, QUERY_BATCH)?;
    let same = pa
        .iter()
        .zip(&pb)
        .filter(|(x, y)| top1(x) == top1(y))
        .count();
    Ok(same as f64 / images.len() as f64)
}

/// Mean KL(p || q) over rows, with the same probability floor as black-box
/// verification.
pub fn mean_kl(p: &[Vec<f32>], q: &[Vec<f32>]) -> f64 {
    let floor = crate::verify::PROB_FLOOR;
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(pr, qr)| {
            pr.iter()
                .zip(qr)
                .filter(|(a, _)| **a > 0.0)
                .map(|(a, b)| {
                    let a = *a as f64;
                    a * (a.max(floor).ln() - (*b as f64).max(floor).ln())
                })
                .sum::<f64>()
        })
        .sum();
    total / p.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalReport {
    pub victim_verdicts: Vec<VerificationVerdict>,
    pub surrogate_verdicts: Vec<VerificationVerdict>,
    pub victim_accuracy: f64,
    pub surrogate_accuracy: f64,
    /// `Acc(victim) - Acc(surrogate)` in percentage points.
    pub accuracy_gap_pp: f64,
    /// Top-1 agreement on held-out queries, when measured.
    pub agreement: Option<f64>,
    /// Set when the surrogate is too far from the victim for a negative
    /// verdict to say anything about the watermark.
    pub gap_flag: Option<String>,
}

/// Runs white-box (marked probe) and black-box verification on both models.
#[allow(clippy::too_many_arguments)]
pub fn extraction_survival_report(
    victim: &TrainedModel,
    secret: &WatermarkSecret,
    surrogate: &TrainedModel,
    marker: &dyn FeatureExtractor,
    test: &LabeledImageDataset,
    held_out_queries: Option<&[Vec<f32>]>,
    wb: &WhiteBoxOptions,
    bb: &BlackBoxOptions,
    policy: ExecPolicy,
) -> Result<SurvivalReport> {
    for m in [victim, surrogate] {
        if m.class_count() != secret.class_count() {
            return Err(Error::ClassCountMismatch {
                left: secret.class_count(),
                right: m.class_count(),
            });
        }
    }
    let probe = marked_probe(secret);
    let verdicts = |m: &TrainedModel| -> Result<Vec<VerificationVerdict>> {
        let mut out = Vec::new();
        if !probe.is_empty() {
            let s = WhiteBoxSuspect::from_model(m);
            out.push(whitebox_verify(
                &s,
                secret,
                marker,
                ProbeSource::MarkedSet,
                &probe,
                wb,
                policy,
            )?);
        }
        out.push(blackbox_verify(m, secret, None, bb)?);
        Ok(out)
    };
    let victim_accuracy = victim.evaluate_accuracy(test, policy)?;
    let surrogate_accuracy = surrogate.evaluate_accuracy(test, policy)?;
    let accuracy_gap_pp = 100.0 * (victim_accuracy - surrogate_accuracy);
    let agreement = match held_out_queries {
        Some(q) => Some(top1_agreement(victim, surrogate, q)?),
        None => None,
    };
    let gap_flag = match agreement {
        Some(a) if a < AGREEMENT_FLOOR => Some(format!(
            "surrogate agrees with the victim on {:.1}% of held-out queries (< {:.0}%); accuracy gap {:.2} pp. \
             Extraction did not reproduce the victim, so a negative verdict is inconclusive",
            100.0 * a,
            100.0 * AGREEMENT_FLOOR,
            accuracy_gap_pp
        )),
        _ => None,
    };
    Ok(SurvivalReport {
        victim_verdicts: verdicts(victim)?,
        surrogate_verdicts: verdicts(surrogate)?,
        victim_accuracy,
        surrogate_accuracy,
        accuracy_gap_pp,
        agreement,
        gap_flag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(Vec<f32>);

    impl ProbabilityOracle for Constant {
        fn class_count(&self) -> usize {
            self.0.len()
        }
        fn query(&self, batch: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
            Ok(vec![self.0.clone(); batch.len()])
        }
        fn digest(&self) -> String {
            "constant".into()
        }
    }

    struct FailsAfter(usize, std::sync::atomic::AtomicUsize);

    impl ProbabilityOracle for FailsAfter {
        fn class_count(&self) -> usize {
            2
        }
        fn query(&self, batch: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
            let done = self
                .1
                .fetch_add(batch.len(), std::sync::atomic::Ordering::SeqCst);
            if done >= self.0 {
                return Err(Error::Query("endpoint down".into()));
            }
            Ok(vec![vec![0.5, 0.5]; batch.len()])
        }
        fn digest(&self) -> String {
            "flaky".into()
        }
    }

    fn pool(n: usize) -> (Vec<Vec<f32>>, Shape3) {
        let shape = Shape3::new(1, 4, 4);
        (
            (0..n)
                .map(|i| {
                    (0..16)
                        .map(|j| ((i * 5 + j * 3) % 256) as f32 / 255.0)
                        .collect()
                })
                .collect(),
            shape,
        )
    }

    #[test]
    fn full_budget_queries_every_image_once() {
        let (p, shape) = pool(30);
        let t = build_transfer_set(&Constant(vec![0.25, 0.75]), &p, shape, 30, 1, None).unwrap();
        assert_eq!(t.pool_indices, (0..30).collect::<Vec<_>>());
        assert_eq!(t.queries, p);
        let a = build_transfer_set(&Constant(vec![0.25, 0.75]), &p, shape, 10, 7, None).unwrap();
        let b = build_transfer_set(&Constant(vec![0.25, 0.75]), &p, shape, 10, 7, None).unwrap();
        assert_eq!(a, b);
        assert!(build_transfer_set(&Constant(vec![1.0]), &p, shape, 31, 1, None).is_err());
    }

    #[test]
    fn transfer_set_round_trip() {
        let (p, shape) = pool(12);
        let t =
            build_transfer_set(&Constant(vec![0.125, 0.375, 0.5]), &p, shape, 9, 2, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        assert_eq!(TransferSet::load(dir.path()).unwrap(), t);
    }

    #[test]
    fn query_failure_leaves_checkpoint() {
        let (p, shape) = pool(400);
        let dir = tempfile::tempdir().unwrap();
        let victim = FailsAfter(QUERY_BATCH, Default::default());
        let err = build_transfer_set(&victim, &p, shape, 300, 1, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Query(_)));
        let partial = TransferSet::load(dir.path()).unwrap();
        assert_eq!(partial.len(), QUERY_BATCH);
    }

    #[test]
    fn constant_victim_is_learned() {
        let (p, shape) = pool(200);
        let row = vec![0.6f32, 0.3, 0.1];
        let victim = Constant(row.clone());
        let t = build_transfer_set(&victim, &p[..150], shape, 150, 1, None).unwrap();
        let hyper = TrainConfig {
            epochs: 15,
            batch_size: 16,
            learning_rate: 0.05,
            lr_milestones: vec![10],
            seed: 1,
            ..TrainConfig::default()
        };
        let s = train_surrogate(
            &t,
            Architecture::TinySmooth,
            &hyper,
            DistillMode::Soft,
            ExecPolicy::Parallel,
            ComputeProfile::Deterministic,
        )
        .unwrap();
        let held = &p[150..];
        let q = s.predict_probabilities(held, ExecPolicy::Parallel).unwrap();
        let kl = mean_kl(&vec![row; held.len()], &q);
        assert!(kl <= 0.01, "kl {kl}");
        assert_eq!(s.manifest.target_kind, "soft_targets");
    }
}
