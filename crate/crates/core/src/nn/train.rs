//! Mini-batch SGD with momentum, weight decay and a step-decay schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::error::{Error, Result};
use crate::exec::{sum_chunks, ComputeProfile, ExecPolicy};

/// Samples per gradient chunk. Chunks are the unit of parallel work and are
/// summed in index order under the deterministic profile.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f32,
    /// Random horizontal flips of training images.
    pub hflip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![12, 17],
            lr_decay: 0.1,
            hflip: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        let drops = self.lr_milestones.iter().filter(|m| epoch >= **m).count();
        self.learning_rate * self.lr_decay.powi(drops as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Trains `net` in place on `(inputs, targets)` where each target is a
/// probability row (one-hot for hard labels, victim outputs for distillation).
pub fn train(
    net: &mut Network,
    inputs: &[Vec<f32>],
    targets: &[Vec<f32>],
    cfg: &TrainConfig,
    policy: ExecPolicy,
    profile: ComputeProfile,
) -> Result<TrainLog> {
    if inputs.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} targets", inputs.len()),
            found: format!("{}", targets.len()),
        });
    }
    if inputs.is_empty() && cfg.epochs > 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let shape = net.input_shape();
    let n_params = net.params().len();
    let mut velocity = vec![0.0f32; n_params];
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let flips: Vec<bool> = if cfg.hflip {
            (0..inputs.len())
                .map(|_| rand::Rng::random_bool(&mut rng, 0.5))
                .collect()
        } else {
            Vec::new()
        };
        let lr = cfg.learning_rate_at(epoch);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let chunks = batch.len().div_ceil(CHUNK);
            let net_ref = &*net;
            let flips = &flips;
            let acc = sum_chunks(policy, profile, chunks, n_params + 1, |ci| {
                let mut g = vec![0.0f32; n_params + 1];
                let mut loss = 0.0f32;
                for &i in &batch[ci * CHUNK..((ci + 1) * CHUNK).min(batch.len())] {
                    let flipped;
                    let x = if flips.get(i).copied().unwrap_or(false) {
                        flipped = hflip(&inputs[i], shape);
                        &flipped
                    } else {
                        &inputs[i]
                    };
                    loss += net_ref
                        .accumulate_gradient(x, &targets[i], &mut g[..n_params])
                        .unwrap_or(f32::NAN);
                }
                g[n_params] = loss;
                g
            });
            let batch_loss = acc[n_params] as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: batch_loss,
                    manifest: serde_json::to_string(cfg).unwrap_or_default(),
                });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f32;
            let params = net.params_mut();
            for ((p, v), g) in params
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(&acc[..n_params])
            {
                let grad = g * scale + cfg.weight_decay * *p;
                *v = cfg.momentum * *v + grad;
                *p -= lr * *v;
            }
        }
        log.epoch_losses.push(epoch_loss / inputs.len() as f64);
    }
    Ok(log)
}

fn hflip(x: &[f32], shape: super::Shape3) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(shape.w) {
        out.extend(row.iter().rev());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchSpec, Normalization, OpSpec, Shape3};

    fn blobs() -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for i in 0..40 {
            let class = i % 2;
            let x: Vec<f32> = (0..16)
                .map(|j| {
                    let base = if class == 0 { 0.25 } else { 0.75 };
                    base + 0.1 * (((i * 16 + j) as f32) * 0.77).sin()
                })
                .collect();
            xs.push(x);
            ts.push(if class == 0 {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 1.0]
            });
        }
        (xs, ts)
    }

    fn spec() -> ArchSpec {
        ArchSpec {
            tag: "t".into(),
            input: Shape3::new(1, 4, 4),
            extractor: vec![
                OpSpec::Conv { out: 4, kernel: 3 },
                OpSpec::Relu,
                OpSpec::GlobalAvgPool,
            ],
            classes: 2,
        }
    }

    #[test]
    fn loss_decreases_and_training_is_deterministic() {
        let (xs, ts) = blobs();
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 8,
            learning_rate: 0.1,
            lr_milestones: vec![],
            ..TrainConfig::default()
        };
        let mut a = Network::new(spec(), Normalization::identity(1), 1).unwrap();
        let mut b = a.clone();
        let la = train(
            &mut a,
            &xs,
            &ts,
            &cfg,
            ExecPolicy::Parallel,
            ComputeProfile::Deterministic,
        )
        .unwrap();
        train(
            &mut b,
            &xs,
            &ts,
            &cfg,
            ExecPolicy::Sequential,
            ComputeProfile::Deterministic,
        )
        .unwrap();
        assert_eq!(a.params(), b.params());
        assert!(la.epoch_losses.last().unwrap() < &la.epoch_losses[0]);
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            lr_milestones: vec![60],
            lr_decay: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(59), 0.01);
        assert!((cfg.learning_rate_at(60) - 0.001).abs() < 1e-9);
    }

    #[test]
    fn divergence_is_reported() {
        let (xs, ts) = blobs();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e30,
            ..TrainConfig::default()
        };
        let mut net = Network::new(spec(), Normalization::identity(1), 1).unwrap();
        let err = train(
            &mut net,
            &xs,
            &ts,
            &cfg,
            ExecPolicy::Sequential,
            ComputeProfile::Deterministic,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }
}
