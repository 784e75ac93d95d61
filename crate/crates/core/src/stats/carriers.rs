use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecPolicy;

/// Secret per-class unit directions in the marker's feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarrierSet {
    /// `class_count x feature_dim`, row-major.
    pub vectors: Vec<f32>,
    pub feature_dim: usize,
    pub class_count: usize,
    pub seed: u64,
}

impl CarrierSet {
    pub fn row(&self, class: usize) -> &[f32] {
        &self.vectors[class * self.feature_dim..(class + 1) * self.feature_dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::invalid("carrier dimension must be at least 2"));
        }
        if self.vectors.len() != self.feature_dim * self.class_count {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} carrier matrix", self.class_count, self.feature_dim),
                found: format!("{} values", self.vectors.len()),
            });
        }
        for c in 0..self.class_count {
            let n = self
                .row(c)
                .iter()
                .map(|v| (*v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("carrier {c} has norm {n}")));
            }
        }
        Ok(())
    }
}

/// Draws `m` independent directions uniformly on the unit sphere in `R^d`
/// (isotropic Gaussian, then normalized).
pub fn generate_carriers(m: usize, d: usize, seed: u64) -> Result<CarrierSet> {
    if m == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    if d < 2 {
        return Err(Error::invalid(format!(
            "carrier dimension must be at least 2, got {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vectors = Vec::with_capacity(m * d);
    for _ in 0..m {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        vectors.extend(g.iter().map(|v| (v / norm) as f32));
    }
    Ok(CarrierSet {
        vectors,
        feature_dim: d,
        class_count: m,
        seed,
    })
}

const MC_BLOCK: usize = 65_536;

/// Cosines between the first coordinate axis and `count` independent uniform
/// unit vectors in `R^d`. Work is split into fixed blocks with their own
/// seeded streams, so the output does not depend on the execution policy.
pub fn mc_null_samples(d: usize, count: usize, seed: u64, policy: ExecPolicy) -> Result<Vec<f64>> {
    if d < 2 {
        return Err(Error::invalid(format!(
            "dimension must be at least 2, got {d}"
        )));
    }
    if count == 0 {
        return Err(Error::invalid("count must be positive"));
    }
    let blocks = count.div_ceil(MC_BLOCK);
    let parts = policy.map(blocks, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64 + 1);
        let n = MC_BLOCK.min(count - b * MC_BLOCK);
        (0..n)
            .map(|_| {
                let first: f64 = StandardNormal.sample(&mut rng);
                let mut sq = first * first;
                for _ in 1..d {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    sq += g * g;
                }
                first / sq.sqrt()
            })
            .collect::<Vec<f64>>()
    });
    Ok(parts.concat())
}
