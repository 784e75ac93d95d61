use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, Op, OpSpec, Saved, Shape3};
use crate::error::{Error, Result};

/// Per-channel input normalization applied before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel statistics of a set of images; standard deviations are floored at 1e-3.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a [f32]>, shape: Shape3) -> Self {
        let plane = shape.plane();
        let mut sum = vec![0.0f64; shape.c];
        let mut sq = vec![0.0f64; shape.c];
        let mut count = 0usize;
        for img in images {
            for c in 0..shape.c {
                for &v in &img[c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return Normalization::identity(shape.c);
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0).sqrt() as f32).max(1e-3))
            .collect();
        Normalization { mean, std }
    }
}

/// Full architecture description: feature extractor layers plus a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub tag: String,
    pub input: Shape3,
    pub extractor: Vec<OpSpec>,
    pub classes: usize,
}

/// Backprop state of one forward pass through the feature extractor.
pub struct FeatureTape {
    saved: Vec<Saved>,
}

/// A feed-forward classifier split into a feature extractor and a linear head.
///
/// Parameters live in one flat buffer: extractor blocks first, then the head
/// weight matrix (`classes x feature_dim`, row-major), then the head bias.
#[derive(Debug, Clone)]
pub struct Network {
    spec: ArchSpec,
    ops: Vec<Op>,
    feature_dim: usize,
    head_w: usize,
    head_b: usize,
    params: Vec<f32>,
    norm: Normalization,
}

impl Network {
    /// Builds a network with He-normal weights and zero biases.
    pub fn new(spec: ArchSpec, norm: Normalization, seed: u64) -> Result<Self> {
        let compiled = layers::compile(&spec.extractor, spec.input, 0)
            .map_err(|e| Error::schema(&spec.tag, e))?;
        let feature_dim = compiled.out_shape.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_w = compiled.param_len;
        let head_b = head_w + spec.classes * feature_dim;
        let mut params = vec![0.0f32; head_b + spec.classes];
        for block in &compiled.blocks {
            if block.std > 0.0 {
                let dist = Normal::new(0.0, block.std).expect("positive std");
                for p in &mut params[block.offset..block.offset + block.len] {
                    *p = dist.sample(&mut rng);
                }
            }
        }
        let head_std = (1.0 / feature_dim as f32).sqrt();
        let dist = Normal::new(0.0, head_std).expect("positive std");
        for p in &mut params[head_w..head_b] {
            *p = dist.sample(&mut rng);
        }
        Self::assemble(
            spec,
            compiled.ops,
            feature_dim,
            head_w,
            head_b,
            params,
            norm,
        )
    }

    /// Rebuilds a network from stored parameters.
    pub fn from_parts(spec: ArchSpec, params: Vec<f32>, norm: Normalization) -> Result<Self> {
        let compiled = layers::compile(&spec.extractor, spec.input, 0)
            .map_err(|e| Error::schema(&spec.tag, e))?;
        let feature_dim = compiled.out_shape.len();
        let head_w = compiled.param_len;
        let head_b = head_w + spec.classes * feature_dim;
        if params.len() != head_b + spec.classes {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", head_b + spec.classes),
                found: format!("{}", params.len()),
            });
        }
        Self::assemble(
            spec,
            compiled.ops,
            feature_dim,
            head_w,
            head_b,
            params,
            norm,
        )
    }

    fn assemble(
        spec: ArchSpec,
        ops: Vec<Op>,
        feature_dim: usize,
        head_w: usize,
        head_b: usize,
        params: Vec<f32>,
        norm: Normalization,
    ) -> Result<Self> {
        if spec.classes == 0 {
            return Err(Error::invalid("network needs at least one class"));
        }
        if norm.mean.len() != spec.input.c || norm.std.len() != spec.input.c {
            return Err(Error::ShapeMismatch {
                expected: format!("{} normalization channels", spec.input.c),
                found: format!("{}", norm.mean.len()),
            });
        }
        Ok(Network {
            spec,
            ops,
            feature_dim,
            head_w,
            head_b,
            params,
            norm,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape3 {
        self.spec.input
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        if norm.mean.len() != self.spec.input.c {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.spec.input.c),
                found: format!("{}", norm.mean.len()),
            });
        }
        self.norm = norm;
        Ok(())
    }

    /// Head weight matrix, `classes x feature_dim` row-major.
    pub fn head_weights(&self) -> &[f32] {
        &self.params[self.head_w..self.head_b]
    }

    pub fn head_bias(&self) -> &[f32] {
        &self.params[self.head_b..]
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.spec.input.len() {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "image of {} values ({})",
                    self.spec.input.len(),
                    self.spec.input
                ),
                found: format!("{} values", x.len()),
            });
        }
        Ok(())
    }

    fn normalize(&self, x: &[f32]) -> Vec<f32> {
        let plane = self.spec.input.plane();
        let mut out = Vec::with_capacity(x.len());
        for (c, chunk) in x.chunks_exact(plane).enumerate() {
            let (m, s) = (self.norm.mean[c], self.norm.std[c]);
            out.extend(chunk.iter().map(|v| (v - m) / s));
        }
        out
    }

    pub fn features(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_input(x)?;
        Ok(layers::forward(
            &self.ops,
            &self.params,
            self.normalize(x),
            None,
        ))
    }

    pub fn head(&self, features: &[f32]) -> Vec<f32> {
        let w = self.head_weights();
        self.head_bias()
            .iter()
            .enumerate()
            .map(|(c, b)| {
                let row = &w[c * self.feature_dim..(c + 1) * self.feature_dim];
                b + row.iter().zip(features).map(|(a, f)| a * f).sum::<f32>()
            })
            .collect()
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        let f = self.features(x)?;
        Ok(self.head(&f))
    }

    pub fn probabilities(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Forward pass through the extractor keeping what backprop needs.
    pub fn features_taped(&self, x: &[f32]) -> Result<(Vec<f32>, FeatureTape)> {
        self.check_input(x)?;
        let mut saved = Vec::with_capacity(self.ops.len());
        let f = layers::forward(&self.ops, &self.params, self.normalize(x), Some(&mut saved));
        Ok((f, FeatureTape { saved }))
    }

    /// Gradient with respect to raw pixels of `<upstream, features(x)>`.
    pub fn feature_pullback(&self, tape: &FeatureTape, upstream: &[f32]) -> Vec<f32> {
        let dx = layers::backward(
            &self.ops,
            &self.params,
            &tape.saved,
            upstream.to_vec(),
            None,
            true,
        );
        self.denormalize_grad(dx)
    }

    fn denormalize_grad(&self, mut dx: Vec<f32>) -> Vec<f32> {
        let plane = self.spec.input.plane();
        for (c, chunk) in dx.chunks_exact_mut(plane).enumerate() {
            let inv = 1.0 / self.norm.std[c];
            for v in chunk {
                *v *= inv;
            }
        }
        dx
    }

    /// Cross-entropy against a target distribution for one sample. Parameter
    /// gradients are accumulated into `grads` (same layout as `params`).
    /// Returns the loss `-sum_j t_j log q_j`.
    pub fn accumulate_gradient(&self, x: &[f32], target: &[f32], grads: &mut [f32]) -> Result<f32> {
        let (feat, tape) = self.features_taped(x)?;
        let logits = self.head(&feat);
        let (q, log_q) = softmax_with_log(&logits);
        let loss = -target
            .iter()
            .zip(&log_q)
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, l)| t * l)
            .sum::<f32>();
        let d = self.feature_dim;
        let mut dfeat = vec![0.0f32; d];
        let w = &self.params[self.head_w..self.head_b];
        for c in 0..self.spec.classes {
            let dl = q[c] - target[c];
            grads[self.head_b + c] += dl;
            let row = &w[c * d..(c + 1) * d];
            let grow = &mut grads[self.head_w + c * d..self.head_w + (c + 1) * d];
            for j in 0..d {
                grow[j] += dl * feat[j];
                dfeat[j] += dl * row[j];
            }
        }
        layers::backward(
            &self.ops,
            &self.params,
            &tape.saved,
            dfeat,
            Some(&mut grads[..self.head_w]),
            false,
        );
        Ok(loss)
    }
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    softmax_with_log(logits).0
}

fn softmax_with_log(logits: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    let log_q: Vec<f32> = logits.iter().map(|l| l - lse).collect();
    (log_q.iter().map(|l| l.exp()).collect(), log_q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ArchSpec {
        ArchSpec {
            tag: "tiny".into(),
            input: Shape3::new(2, 6, 6),
            extractor: vec![
                OpSpec::Conv { out: 3, kernel: 3 },
                OpSpec::Tanh,
                OpSpec::AvgPool2,
                OpSpec::Residual(vec![OpSpec::Conv { out: 3, kernel: 1 }, OpSpec::Tanh]),
                OpSpec::Concat(vec![OpSpec::Conv { out: 2, kernel: 3 }, OpSpec::Tanh]),
                OpSpec::Flatten,
                OpSpec::Dense { out: 5 },
                OpSpec::Tanh,
            ],
            classes: 3,
        }
    }

    fn sample_input(n: usize, k: f32) -> Vec<f32> {
        (0..n).map(|i| 0.5 + 0.4 * ((i as f32) * k).sin()).collect()
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let norm = Normalization {
            mean: vec![0.4, 0.6],
            std: vec![0.3, 0.2],
        };
        let net = Network::new(tiny_spec(), norm, 3).unwrap();
        let x = sample_input(72, 0.7);
        let target = [0.2f32, 0.5, 0.3];
        let mut g = vec![0.0f32; net.params().len()];
        net.accumulate_gradient(&x, &target, &mut g).unwrap();
        let loss = |n: &Network| {
            let q = n.probabilities(&x).unwrap();
            -(0..3)
                .map(|c| target[c] as f64 * (q[c] as f64).ln())
                .sum::<f64>()
        };
        let h = 1e-2f32;
        for idx in (0..net.params().len()).step_by(7) {
            let mut p = net.clone();
            p.params_mut()[idx] += h;
            let lp = loss(&p);
            p.params_mut()[idx] -= 2.0 * h;
            let lm = loss(&p);
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = g[idx] as f64;
            assert!(
                (fd - an).abs() <= 2e-3 + 2e-2 * an.abs(),
                "param {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Network::new(tiny_spec(), Normalization::identity(2), 11).unwrap();
        let x = sample_input(72, 0.3);
        let upstream: Vec<f32> = (0..net.feature_dim())
            .map(|i| (i as f32 - 2.0) * 0.3)
            .collect();
        let (_, tape) = net.features_taped(&x).unwrap();
        let g = net.feature_pullback(&tape, &upstream);
        let obj = |x: &[f32]| -> f64 {
            let f = net.features(x).unwrap();
            f.iter()
                .zip(&upstream)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let h = 1e-2f32;
        for idx in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (obj(&xp) - obj(&xm)) / (2.0 * h as f64);
            assert!(
                (fd - g[idx] as f64).abs() < 2e-3,
                "pixel {idx}: {fd} vs {}",
                g[idx]
            );
        }
    }

    #[test]
    fn head_reconstructs_logits() {
        let net = Network::new(tiny_spec(), Normalization::identity(2), 5).unwrap();
        let x = sample_input(72, 1.3);
        let f = net.features(&x).unwrap();
        let logits = net.logits(&x).unwrap();
        let w = net.head_weights();
        for c in 0..3 {
            let manual: f32 =
                net.head_bias()[c] + (0..f.len()).map(|j| w[c * f.len() + j] * f[j]).sum::<f32>();
            assert!((manual - logits[c]).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let net = Network::new(tiny_spec(), Normalization::identity(2), 5).unwrap();
        assert!(matches!(
            net.features(&[0.0; 10]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
