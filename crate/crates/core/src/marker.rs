//! Radioactive mark embedding and stealthiness metrics.
//!
//! A marked image minimizes
//!
//! ```text
//! L(x') = -(f(x') - f(x))^T u_c + l1 * ||x' - x||_2 + l2 * ||f(x') - f(x)||_2
//! ```
//!
//! by gradient descent from `x' = x`, where `f` is the marker's feature
//! extractor and `u_c` the carrier of the image's class. After every step the
//! image is clipped to `[0, 1]` and, if a budget is set, projected onto the
//! L-infinity ball around `x`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    quantize_8bit, LabeledImageDataset, MarkingSelection, WatermarkSecret, SECRET_SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::nn::{FeatureTape, Network};
use crate::stats::CarrierSet;

/// How the descent direction is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `x' <- x' - step_size * g`
    #[default]
    Plain,
    /// `x' <- x' - step_size * g / ||g||_2`, so every step moves the image by
    /// exactly `step_size` in L2 before clipping.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedParams {
    pub lambda_pixel: f64,
    pub lambda_feature: f64,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub step_rule: StepRule,
    pub linf_budget: Option<f64>,
    pub quantize_8bit: bool,
    pub seed: u64,
}

impl Default for EmbedParams {
    fn default() -> Self {
        EmbedParams {
            lambda_pixel: 0.05,
            lambda_feature: 0.05,
            steps: 200,
            step_size: 2.0 / 255.0,
            step_rule: StepRule::Plain,
            linf_budget: None,
            quantize_8bit: true,
            seed: 0,
        }
    }
}

impl EmbedParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pixel >= 0.0 && self.lambda_feature >= 0.0) {
            return Err(Error::invalid("embedding penalties must be non-negative"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be positive"));
        }
        if let Some(b) = self.linf_budget {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::invalid(format!("linf_budget {b} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// A feature extractor that can pull a feature-space covector back to pixels.
pub trait DifferentiableFeatures: Sync {
    type Tape;

    fn input_len(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn forward(&self, x: &[f32]) -> Result<(Vec<f32>, Self::Tape)>;
    /// Gradient of `<upstream, f(x)>` with respect to `x`.
    fn pullback(&self, tape: &Self::Tape, upstream: &[f32]) -> Vec<f32>;
    /// Stable identifier of the extractor's weights.
    fn fingerprint(&self) -> String;

    fn features(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.forward(x).map(|(f, _)| f)
    }
}

impl DifferentiableFeatures for Network {
    type Tape = FeatureTape;

    fn input_len(&self) -> usize {
        self.input_shape().len()
    }

    fn feature_dim(&self) -> usize {
        Network::feature_dim(self)
    }

    fn forward(&self, x: &[f32]) -> Result<(Vec<f32>, FeatureTape)> {
        self.features_taped(x)
    }

    fn pullback(&self, tape: &FeatureTape, upstream: &[f32]) -> Vec<f32> {
        self.feature_pullback(tape, upstream)
    }

    fn fingerprint(&self) -> String {
        params_digest(self.params())
    }
}

pub(crate) fn params_digest(params: &[f32]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// `f(x) = x`; the embedding then moves pixels straight along the carrier.
#[derive(Debug, Clone, Copy)]
pub struct IdentityFeatures {
    pub len: usize,
}

impl DifferentiableFeatures for IdentityFeatures {
    type Tape = ();

    fn input_len(&self) -> usize {
        self.len
    }

    fn feature_dim(&self) -> usize {
        self.len
    }

    fn forward(&self, x: &[f32]) -> Result<(Vec<f32>, ())> {
        Ok((x.to_vec(), ()))
    }

    fn pullback(&self, _: &(), upstream: &[f32]) -> Vec<f32> {
        upstream.to_vec()
    }

    fn fingerprint(&self) -> String {
        format!("identity-{}", self.len)
    }
}

/// Linear pixel transform applied inside the embedding loop, with its adjoint.
pub trait EmbedAugmentation: Sync {
    fn apply(&self, x: &[f32], step: usize) -> Vec<f32>;
    fn adjoint(&self, grad: &[f32], step: usize) -> Vec<f32>;

    fn is_identity(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoAugmentation;

impl EmbedAugmentation for NoAugmentation {
    fn apply(&self, x: &[f32], _: usize) -> Vec<f32> {
        x.to_vec()
    }

    fn adjoint(&self, grad: &[f32], _: usize) -> Vec<f32> {
        grad.to_vec()
    }

    fn is_identity(&self) -> bool {
        true
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Value of the embedding objective at `marked`.
pub fn embed_objective<F: DifferentiableFeatures>(
    features: &F,
    clean: &[f32],
    clean_features: &[f32],
    marked: &[f32],
    carrier: &[f32],
    params: &EmbedParams,
) -> Result<f64> {
    let f = features.features(marked)?;
    let delta: Vec<f64> = f
        .iter()
        .zip(clean_features)
        .map(|(a, b)| *a as f64 - *b as f64)
        .collect();
    let proj: f64 = delta.iter().zip(carrier).map(|(d, u)| d * *u as f64).sum();
    let pix = norm(marked.iter().zip(clean).map(|(a, b)| *a as f64 - *b as f64));
    Ok(-proj + params.lambda_pixel * pix + params.lambda_feature * norm(delta.iter().copied()))
}

/// Analytic gradient of [`embed_objective`] with respect to `marked`.
pub fn embed_gradient<F: DifferentiableFeatures>(
    features: &F,
    clean: &[f32],
    clean_features: &[f32],
    marked: &[f32],
    carrier: &[f32],
    params: &EmbedParams,
) -> Result<Vec<f32>> {
    let (f, tape) = features.forward(marked)?;
    let delta: Vec<f32> = f.iter().zip(clean_features).map(|(a, b)| a - b).collect();
    let dn = norm(delta.iter().map(|v| *v as f64));
    let mut upstream: Vec<f32> = carrier.iter().map(|u| -u).collect();
    if dn > 0.0 && params.lambda_feature > 0.0 {
        let s = (params.lambda_feature / dn) as f32;
        for (g, d) in upstream.iter_mut().zip(&delta) {
            *g += s * d;
        }
    }
    let mut grad = features.pullback(&tape, &upstream);
    let pn = norm(marked.iter().zip(clean).map(|(a, b)| *a as f64 - *b as f64));
    if pn > 0.0 && params.lambda_pixel > 0.0 {
        let s = (params.lambda_pixel / pn) as f32;
        for ((g, a), b) in grad.iter_mut().zip(marked).zip(clean) {
            *g += s * (a - b);
        }
    }
    Ok(grad)
}

/// Embeds the mark of `class_id` into one image.
pub fn embed_mark<F: DifferentiableFeatures>(
    x: &[f32],
    class_id: usize,
    carriers: &CarrierSet,
    features: &F,
    params: &EmbedParams,
) -> Result<Vec<f32>> {
    embed_mark_with(x, class_id, carriers, features, params, &NoAugmentation)
}

pub fn embed_mark_with<F: DifferentiableFeatures, A: EmbedAugmentation>(
    x: &[f32],
    class_id: usize,
    carriers: &CarrierSet,
    features: &F,
    params: &EmbedParams,
    augmentation: &A,
) -> Result<Vec<f32>> {
    params.validate()?;
    if class_id >= carriers.class_count {
        return Err(Error::UnknownClass {
            index: class_id,
            classes: carriers.class_count,
        });
    }
    if features.feature_dim() != carriers.feature_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("{}-dimensional features", carriers.feature_dim),
            found: format!("{}", features.feature_dim()),
        });
    }
    if x.len() != features.input_len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} pixels", features.input_len()),
            found: format!("{}", x.len()),
        });
    }
    let carrier = carriers.row(class_id);
    let mut marked = x.to_vec();
    if params.steps == 0 {
        return Ok(marked);
    }
    let budget = params.linf_budget.map(|b| b as f32);
    let fixed_clean = if augmentation.is_identity() {
        Some(features.features(x)?)
    } else {
        None
    };
    for step in 0..params.steps {
        let g = if let Some(cf) = &fixed_clean {
            embed_gradient(features, x, cf, &marked, carrier, params)?
        } else {
            let view = augmentation.apply(&marked, step);
            let clean_view = augmentation.apply(x, step);
            let cf = features.features(&clean_view)?;
            let g_view = embed_gradient(features, &clean_view, &cf, &view, carrier, params)?;
            augmentation.adjoint(&g_view, step)
        };
        let gn = norm(g.iter().map(|v| *v as f64));
        if !gn.is_finite() {
            return Err(Error::NonFinite {
                stage: "embedding".into(),
                detail: format!("gradient norm {gn} at step {step} for class {class_id}"),
            });
        }
        let scale = match params.step_rule {
            StepRule::Plain => params.step_size,
            StepRule::Normalized if gn > 0.0 => params.step_size / gn,
            StepRule::Normalized => 0.0,
        } as f32;
        for (i, (m, gi)) in marked.iter_mut().zip(&g).enumerate() {
            let mut v = (*m - scale * gi).clamp(0.0, 1.0);
            if let Some(b) = budget {
                v = v.clamp(x[i] - b, x[i] + b);
            }
            *m = v;
        }
    }
    if params.quantize_8bit {
        for m in marked.iter_mut() {
            *m = quantize_8bit(*m);
        }
    }
    Ok(marked)
}

/// Replaces the selected samples by their marked versions. Labels are kept.
/// Returns the marked dataset and the owner's secret. On any failure nothing
/// is returned.
pub fn mark_dataset<F: DifferentiableFeatures>(
    ds: &LabeledImageDataset,
    selection: &MarkingSelection,
    carriers: &CarrierSet,
    features: &F,
    params: &EmbedParams,
    policy: ExecPolicy,
) -> Result<(LabeledImageDataset, WatermarkSecret)> {
    selection.validate_against(ds)?;
    carriers.validate()?;
    if carriers.class_count != ds.class_count() {
        return Err(Error::ClassCountMismatch {
            left: carriers.class_count,
            right: ds.class_count(),
        });
    }
    let pairs = selection.pairs();
    let marked: Vec<Vec<f32>> = policy
        .map(pairs.len(), |k| {
            let (c, i) = pairs[k];
            embed_mark(&ds.images[i], c, carriers, features, params)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mut out = ds.clone();
    let mut clean_originals = BTreeMap::new();
    let mut marked_images = BTreeMap::new();
    for (&(c, i), img) in pairs.iter().zip(marked) {
        clean_originals.insert((c, i), ds.images[i].clone());
        out.images[i] = img.clone();
        marked_images.insert((c, i), img);
    }
    let secret = WatermarkSecret {
        carriers: carriers.clone(),
        selection: selection.clone(),
        clean_originals,
        marked_images,
        image_shape: ds.shape,
        embed_params: params.clone(),
        marker_model_digest: features.fingerprint(),
        schema_version: SECRET_SCHEMA_VERSION,
    };
    Ok((out, secret))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStealth {
    #[serde(with = "crate::serde_inf")]
    pub psnr_db: f64,
    pub l2_pixel: f64,
    pub linf_pixel: f64,
}

/// Distortion of marked images relative to their clean versions. Aggregate
/// PSNR is the mean of per-sample PSNR (+inf if any sample is unchanged),
/// aggregate L2 the mean of per-sample L2, aggregate L-infinity the maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealthReport {
    #[serde(with = "crate::serde_inf")]
    pub psnr_db: f64,
    pub l2_pixel: f64,
    pub linf_pixel: f64,
    pub per_sample: Vec<SampleStealth>,
}

pub fn sample_stealth(clean: &[f32], marked: &[f32]) -> SampleStealth {
    let mut sq = 0.0f64;
    let mut linf = 0.0f64;
    for (a, b) in clean.iter().zip(marked) {
        let d = (*b as f64 - *a as f64).abs();
        sq += d * d;
        linf = linf.max(d);
    }
    let mse = sq / clean.len().max(1) as f64;
    let psnr_db = if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    };
    SampleStealth {
        psnr_db,
        l2_pixel: sq.sqrt(),
        linf_pixel: linf,
    }
}

pub fn stealth_metrics(clean: &[Vec<f32>], marked: &[Vec<f32>]) -> Result<StealthReport> {
    if clean.len() != marked.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} marked images", clean.len()),
            found: format!("{}", marked.len()),
        });
    }
    let mut per_sample = Vec::with_capacity(clean.len());
    for (i, (a, b)) in clean.iter().zip(marked).enumerate() {
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("sample {i} with {} values", a.len()),
                found: format!("{}", b.len()),
            });
        }
        per_sample.push(sample_stealth(a, b));
    }
    let n = per_sample.len().max(1) as f64;
    Ok(StealthReport {
        psnr_db: per_sample.iter().map(|s| s.psnr_db).sum::<f64>() / n,
        l2_pixel: per_sample.iter().map(|s| s.l2_pixel).sum::<f64>() / n,
        linf_pixel: per_sample.iter().map(|s| s.linf_pixel).fold(0.0, f64::max),
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::generate_carriers;

    fn plain(steps: usize) -> EmbedParams {
        EmbedParams {
            lambda_pixel: 0.0,
            lambda_feature: 0.0,
            steps,
            step_size: 0.01,
            step_rule: StepRule::Plain,
            linf_budget: None,
            quantize_8bit: false,
            seed: 0,
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let carriers = generate_carriers(2, 12, 1).unwrap();
        let x: Vec<f32> = (0..12).map(|i| i as f32 / 20.0).collect();
        let f = IdentityFeatures { len: 12 };
        let out = embed_mark(
            &x,
            1,
            &carriers,
            &f,
            &EmbedParams {
                steps: 0,
                ..EmbedParams::default()
            },
        )
        .unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn identity_extractor_moves_along_carrier() {
        let carriers = generate_carriers(3, 48, 9).unwrap();
        let x = vec![0.5f32; 48];
        let f = IdentityFeatures { len: 48 };
        for rule in [StepRule::Plain, StepRule::Normalized] {
            let p = EmbedParams {
                step_rule: rule,
                ..plain(1)
            };
            let out = embed_mark(&x, 2, &carriers, &f, &p).unwrap();
            for (j, (o, u)) in out.iter().zip(carriers.row(2)).enumerate() {
                assert!((o - 0.5 - 0.01 * u).abs() < 1e-6, "pixel {j}");
            }
        }
    }

    #[test]
    fn output_stays_in_range_and_budget() {
        let carriers = generate_carriers(1, 16, 2).unwrap();
        let x: Vec<f32> = (0..16)
            .map(|i| if i % 2 == 0 { 0.0 } else { 1.0 })
            .collect();
        let f = IdentityFeatures { len: 16 };
        let p = EmbedParams {
            steps: 50,
            step_size: 0.05,
            linf_budget: Some(4.0 / 255.0),
            quantize_8bit: true,
            ..EmbedParams::default()
        };
        let out = embed_mark(&x, 0, &carriers, &f, &p).unwrap();
        for (o, c) in out.iter().zip(&x) {
            assert!((0.0..=1.0).contains(o));
            assert!((o - c).abs() <= 4.0 / 255.0 + 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn class_and_dimension_errors() {
        let carriers = generate_carriers(2, 8, 2).unwrap();
        let x = vec![0.5f32; 8];
        assert!(matches!(
            embed_mark(&x, 5, &carriers, &IdentityFeatures { len: 8 }, &plain(1)),
            Err(Error::UnknownClass { .. })
        ));
        assert!(matches!(
            embed_mark(
                &[0.5; 9],
                0,
                &carriers,
                &IdentityFeatures { len: 9 },
                &plain(1)
            ),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn stealth_closed_forms() {
        let clean = vec![0.5f32; 3072];
        let same =
            stealth_metrics(std::slice::from_ref(&clean), std::slice::from_ref(&clean)).unwrap();
        assert_eq!(same.linf_pixel, 0.0);
        assert_eq!(same.l2_pixel, 0.0);
        assert!(same.psnr_db.is_infinite() && same.psnr_db > 0.0);

        let mut one = vec![0.0f32; 3072];
        let mut one_marked = one.clone();
        one_marked[100] = 1.0;
        let r = stealth_metrics(&[one.clone()], &[one_marked]).unwrap();
        assert_eq!(r.linf_pixel, 1.0);
        assert_eq!(r.l2_pixel, 1.0);
        assert!((r.psnr_db - 10.0 * 3072f64.log10()).abs() < 1e-9);
        assert!((r.psnr_db - 34.87).abs() < 0.01);

        one.fill(0.25);
        let shifted: Vec<f32> = one.iter().map(|v| v + 8.0 / 255.0).collect();
        let r = stealth_metrics(&[one], &[shifted]).unwrap();
        assert!((r.linf_pixel - 8.0 / 255.0).abs() < 1e-6);
        assert!((r.psnr_db - 20.0 * (255.0f64 / 8.0).log10()).abs() < 1e-4);
        assert!((r.psnr_db - 30.07).abs() < 0.01);

        assert!(stealth_metrics(&[vec![0.0]], &[]).is_err());
    }
}
