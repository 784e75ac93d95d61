//! Ownership verification of a suspect model against a watermark secret.
//!
//! White-box: align marker features to suspect features with a linear map
//! `M`, then test whether each suspect class weight row points along the
//! mapped carrier `M u_c` more than a random direction would.
//!
//! Black-box: compare the suspect's cross-entropy on clean versus marked
//! copies of the marked samples. A model that learned the marks finds the
//! marked copies easier.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::WatermarkSecret;
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::model::{LinearClassifierWeights, TrainedModel};
use crate::stats::{cosine_hypothesis_test, HypothesisTestResult};

/// Probabilities are clipped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Tolerance on probability row sums returned by a suspect.
pub const ROW_SUM_TOL: f64 = 1e-4;

/// Something that maps images to feature vectors.
pub trait FeatureExtractor: Sync {
    fn feature_dim(&self) -> usize;
    fn extract(&self, x: &[f32]) -> Result<Vec<f32>>;
    fn digest(&self) -> String;
}

impl FeatureExtractor for TrainedModel {
    fn feature_dim(&self) -> usize {
        TrainedModel::feature_dim(self)
    }

    fn extract(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.network.features(x)
    }

    fn digest(&self) -> String {
        self.weights_digest()
    }
}

/// Adapts a closure into a [`FeatureExtractor`].
pub struct FnFeatures<F> {
    pub f: F,
    pub dim: usize,
    pub name: String,
}

impl<F: Fn(&[f32]) -> Result<Vec<f32>> + Sync> FeatureExtractor for FnFeatures<F> {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, x: &[f32]) -> Result<Vec<f32>> {
        (self.f)(x)
    }

    fn digest(&self) -> String {
        self.name.clone()
    }
}

/// A prediction interface returning one probability row per image.
pub trait ProbabilityOracle: Sync {
    fn class_count(&self) -> usize;
    fn query(&self, batch: &[Vec<f32>]) -> Result<Vec<Vec<f32>>>;
    fn digest(&self) -> String;
}

impl ProbabilityOracle for TrainedModel {
    fn class_count(&self) -> usize {
        TrainedModel::class_count(self)
    }

    fn query(&self, batch: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        self.predict_probabilities(batch, ExecPolicy::default())
    }

    fn digest(&self) -> String {
        self.weights_digest()
    }
}

pub struct WhiteBoxSuspect<'a> {
    pub features: &'a dyn FeatureExtractor,
    pub classifier: LinearClassifierWeights,
}

impl<'a> WhiteBoxSuspect<'a> {
    pub fn from_model(model: &'a TrainedModel) -> Self {
        WhiteBoxSuspect {
            features: model,
            classifier: model.classifier_weights(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.features.feature_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RidgeMode {
    /// Add a small ridge only when the probe is smaller than `d_m` or the
    /// normal matrix is numerically singular.
    #[default]
    Auto,
    /// Plain least squares; rank deficiency is an error.
    Disabled,
    /// Always add this relative ridge.
    Fixed(f64),
}

/// Least-squares map from marker features to suspect features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    /// `d_s x d_m`, row-major.
    pub matrix: Vec<f64>,
    pub suspect_dim: usize,
    pub marker_dim: usize,
    pub residual_rms: f64,
    pub probe_count: usize,
    /// Absolute ridge added to the normal matrix, if any.
    pub ridge: Option<f64>,
}

impl AlignmentMap {
    pub fn apply(&self, v: &[f32]) -> Vec<f64> {
        (0..self.suspect_dim)
            .map(|r| {
                self.matrix[r * self.marker_dim..(r + 1) * self.marker_dim]
                    .iter()
                    .zip(v)
                    .map(|(m, x)| m * *x as f64)
                    .sum()
            })
            .collect()
    }

    /// `M^T w` for a suspect-space vector `w`.
    pub fn apply_transpose(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.marker_dim];
        for (r, wr) in w.iter().enumerate().take(self.suspect_dim) {
            for (o, m) in out
                .iter_mut()
                .zip(&self.matrix[r * self.marker_dim..(r + 1) * self.marker_dim])
            {
                *o += m * wr;
            }
        }
        out
    }
}

/// Relative eigenvalue floor below which the normal matrix counts as singular.
const SINGULAR_RCOND: f64 = 1e-10;
/// Ridge added in automatic mode, relative to the largest eigenvalue.
const AUTO_RIDGE: f64 = 1e-6;

/// Fits `M` minimizing `sum_i ||s_i - M m_i||^2` over paired feature rows.
pub fn align_feature_rows(
    suspect: &[Vec<f32>],
    marker: &[Vec<f32>],
    ridge: RidgeMode,
) -> Result<AlignmentMap> {
    if suspect.is_empty() || suspect.len() != marker.len() {
        return Err(Error::invalid(format!(
            "alignment needs equal nonempty probes, got {} and {}",
            suspect.len(),
            marker.len()
        )));
    }
    let n = suspect.len();
    let ds = suspect[0].len();
    let dm = marker[0].len();
    let f = DMatrix::from_fn(n, dm, |i, j| marker[i][j] as f64);
    let s = DMatrix::from_fn(n, ds, |i, j| suspect[i][j] as f64);
    let gram = f.transpose() * &f;
    let rhs = f.transpose() * &s;
    let eig = SymmetricEigen::new(gram.clone());
    let lmax = eig.eigenvalues.max().max(0.0);
    let lmin = eig.eigenvalues.min();
    let singular = lmax <= 0.0 || lmin <= SINGULAR_RCOND * lmax;
    let eps = match ridge {
        RidgeMode::Disabled if singular || n < dm => {
            return Err(Error::Singular(format!(
                "normal matrix of {n} probe features in dimension {dm} is rank deficient (eigenvalues {lmin:.3e}..{lmax:.3e})"
            )));
        }
        RidgeMode::Disabled => None,
        RidgeMode::Auto if singular || n < dm => Some(AUTO_RIDGE * lmax.max(1e-12)),
        RidgeMode::Auto => None,
        RidgeMode::Fixed(r) => Some(r * lmax.max(1e-12)),
    };
    let mut a = gram;
    if let Some(e) = eps {
        for i in 0..dm {
            a[(i, i)] += e;
        }
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular("normal matrix is not positive definite".into()))?;
    // a * M^T = F^T S
    let mt = chol.solve(&rhs);
    let m = mt.transpose();
    let resid = &s - &f * &mt;
    let residual_rms = (resid.norm_squared() / (n * ds) as f64).sqrt();
    let matrix = (0..ds)
        .flat_map(|r| (0..dm).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)])
        .collect();
    Ok(AlignmentMap {
        matrix,
        suspect_dim: ds,
        marker_dim: dm,
        residual_rms,
        probe_count: n,
        ridge: eps,
    })
}

pub fn align_features(
    suspect: &dyn FeatureExtractor,
    marker: &dyn FeatureExtractor,
    probe: &[Vec<f32>],
    ridge: RidgeMode,
    policy: ExecPolicy,
) -> Result<AlignmentMap> {
    if probe.is_empty() {
        return Err(Error::invalid("alignment probe is empty"));
    }
    let s: Vec<Vec<f32>> = policy
        .map_slice(probe, |x| suspect.extract(x))
        .into_iter()
        .collect::<Result<_>>()?;
    let m: Vec<Vec<f32>> = policy
        .map_slice(probe, |x| marker.extract(x))
        .into_iter()
        .collect::<Result<_>>()?;
    align_feature_rows(&s, &m, ridge)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationMethod {
    WhiteboxTestProbe,
    WhiteboxMarkedProbe,
    Blackbox,
}

impl VerificationMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            VerificationMethod::WhiteboxTestProbe => "whitebox_test_probe",
            VerificationMethod::WhiteboxMarkedProbe => "whitebox_marked_probe",
            VerificationMethod::Blackbox => "blackbox",
        }
    }

    pub fn is_whitebox(self) -> bool {
        self != VerificationMethod::Blackbox
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    TestSet,
    #[default]
    MarkedSet,
}

impl ProbeSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "test_set" | "test" => Ok(ProbeSource::TestSet),
            "marked_set" | "marked" => Ok(ProbeSource::MarkedSet),
            other => Err(Error::invalid(format!("unknown probe source `{other}`"))),
        }
    }

    pub fn method(self) -> VerificationMethod {
        match self {
            ProbeSource::TestSet => VerificationMethod::WhiteboxTestProbe,
            ProbeSource::MarkedSet => VerificationMethod::WhiteboxMarkedProbe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLoss {
    pub class: usize,
    pub clean_loss: f64,
    pub marked_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VerdictDetail {
    Whitebox {
        test: HypothesisTestResult,
        residual_rms: f64,
        probe_count: usize,
        ridge: Option<f64>,
        cosine_space: CosineSpace,
        centered: bool,
    },
    Blackbox {
        pairs: Vec<PairLoss>,
        order_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub method: VerificationMethod,
    pub statistic: f64,
    pub threshold: f64,
    pub decision: bool,
    pub samples_used: usize,
    pub detail: VerdictDetail,
    pub carrier_seed: u64,
    pub suspect_digest: String,
    pub secret_digest: String,
}

/// Decision rule of a white-box test: `log10 p <= log10 alpha`.
pub fn whitebox_decision(log10_p: f64, alpha: f64) -> bool {
    log10_p <= alpha.log10()
}

/// Decision rule of the black-box test: strictly positive mean loss gap.
/// A tie is not an accusation.
pub fn blackbox_decision(statistic: f64) -> bool {
    statistic > 0.0
}

impl VerificationVerdict {
    /// Whether `decision` follows from `statistic` and `threshold`.
    pub fn is_consistent(&self) -> bool {
        let expect = if self.method.is_whitebox() {
            self.statistic <= self.threshold
        } else {
            self.statistic > self.threshold
        };
        expect == self.decision
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn secret_digest(secret: &WatermarkSecret) -> String {
    secret.digest().unwrap_or_else(|_| "unavailable".into())
}

/// Where the carrier/weight cosine is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CosineSpace {
    /// `cos(u_c, M^T w_c)` in marker space, null law in `d_m` dimensions.
    /// When the suspect never saw the marks, `M` and `w_c` do not depend on
    /// `u_c`, so the null law is exact.
    #[default]
    Marker,
    /// `cos(M u_c, w_c)` in suspect space, null law in `d_s` dimensions. The
    /// law is only approximate when `M` is far from orthogonal.
    Suspect,
}

impl CosineSpace {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "marker" => Ok(CosineSpace::Marker),
            "suspect" => Ok(CosineSpace::Suspect),
            other => Err(Error::invalid(format!("unknown cosine space `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteBoxOptions {
    pub alpha: f64,
    pub ridge: RidgeMode,
    pub cosine_space: CosineSpace,
    /// Subtract the mean class row from every row before taking cosines.
    pub center_weights: bool,
    /// Dimension used for the cosine null law; defaults to the dimension of
    /// the space the cosine is measured in.
    pub effective_dim: Option<usize>,
}

impl Default for WhiteBoxOptions {
    fn default() -> Self {
        WhiteBoxOptions {
            alpha: 0.05,
            ridge: RidgeMode::Auto,
            cosine_space: CosineSpace::Marker,
            center_weights: false,
            effective_dim: None,
        }
    }
}

/// The marked images stored in a secret, in class-then-index order.
pub fn marked_probe(secret: &WatermarkSecret) -> Vec<Vec<f32>> {
    secret.marked_images.values().cloned().collect()
}

pub fn whitebox_verify(
    suspect: &WhiteBoxSuspect<'_>,
    secret: &WatermarkSecret,
    marker: &dyn FeatureExtractor,
    probe_source: ProbeSource,
    probe_data: &[Vec<f32>],
    opts: &WhiteBoxOptions,
    policy: ExecPolicy,
) -> Result<VerificationVerdict> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::invalid(format!(
            "alpha {} outside (0, 1)",
            opts.alpha
        )));
    }
    let w = &suspect.classifier;
    if w.class_count != secret.class_count() {
        return Err(Error::ClassCountMismatch {
            left: secret.class_count(),
            right: w.class_count,
        });
    }
    if w.feature_dim != suspect.feature_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("classifier over {} features", suspect.feature_dim()),
            found: format!("{}", w.feature_dim),
        });
    }
    if marker.feature_dim() != secret.carriers.feature_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("marker with {} features", secret.carriers.feature_dim),
            found: format!("{}", marker.feature_dim()),
        });
    }
    let map = align_features(suspect.features, marker, probe_data, opts.ridge, policy)?;
    let d = w.feature_dim;
    let mean_row: Vec<f64> = if opts.center_weights {
        (0..d)
            .map(|j| {
                (0..w.class_count).map(|c| w.row(c)[j] as f64).sum::<f64>() / w.class_count as f64
            })
            .collect()
    } else {
        vec![0.0; d]
    };
    let cosines: Vec<f64> = (0..w.class_count)
        .map(|c| {
            let row: Vec<f64> = w
                .row(c)
                .iter()
                .zip(&mean_row)
                .map(|(v, m)| *v as f64 - m)
                .collect();
            match opts.cosine_space {
                CosineSpace::Suspect => cosine(&map.apply(secret.carriers.row(c)), &row),
                CosineSpace::Marker => {
                    let u: Vec<f64> = secret.carriers.row(c).iter().map(|v| *v as f64).collect();
                    cosine(&u, &map.apply_transpose(&row))
                }
            }
        })
        .collect();
    let dim = match opts.cosine_space {
        CosineSpace::Suspect => d,
        CosineSpace::Marker => map.marker_dim,
    };
    let test = cosine_hypothesis_test(&cosines, opts.effective_dim.unwrap_or(dim))?;
    let statistic = test.combined_log10p;
    Ok(VerificationVerdict {
        method: probe_source.method(),
        statistic,
        threshold: opts.alpha.log10(),
        decision: whitebox_decision(statistic, opts.alpha),
        samples_used: probe_data.len(),
        detail: VerdictDetail::Whitebox {
            test,
            residual_rms: map.residual_rms,
            probe_count: map.probe_count,
            ridge: map.ridge,
            cosine_space: opts.cosine_space,
            centered: opts.center_weights,
        },
        carrier_seed: secret.carriers.seed,
        suspect_digest: suspect.features.digest(),
        secret_digest: secret_digest(secret),
    })
}

/// Cross-entropy of `row` at `class` with the probability floor applied.
pub fn cross_entropy(row: &[f32], class: usize) -> f64 {
    -(row[class] as f64).max(PROB_FLOOR).ln()
}

fn check_rows(rows: &[Vec<f32>], m: usize, expected: usize) -> Result<()> {
    if rows.len() != expected {
        return Err(Error::Query(format!(
            "expected {expected} rows, got {}",
            rows.len()
        )));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != m {
            return Err(Error::InvalidProbabilities(format!(
                "row {i} has {} entries, expected {m}",
                r.len()
            )));
        }
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidProbabilities(format!(
                "row {i} has negative or non-finite entries"
            )));
        }
        let s: f64 = r.iter().map(|v| *v as f64).sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidProbabilities(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Queries in fixed-size batches; results come back in input order.
pub fn query_all(
    oracle: &dyn ProbabilityOracle,
    images: &[Vec<f32>],
    batch: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let rows = oracle.query(chunk)?;
        check_rows(&rows, oracle.class_count(), chunk.len())?;
        out.extend(rows);
    }
    Ok(out)
}

const QUERY_BATCH: usize = 256;

/// Per-pair losses in sweep order. The order is a seeded shuffle of the
/// secret's (class, index) pairs.
pub fn blackbox_pair_losses(
    oracle: &dyn ProbabilityOracle,
    secret: &WatermarkSecret,
    order_seed: u64,
) -> Result<Vec<PairLoss>> {
    if oracle.class_count() != secret.class_count() {
        return Err(Error::ClassCountMismatch {
            left: secret.class_count(),
            right: oracle.class_count(),
        });
    }
    let mut pairs = secret.pairs();
    if pairs.is_empty() {
        return Err(Error::invalid("secret holds no marked/clean pairs"));
    }
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
    let clean: Vec<Vec<f32>> = pairs.iter().map(|p| p.1.to_vec()).collect();
    let marked: Vec<Vec<f32>> = pairs.iter().map(|p| p.2.to_vec()).collect();
    let pc = query_all(oracle, &clean, QUERY_BATCH)?;
    let pm = query_all(oracle, &marked, QUERY_BATCH)?;
    Ok(pairs
        .iter()
        .zip(pc.iter().zip(&pm))
        .map(|(p, (rc, rm))| PairLoss {
            class: p.0,
            clean_loss: cross_entropy(rc, p.0),
            marked_loss: cross_entropy(rm, p.0),
        })
        .collect())
}

/// Running means of `clean_loss - marked_loss`, summed left to right.
pub fn prefix_means(pairs: &[PairLoss]) -> Vec<f64> {
    let mut sum = 0.0f64;
    pairs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            sum += p.clean_loss - p.marked_loss;
            sum / (k + 1) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlackBoxOptions {
    /// Seed of the pair ordering; `None` uses the selection seed.
    pub order_seed: Option<u64>,
}

fn order_seed(secret: &WatermarkSecret, opts: &BlackBoxOptions) -> u64 {
    opts.order_seed.unwrap_or(secret.selection.seed)
}

fn blackbox_verdict(
    oracle: &dyn ProbabilityOracle,
    secret: &WatermarkSecret,
    pairs: Vec<PairLoss>,
    statistic: f64,
    seed: u64,
) -> VerificationVerdict {
    VerificationVerdict {
        method: VerificationMethod::Blackbox,
        statistic,
        threshold: 0.0,
        decision: blackbox_decision(statistic),
        samples_used: pairs.len(),
        detail: VerdictDetail::Blackbox {
            pairs,
            order_seed: seed,
        },
        carrier_seed: secret.carriers.seed,
        suspect_digest: oracle.digest(),
        secret_digest: secret_digest(secret),
    }
}

pub fn blackbox_verify(
    oracle: &dyn ProbabilityOracle,
    secret: &WatermarkSecret,
    sample_budget: Option<usize>,
    opts: &BlackBoxOptions,
) -> Result<VerificationVerdict> {
    let seed = order_seed(secret, opts);
    let mut pairs = blackbox_pair_losses(oracle, secret, seed)?;
    if let Some(b) = sample_budget {
        if b == 0 || b > pairs.len() {
            return Err(Error::invalid(format!(
                "sample budget {b} outside [1, {}]",
                pairs.len()
            )));
        }
        pairs.truncate(b);
    }
    let statistic = *prefix_means(&pairs).last().expect("nonempty");
    Ok(blackbox_verdict(oracle, secret, pairs, statistic, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub budget: usize,
    pub statistic: f64,
    pub decision: bool,
}

/// One black-box statistic per budget over a single fixed pair ordering.
pub fn blackbox_sample_sweep(
    oracle: &dyn ProbabilityOracle,
    secret: &WatermarkSecret,
    budgets: &[usize],
    opts: &BlackBoxOptions,
) -> Result<Vec<SweepPoint>> {
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("budgets must be strictly ascending"));
    }
    let pairs = blackbox_pair_losses(oracle, secret, order_seed(secret, opts))?;
    if let Some(&b) = budgets.iter().find(|&&b| b == 0 || b > pairs.len()) {
        return Err(Error::invalid(format!(
            "sample budget {b} outside [1, {}]",
            pairs.len()
        )));
    }
    let means = prefix_means(&pairs);
    Ok(budgets
        .iter()
        .map(|&b| SweepPoint {
            budget: b,
            statistic: means[b - 1],
            decision: blackbox_decision(means[b - 1]),
        })
        .collect())
}

/// Smallest budget from which every larger swept budget also decides True.
pub fn smallest_sufficient_budget(points: &[SweepPoint]) -> Option<usize> {
    let mut answer = None;
    for p in points.iter().rev() {
        if !p.decision {
            break;
        }
        answer = Some(p.budget);
    }
    answer
}
