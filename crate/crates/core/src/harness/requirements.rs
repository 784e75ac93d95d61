//! Scoring of utility, effectiveness, integrity, stealthiness and
//! (optionally) robustness for one marked-trained model.

use serde::{Deserialize, Serialize};

use super::robustness::{Transform, TransformedOracle};
use crate::dataset::{LabeledImageDataset, WatermarkSecret};
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::marker::{stealth_metrics, StealthReport};
use crate::model::TrainedModel;
use crate::verify::{
    blackbox_verify, marked_probe, whitebox_verify, BlackBoxOptions, CosineSpace, FeatureExtractor,
    ProbeSource, RidgeMode, VerificationMethod, VerificationVerdict, WhiteBoxOptions,
    WhiteBoxSuspect,
};

/// Largest accuracy drop, in percentage points, that still counts as useful.
pub const MAX_UTILITY_GAP_PP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerificationSettings {
    pub alpha: f64,
    pub probe_sources: Vec<ProbeSource>,
    pub cosine_space: CosineSpace,
    pub center_weights: bool,
    /// Pair-order seed for black-box queries; the secret's selection seed when unset.
    pub order_seed: Option<u64>,
    /// Number of marked pairs the black-box verdict may query; all when unset.
    pub query_budget: Option<usize>,
    /// Budgets for the sample sweep; every budget from 1 to the pair count when unset.
    pub sweep_budgets: Option<Vec<usize>>,
}

impl Default for VerificationSettings {
    fn default() -> Self {
        VerificationSettings {
            alpha: 0.05,
            probe_sources: vec![ProbeSource::TestSet, ProbeSource::MarkedSet],
            cosine_space: CosineSpace::default(),
            center_weights: false,
            order_seed: None,
            query_budget: None,
            sweep_budgets: None,
        }
    }
}

impl VerificationSettings {
    pub fn whitebox(&self) -> WhiteBoxOptions {
        WhiteBoxOptions {
            alpha: self.alpha,
            ridge: RidgeMode::Auto,
            cosine_space: self.cosine_space,
            center_weights: self.center_weights,
            effective_dim: None,
        }
    }

    pub fn blackbox(&self) -> BlackBoxOptions {
        BlackBoxOptions {
            order_seed: self.order_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        if self.query_budget == Some(0) {
            return Err(Error::invalid("query budget must be positive"));
        }
        if let Some(b) = &self.sweep_budgets {
            if b.is_empty() || b[0] == 0 || b.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(
                    "sweep budgets must be positive and strictly ascending",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StealthBudget {
    pub min_psnr_db: f64,
    pub max_linf: Option<f64>,
}

impl Default for StealthBudget {
    fn default() -> Self {
        StealthBudget {
            min_psnr_db: 30.0,
            max_linf: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckConfig {
    pub verification: VerificationSettings,
    pub stealth: StealthBudget,
    /// Transformations applied before black-box queries. Empty disables the check.
    pub robustness: Vec<Transform>,
}

/// Accuracies are in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityCheck {
    pub acc_clean: f64,
    pub acc_marked: f64,
    pub gap_pp: f64,
    pub pass: bool,
}

impl UtilityCheck {
    pub fn new(acc_clean_pct: f64, acc_marked_pct: f64) -> Self {
        let gap_pp = acc_clean_pct - acc_marked_pct;
        UtilityCheck {
            acc_clean: acc_clean_pct,
            acc_marked: acc_marked_pct,
            gap_pp,
            pass: gap_pp <= MAX_UTILITY_GAP_PP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessCheck {
    pub verdicts: Vec<VerificationVerdict>,
    /// Set when no method decides True.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceVerdicts {
    pub name: String,
    pub digest: String,
    pub verdicts: Vec<VerificationVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityCheck {
    pub models: Vec<ReferenceVerdicts>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealthCheck {
    pub report: StealthReport,
    pub budget: StealthBudget,
    pub pass: bool,
}

impl StealthCheck {
    fn passes(report: &StealthReport, budget: &StealthBudget) -> bool {
        report.psnr_db >= budget.min_psnr_db
            && budget.max_linf.is_none_or(|b| report.linf_pixel <= b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessResult {
    pub transform: Transform,
    pub verdict: VerificationVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequirementReport {
    pub utility: UtilityCheck,
    pub effectiveness: EffectivenessCheck,
    pub integrity: IntegrityCheck,
    pub stealthiness: StealthCheck,
    pub robustness: Vec<RobustnessResult>,
}

pub const NO_EFFECT_FLAG: &str = "no watermark effect";

impl RequirementReport {
    /// True when every pass field and flag follows from the raw numbers.
    pub fn is_consistent(&self) -> bool {
        let u = &self.utility;
        let utility_ok =
            u.gap_pp == u.acc_clean - u.acc_marked && u.pass == (u.gap_pp <= MAX_UTILITY_GAP_PP);
        let verdicts_ok = self
            .effectiveness
            .verdicts
            .iter()
            .chain(self.integrity.models.iter().flat_map(|m| &m.verdicts))
            .chain(self.robustness.iter().map(|r| &r.verdict))
            .all(|v| v.is_consistent());
        let flag_ok = self.effectiveness.flag.is_some()
            == !self.effectiveness.verdicts.iter().any(|v| v.decision);
        let integrity_ok = self.integrity.pass
            == self
                .integrity
                .models
                .iter()
                .all(|m| m.verdicts.iter().all(|v| !v.decision));
        let stealth_ok = self.stealthiness.pass
            == StealthCheck::passes(&self.stealthiness.report, &self.stealthiness.budget);
        utility_ok && verdicts_ok && flag_ok && integrity_ok && stealth_ok
    }

    pub fn verdict(&self, method: VerificationMethod) -> Option<&VerificationVerdict> {
        self.effectiveness
            .verdicts
            .iter()
            .find(|v| v.method == method)
    }
}

/// White-box verdicts (one per probe source) followed by the black-box verdict.
pub fn verify_all(
    model: &TrainedModel,
    secret: &WatermarkSecret,
    marker: &dyn FeatureExtractor,
    test: &LabeledImageDataset,
    settings: &VerificationSettings,
    policy: ExecPolicy,
) -> Result<Vec<VerificationVerdict>> {
    let suspect = WhiteBoxSuspect::from_model(model);
    let wb = settings.whitebox();
    let mut out = Vec::new();
    for source in &settings.probe_sources {
        let verdict = match source {
            ProbeSource::TestSet => {
                whitebox_verify(&suspect, secret, marker, *source, &test.images, &wb, policy)?
            }
            ProbeSource::MarkedSet => whitebox_verify(
                &suspect,
                secret,
                marker,
                *source,
                &marked_probe(secret),
                &wb,
                policy,
            )?,
        };
        out.push(verdict);
    }
    out.push(blackbox_verify(
        model,
        secret,
        settings.query_budget,
        &settings.blackbox(),
    )?);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn check_requirements(
    clean: &TrainedModel,
    marked: &TrainedModel,
    references: &[(&str, &TrainedModel)],
    secret: &WatermarkSecret,
    marker: &dyn FeatureExtractor,
    test: &LabeledImageDataset,
    config: &CheckConfig,
    policy: ExecPolicy,
) -> Result<RequirementReport> {
    config.verification.validate()?;
    let m = secret.class_count();
    for model in [clean, marked]
        .into_iter()
        .chain(references.iter().map(|r| r.1))
    {
        if model.class_count() != m {
            return Err(Error::ClassCountMismatch {
                left: m,
                right: model.class_count(),
            });
        }
    }
    if test.class_count() != m {
        return Err(Error::ClassCountMismatch {
            left: m,
            right: test.class_count(),
        });
    }

    let utility = UtilityCheck::new(
        100.0 * clean.evaluate_accuracy(test, policy)?,
        100.0 * marked.evaluate_accuracy(test, policy)?,
    );

    let verdicts = verify_all(marked, secret, marker, test, &config.verification, policy)?;
    let flag = (!verdicts.iter().any(|v| v.decision)).then(|| NO_EFFECT_FLAG.to_string());
    let effectiveness = EffectivenessCheck { verdicts, flag };

    let mut models = Vec::with_capacity(references.len());
    for (name, model) in references {
        models.push(ReferenceVerdicts {
            name: name.to_string(),
            digest: model.weights_digest(),
            verdicts: verify_all(model, secret, marker, test, &config.verification, policy)?,
        });
    }
    let integrity = IntegrityCheck {
        pass: models
            .iter()
            .all(|r| r.verdicts.iter().all(|v| !v.decision)),
        models,
    };

    let (clean_imgs, marked_imgs): (Vec<Vec<f32>>, Vec<Vec<f32>>) = secret
        .pairs()
        .into_iter()
        .map(|(_, c, k)| (c.to_vec(), k.to_vec()))
        .unzip();
    let report = stealth_metrics(&clean_imgs, &marked_imgs)?;
    let stealthiness = StealthCheck {
        pass: StealthCheck::passes(&report, &config.stealth),
        report,
        budget: config.stealth.clone(),
    };

    let mut robustness = Vec::with_capacity(config.robustness.len());
    for t in &config.robustness {
        let oracle = TransformedOracle {
            inner: marked,
            transform: *t,
            shape: secret.image_shape,
        };
        robustness.push(RobustnessResult {
            transform: *t,
            verdict: blackbox_verify(
                &oracle,
                secret,
                config.verification.query_budget,
                &config.verification.blackbox(),
            )?,
        });
    }

    Ok(RequirementReport {
        utility,
        effectiveness,
        integrity,
        stealthiness,
        robustness,
    })
}
