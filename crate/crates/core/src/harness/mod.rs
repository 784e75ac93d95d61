//! End-to-end experiments: manifests, checkpointed stages, requirement
//! scoring and report bundles.
//!
//! A run executes `mark -> train -> verify -> (extract) -> report` for each
//! watermarking ratio. Every stage records a key (hash of its configuration
//! and upstream keys) and the sha256 of each file it wrote in
//! `checkpoints.json`. A stage whose key and files still match is loaded
//! instead of recomputed.

mod manifest;
pub mod report;
pub mod requirements;
pub mod robustness;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use manifest::{
    ratio_tag, DatasetSpec, ExperimentManifest, ExtractionSpec, ModelSpec, PoolSpec, ReferenceSpec,
    MANIFEST_SCHEMA_VERSION,
};
pub use requirements::{
    check_requirements, verify_all, CheckConfig, RequirementReport, StealthBudget,
    VerificationSettings,
};

use crate::dataset::{
    load_dataset, load_secret, save_secret, select_marking_targets, LabeledImageDataset,
    WatermarkSecret,
};
use crate::error::{Error, Result};
use crate::exec::{ComputeProfile, ExecPolicy};
use crate::extraction::{
    build_transfer_set, extraction_survival_report, train_surrogate, SurvivalReport, TransferSet,
};
use crate::marker::{mark_dataset, EmbedParams};
use crate::model::{train_classifier, TrainedModel};
use crate::stats::generate_carriers;
use crate::verify::{blackbox_sample_sweep, smallest_sufficient_budget, SweepPoint};

pub const RESULTS_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.json";
pub const CHECKPOINT_FILE: &str = "checkpoints.json";

/// The training set with every selected sample replaced by its marked version.
pub fn marked_dataset_from_secret(
    train: &LabeledImageDataset,
    secret: &WatermarkSecret,
) -> Result<LabeledImageDataset> {
    secret.selection.validate_against(train)?;
    let mut out = train.clone();
    for (&(c, i), img) in &secret.marked_images {
        if train.labels[i] != c {
            return Err(Error::schema(
                "secret",
                format!("sample {i} is labelled {} not {c}", train.labels[i]),
            ));
        }
        if secret.clean_originals.get(&(c, i)) != Some(&train.images[i]) {
            return Err(Error::schema(
                "secret",
                format!("sample {i} differs from the stored original"),
            ));
        }
        out.images[i] = img.clone();
    }
    Ok(out)
}

/// Written next to a released marked dataset. Never contains carrier values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkSidecar {
    pub source_dataset_id: String,
    pub source_digest: String,
    pub marked_digest: String,
    pub wm_ratio: f64,
    pub marked_count: usize,
    pub embed_params: EmbedParams,
    pub marker_model_digest: String,
    pub secret_path: PathBuf,
    pub secret_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub architecture: String,
    pub digest: String,
    /// Test accuracy in percent.
    pub accuracy_pct: f64,
}

impl ModelSummary {
    fn of(model: &TrainedModel, test: &LabeledImageDataset, policy: ExecPolicy) -> Result<Self> {
        Ok(ModelSummary {
            architecture: model.architecture.tag().to_string(),
            digest: model.weights_digest(),
            accuracy_pct: 100.0 * model.evaluate_accuracy(test, policy)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub surrogate: ModelSummary,
    pub transfer_budget: usize,
    pub survival: SurvivalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioResult {
    pub wm_ratio: f64,
    pub marked_pairs: usize,
    pub secret_digest: String,
    pub adversary: ModelSummary,
    pub requirements: RequirementReport,
    pub sweep: Vec<SweepPoint>,
    pub smallest_sufficient_budget: Option<usize>,
    pub extraction: Option<ExtractionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSummary {
    pub name: String,
    pub model: ModelSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub schema_version: u32,
    pub manifest_name: String,
    pub manifest_digest: String,
    pub dataset_id: String,
    pub class_count: usize,
    pub marker: ModelSummary,
    pub clean: ModelSummary,
    pub references: Vec<NamedSummary>,
    pub ratios: Vec<RatioResult>,
}

impl ExperimentResults {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: ExperimentResults =
            serde_json::from_str(&text).map_err(|e| Error::schema("results", e.to_string()))?;
        if r.schema_version != RESULTS_SCHEMA_VERSION {
            return Err(Error::UnsupportedSchema {
                found: r.schema_version,
                supported: RESULTS_SCHEMA_VERSION,
            });
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub policy: ExecPolicy,
    pub profile: ComputeProfile,
    /// Recompute every stage even when its checkpoint matches.
    pub force: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    files: BTreeMap<String, String>,
}

/// Outcome of a run: results plus which stages were loaded from checkpoints.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub results: ExperimentResults,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

struct Stages {
    dir: PathBuf,
    ledger: BTreeMap<String, StageRecord>,
    opts: RunOptions,
    executed: Vec<String>,
    skipped: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn stage_key(name: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    for p in parts {
        h.update([0u8]);
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))
}

impl Stages {
    fn open(dir: &Path, opts: RunOptions) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CHECKPOINT_FILE);
        let ledger = if path.exists() {
            read_json(&path)?
        } else {
            BTreeMap::new()
        };
        Ok(Stages {
            dir: dir.to_path_buf(),
            ledger,
            opts,
            executed: Vec::new(),
            skipped: Vec::new(),
        })
    }

    fn fresh(&self, name: &str, key: &str) -> bool {
        if self.opts.force {
            return false;
        }
        let Some(rec) = self.ledger.get(name) else {
            return false;
        };
        rec.key == key
            && rec
                .files
                .iter()
                .all(|(f, d)| sha256_file(&self.dir.join(f)).is_ok_and(|x| &x == d))
    }

    /// Loads the stage output when its checkpoint matches, otherwise runs
    /// `make` (which must write `files`) and records the new checkpoint.
    fn run<T>(
        &mut self,
        name: &str,
        key: &str,
        files: &[String],
        load: impl FnOnce(&Path) -> Result<T>,
        make: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        };
        if self.fresh(name, key) {
            if let Ok(v) = load(&self.dir) {
                self.skipped.push(name.to_string());
                return Ok(v);
            }
        }
        if self.opts.verbose {
            eprintln!("[stage] {name}");
        }
        self.ledger.remove(name);
        let value = make(&self.dir).map_err(wrap)?;
        let mut digests = BTreeMap::new();
        for f in files {
            digests.insert(f.clone(), sha256_file(&self.dir.join(f)).map_err(wrap)?);
        }
        self.ledger.insert(
            name.to_string(),
            StageRecord {
                key: key.to_string(),
                files: digests,
            },
        );
        self.save_ledger()?;
        self.executed.push(name.to_string());
        Ok(value)
    }

    fn save_ledger(&self) -> Result<()> {
        let tmp = self.dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        write_json(&tmp, &self.ledger)?;
        let dest = self.dir.join(CHECKPOINT_FILE);
        std::fs::rename(&tmp, &dest).map_err(|e| Error::io(dest, e))
    }
}

fn train_model_stage(
    stages: &mut Stages,
    name: &str,
    file: String,
    key: &str,
    data: &LabeledImageDataset,
    spec: &ModelSpec,
) -> Result<TrainedModel> {
    let (policy, profile) = (stages.opts.policy, stages.opts.profile);
    let f = file.clone();
    stages.run(
        name,
        key,
        &[file],
        |dir| TrainedModel::load(&dir.join(&f)),
        |dir| {
            let m = train_classifier(data, spec.architecture, &spec.hyper, policy, profile)?;
            m.save(&dir.join(&f))?;
            Ok(m)
        },
    )
}

fn transfer_pool(manifest: &ExperimentManifest, spec: &ExtractionSpec) -> Result<Vec<Vec<f32>>> {
    match (&spec.pool, &manifest.dataset) {
        (PoolSpec::Toy { count, seed }, DatasetSpec::Toy(cfg)) => cfg.transfer_pool(*count, *seed),
        (
            PoolSpec::Files {
                path,
                format,
                split,
            },
            _,
        ) => Ok(load_dataset(path, *format, *split)?.images),
        _ => Err(Error::schema(
            "manifest",
            "a toy transfer pool needs a toy dataset",
        )),
    }
}

/// Runs (or resumes) an experiment and writes its report bundle to
/// `<output_dir>/report`.
pub fn run_experiment(manifest: &ExperimentManifest, opts: RunOptions) -> Result<RunSummary> {
    manifest.validate()?;
    let policy = opts.policy;
    let dir = manifest.output_dir.clone();
    let mut stages = Stages::open(&dir, opts)?;
    manifest.save(&dir.join("manifest.json"))?;

    let (train, test) = manifest
        .dataset
        .load(manifest.subset.as_ref())
        .map_err(|e| Error::Stage {
            stage: "data".into(),
            source: Box::new(e),
        })?;
    let data_key = stage_key("data", &[&train.digest(), &test.digest()]);

    let marker_key = stage_key("marker", &[&data_key, &json(&manifest.marker)]);
    let marker = train_model_stage(
        &mut stages,
        "marker",
        "marker.rmdl".into(),
        &marker_key,
        &train,
        &manifest.marker,
    )?;

    let (clean, clean_key) = if manifest.adversary == manifest.marker {
        (marker.clone(), marker_key.clone())
    } else {
        let key = stage_key("clean", &[&data_key, &json(&manifest.adversary)]);
        let m = train_model_stage(
            &mut stages,
            "clean",
            "clean.rmdl".into(),
            &key,
            &train,
            &manifest.adversary,
        )?;
        (m, key)
    };

    let mut references = Vec::new();
    let mut reference_keys = Vec::new();
    for r in &manifest.references {
        let spec = ModelSpec {
            architecture: r.architecture,
            hyper: r.hyper.clone(),
        };
        let name = format!("reference:{}", r.name);
        let key = stage_key(&name, &[&data_key, &json(&spec)]);
        let m = train_model_stage(
            &mut stages,
            &name,
            format!("reference-{}.rmdl", r.name),
            &key,
            &train,
            &spec,
        )?;
        references.push((r.name.clone(), m));
        reference_keys.push(key);
    }
    let reference_refs: Vec<(&str, &TrainedModel)> =
        references.iter().map(|(n, m)| (n.as_str(), m)).collect();

    let mut ratios = Vec::new();
    for &ratio in &manifest.wm_ratios {
        let tag = ratio_tag(ratio);

        let mark_name = format!("mark@{tag}");
        let mark_key = stage_key(
            &mark_name,
            &[
                &marker_key,
                &json(&manifest.embed),
                &json(&(ratio, manifest.carrier_seed, manifest.selection_seed)),
            ],
        );
        let secret_file = format!("secret-{tag}.rmrk");
        let sf = secret_file.clone();
        let secret = stages.run(
            &mark_name,
            &mark_key,
            &[secret_file],
            |d| load_secret(&d.join(&sf)),
            |d| {
                let carriers = generate_carriers(
                    train.class_count(),
                    marker.feature_dim(),
                    manifest.carrier_seed,
                )?;
                let selection = select_marking_targets(&train, ratio, manifest.selection_seed)?;
                let (_, secret) = mark_dataset(
                    &train,
                    &selection,
                    &carriers,
                    &marker.network,
                    &manifest.embed,
                    policy,
                )?;
                save_secret(&secret, &d.join(&sf))?;
                Ok(secret)
            },
        )?;
        let marked_train = marked_dataset_from_secret(&train, &secret)?;

        let train_name = format!("train@{tag}");
        let train_key = stage_key(&train_name, &[&mark_key, &json(&manifest.adversary)]);
        let adversary = train_model_stage(
            &mut stages,
            &train_name,
            format!("adversary-{tag}.rmdl"),
            &train_key,
            &marked_train,
            &manifest.adversary,
        )?;

        let verify_name = format!("verify@{tag}");
        let check = CheckConfig {
            verification: manifest.verification.clone(),
            stealth: manifest.stealth.clone(),
            robustness: manifest.robustness.clone(),
        };
        let verify_key = stage_key(
            &verify_name,
            &[
                &train_key,
                &clean_key,
                &json(&check),
                &json(&reference_keys),
                &json(&manifest.verification.sweep_budgets),
            ],
        );
        let verify_file = format!("verify-{tag}.json");
        let vf = verify_file.clone();
        let (requirements, sweep): (RequirementReport, Vec<SweepPoint>) = stages.run(
            &verify_name,
            &verify_key,
            &[verify_file],
            |d| read_json(&d.join(&vf)),
            |d| {
                let report = check_requirements(
                    &clean,
                    &adversary,
                    &reference_refs,
                    &secret,
                    &marker,
                    &test,
                    &check,
                    policy,
                )?;
                let n = secret.marked_images.len();
                let budgets = manifest
                    .verification
                    .sweep_budgets
                    .clone()
                    .unwrap_or_else(|| (1..=n).collect());
                let budgets: Vec<usize> = budgets.into_iter().filter(|b| *b <= n).collect();
                let sweep = blackbox_sample_sweep(
                    &adversary,
                    &secret,
                    &budgets,
                    &manifest.verification.blackbox(),
                )?;
                let out = (report, sweep);
                write_json(&d.join(&vf), &out)?;
                Ok(out)
            },
        )?;

        let extraction = match &manifest.extraction {
            None => None,
            Some(spec) => {
                let name = format!("extract@{tag}");
                let key = stage_key(
                    &name,
                    &[&train_key, &json(spec), &json(&manifest.verification)],
                );
                let tdir = format!("transfer-{tag}");
                let files = vec![
                    format!("surrogate-{tag}.rmdl"),
                    format!("survival-{tag}.json"),
                    format!("{tdir}/transfer.json"),
                    format!("{tdir}/responses.bin"),
                    format!("{tdir}/queries.tar"),
                ];
                let (f_model, f_report) = (files[0].clone(), files[1].clone());
                let (profile, wb, bb) = (
                    opts.profile,
                    manifest.verification.whitebox(),
                    manifest.verification.blackbox(),
                );
                let result = stages.run(
                    &name,
                    &key,
                    &files,
                    |d| read_json::<ExtractionResult>(&d.join(&f_report)),
                    |d| {
                        let pool = transfer_pool(manifest, spec)?;
                        if spec.budget + spec.held_out > pool.len() {
                            return Err(Error::invalid(format!(
                                "transfer pool has {} images, need {}",
                                pool.len(),
                                spec.budget + spec.held_out
                            )));
                        }
                        let transfer: TransferSet = build_transfer_set(
                            &adversary,
                            &pool,
                            train.shape,
                            spec.budget,
                            spec.seed,
                            Some(&d.join(&tdir)),
                        )?;
                        transfer.save(&d.join(&tdir))?;
                        let used: std::collections::BTreeSet<usize> =
                            transfer.pool_indices.iter().copied().collect();
                        let held_out: Vec<Vec<f32>> = (0..pool.len())
                            .filter(|i| !used.contains(i))
                            .take(spec.held_out)
                            .map(|i| pool[i].clone())
                            .collect();
                        let surrogate = train_surrogate(
                            &transfer,
                            spec.surrogate.architecture,
                            &spec.surrogate.hyper,
                            spec.mode,
                            policy,
                            profile,
                        )?;
                        surrogate.save(&d.join(&f_model))?;
                        let survival = extraction_survival_report(
                            &adversary,
                            &secret,
                            &surrogate,
                            &marker,
                            &test,
                            Some(&held_out),
                            &wb,
                            &bb,
                            policy,
                        )?;
                        let r = ExtractionResult {
                            surrogate: ModelSummary::of(&surrogate, &test, policy)?,
                            transfer_budget: transfer.len(),
                            survival,
                        };
                        write_json(&d.join(&f_report), &r)?;
                        Ok(r)
                    },
                )?;
                Some(result)
            }
        };

        ratios.push(RatioResult {
            wm_ratio: ratio,
            marked_pairs: secret.marked_images.len(),
            secret_digest: secret.digest()?,
            adversary: ModelSummary::of(&adversary, &test, policy)?,
            smallest_sufficient_budget: smallest_sufficient_budget(&sweep),
            requirements,
            sweep,
            extraction,
        });
    }

    let results = ExperimentResults {
        schema_version: RESULTS_SCHEMA_VERSION,
        manifest_name: manifest.name.clone(),
        manifest_digest: manifest.digest()?,
        dataset_id: train.dataset_id.clone(),
        class_count: train.class_count(),
        marker: ModelSummary::of(&marker, &test, policy)?,
        clean: ModelSummary::of(&clean, &test, policy)?,
        references: references
            .iter()
            .map(|(n, m)| {
                Ok(NamedSummary {
                    name: n.clone(),
                    model: ModelSummary::of(m, &test, policy)?,
                })
            })
            .collect::<Result<_>>()?,
        ratios,
    };
    write_json(&dir.join(RESULTS_FILE), &results)?;
    report::write_bundle(&results, &dir.join("report")).map_err(|e| Error::Stage {
        stage: "report".into(),
        source: Box::new(e),
    })?;
    Ok(RunSummary {
        results,
        executed: stages.executed,
        skipped: stages.skipped,
    })
}
