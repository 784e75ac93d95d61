mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radmark::dataset::toy::ToyTaskConfig;
use radmark::dataset::{
    load_dataset, load_secret, save_dataset, save_secret, select_marking_targets, DatasetFormat,
    LabeledImageDataset, Split, WatermarkSecret,
};
use radmark::exec::{ComputeProfile, ExecPolicy};
use radmark::extraction::{
    build_transfer_set, extraction_survival_report, train_surrogate, DistillMode,
};
use radmark::harness::report::{self as bundle};
use radmark::harness::robustness::{Transform, TransformedOracle};
use radmark::harness::{
    check_requirements, marked_dataset_from_secret, ratio_tag, run_experiment, CheckConfig,
    DatasetSpec, ExperimentManifest, ExperimentResults, MarkSidecar, ModelSpec, PoolSpec,
    RunOptions, RESULTS_FILE,
};
use radmark::marker::mark_dataset;
use radmark::model::{train_classifier, TrainedModel};
use radmark::nn::{Architecture, TrainConfig};
use radmark::stats::generate_carriers;
use radmark::verify::{
    blackbox_sample_sweep, blackbox_verify, marked_probe, smallest_sufficient_budget,
    whitebox_verify, BlackBoxOptions, CosineSpace, ProbabilityOracle, ProbeSource,
    VerificationVerdict, WhiteBoxSuspect,
};
use radmark::{Error, Result};

#[derive(Parser)]
#[command(
    name = "radmark",
    version,
    about = "Radioactive dataset watermarking and ownership verification"
)]
struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Compute profile; defaults to RADMARK_PROFILE or `deterministic`.
    #[arg(long, global = true, value_parser = ["deterministic", "fast"])]
    profile: Option<String>,
    /// Experiment manifest supplying defaults for any flag not given.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Watermark a fraction of a dataset with a marker model.
    Mark(MarkArgs),
    /// Train a classifier, optionally on the marked version of a dataset.
    Train(TrainArgs),
    /// White-box verification against a suspect model's features and classifier.
    VerifyWb(VerifyWbArgs),
    /// Black-box verification through a suspect's probability outputs.
    VerifyBb(VerifyBbArgs),
    /// Black-box statistic as a function of the number of queried pairs.
    SweepBb(SweepArgs),
    /// Distill a surrogate from a victim's outputs on a transfer pool.
    Extract(ExtractArgs),
    /// Score utility, effectiveness, integrity and stealthiness.
    Check(CheckArgs),
    /// Run every stage of a manifest, resuming from checkpoints.
    Run(RunArgs),
    /// Regenerate and print the report of a finished run.
    Report(ReportArgs),
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Dataset location: CIFAR binary directory, class folders, or archive.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// cifar | folder | archive
    #[arg(long, default_value = "archive")]
    format: String,
    /// Use the procedural toy task generated with this seed.
    #[arg(long, conflicts_with = "dataset")]
    toy_seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct HyperArgs {
    /// Architecture tag (desk_cnn, desk_resnet, ...).
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Initialization and shuffling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MarkArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Marker model (.rmdl) whose feature space carries the watermark.
    #[arg(long)]
    marker: Option<PathBuf>,
    #[arg(long)]
    wm_ratio: Option<f64>,
    #[arg(long)]
    carrier_seed: Option<u64>,
    #[arg(long)]
    selection_seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Gradient step in pixel units (2/255 by default).
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    lambda_pixel: Option<f64>,
    #[arg(long)]
    lambda_feature: Option<f64>,
    #[arg(long)]
    linf_budget: Option<f64>,
    /// Keep marked pixels off the 8-bit grid (the secret file will refuse them).
    #[arg(long)]
    no_quantize: bool,
    /// Where to write the marked dataset.
    #[arg(long)]
    out: PathBuf,
    /// Format of the written dataset.
    #[arg(long, default_value = "archive")]
    out_format: String,
    /// Where to write the owner's secret.
    #[arg(long)]
    secret: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Train on the dataset with this secret's marked samples substituted in.
    #[arg(long)]
    secret: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OwnedArgs {
    /// Exit with status 1 when the decision is False.
    #[arg(long)]
    assert_owned: bool,
    /// Print the verdict as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyWbArgs {
    #[arg(long)]
    secret: Option<PathBuf>,
    /// Suspect model (.rmdl).
    #[arg(long)]
    suspect: PathBuf,
    #[arg(long)]
    marker: Option<PathBuf>,
    /// marked | test
    #[arg(long, default_value = "marked")]
    probe: String,
    /// Test data for `--probe test`.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    alpha: Option<f64>,
    /// marker | suspect
    #[arg(long)]
    cosine_space: Option<String>,
    #[command(flatten)]
    owned: OwnedArgs,
}

#[derive(Args)]
struct VerifyBbArgs {
    /// Owner's secret (.rmrk) holding the clean and marked image pairs.
    #[arg(long)]
    secret: Option<PathBuf>,
    /// Local model (.rmdl) standing in for the suspect's prediction API.
    #[arg(long)]
    suspect_endpoint: PathBuf,
    /// Number of marked pairs to query.
    #[arg(long)]
    query_budget: Option<usize>,
    /// Seed of the pair order; defaults to the secret's selection seed.
    #[arg(long)]
    order_seed: Option<u64>,
    /// Input transformation applied before each query, e.g. `requantize:50`.
    #[arg(long)]
    transform: Option<String>,
    #[command(flatten)]
    owned: OwnedArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    secret: Option<PathBuf>,
    #[arg(long)]
    suspect_endpoint: PathBuf,
    /// Comma-separated ascending budgets, or `all`.
    #[arg(long, default_value = "all")]
    budgets: String,
    #[arg(long)]
    order_seed: Option<u64>,
    /// Write the curve as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    victim: PathBuf,
    /// Transfer pool dataset (labels ignored).
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, default_value = "archive")]
    pool_format: String,
    /// Use a toy transfer pool of this many images instead.
    #[arg(long, conflicts_with = "pool")]
    toy_pool: Option<usize>,
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 500)]
    held_out: usize,
    #[arg(long, default_value_t = 0)]
    pool_seed: u64,
    /// soft | hard
    #[arg(long, default_value = "soft")]
    mode: String,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Directory for the transfer set and the surrogate.
    #[arg(long)]
    out_dir: PathBuf,
    /// With `--marker` and test data, also verify victim and surrogate.
    #[arg(long)]
    secret: Option<PathBuf>,
    #[arg(long)]
    marker: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    marked: PathBuf,
    /// Reference model as NAME=PATH; repeatable.
    #[arg(long = "reference")]
    references: Vec<String>,
    #[arg(long)]
    secret: Option<PathBuf>,
    #[arg(long)]
    marker: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    min_psnr: Option<f64>,
    #[arg(long)]
    max_linf: Option<f64>,
    /// Input transformation for a robustness verdict; repeatable.
    #[arg(long = "transform")]
    transforms: Vec<String>,
    #[command(flatten)]
    owned: OwnedArgs,
}

#[derive(Args)]
struct RunArgs {
    /// Recompute every stage.
    #[arg(long)]
    force: bool,
    /// Write the desk-scale default manifest to this path and exit.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Seed for `--init`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `--init`.
    #[arg(long, default_value = "radmark-run")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding results.json; the manifest's output_dir by default.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// table | json | csv
    #[arg(long, default_value = "table")]
    format: String,
}

struct Ctx {
    policy: ExecPolicy,
    profile: ComputeProfile,
    manifest: Option<ExperimentManifest>,
}

impl Ctx {
    fn out_path(&self, name: &str) -> Option<PathBuf> {
        self.manifest.as_ref().map(|m| m.output_dir.join(name))
    }

    fn first_tag(&self) -> Option<String> {
        self.manifest.as_ref().map(|m| ratio_tag(m.wm_ratios[0]))
    }

    fn secret_path(&self, given: &Option<PathBuf>) -> Result<PathBuf> {
        given
            .clone()
            .or_else(|| {
                self.first_tag()
                    .and_then(|t| self.out_path(&format!("secret-{t}.rmrk")))
            })
            .ok_or_else(|| Error::InvalidArgument("--secret is required".into()))
    }

    fn marker_path(&self, given: &Option<PathBuf>) -> Result<PathBuf> {
        given
            .clone()
            .or_else(|| self.out_path("marker.rmdl"))
            .ok_or_else(|| Error::InvalidArgument("--marker is required".into()))
    }

    /// Train and test splits from flags, falling back to the manifest.
    fn data(&self, args: &DataArgs) -> Result<(LabeledImageDataset, LabeledImageDataset)> {
        if let Some(seed) = args.toy_seed {
            return ToyTaskConfig {
                seed,
                ..ToyTaskConfig::default()
            }
            .generate();
        }
        if let Some(path) = &args.dataset {
            let format = DatasetFormat::parse(&args.format)?;
            return Ok((
                load_dataset(path, format, Split::Train)?,
                load_dataset(path, format, Split::Test)?,
            ));
        }
        match &self.manifest {
            Some(m) => m.dataset.load(m.subset.as_ref()),
            None => Err(Error::InvalidArgument(
                "give --dataset, --toy-seed or --manifest".into(),
            )),
        }
    }

    fn test_data(&self, args: &DataArgs) -> Result<LabeledImageDataset> {
        if let Some(path) = &args.dataset {
            return load_dataset(path, DatasetFormat::parse(&args.format)?, Split::Test);
        }
        self.data(args).map(|d| d.1)
    }

    fn train_data(&self, args: &DataArgs) -> Result<LabeledImageDataset> {
        if let Some(path) = &args.dataset {
            return load_dataset(path, DatasetFormat::parse(&args.format)?, Split::Train);
        }
        self.data(args).map(|d| d.0)
    }
}

fn model_spec(base: Option<&ModelSpec>, h: &HyperArgs) -> Result<ModelSpec> {
    let mut spec = base.cloned().unwrap_or(ModelSpec {
        architecture: Architecture::DeskCnn,
        hyper: TrainConfig::default(),
    });
    if let Some(a) = &h.arch {
        spec.architecture = Architecture::parse(a)?;
    }
    let hy = &mut spec.hyper;
    if let Some(e) = h.epochs {
        let old = hy.epochs.max(1);
        hy.lr_milestones = hy.lr_milestones.iter().map(|m| m * e / old).collect();
        hy.epochs = e;
    }
    if let Some(b) = h.batch_size {
        hy.batch_size = b;
    }
    if let Some(l) = h.lr {
        hy.learning_rate = l;
    }
    if let Some(w) = h.weight_decay {
        hy.weight_decay = w;
    }
    if let Some(s) = h.seed {
        hy.seed = s;
    }
    Ok(spec)
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    TrainedModel::load(path)
}

fn finish_verdict(v: &VerificationVerdict, owned: &OwnedArgs) -> Result<ExitCode> {
    if owned.json {
        println!("{}", serde_json::to_string_pretty(v)?);
    } else {
        println!("{}", render::verdict_table(v));
    }
    Ok(if owned.assert_owned && !v.decision {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_mark(ctx: &Ctx, a: &MarkArgs) -> Result<ExitCode> {
    let train = ctx.train_data(&a.data)?;
    let marker = load_model(&ctx.marker_path(&a.marker)?)?;
    let m = ctx.manifest.as_ref();
    let mut params = m.map(|m| m.embed.clone()).unwrap_or_default();
    if let Some(v) = a.steps {
        params.steps = v;
    }
    if let Some(v) = a.step_size {
        params.step_size = v;
    }
    if let Some(v) = a.lambda_pixel {
        params.lambda_pixel = v;
    }
    if let Some(v) = a.lambda_feature {
        params.lambda_feature = v;
    }
    if a.linf_budget.is_some() {
        params.linf_budget = a.linf_budget;
    }
    if a.no_quantize {
        params.quantize_8bit = false;
    }
    params.validate()?;
    let ratio = a.wm_ratio.or(m.map(|m| m.wm_ratios[0])).unwrap_or(0.1);
    let carrier_seed = a.carrier_seed.or(m.map(|m| m.carrier_seed)).unwrap_or(0);
    let selection_seed = a
        .selection_seed
        .or(m.map(|m| m.selection_seed))
        .unwrap_or(0);
    let secret_path = a
        .secret
        .clone()
        .or_else(|| ctx.out_path(&format!("secret-{}.rmrk", ratio_tag(ratio))))
        .ok_or_else(|| Error::InvalidArgument("--secret is required".into()))?;

    let carriers = generate_carriers(train.class_count(), marker.feature_dim(), carrier_seed)?;
    let selection = select_marking_targets(&train, ratio, selection_seed)?;
    let (marked, secret) = mark_dataset(
        &train,
        &selection,
        &carriers,
        &marker.network,
        &params,
        ctx.policy,
    )?;
    save_secret(&secret, &secret_path)?;
    save_dataset(&marked, &a.out, DatasetFormat::parse(&a.out_format)?)?;
    let sidecar = MarkSidecar {
        source_dataset_id: train.dataset_id.clone(),
        source_digest: train.digest(),
        marked_digest: marked.digest(),
        wm_ratio: ratio,
        marked_count: secret.marked_images.len(),
        embed_params: params,
        marker_model_digest: secret.marker_model_digest.clone(),
        secret_path: secret_path.clone(),
        secret_digest: secret.digest()?,
    };
    let side = sidecar_path(&a.out);
    std::fs::write(&side, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| {
        Error::Io {
            path: side.clone(),
            source: e,
        }
    })?;
    println!(
        "marked {} of {} samples; dataset {}, secret {}, sidecar {}",
        sidecar.marked_count,
        train.len(),
        a.out.display(),
        secret_path.display(),
        side.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".radmark.json");
    out.with_file_name(name)
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<ExitCode> {
    let (mut train, test) = match (&a.data.dataset, a.data.toy_seed) {
        (Some(path), _) => {
            let format = DatasetFormat::parse(&a.data.format)?;
            let test = load_dataset(path, format, Split::Test)
                .ok()
                .filter(|t| !t.is_empty());
            (load_dataset(path, format, Split::Train)?, test)
        }
        _ => {
            let (tr, te) = ctx.data(&a.data)?;
            (tr, Some(te))
        }
    };
    let base = ctx.manifest.as_ref().map(|m| {
        if a.secret.is_some() {
            &m.adversary
        } else {
            &m.marker
        }
    });
    if let Some(p) = &a.secret {
        train = marked_dataset_from_secret(&train, &load_secret(p)?)?;
    }
    let spec = model_spec(base, &a.hyper)?;
    let model = train_classifier(
        &train,
        spec.architecture,
        &spec.hyper,
        ctx.policy,
        ctx.profile,
    )?;
    model.save(&a.out)?;
    print!(
        "trained {} on {} samples -> {}",
        spec.architecture.tag(),
        train.len(),
        a.out.display()
    );
    if let Some(test) = test {
        print!(
            "; test accuracy {:.2}%",
            100.0 * model.evaluate_accuracy(&test, ctx.policy)?
        );
    }
    println!();
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify_wb(ctx: &Ctx, a: &VerifyWbArgs) -> Result<ExitCode> {
    let secret = load_secret(&ctx.secret_path(&a.secret)?)?;
    let suspect_model = load_model(&a.suspect)?;
    let marker = load_model(&ctx.marker_path(&a.marker)?)?;
    let mut opts = ctx
        .manifest
        .as_ref()
        .map(|m| m.verification.whitebox())
        .unwrap_or_default();
    if let Some(al) = a.alpha {
        opts.alpha = al;
    }
    if let Some(cs) = &a.cosine_space {
        opts.cosine_space = CosineSpace::parse(cs)?;
    }
    let source = ProbeSource::parse(&a.probe)?;
    let probe = match source {
        ProbeSource::MarkedSet => marked_probe(&secret),
        ProbeSource::TestSet => ctx.test_data(&a.data)?.images,
    };
    let suspect = WhiteBoxSuspect::from_model(&suspect_model);
    let v = whitebox_verify(
        &suspect, &secret, &marker, source, &probe, &opts, ctx.policy,
    )?;
    finish_verdict(&v, &a.owned)
}

fn bb_options(ctx: &Ctx, order_seed: Option<u64>) -> BlackBoxOptions {
    let mut o = ctx
        .manifest
        .as_ref()
        .map(|m| m.verification.blackbox())
        .unwrap_or_default();
    if order_seed.is_some() {
        o.order_seed = order_seed;
    }
    o
}

fn cmd_verify_bb(ctx: &Ctx, a: &VerifyBbArgs) -> Result<ExitCode> {
    let secret = load_secret(&ctx.secret_path(&a.secret)?)?;
    let model = load_model(&a.suspect_endpoint)?;
    let opts = bb_options(ctx, a.order_seed);
    let budget = a.query_budget.or(ctx
        .manifest
        .as_ref()
        .and_then(|m| m.verification.query_budget));
    let transformed;
    let oracle: &dyn ProbabilityOracle = match &a.transform {
        Some(t) => {
            transformed = TransformedOracle {
                inner: &model,
                transform: Transform::parse(t)?,
                shape: secret.image_shape,
            };
            &transformed
        }
        None => &model,
    };
    let v = blackbox_verify(oracle, &secret, budget, &opts)?;
    finish_verdict(&v, &a.owned)
}

fn cmd_sweep(ctx: &Ctx, a: &SweepArgs) -> Result<ExitCode> {
    let secret = load_secret(&ctx.secret_path(&a.secret)?)?;
    let model = load_model(&a.suspect_endpoint)?;
    let n = secret.marked_images.len();
    let budgets: Vec<usize> = if a.budgets == "all" {
        (1..=n).collect()
    } else {
        a.budgets
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad budget `{s}`")))
            })
            .collect::<Result<_>>()?
    };
    let points = blackbox_sample_sweep(&model, &secret, &budgets, &bb_options(ctx, a.order_seed))?;
    if let Some(out) = &a.out {
        let mut w =
            csv::Writer::from_path(out).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        w.write_record(["budget", "statistic", "decision"])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for p in &points {
            w.write_record([
                p.budget.to_string(),
                p.statistic.to_string(),
                p.decision.to_string(),
            ])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    println!("{}", render::sweep_table(&points));
    match smallest_sufficient_budget(&points) {
        Some(b) => println!("smallest sufficient budget: {b} of {n} pairs"),
        None => println!("no sufficient budget among the swept values ({n} pairs)"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_extract(ctx: &Ctx, a: &ExtractArgs) -> Result<ExitCode> {
    let victim = load_model(&a.victim)?;
    let m = ctx.manifest.as_ref();
    let pool: Vec<Vec<f32>> = match (&a.pool, a.toy_pool) {
        (Some(p), _) => {
            load_dataset(p, DatasetFormat::parse(&a.pool_format)?, Split::Train)?.images
        }
        (None, Some(count)) => {
            let cfg = match m.map(|m| &m.dataset) {
                Some(DatasetSpec::Toy(c)) => c.clone(),
                _ => ToyTaskConfig {
                    seed: a.data.toy_seed.unwrap_or(0),
                    ..ToyTaskConfig::default()
                },
            };
            cfg.transfer_pool(count, a.pool_seed)?
        }
        (None, None) => match m.and_then(|m| m.extraction.as_ref()) {
            Some(x) => match (&x.pool, &m.expect("manifest").dataset) {
                (PoolSpec::Toy { count, seed }, DatasetSpec::Toy(cfg)) => {
                    cfg.transfer_pool(*count, *seed)?
                }
                (
                    PoolSpec::Files {
                        path,
                        format,
                        split,
                    },
                    _,
                ) => load_dataset(path, *format, *split)?.images,
                _ => {
                    return Err(Error::InvalidArgument(
                        "manifest pool needs a toy dataset".into(),
                    ))
                }
            },
            None => return Err(Error::InvalidArgument("give --pool or --toy-pool".into())),
        },
    };
    if a.budget + a.held_out > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "pool has {} images, budget + held-out needs {}",
            pool.len(),
            a.budget + a.held_out
        )));
    }
    let shape = victim.network.input_shape();
    let tdir = a.out_dir.join("transfer");
    let transfer = build_transfer_set(&victim, &pool, shape, a.budget, a.pool_seed, Some(&tdir))?;
    transfer.save(&tdir)?;
    let mode = match a.mode.as_str() {
        "soft" => DistillMode::Soft,
        "hard" => DistillMode::HardLabel,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown distillation mode `{other}`"
            )))
        }
    };
    let spec = model_spec(
        m.and_then(|m| m.extraction.as_ref()).map(|x| &x.surrogate),
        &a.hyper,
    )?;
    let surrogate = train_surrogate(
        &transfer,
        spec.architecture,
        &spec.hyper,
        mode,
        ctx.policy,
        ctx.profile,
    )?;
    let out = a.out_dir.join("surrogate.rmdl");
    surrogate.save(&out)?;
    println!(
        "queried victim {} times; surrogate -> {}",
        transfer.len(),
        out.display()
    );
    if a.secret.is_some() || m.is_some() {
        let secret = load_secret(&ctx.secret_path(&a.secret)?)?;
        let marker = load_model(&ctx.marker_path(&a.marker)?)?;
        let test = ctx.test_data(&a.data)?;
        let used: std::collections::BTreeSet<usize> =
            transfer.pool_indices.iter().copied().collect();
        let held: Vec<Vec<f32>> = (0..pool.len())
            .filter(|i| !used.contains(i))
            .take(a.held_out)
            .map(|i| pool[i].clone())
            .collect();
        let (wb, bb) = match m {
            Some(m) => (m.verification.whitebox(), m.verification.blackbox()),
            None => Default::default(),
        };
        let report = extraction_survival_report(
            &victim,
            &secret,
            &surrogate,
            &marker,
            &test,
            Some(&held),
            &wb,
            &bb,
            ctx.policy,
        )?;
        let path = a.out_dir.join("survival.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| {
            Error::Io {
                path: path.clone(),
                source: e,
            }
        })?;
        println!("{}", render::survival_table(&report));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(ctx: &Ctx, a: &CheckArgs) -> Result<ExitCode> {
    let clean = load_model(&a.clean)?;
    let marked = load_model(&a.marked)?;
    let mut refs = Vec::new();
    for r in &a.references {
        let (name, path) = r
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("reference `{r}` is not NAME=PATH")))?;
        refs.push((name.to_string(), load_model(Path::new(path))?));
    }
    let secret: WatermarkSecret = load_secret(&ctx.secret_path(&a.secret)?)?;
    let marker = load_model(&ctx.marker_path(&a.marker)?)?;
    let test = ctx.test_data(&a.data)?;
    let m = ctx.manifest.as_ref();
    let mut config = CheckConfig {
        verification: m.map(|m| m.verification.clone()).unwrap_or_default(),
        stealth: m.map(|m| m.stealth.clone()).unwrap_or_default(),
        robustness: m.map(|m| m.robustness.clone()).unwrap_or_default(),
    };
    if let Some(p) = a.min_psnr {
        config.stealth.min_psnr_db = p;
    }
    if a.max_linf.is_some() {
        config.stealth.max_linf = a.max_linf;
    }
    for t in &a.transforms {
        config.robustness.push(Transform::parse(t)?);
    }
    let ref_views: Vec<(&str, &TrainedModel)> = refs.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let report = check_requirements(
        &clean, &marked, &ref_views, &secret, &marker, &test, &config, ctx.policy,
    )?;
    if a.owned.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{}", render::requirement_table(&report));
    }
    let owned = report.effectiveness.flag.is_none();
    Ok(if a.owned.assert_owned && !owned {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_run(ctx: &Ctx, a: &RunArgs) -> Result<ExitCode> {
    if let Some(path) = &a.init {
        ExperimentManifest::desk(a.seed, &a.output_dir).save(path)?;
        println!("wrote {}", path.display());
        return Ok(ExitCode::SUCCESS);
    }
    let manifest = ctx
        .manifest
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("run needs --manifest (or --init)".into()))?;
    let summary = run_experiment(
        manifest,
        RunOptions {
            policy: ctx.policy,
            profile: ctx.profile,
            force: a.force,
            verbose: true,
        },
    )?;
    eprintln!(
        "stages run: {}; loaded from checkpoints: {}",
        summary.executed.len(),
        summary.skipped.len()
    );
    render::print_results(&summary.results);
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(ctx: &Ctx, a: &ReportArgs) -> Result<ExitCode> {
    let dir = a
        .dir
        .clone()
        .or_else(|| ctx.manifest.as_ref().map(|m| m.output_dir.clone()))
        .ok_or_else(|| Error::InvalidArgument("report needs --dir or --manifest".into()))?;
    let results = ExperimentResults::load(&dir.join(RESULTS_FILE))?;
    bundle::write_bundle(&results, &dir.join("report"))?;
    match a.format.as_str() {
        "json" => print!("{}", bundle::report_json(&results)?),
        "csv" => {
            print!("{}", bundle::effectiveness_table(&results).to_csv()?);
            print!("{}", bundle::integrity_table(&results).to_csv()?);
            if let Some(t) = bundle::extraction_table(&results) {
                print!("{}", t.to_csv()?);
            }
        }
        "table" => render::print_results(&results),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown report format `{other}`"
            )))
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let profile = match cli.profile.as_deref() {
        Some("fast") => ComputeProfile::Fast,
        Some(_) => ComputeProfile::Deterministic,
        None => ComputeProfile::from_env(),
    };
    let ctx = Ctx {
        policy: if cli.sequential {
            ExecPolicy::Sequential
        } else {
            ExecPolicy::Parallel
        },
        profile,
        manifest: cli
            .manifest
            .as_deref()
            .map(ExperimentManifest::load)
            .transpose()?,
    };
    match &cli.command {
        Command::Mark(a) => cmd_mark(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::VerifyWb(a) => cmd_verify_wb(&ctx, a),
        Command::VerifyBb(a) => cmd_verify_bb(&ctx, a),
        Command::SweepBb(a) => cmd_sweep(&ctx, a),
        Command::Extract(a) => cmd_extract(&ctx, a),
        Command::Check(a) => cmd_check(&ctx, a),
        Command::Run(a) => cmd_run(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
