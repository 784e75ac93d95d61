use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use radmark::dataset::toy::ToyTaskConfig;
use radmark::dataset::{save_dataset, DatasetFormat};
use radmark::harness::{DatasetSpec, ExperimentManifest, ExtractionSpec, ModelSpec, PoolSpec};
use radmark::nn::TrainConfig;

fn radmark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radmark"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_task() -> ToyTaskConfig {
    ToyTaskConfig {
        classes: 4,
        train_per_class: 24,
        test_per_class: 8,
        size: 16,
        seed: 5,
        ..ToyTaskConfig::default()
    }
}

fn tiny_dataset(dir: &Path) -> PathBuf {
    let (train, test) = tiny_task().generate().unwrap();
    let root = dir.join("toy");
    save_dataset(&train, &root, DatasetFormat::Folder).unwrap();
    save_dataset(&test, &root, DatasetFormat::Folder).unwrap();
    root
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let o = radmark(&["verify-bb", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(code(&radmark(&["frobnicate"])), 2);
}

#[test]
fn help_exits_0() {
    let o = radmark(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "mark",
        "train",
        "verify-wb",
        "verify-bb",
        "sweep-bb",
        "extract",
        "check",
        "run",
        "report",
    ] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn missing_files_exit_2() {
    let o = radmark(&[
        "verify-bb",
        "--secret",
        "/nonexistent.rmrk",
        "--suspect-endpoint",
        "/nonexistent.rmdl",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn subcommands_chain_on_a_tiny_task() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = tiny_dataset(d);
    let (marker, adv, reference) = (
        d.join("marker.rmdl"),
        d.join("adv.rmdl"),
        d.join("ref.rmdl"),
    );
    let (secret, marked) = (d.join("s.rmrk"), d.join("marked.tar"));
    let common = ["--dataset", s(&data), "--format", "folder"];

    let mut args = vec!["train"];
    args.extend(common);
    args.extend(["--epochs", "3", "--seed", "1", "--out", s(&marker)]);
    let o = radmark(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let mut args = vec!["mark"];
    args.extend(common);
    args.extend([
        "--marker",
        s(&marker),
        "--wm-ratio",
        "0.25",
        "--steps",
        "10",
        "--out",
        s(&marked),
        "--secret",
        s(&secret),
    ]);
    let o = radmark(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sidecar = std::fs::read_to_string(d.join("marked.tar.radmark.json")).unwrap();
    assert!(sidecar.contains("secret_digest"));
    assert!(
        !sidecar.contains("vectors"),
        "sidecar must not carry carriers"
    );

    // The marked archive and the secret-substituted dataset train the same model.
    let mut args = vec!["train"];
    args.extend(common);
    args.extend([
        "--secret",
        s(&secret),
        "--epochs",
        "3",
        "--seed",
        "2",
        "--out",
        s(&adv),
    ]);
    assert_eq!(code(&radmark(&args)), 0);
    let via_archive = d.join("adv2.rmdl");
    let o = radmark(&[
        "train",
        "--dataset",
        s(&marked),
        "--epochs",
        "3",
        "--seed",
        "2",
        "--out",
        s(&via_archive),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = radmark::model::TrainedModel::load(&adv).unwrap();
    let b = radmark::model::TrainedModel::load(&via_archive).unwrap();
    assert_eq!(a.weights_digest(), b.weights_digest());

    let mut args = vec!["train"];
    args.extend(common);
    args.extend([
        "--arch",
        "desk_resnet",
        "--epochs",
        "2",
        "--seed",
        "3",
        "--out",
        s(&reference),
    ]);
    assert_eq!(code(&radmark(&args)), 0);

    let o = radmark(&[
        "verify-bb",
        "--secret",
        s(&secret),
        "--suspect-endpoint",
        s(&adv),
        "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["method"], "blackbox");
    let decided = v["decision"].as_bool().unwrap();
    let o = radmark(&[
        "verify-bb",
        "--secret",
        s(&secret),
        "--suspect-endpoint",
        s(&adv),
        "--assert-owned",
    ]);
    assert_eq!(code(&o), if decided { 0 } else { 1 });

    let o = radmark(&[
        "verify-bb",
        "--secret",
        s(&secret),
        "--suspect-endpoint",
        s(&adv),
        "--transform",
        "requantize:60",
        "--query-budget",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    for probe in ["marked", "test"] {
        let mut args = vec![
            "verify-wb",
            "--secret",
            s(&secret),
            "--suspect",
            s(&reference),
            "--marker",
            s(&marker),
        ];
        args.extend(["--probe", probe, "--json"]);
        args.extend(common);
        let o = radmark(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert!(v["statistic"].as_f64().unwrap() <= 0.0);
    }

    let csv_path = d.join("sweep.csv");
    let o = radmark(&[
        "sweep-bb",
        "--secret",
        s(&secret),
        "--suspect-endpoint",
        s(&adv),
        "--out",
        s(&csv_path),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 1 + 24, "one row per marked pair");
    let o = radmark(&[
        "sweep-bb",
        "--secret",
        s(&secret),
        "--suspect-endpoint",
        s(&adv),
        "--budgets",
        "5,3",
    ]);
    assert_eq!(code(&o), 2, "descending budgets are rejected");

    let reference_arg = format!("desk_resnet={}", s(&reference));
    let mut args = vec![
        "check",
        "--clean",
        s(&marker),
        "--marked",
        s(&adv),
        "--reference",
        &reference_arg,
    ];
    args.extend(["--secret", s(&secret), "--marker", s(&marker), "--json"]);
    args.extend(common);
    let o = radmark(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let u = &report["utility"];
    let gap = u["acc_clean"].as_f64().unwrap() - u["acc_marked"].as_f64().unwrap();
    assert_eq!(u["gap_pp"].as_f64().unwrap(), gap);
    assert_eq!(u["pass"].as_bool().unwrap(), gap <= 5.0);

    let pool_dir = d.join("pool");
    let pool = ToyTaskConfig {
        seed: 77,
        ..tiny_task()
    }
    .generate()
    .unwrap()
    .0;
    save_dataset(&pool, &pool_dir, DatasetFormat::Folder).unwrap();
    let out_dir = d.join("extract");
    let mut args = vec![
        "extract",
        "--victim",
        s(&adv),
        "--pool",
        s(&pool_dir),
        "--pool-format",
        "folder",
    ];
    args.extend([
        "--budget",
        "64",
        "--held-out",
        "16",
        "--epochs",
        "2",
        "--out-dir",
        s(&out_dir),
    ]);
    args.extend(["--secret", s(&secret), "--marker", s(&marker)]);
    args.extend(common);
    let o = radmark(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out_dir.join("surrogate.rmdl").exists());
    assert!(out_dir.join("transfer/responses.bin").exists());
    let survival: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("survival.json")).unwrap())
            .unwrap();
    assert!(survival["agreement"].as_f64().is_some());
}

fn tiny_manifest(out: &Path) -> ExperimentManifest {
    let hyper = |seed| TrainConfig {
        epochs: 2,
        lr_milestones: vec![],
        seed,
        ..TrainConfig::default()
    };
    let mut m = ExperimentManifest::desk(5, out);
    m.name = "tiny".into();
    m.dataset = DatasetSpec::Toy(tiny_task());
    m.wm_ratios = vec![0.1, 0.2];
    m.embed.steps = 5;
    m.marker = ModelSpec {
        hyper: hyper(1),
        ..m.marker
    };
    m.adversary = ModelSpec {
        hyper: hyper(2),
        ..m.adversary
    };
    m.references[0].hyper = hyper(3);
    m.extraction = Some(ExtractionSpec {
        surrogate: ModelSpec {
            hyper: hyper(4),
            ..m.adversary.clone()
        },
        pool: PoolSpec::Toy {
            count: 120,
            seed: 9,
        },
        budget: 96,
        held_out: 24,
        mode: Default::default(),
        seed: 6,
    });
    m.robustness = vec![radmark::harness::robustness::Transform::Rescale { factor: 0.5 }];
    m
}

#[test]
fn run_resumes_from_checkpoints_and_report_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let manifest = tmp.path().join("manifest.json");
    tiny_manifest(&out).save(&manifest).unwrap();

    let o = radmark(&["--manifest", s(&manifest), "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = std::fs::read(out.join("report/report.json")).unwrap();
    let first_csv = std::fs::read(out.join("report/effectiveness.csv")).unwrap();
    for f in [
        "integrity.csv",
        "requirements.csv",
        "sweep.csv",
        "extraction.csv",
    ] {
        assert!(out.join("report").join(f).exists(), "{f}");
    }
    let csv = String::from_utf8(first_csv.clone()).unwrap();
    assert_eq!(
        csv.lines().count(),
        1 + 1 + 2,
        "header, marker row, one row per ratio"
    );

    let o = radmark(&["--manifest", s(&manifest), "run"]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("stages run: 0"), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("report/report.json")).unwrap(),
        first
    );

    let o = radmark(&["report", "--dir", s(&out), "--format", "json"]);
    assert_eq!(code(&o), 0);
    assert_eq!(o.stdout, first);
    assert_eq!(
        std::fs::read(out.join("report/effectiveness.csv")).unwrap(),
        first_csv
    );

    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../../../docs/report.schema.json")).unwrap();
    let instance: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator
        .iter_errors(&instance)
        .map(|e| format!("{e} at {}", e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{errors:#?}");

    assert_eq!(
        code(&radmark(&["report", "--dir", s(&out), "--format", "table"])),
        0
    );
    assert_eq!(
        code(&radmark(&["report", "--dir", s(&out), "--format", "yaml"])),
        2
    );
}

#[test]
fn failed_stage_is_named_and_keeps_earlier_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut m = tiny_manifest(&out);
    m.wm_ratios = vec![0.2];
    // A pool too small for the requested budget fails only at extraction.
    m.extraction.as_mut().unwrap().pool = PoolSpec::Toy {
        count: 500,
        seed: 9,
    };
    m.extraction.as_mut().unwrap().budget = 2000;
    let manifest = tmp.path().join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&m).unwrap()).unwrap();

    let o = radmark(&["--manifest", s(&manifest), "run"]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("extraction pool smaller"),
        "{}",
        stderr(&o)
    );

    // A missing pool directory passes validation and only fails at the extraction stage.
    m.extraction.as_mut().unwrap().pool = PoolSpec::Files {
        path: tmp.path().join("missing-pool"),
        format: DatasetFormat::Folder,
        split: radmark::dataset::Split::Train,
    };
    std::fs::write(&manifest, serde_json::to_string_pretty(&m).unwrap()).unwrap();
    let o = radmark(&["--manifest", s(&manifest), "run"]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("stage `extract@wm0.2` failed"),
        "{}",
        stderr(&o)
    );
    let ledger = std::fs::read_to_string(out.join("checkpoints.json")).unwrap();
    for stage in ["marker", "mark@wm0.2", "train@wm0.2", "verify@wm0.2"] {
        assert!(
            ledger.contains(&format!("\"{stage}\"")),
            "{stage} missing from {ledger}"
        );
    }
    assert!(!ledger.contains("extract@"));
}

#[test]
fn init_writes_a_loadable_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.json");
    let o = radmark(&["run", "--init", s(&p), "--seed", "3"]);
    assert_eq!(code(&o), 0);
    let m = ExperimentManifest::load(&p).unwrap();
    assert_eq!(m.selection_seed, 3);
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    v["schema_version"] = 999.into();
    std::fs::write(&p, v.to_string()).unwrap();
    let o = radmark(&["--manifest", s(&p), "run"]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("unsupported schema version 999"),
        "{}",
        stderr(&o)
    );
}
