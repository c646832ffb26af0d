use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dinterp::datasets::EnumerableDataset;
use dinterp::eval::load_reports;
use dinterp::predictor::{load_checkpoint, NetConfig, TrainableParams, Variant};
use dinterp::rng::{derive_seed, seeded};
use dinterp::sampler::SampleFile;

const CONFIG: &str =
    "seed = 5\nlength = 3\ndata_size = 3\nsteps = 30\nbatch_size = 8\nembed_dim = 8\n\
                      hidden_dim = 16\nnfe = 16\nchains = 4000\ndump_chains = 2\n";

fn dinterp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dinterp"))
        .args(args)
        .current_dir(dir)
        .env_remove("DI_RUN_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = dinterp(args, dir);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str], dir: &Path) -> String {
    let out = dinterp(args, dir);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), CONFIG).unwrap();
    ok(
        &["gen-dataset", "--config", "run.toml", "--out", "data"],
        tmp.path(),
    );
    tmp
}

#[test]
fn gen_dataset_writes_a_loadable_dataset_and_resolved_config() {
    let tmp = workspace();
    let ds = EnumerableDataset::load(tmp.path().join("data/dataset.jsonl")).unwrap();
    assert_eq!(ds.len(), 27);
    let config = fs::read_to_string(tmp.path().join("data/config.toml")).unwrap();
    assert!(config.contains("seed = 5"));
    assert!(tmp.path().join("data/meta.json").exists());
}

#[test]
fn oracle_samples_score_well() {
    let tmp = workspace();
    let out = ok(
        &[
            "sample",
            "--config",
            "run.toml",
            "--oracle",
            "data/dataset.jsonl",
            "--out",
            "s",
        ],
        tmp.path(),
    );
    assert!(out.contains("residual"), "{out}");
    let text = fs::read_to_string(tmp.path().join("s/samples.txt")).unwrap();
    let file = SampleFile::parse(&text).unwrap();
    assert_eq!(file.samples.len(), 4000);
    assert!(tmp.path().join("s/chains/chain_0001.jsonl").exists());
    assert!(!tmp.path().join("s/chains/chain_0002.jsonl").exists());
    let curve = fs::read_to_string(tmp.path().join("s/mask_curve.jsonl")).unwrap();
    assert_eq!(curve.lines().count(), 18);

    ok(
        &[
            "eval",
            "--config",
            "run.toml",
            "--samples",
            "s/samples.txt",
            "--dataset",
            "data/dataset.jsonl",
            "--out",
            "e",
        ],
        tmp.path(),
    );
    let reports = load_reports(&tmp.path().join("e/report.jsonl")).unwrap();
    let tv = reports[0].tv.unwrap();
    assert!(tv < 0.05, "tv {tv}");
    assert_eq!(reports[0].residual_mask_fraction, Some(0.0));
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let tmp = workspace();
    ok(
        &[
            "train",
            "--config",
            "run.toml",
            "--dataset",
            "data/dataset.jsonl",
            "--steps",
            "0",
            "--out",
            "m",
        ],
        tmp.path(),
    );
    let loaded = load_checkpoint(tmp.path().join("m/checkpoint.bin")).unwrap();
    let ds = EnumerableDataset::load(tmp.path().join("data/dataset.jsonl")).unwrap();
    let config = NetConfig {
        variant: Variant::Itm,
        embed_dim: 8,
        hidden_dim: 16,
    };
    let init = TrainableParams::init(
        config,
        ds.layout().clone(),
        0,
        &mut seeded(derive_seed(5, 0)),
    )
    .unwrap();
    assert_eq!(loaded, init);
    assert_eq!(
        fs::read_to_string(tmp.path().join("m/train_log.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn training_logs_every_step_and_checkpoint_samples() {
    let tmp = workspace();
    ok(
        &[
            "train",
            "--config",
            "run.toml",
            "--dataset",
            "data/dataset.jsonl",
            "--out",
            "m",
        ],
        tmp.path(),
    );
    let log = fs::read_to_string(tmp.path().join("m/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 30);
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["step"], 30);
    ok(
        &[
            "sample",
            "--config",
            "run.toml",
            "--checkpoint",
            "m/checkpoint.bin",
            "--n",
            "50",
            "--out",
            "s",
        ],
        tmp.path(),
    );
    let text = fs::read_to_string(tmp.path().join("s/samples.txt")).unwrap();
    assert_eq!(SampleFile::parse(&text).unwrap().samples.len(), 50);
}

#[test]
fn sweep_writes_one_report_per_point_and_resumes() {
    let tmp = workspace();
    let args = [
        "sweep",
        "--config",
        "run.toml",
        "--oracle",
        "data/dataset.jsonl",
        "--n",
        "500",
        "--out",
        "sw",
    ];
    let table = ok(&args, tmp.path());
    let path = tmp.path().join("sw/reports.jsonl");
    let reports = load_reports(&path).unwrap();
    assert_eq!(
        reports.iter().map(|r| r.nfe).collect::<Vec<_>>(),
        vec![4, 16, 64, 256]
    );
    assert!(reports.iter().all(|r| r.error.is_none() && r.tv.is_some()));
    assert_eq!(
        fs::read_to_string(tmp.path().join("sw/summary.txt")).unwrap(),
        table
    );

    // an interrupted sweep keeps its finished points and redoes the rest
    let full = fs::read_to_string(&path).unwrap();
    let partial: String = full.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(&path, partial).unwrap();
    ok(&args, tmp.path());
    assert_eq!(fs::read_to_string(&path).unwrap(), full);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = workspace();
    for out in ["a", "b"] {
        ok(
            &[
                "sample",
                "--config",
                "run.toml",
                "--oracle",
                "data/dataset.jsonl",
                "--kind",
                "mgm",
                "--nfe",
                "3",
                "--out",
                out,
            ],
            tmp.path(),
        );
    }
    for file in [
        "samples.txt",
        "config.toml",
        "mask_curve.jsonl",
        "chains/chain_0000.jsonl",
    ] {
        let a = fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn run_directory_defaults_under_the_environment_root() {
    let tmp = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_dinterp"))
        .args(["gen-dataset", "--config", "run.toml"])
        .current_dir(tmp.path())
        .env("DI_RUN_DIR", "elsewhere")
        .output()
        .unwrap();
    assert!(out.status.success());
    let runs: Vec<_> = fs::read_dir(tmp.path().join("elsewhere"))
        .unwrap()
        .collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].as_ref().unwrap().file_name().into_string().unwrap();
    assert!(name.starts_with("gen-dataset-"), "{name}");
}

#[test]
fn invalid_configs_name_the_offending_field() {
    let tmp = workspace();
    fs::write(tmp.path().join("bad.toml"), "top_p = 1.5\n").unwrap();
    assert!(err(
        &["sample", "--config", "bad.toml", "--out", "x"],
        tmp.path()
    )
    .contains("top_p"));
    fs::write(tmp.path().join("typo.toml"), "nfee = 4\n").unwrap();
    assert!(err(
        &["sample", "--config", "typo.toml", "--out", "x"],
        tmp.path()
    )
    .contains("nfee"));
    let msg = err(
        &[
            "sample",
            "--oracle",
            "data/dataset.jsonl",
            "--kind",
            "mgm",
            "--nfe",
            "4",
            "--out",
            "x",
        ],
        tmp.path(),
    );
    assert!(msg.contains("nfe"), "{msg}");
    assert!(err(
        &[
            "train",
            "--dataset",
            "data/dataset.jsonl",
            "--steps",
            "1",
            "--jobs",
            "0"
        ],
        tmp.path()
    )
    .contains("jobs"));
}

#[test]
fn missing_inputs_fail_cleanly() {
    let tmp = workspace();
    let msg = err(
        &["train", "--dataset", "nope.jsonl", "--out", "x"],
        tmp.path(),
    );
    assert!(
        msg.starts_with("error:") && msg.contains("nope.jsonl"),
        "{msg}"
    );
    assert!(err(&["sample", "--out", "x"], tmp.path()).contains("--checkpoint"));
    assert!(err(&["eval", "--out", "x"], tmp.path()).contains("--samples"));
    assert!(err(
        &["sample", "--checkpoint", "data/dataset.jsonl", "--out", "x"],
        tmp.path()
    )
    .contains("checkpoint"));
    assert!(err(&["gen-dataset", "--config", "absent.toml"], tmp.path()).contains("absent.toml"));
}
