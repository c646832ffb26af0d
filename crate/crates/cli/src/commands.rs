use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use dinterp::datasets::{build, EnumerableDataset};
use dinterp::eval::{render_table, sweep as run_sweep, MetricsReport, SweepTask};
use dinterp::loss::Trainer;
use dinterp::predictor::{
    load_checkpoint, save_checkpoint, Cond, OraclePredictor, Predictor, TrainableParams,
};
use dinterp::rng::{derive_seed, seeded, stream};
use dinterp::sampler::{Conditioning, Observed, SampleFile, Sampler};
use dinterp::TokenSeq;

use crate::config::RunConfig;

const RUN_ROOT_ENV: &str = "DI_RUN_DIR";

/// Creates the run directory and writes the resolved config plus a
/// metadata file holding everything that varies between reruns.
pub fn prepare_run_dir(
    command: &str,
    out: Option<&Path>,
    config: &RunConfig,
) -> anyhow::Result<PathBuf> {
    config.train_config()?;
    config.sampler_config()?;
    config.sweep_grid()?;
    let resolved = config.to_toml()?;
    let now = chrono::Utc::now();
    let dir = match out {
        Some(dir) => dir.to_path_buf(),
        None => {
            let root =
                std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(format!("{command}-{}", now.format("%Y%m%d-%H%M%S-%3f")))
        }
    };
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    fs::write(dir.join("config.toml"), resolved)?;
    let meta = serde_json::json!({
        "command": command,
        "started": now.to_rfc3339(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(dir.join("meta.json"), format!("{meta:#}\n"))?;
    Ok(dir)
}

fn load_dataset(path: &Path) -> anyhow::Result<EnumerableDataset> {
    EnumerableDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// The `--oracle` dataset, else `dataset`.
fn reference_dataset(config: &RunConfig) -> anyhow::Result<EnumerableDataset> {
    match (&config.oracle, &config.dataset) {
        (Some(path), _) | (None, Some(path)) => load_dataset(path),
        (None, None) => bail!("a dataset is required: pass `--dataset` or `--oracle`"),
    }
}

fn load_predictor(
    config: &RunConfig,
) -> anyhow::Result<(Box<dyn Predictor>, Option<(usize, usize)>)> {
    if let Some(path) = &config.oracle {
        let ds = load_dataset(path)?;
        let grid = ds.grid();
        return Ok((Box::new(OraclePredictor::new(Arc::new(ds))), grid));
    }
    let path = config
        .checkpoint
        .as_ref()
        .context("a predictor is required: pass `--checkpoint` or `--oracle <dataset>`")?;
    let params =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((Box::new(params), None))
}

fn conditioning(config: &RunConfig, predictor: &dyn Predictor) -> anyhow::Result<Conditioning> {
    let cond = config.class.map_or(Cond::Null, Cond::Class);
    let observed = match &config.condition_on {
        None => None,
        Some(name) => {
            let segment = predictor.layout().segment_index(name).with_context(|| {
                format!("invalid config `condition_on`: no segment named `{name}`")
            })?;
            Some(Observed {
                segment,
                tokens: TokenSeq::new(config.observed.clone()),
            })
        }
    };
    Ok(Conditioning { cond, observed })
}

pub fn gen_dataset(config: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let spec = config.dataset_spec()?;
    let ds = build(&spec, &mut seeded(config.seed))?;
    let path = dir.join("dataset.jsonl");
    ds.save(&path)?;
    println!(
        "{} dataset: {} sequences of length {}{} -> {}",
        ds.kind(),
        ds.len(),
        ds.seq_len(),
        if ds.approximate() { " (truncated)" } else { "" },
        path.display()
    );
    Ok(())
}

pub fn train(config: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let path = config.dataset.as_ref().context("train needs `--dataset`")?;
    let ds = load_dataset(path)?;
    let params = TrainableParams::init(
        config.net_config(),
        ds.layout().clone(),
        ds.num_classes(),
        &mut seeded(derive_seed(config.seed, 0)),
    )?;
    let mut trainer = Trainer::new(params, config.train_config()?, config.schedule.clone())?;
    let mut log = std::io::BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
    let mut rng = seeded(derive_seed(config.seed, 1));
    let mut last = None;
    trainer.fit(&ds, &mut rng, |record| {
        writeln!(
            log,
            "{}",
            serde_json::to_string(record).expect("records serialize")
        )?;
        last = Some(record.clone());
        Ok(())
    })?;
    log.flush()?;
    let ckpt = dir.join("checkpoint.bin");
    save_checkpoint(&trainer.params, &ckpt)?;
    match last {
        Some(r) => println!(
            "trained {} steps, final loss {:.6} -> {}",
            r.step,
            r.loss,
            ckpt.display()
        ),
        None => println!(
            "no training steps; initial parameters -> {}",
            ckpt.display()
        ),
    }
    Ok(())
}

pub fn sample(config: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let (predictor, grid) = load_predictor(config)?;
    let sampler_config = config.sampler_config()?;
    let sampler = Sampler::new(predictor.as_ref(), sampler_config.clone())?;
    let ctx = conditioning(config, predictor.as_ref())?;
    let batch = sampler.run_batch(config.chains, |_| ctx.clone())?;
    let file = SampleFile {
        layout: predictor.layout().clone(),
        grid,
        sampler: Some(sampler_config.clone()),
        samples: batch.samples.clone(),
    };
    fs::write(dir.join("samples.txt"), file.to_text())?;

    let chains_dir = dir.join("chains");
    fs::create_dir_all(&chains_dir)?;
    for i in 0..config.dump_chains.min(config.chains) {
        let chain = sampler.sample_chain(&ctx, &mut stream(sampler_config.seed, i as u64))?;
        fs::write(
            chains_dir.join(format!("chain_{i:04}.jsonl")),
            chain.to_jsonl(),
        )?;
    }
    let mut curve = String::new();
    for (t, fraction) in batch.mask_fraction_curve() {
        curve.push_str(&serde_json::json!({ "t": t, "masked_fraction": fraction }).to_string());
        curve.push('\n');
    }
    fs::write(dir.join("mask_curve.jsonl"), curve)?;
    println!(
        "{} chains ({} nfe={}): mean pre-finalize residual mask fraction {:.6} -> {}",
        config.chains,
        sampler_config.kind,
        sampler_config.nfe,
        batch.mean_residual_fraction(),
        dir.join("samples.txt").display()
    );
    Ok(())
}

pub fn eval(config: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let path = config.samples.as_ref().context("eval needs `--samples`")?;
    let text =
        fs::read_to_string(path).with_context(|| format!("reading samples {}", path.display()))?;
    let file =
        SampleFile::parse(&text).with_context(|| format!("parsing samples {}", path.display()))?;
    let ds = reference_dataset(config)?;
    if file.layout != *ds.layout() {
        bail!("samples and dataset have different layouts");
    }
    let sampler_config = match file.sampler {
        Some(c) => c,
        None => config.sampler_config()?,
    };
    let mut report = MetricsReport::new(0, &sampler_config, file.samples.len())
        .with_distribution(&file.samples, &ds)?;
    let residual: usize = file
        .samples
        .iter()
        .map(|s| {
            (0..s.len())
                .filter(|&l| s[l] == ds.layout().mask_id_at(l))
                .count()
        })
        .sum();
    report.residual_mask_fraction =
        Some(residual as f64 / (file.samples.len() * ds.seq_len()) as f64);
    if let Some(c) = config.class {
        let mass: f64 = file.samples.iter().map(|s| ds.class_posterior(s, c)).sum();
        report.class_mass = Some(mass / file.samples.len() as f64);
    }
    fs::write(dir.join("report.jsonl"), report.to_json_line() + "\n")?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    Ok(())
}

pub fn sweep(config: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let (predictor, _) = load_predictor(config)?;
    let ds = reference_dataset(config)?;
    let base = config.sampler_config()?;
    let task = SweepTask {
        chains: config.chains,
        class: config.class,
    };
    let reports = run_sweep(
        &config.sweep_grid()?,
        &base,
        predictor.as_ref(),
        &ds,
        &task,
        Some(&dir.join("reports.jsonl")),
    )?;
    let table = render_table(&reports);
    fs::write(dir.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}
