use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use reidlab::config::{parse_json, RunConfig};
use reidlab::data::{Dataset, DatasetSpec};
use reidlab::eval::{emit_report, evaluate, CmcResult};
use reidlab::gate::{MaskStrategy, ReidModel};
use reidlab::pipeline::ablation::{AblationRunner, Preset, Source};
use reidlab::pipeline::train::{build_model, log_csv};
use reidlab::pipeline::{train_task, Task, TrainJob};
use reidlab::verify::{run_suite, Suite};
use reidlab::weights::{LoadPolicy, WeightStore};
use reidlab::Mode;
use serde_json::json;

use crate::RunOverrides;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| reidlab::Error::io(path, e).into())
}

fn load_config(path: &Path, run: &RunOverrides) -> Result<RunConfig> {
    let mut cfg: RunConfig = parse_json(&read_text(path)?)?;
    if let Some(r) = &run.runs {
        cfg.paths.runs = r.clone();
    }
    if let Some(t) = &run.tag {
        cfg.paths.tag = t.clone();
    }
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Creates `runs/<timestamp>-<tag>/` and writes the resolved config into it.
fn open_run(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = cfg.paths.runs.join(format!("{stamp}-{}", cfg.paths.tag));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| reidlab::Error::io(&dir, e))?;
    cfg.save(dir.join("config.json"))?;
    log::info!("run directory {}", dir.display());
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| reidlab::Error::io(path, e).into())
}

fn write_cmc(dir: &Path, cmc: &CmcResult) -> Result<()> {
    emit_report(cmc, dir.join("cmc.csv"), Some(&dir.join("cmc_plot.dat")))?;
    Ok(())
}

fn print_cmc(cmc: &CmcResult) {
    let parts: Vec<String> = cmc.ranks.iter().zip(&cmc.mean).map(|(r, m)| format!("rank{r} {:.1}%", 100.0 * m)).collect();
    println!("{}", parts.join("  "));
}

/// Mask trace of the first held-out image, for inspection.
fn dump_masks(dir: &Path, model: &ReidModel, test: &Dataset) -> Result<()> {
    if test.is_empty() {
        return Ok(());
    }
    let (_, trace) = model.extract_feature(&test.image(0), Mode::Eval)?;
    write(&dir.join("masks.csv"), &trace.to_csv())
}

pub fn gen_data(spec_path: &Path, out: &Path, force: bool) -> Result<()> {
    let spec: DatasetSpec = parse_json(&read_text(spec_path)?)?;
    spec.validate()?;
    let t = Instant::now();
    let ds = Dataset::generate(&spec)?;
    ds.save(out, force)?;
    println!(
        "wrote {} images of {} identities to {} in {:.1}s",
        ds.len(),
        ds.num_identities(),
        out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn train(
    config: &Path,
    task: Task,
    from: Option<PathBuf>,
    stages: Option<usize>,
    mask: Option<MaskStrategy>,
    run: &RunOverrides,
) -> Result<()> {
    let mut cfg = load_config(config, run)?;
    if let Some(f) = from {
        cfg.paths.source_weights = Some(f);
    }
    if let Some(s) = stages {
        cfg.train.reid.keep_stages = s;
    }
    if let Some(m) = mask {
        cfg.gate.strategy = m;
    }
    if task != Task::Reid && cfg.paths.source_weights.is_some() {
        bail!(reidlab::Error::Config {
            key: "paths.source_weights".into(),
            reason: "weights are only transferred into re-id training".into(),
        });
    }
    cfg.validate()?;
    let source = match &cfg.paths.source_weights {
        Some(p) => Some(WeightStore::load(p)?),
        None => None,
    };
    let (data, test) = match task {
        Task::Classify => (cfg.source_dataset(Source::Classify)?, None),
        Task::Attr => (cfg.source_dataset(Source::Attr)?, None),
        Task::Reid => {
            let (train, test) = cfg.reid_split()?;
            (train, Some(test))
        }
    };
    let dir = open_run(&cfg)?;
    let train_cfg = if task == Task::Reid { &cfg.train.reid } else { &cfg.train.source };
    let job = TrainJob {
        task,
        train: train_cfg,
        backbone: &cfg.backbone,
        gate: &cfg.gate,
        seed: cfg.seed,
        source: source.as_ref(),
        run_dir: Some(&dir),
    };
    let t = Instant::now();
    let out = train_task(&job, &data)?;
    out.weights().save(dir.join("weights.rtlw"))?;
    write(&dir.join("train_log.csv"), &log_csv(&out.log))?;
    let last = out.log.last().context("training produced no epochs")?;
    let mut metrics = json!({
        "task": task.as_str(),
        "epochs": out.log.len(),
        "final_train_loss": last.train_loss,
        "final_val_loss": last.val_loss,
        "train_seconds": t.elapsed().as_secs_f64(),
    });
    if let Some(report) = &out.load_report {
        metrics["transfer"] = serde_json::to_value(report)?;
        log::info!("transferred {} tensors, {} left at init", report.copied.len(), report.untouched.len());
    }
    if let (Some(test), Some(model)) = (test, out.model.as_reid()) {
        let cmc = evaluate(model, &test, &cfg.eval)?;
        write_cmc(&dir, &cmc)?;
        dump_masks(&dir, model, &test)?;
        print_cmc(&cmc);
        metrics["cmc"] = serde_json::to_value(&cmc)?;
    }
    write(&dir.join("metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
    println!("{}", dir.display());
    Ok(())
}

pub fn ablate(config: &Path, preset: Preset, run: &RunOverrides) -> Result<()> {
    let cfg = load_config(config, run)?;
    cfg.validate()?;
    let data = cfg.ablation_data()?;
    let dir = open_run(&cfg)?;
    let t = Instant::now();
    let mut runner = AblationRunner::new(cfg.ablation_settings(), &data)?;
    let table = runner.run(preset)?;
    write(&dir.join("table.csv"), &table.to_csv())?;
    write(&dir.join("table.md"), &table.to_markdown())?;
    write(&dir.join("results.json"), &serde_json::to_string_pretty(&table)?)?;
    println!("{}", table.to_markdown());
    println!("{} ({:.0}s)", dir.display(), t.elapsed().as_secs_f64());
    Ok(())
}

pub fn eval(config: &Path, weights: &Path, run: &RunOverrides) -> Result<()> {
    let cfg = load_config(config, run)?;
    cfg.validate()?;
    let store = WeightStore::load(weights)?;
    let (train, test) = cfg.reid_split()?;
    let job = TrainJob {
        task: Task::Reid,
        train: &cfg.train.reid,
        backbone: &cfg.backbone,
        gate: &cfg.gate,
        seed: cfg.seed,
        source: None,
        run_dir: None,
    };
    let mut model = build_model(&job, &train)?;
    store.apply(&mut model, LoadPolicy::Strict)?;
    let model = model.as_reid().expect("re-id job builds a re-id model");
    let dir = open_run(&cfg)?;
    let cmc = evaluate(model, &test, &cfg.eval)?;
    write_cmc(&dir, &cmc)?;
    dump_masks(&dir, model, &test)?;
    write(&dir.join("metrics.json"), &serde_json::to_string_pretty(&json!({ "weights": weights, "cmc": cmc }))?)?;
    print_cmc(&cmc);
    println!("{}", dir.display());
    Ok(())
}

pub fn check(suite: Suite, seed: u64) -> Result<()> {
    let t = Instant::now();
    let report = run_suite(suite, seed)?;
    print!("{report}");
    println!("{} suite finished in {:.1}s", suite.as_str(), t.elapsed().as_secs_f64());
    if !report.passed() {
        bail!("{} suite failed", suite.as_str());
    }
    Ok(())
}
