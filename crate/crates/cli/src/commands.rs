use std::fs;
use std::path::{Path, PathBuf};

use pirt_core::check::{run_suite, ParamCheck, SEEDS};
use pirt_core::retrieval::{load_embeddings, save_embeddings};
use pirt_core::synth::{save_dataset, Split};
use pirt_core::train::{ablate as run_ablation, embed_samples, evaluate_embeddings, load_model, train_to_end, Axis, Checkpoint, RunConfig, Trainer};
use pirt_core::{PirtError, Result};

use crate::Common;

/// Config file (if any) then `--set` overrides over the defaults.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| PirtError::io(format!("reading {}", path.display()), e))?;
        config.apply(&text)?;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PirtError::Config(format!("--set expects key=value, got {kv:?}")))?;
        config.set(k.trim(), v)?;
    }
    Ok(config)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| PirtError::Config("this command needs --out <dir>".into()))?;
    fs::create_dir_all(&out).map_err(|e| PirtError::io(format!("creating {}", out.display()), e))?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| PirtError::io(format!("writing {}", path.display()), e))
}

pub fn gen_data(common: &Common) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(seed) = common.seed {
        config.synth.seed = seed;
    }
    let out = out_dir(common)?;
    let dataset = pirt_core::synth::generate_dataset(&config.synth)?;
    save_dataset(&dataset, &out)?;
    let count = |s| dataset.split(s).len();
    println!(
        "wrote {} images ({} train, {} query, {} gallery) to {}",
        dataset.samples.len(),
        count(Split::Train),
        count(Split::Query),
        count(Split::Gallery),
        out.display()
    );
    Ok(())
}

pub fn train(common: &Common, data: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let out = out_dir(common)?;
    let mut trainer = match resume {
        Some(path) => {
            let checkpoint = Checkpoint::load(&path)?;
            let mut config = RunConfig::parse(&checkpoint.config_text)?;
            if let Some(dir) = data {
                config.data_path = Some(dir);
            }
            Trainer::resume(&checkpoint, config.dataset()?)?
        }
        None => {
            let mut config = load_config(common)?;
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            if let Some(dir) = data {
                config.data_path = Some(dir);
            }
            config.validate()?;
            let dataset = config.dataset()?;
            Trainer::new(config, dataset)?
        }
    };
    write(&out.join("config.txt"), &trainer.config.to_text())?;
    let logs = train_to_end(&mut trainer, &out, |log| print!("{}", log.to_json_line()))?;
    println!(
        "trained {} epochs; checkpoint and metrics in {}",
        logs.len(),
        out.display()
    );
    Ok(())
}

pub fn embed(common: &Common, checkpoint: &Path, split: &str, data: Option<PathBuf>) -> Result<()> {
    let split = match split {
        "train" => Split::Train,
        "query" => Split::Query,
        "gallery" => Split::Gallery,
        other => return Err(PirtError::Config(format!("unknown split {other:?}; expected train, query or gallery"))),
    };
    let out = out_dir(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut config = RunConfig::parse(&ckpt.config_text)?;
    if let Some(dir) = data {
        config.data_path = Some(dir);
    }
    let dataset = config.dataset()?;
    if (dataset.config.height, dataset.config.width) != (ckpt.model.image_h, ckpt.model.image_w) {
        return Err(PirtError::Config(format!(
            "checkpoint expects {}×{} images, dataset has {}×{}",
            ckpt.model.image_h, ckpt.model.image_w, dataset.config.height, dataset.config.width
        )));
    }
    let (model, mut store) = load_model(&ckpt)?;
    let samples = dataset.split(split);
    let records = embed_samples(&model, &mut store, &config.pose, &samples)?;
    save_embeddings(&out, &records)?;
    println!("embedded {} {split:?} images into {}", records.len(), out.display());
    Ok(())
}

pub fn eval(common: &Common, query: &Path, gallery: &Path) -> Result<()> {
    let config = load_config(common)?;
    let out = out_dir(common)?;
    let queries = load_embeddings(query)?;
    let gallery = load_embeddings(gallery)?;
    let report = evaluate_embeddings(&queries, &gallery, &config.matching)?;
    println!(
        "mAP {:.4}  CMC@1 {:.4}  CMC@5 {:.4}  CMC@10 {:.4}  ({} queries)",
        report.map,
        report.rank(1),
        report.rank(5),
        report.rank(10),
        report.n_queries
    );
    write(&out.join("report.csv"), &report.to_csv())?;
    write(&out.join("report.json"), &report.to_json())?;
    Ok(())
}

pub fn gradcheck(common: &Common) -> Result<()> {
    let check = ParamCheck::default();
    let rows = match common.seed {
        Some(seed) => pirt_core::check::suite()
            .iter()
            .map(|c| c.check(&[seed], &check))
            .collect::<Result<Vec<_>>>()?,
        None => run_suite(&check)?,
    };
    let seeds = common.seed.map_or(SEEDS.len(), |_| 1);
    let mut table = format!("{:<22} {:>12} {:>10}  status\n", "component", "max rel err", "tolerance");
    let mut csv = String::from("component,max_rel_error,tolerance,passed\n");
    for r in &rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        table += &format!("{:<22} {:>12.3e} {:>10.0e}  {status}\n", r.name, r.max_rel_error, r.tolerance);
        csv += &format!("{},{},{},{}\n", r.name, r.max_rel_error, r.tolerance, r.passed());
    }
    print!("{table}");
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).map_err(|e| PirtError::io(format!("creating {}", dir.display()), e))?;
        write(&dir.join("gradcheck.csv"), &csv)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(PirtError::Numeric(format!(
            "gradient check failed for {} over {seeds} seed(s)",
            failed.join(", ")
        )));
    }
    println!("all {} components pass over {seeds} seed(s)", rows.len());
    Ok(())
}

pub fn ablate(common: &Common, axis: &str, seeds: &[u64]) -> Result<()> {
    let axis: Axis = axis.parse()?;
    let config = load_config(common)?;
    config.validate()?;
    let out = out_dir(common)?;
    let dataset = config.dataset()?;
    let table = run_ablation(&config, &dataset, axis, seeds, |line| eprintln!("{line}"))?;
    print!("{}", table.to_text());
    write(&out.join("ablation.csv"), &table.to_csv())?;
    write(&out.join("ablation.txt"), &table.to_text())?;
    Ok(())
}
