use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use duoprompt_core::checkpoint::{load_checkpoint, save_checkpoint};
use duoprompt_core::data::generate_dataset;
use duoprompt_core::metrics::Metrics;
use duoprompt_core::train::{self, evaluate_samples, write_report, CellSet};
use duoprompt_core::{Ablation, Cell, DatasetSpec, Domain, Model, ModelConfig, Split, Task, TrainConfig};

use crate::error::{CliError, Result};
use crate::settings::Resolver;
use crate::{AnalyzeArgs, EvalArgs, GenDataArgs, TrainArgs};

pub const CONFIG_ECHO: &str = "resolved_config.txt";

/// `train/test` sample counts per cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerCell {
    pub train: usize,
    pub test: usize,
}

impl FromStr for PerCell {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once('/').ok_or("expected TRAIN/TEST, e.g. 50/20")?;
        let n = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
        Ok(PerCell {
            train: n(a)?,
            test: n(b)?,
        })
    }
}

impl fmt::Display for PerCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.train, self.test)
    }
}

fn announce(r: &Resolver, command: &str, dir: Option<&Path>) -> Result<()> {
    let text = r.echo();
    eprint!("# {command}\n{text}");
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, format!("# {command}\n{text}")).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

fn parse_cells(list: &str) -> Result<Vec<Cell>> {
    Ok(list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Cell::from_str)
        .collect::<duoprompt_core::Result<_>>()?)
}

fn join_cells(cells: &[Cell]) -> String {
    cells.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref(), &["out", "seed", "per_cell", "image_size"])?;
    let out = r.required_path("out", a.out)?;
    let seed = r.seed(a.seed)?;
    let per_cell = r.value("per_cell", a.per_cell, PerCell { train: 50, test: 20 })?;
    let mut spec = DatasetSpec::uniform(seed, per_cell.train, per_cell.test);
    spec.image_size = r.value("image_size", a.image_size, spec.image_size)?;
    spec.validate()?;
    announce(&r, "gen-data", Some(&out))?;
    let manifest = generate_dataset(&spec, &out)?;
    eprintln!("{} samples, spec hash {}", manifest.total, manifest.spec_hash);
    println!("{}", out.join(duoprompt_core::data::MANIFEST_FILE).display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut r = Resolver::new(
        a.config.as_deref(),
        &[
            "data",
            "out",
            "seed",
            "steps",
            "lr",
            "per_task_batch",
            "eval_every",
            "image_size",
            "cells",
            "exclude_cells",
            "no_domain_prompts",
            "no_task_prompts_enc",
            "no_task_prompts_dec",
            "no_dis_loss",
        ],
    )?;
    let data = r.required_path("data", a.data)?;
    let out = r.required_path("out", a.out)?;
    let seed = r.seed(a.seed)?;
    let defaults = TrainConfig::default();
    let model_defaults = ModelConfig::default();
    let total_steps = r.value("steps", a.steps, defaults.total_steps)?;
    let base_lr = r.value("lr", a.lr, defaults.base_lr)?;
    let per_task_batch = r.value("per_task_batch", a.per_task_batch, defaults.per_task_batch)?;
    let eval_every = r.value("eval_every", a.eval_every, defaults.eval_every)?;
    let image_size = r.value("image_size", a.image_size, model_defaults.image_size)?;
    let cells = parse_cells(&r.value("cells", a.cells, join_cells(&defaults.cells))?)?;
    let flag_excludes = (!a.exclude_cell.is_empty()).then(|| a.exclude_cell.join(","));
    let excluded = parse_cells(&r.value("exclude_cells", flag_excludes, String::new())?)?;
    let ablation = Ablation {
        use_domain_prompts: !r.switch("no_domain_prompts", a.no_domain_prompts)?,
        use_task_prompts_enc: !r.switch("no_task_prompts_enc", a.no_task_prompts_enc)?,
        use_task_prompts_dec: !r.switch("no_task_prompts_dec", a.no_task_prompts_dec)?,
        use_dis_loss: !r.switch("no_dis_loss", a.no_dis_loss)?,
    };
    let cells: Vec<Cell> = cells.into_iter().filter(|c| !excluded.contains(c)).collect();
    let cfg = TrainConfig {
        total_steps,
        base_lr,
        per_task_batch,
        cells,
        ablation,
        eval_every,
        seed,
        ..defaults
    };
    cfg.validate()?;
    let model_cfg = ablation.apply(&ModelConfig {
        image_size,
        init_seed: seed,
        ..model_defaults
    });
    let mut model = Model::new(model_cfg)?;
    announce(&r, "train", Some(&out))?;

    let train_set = CellSet::load(&data, &cfg.cells, Split::Train)?;
    let test_set = if eval_every > 0 {
        Some(CellSet::load(&data, &Cell::all(), Split::Test)?)
    } else {
        None
    };
    eprintln!(
        "training {} steps on {} ({} prompt / {} total parameters)",
        cfg.total_steps,
        join_cells(&cfg.cells),
        model.prompt_param_count(),
        model.param_count()
    );
    let report = train::train(&cfg, &mut model, &train_set, test_set.as_ref())?;
    write_report(&out, &cfg, &report)?;
    let ckpt = out.join("checkpoint");
    save_checkpoint(&model, &ckpt, Some(&cfg))?;
    if let Some(last) = report.log.last() {
        println!(
            "step {} loss_seg {:.6} loss_bnd {:.6} loss_dis {}",
            last.step + 1,
            last.loss_seg,
            last.loss_bnd,
            last.loss_dis.map(|d| format!("{d:.6}")).unwrap_or_else(|| "-".into())
        );
    }
    if let Some(snap) = report.snapshots.last() {
        for m in &snap.metrics {
            println!(
                "{}{} maxF {:.4} mae {:.4}",
                m.dataset,
                if m.zero_shot { " (zero-shot)" } else { "" },
                m.max_f,
                m.mae
            );
        }
    }
    println!("{}", ckpt.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut r = Resolver::new(
        a.config.as_deref(),
        &["checkpoint", "data", "domain", "task", "rgb_only", "split", "out"],
    )?;
    let ckpt = r.required_path("checkpoint", a.checkpoint)?;
    let data = r.required_path("data", a.data)?;
    let domain: Option<String> = r.optional("domain", a.domain)?;
    let task: Option<String> = r.optional("task", a.task)?;
    let rgb_only = r.switch("rgb_only", a.rgb_only)?;
    let split = match r.value("split", a.split, "test".to_string())?.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(CliError::Usage(format!("unknown split `{other}` (expected train or test)"))),
    };
    let out = r.optional_path("out", a.out)?;
    let cells = match (domain, task) {
        (Some(d), Some(t)) => vec![Cell::new(d.parse::<Domain>()?, t.parse::<Task>()?)],
        (None, None) => Cell::all(),
        _ => return Err(CliError::Usage("--domain and --task must be given together".into())),
    };
    announce(&r, "eval", None)?;

    let (model, manifest) = load_checkpoint(&ckpt)?;
    let set = CellSet::load(&data, &cells, split)?;
    let mut records = Vec::new();
    for (cell, samples) in &set.cells {
        if samples.is_empty() {
            if cells.len() == 1 {
                return Err(duoprompt_core::Error::Config(format!("no {} samples for cell {cell}", split.name())).into());
            }
            eprintln!("skipping {cell}: no samples");
            continue;
        }
        let (max_f, mae) = evaluate_samples(&model, samples, *cell, rgb_only)?;
        records.push(Metrics {
            dataset: cell.dir_name(),
            domain: cell.domain.to_string(),
            task: cell.task.to_string(),
            max_f,
            mae,
            zero_shot: !manifest.trained_cells.is_empty() && !manifest.trained_cells.contains(cell),
            rgb_only,
            split: split.name().to_string(),
            samples: samples.len(),
        });
    }
    let json = serde_json::to_string_pretty(&records).map_err(duoprompt_core::Error::from)? + "\n";
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(&path, &json).map_err(|e| CliError::io(&path, e))?;
    }
    print!("{json}");
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let mut r = Resolver::new(a.config.as_deref(), &["checkpoint", "out"])?;
    let ckpt = r.required_path("checkpoint", a.checkpoint)?;
    let out = r.optional_path("out", a.out)?;
    announce(&r, "analyze", out.as_deref())?;

    let (model, _) = load_checkpoint(&ckpt)?;
    let report = model.bank.correlation_report(&model.params).to_csv();
    let pairs = model.bank.pair_cosines(&model.params)?;
    let mut table = String::from("pair,cosine,magnitude\n");
    for (pair, c) in &pairs {
        table += &format!("{},{c:.12},{:.12}\n", pair.name(), c.abs());
    }
    if let Some(dir) = &out {
        for (name, body) in [("correlation.csv", &report), ("pairs.csv", &table)] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| CliError::io(&p, e))?;
        }
    }
    print!("{report}\n{table}");
    if !pairs.is_empty() {
        let mean = pairs.iter().map(|(_, c)| c.abs()).sum::<f64>() / pairs.len() as f64;
        println!("mean_abs_cosine,{mean:.12}");
    }
    Ok(())
}
