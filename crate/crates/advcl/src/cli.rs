//! Command-line front end: thin subcommands over the library pipeline.

use crate::ablate::{ablate, pseudo_tables_for, AblateKind};
use crate::analysis::{fim, loss_landscape, FimSign};
use crate::attack::AttackInit;
use crate::cluster::{build_pseudo_tables, extract_features, PseudoLabelTable};
use crate::config::ExperimentConfig;
use crate::data::{ImageBatch, Split};
use crate::error::{Error, Result};
use crate::eval::eval_sweep;
use crate::finetune::finetune_checkpoint;
use crate::freq::fft_decompose;
use crate::manifest::{append_jsonl, RunManifest, Stage};
use crate::model::{load_model, save_model};
use crate::pretrain::{pretrain, simclr_pretrain, supervised_at};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "advcl",
    version,
    about = "Adversarial contrastive pretraining, finetuning and robustness evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config file (TOML); missing keys use documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to a content-addressed run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct AttackArgs {
    /// ℓ∞ radius override (image units).
    #[arg(long)]
    eps: Option<f64>,
    /// PGD step-count override.
    #[arg(long)]
    steps: Option<usize>,
    /// PGD step-size override.
    #[arg(long)]
    step_size: Option<f64>,
    /// Attack initialization: zero | uniform_random.
    #[arg(long)]
    attack_init: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarial contrastive pretraining (with pseudo-label regularizer).
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Resume from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Precomputed pseudo-label tables (computed on demand otherwise).
        #[arg(long)]
        pseudo_tables: Option<PathBuf>,
        /// Feature extractor checkpoint for pseudo-label clustering.
        #[arg(long)]
        fpre_ckpt: Option<PathBuf>,
    },
    /// Standard two-view contrastive pretraining (no attacks).
    Simclr {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Supervised adversarial-training baseline.
    SupervisedAt {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Extract features and build pseudo-label tables.
    Cluster {
        #[command(flatten)]
        common: CommonArgs,
        /// Feature extractor checkpoint (default: train one).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Finetune a pretrained encoder (slf | alf | aff).
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Evaluate SA and the RA sweep grid of a finetuned checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Diagnostics: frequency views, feature inversion, loss landscape.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Ablation harness: views | lambda | klist | finetune_modes.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        kind: String,
        /// Recipe filter for the views ablation: `all` or a comma list.
        #[arg(long, default_value = "all")]
        recipes: String,
    },
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Decompose a dataset image into frequency components and dump PNGs.
    Freq {
        #[command(flatten)]
        common: CommonArgs,
        /// Sample index within the train split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Radius override.
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Feature inversion map for one feature coordinate.
    Fim {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        unit: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// min (written definition) or max (activation maximization).
        #[arg(long, default_value = "min")]
        sign: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Adversarial loss landscape over filter-normalized directions.
    Landscape {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Half-width of the α/β range.
        #[arg(long, default_value_t = 1.0)]
        span: f64,
        /// Grid cells per axis.
        #[arg(long, default_value_t = 5)]
        cells: usize,
        /// Batch size drawn from the test split for the objective.
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[command(flatten)]
        attack: AttackArgs,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &CommonArgs, cfg: &ExperimentConfig, stage: Stage, tag: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        crate::manifest::stage_dir(&cfg.artifact_root(), stage, cfg, &[tag])
    })
}

fn write_manifest(
    dir: &Path,
    stage: Stage,
    cfg: &ExperimentConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
) -> Result<()> {
    let mut manifest = RunManifest::new(stage, cfg, inputs);
    manifest.outputs = outputs;
    manifest.save(dir)
}

fn apply_attack_overrides(budget: &mut crate::attack::PerturbBudget, a: &AttackArgs) -> Result<()> {
    if let Some(e) = a.eps {
        budget.epsilon = e;
    }
    if let Some(s) = a.steps {
        budget.steps = s;
    }
    if let Some(s) = a.step_size {
        budget.step_size = s;
    }
    if let Some(init) = &a.attack_init {
        budget.init = match init.as_str() {
            "zero" => AttackInit::Zero,
            "uniform_random" | "random" => AttackInit::UniformRandom,
            other => return Err(Error::Config(format!("unknown attack init {other:?}"))),
        };
    }
    budget.validate()
}

fn cmd_pretrain(
    common: &CommonArgs,
    resume: Option<&Path>,
    pseudo_tables: Option<&Path>,
    fpre_ckpt: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg, Stage::Pretrain, "advcl");
    std::fs::create_dir_all(&dir)?;
    let train = cfg.dataset.load(Split::Train, cfg.run.seed)?;
    let table = if cfg.pretrain.lambda > 0.0 {
        let table = match pseudo_tables {
            Some(path) => PseudoLabelTable::load(path)?,
            None => pseudo_tables_for(&cfg, &cfg.artifact_root(), fpre_ckpt)?,
        };
        table.save(&dir.join("pseudo_tables.json"))?;
        Some(table)
    } else {
        None
    };
    if resume.is_none() {
        let _ = std::fs::remove_file(dir.join("metrics.jsonl"));
    }
    let out = pretrain(
        &cfg.to_pretrain_config(),
        &train,
        table.as_ref(),
        Some(&dir),
        resume,
    )?;
    let fp = save_model(&out.model, &cfg.content_hash(), &dir.join("encoder.json"))?;
    write_manifest(
        &dir,
        Stage::Pretrain,
        &cfg,
        Vec::new(),
        vec![dir.join("encoder.json"), dir.join("metrics.jsonl")],
    )?;
    println!("pretrained encoder {fp} -> {}", dir.display());
    Ok(())
}

fn cmd_simple_pretrain(common: &CommonArgs, supervised: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let stage_tag = if supervised { "supervised-at" } else { "simclr" };
    let dir = out_dir(common, &cfg, Stage::Pretrain, stage_tag);
    std::fs::create_dir_all(&dir)?;
    let _ = std::fs::remove_file(dir.join("metrics.jsonl"));
    let train = cfg.dataset.load(Split::Train, cfg.run.seed)?;
    let out = if supervised {
        supervised_at(&cfg.to_pretrain_config(), &train, Some(&dir))?
    } else {
        simclr_pretrain(&cfg.to_pretrain_config(), &train, Some(&dir))?
    };
    let fp = save_model(&out.model, &cfg.content_hash(), &dir.join("encoder.json"))?;
    write_manifest(
        &dir,
        Stage::Pretrain,
        &cfg,
        Vec::new(),
        vec![dir.join("encoder.json"), dir.join("metrics.jsonl")],
    )?;
    println!("{stage_tag} encoder {fp} -> {}", dir.display());
    Ok(())
}

fn cmd_cluster(common: &CommonArgs, ckpt: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg, Stage::Cluster, "cluster");
    std::fs::create_dir_all(&dir)?;
    let table = match ckpt {
        Some(path) => {
            let (model, state) = load_model(path)?;
            let train = cfg.dataset.load(Split::Train, cfg.run.seed)?;
            let feats = extract_features(&model, &train, cfg.eval.batch_size)?;
            build_pseudo_tables(&feats, &cfg.pretrain.k_list, cfg.run.seed, &state.fingerprint())?
        }
        None => pseudo_tables_for(&cfg, &cfg.artifact_root(), None)?,
    };
    let path = dir.join("pseudo_tables.json");
    table.save(&path)?;
    write_manifest(
        &dir,
        Stage::Cluster,
        &cfg,
        ckpt.map(Path::to_path_buf).into_iter().collect(),
        vec![path.clone()],
    )?;
    println!(
        "pseudo tables for K={:?} -> {}",
        table.k_list,
        path.display()
    );
    Ok(())
}

fn cmd_finetune(common: &CommonArgs, mode: &str, ckpt: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.finetune.mode = mode.parse()?;
    let dir = out_dir(common, &cfg, Stage::Finetune, mode);
    std::fs::create_dir_all(&dir)?;
    let train = cfg.dataset.load(Split::Train, cfg.run.seed)?;
    let test = cfg.dataset.load(Split::Test, cfg.run.seed)?;
    let out = finetune_checkpoint(ckpt, &train, &test, &cfg.to_finetune_config())?;
    let _ = std::fs::remove_file(dir.join("metrics.jsonl"));
    for m in &out.metrics {
        append_jsonl(&dir.join("metrics.jsonl"), m)?;
    }
    let fp = save_model(&out.model, &cfg.content_hash(), &dir.join("finetuned.json"))?;
    write_manifest(
        &dir,
        Stage::Finetune,
        &cfg,
        vec![ckpt.to_path_buf()],
        vec![dir.join("finetuned.json"), dir.join("metrics.jsonl")],
    )?;
    println!(
        "finetuned ({mode}, best epoch {}) {fp} -> {}",
        out.best_epoch,
        dir.display()
    );
    Ok(())
}

fn cmd_eval(common: &CommonArgs, ckpt: &Path, attack: &AttackArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg, Stage::Eval, "eval");
    std::fs::create_dir_all(&dir)?;
    let (model, state) = load_model(ckpt)?;
    let test = cfg.dataset.load(Split::Test, cfg.run.seed)?;
    let mut budget = cfg.eval.budget.to_budget();
    apply_attack_overrides(&mut budget, attack)?;
    let report = eval_sweep(
        &model,
        &test,
        &cfg.eval.eps_list,
        &cfg.eval.steps_list,
        &budget,
        cfg.eval.batch_size,
        cfg.run.seed,
        &state.fingerprint(),
    )?;
    report.save_json(&dir.join("report.json"))?;
    report.save_csv(&dir.join("report.csv"))?;
    report.save_plots(&dir, budget.epsilon)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_manifest(
        &dir,
        Stage::Eval,
        &cfg,
        vec![ckpt.to_path_buf()],
        vec![dir.join("report.json"), dir.join("report.csv")],
    )?;
    println!(
        "sa {:.4}, ra@(eps={:.4}, steps={}) {:?} -> {}",
        report.sa,
        budget.epsilon,
        budget.steps,
        report.ra_at(budget.epsilon, budget.steps),
        dir.display()
    );
    Ok(())
}

fn cmd_analyze_freq(common: &CommonArgs, index: usize, radius: Option<f64>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg, Stage::Analyze, "freq");
    std::fs::create_dir_all(&dir)?;
    let data = cfg.dataset.load(Split::Train, cfg.run.seed)?;
    if index >= data.len() {
        return Err(Error::Validation(format!(
            "index {index} outside dataset of {}",
            data.len()
        )));
    }
    let batch = data.gather(&[index]);
    let r = radius.unwrap_or(cfg.pretrain.freq_radius);
    let (high, low) = fft_decompose(&batch.images, r)?;
    let x = batch.images.data.index_axis(ndarray::Axis(0), 0);
    crate::plot::save_image(&dir.join("x.png"), &x)?;
    crate::plot::save_image(&dir.join("x_high.png"), &high.index_axis(ndarray::Axis(0), 0))?;
    crate::plot::save_image(&dir.join("x_low.png"), &low.index_axis(ndarray::Axis(0), 0))?;
    write_manifest(
        &dir,
        Stage::Analyze,
        &cfg,
        Vec::new(),
        vec![dir.join("x.png"), dir.join("x_high.png"), dir.join("x_low.png")],
    )?;
    println!("frequency views (radius {r}) -> {}", dir.display());
    Ok(())
}

fn cmd_analyze_fim(
    common: &CommonArgs,
    ckpt: &Path,
    unit: usize,
    steps: usize,
    lr: f64,
    sign: &str,
    index: usize,
) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg, Stage::Analyze, "fim");
    std::fs::create_dir_all(&dir)?;
    let (model, _) = load_model(ckpt)?;
    let data = cfg.dataset.load(Split::Train, cfg.run.seed)?;
    let batch = data.gather(&[index.min(data.len() - 1)]);
    let sign = match sign {
        "min" => FimSign::Min,
        "max" => FimSign::Max,
        other => return Err(Error::Config(format!("unknown sign {other:?}"))),
    };
    let seed_image = ImageBatch::from_raw(batch.images.data.clone());
    let out = fim(&model, &seed_image, unit, steps, lr, sign)?;
    crate::plot::save_image(&dir.join("seed.png"), &seed_image.data.index_axis(ndarray::Axis(0), 0))?;
    crate::plot::save_image(&dir.join("fim.png"), &out.image.index_axis(ndarray::Axis(0), 0))?;
    std::fs::write(
        dir.join("trajectory.json"),
        serde_json::to_string_pretty(&out.trajectory)?,
    )?;
    write_manifest(
        &dir,
        Stage::Analyze,
        &cfg,
        vec![ckpt.to_path_buf()],
        vec![dir.join("fim.png"), dir.join("trajectory.json")],
    )?;
    println!(
        "fim unit {unit} ({} accepted steps) -> {}",
        out.trajectory.len() - 1,
        dir.display()
    );
    Ok(())
}

fn cmd_analyze_landscape(
    common: &CommonArgs,
    ckpt: &Path,
    span: f64,
    cells: usize,
    batch: usize,
    attack: &AttackArgs,
) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg, Stage::Analyze, "landscape");
    std::fs::create_dir_all(&dir)?;
    let (mut model, _) = load_model(ckpt)?;
    let data = cfg.dataset.load(Split::Test, cfg.run.seed)?;
    let idx: Vec<usize> = (0..batch.min(data.len())).collect();
    let labeled = data.gather(&idx);
    let mut budget = cfg.eval.budget.to_budget();
    apply_attack_overrides(&mut budget, attack)?;
    let n = cells.max(1);
    let axis: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                0.0
            } else {
                -span + 2.0 * span * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let grid = loss_landscape(&mut model, &labeled, &budget, &axis, &axis, cfg.run.seed)?;
    grid.save_csv(&dir.join("landscape.csv"))?;
    crate::plot::heatmap(&dir.join("landscape.png"), &grid.to_array(), 48)?;
    std::fs::write(
        dir.join("landscape.json"),
        serde_json::to_string_pretty(&grid)?,
    )?;
    write_manifest(
        &dir,
        Stage::Analyze,
        &cfg,
        vec![ckpt.to_path_buf()],
        vec![
            dir.join("landscape.csv"),
            dir.join("landscape.png"),
            dir.join("landscape.json"),
        ],
    )?;
    println!("landscape {n}x{n} -> {}", dir.display());
    Ok(())
}

fn cmd_ablate(common: &CommonArgs, kind: &str, recipes: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let kind: AblateKind = kind.parse()?;
    if kind == AblateKind::Views && recipes != "all" {
        let known: Vec<&str> = crate::pretrain::ViewRecipe::ALL.iter().map(|r| r.name()).collect();
        for r in recipes.split(',') {
            if !known.contains(&r) {
                return Err(Error::Config(format!(
                    "unknown recipe {r:?}; known: {known:?}"
                )));
            }
        }
    }
    let dir = common.out.clone().unwrap_or_else(|| {
        cfg.artifact_root()
            .join("ablate")
            .join(format!("{kind:?}").to_lowercase())
    });
    let table = ablate(kind, &cfg, &dir)?;
    for row in &table.rows {
        println!("{:32} SA {:.4}  RA {:.4}", row.name, row.sa, row.ra);
    }
    println!("table -> {}", dir.join("ablation.md").display());
    Ok(())
}

/// Parses and executes; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Pretrain {
            common,
            resume,
            pseudo_tables,
            fpre_ckpt,
        } => cmd_pretrain(
            common,
            resume.as_deref(),
            pseudo_tables.as_deref(),
            fpre_ckpt.as_deref(),
        ),
        Command::Simclr { common } => cmd_simple_pretrain(common, false),
        Command::SupervisedAt { common } => cmd_simple_pretrain(common, true),
        Command::Cluster { common, ckpt } => cmd_cluster(common, ckpt.as_deref()),
        Command::Finetune { common, mode, ckpt } => cmd_finetune(common, mode, ckpt),
        Command::Eval {
            common,
            ckpt,
            attack,
        } => cmd_eval(common, ckpt, attack),
        Command::Analyze { what } => match what {
            AnalyzeCommand::Freq {
                common,
                index,
                radius,
            } => cmd_analyze_freq(common, *index, *radius),
            AnalyzeCommand::Fim {
                common,
                ckpt,
                unit,
                steps,
                lr,
                sign,
                index,
            } => cmd_analyze_fim(common, ckpt, *unit, *steps, *lr, sign, *index),
            AnalyzeCommand::Landscape {
                common,
                ckpt,
                span,
                cells,
                batch,
                attack,
            } => cmd_analyze_landscape(common, ckpt, *span, *cells, *batch, attack),
        },
        Command::Ablate {
            common,
            kind,
            recipes,
        } => cmd_ablate(common, kind, recipes),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
