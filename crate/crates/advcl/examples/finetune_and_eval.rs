//! Linear finetuning protocols over a pretrained encoder and the
//! robust-accuracy sweep.

use advcl::data::{load_dataset, AugmentConfig, Split, SyntheticSpec};
use advcl::eval::eval_sweep;
use advcl::finetune::{finetune, FinetuneConfig, FinetuneMode};
use advcl::model::{Architecture, EncoderConfig};
use advcl::pretrain::{simclr_pretrain, PretrainConfig};
use std::path::Path;

fn main() -> advcl::Result<()> {
    let spec = SyntheticSpec {
        n: 128,
        image_size: 16,
        ..Default::default()
    };
    let train = load_dataset("synthetic", Split::Train, Path::new("."), Some(&spec))?;
    let test = load_dataset("synthetic", Split::Test, Path::new("."), Some(&spec))?;

    let mut augment = AugmentConfig::default();
    augment.crop_scale_min = 0.5;
    let pre_cfg = PretrainConfig {
        epochs: 5,
        batch_size: 32,
        lr: 0.05,
        warmup_epochs: 2,
        lambda: 0.0,
        freq_radius: 4.0,
        augment,
        encoder: EncoderConfig {
            architecture: Architecture::TinyCnn,
            feature_dim: 16,
            projection_dim: 8,
            input_channels: 1,
            input_size: 16,
        },
        ..Default::default()
    };
    println!("pretraining ({} epochs)…", pre_cfg.epochs);
    let pretrained = simclr_pretrain(&pre_cfg, &train, None)?;

    let mut cfg = FinetuneConfig::standard(FinetuneMode::Slf);
    cfg.epochs = 15;
    cfg.batch_size = 32;
    cfg.budget.steps = 5;
    cfg.val_limit = 64;
    println!("standard linear finetuning ({} epochs)…", cfg.epochs);
    let tuned = finetune(pretrained.model, &train, &test, &cfg)?;
    println!(
        "best epoch {} (val {:.4}); encoder frozen: {}",
        tuned.best_epoch,
        tuned.metrics[tuned.best_epoch].val_metric,
        tuned.encoder_frozen
    );

    let report = eval_sweep(
        &tuned.model,
        &test,
        &[0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0],
        &[1, 5, 10],
        &cfg.budget,
        32,
        0,
        "example",
    )?;
    println!("SA = {:.4}", report.sa);
    println!("eps      steps  RA");
    for cell in &report.ra_grid {
        println!("{:<8.4} {:>5}  {:.4}", cell.epsilon, cell.steps, cell.ra);
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    let out = Path::new("target/finetune_and_eval");
    std::fs::create_dir_all(out)?;
    report.save_json(&out.join("report.json"))?;
    report.save_csv(&out.join("report.csv"))?;
    report.save_plots(out, 8.0 / 255.0)?;
    println!("report + plots under {}", out.display());
    Ok(())
}
