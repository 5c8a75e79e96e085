//! A small end-to-end adversarial contrastive pretraining run: pseudo
//! labels from a contrastive feature extractor, then the four-view
//! objective with the CE regularizer.

use advcl::attack::{AttackInit, AttackNorm, PerturbBudget};
use advcl::cluster::{build_pseudo_tables, extract_features};
use advcl::data::{load_dataset, AugmentConfig, Split, SyntheticSpec};
use advcl::model::{Architecture, EncoderConfig};
use advcl::pretrain::{pretrain, simclr_pretrain, PretrainConfig};
use std::path::Path;

fn main() -> advcl::Result<()> {
    let mut augment = AugmentConfig::default();
    augment.crop_scale_min = 0.5;
    let cfg = PretrainConfig {
        epochs: 4,
        batch_size: 16,
        lr: 0.05,
        warmup_epochs: 2,
        lambda: 0.2,
        k_list: vec![2, 5],
        freq_radius: 4.0,
        seed: 0,
        augment,
        encoder: EncoderConfig {
            architecture: Architecture::TinyCnn,
            feature_dim: 16,
            projection_dim: 8,
            input_channels: 1,
            input_size: 16,
        },
        budget: PerturbBudget {
            epsilon: 8.0 / 255.0,
            steps: 3,
            step_size: 2.0 / 255.0,
            init: AttackInit::UniformRandom,
            norm: AttackNorm::LInf,
        },
        ..Default::default()
    };
    let spec = SyntheticSpec {
        n: 64,
        image_size: 16,
        ..Default::default()
    };
    let train = load_dataset("synthetic", Split::Train, Path::new("."), Some(&spec))?;

    // offline supervision stimulus from a standard contrastive encoder
    let mut fpre_cfg = cfg.clone();
    fpre_cfg.lambda = 0.0;
    fpre_cfg.epochs = 3;
    println!("pretraining f_pre (standard contrastive, {} epochs)…", fpre_cfg.epochs);
    let fpre = simclr_pretrain(&fpre_cfg, &train, None)?;
    let feats = extract_features(&fpre.model, &train, 32)?;
    let table = build_pseudo_tables(&feats, &cfg.k_list, cfg.seed, "fpre")?;

    let out = Path::new("target/pretrain_advcl");
    println!("adversarial contrastive pretraining ({} epochs)…", cfg.epochs);
    let trained = pretrain(&cfg, &train, Some(&table), Some(out), None)?;
    println!("epoch  lr       total    contrastive  pseudo_ce");
    for m in &trained.metrics {
        println!(
            "{:>5}  {:.5}  {:>7.4}  {:>11.4}  {:>9.4}",
            m.epoch, m.lr, m.loss, m.contrastive, m.pseudo_ce
        );
    }
    println!("checkpoint: {:?}", trained.checkpoint);
    println!("metrics + encoder under {}", out.display());
    Ok(())
}
