use advcl::attack::{AttackBnMode, AttackInit, AttackNorm, PerturbBudget};
use advcl::cluster::{build_pseudo_tables, extract_features};
use advcl::data::{load_dataset, AugmentConfig, Split, SyntheticSpec};
use advcl::eval::{eval_ra, eval_sa};
use advcl::finetune::{finetune, FinetuneConfig, FinetuneMode};
use advcl::model::{Architecture, EncoderConfig};
use advcl::pretrain::{pretrain, simclr_pretrain, PretrainConfig};
use std::path::Path;

fn main() {
    let seed = 0u64;
    let mut aug = AugmentConfig::default();
    aug.crop_scale_min = 0.5;
    aug.jitter_strengths = [0.3, 0.3, 0.3, 0.05];
    let encoder = EncoderConfig {
        architecture: Architecture::TinyCnn,
        feature_dim: 32,
        projection_dim: 16,
        input_channels: 3,
        input_size: 16,
    };
    let spec = SyntheticSpec { n: 512, classes: 2, image_size: 16, channels: 3, seed, noise: 0.05, texture: 0.06 };
    let train = load_dataset("synthetic", Split::Train, Path::new("."), Some(&spec)).unwrap();
    let test = load_dataset("synthetic", Split::Test, Path::new("."), Some(&spec)).unwrap();
    let eval_budget = PerturbBudget { epsilon: 8.0/255.0, steps: 10, step_size: 2.0/255.0, init: AttackInit::Zero, norm: AttackNorm::LInf };

    for bn_mode in [AttackBnMode::Train, AttackBnMode::Eval] {
        let base = PretrainConfig {
            epochs: 0,
            batch_size: 32,
            lr: 0.05,
            warmup_epochs: 4,
            lambda: 0.2,
            k_list: vec![2, 10],
            freq_radius: 4.0,
            seed,
            attack_bn_mode: bn_mode,
            augment: aug.clone(),
            encoder: encoder.clone(),
            budget: PerturbBudget { epsilon: 8.0/255.0, steps: 5, step_size: 2.0/255.0, init: AttackInit::UniformRandom, norm: AttackNorm::LInf },
            checkpoint_every: 1000,
            ..Default::default()
        };
        // f_pre + tables once
        let mut fpre_cfg = base.clone();
        fpre_cfg.lambda = 0.0;
        fpre_cfg.epochs = 10;
        let fpre = simclr_pretrain(&fpre_cfg, &train, None).unwrap();
        let feats = extract_features(&fpre.model, &train, 64).unwrap();
        let table = build_pseudo_tables(&feats, &base.k_list, seed, "fpre").unwrap();

        println!("=== attack_bn_mode {:?} ===", bn_mode);
        for total in [10usize, 20, 30] {
            let mut cfg = base.clone();
            cfg.epochs = total;
            let out = pretrain(&cfg, &train, Some(&table), None, None).unwrap();
            let mut ft = FinetuneConfig::standard(FinetuneMode::Slf);
            ft.seed = seed;
            ft.val_limit = 64;
            let tuned = finetune(out.model, &train, &test, &ft).unwrap();
            let sa = eval_sa(&tuned.model, &test, 64).unwrap();
            let ra = eval_ra(&tuned.model, &test, &eval_budget, 64, seed).unwrap();
            println!("epochs {total:>2}: SA {sa:.3} RA {ra:.3} (last loss {:.3})", out.metrics.last().unwrap().loss);
        }
    }
}
