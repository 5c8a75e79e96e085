use advcl::cluster::{build_pseudo_tables, extract_features};
use advcl::data::{load_dataset, AugmentConfig, Split, SyntheticSpec};
use advcl::eval::{eval_ra, eval_sa};
use advcl::finetune::{finetune, FinetuneConfig, FinetuneMode};
use advcl::model::{Architecture, EncoderConfig};
use advcl::pretrain::{pretrain, simclr_pretrain, PretrainConfig};
use std::path::Path;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    for seed in 0..3u64 {
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
        let cfg = PretrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 0.05,
            warmup_epochs: 4,
            lambda: 0.0,
            k_list: vec![2, 10],
            freq_radius: 4.0,
            seed,
            augment: aug.clone(),
            encoder: encoder.clone(),
            budget: advcl::attack::PerturbBudget {
                epsilon: 8.0 / 255.0,
                steps: 5,
                step_size: 2.0 / 255.0,
                init: advcl::attack::AttackInit::UniformRandom,
                norm: advcl::attack::AttackNorm::LInf,
            },
            ..Default::default()
        };
        let spec = SyntheticSpec { n: 512, classes: 2, image_size: 16, channels: 3, seed, noise: 0.05, texture: 0.06 };
        let train = load_dataset("synthetic", Split::Train, Path::new("."), Some(&spec)).unwrap();
        let test = load_dataset("synthetic", Split::Test, Path::new("."), Some(&spec)).unwrap();

        let t = Instant::now();
        let simclr = simclr_pretrain(&cfg, &train, None).unwrap();
        let t_simclr = t.elapsed();

        // ClusterFit from the simclr encoder
        let feats = extract_features(&simclr.model, &train, 64).unwrap();
        let table = build_pseudo_tables(&feats, &cfg.k_list, seed, "fpre").unwrap();

        let mut advcl_cfg = cfg.clone();
        advcl_cfg.lambda = 0.2;
        let t = Instant::now();
        let adv = pretrain(&advcl_cfg, &train, Some(&table), None, None).unwrap();
        let t_advcl = t.elapsed();

        let mut ft = FinetuneConfig::standard(FinetuneMode::Slf);
        ft.seed = seed;
        ft.batch_size = 64;
        ft.val_limit = 64;
        let t = Instant::now();
        let tuned_adv = finetune(adv.model, &train, &test, &ft).unwrap();
        let tuned_sim = finetune(simclr.model, &train, &test, &ft).unwrap();
        let t_ft = t.elapsed();

        let budget = advcl::attack::PerturbBudget {
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: 2.0 / 255.0,
            init: advcl::attack::AttackInit::Zero,
            norm: advcl::attack::AttackNorm::LInf,
        };
        let t = Instant::now();
        let sa_adv = eval_sa(&tuned_adv.model, &test, 64).unwrap();
        let ra_adv = eval_ra(&tuned_adv.model, &test, &budget, 64, seed).unwrap();
        let sa_sim = eval_sa(&tuned_sim.model, &test, 64).unwrap();
        let ra_sim = eval_ra(&tuned_sim.model, &test, &budget, 64, seed).unwrap();
        let t_eval = t.elapsed();
        println!(
            "seed {seed}: advcl SA {sa_adv:.3} RA {ra_adv:.3} | simclr SA {sa_sim:.3} RA {ra_sim:.3} | times simclr {t_simclr:?} advcl {t_advcl:?} ft {t_ft:?} eval {t_eval:?}"
        );
    }
    println!("total {:?}", t0.elapsed());
}
