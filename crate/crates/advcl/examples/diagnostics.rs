//! Interpretability diagnostics: feature inversion maps and the
//! adversarial loss landscape over filter-normalized weight directions.

use advcl::analysis::{fim, loss_landscape, FimSign};
use advcl::attack::{AttackInit, AttackNorm, PerturbBudget};
use advcl::data::{load_dataset, ImageBatch, Split, SyntheticSpec};
use advcl::model::{Architecture, EncoderConfig, RobustModel};
use advcl::plot::{heatmap, save_image};
use ndarray::Axis;
use std::path::Path;

fn main() -> advcl::Result<()> {
    let spec = SyntheticSpec {
        n: 32,
        image_size: 16,
        ..Default::default()
    };
    let data = load_dataset("synthetic", Split::Train, Path::new("."), Some(&spec))?;
    let mut model = RobustModel::new(
        EncoderConfig {
            architecture: Architecture::TinyCnn,
            feature_dim: 16,
            projection_dim: 8,
            input_channels: 1,
            input_size: 16,
        },
        0,
    )?;
    model.attach_classifier(2);
    let out = Path::new("target/diagnostics");
    std::fs::create_dir_all(out)?;

    // feature inversion from a seed image
    let seed_img = ImageBatch::from_raw(data.gather(&[0]).images.data);
    let result = fim(&model, &seed_img, 3, 150, 0.5, FimSign::Min)?;
    println!(
        "fim unit 3: objective {:.4} -> {:.4} over {} accepted steps",
        result.trajectory.first().unwrap(),
        result.trajectory.last().unwrap(),
        result.trajectory.len() - 1
    );
    save_image(&out.join("fim_seed.png"), &seed_img.data.index_axis(Axis(0), 0))?;
    save_image(&out.join("fim.png"), &result.image.index_axis(Axis(0), 0))?;

    // adversarial-loss landscape around the current weights
    let batch = data.gather(&(0..16).collect::<Vec<_>>());
    let budget = PerturbBudget {
        epsilon: 8.0 / 255.0,
        steps: 3,
        step_size: 2.0 / 255.0,
        init: AttackInit::Zero,
        norm: AttackNorm::LInf,
    };
    let axis = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let before = model.param_hash(None);
    let grid = loss_landscape(&mut model, &batch, &budget, &axis, &axis, 7)?;
    println!("weights restored exactly: {}", model.param_hash(None) == before);
    println!("adversarial loss grid (alpha rows, beta cols):");
    for row in &grid.losses {
        println!(
            "  {}",
            row.iter()
                .map(|v| format!("{v:7.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    grid.save_csv(&out.join("landscape.csv"))?;
    heatmap(&out.join("landscape.png"), &grid.to_array(), 48)?;
    println!("artifacts under {}", out.display());
    Ok(())
}
