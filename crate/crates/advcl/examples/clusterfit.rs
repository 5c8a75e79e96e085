//! Pseudo-label generation: feature extraction, K-means with k-means++
//! seeding, and the ensemble table file.

use advcl::cluster::{build_pseudo_tables, extract_features, kmeans, FeatureMatrix};
use advcl::data::{load_dataset, rng_for, stream, Split, SyntheticSpec};
use advcl::model::{Architecture, EncoderConfig, RobustModel};
use ndarray::Array2;
use rand::Rng;
use std::path::Path;

fn main() -> advcl::Result<()> {
    // two well-separated blobs are recovered exactly
    let mut rng = rng_for(0, &[stream::CLUSTER]);
    let mut rows = Array2::<f64>::zeros((40, 2));
    for i in 0..40 {
        let c = if i < 20 { 0.0 } else { 10.0 };
        rows[(i, 0)] = c + rng.gen_range(-0.5..0.5);
        rows[(i, 1)] = c + rng.gen_range(-0.5..0.5);
    }
    let fit = kmeans(&FeatureMatrix::new(rows), 2, 7)?;
    println!(
        "two-blob recovery: first-half label {}, second-half label {}, inertia {:.3}",
        fit.assignments[0], fit.assignments[39], fit.inertia
    );
    println!(
        "Lloyd inertia trace (non-increasing): {:?}",
        fit.inertia_trace
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
    );

    // ensemble tables from encoder features
    let spec = SyntheticSpec {
        n: 64,
        image_size: 16,
        ..Default::default()
    };
    let data = load_dataset("synthetic", Split::Train, Path::new("."), Some(&spec))?;
    let model = RobustModel::new(
        EncoderConfig {
            architecture: Architecture::TinyCnn,
            feature_dim: 16,
            projection_dim: 8,
            input_channels: 1,
            input_size: 16,
        },
        0,
    )?;
    let feats = extract_features(&model, &data, 32)?;
    let table = build_pseudo_tables(&feats, &[2, 10], 3, "example-fingerprint")?;
    for fit in &table.fits {
        let mut counts = vec![0usize; fit.k];
        for &a in &fit.assignments {
            counts[a] += 1;
        }
        println!("K = {:>3}: cluster sizes {:?}", fit.k, counts);
    }
    let out = Path::new("target/clusterfit/pseudo_tables.json");
    table.save(out)?;
    println!("tables saved to {}", out.display());
    Ok(())
}
