//! The stochastic augmentation set: seeded determinism, per-sample draws,
//! and the identity configuration.

use advcl::data::{augment, load_dataset, rng_for, stream, AugmentConfig, Split, SyntheticSpec};
use std::path::Path;

fn main() -> advcl::Result<()> {
    let spec = SyntheticSpec {
        n: 4,
        image_size: 16,
        ..Default::default()
    };
    let data = load_dataset("synthetic", Split::Train, Path::new("."), Some(&spec))?;
    let batch = data.gather(&[0, 1, 2, 3]);

    let cfg = AugmentConfig::default();
    let a = augment(&batch.images, &cfg, &mut rng_for(7, &[stream::AUGMENT]));
    let b = augment(&batch.images, &cfg, &mut rng_for(7, &[stream::AUGMENT]));
    println!("same rng state twice -> bitwise equal: {}", a.data == b.data);

    let c = augment(&batch.images, &cfg, &mut rng_for(8, &[stream::AUGMENT]));
    println!("different seed -> different views: {}", a.data != c.data);

    let id = augment(
        &batch.images,
        &AugmentConfig::identity(),
        &mut rng_for(7, &[stream::AUGMENT]),
    );
    println!("identity config -> unchanged: {}", id.data == batch.images.data);

    // Monte-Carlo estimate of the flip probability on an asymmetric image
    let mut cfg = AugmentConfig::identity();
    cfg.hflip_prob = 0.5;
    let mut rng = rng_for(3, &[stream::AUGMENT]);
    let one = data.gather(&[0]);
    let probe = one.images.data[(0, 0, 0, 0)];
    let mut flips = 0;
    let trials = 1000;
    for _ in 0..trials {
        let y = augment(&one.images, &cfg, &mut rng);
        if y.data[(0, 0, 0, 15)] == probe {
            flips += 1;
        }
    }
    println!(
        "estimated flip rate over {trials} draws: {:.3}",
        flips as f64 / trials as f64
    );
    Ok(())
}
