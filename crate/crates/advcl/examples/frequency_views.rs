//! Frequency-view construction: radial spectrum split, exact
//! reconstruction, and energy monotonicity in the radius.

use advcl::data::{load_dataset, Split, SyntheticSpec};
use advcl::freq::fft_decompose;
use advcl::plot::save_image;
use ndarray::Axis;
use std::path::Path;

fn main() -> advcl::Result<()> {
    let spec = SyntheticSpec {
        n: 2,
        image_size: 16,
        ..Default::default()
    };
    let data = load_dataset("synthetic", Split::Train, Path::new("."), Some(&spec))?;
    let batch = data.gather(&[0]);

    let radius = 4.0;
    let (high, low) = fft_decompose(&batch.images, radius)?;
    let recon_err = (&high + &low - &batch.images.data)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    println!("reconstruction |high + low - x|_inf = {recon_err:.2e}");

    let energy = |a: &ndarray::Array4<f64>| a.iter().map(|v| v * v).sum::<f64>();
    println!("radius  E(low)      E(high)");
    for r in [0.0, 2.0, 4.0, 8.0, 12.0] {
        let (h, l) = fft_decompose(&batch.images, r)?;
        println!("{r:>6}  {:>10.4}  {:>10.4}", energy(&l), energy(&h));
    }

    let out = Path::new("target/frequency_views");
    std::fs::create_dir_all(out)?;
    save_image(&out.join("x.png"), &batch.images.data.index_axis(Axis(0), 0))?;
    save_image(&out.join("x_high.png"), &high.index_axis(Axis(0), 0))?;
    save_image(&out.join("x_low.png"), &low.index_axis(Axis(0), 0))?;
    println!("wrote x.png / x_high.png / x_low.png under {}", out.display());
    Ok(())
}
