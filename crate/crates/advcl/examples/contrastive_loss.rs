//! The two- and multi-view contrastive losses against brute-force
//! enumeration and their closed forms.

use advcl::data::{rng_for, stream};
use advcl::loss::{
    ntxent_enumeration_oracle, ntxent_multi_view, ntxent_two_view, ProjectedFeatures, Temperature,
};
use ndarray::Array2;
use rand::Rng;

fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, &[stream::INIT]);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn main() -> advcl::Result<()> {
    let t = Temperature::default();

    // b = 1: the denominator is exactly the positive term
    let loss = ntxent_two_view(&randn(1, 6, 0), &randn(1, 6, 1), t)?;
    println!("two-view loss at b=1: {loss:.2e} (exactly zero)");

    // identical embeddings: closed forms
    let row = randn(1, 6, 2);
    let stack = |b: usize| {
        let mut z = Array2::zeros((b, 6));
        for i in 0..b {
            z.row_mut(i).assign(&row.row(0));
        }
        z
    };
    let b = 4;
    let loss = ntxent_two_view(&stack(b), &stack(b), t)?;
    println!(
        "identical embeddings, b={b}: {loss:.6} vs 2·ln(2b-1) = {:.6}",
        2.0 * ((2 * b - 1) as f64).ln()
    );
    let m = 3;
    let zs = ProjectedFeatures::from_views(&vec![stack(b); m])?;
    let loss = ntxent_multi_view(&zs, t)?;
    println!(
        "identical embeddings, m={m}: {loss:.6} vs m(m-1)·ln(bm-1) = {:.6}",
        (m * (m - 1)) as f64 * ((b * m - 1) as f64).ln()
    );

    // random instances against the enumeration oracle
    let views = vec![randn(2, 3, 10), randn(2, 3, 11), randn(2, 3, 12)];
    let zs = ProjectedFeatures::from_views(&views)?;
    let fast = ntxent_multi_view(&zs, t)?;
    let slow = ntxent_enumeration_oracle(&views, t.0);
    println!("b=2, m=3 random: {fast:.9} vs enumeration {slow:.9}");

    // invariance to a common positive rescaling
    let (z1, z2) = (randn(3, 5, 20), randn(3, 5, 21));
    let a = ntxent_two_view(&z1, &z2, t)?;
    let b = ntxent_two_view(&(&z1 * 3.0), &(&z2 * 3.0), t)?;
    println!("scale invariance: |{a:.9} - {b:.9}| = {:.2e}", (a - b).abs());
    Ok(())
}
