//! FFT-based decomposition of images into high- and low-frequency
//! components used as contrastive views.
//!
//! Each channel is transformed with a 2-D DFT, the spectrum is split by a
//! hard radial threshold around the centered zero-frequency bin, and both
//! parts are transformed back. The two components reconstruct the input
//! exactly (up to round-off) because the masks partition the grid.

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use ndarray::{Array2, Array4};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Binary radial mask over a centered spectrum.
#[derive(Clone, Debug)]
pub struct FrequencyMask {
    pub radius: f64,
    pub height: usize,
    pub width: usize,
    /// `true` entries belong to the high-frequency component.
    high: Array2<bool>,
}

impl FrequencyMask {
    /// Builds the mask for an `height × width` spectrum. Bins at distance
    /// `d >= radius` from the centroid `(⌊H/2⌋, ⌊W/2⌋)` are high-frequency;
    /// `d < radius` are low-frequency, so the two sets partition the grid.
    pub fn new(radius: f64, height: usize, width: usize) -> Result<Self> {
        if radius < 0.0 || !radius.is_finite() {
            return Err(Error::Validation(format!("invalid radius {radius}")));
        }
        let cy = (height / 2) as f64;
        let cx = (width / 2) as f64;
        let high = Array2::from_shape_fn((height, width), |(i, j)| {
            let d = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
            d >= radius
        });
        Ok(FrequencyMask {
            radius,
            height,
            width,
            high,
        })
    }

    pub fn is_high(&self, i: usize, j: usize) -> bool {
        self.high[(i, j)]
    }

    pub fn high_bin_count(&self) -> usize {
        self.high.iter().filter(|&&v| v).count()
    }
}

/// 2-D FFT of one channel (row-column decomposition). `inverse` applies
/// the unnormalized inverse transform; callers divide by `H·W`.
fn fft2d(data: &mut Array2<Complex<f64>>, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (h, w) = data.dim();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let mut scratch = vec![Complex::default(); w];
    for mut row in data.rows_mut() {
        scratch.copy_from_slice(row.as_slice().unwrap());
        row_fft.process(&mut scratch);
        row.as_slice_mut().unwrap().copy_from_slice(&scratch);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col_buf = vec![Complex::default(); h];
    for j in 0..w {
        for i in 0..h {
            col_buf[i] = data[(i, j)];
        }
        col_fft.process(&mut col_buf);
        for i in 0..h {
            data[(i, j)] = col_buf[i];
        }
    }
}

/// Splits `x` into `(high, low)` frequency components with threshold
/// `radius`. Outputs are real parts of the inverse transforms and are not
/// clamped to `[0,1]`; `high + low` reconstructs `x` within round-off.
pub fn fft_decompose(x: &ImageBatch, radius: f64) -> Result<(Array4<f64>, Array4<f64>)> {
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite input to fft_decompose".into()));
    }
    let (b, c, h, w) = x.data.dim();
    let mask = FrequencyMask::new(radius, h, w)?;
    let mut planner = FftPlanner::new();
    let mut high = Array4::<f64>::zeros((b, c, h, w));
    let mut low = Array4::<f64>::zeros((b, c, h, w));
    let norm = 1.0 / (h * w) as f64;
    // the mask is defined on the shifted (centered) spectrum; map each
    // unshifted bin (u,v) to its shifted position instead of reordering
    let (sy, sx) = (h / 2, w / 2);
    for bi in 0..b {
        for ci in 0..c {
            let mut spec = Array2::from_shape_fn((h, w), |(i, j)| {
                Complex::new(x.data[(bi, ci, i, j)], 0.0)
            });
            fft2d(&mut spec, &mut planner, false);
            let mut spec_high = Array2::<Complex<f64>>::zeros((h, w));
            let mut spec_low = Array2::<Complex<f64>>::zeros((h, w));
            for u in 0..h {
                for v in 0..w {
                    let si = (u + sy) % h;
                    let sj = (v + sx) % w;
                    if mask.is_high(si, sj) {
                        spec_high[(u, v)] = spec[(u, v)];
                    } else {
                        spec_low[(u, v)] = spec[(u, v)];
                    }
                }
            }
            fft2d(&mut spec_high, &mut planner, true);
            fft2d(&mut spec_low, &mut planner, true);
            for i in 0..h {
                for j in 0..w {
                    high[(bi, ci, i, j)] = spec_high[(i, j)].re * norm;
                    low[(bi, ci, i, j)] = spec_low[(i, j)].re * norm;
                }
            }
        }
    }
    Ok((high, low))
}

/// Clamps a frequency component into `[0,1]` for use as a model input view
/// when `clamp_frequency_views` is enabled.
pub fn clamp_view(view: &Array4<f64>) -> Array4<f64> {
    view.mapv(|v| v.clamp(0.0, 1.0))
}
