//! Stochastic augmentation set: random resized crop, horizontal flip,
//! color jitter and random grayscale, applied per sample.

use super::ImageBatch;
use ndarray::{Array3, Array4, ArrayView3, ArrayViewMut3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Parameters of the augmentation set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub hflip_prob: f64,
    /// (brightness, contrast, saturation, hue) strengths.
    pub jitter_strengths: [f64; 4],
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_min: 0.2,
            crop_scale_max: 1.0,
            hflip_prob: 0.5,
            jitter_strengths: [0.4, 0.4, 0.4, 0.1],
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Identity configuration: no-ops every transform.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            hflip_prob: 0.0,
            jitter_strengths: [0.0; 4],
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let probs = [self.hflip_prob, self.jitter_prob, self.grayscale_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(crate::Error::Validation("probability outside [0,1]".into()));
        }
        if !(self.crop_scale_min > 0.0
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return Err(crate::Error::Validation(
                "crop scales must satisfy 0 < min <= max <= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Bilinear resize of a `[C, h, w]` image to `out_h × out_w` using
/// half-pixel centers. Resizing to the same size is the identity.
pub fn resize_bilinear(src: &ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let top = src[(ci, y0, x0)] * (1.0 - wx) + src[(ci, y0, x1)] * wx;
                let bot = src[(ci, y1, x0)] * (1.0 - wx) + src[(ci, y1, x1)] * wx;
                out[(ci, oy, ox)] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn luminance(img: &ArrayView3<f64>) -> ndarray::Array2<f64> {
    let (c, h, w) = img.dim();
    if c == 1 {
        return img.index_axis(Axis(0), 0).to_owned();
    }
    let mut lum = ndarray::Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            lum[(y, x)] =
                0.299 * img[(0, y, x)] + 0.587 * img[(1, y, x)] + 0.114 * img[(2, y, x)];
        }
    }
    lum
}

fn clamp01(img: &mut Array3<f64>) {
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn apply_jitter(img: &mut Array3<f64>, strengths: [f64; 4], rng: &mut impl Rng) {
    let [br, co, sa, hu] = strengths;
    // Factors are always drawn so the random stream does not depend on
    // channel count.
    let fb = rng.gen_range((1.0 - br).max(0.0)..=1.0 + br);
    let fc = rng.gen_range((1.0 - co).max(0.0)..=1.0 + co);
    let fs = rng.gen_range((1.0 - sa).max(0.0)..=1.0 + sa);
    let fh = rng.gen_range(-hu..=hu);
    let c = img.dim().0;

    if br > 0.0 {
        img.mapv_inplace(|v| v * fb);
        clamp01(img);
    }
    if co > 0.0 {
        let mean = luminance(&img.view()).mean().unwrap_or(0.0);
        img.mapv_inplace(|v| fc * v + (1.0 - fc) * mean);
        clamp01(img);
    }
    if sa > 0.0 && c == 3 {
        let lum = luminance(&img.view());
        for y in 0..img.dim().1 {
            for x in 0..img.dim().2 {
                for ci in 0..3 {
                    img[(ci, y, x)] = fs * img[(ci, y, x)] + (1.0 - fs) * lum[(y, x)];
                }
            }
        }
        clamp01(img);
    }
    if hu > 0.0 && c == 3 {
        for y in 0..img.dim().1 {
            for x in 0..img.dim().2 {
                let (h, s, v) = rgb_to_hsv(img[(0, y, x)], img[(1, y, x)], img[(2, y, x)]);
                let (r, g, b) = hsv_to_rgb(h + fh, s, v);
                img[(0, y, x)] = r;
                img[(1, y, x)] = g;
                img[(2, y, x)] = b;
            }
        }
        clamp01(img);
    }
}

fn apply_grayscale(img: &mut Array3<f64>) {
    let lum = luminance(&img.view());
    for mut ch in img.axis_iter_mut(Axis(0)) {
        ch.assign(&lum);
    }
}

fn augment_one(mut img: ArrayViewMut3<f64>, cfg: &AugmentConfig, rng: &mut impl Rng) {
    let (_, h, w) = img.dim();
    // random resized crop (square aspect), resampled back to h×w
    let scale = rng.gen_range(cfg.crop_scale_min..=cfg.crop_scale_max);
    let side = ((h as f64) * scale.sqrt()).round().clamp(1.0, h as f64) as usize;
    let top = if side < h { rng.gen_range(0..=h - side) } else { 0 };
    let left = if side < w { rng.gen_range(0..=w - side) } else { 0 };
    let crop = img
        .slice(ndarray::s![.., top..top + side, left..left + side])
        .to_owned();
    let mut out = resize_bilinear(&crop.view(), h, w);

    if rng.gen_bool(cfg.hflip_prob) {
        out.invert_axis(Axis(2));
    }
    if rng.gen_bool(cfg.jitter_prob) {
        apply_jitter(&mut out, cfg.jitter_strengths, rng);
    }
    if rng.gen_bool(cfg.grayscale_prob) {
        apply_grayscale(&mut out);
    }
    clamp01(&mut out);
    img.assign(&out);
}

/// Applies the augmentation set to every image in the batch. Each sample
/// draws its own parameters from `rng`, so the output is a deterministic
/// function of `(x, cfg, rng state)`.
pub fn augment(x: &ImageBatch, cfg: &AugmentConfig, rng: &mut impl Rng) -> ImageBatch {
    let mut out: Array4<f64> = x.data.clone();
    for i in 0..out.dim().0 {
        augment_one(out.index_axis_mut(Axis(0), i), cfg, rng);
    }
    ImageBatch::from_raw(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{rng_for, stream};
    use ndarray::Array4;

    fn test_batch(b: usize, c: usize, s: usize, seed: u64) -> ImageBatch {
        let mut rng = rng_for(seed, &[stream::AUGMENT, 99]);
        let data = Array4::from_shape_fn((b, c, s, s), |_| rng.gen_range(0.0..1.0));
        ImageBatch::new(data).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let x = test_batch(4, 3, 8, 0);
        let mut rng = rng_for(7, &[stream::AUGMENT]);
        let y = augment(&x, &AugmentConfig::identity(), &mut rng);
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn fixed_seed_is_bitwise_deterministic() {
        let x = test_batch(3, 3, 8, 1);
        let cfg = AugmentConfig::default();
        let a = augment(&x, &cfg, &mut rng_for(5, &[stream::AUGMENT]));
        let b = augment(&x, &cfg, &mut rng_for(5, &[stream::AUGMENT]));
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn output_shape_and_range_preserved() {
        let x = test_batch(2, 3, 16, 2);
        let cfg = AugmentConfig::default();
        let mut rng = rng_for(11, &[stream::AUGMENT]);
        for _ in 0..20 {
            let y = augment(&x, &cfg, &mut rng);
            assert_eq!(y.data.dim(), x.data.dim());
            assert!(y.data.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        }
    }

    #[test]
    fn flip_rate_matches_probability() {
        // flips only, on an asymmetric image; Monte-Carlo estimate of the
        // flip fraction must sit near 0.5
        let mut cfg = AugmentConfig::identity();
        cfg.hflip_prob = 0.5;
        let mut data = Array4::<f64>::zeros((1, 1, 4, 4));
        data[(0, 0, 0, 0)] = 1.0;
        let x = ImageBatch::new(data).unwrap();
        let mut rng = rng_for(3, &[stream::AUGMENT]);
        let mut flips = 0;
        let n = 1000;
        for _ in 0..n {
            let y = augment(&x, &cfg, &mut rng);
            if y.data[(0, 0, 0, 3)] == 1.0 {
                flips += 1;
            }
        }
        let frac = flips as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.05, "flip fraction {frac}");
    }

    #[test]
    fn grayscale_replicates_luminance() {
        let mut cfg = AugmentConfig::identity();
        cfg.grayscale_prob = 1.0;
        let x = test_batch(2, 3, 6, 4);
        let y = augment(&x, &cfg, &mut rng_for(0, &[stream::AUGMENT]));
        for b in 0..2 {
            for yy in 0..6 {
                for xx in 0..6 {
                    assert_eq!(y.data[(b, 0, yy, xx)], y.data[(b, 1, yy, xx)]);
                    assert_eq!(y.data[(b, 1, yy, xx)], y.data[(b, 2, yy, xx)]);
                }
            }
        }
    }

    #[test]
    fn bad_config_rejected() {
        let mut cfg = AugmentConfig::default();
        cfg.hflip_prob = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.crop_scale_min = 0.0;
        assert!(cfg.validate().is_err());
    }
}
