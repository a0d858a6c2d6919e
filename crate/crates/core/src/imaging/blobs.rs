//! Procedural stand-in dataset: one textured ellipse per image on a dark
//! noise background, with class-specific hue and texture frequency.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::Rng;

use super::{ImageDataset, LabeledImage, Split, View};
use crate::rng;

/// Maximum per-image deviation of the ellipse hue from its class hue.
pub const BLOB_HUE_JITTER: f64 = 0.02;

const MIN_FOREGROUND: f64 = 0.08;
const MAX_FOREGROUND: f64 = 0.35;

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let sector = h.floor();
    let f = h - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
pub(crate) fn rgb_to_hue(rgb: [f64; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return None;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some(h / 6.0)
}

fn blob_image<R: Rng + ?Sized>(
    rng: &mut R,
    class: usize,
    classes: usize,
    size: usize,
) -> (Array3<f64>, Array2<u8>) {
    let s = size as f64;
    let fraction = rng.random_range(MIN_FOREGROUND..MAX_FOREGROUND);
    let aspect = rng.random_range(0.6..1.0);
    let a = (fraction * s * s / (PI * aspect)).sqrt();
    let b = aspect * a;
    let margin = a.max(b);
    let cx = rng.random_range(margin..=(s - margin).max(margin));
    let cy = rng.random_range(margin..=(s - margin).max(margin));
    let theta = rng.random_range(0.0..PI);
    let hue = class as f64 / classes as f64 + rng.random_range(-BLOB_HUE_JITTER..BLOB_HUE_JITTER);
    let frequency = 2.0 + 2.0 * class as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let stripe = rng.random_range(0.0..PI);

    let mut pixels = Array3::zeros((3, size, size));
    let mut mask = Array2::zeros((size, size));
    let (sin_t, cos_t) = theta.sin_cos();
    let (sin_s, cos_s) = stripe.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let u = (dx * cos_t + dy * sin_t) / a;
            let v = (-dx * sin_t + dy * cos_t) / b;
            let rgb = if u * u + v * v <= 1.0 {
                mask[[y, x]] = 1;
                let wave = (2.0 * PI * frequency * (px * cos_s + py * sin_s) / s + phase).sin();
                let value = 0.7 + 0.2 * wave + rng.random_range(-0.05..0.05);
                hsv_to_rgb(hue, 0.8, value)
            } else {
                let n = rng.random_range(0.0..0.15);
                [n, n, n]
            };
            for (c, val) in rgb.iter().enumerate() {
                pixels[[c, y, x]] = val.clamp(0.0, 1.0);
            }
        }
    }
    (pixels, mask)
}

/// Deterministic synthetic dataset of `classes * per_class` images.
///
/// Image `j` of class `k` is drawn from seed `rng_seed ^ (k * per_class + j)`;
/// its human mask is the exact ellipse footprint.
pub fn generate_blob_dataset(
    classes: usize,
    per_class: usize,
    size: usize,
    rng_seed: u64,
) -> ImageDataset {
    let mut images = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        for j in 0..per_class {
            let mut r = rng::item_rng(rng_seed, (k * per_class + j) as u64);
            let (pixels, mask) = blob_image(&mut r, k, classes, size);
            let view = if r.random::<bool>() {
                View::Surface
            } else {
                View::Section
            };
            images.push(LabeledImage {
                id: format!("class{k}/blob{j:04}"),
                pixels,
                label: k,
                human_mask: Some(mask),
                view: Some(view),
            });
        }
    }
    ImageDataset {
        images,
        class_names: (0..classes).map(|k| format!("class{k}")).collect(),
        split: Split::All,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_roundtrip_hue() {
        for h in [0.0, 0.1, 0.25, 0.5, 0.77, 0.95] {
            let got = rgb_to_hue(hsv_to_rgb(h, 0.8, 0.7)).unwrap();
            assert!((got - h).abs() < 1e-12, "{h} -> {got}");
        }
        assert_eq!(rgb_to_hue([0.3, 0.3, 0.3]), None);
    }

    #[test]
    fn counts_masks_and_range() {
        let ds = generate_blob_dataset(4, 50, 32, 1);
        assert_eq!(ds.len(), 200);
        ds.validate().unwrap();
        for im in &ds.images {
            let mask = im.human_mask.as_ref().unwrap();
            let fg = mask.iter().filter(|v| **v == 1).count() as f64 / mask.len() as f64;
            assert!((0.05..=0.5).contains(&fg), "{}: {fg}", im.id);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_blob_dataset(2, 3, 24, 9);
        let b = generate_blob_dataset(2, 3, 24, 9);
        assert_eq!(a, b);
        let c = generate_blob_dataset(2, 3, 24, 10);
        assert_ne!(a.images[0].pixels, c.images[0].pixels);
    }

    #[test]
    fn class_hues_are_separated() {
        let k = 4;
        let ds = generate_blob_dataset(k, 20, 32, 3);
        let mut means = Vec::new();
        for class in 0..k {
            // Circular mean of the foreground hue.
            let (mut s, mut c) = (0.0, 0.0);
            for im in ds.class_images(class) {
                let mask = im.human_mask.as_ref().unwrap();
                for ((y, x), m) in mask.indexed_iter() {
                    if *m == 1 {
                        let rgb = [im.pixels[[0, y, x]], im.pixels[[1, y, x]], im.pixels[[2, y, x]]];
                        if let Some(h) = rgb_to_hue(rgb) {
                            s += (2.0 * PI * h).sin();
                            c += (2.0 * PI * h).cos();
                        }
                    }
                }
            }
            means.push(s.atan2(c) / (2.0 * PI));
        }
        for i in 0..k {
            for j in i + 1..k {
                let d = (means[i] - means[j]).rem_euclid(1.0);
                let d = d.min(1.0 - d);
                assert!(d > BLOB_HUE_JITTER, "classes {i},{j}: hue distance {d}");
            }
        }
    }
}
