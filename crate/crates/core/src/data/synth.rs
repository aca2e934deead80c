//! Desk-scale synthetic corpus. Each image layers a linear ramp, a few
//! soft Gaussian blobs, mildly blurred noise and one to three rectangles of
//! strong texture, then is stretched so its range covers at least [10, 245].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, GrayImage, Provenance};
use crate::rng::{indexed_rng, StreamRng};
use crate::Error;

pub fn synth_dataset(count: usize, side: usize, seed: u64) -> Result<Dataset, Error> {
    if count == 0 {
        return Err(Error::Contract("dataset must contain at least one image".into()));
    }
    if side == 0 || side % 16 != 0 {
        return Err(Error::Contract(format!("image side {side} must be a positive multiple of 16")));
    }
    let images = (0..count)
        .map(|i| synth_image(side, &mut indexed_rng(seed, "synth", i as u64)))
        .collect();
    Dataset::new(images, Provenance::Synthetic { seed })
}

fn box_blur(src: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..side {
        for x in 0..side {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(side - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(side - 1) {
                    acc += src[yy * side + xx];
                    n += 1.0;
                }
            }
            out[y * side + x] = acc / n;
        }
    }
    out
}

fn synth_image(side: usize, rng: &mut StreamRng) -> GrayImage {
    let s = side as f64;
    let mut canvas = vec![0.0f64; side * side];

    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let slope = rng.gen_range(40.0..120.0) / s;
    let (dx, dy) = (angle.cos() * slope, angle.sin() * slope);
    for y in 0..side {
        for x in 0..side {
            canvas[y * side + x] = dx * x as f64 + dy * y as f64;
        }
    }

    for _ in 0..rng.gen_range(2..=4) {
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let sigma = rng.gen_range(s / 6.0..s / 2.5);
        let amp = rng.gen_range(-70.0..70.0);
        for y in 0..side {
            for x in 0..side {
                let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                canvas[y * side + x] += amp * (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    let white = Normal::new(0.0, rng.gen_range(2.0..8.0)).expect("positive std");
    let noise: Vec<f64> = (0..side * side).map(|_| white.sample(rng)).collect();
    let soft = box_blur(&box_blur(&noise, side), side);
    canvas.iter_mut().zip(&soft).for_each(|(c, n)| *c += n);

    for _ in 0..rng.gen_range(1..=3) {
        let w = rng.gen_range(side / 4..=side / 2);
        let h = rng.gen_range(side / 4..=side / 2);
        let x0 = rng.gen_range(0..=side - w);
        let y0 = rng.gen_range(0..=side - h);
        let amp = rng.gen_range(25.0..70.0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                canvas[y * side + x] += rng.gen_range(-amp..amp);
            }
        }
    }

    let lo = canvas.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = canvas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (out_lo, out_hi) = (rng.gen_range(0.0..10.0), rng.gen_range(245.0..255.0));
    let span = (hi - lo).max(1e-9);
    let pixels = canvas
        .iter()
        .map(|v| (out_lo + (v - lo) / span * (out_hi - out_lo)).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::new(side, side, pixels).expect("side*side pixels")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neighborhood_variance(im: &GrayImage, x: usize, y: usize) -> f64 {
        let mut vals = Vec::with_capacity(9);
        for yy in y.saturating_sub(1)..=(y + 1).min(im.height() - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(im.width() - 1) {
                vals.push(im.get(xx, yy) as f64);
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_dataset(4, 32, 7).unwrap(), synth_dataset(4, 32, 7).unwrap());
        assert_ne!(synth_dataset(4, 32, 7).unwrap(), synth_dataset(4, 32, 8).unwrap());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(synth_dataset(0, 32, 1).is_err());
        assert!(synth_dataset(3, 30, 1).is_err());
    }

    #[test]
    fn images_are_nondegenerate_and_span_range() {
        let ds = synth_dataset(20, 32, 3).unwrap();
        for im in ds.images() {
            let px = im.pixels();
            assert!(*px.iter().min().unwrap() <= 10);
            assert!(*px.iter().max().unwrap() >= 245);
            let m = px.iter().map(|&p| p as f64).sum::<f64>() / px.len() as f64;
            let var = px.iter().map(|&p| (p as f64 - m).powi(2)).sum::<f64>();
            assert!(var > 0.0);
        }
    }

    #[test]
    fn texture_diversity() {
        let ds = synth_dataset(100, 32, 11).unwrap();
        let mut vars: Vec<f64> = ds
            .images()
            .iter()
            .flat_map(|im| {
                (0..im.height()).flat_map(move |y| (0..im.width()).map(move |x| neighborhood_variance(im, x, y)))
            })
            .collect();
        vars.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p10 = vars[vars.len() / 10];
        let p90 = vars[vars.len() * 9 / 10];
        assert!(p90 > 5.0 * p10, "p10={p10} p90={p90}");
    }
}
