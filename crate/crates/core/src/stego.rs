//! Classical spatial-domain embedding.
//!
//! * LSB matching (±1 embedding) along a keyed pseudorandom pixel path.
//! * Cost-weighted distortion `Σ cost(i)·|C(i) − S(i)|` with pluggable cost maps.
//! * A distortion-minimizing adaptive embedding simulator: it modifies the
//!   cheapest pixels and does not support blind extraction.

use rand::Rng;
use thiserror::Error;

use crate::data::{BitMessage, GrayImage};
use crate::rng::{keyed_rng, permutation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StegoError {
    #[error("message of {requested} bits exceeds capacity of {max_bits} bits")]
    Capacity { requested: usize, max_bits: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violated: {0}")]
    Contract(String),
}

/// Shared secret selecting the pixel visiting order and the ±1 coins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StegoKey(pub u64);

impl StegoKey {
    /// Keyed permutation of all pixel indices of a `width x height` image.
    pub fn path(&self, width: usize, height: usize) -> Vec<usize> {
        let mut rng = keyed_rng(self.0 ^ ((width as u64) << 32 | height as u64), "stego-path");
        permutation(width * height, &mut rng)
    }

    fn coins(&self) -> impl Rng {
        keyed_rng(self.0, "stego-coin")
    }
}

/// Per-pixel modification costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    width: usize,
    height: usize,
    costs: Vec<f64>,
}

impl CostMap {
    pub fn new(width: usize, height: usize, costs: Vec<f64>) -> Result<Self, StegoError> {
        if costs.len() != width * height {
            return Err(StegoError::Dimension(format!(
                "{} costs for a {width}x{height} image",
                costs.len()
            )));
        }
        if let Some(bad) = costs.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(StegoError::Contract(format!("cost {bad} is not a finite non-negative value")));
        }
        Ok(CostMap { width, height, costs })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    fn matches(&self, image: &GrayImage) -> bool {
        self.width == image.width() && self.height == image.height()
    }
}

fn match_pixel<R: Rng>(pixel: u8, bit: bool, coins: &mut R) -> u8 {
    if (pixel & 1 == 1) == bit {
        return pixel;
    }
    match pixel {
        0 => 1,
        255 => 254,
        p if coins.gen::<bool>() => p + 1,
        p => p - 1,
    }
}

/// Hides `message` in the LSBs of the first `message.len()` pixels of the
/// key's path, moving mismatched pixels by ±1.
pub fn lsb_matching_embed(cover: &GrayImage, message: &BitMessage, key: StegoKey) -> Result<GrayImage, StegoError> {
    let capacity = cover.pixel_count();
    if message.len() > capacity {
        return Err(StegoError::Capacity {
            requested: message.len(),
            max_bits: capacity,
        });
    }
    let path = key.path(cover.width(), cover.height());
    let mut coins = key.coins();
    let mut stego = cover.clone();
    let px = stego.pixels_mut();
    for (&idx, &bit) in path.iter().zip(message.bits()) {
        px[idx] = match_pixel(px[idx], bit, &mut coins);
    }
    Ok(stego)
}

pub fn lsb_extract(stego: &GrayImage, key: StegoKey, length: usize) -> Result<BitMessage, StegoError> {
    let capacity = stego.pixel_count();
    if length > capacity {
        return Err(StegoError::Capacity {
            requested: length,
            max_bits: capacity,
        });
    }
    let path = key.path(stego.width(), stego.height());
    Ok(path[..length].iter().map(|&i| stego.pixels()[i] & 1 == 1).collect())
}

/// `Σ cost(i)·|C(i) − S(i)|`.
pub fn distortion(cover: &GrayImage, stego: &GrayImage, costs: &CostMap) -> Result<f64, StegoError> {
    if !cover.same_dimensions(stego) || !costs.matches(cover) {
        return Err(StegoError::Dimension(format!(
            "cover {}x{}, stego {}x{}, costs {}x{}",
            cover.width(),
            cover.height(),
            stego.width(),
            stego.height(),
            costs.width,
            costs.height
        )));
    }
    Ok(cover
        .pixels()
        .iter()
        .zip(stego.pixels())
        .zip(&costs.costs)
        .map(|((&c, &s), &w)| w * (c as f64 - s as f64).abs())
        .sum())
}

pub fn cost_uniform(cover: &GrayImage) -> CostMap {
    CostMap {
        width: cover.width(),
        height: cover.height(),
        costs: vec![1.0; cover.pixel_count()],
    }
}

/// `1 / (1 + σ²)` with σ² the population variance of the (edge-clipped)
/// 3×3 neighborhood: flat regions cost ~1, busy texture ~0.
pub fn cost_texture(cover: &GrayImage) -> Result<CostMap, StegoError> {
    let (w, h) = (cover.width(), cover.height());
    if w < 3 || h < 3 {
        return Err(StegoError::Dimension(format!("texture cost needs at least 3x3, got {w}x{h}")));
    }
    let mut costs = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let v = cover.get(xx, yy) as f64;
                    sum += v;
                    sq += v * v;
                    n += 1.0;
                }
            }
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            costs.push(1.0 / (1.0 + var));
        }
    }
    Ok(CostMap { width: w, height: h, costs })
}

/// The `count` cheapest pixels, ties resolved by position on the key's path.
pub fn select_embedding_sites(costs: &CostMap, count: usize, key: StegoKey) -> Result<Vec<usize>, StegoError> {
    let n = costs.costs.len();
    if count > n {
        return Err(StegoError::Capacity {
            requested: count,
            max_bits: n,
        });
    }
    let mut order = key.path(costs.width, costs.height);
    // Stable sort keeps path order among equal costs.
    order.sort_by(|&a, &b| costs.costs[a].total_cmp(&costs.costs[b]));
    order.truncate(count);
    Ok(order)
}

/// Number of pixels an adaptive embedding at `payload_bpp` touches.
pub fn adaptive_site_count(pixel_count: usize, payload_bpp: f64) -> Result<usize, StegoError> {
    if !(payload_bpp > 0.0 && payload_bpp <= 1.0) {
        return Err(StegoError::Contract(format!("payload {payload_bpp} bpp outside (0, 1]")));
    }
    Ok((payload_bpp * pixel_count as f64).floor() as usize)
}

/// Simulates distortion-minimizing embedding: fresh random bits are
/// LSB-matched into the cheapest `floor(bpp·N)` pixels.
pub fn adaptive_embed_simulate(
    cover: &GrayImage,
    payload_bpp: f64,
    costs: &CostMap,
    key: StegoKey,
) -> Result<GrayImage, StegoError> {
    if !costs.matches(cover) {
        return Err(StegoError::Dimension(format!(
            "cost map {}x{} for a {}x{} cover",
            costs.width,
            costs.height,
            cover.width(),
            cover.height()
        )));
    }
    let count = adaptive_site_count(cover.pixel_count(), payload_bpp)?;
    let sites = select_embedding_sites(costs, count, key)?;
    let mut bits = keyed_rng(key.0, "adaptive-bits");
    let mut coins = key.coins();
    let mut stego = cover.clone();
    let px = stego.pixels_mut();
    for idx in sites {
        px[idx] = match_pixel(px[idx], bits.gen(), &mut coins);
    }
    Ok(stego)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_message;
    use proptest::prelude::*;
    use rand::Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = keyed_rng(seed, "test-image");
        GrayImage::new(w, h, (0..w * h).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn matching_lsb_is_untouched() {
        let cover = GrayImage::filled(1, 1, 100);
        let stego = lsb_matching_embed(&cover, &BitMessage::new(vec![false]), StegoKey(1)).unwrap();
        assert_eq!(stego.pixels(), &[100]);
    }

    #[test]
    fn mismatch_moves_by_keyed_coin() {
        let cover = GrayImage::filled(1, 1, 100);
        let msg = BitMessage::new(vec![true]);
        let mut seen = std::collections::HashSet::new();
        for k in 0..32 {
            let a = lsb_matching_embed(&cover, &msg, StegoKey(k)).unwrap().pixels()[0];
            let b = lsb_matching_embed(&cover, &msg, StegoKey(k)).unwrap().pixels()[0];
            assert_eq!(a, b);
            assert!(a == 99 || a == 101);
            seen.insert(a);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn boundaries_clamp_inward() {
        let msg = BitMessage::new(vec![true]);
        for k in 0..8 {
            let lo = lsb_matching_embed(&GrayImage::filled(1, 1, 0), &msg, StegoKey(k)).unwrap();
            assert_eq!(lo.pixels(), &[1]);
        }
        let msg = BitMessage::new(vec![false]);
        for k in 0..8 {
            let hi = lsb_matching_embed(&GrayImage::filled(1, 1, 255), &msg, StegoKey(k)).unwrap();
            assert_eq!(hi.pixels(), &[254]);
        }
    }

    #[test]
    fn capacity_errors_report_max_bits() {
        let cover = GrayImage::filled(4, 4, 7);
        let msg = sample_message(17, 1);
        assert_eq!(
            lsb_matching_embed(&cover, &msg, StegoKey(0)).unwrap_err(),
            StegoError::Capacity {
                requested: 17,
                max_bits: 16
            }
        );
        assert!(matches!(lsb_extract(&cover, StegoKey(0), 17), Err(StegoError::Capacity { max_bits: 16, .. })));
        assert!(lsb_extract(&cover, StegoKey(0), 0).unwrap().is_empty());
    }

    #[test]
    fn roundtrip_16x16() {
        let cover = noise_image(16, 16, 3);
        let msg = sample_message(64, 4);
        let stego = lsb_matching_embed(&cover, &msg, StegoKey(99)).unwrap();
        assert_eq!(lsb_extract(&stego, StegoKey(99), 64).unwrap(), msg);
    }

    #[test]
    fn wrong_key_reads_noise() {
        let mut agree = 0usize;
        let trials = 1000;
        for t in 0..trials {
            let cover = noise_image(8, 8, 1000 + t);
            let msg = sample_message(1, t);
            let stego = lsb_matching_embed(&cover, &msg, StegoKey(t)).unwrap();
            let got = lsb_extract(&stego, StegoKey(t + 7_777_777), 1).unwrap();
            agree += (got == msg) as usize;
        }
        let acc = agree as f64 / trials as f64;
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn distortion_cases() {
        let cover = noise_image(4, 4, 5);
        let uni = cost_uniform(&cover);
        assert_eq!(distortion(&cover, &cover, &uni).unwrap(), 0.0);
        let mut stego = cover.clone();
        for i in [0, 5, 9] {
            let p = &mut stego.pixels_mut()[i];
            *p = if *p == 255 { 254 } else { *p + 1 };
        }
        assert_eq!(distortion(&cover, &stego, &uni).unwrap(), 3.0);
        let other = GrayImage::filled(4, 5, 0);
        assert!(matches!(distortion(&cover, &other, &uni), Err(StegoError::Dimension(_))));
    }

    #[test]
    fn distortion_matches_pixel_loop() {
        let mut rng = keyed_rng(6, "t");
        let cover = noise_image(8, 8, 6);
        let costs = CostMap::new(8, 8, (0..64).map(|_| rng.gen_range(0.0..3.0)).collect()).unwrap();
        let mut stego = cover.clone();
        for p in stego.pixels_mut() {
            if rng.gen_bool(0.5) {
                *p = if *p == 0 { 1 } else { *p - 1 };
            }
        }
        let mut want = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let i = y * 8 + x;
                want += costs.costs()[i] * (cover.get(x, y) as f64 - stego.get(x, y) as f64).abs();
            }
        }
        assert!((distortion(&cover, &stego, &costs).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_cost_shape() {
        let c = cost_uniform(&GrayImage::filled(64, 64, 3));
        assert_eq!(c.costs().len(), 4096);
        assert!(c.costs().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn texture_cost_of_constant_image_is_one() {
        let c = cost_texture(&GrayImage::filled(5, 4, 77)).unwrap();
        assert!(c.costs().iter().all(|&v| v == 1.0));
        assert!(cost_texture(&GrayImage::filled(2, 5, 0)).is_err());
    }

    #[test]
    fn texture_cost_on_checkerboard() {
        let (w, h) = (6, 6);
        let px = (0..w * h).map(|i| if (i % w + i / w) % 2 == 0 { 0 } else { 255 }).collect();
        let im = GrayImage::new(w, h, px).unwrap();
        let c = cost_texture(&im).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let samples: Vec<f64> = (0..9).map(|k| im.get(x + k % 3 - 1, y + k / 3 - 1) as f64).collect();
                let m = samples.iter().sum::<f64>() / 9.0;
                let var = samples.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / 9.0;
                assert!((c.costs()[y * w + x] - 1.0 / (1.0 + var)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn texture_cost_decreases_with_ramp_steepness() {
        let costs: Vec<f64> = (1..6)
            .map(|step| {
                let px = (0..25).map(|i| ((i % 5) * step * 10) as u8).collect();
                let im = GrayImage::new(5, 5, px).unwrap();
                cost_texture(&im).unwrap().costs()[12]
            })
            .collect();
        assert!(costs.windows(2).all(|w| w[1] < w[0]), "{costs:?}");
    }

    #[test]
    fn adaptive_touches_floor_of_payload() {
        let cover = noise_image(64, 64, 8);
        assert_eq!(adaptive_site_count(4096, 0.4).unwrap(), 1638);
        let costs = cost_texture(&cover).unwrap();
        let stego = adaptive_embed_simulate(&cover, 0.4, &costs, StegoKey(3)).unwrap();
        let changed = cover.pixels().iter().zip(stego.pixels()).filter(|(a, b)| a != b).count();
        assert!(changed <= 1638 && changed > 600, "{changed}");
        assert!(adaptive_embed_simulate(&cover, 0.0, &costs, StegoKey(3)).is_err());
        assert!(adaptive_embed_simulate(&cover, 1.5, &costs, StegoKey(3)).is_err());
    }

    #[test]
    fn uniform_costs_follow_the_key_path() {
        let cover = noise_image(64, 64, 9);
        let sites = select_embedding_sites(&cost_uniform(&cover), 1638, StegoKey(5)).unwrap();
        assert_eq!(sites, StegoKey(5).path(64, 64)[..1638].to_vec());
    }

    #[test]
    fn texture_costs_pick_the_noisy_half() {
        // Left half flat, right half noise.
        let mut rng = keyed_rng(10, "t");
        let px = (0..32 * 32).map(|i| if i % 32 < 16 { 128 } else { rng.gen() }).collect();
        let im = GrayImage::new(32, 32, px).unwrap();
        let costs = cost_texture(&im).unwrap();
        let k = adaptive_site_count(1024, 0.4).unwrap();
        let sites = select_embedding_sites(&costs, k, StegoKey(2)).unwrap();
        // Columns 0..=14 are fully flat; column 15 borders the noise.
        assert!(sites.iter().all(|&i| i % 32 >= 15));
        let mut sorted = costs.costs().to_vec();
        sorted.sort_by(f64::total_cmp);
        let oracle: f64 = sorted[..k].iter().sum();
        let chosen: f64 = sites.iter().map(|&i| costs.costs()[i]).sum();
        assert!((oracle - chosen).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn embed_extract_identity(w in 1usize..24, h in 1usize..24, seed in any::<u64>(), key in any::<u64>(), frac in 0.0f64..=1.0) {
            let cover = noise_image(w, h, seed);
            let len = (frac * (w * h) as f64) as usize;
            let msg = sample_message(len, seed ^ 1);
            let stego = lsb_matching_embed(&cover, &msg, StegoKey(key)).unwrap();
            prop_assert_eq!(lsb_extract(&stego, StegoKey(key), len).unwrap(), msg.clone());
            let mut changed = 0;
            for (a, b) in cover.pixels().iter().zip(stego.pixels()) {
                let d = (*a as i32 - *b as i32).abs();
                prop_assert!(d <= 1);
                changed += d as usize;
            }
            prop_assert!(changed <= msg.len());
            let l1: f64 = cover.pixels().iter().zip(stego.pixels()).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
            prop_assert_eq!(distortion(&cover, &stego, &cost_uniform(&cover)).unwrap(), l1);
        }

        #[test]
        fn adaptive_selection_is_sorted_prefix(seed in any::<u64>(), key in any::<u64>(), bpp in 0.01f64..=1.0) {
            let cover = noise_image(16, 16, seed);
            let costs = cost_texture(&cover).unwrap();
            let k = adaptive_site_count(256, bpp).unwrap();
            let sites = select_embedding_sites(&costs, k, StegoKey(key)).unwrap();
            let mut sorted = costs.costs().to_vec();
            sorted.sort_by(f64::total_cmp);
            let want: f64 = sorted[..k].iter().sum();
            let got: f64 = sites.iter().map(|&i| costs.costs()[i]).sum();
            prop_assert!((want - got).abs() < 1e-9);
        }
    }
}
