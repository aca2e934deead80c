//! Grayscale images, PGM storage, the synthetic corpus, messages and splits.

mod pgm;
mod synth;

pub use pgm::{load_pgm, parse_pgm, save_pgm, write_pgm, PgmError};
pub use synth::synth_dataset;

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::rng::keyed_rng;
use crate::Error;

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, Error> {
        if width == 0 || height == 0 || width * height != pixels.len() {
            return Err(Error::Contract(format!(
                "{width}x{height} image cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn same_dimensions(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Maps 0..=255 onto [−1, 1].
    pub fn to_unit_range(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect()
    }

    /// Inverse of [`GrayImage::to_unit_range`]: round((x+1)·127.5), clamped.
    pub fn from_unit_range(width: usize, height: usize, values: &[f64]) -> Result<Self, Error> {
        let pixels = values
            .iter()
            .map(|&x| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect();
        GrayImage::new(width, height, pixels)
    }
}

/// Secret message: an ordered bit string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct BitMessage {
    bits: Vec<bool>,
}

impl BitMessage {
    pub fn new(bits: Vec<bool>) -> Self {
        BitMessage { bits }
    }

    /// From 0/1 values; anything else is rejected.
    pub fn from_binary(values: &[u8]) -> Result<Self, Error> {
        values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Contract(format!("bit value {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(BitMessage::new)
    }

    /// Parses a string of '0'/'1' characters; whitespace is ignored.
    pub fn parse(text: &str) -> Result<Self, Error> {
        text.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Contract(format!("unexpected character {other:?} in bit string"))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(BitMessage::new)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn complement(&self) -> Self {
        BitMessage::new(self.bits.iter().map(|b| !b).collect())
    }

    /// {0,1} as reals.
    pub fn to_unit(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// {−1,+1} as reals.
    pub fn to_signed(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()
    }
}

impl std::fmt::Display for BitMessage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromIterator<bool> for BitMessage {
    fn from_iter<T: IntoIterator<Item = bool>>(iter: T) -> Self {
        BitMessage::new(iter.into_iter().collect())
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Synthetic { seed: u64 },
    Directory(PathBuf),
    Derived(String),
}

/// Images sharing one size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<GrayImage>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(images: Vec<GrayImage>, provenance: Provenance) -> Result<Self, Error> {
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().position(|im| !im.same_dimensions(first)) {
                return Err(Error::Contract(format!(
                    "image {bad} is {}x{}, expected {}x{}",
                    images[bad].width, images[bad].height, first.width, first.height
                )));
            }
        }
        Ok(Dataset { images, provenance })
    }

    pub fn images(&self) -> &[GrayImage] {
        &self.images
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Square side length, if the images are square.
    pub fn side(&self) -> Option<usize> {
        self.images
            .first()
            .filter(|im| im.width == im.height)
            .map(|im| im.width)
    }

    /// Loads every `*.pgm` file in `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self, Error> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        paths.sort();
        let images = paths.iter().map(|p| load_pgm(p)).collect::<Result<Vec<_>, _>>()?;
        Dataset::new(images, Provenance::Directory(dir.to_path_buf()))
    }
}

/// Uniform i.i.d. bits, deterministic per seed.
pub fn sample_message(length: usize, seed: u64) -> BitMessage {
    let mut rng = keyed_rng(seed, "message");
    (0..length).map(|_| rng.gen::<bool>()).collect()
}

/// Keyed shuffle, then the first `round(fraction·len)` images go to train.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), Error> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let n = dataset.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Contract(format!(
            "split of {n} images at {fraction} leaves one side empty"
        )));
    }
    let mut rng = keyed_rng(seed, "split");
    let order = crate::rng::permutation(n, &mut rng);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.images[i].clone()).collect::<Vec<_>>();
    let tag = |side: &str| Provenance::Derived(format!("{side} split (seed {seed}, fraction {fraction})"));
    Ok((
        Dataset::new(pick(&order[..n_train]), tag("train"))?,
        Dataset::new(pick(&order[n_train..]), tag("test"))?,
    ))
}
