//! Evaluation primitives: PSNR, bit error rate, detection accuracy and
//! payload accounting.

use crate::data::{BitMessage, GrayImage};
use crate::Error;

/// Returned by [`psnr`] for identical images; written as `inf` in CSV.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

/// `10·log₁₀(255² / MSE)` over 8-bit values.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64, Error> {
    if !a.same_dimensions(b) {
        return Err(Error::Contract(format!(
            "psnr of {}x{} against {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let sse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    let mse = sse / a.pixel_count() as f64;
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// Formats a PSNR value for CSV output.
pub fn format_psnr(db: f64) -> String {
    if db == PSNR_IDENTICAL {
        "inf".to_string()
    } else {
        format!("{db}")
    }
}

pub fn bit_error_rate(m: &BitMessage, m_hat: &BitMessage) -> Result<f64, Error> {
    if m.len() != m_hat.len() {
        return Err(Error::Contract(format!(
            "bit error rate of {} bits against {}",
            m.len(),
            m_hat.len()
        )));
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    let wrong = m.bits().iter().zip(m_hat.bits()).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / m.len() as f64)
}

/// Fraction of samples where `prob >= threshold` agrees with `is_cover`.
pub fn detection_accuracy(is_cover: &[bool], probs: &[f64], threshold: f64) -> Result<f64, Error> {
    if is_cover.is_empty() {
        return Err(Error::Contract("detection accuracy of an empty set".into()));
    }
    if is_cover.len() != probs.len() {
        return Err(Error::Contract(format!(
            "{} labels but {} probabilities",
            is_cover.len(),
            probs.len()
        )));
    }
    let hits = is_cover
        .iter()
        .zip(probs)
        .filter(|(&label, &p)| (p >= threshold) == label)
        .count();
    Ok(hits as f64 / is_cover.len() as f64)
}

fn check_bpp(bpp: f64) -> Result<(), Error> {
    if bpp > 0.0 && bpp <= 1.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("embedding rate {bpp} bpp outside (0, 1]")))
    }
}

/// `floor(side²·bpp)`.
pub fn payload_bits(image_side: usize, bpp: f64) -> Result<usize, Error> {
    payload_bits_for(image_side * image_side, bpp)
}

/// `floor(pixels·bpp)` for arbitrary image shapes.
pub fn payload_bits_for(pixel_count: usize, bpp: f64) -> Result<usize, Error> {
    check_bpp(bpp)?;
    Ok((pixel_count as f64 * bpp).floor() as usize)
}

/// Aggregate results of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// Mean PSNR in dB, or [`PSNR_IDENTICAL`].
    pub psnr_db: f64,
    pub bit_accuracy: f64,
    pub message_exact_rate: f64,
    pub detection_accuracy: f64,
    pub embedding_rate_bpp: f64,
}
