//! Binary PGM ("P5", maxval 255).
//!
//! Header grammar: magic, then width, height and maxval as ASCII decimals
//! separated by whitespace, where `#` starts a comment running to end of
//! line. Exactly one whitespace byte follows maxval, then the raster.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::GrayImage;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("not a PGM file (magic {0:?})")]
    BadMagic(String),
    #[error("unsupported netpbm variant {0}; only binary P5 is accepted")]
    UnsupportedFormat(String),
    #[error("maxval {0} unsupported; only 255 is accepted")]
    BadMaxval(u64),
    #[error("raster truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, PgmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PgmError::Malformed(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::Malformed(format!("{what} out of range")))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    if bytes.len() < 2 {
        return Err(PgmError::BadMagic(String::from_utf8_lossy(bytes).into_owned()));
    }
    let magic = &bytes[..2];
    match magic {
        b"P5" => {}
        [b'P', b'1'..=b'7'] => {
            return Err(PgmError::UnsupportedFormat(String::from_utf8_lossy(magic).into_owned()))
        }
        _ => return Err(PgmError::BadMagic(String::from_utf8_lossy(magic).into_owned())),
    }
    let mut cur = Cursor { bytes, pos: 2 };
    if !cur.bytes.get(cur.pos).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(PgmError::Malformed("missing whitespace after magic".into()));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PgmError::Malformed(format!("degenerate size {width}x{height}")));
    }
    if maxval != 255 {
        return Err(PgmError::BadMaxval(maxval));
    }
    match cur.bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(PgmError::Malformed("missing whitespace after maxval".into())),
    }
    let expected = (width as usize)
        .checked_mul(height as usize)
        .ok_or_else(|| PgmError::Malformed("image too large".into()))?;
    let raster = &bytes[cur.pos..];
    if raster.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            found: raster.len(),
        });
    }
    GrayImage::new(width as usize, height as usize, raster[..expected].to_vec())
        .map_err(|e| PgmError::Malformed(e.to_string()))
}

pub fn write_pgm<W: Write>(image: &GrayImage, mut out: W) -> std::io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", image.width(), image.height())?;
    out.write_all(image.pixels())
}

pub fn load_pgm(path: &Path) -> Result<GrayImage, PgmError> {
    parse_pgm(&std::fs::read(path)?)
}

pub fn save_pgm(image: &GrayImage, path: &Path) -> Result<(), PgmError> {
    let mut buf = Vec::with_capacity(image.pixel_count() + 32);
    write_pgm(image, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(im: &GrayImage) -> Vec<u8> {
        let mut buf = Vec::new();
        write_pgm(im, &mut buf).unwrap();
        buf
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let im = GrayImage::new(16, 16, (0..256).map(|i| (i * 37 % 256) as u8).collect()).unwrap();
        save_pgm(&im, &path).unwrap();
        assert_eq!(load_pgm(&path).unwrap(), im);
    }

    #[test]
    fn ascii_variant_is_unsupported() {
        assert!(matches!(
            parse_pgm(b"P2\n2 2\n255\n0 0 0 0\n"),
            Err(PgmError::UnsupportedFormat(m)) if m == "P2"
        ));
        assert!(matches!(parse_pgm(b"GIF89a"), Err(PgmError::BadMagic(_))));
    }

    #[test]
    fn comments_and_odd_whitespace() {
        let mut bytes = b"P5 # made by hand\n  3\t# width done\n2\r\n# maxval next\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let im = parse_pgm(&bytes).unwrap();
        assert_eq!((im.width(), im.height()), (3, 2));
        assert_eq!(im.pixels(), &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn raster_may_start_with_whitespace_byte() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[b'\n', b' ']);
        assert_eq!(parse_pgm(&bytes).unwrap().pixels(), &[10, 32]);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(parse_pgm(b"P5\n2 2\n65535\n"), Err(PgmError::BadMaxval(65535))));
        assert!(matches!(
            parse_pgm(b"P5\n2 2\n255\n\x01\x02\x03"),
            Err(PgmError::Truncated { expected: 4, found: 3 })
        ));
        assert!(matches!(parse_pgm(b"P5\nx 2\n255\n"), Err(PgmError::Malformed(_))));
    }

    proptest! {
        #[test]
        fn writer_output_reparses(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let pixels = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
            let im = GrayImage::new(w, h, pixels).unwrap();
            let bytes = encode(&im);
            let back = parse_pgm(&bytes).unwrap();
            prop_assert_eq!(&back, &im);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
