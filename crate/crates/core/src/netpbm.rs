//! Binary netpbm codecs (P5 grayscale, P6 color), dependency-free.
//!
//! Images are stored with maxval 255. The reader tolerates comment lines
//! and arbitrary whitespace in the header, which is all the flexibility the
//! dataset layout needs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Writes an 8-bit grayscale PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "pgm {width}x{height} wants {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    out.flush()?;
    Ok(())
}

/// Writes an 8-bit RGB PPM (P6); `pixels` is interleaved r, g, b.
pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height * 3 {
        return Err(Error::shape(format!(
            "ppm {width}x{height} wants {} bytes, got {}",
            width * height * 3,
            pixels.len()
        )));
    }
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    out.flush()?;
    Ok(())
}

/// A decoded netpbm image; `channels` is 1 for P5 and 3 for P6.
#[derive(Debug, Clone)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Reads a binary PGM or PPM file.
pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let bytes = fs::read(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let bad = |msg: &str| Error::data(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 {
        return Err(bad("file too short for a netpbm header"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(bad("not a binary PGM/PPM (expected P5 or P6)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and # comments between header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(bad("malformed header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text.parse().map_err(|_| bad("header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing raster separator")),
    }
    let want = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < want {
        return Err(bad(&format!(
            "raster holds {} bytes, header promises {want}",
            raster.len()
        )));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        pixels: raster[..want].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let pixels: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        write_pgm(&path, 4, 3, &pixels).unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!((img.width, img.height, img.channels), (4, 3, 1));
        assert_eq!(img.pixels, pixels);
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let pixels: Vec<u8> = (0..2 * 2 * 3).map(|v| (v * 11) as u8).collect();
        write_ppm(&path, 2, 2, &pixels).unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 3));
        assert_eq!(img.pixels, pixels);
    }

    #[test]
    fn reader_handles_comments_and_whitespace() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n 2 # inline\n2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        fs::write(&path, bytes).unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![1, 2, 3, 4]);
    }

    #[test]
    fn reader_rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, b"P5\n4 4\n255\nxy").unwrap();
        let err = read_pnm(&path).unwrap_err();
        assert!(err.to_string().contains("bad.pgm"), "error names the file: {err}");
        fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_pnm(&path).is_err());
        fs::write(&path, b"P5\n1 1\n65535\n\0\0").unwrap();
        assert!(read_pnm(&path).is_err());
    }

    #[test]
    fn writer_rejects_wrong_pixel_count() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_pgm(&dir.path().join("x.pgm"), 3, 3, &[0; 8]).is_err());
        assert!(write_ppm(&dir.path().join("x.ppm"), 2, 2, &[0; 11]).is_err());
    }
}
