//! Binary portable anymap I/O: PGM (P5) for grayscale and PPM (P6) for RGB,
//! 8-bit, with comment-tolerant header parsing.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved r, g, b.
    pub pixels: Vec<u8>,
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    if img.pixels.len() != img.width * img.height {
        return Err(Error::shape(format!(
            "pgm payload {} does not match {}x{}",
            img.pixels.len(),
            img.width,
            img.height
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    f.flush()?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    if img.pixels.len() != img.width * img.height * 3 {
        return Err(Error::shape(format!(
            "ppm payload {} does not match {}x{}x3",
            img.pixels.len(),
            img.width,
            img.height
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    f.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path)?;
    let (w, h, payload) = parse_binary_anymap(&bytes, b"P5", 1)?;
    Ok(GrayImage {
        width: w,
        height: h,
        pixels: payload,
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path)?;
    let (w, h, payload) = parse_binary_anymap(&bytes, b"P6", 3)?;
    Ok(RgbImage {
        width: w,
        height: h,
        pixels: payload,
    })
}

/// Header: magic, whitespace/comments, width, height, maxval (<= 255), one
/// whitespace byte, then the raw payload.
fn parse_binary_anymap(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "bad anymap magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and # comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated anymap header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("unparsable anymap header field".into()))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format("zero anymap extent".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported anymap maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing separator before anymap payload".into()));
    }
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "anymap payload truncated: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = std::env::temp_dir().join(format!("ses-pnm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 128, 255, 1, 2, 3],
        };
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        assert_eq!(back.pixels, img.pixels);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ppm_round_trip_and_comment_header() {
        let dir = std::env::temp_dir().join(format!("ses-pnm-c-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ppm");
        let img = RgbImage {
            width: 2,
            height: 1,
            pixels: vec![255, 0, 0, 0, 255, 0],
        };
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.pixels, img.pixels);

        // Hand-written header with a comment line.
        let commented = b"P5\n# made by hand\n2 2\n255\n\x01\x02\x03\x04";
        let p2 = dir.join("c.pgm");
        std::fs::write(&p2, commented).unwrap();
        let g = read_pgm(&p2).unwrap();
        assert_eq!(g.pixels, vec![1, 2, 3, 4]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = std::env::temp_dir().join(format!("ses-pnm-e-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.pgm");
        std::fs::write(&p, b"P3\n1 1\n255\n\x00").unwrap();
        assert!(read_pgm(&p).is_err());
        std::fs::write(&p, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(read_pgm(&p).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
