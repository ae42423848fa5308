//! Binary netpbm readers and writers: P6 PPM for images, P5 PGM for class
//! masks (class ids stored as gray levels).

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Result};
use crate::numcore::{ClassMask, Dims, Tensor};

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn file_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::File { path: path.display().to_string(), reason: reason.into() }
}

/// Write a 1 x 3 x H x W image in [0, 1] as binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let d = image.dims();
    if d.n != 1 || d.c != 3 {
        return Err(file_err(path, format!("PPM wants a 1x3xHxW image, got {d}")));
    }
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P6\n{} {}\n255\n", d.w, d.h).map_err(|e| io_err(path, e))?;
    let mut row = Vec::with_capacity(d.w * 3);
    for y in 0..d.h {
        row.clear();
        for x in 0..d.w {
            for c in 0..3 {
                let v = (image.at(0, c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
                row.push(v);
            }
        }
        out.write_all(&row).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Write a class mask as binary PGM (P5), class ids as gray levels.
pub fn write_pgm_mask(path: &Path, mask: &ClassMask) -> Result<()> {
    if mask.max_class() > 255 {
        return Err(file_err(path, format!("class id {} exceeds 8-bit PGM range", mask.max_class())));
    }
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{} {}\n255\n", mask.width(), mask.height()).map_err(|e| io_err(path, e))?;
    let bytes: Vec<u8> = mask.data().iter().map(|&c| c as u8).collect();
    out.write_all(&bytes).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Parse a binary netpbm header, returning (width, height) and leaving the
/// reader at the start of the payload.
fn parse_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(file_err(path, format!("expected {magic} magic")));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        // Skip whitespace and '#' comments.
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
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
            return Err(file_err(path, "truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ASCII");
        fields.push(
            text.parse::<usize>().map_err(|_| file_err(path, format!("bad header field '{text}'")))?,
        );
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(file_err(path, "missing whitespace after maxval"));
    }
    pos += 1;
    if fields[2] != 255 {
        return Err(file_err(path, format!("maxval {} unsupported (want 255)", fields[2])));
    }
    Ok((fields[0], fields[1], pos))
}

/// Read a binary P6 PPM into a 1 x 3 x H x W tensor in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let (w, h, start) = parse_header(&bytes, "P6", path)?;
    let expect = w * h * 3;
    let payload = &bytes[start..];
    if payload.len() != expect {
        return Err(file_err(path, format!("payload {} bytes, expected {expect}", payload.len())));
    }
    let mut image = Tensor::zeros(Dims::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = payload[(y * w + x) * 3 + c] as f32 / 255.0;
                *image.at_mut(0, c, y, x) = v;
            }
        }
    }
    Ok(image)
}

/// Read a binary P5 PGM class mask.
pub fn read_pgm_mask(path: &Path) -> Result<ClassMask> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let (w, h, start) = parse_header(&bytes, "P5", path)?;
    let payload = &bytes[start..];
    if payload.len() != w * h {
        return Err(file_err(path, format!("payload {} bytes, expected {}", payload.len(), w * h)));
    }
    Ok(ClassMask::new(h, w, payload.iter().map(|&b| b as u16).collect())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let image = Tensor::from_fn(Dims::new(1, 3, 8, 6), |_, c, y, x| {
            ((c * 31 + y * 7 + x * 3) % 97) as f32 / 96.0
        });
        let path = dir.path().join("img.ppm");
        write_ppm(&path, &image).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.dims(), image.dims());
        for (a, b) in image.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn pgm_mask_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mask = ClassMask::new(4, 5, (0..20).map(|i| (i % 5) as u16).collect()).unwrap();
        let path = dir.path().join("mask.pgm");
        write_pgm_mask(&path, &mask).unwrap();
        assert_eq!(read_pgm_mask(&path).unwrap(), mask);
    }

    #[test]
    fn malformed_files_report_path_and_reason() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P6\n4 4\n255\nshort").unwrap();
        let err = read_ppm(&path).unwrap_err().to_string();
        assert!(err.contains("bad.ppm"), "{err}");
        assert!(err.contains("payload"), "{err}");

        let missing = dir.path().join("missing.pgm");
        let err = read_pgm_mask(&missing).unwrap_err().to_string();
        assert!(err.contains("missing.pgm"), "{err}");
    }
}
