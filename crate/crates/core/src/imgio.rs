//! Binary PGM (`P5`) and PPM (`P6`) readers and writers, 8-bit, row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[h, w]` grid of values in `[0, 1]` as a binary PGM.
pub fn write_pgm(grid: &Tensor, path: &Path) -> Result<()> {
    if grid.rank() != 2 {
        return Err(Error::dim(format!("write_pgm: shape {:?}", grid.shape())));
    }
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let mut out = Vec::with_capacity(h * w + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    out.extend(grid.data().iter().map(|&v| quantize(v)));
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes a `[h, w, 3]` RGB grid of values in `[0, 1]` as a binary PPM.
pub fn write_ppm(grid: &Tensor, path: &Path) -> Result<()> {
    if grid.rank() != 3 || grid.shape()[2] != 3 {
        return Err(Error::dim(format!("write_ppm: shape {:?}", grid.shape())));
    }
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let mut out = Vec::with_capacity(h * w * 3 + 32);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    out.extend(grid.data().iter().map(|&v| quantize(v)));
    std::fs::write(path, out)?;
    Ok(())
}

fn read_header(bytes: &[u8], magic: &[u8], path: &Path) -> Result<(usize, usize, usize)> {
    // magic, width, height, maxval, one whitespace byte, then the payload
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(Error::format(format!(
            "{}: expected {} magic",
            path.display(),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut nums = Vec::with_capacity(3);
    let mut offset = magic.len();
    for _ in 0..3 {
        while offset < bytes.len() && bytes[offset].is_ascii_whitespace() {
            offset += 1;
        }
        let start = offset;
        while offset < bytes.len() && bytes[offset].is_ascii_digit() {
            offset += 1;
        }
        let n: usize = std::str::from_utf8(&bytes[start..offset])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(format!("{}: malformed header", path.display())))?;
        nums.push(n);
    }
    if nums[2] != 255 {
        return Err(Error::format(format!(
            "{}: only maxval 255 supported, got {}",
            path.display(),
            nums[2]
        )));
    }
    offset += 1;
    Ok((nums[0], nums[1], offset))
}

/// Reads a binary PGM into a `[h, w]` grid of values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let (w, h, offset) = read_header(&bytes, b"P5", path)?;
    let want = w * h;
    let payload = &bytes[offset.min(bytes.len())..];
    if payload.len() != want {
        return Err(Error::format(format!(
            "{}: expected {want} payload bytes, found {}",
            path.display(),
            payload.len()
        )));
    }
    Tensor::new(
        vec![h, w],
        payload.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Reads a binary PPM into a `[h, w, 3]` grid of values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let (w, h, offset) = read_header(&bytes, b"P6", path)?;
    let want = w * h * 3;
    let payload = &bytes[offset.min(bytes.len())..];
    if payload.len() != want {
        return Err(Error::format(format!(
            "{}: expected {want} payload bytes, found {}",
            path.display(),
            payload.len()
        )));
    }
    Tensor::new(
        vec![h, w, 3],
        payload.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

/// Writes any bytes atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let grid = Tensor::new(vec![2, 2], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        write_pgm(&grid, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n2 2\n255\n".len() + 4);
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let grid = Tensor::from_fn(&[5, 7], |i| (i as f64 / 34.0).fract());
        write_pgm(&grid, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), grid.shape());
        for (a, b) in grid.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn quantized_values_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let grid = Tensor::from_fn(&[3, 3], |i| (i as f64 * 17.0).rem_euclid(256.0).floor() / 255.0);
        write_pgm(&grid, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert!(grid.bit_eq(&back));
    }

    #[test]
    fn truncated_payload_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n12345").unwrap();
        let err = read_pgm(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cut.pgm"), "{msg}");
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let grid = Tensor::from_fn(&[4, 3, 3], |i| ((i * 11) % 256) as f64 / 255.0);
        write_ppm(&grid, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert!(grid.bit_eq(&back));
    }
}
