//! Sinusoidal positional encodings, 1-D for text and 2-D for image patches.

use crate::error::{Error, Result};

/// Interleaved sin/cos encoding at geometric frequencies `10000^(-2i/dim)`.
pub fn sinusoidal_pe_1d(position: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!(
            "1d positional encoding width must be even and positive, got {dim}"
        )));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10_000f64.powf(-2.0 * i as f64 / dim as f64);
        let angle = position as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Concatenation of a row encoding and a column encoding, each at width
/// `dim/2`.
pub fn sinusoidal_pe_2d(row: usize, col: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::config(format!(
            "2d positional encoding width must be a positive multiple of 4, got {dim}"
        )));
    }
    let mut out = sinusoidal_pe_1d(row, dim / 2)?;
    out.extend(sinusoidal_pe_1d(col, dim / 2)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_sin0_cos1() {
        let pe = sinusoidal_pe_1d(0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe[2 * i], 0.0);
            assert_eq!(pe[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn entries_bounded_by_one() {
        for pos in [0, 1, 5, 123, 9999] {
            let pe = sinusoidal_pe_1d(pos, 32).unwrap();
            assert!(pe.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn direct_formula_dim4() {
        let pe = sinusoidal_pe_1d(3, 4).unwrap();
        let expect = [
            3f64.sin(),
            3f64.cos(),
            (3.0 / 100.0f64).sin(),
            (3.0 / 100.0f64).cos(),
        ];
        for (a, b) in pe.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(sinusoidal_pe_1d(0, 5).is_err());
        assert!(sinusoidal_pe_2d(0, 0, 6).is_err());
    }

    #[test]
    fn pe2d_concatenates_halves() {
        let pe = sinusoidal_pe_2d(0, 0, 8).unwrap();
        let half = sinusoidal_pe_1d(0, 4).unwrap();
        assert_eq!(&pe[..4], &half[..]);
        assert_eq!(&pe[4..], &half[..]);

        let pe = sinusoidal_pe_2d(2, 5, 8).unwrap();
        let rows = sinusoidal_pe_1d(2, 4).unwrap();
        let cols = sinusoidal_pe_1d(5, 4).unwrap();
        assert_eq!(&pe[..4], &rows[..]);
        assert_eq!(&pe[4..], &cols[..]);
    }

    #[test]
    fn pe2d_swap_swaps_halves() {
        let rc = sinusoidal_pe_2d(3, 7, 16).unwrap();
        let cr = sinusoidal_pe_2d(7, 3, 16).unwrap();
        assert_eq!(&rc[..8], &cr[8..]);
        assert_eq!(&rc[8..], &cr[..8]);
    }

    #[test]
    fn pe2d_injective_on_default_grid() {
        let mut seen = Vec::new();
        for r in 0..8 {
            for c in 0..8 {
                let pe = sinusoidal_pe_2d(r, c, 64).unwrap();
                assert!(
                    !seen.contains(&pe),
                    "duplicate encoding for ({r},{c})"
                );
                seen.push(pe);
            }
        }
    }
}
