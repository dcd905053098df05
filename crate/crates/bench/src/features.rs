//! `GMFEAT01` binary feature matrices: magic, `u64` rows, `u64` cols, then
//! row-major `f32`, all little-endian.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::{BenchError, Result};

const MAGIC: &[u8; 8] = b"GMFEAT01";
const HEADER: usize = 8 + 16;

pub fn encode_features(m: &DMatrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<DMatrix<f32>> {
    if bytes.len() < HEADER {
        return Err(BenchError::Format("feature file shorter than its header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(BenchError::Format("bad feature file magic".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| BenchError::Format("feature matrix size overflows".into()))?;
    let payload = &bytes[HEADER..];
    if payload.len() != expected {
        return Err(BenchError::Format(format!(
            "expected {expected} payload bytes for {rows}x{cols}, found {}",
            payload.len()
        )));
    }
    let vals: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_row_slice(rows as usize, cols as usize, &vals))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<DMatrix<f32>> {
    decode_features(&std::fs::read(path)?)
}

pub fn write_features(path: impl AsRef<Path>, m: &DMatrix<f32>) -> Result<()> {
    std::fs::write(path, encode_features(m))?;
    Ok(())
}

/// Rows as `f64` vectors.
pub fn rows_f64(m: &DMatrix<f32>) -> Vec<DVector<f64>> {
    (0..m.nrows())
        .map(|r| DVector::from_fn(m.ncols(), |c, _| m[(r, c)] as f64))
        .collect()
}

pub fn from_rows(rows: &[DVector<f64>], cols: usize) -> DMatrix<f32> {
    DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c] as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_matrix_is_header_only() {
        let b = encode_features(&DMatrix::zeros(0, 7));
        assert_eq!(b.len(), 24);
        assert_eq!(&b[..8], b"GMFEAT01");
        assert_eq!(decode_features(&b).unwrap().shape(), (0, 7));
    }

    #[test]
    fn small_layout() {
        let b = encode_features(&DMatrix::from_row_slice(1, 2, &[1.0f32, 2.0]));
        let mut expect = b"GMFEAT01".to_vec();
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&2.0f32.to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn bad_input_is_a_format_error() {
        let good = encode_features(&DMatrix::from_row_slice(2, 2, &[1.0f32, 2.0, 3.0, 4.0]));
        assert!(matches!(decode_features(&good[..good.len() - 1]), Err(BenchError::Format(_))));
        assert!(matches!(decode_features(&good[..10]), Err(BenchError::Format(_))));
        let mut bad = good.clone();
        bad[3] = b'x';
        assert!(matches!(decode_features(&bad), Err(BenchError::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, bits in proptest::collection::vec(any::<u32>(), 36)) {
            let m = DMatrix::from_fn(rows, cols, |r, c| f32::from_bits(bits[r * 6 + c]));
            let back = decode_features(&encode_features(&m)).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in m.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
