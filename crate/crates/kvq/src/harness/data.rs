//! Key-dump file format, the bridge for user-supplied hidden states.
//!
//! Layout: magic "KVQD", then `d` (u32 LE), then `n` (u32 LE), then `n*d`
//! row-major f32 LE values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::bytes::{read_f32s, read_magic, read_u32, write_f32s, write_u32};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"KVQD";

pub fn save_key_dump<P: AsRef<Path>>(path: P, states: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, states.cols() as u32)?;
    write_u32(&mut w, states.rows() as u32)?;
    write_f32s(&mut w, states.data().iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn load_key_dump<P: AsRef<Path>>(path: P) -> Result<Matrix> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, MAGIC)?;
    let d = read_u32(&mut r)? as usize;
    let n = read_u32(&mut r)? as usize;
    if d == 0 {
        return Err(Error::Format("key dump with d = 0".into()));
    }
    Matrix::from_vec(n, d, read_f32s(&mut r, n * d)?)
}

/// Writes a matrix as CSV at f32 precision; the shortest round-trip f32
/// formatting makes read-back exact.
pub fn write_matrix_csv<P: AsRef<Path>>(path: P, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in 0..m.rows() {
        let line = m
            .row(r)
            .iter()
            .map(|v| format!("{}", *v as f32))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<P: AsRef<Path>>(path: P) -> Result<Matrix> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f32>().map(f64::from))
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Format(format!("bad matrix csv: {e}")))?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sample_gaussian, Covariance, SeededRng};

    #[test]
    fn matrix_csv_round_trip_is_f32_exact() {
        let mut rng = SeededRng::new(12);
        let m = sample_gaussian(&mut rng, 5, 5, 0.0, &Covariance::Scalar(2.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        write_matrix_csv(&path, &m).unwrap();
        let back = read_matrix_csv(&path).unwrap();
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, *b as f32 as f64);
        }
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let mut rng = SeededRng::new(4);
        let m = sample_gaussian(&mut rng, 17, 6, 0.0, &Covariance::Scalar(1.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys.kvqd");
        save_key_dump(&path, &m).unwrap();
        let back = load_key_dump(&path).unwrap();
        assert_eq!(back.rows(), 17);
        assert_eq!(back.cols(), 6);
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.kvqd");
        std::fs::write(&path, b"KVQCxxxxxxxx").unwrap();
        assert!(matches!(load_key_dump(&path), Err(Error::Format(_))));
    }
}
