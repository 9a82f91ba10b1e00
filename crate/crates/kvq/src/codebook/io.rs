//! Codebook binary file format.
//!
//! Byte layout, all integers little-endian, all floats IEEE-754 f32 LE:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "KVQC"
//! 4       2           version (u16, currently 1)
//! 6       1           kind (u8: 0 conventional, 1 query-aware)
//! 7       4           head_dim d (u32)
//! 11      4           codebook size L (u32)
//! 15      L*d*4       codewords, row-major f32
//! --- query-aware only ---
//! +0      d*d*4       H matrix, row-major f32
//! +d*d*4  d*d*4       Cholesky factor of H, row-major f32 (upper zeros)
//! ```
//!
//! Values are stored at f32 precision, so a loaded codebook reproduces the
//! written one only to ~1e-7 relative; the `L L^T = H` check is therefore
//! relaxed to 1e-5 on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Codebook, CodebookKind};
use crate::bytes::{read_f32s, read_magic, read_u16, read_u32, read_u8, write_f32s, write_u16, write_u32};
use crate::error::{Error, Result};
use crate::numerics::{CholeskyFactor, Matrix, SpdMatrix};

const MAGIC: &[u8; 4] = b"KVQC";
const VERSION: u16 = 1;

pub fn save_codebook<P: AsRef<Path>>(path: P, cb: &Codebook) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_codebook(&mut w, cb)?;
    w.flush()?;
    Ok(())
}

pub fn load_codebook<P: AsRef<Path>>(path: P) -> Result<Codebook> {
    let mut r = BufReader::new(File::open(path)?);
    read_codebook(&mut r)
}

fn write_codebook<W: Write>(w: &mut W, cb: &Codebook) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u16(w, VERSION)?;
    let kind = match cb.kind() {
        CodebookKind::Conventional => 0u8,
        CodebookKind::QueryAware => 1u8,
    };
    w.write_all(&[kind])?;
    write_u32(w, cb.head_dim() as u32)?;
    write_u32(w, cb.size() as u32)?;
    write_f32s(w, cb.codewords().data().iter().copied())?;
    if cb.kind() == CodebookKind::QueryAware {
        let h = cb.h_matrix().expect("query-aware invariant");
        let t = cb.transform().expect("query-aware invariant");
        write_f32s(w, h.to_matrix().data().iter().copied())?;
        write_f32s(w, t.to_matrix().data().iter().copied())?;
    }
    Ok(())
}

fn read_codebook<R: Read>(r: &mut R) -> Result<Codebook> {
    read_magic(r, MAGIC)?;
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported codebook version {version}"
        )));
    }
    let kind = match read_u8(r)? {
        0 => CodebookKind::Conventional,
        1 => CodebookKind::QueryAware,
        other => return Err(Error::Format(format!("unknown codebook kind {other}"))),
    };
    let d = read_u32(r)? as usize;
    let l = read_u32(r)? as usize;
    if d == 0 || l == 0 {
        return Err(Error::Format(format!("degenerate codebook {l}x{d}")));
    }
    let codewords = Matrix::from_vec(l, d, read_f32s(r, l * d)?)?;
    let (h, t) = if kind == CodebookKind::QueryAware {
        let h = SpdMatrix::from_matrix(&Matrix::from_vec(d, d, read_f32s(r, d * d)?)?)?;
        let t = CholeskyFactor::from_lower(&Matrix::from_vec(d, d, read_f32s(r, d * d)?)?)?;
        (Some(h), Some(t))
    } else {
        (None, None)
    };
    Codebook::from_file_parts(kind, codewords, t, h)
}
