//! Binary attention-weight dump.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PDAW"
//! 4       4     version (u32 LE, = 1)
//! 8       4     heads   (u32 LE)
//! 12      4     w       (u32 LE) query rows per head
//! 16      4     l_k     (u32 LE) keys per row
//! 20      4     h       (u32 LE) hidden size
//! 24      ...   heads * w * l_k f32 LE, head-major then row-major
//! ```

use std::io::{Read, Write};

use ndarray::Array2;

use super::RefineError;

pub const MAGIC: &[u8; 4] = b"PDAW";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub hidden: u32,
    pub heads: Vec<Array2<f64>>,
}

impl AttentionDump {
    pub fn window(&self) -> usize {
        self.heads.first().map_or(0, |h| h.nrows())
    }

    pub fn keys(&self) -> usize {
        self.heads.first().map_or(0, |h| h.ncols())
    }
}

pub fn write_dump<W: Write>(dump: &AttentionDump, mut out: W) -> Result<(), RefineError> {
    let (w, l_k) = (dump.window(), dump.keys());
    if dump.heads.iter().any(|h| h.dim() != (w, l_k)) {
        return Err(RefineError::Dump("heads have different shapes".into()));
    }
    let dim = |x: usize| {
        u32::try_from(x).map_err(|_| RefineError::Dump(format!("dimension {x} exceeds u32")))
    };
    out.write_all(MAGIC)?;
    for v in [VERSION, dim(dump.heads.len())?, dim(w)?, dim(l_k)?, dump.hidden] {
        out.write_all(&v.to_le_bytes())?;
    }
    for head in &dump.heads {
        for x in head.iter() {
            out.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dump<R: Read>(mut input: R) -> Result<AttentionDump, RefineError> {
    let mut header = [0u8; HEADER_LEN];
    input
        .read_exact(&mut header)
        .map_err(|_| RefineError::Dump("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(RefineError::Dump("bad magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, heads, w, l_k, hidden) = (field(0), field(1), field(2), field(3), field(4));
    if version != VERSION {
        return Err(RefineError::Dump(format!("unsupported version {version}")));
    }
    let per_head = (w as usize)
        .checked_mul(l_k as usize)
        .ok_or_else(|| RefineError::Dump("matrix too large".into()))?;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    let expected = per_head
        .checked_mul(heads as usize)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| RefineError::Dump("dump too large".into()))?;
    if body.len() != expected {
        return Err(RefineError::Dump(format!(
            "expected {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if values.iter().any(|x| !x.is_finite()) {
        return Err(RefineError::NonFinite("attention dump"));
    }
    let heads = values
        .chunks(per_head.max(1))
        .take(heads as usize)
        .map(|c| Array2::from_shape_vec((w as usize, l_k as usize), c.to_vec()).expect("sized"))
        .collect();
    Ok(AttentionDump { hidden, heads })
}
