//! `.attnstore` files: a little-endian container of labeled attention tensors.
//!
//! ```text
//! "MHSA" | u16 version=1 | u32 L | u32 H | u32 N | u32 record_count
//! per record: u64 sample_id | u8 class4 (255 = unlabeled) | u8 gt_answer (0 No, 1 Yes, 255 n/a)
//!             | L*H*N f32 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attention::{AttentionShape, AttentionTensor};
use crate::error::{MhsaError, Result};
use crate::sample::{Answer, LabeledSample};

pub const MAGIC: &[u8; 4] = b"MHSA";
pub const VERSION: u16 = 1;
pub const UNLABELED: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub sample_id: u64,
    pub class4: u8,
    pub gt_answer: u8,
    pub attention: AttentionTensor,
}

impl StoreRecord {
    pub fn gt(&self) -> Option<Answer> {
        Answer::from_code(self.gt_answer)
    }

    pub fn class(&self) -> Option<u8> {
        (self.class4 <= 3).then_some(self.class4)
    }
}

impl From<&LabeledSample> for StoreRecord {
    fn from(s: &LabeledSample) -> Self {
        StoreRecord {
            sample_id: s.sample_id,
            class4: s.class4,
            gt_answer: s.gt_answer.map(Answer::to_code).unwrap_or(UNLABELED),
            attention: s.attention.clone(),
        }
    }
}

pub fn write_store<W: Write>(
    mut out: W,
    shape: AttentionShape,
    records: &[StoreRecord],
) -> Result<()> {
    let dim = |v: usize| -> Result<[u8; 4]> {
        u32::try_from(v)
            .map(u32::to_le_bytes)
            .map_err(|_| MhsaError::Format(format!("dimension {v} exceeds u32")))
    };
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&dim(shape.layers)?)?;
    out.write_all(&dim(shape.heads)?)?;
    out.write_all(&dim(shape.visual_tokens)?)?;
    out.write_all(&dim(records.len())?)?;
    for r in records {
        r.attention.check_shape(shape)?;
        out.write_all(&r.sample_id.to_le_bytes())?;
        out.write_all(&[r.class4, r.gt_answer])?;
        for v in r.attention.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_store<R: Read>(mut input: R) -> Result<(AttentionShape, Vec<StoreRecord>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MhsaError::Format(
            "not an attention store (bad magic)".into(),
        ));
    }
    let mut b2 = [0u8; 2];
    input.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(MhsaError::Format(format!(
            "unsupported attention store version {version}"
        )));
    }
    let read_u32 = |input: &mut R| -> Result<usize> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    };
    let layers = read_u32(&mut input)?;
    let heads = read_u32(&mut input)?;
    let tokens = read_u32(&mut input)?;
    let count = read_u32(&mut input)?;
    let shape = AttentionShape::new(layers, heads, tokens)?;
    let d = shape.flat_dim();
    let mut records = Vec::with_capacity(count);
    let mut buf = vec![0u8; 4 * d];
    for _ in 0..count {
        let mut id = [0u8; 8];
        input.read_exact(&mut id)?;
        let mut labels = [0u8; 2];
        input.read_exact(&mut labels)?;
        input.read_exact(&mut buf)?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let attention = if values.iter().all(|v| (0.0..=1.0).contains(v)) {
            AttentionTensor::new(shape, values)?
        } else {
            AttentionTensor::new_corrected(shape, values)?
        };
        records.push(StoreRecord {
            sample_id: u64::from_le_bytes(id),
            class4: labels[0],
            gt_answer: labels[1],
            attention,
        });
    }
    Ok((shape, records))
}

pub fn save_store(path: &Path, shape: AttentionShape, records: &[StoreRecord]) -> Result<()> {
    write_store(BufWriter::new(File::create(path)?), shape, records)
}

pub fn load_store(path: &Path) -> Result<(AttentionShape, Vec<StoreRecord>)> {
    read_store(BufReader::new(File::open(path)?))
}
