//! Little-endian weight file: the magic `BIDRNW01`, then records of
//! `u32` name length, name bytes, `u32` rank, `rank` `u32` extents and the
//! `f32` values, until end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BIDRNW01";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub extents: Vec<usize>,
    pub data: Vec<f32>,
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_checkpoint(records: &[CheckpointRecord], out: &mut impl Write) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    for r in records {
        let expected: usize = r.extents.iter().product();
        if expected != r.data.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} values for extents {:?}",
                r.name,
                r.data.len(),
                r.extents
            )));
        }
        out.write_all(&u32_of(r.name.len(), "name length")?)?;
        out.write_all(r.name.as_bytes())?;
        out.write_all(&u32_of(r.extents.len(), "rank")?)?;
        for &e in &r.extents {
            out.write_all(&u32_of(e, "extent")?)?;
        }
        for v in &r.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated record".into())
    } else {
        e.into()
    }
}

/// Reads one record, or `None` at a clean end of file.
fn read_record(input: &mut impl Read) -> Result<Option<CheckpointRecord>> {
    let mut first = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match input.read(&mut first[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(Error::Checkpoint("truncated record header".into())),
            n => got += n,
        }
    }
    let name_len = u32::from_le_bytes(first) as usize;
    let mut name = vec![0u8; name_len];
    input.read_exact(&mut name).map_err(truncated)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
    let rank = read_u32(input)?;
    let extents = (0..rank)
        .map(|_| read_u32(input))
        .collect::<Result<Vec<_>>>()?;
    let count = extents
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
    let mut data = Vec::with_capacity(count.min(1 << 24));
    let mut b = [0u8; 4];
    for _ in 0..count {
        input.read_exact(&mut b).map_err(truncated)?;
        data.push(f32::from_le_bytes(b));
    }
    Ok(Some(CheckpointRecord {
        name,
        extents,
        data,
    }))
}

pub fn decode_checkpoint(input: &mut impl Read) -> Result<Vec<CheckpointRecord>> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file shorter than the magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut records = Vec::new();
    while let Some(r) = read_record(input)? {
        records.push(r);
    }
    Ok(records)
}

pub fn write_checkpoint(path: impl AsRef<Path>, records: &[CheckpointRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    encode_checkpoint(records, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<CheckpointRecord>> {
    decode_checkpoint(&mut BufReader::new(File::open(path)?))
}
