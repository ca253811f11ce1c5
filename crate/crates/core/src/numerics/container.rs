//! Binary tensor container and named tensor maps.
//!
//! A single tensor record is `"CCTN"`, `u16` version, `u16` rank, `u64`
//! extents, then the little-endian `f64` payload. A map file is `"CCTM"`,
//! `u16` version, `u64` entry count, then per entry a `u32` name length,
//! the UTF-8 name and one tensor record.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"CCTN";
const MAP_MAGIC: &[u8; 4] = b"CCTM";
const VERSION: u16 = 1;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::State(format!("corrupt tensor container: {}", msg.into()))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let rank = u16::try_from(t.rank()).map_err(|_| Error::shape("rank exceeds u16"))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| corrupt(e.to_string()))?;
    Ok(b)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    if &read_array::<4, _>(r)? != TENSOR_MAGIC {
        return Err(corrupt("bad tensor magic"));
    }
    let version = u16::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let rank = u16::from_le_bytes(read_array(r)?) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_array(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|e| corrupt(e.to_string()))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_map<W: Write>(w: &mut W, map: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(MAP_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(map.len() as u64).to_le_bytes())?;
    for (name, t) in map {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_map<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>> {
    if &read_array::<4, _>(r)? != MAP_MAGIC {
        return Err(corrupt("bad map magic"));
    }
    let version = u16::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(read_array(r)?);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| corrupt(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("non-UTF-8 name"))?;
        out.insert(name, read_tensor(r)?);
    }
    Ok(out)
}

pub fn save_map(path: &Path, map: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_map(&mut f, map)?;
    f.flush()?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::State(format!("cannot open {}: {e}", path.display())))?;
    read_map(&mut std::io::BufReader::new(f))
}
