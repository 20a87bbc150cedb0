//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "SAPL"
//! version u32      currently 1
//! count   u32      number of named tensors
//! entry*  { name_len u32, name bytes, rank u32, dims u32 * rank,
//!           payload f64 * product(dims) }
//! ```
//!
//! Round-trips are bitwise exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SAPL";
const VERSION: u32 = 1;

pub fn save(params: &Params, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    out.write_all(MAGIC).map_err(io_err)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    out.write_all(&(params.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (name, tensor) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        out.write_all(name.as_bytes()).map_err(io_err)?;
        out.write_all(&(tensor.rank() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &d in tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

pub fn load(path: &Path) -> Result<Params> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::parse(
            path,
            format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        ));
    }
    let version = read_u32(&mut input, path)?;
    if version != VERSION {
        return Err(Error::parse(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let count = read_u32(&mut input, path)?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut input, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut input, &mut name_bytes, path)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::parse(path, format!("non-utf8 parameter name: {e}")))?;
        let rank = read_u32(&mut input, path)? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::parse(path, format!("tensor '{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut input, path)? as usize);
        }
        let volume: usize = shape.iter().product();
        let mut data = Vec::with_capacity(volume);
        let mut buf = [0u8; 8];
        for _ in 0..volume {
            read_exact(&mut input, &mut buf, path)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| Error::parse(path, format!("tensor '{name}': {e}")))?;
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(Error::parse(path, format!("duplicate parameter '{name}'")));
        }
    }
    Ok(Params::from_entries(entries))
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::parse(path, format!("truncated checkpoint: {e}")))
}

fn read_u32(input: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}
