//! Named-tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      4 bytes   "SGNT"
//! version    u32       1
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (u64 × ndim)
//!   values   f64 × Π dims, row-major
//! ```

use std::io::{Read, Write};

use ndarray::Array2;

use super::params::ParamStore;
use super::tape::Matrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SGNT";
const VERSION: u32 = 1;

pub fn write_tensors<'a, W: Write>(mut w: W, tensors: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads every tensor. One-dimensional tensors load as a single row.
pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Matrix)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a named-tensor container".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)?;
        let dims = (0..ndim).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n as usize),
            [a, b] => (*a as usize, *b as usize),
            _ => return Err(Error::Format(format!("{name}: {ndim}-d tensors are unsupported"))),
        };
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        let m = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, m));
    }
    Ok(out)
}

pub fn save_store<W: Write>(w: W, store: &ParamStore) -> Result<()> {
    write_tensors(w, store.entries())
}

/// Overwrites the store's values from a container holding exactly its names
/// and shapes.
pub fn load_into_store<R: Read>(r: R, store: &mut ParamStore) -> Result<()> {
    let tensors = read_tensors(r)?;
    if tensors.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, m) in tensors {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
        if store.value(id).dim() != m.dim() {
            return Err(Error::shape("checkpoint", format!("{name}: {:?} vs {:?}", store.value(id).dim(), m.dim())));
        }
        *store.value_mut(id) = m;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add("layer1.W_val", array![[1.0, -0.0, f64::MIN_POSITIVE], [1e300, 0.1, -3.5]]);
        s.add("layer1.prelu", array![[0.25]]);
        let mut buf = Vec::new();
        save_store(&mut buf, &s).unwrap();
        let back = read_tensors(buf.as_slice()).unwrap();
        for ((n, m), (n2, m2)) in back.iter().zip(s.entries()) {
            assert_eq!(n, n2);
            let a: Vec<u64> = m.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = m2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let mut t = s.clone();
        t.value_mut(t.id("layer1.prelu").unwrap()).fill(9.0);
        load_into_store(buf.as_slice(), &mut t).unwrap();
        assert_eq!(t, s);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(matches!(read_tensors(&b"NOPE\x01\0\0\0"[..]), Err(Error::Format(_))));
    }
}
