//! Binary tensor checkpoint format.
//!
//! Layout: the magic string `MWCA1`, then one record per tensor:
//!
//! ```text
//! name_len: u64 LE      length of the UTF-8 name in bytes
//! name:     [u8]        UTF-8 name
//! rank:     u64 LE
//! dims:     rank × u64 LE
//! data:     prod(dims) × f64 LE
//! ```
//!
//! Records are written in the order given and read back in file order.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MWCA1";

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 8];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        r.read_exact(&mut len_buf)?;
        let rank = u64::from_le_bytes(len_buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len_buf)?;
            shape.push(u64::from_le_bytes(len_buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut len_buf)?;
            data.push(f64::from_le_bytes(len_buf));
        }
        out.push((name, Tensor::new(data, &shape)?));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(file), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = std::fs::File::open(path)?;
    read_tensors(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let tensors = vec![
            ("a.weight".to_string(), Tensor::new(vec![1.5, -2.25, 1e-300, 0.0], &[2, 2]).unwrap()),
            ("b".to_string(), Tensor::scalar(3.75)),
            ("c.bias".to_string(), Tensor::new(vec![0.1, 0.2, 0.3], &[3]).unwrap()),
        ];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        assert_eq!(&buf[..5], MAGIC);
        let back = read_tensors(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            assert_eq!(t0.data(), t1.data());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"XXXXX".to_vec();
        assert!(matches!(read_tensors(buf.as_slice()), Err(Error::Format(_))));
    }
}
