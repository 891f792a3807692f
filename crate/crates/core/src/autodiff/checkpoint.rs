//! Binary parameter blocks (`u32` name length, name bytes, `u32` rank,
//! `u32` dims, little-endian `f32` values) with a plain-text manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Writes `path` and `path.manifest`.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut manifest = String::new();
    for (_, name, t) in store.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        manifest.push_str(&format!("{name} {:?}\n", t.shape()));
    }
    w.flush()?;
    std::fs::write(manifest_path(path), manifest)?;
    Ok(())
}

/// Reads every block of a checkpoint in file order.
pub fn read_blocks(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    loop {
        let len = match r.read_u32::<LittleEndian>() {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Parse("checkpoint: parameter name is not UTF-8".into()))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from(r.read_f32::<LittleEndian>()?));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Loads a checkpoint into an existing store; every stored parameter must
/// exist with the same shape, and every parameter of `store` must be present.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let blocks = read_blocks(path)?;
    if blocks.len() != store.len() {
        return Err(Error::Precondition(format!(
            "checkpoint has {} parameters, model has {}",
            blocks.len(),
            store.len()
        )));
    }
    for (name, t) in blocks {
        store.set(&name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.1, 7.0, -0.3]).unwrap());
        s.add("b", Tensor::scalar(2.0));
        save(&s, &path).unwrap();
        let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert_eq!(manifest, "a.weight [2, 3]\nb []\n");
        let mut t = s.clone();
        t.get_mut(crate::autodiff::ParamId(0)).data_mut().fill(0.0);
        load_into(&mut t, &path).unwrap();
        for ((_, _, x), (_, _, y)) in s.iter().zip(t.iter()) {
            for (a, b) in x.data().iter().zip(y.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[4]));
        save(&s, &path).unwrap();
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[5]));
        assert!(load_into(&mut other, &path).is_err());
    }
}
