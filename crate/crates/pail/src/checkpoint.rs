//! Named-tensor checkpoint archive.
//!
//! The interchange format (see `checkpoint.md` at the repository root) is a
//! flat list of `name -> shape -> row-major fp32 payload` entries behind a
//! small JSON header. Training state that must round-trip exactly (resume
//! reproducibility) is stored separately as full-precision JSON; the fp32
//! archive is the stable interchange surface.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::matrix::Matrix;
use crate::nn::Network;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PAILTNSR";
const VERSION: u32 = 1;

/// Header metadata plus tensors, as read back from an archive.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub header: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Matrix>,
}

impl TensorArchive {
    pub fn header_u64(&self, key: &str) -> Option<u64> {
        self.header.get(key).and_then(|v| v.as_u64())
    }

    pub fn header_f64(&self, key: &str) -> Option<f64> {
        self.header.get(key).and_then(|v| v.as_f64())
    }

    pub fn header_bool(&self, key: &str) -> Option<bool> {
        self.header.get(key).and_then(|v| v.as_bool())
    }
}

/// Write an archive from a name-keyed tensor map.
pub fn save_tensors(
    path: &Path,
    header: &BTreeMap<String, serde_json::Value>,
    tensors: &BTreeMap<String, Matrix>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let header_bytes = serde_json::to_vec(header)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for (name, m) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        w.write_all(&(m.rows as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(m.cols as u32).to_le_bytes()).map_err(io_err)?;
        for &v in &m.data {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Write a network's parameters as an archive.
pub fn save_network(
    path: &Path,
    header: &BTreeMap<String, serde_json::Value>,
    net: &dyn Network,
) -> Result<()> {
    save_tensors(path, header, &crate::nn::params_map(net))
}

pub fn load_archive(path: &Path) -> Result<TensorArchive> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a tensor archive",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported archive version {version}"
        )));
    }
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&header_bytes)?;

    r.read_exact(&mut u32buf).map_err(io_err)?;
    let n_tensors = u32::from_le_bytes(u32buf) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?;
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut f32buf = [0u8; 4];
        for _ in 0..rows * cols {
            r.read_exact(&mut f32buf).map_err(io_err)?;
            data.push(f32::from_le_bytes(f32buf) as f64);
        }
        tensors.insert(name, Matrix::from_vec(rows, cols, data));
    }
    Ok(TensorArchive { header, tensors })
}

/// Load archive tensors into a network; errors if any parameter is missing
/// or has the wrong shape.
pub fn load_into_network(archive: &TensorArchive, net: &mut dyn Network) -> Result<()> {
    let missing = crate::nn::load_params(net, &archive.tensors);
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "archive is missing tensors: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Full-precision JSON sidecar for state that must round-trip exactly.
pub fn save_f64_state<T: serde::Serialize>(path: &Path, state: &T) -> Result<()> {
    let json = serde_json::to_vec(state)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_f64_state<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{params_map, Mlp};
    use crate::rng::rng_from_seed;

    #[test]
    fn archive_round_trip_preserves_names_shapes_and_fp32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut rng = rng_from_seed(8);
        let mlp = Mlp::new("q", &[3, 5, 1], &mut rng);
        let mut header = BTreeMap::new();
        header.insert("d_s".to_string(), serde_json::json!(3));
        header.insert("frozen".to_string(), serde_json::json!(true));
        save_network(&path, &header, &mlp).unwrap();

        let archive = load_archive(&path).unwrap();
        assert_eq!(archive.header_u64("d_s"), Some(3));
        assert_eq!(archive.header_bool("frozen"), Some(true));
        let original = params_map(&mlp);
        assert_eq!(archive.tensors.len(), original.len());
        for (name, m) in &original {
            let loaded = &archive.tensors[name];
            assert_eq!((loaded.rows, loaded.cols), (m.rows, m.cols));
            for (a, b) in loaded.data.iter().zip(&m.data) {
                assert_eq!(*a, *b as f32 as f64, "fp32 payload must be exact");
            }
        }

        let mut restored = Mlp::new("q", &[3, 5, 1], &mut rng);
        load_into_network(&archive, &mut restored).unwrap();
        let rm = params_map(&restored);
        for (name, m) in &original {
            for (a, b) in rm[name].data.iter().zip(&m.data) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOTMAGIC........").unwrap();
        let err = load_archive(&path).unwrap_err();
        assert!(err.to_string().contains("not a tensor archive"));
    }

    #[test]
    fn f64_sidecar_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let state: Vec<f64> = vec![0.1 + 0.2, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300];
        save_f64_state(&path, &state).unwrap();
        let back: Vec<f64> = load_f64_state(&path).unwrap();
        assert_eq!(back, state);
    }
}
