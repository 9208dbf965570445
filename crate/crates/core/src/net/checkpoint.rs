//! Parameter checkpoints:
//!
//! ```text
//! magic "TOPO3DNN" | version u32 | config length u64 | config JSON
//! per layer: weights then biases, f32 little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Network, NetworkConfig, NetworkParameters};
use crate::error::{Error, Result};
use crate::io::{check_magic, read_exact_or, read_u32, read_u64};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TOPO3DNN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&net.config)?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    for t in net.params.tensors() {
        for &v in t {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, CHECKPOINT_MAGIC)?;
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let len = read_u64(&mut r, "config length")? as usize;
    if len > 1 << 20 {
        return Err(Error::Invalid(format!("config block of {len} bytes")));
    }
    let mut cfg = vec![0u8; len];
    read_exact_or(&mut r, &mut cfg, "config")?;
    let config: NetworkConfig = serde_json::from_slice(&cfg)?;
    let mut params = NetworkParameters::zeros(&config);
    for t in params.tensors_mut() {
        let mut buf = vec![0u8; 4 * t.len()];
        read_exact_or(&mut r, &mut buf, "parameters")?;
        for (v, b) in t.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Invalid("trailing bytes after parameters".into()));
    }
    Network::new(config, params)
}
