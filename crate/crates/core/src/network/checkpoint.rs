//! `STFW` checkpoints.
//!
//! ```text
//! b"STFW" | u32 version | u32 base, groups, decoders, levels, height, width
//! repeated until EOF:
//!   u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | f32 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian. Scalars are zero-dim entries;
//! `meta.*` entries carry settings, and a spiking model is recognised by the
//! presence of `meta.T`.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::params::{NetworkConfig, STFlowNetParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STFW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).filter(|t| t.numel() == 1).map(|t| t.data()[0])
    }

    pub fn is_spiking(&self) -> bool {
        self.get("meta.T").is_some()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION as usize,
            c.base_channels,
            c.groups,
            c.decoders,
            c.levels,
            c.height,
            c.width,
        ] {
            out.write_u32::<LittleEndian>(v as u32).unwrap();
        }
        for (name, t) in &self.entries {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v as f32).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format(path, d);
        if bytes.len() < 4 + 7 * 4 || &bytes[..4] != MAGIC {
            return Err(bad("not an STFW checkpoint".into()));
        }
        let mut r = Cursor::new(&bytes[4..]);
        let mut header = [0usize; 7];
        for h in header.iter_mut() {
            *h = r.read_u32::<LittleEndian>()? as usize;
        }
        if header[0] != VERSION as usize {
            return Err(bad(format!("unsupported version {}", header[0])));
        }
        let mut entries = Vec::new();
        let total = bytes.len() as u64 - 4;
        while r.position() < total {
            let at = r.position() + 4;
            let truncated = |_| bad(format!("truncated entry at offset {at}"));
            let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| bad(format!("entry name at offset {at} is not utf-8")))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>().map_err(truncated)? as usize);
            }
            let numel: usize = shape.iter().product();
            if (numel as u64) * 4 > total - r.position() {
                return Err(bad(format!("entry {name} claims {numel} values past end of file")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.read_f32::<LittleEndian>()? as f64);
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        let [_, base_channels, groups, decoders, levels, height, width] = header;
        let mut cp = Checkpoint {
            config: NetworkConfig {
                base_channels,
                groups,
                decoders,
                levels,
                height,
                width,
                ..NetworkConfig::default()
            },
            entries,
        };
        if let Some(s) = cp.scalar("meta.flow_scale") {
            cp.config.flow_scale = s;
        }
        cp.config.qcfs_shift = cp.scalar("meta.qcfs_shift").is_some_and(|s| s != 0.0);
        cp.config.validate().map_err(|e| bad(e.to_string()))?;
        Ok(cp)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(path, &fs::read(path)?)
    }

    /// Checkpoint entries for an ANN: its tensors followed by `meta.*`.
    pub fn from_ann(params: &STFlowNetParams) -> Self {
        let mut entries: Vec<(String, Tensor)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        entries.push(("meta.flow_scale".into(), Tensor::scalar(params.config.flow_scale)));
        entries.push((
            "meta.qcfs_shift".into(),
            Tensor::scalar(if params.config.qcfs_shift { 1.0 } else { 0.0 }),
        ));
        Checkpoint {
            config: params.config.clone(),
            entries,
        }
    }

    /// The network tensors, ignoring `meta.*` and any entry in `skip`.
    pub fn ann_params(&self, skip: impl Fn(&str) -> bool) -> Result<STFlowNetParams> {
        let named: HashMap<String, Tensor> = self
            .entries
            .iter()
            .filter(|(n, _)| !n.starts_with("meta.") && !skip(n))
            .cloned()
            .collect();
        STFlowNetParams::from_named(self.config.clone(), named)
    }
}

pub fn save_ann(params: &STFlowNetParams, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_ann(params).save(path)
}

pub fn load_ann(path: impl AsRef<Path>) -> Result<STFlowNetParams> {
    let path = path.as_ref();
    let cp = Checkpoint::load(path)?;
    if cp.is_spiking() {
        return Err(Error::format(path, "checkpoint holds a converted spiking model, not an ANN"));
    }
    cp.ann_params(|_| false).map_err(|e| Error::format(path, e.to_string()))
}
