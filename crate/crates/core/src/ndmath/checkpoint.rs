//! Named-array checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"CSCK"
//! version  u32
//! header   u32 length + UTF-8 JSON
//! count    u32
//! entries  count x { u32 name length, name bytes, u64 element count, f64 LE elements }
//! ```
//!
//! The JSON header records every network's layer sizes and activations under
//! `"networks"`, plus free-form metadata under `"meta"`. Array names follow
//! `<network>/<layer>/<weights|biases>` for network parameters.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::{Map, Value};

use super::mlp::MlpSpec;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    networks: Map<String, Value>,
    meta: Map<String, Value>,
    arrays: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.arrays.insert(name.into(), values);
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.arrays.insert(name.into(), vec![value]);
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        match self.get(name)? {
            [v] => Ok(*v),
            other => Err(Error::Checkpoint(format!(
                "`{name}` holds {} values, expected 1",
                other.len()
            ))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn set_network_spec(&mut self, name: &str, spec: &MlpSpec) -> Result<()> {
        self.networks
            .insert(name.to_owned(), serde_json::to_value(spec)?);
        Ok(())
    }

    pub fn network_spec(&self, name: &str) -> Result<MlpSpec> {
        let v = self
            .networks
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no network `{name}` in header")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn set_meta(&mut self, key: &str, value: Value) {
        self.meta.insert(key.to_owned(), value);
    }

    pub fn meta(&self, key: &str) -> Option<&Value> {
        self.meta.get(key)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&serde_json::json!({
            "networks": self.networks,
            "meta": self.meta,
        }))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&len_u32(header.len())?.to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&len_u32(self.arrays.len())?.to_le_bytes())?;
        for (name, values) in &self.arrays {
            w.write_all(&len_u32(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: Value = serde_json::from_slice(&header)?;
        let take_map = |key: &str| -> Map<String, Value> {
            header
                .get(key)
                .and_then(Value::as_object)
                .cloned()
                .unwrap_or_default()
        };
        let networks = take_map("networks");
        let meta = take_map("meta");

        let count = read_u32(&mut r)?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let mut len = [0u8; 8];
            r.read_exact(&mut len)?;
            let len = u64::from_le_bytes(len) as usize;
            let mut values = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                values.push(f64::from_le_bytes(buf));
            }
            arrays.insert(name, values);
        }
        Ok(Self {
            networks,
            meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // Write-then-rename so an interrupted run never leaves a truncated file.
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(f);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
