//! Binary snapshot files: a JSON header followed by little-endian `f64`
//! arrays.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, the UTF-8
//! JSON header, then every array listed in the header, in order, as raw
//! `f64` little-endian values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

const MAGIC: &[u8; 8] = b"HCSNAP\0\x01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    kind: String,
    meta: M,
    arrays: Vec<ArrayEntry>,
}

/// Named `f64` arrays plus typed metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<M> {
    pub meta: M,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl<M> Snapshot<M> {
    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

impl<M: Serialize + DeserializeOwned> Snapshot<M> {
    pub fn write(&self, path: &Path, kind: &str, version: u32) -> Result<()> {
        let header = Header {
            kind: kind.to_string(),
            meta: &self.meta,
            arrays: self
                .arrays
                .iter()
                .map(|(name, v)| ArrayEntry {
                    name: name.clone(),
                    len: v.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = self.arrays.iter().map(|(_, v)| v.len()).sum();
        let mut buf = Vec::with_capacity(20 + json.len() + total * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&version.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, v) in &self.arrays {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        // Write-then-rename keeps the previous file intact if interrupted.
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path, kind: &'static str, version: u32) -> Result<Self> {
        let mut raw = Vec::new();
        fs::File::open(path)?.read_to_end(&mut raw)?;
        let bad = |msg: &str| Error::Malformed {
            kind,
            msg: format!("{}: {msg}", path.display()),
        };
        if raw.len() < 20 || &raw[..8] != MAGIC {
            return Err(bad("not a snapshot file"));
        }
        let found = u32::from_le_bytes(raw[8..12].try_into().expect("4 bytes"));
        if found != version {
            return Err(Error::SchemaVersion {
                kind,
                found,
                expected: version,
            });
        }
        let json_len = u64::from_le_bytes(raw[12..20].try_into().expect("8 bytes")) as usize;
        let body = raw.get(20..20 + json_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header<M> = serde_json::from_slice(body)?;
        if header.kind != kind {
            return Err(bad(&format!("holds a {}", header.kind)));
        }
        let mut pos = 20 + json_len;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let end = pos + entry.len * 8;
            let bytes = raw.get(pos..end).ok_or_else(|| bad("truncated data"))?;
            let v = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((entry.name, v));
            pos = end;
        }
        if pos != raw.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }
}

/// Every tensor of the store as `param:<name>` arrays.
pub fn store_arrays(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
    store
        .iter()
        .map(|(name, _, t)| (format!("param:{name}"), t.data().to_vec()))
        .collect()
}

/// Copies `param:<name>` arrays into a store built with the same layout.
pub fn restore_store<M>(snap: &Snapshot<M>, store: &mut ParamStore) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("param:{}", store.name(id));
        let values = snap.array(&name).ok_or_else(|| Error::Malformed {
            kind: "snapshot",
            msg: format!("missing {name}"),
        })?;
        let t = store.get_mut(id);
        if values.len() != t.data().len() {
            return Err(Error::Malformed {
                kind: "snapshot",
                msg: format!("{name} has {} values, expected {}", values.len(), t.data().len()),
            });
        }
        t.data_mut().copy_from_slice(values);
    }
    Ok(())
}

/// Exact position of a ChaCha generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position; a `u128` split in two for portable JSON.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos((u128::from(self.word_pos_hi) << 64) | u128::from(self.word_pos_lo));
        rng
    }
}
