//! Checkpoint file: one line of JSON header, then the raw little-endian
//! float64 payload of every tensor in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, SharedParams};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "semvlp-checkpoint";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    pub optimizer: Option<OptimizerHeader>,
    /// Free-form run information (step, task, seed, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SharedParams,
    pub optimizer: Option<Adam>,
    pub meta: serde_json::Value,
}

pub fn save(path: &Path, params: &SharedParams, optimizer: Option<&Adam>, meta: serde_json::Value) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = params.store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    if let Some(adam) = optimizer {
        for (id, mom) in &adam.moments {
            let name = params.store.name(*id);
            entries.push((format!("{ADAM_M}{name}"), &mom.m));
            entries.push((format!("{ADAM_V}{name}"), &mom.v));
        }
    }
    let mut offset = 0;
    let tensors = entries
        .iter()
        .map(|(name, t)| {
            let e = ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel() * 8;
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config.clone(),
        optimizer: optimizer.map(|a| OptimizerHeader {
            config: a.config.clone(),
            step: a.step,
        }),
        meta,
        tensors,
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    buf.reserve(offset);
    for (_, t) in &entries {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // Write-then-rename so a reader never sees a half-written file.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<Header> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    read_header_from(&mut reader)
}

fn read_header_from(reader: &mut impl BufRead) -> Result<Header> {
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let header: Header = serde_json::from_slice(&line).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    Ok(header)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let header = read_header_from(&mut reader)?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;

    let mut store = ParamStore::new();
    let mut moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    let mut expected = 0;
    for e in &header.tensors {
        if e.offset != expected {
            return Err(Error::Checkpoint(format!(
                "{}: offset {} expected {expected}",
                e.name, e.offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        let end = e.offset + numel * 8;
        let bytes = payload
            .get(e.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("{}: payload truncated", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        expected = end;
        if let Some(name) = e.name.strip_prefix(ADAM_M) {
            moments.entry(name.to_string()).or_default().0 = Some(t);
        } else if let Some(name) = e.name.strip_prefix(ADAM_V) {
            moments.entry(name.to_string()).or_default().1 = Some(t);
        } else {
            store.insert(e.name.clone(), t)?;
        }
    }
    if expected != payload.len() {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest covers {expected}",
            payload.len()
        )));
    }
    let params = SharedParams::from_store(header.config, store)?;
    let optimizer = match header.optimizer {
        Some(h) => {
            let mut adam = Adam::new(h.config)?;
            adam.step = h.step;
            for (name, pair) in moments {
                let id = params.store.id(&name)?;
                match pair {
                    (Some(m), Some(v)) => {
                        adam.moments.insert(id, Moments { m, v });
                    }
                    _ => return Err(Error::Checkpoint(format!("{name}: incomplete optimizer moments"))),
                }
            }
            Some(adam)
        }
        None if moments.is_empty() => None,
        None => return Err(Error::Checkpoint("optimizer moments without optimizer header".into())),
    };
    Ok(Checkpoint {
        params,
        optimizer,
        meta: header.meta,
    })
}
