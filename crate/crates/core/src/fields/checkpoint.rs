//! Checkpoint files: one line of JSON header followed by little-endian `f64`
//! parameter values, then optionally the optimizer's first and second moments
//! in the same group order.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::mat::Mat;
use super::network::NetworkSpec;
use super::params::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

pub const FORMAT: &str = "trilayer-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupHeader {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    step: u64,
    n_frames: usize,
    network: NetworkSpec,
    groups: Vec<GroupHeader>,
    moments: bool,
    #[serde(default)]
    config: serde_json::Value,
}

/// Adam first and second moments, one matrix per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Optimizer steps completed.
    pub step: u64,
    pub n_frames: usize,
    pub network: NetworkSpec,
    pub store: ParamStore,
    pub moments: Option<Moments>,
    /// Training configuration that produced the checkpoint, stored verbatim.
    pub config: serde_json::Value,
}

fn write_mats<'a>(out: &mut impl Write, mats: impl Iterator<Item = &'a Mat>) -> Result<()> {
    for m in mats {
        let mut buf = Vec::with_capacity(m.data.len() * 8);
        for v in &m.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_mats(input: &mut impl Read, groups: &[GroupHeader]) -> Result<Vec<Mat>> {
    groups
        .iter()
        .map(|g| {
            let n = g.shape[0] * g.shape[1];
            let mut buf = vec![0u8; n * 8];
            input
                .read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated data for {}: {e}", g.name)))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(Mat::from_vec(g.shape[0], g.shape[1], data))
        })
        .collect()
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(m) = &self.moments {
            if m.m.len() != self.store.groups.len() || m.v.len() != self.store.groups.len() {
                return Err(Error::Checkpoint(
                    "moment count does not match parameter groups".into(),
                ));
            }
        }
        let header = Header {
            format: FORMAT.into(),
            step: self.step,
            n_frames: self.n_frames,
            network: self.network.clone(),
            groups: self
                .store
                .groups
                .iter()
                .map(|g| GroupHeader {
                    name: g.name.clone(),
                    shape: [g.value.rows, g.value.cols],
                })
                .collect(),
            moments: self.moments.is_some(),
            config: self.config.clone(),
        };
        // Write to a sibling file first so an interrupted save never leaves a torn checkpoint.
        let tmp = path.with_extension("partial");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            serde_json::to_writer(&mut f, &header)?;
            f.write_all(b"\n")?;
            write_mats(&mut f, self.store.groups.iter().map(|g| &g.value))?;
            if let Some(m) = &self.moments {
                write_mats(&mut f, m.m.iter())?;
                write_mats(&mut f, m.v.iter())?;
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        let header: Header = serde_json::from_slice(&line)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format {:?}",
                header.format
            )));
        }
        let values = read_mats(&mut r, &header.groups)?;
        let store = ParamStore {
            groups: header
                .groups
                .iter()
                .zip(values)
                .map(|(g, value)| ParamGroup {
                    name: g.name.clone(),
                    value,
                })
                .collect(),
        };
        let moments = if header.moments {
            let m = read_mats(&mut r, &header.groups)?;
            let v = read_mats(&mut r, &header.groups)?;
            Some(Moments { m, v })
        } else {
            None
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            step: header.step,
            n_frames: header.n_frames,
            network: header.network,
            store,
            moments,
            config: header.config,
        })
    }
}
