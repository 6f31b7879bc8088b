//! Binary dataset cache: a JSON header describing the generator followed
//! by little-endian sample payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::DataSection;
use crate::error::{Error, Result};
use crate::synthetic_pose::{generate_dataset, Dataset, GeneratorConfig, SyntheticSample};

const MAGIC: &[u8; 8] = b"APDSET01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    generator: GeneratorConfig,
    seed: u64,
    n_train: usize,
    n_val: usize,
}

pub fn build_dataset(data: &DataSection) -> Result<Dataset> {
    generate_dataset(&data.generator(), data.n_train, data.n_val, data.seed)
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let header = Header {
        generator: ds.generator.clone(),
        seed: ds.seed,
        n_train: ds.train.len(),
        n_val: ds.val.len(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for s in ds.train.iter().chain(&ds.val) {
        for v in s.image.iter().chain(s.keypoints.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(s.visible.iter().map(|&v| v as u8));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("dataset cache is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a dataset cache".into()));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let g = header.generator.grid;
    let k = header.generator.keypoints;
    let mut samples = Vec::with_capacity(header.n_train + header.n_val);
    for _ in 0..header.n_train + header.n_val {
        let image = (0..g * g).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut keypoints = Vec::with_capacity(k);
        for _ in 0..k {
            keypoints.push([r.f64()?, r.f64()?]);
        }
        let visible = r.take(k)?.iter().map(|&b| b != 0).collect();
        samples.push(SyntheticSample {
            image,
            keypoints,
            visible,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in dataset cache".into()));
    }
    let val = samples.split_off(header.n_train);
    Ok(Dataset {
        generator: header.generator,
        seed: header.seed,
        train: samples,
        val,
    })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

/// Reads a cache and checks that regenerating from its header reproduces
/// it exactly.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
    let ds = decode_dataset(&bytes)?;
    let again = generate_dataset(&ds.generator, ds.train.len(), ds.val.len(), ds.seed)?;
    if encode_dataset(&again)? != bytes {
        return Err(Error::Format("dataset cache does not match its generator config".into()));
    }
    Ok(ds)
}
