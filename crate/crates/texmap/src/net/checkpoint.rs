//! Parameter checkpoints: one binary file holding a length-prefixed JSON
//! header (network spec, seed, epoch, block directory) followed by each
//! block's values as little-endian 64-bit floats in declaration order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::model::{FusionNetSpec, ParamBlock, Params};
use crate::net::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: FusionNetSpec,
    seed: u64,
    epoch: usize,
    blocks: Vec<BlockHeader>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub spec: FusionNetSpec,
    pub seed: u64,
    pub epoch: usize,
    pub params: Params,
}

pub fn save_checkpoint(
    path: &Path,
    spec: &FusionNetSpec,
    seed: u64,
    epoch: usize,
    params: &Params,
) -> Result<()> {
    params.validate_for(spec)?;
    let header = Header {
        spec: spec.clone(),
        seed,
        epoch,
        blocks: params
            .blocks
            .iter()
            .map(|b| BlockHeader {
                name: b.name.clone(),
                shape: b.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::data(format!("header encoding: {e}")))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        for block in &params.blocks {
            for v in block.tensor.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::data("checkpoint truncated before header length"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::data("checkpoint truncated inside header"))?;
    let header: Header = serde_json::from_slice(&bytes[8..body_start])
        .map_err(|e| Error::data(format!("checkpoint header: {e}")))?;

    // the directory must be exactly what the embedded spec declares
    let expected = header.spec.param_blocks()?;
    if header.blocks.len() != expected.len()
        || header
            .blocks
            .iter()
            .zip(&expected)
            .any(|(b, (name, shape))| &b.name != name || &b.shape != shape)
    {
        return Err(Error::data(
            "checkpoint block directory does not match its network spec",
        ));
    }

    let mut offset = body_start;
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for bh in &header.blocks {
        let len: usize = bh.shape.iter().product();
        let end = offset + len * 8;
        if end > bytes.len() {
            return Err(Error::data(format!(
                "checkpoint truncated inside block {:?}",
                bh.name
            )));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&bh.shape, data)
            .map_err(|e| Error::data(format!("checkpoint block {:?}: {e}", bh.name)))?;
        blocks.push(ParamBlock {
            name: bh.name.clone(),
            tensor,
        });
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::data("checkpoint has trailing bytes"));
    }
    Ok(Checkpoint {
        spec: header.spec,
        seed: header.seed,
        epoch: header.epoch,
        params: Params { blocks },
    })
}
