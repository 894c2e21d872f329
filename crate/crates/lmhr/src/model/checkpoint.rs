//! Checkpoint container: magic `LMHRCKP1`, a length-prefixed JSON metadata
//! block (config hash, epoch, seed, RNG position, optimizer step), then
//! named little-endian f32 tensor records covering parameters and both
//! Adam moment buffers. Loading refuses a mismatched config hash.

use crate::config::RunConfig;
use crate::error::{LmhrError, Result};
use crate::model::ModelState;
use crate::numerics::optim::AdamState;
use crate::numerics::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LMHRCKP1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u32,
    config_hash: String,
    epoch: usize,
    seed: u64,
    /// ChaCha stream position, decimal u128
    rng_word_pos: String,
    adam_t: u64,
}

fn push_record(buf: &mut Vec<u8>, name: &str, tensor: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(LmhrError::format(format!(
                "checkpoint truncated at byte offset {}",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| LmhrError::format("checkpoint record name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = self.take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Serialize the full trainer state. The write lands atomically via a
/// sibling temp file and rename.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let meta = Meta {
        version: VERSION,
        config_hash: state.config_hash.clone(),
        epoch: state.epoch,
        seed: state.seed,
        rng_word_pos: state.rng.get_word_pos().to_string(),
        adam_t: state.adam.t,
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    for (name, tensor) in state.params.iter() {
        push_record(&mut buf, &format!("p.{name}"), tensor);
    }
    for (idx, (name, _)) in state.params.iter().enumerate() {
        push_record(&mut buf, &format!("m.{name}"), &state.adam.m[idx]);
        push_record(&mut buf, &format!("v.{name}"), &state.adam.v[idx]);
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Restore a [`ModelState`] under `cfg`. The stored config hash must match
/// `cfg.semantic_hash()`.
pub fn load_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    n_nodes: usize,
    n_channels: usize,
) -> Result<ModelState> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..8] != CHECKPOINT_MAGIC {
        return Err(LmhrError::format("not an LMHRCKP1 checkpoint"));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 8,
    };
    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
    if meta.version != VERSION {
        return Err(LmhrError::format(format!(
            "checkpoint version {} unsupported (expected {VERSION})",
            meta.version
        )));
    }
    let expect_hash = cfg.semantic_hash();
    if meta.config_hash != expect_hash {
        return Err(LmhrError::config(format!(
            "checkpoint was trained under config hash {} but the current config hashes to \
             {expect_hash}; refusing to load mismatched architecture",
            meta.config_hash
        )));
    }

    // rebuild the parameter layout, then overwrite every tensor by name
    let mut scratch_rng = ChaCha8Rng::seed_from_u64(meta.seed);
    let mut params = crate::model::build_params::<f32>(cfg, n_nodes, n_channels, &mut scratch_rng)?;
    let mut adam = AdamState::new(&params, cfg.adam_hyper())?;
    adam.t = meta.adam_t;

    let mut records = std::collections::BTreeMap::new();
    while !r.done() {
        let (name, tensor) = r.record()?;
        records.insert(name, tensor);
    }
    let names: Vec<String> = params.iter().map(|(n, _)| n).collect();
    for (idx, name) in names.iter().enumerate() {
        for (prefix, slot) in [("p", 0usize), ("m", 1), ("v", 2)] {
            let key = format!("{prefix}.{name}");
            let rec = records.remove(&key).ok_or_else(|| {
                LmhrError::format(format!("checkpoint is missing record {key}"))
            })?;
            let target = match slot {
                0 => params
                    .iter_mut()
                    .nth(idx)
                    .map(|(_, t)| t)
                    .expect("parameter index"),
                1 => &mut adam.m[idx],
                _ => &mut adam.v[idx],
            };
            if rec.shape() != target.shape() {
                return Err(LmhrError::format(format!(
                    "checkpoint record {key} has shape {:?}, expected {:?}",
                    rec.shape(),
                    target.shape()
                )));
            }
            *target = rec;
        }
    }
    if !records.is_empty() {
        return Err(LmhrError::format(format!(
            "checkpoint carries {} unknown records (first: {})",
            records.len(),
            records.keys().next().unwrap()
        )));
    }

    let word_pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| LmhrError::format("bad rng position in checkpoint"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(meta.seed.wrapping_add(1));
    rng.set_word_pos(word_pos);

    Ok(ModelState {
        params,
        adam,
        epoch: meta.epoch,
        seed: meta.seed,
        rng,
        config_hash: meta.config_hash,
    })
}
