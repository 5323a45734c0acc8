//! Binary checkpoints: `SSNC`, version, entry count, then per entry a
//! u16-prefixed name, rank, u32 dims and f32 data, all little-endian.
//! Batch-norm running statistics are stored as `<layer>.running_mean` and
//! `<layer>.running_var`.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use super::{Model, ModelParams};
use crate::error::{Error, Result};
use crate::graph::RunningStats;
use crate::tensor::{Real, Shape, Tensor};

const MAGIC: &[u8; 4] = b"SSNC";
const VERSION: u32 = 1;
const MEAN: &str = ".running_mean";
const VAR: &str = ".running_var";

fn squeezed(shape: Shape) -> Vec<u32> {
    let dims = shape.dims();
    let lead = dims.iter().take(2).take_while(|&&d| d == 1).count();
    dims[lead..].iter().map(|&d| d as u32).collect()
}

fn put_entry(out: &mut Vec<u8>, name: &str, shape: Shape, data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let dims = squeezed(shape);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint<T: Real>(params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = params.len() + 2 * params.norms().count();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let f = |v: &T| v.as_f64() as f32;
    for (name, t) in params.iter() {
        put_entry(&mut out, name, t.shape(), t.data().iter().map(f));
    }
    for (name, s) in params.norms() {
        let shape = Shape::new(1, 1, s.mean.len());
        put_entry(&mut out, &format!("{name}{MEAN}"), shape, s.mean.iter().map(f));
        put_entry(&mut out, &format!("{name}{VAR}"), shape, s.var.iter().map(f));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::parse(self.bytes.len(), format!("checkpoint truncated reading {n} bytes at {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes every entry, in file order, without validating against a model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<IndexMap<String, Tensor<f32>>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::parse(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = IndexMap::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse(at + 2, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        if !(1..=3).contains(&rank) {
            return Err(Error::parse(at, format!("{name}: unsupported rank {rank}")));
        }
        let mut dims = [1usize; 3];
        for d in dims[3 - rank..].iter_mut() {
            *d = r.u32()? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2]);
        let data = r
            .take(shape.numel() * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::parse(at, format!("duplicate entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos, "trailing bytes after the last entry"));
    }
    Ok(out)
}

/// Rebuilds parameters for `model` from decoded entries, failing on any
/// missing, unexpected, or mis-shaped entry.
fn assemble(model: &Model, mut entries: IndexMap<String, Tensor<f32>>) -> Result<ModelParams<f32>> {
    let specs = model.specs();
    let mut norms = IndexMap::new();
    for (name, c) in &specs.norms {
        let mut take = |suffix: &str| -> Result<Vec<f32>> {
            let key = format!("{name}{suffix}");
            match entries.shift_remove(&key) {
                Some(t) if t.shape() == Shape::new(1, 1, *c) => Ok(t.into_data()),
                Some(t) => Err(Error::Checkpoint(format!("{key}: shape {} expected (1, 1, {c})", t.shape()))),
                None => Err(Error::Checkpoint(format!("missing {key}"))),
            }
        };
        let mean = take(MEAN)?;
        let var = take(VAR)?;
        norms.insert(name.clone(), RunningStats { mean, var });
    }
    let params = ModelParams::from_parts(entries, norms);
    params.check_against(&specs)?;
    // Restore spec order so optimizer state lines up with a fresh model.
    let tensors = specs
        .params
        .iter()
        .map(|p| (p.name.clone(), params.get(&p.name).unwrap().clone()))
        .collect();
    let norms = params.norms().map(|(k, v)| (k.to_string(), v.clone())).collect();
    Ok(ModelParams::from_parts(tensors, norms))
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&encode_checkpoint(params))?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    assemble(model, decode_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    fn toy(v: Variant) -> Model {
        Model::new(ModelConfig::toy().with_variant(v)).unwrap()
    }

    #[test]
    fn round_trip() {
        let model = toy(Variant::Full);
        let mut params = model.init_params::<f32>(5);
        let name = params.norms().next().unwrap().0.to_string();
        params.norm_mut(&name).unwrap().mean[0] = 0.25;
        let back = assemble(&model, decode_checkpoint(&encode_checkpoint(&params)).unwrap()).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn shapes_are_squeezed() {
        assert_eq!(squeezed(Shape::new(5, 1, 16)), vec![5, 1, 16]);
        assert_eq!(squeezed(Shape::new(1, 1, 16)), vec![16]);
        assert_eq!(squeezed(Shape::new(1, 16, 4)), vec![16, 4]);
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let bytes = encode_checkpoint(&toy(Variant::Full).init_params::<f32>(0));
        let err = assemble(&toy(Variant::U2Only), decode_checkpoint(&bytes).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&toy(Variant::UBasic).init_params::<f32>(0));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 2]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).is_err());
    }
}
