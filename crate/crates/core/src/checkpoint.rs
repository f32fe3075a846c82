//! Binary checkpoints: the architecture config plus every stored tensor.
//!
//! Layout (little-endian): magic `GFRNCKP1`, `u32` config length, config
//! JSON, `u32` tensor count, then per tensor `u32` name length, name bytes,
//! four `u32` dims and the values as `f64`.

use std::fs;
use std::path::Path;

use crate::arch::{ArchConfig, Model};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Shape, Tensor};

const MAGIC: &[u8; 8] = b"GFRNCKP1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    let json = serde_json::to_vec(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, model.params.len())?;
    for p in model.params.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        for d in p.value.shape().as_array() {
            put_u32(&mut out, d)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = r.u32()?;
    let config: ArchConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let shape = Shape::from([r.u32()?, r.u32()?, r.u32()?, r.u32()?]);
        let raw = r.take(shape.numel() * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        params
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_params(config, params)
}

pub fn save<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    crate::data::netpbm::write_bytes(path, &encode(model)?)
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Variant;

    fn model() -> Model<f32> {
        Model::init(ArchConfig::new(4, vec![4, 6, 6, 8], 3, Variant::Gfrnet), 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back: Model<f32> = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back).unwrap(), encode(&m).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&model()).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode::<f32>(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f32>(&extra).is_err());
    }
}
