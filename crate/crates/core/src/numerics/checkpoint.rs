//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "PULSECKP"
//! version      u32       FORMAT_VERSION
//! config_len   u64       followed by that many bytes of UTF-8 (model config, JSON)
//! n_params     u64
//! repeated n_params times:
//!   name_len   u32       followed by the UTF-8 parameter path
//!   group      u8        0 = backbone, 1 = head
//!   ndim       u32       followed by ndim u64 dimensions
//!   values     f64 × numel, raw IEEE-754 bits
//! ```

use std::io::{Read, Write};

use super::params::{ParamGroup, ParamStore};
use super::{NumericsError, Tensor};

pub const MAGIC: &[u8; 8] = b"PULSECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_json: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<(), NumericsError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.config_json.len() as u64).to_le_bytes())?;
        w.write_all(self.config_json.as_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for id in self.params.ids() {
            let name = self.params.name(id);
            let t = self.params.get(id);
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let group: u8 = match self.params.group(id) {
                ParamGroup::Backbone => 0,
                ParamGroup::Head => 1,
            };
            w.write_all(&[group])?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, NumericsError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NumericsError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(NumericsError::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let config_len = read_u64(&mut r)? as usize;
        let config_json = read_string(&mut r, config_len)?;
        let n = read_u64(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let mut group = [0u8; 1];
            r.read_exact(&mut group)?;
            let group = match group[0] {
                0 => ParamGroup::Backbone,
                1 => ParamGroup::Head,
                g => {
                    return Err(NumericsError::Checkpoint(format!(
                        "unknown group tag {g} for {name}"
                    )))
                }
            };
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?, group);
        }
        Ok(Self {
            config_json,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), NumericsError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, NumericsError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, NumericsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String, NumericsError> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| NumericsError::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamStore::new();
        params.add(
            "a.w",
            &[3, 4],
            Init::TruncatedNormal(1.0),
            ParamGroup::Backbone,
            &mut rng,
        );
        params.add(
            "head.b",
            &[5],
            Init::TruncatedNormal(1e-300),
            ParamGroup::Head,
            &mut rng,
        );
        let ckpt = Checkpoint {
            config_json: "{\"d_model\":4}".into(),
            params,
        };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.config_json, ckpt.config_json);
        assert!(back.params.bit_identical(&ckpt.params));
        assert_eq!(
            back.params.group(back.params.id("head.b").unwrap()),
            ParamGroup::Head
        );
    }

    #[test]
    fn rejects_wrong_version() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&99u32.to_le_bytes());
        let err = Checkpoint::read_from(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
