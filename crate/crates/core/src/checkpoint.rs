//! Model checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! "CSIM" | version u16 | json_len u32 | json bytes | entry_count u32 |
//! entries: name_len u16 | name (UTF-8) | rank u8 | dims u32[rank] | f32[numel]
//! ```
//!
//! Parameters live in memory as f64 and are stored as f32, so a loaded
//! checkpoint saves back to identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSIM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Hyperparameter block, kept verbatim.
    pub hyperparameters: String,
    pub params: Params,
}

impl Checkpoint {
    pub fn new<T: serde::Serialize>(hyperparameters: &T, params: Params) -> Result<Self> {
        Ok(Self {
            hyperparameters: serde_json::to_string(hyperparameters)?,
            params,
        })
    }

    pub fn hyperparameters<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_str(&self.hyperparameters)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = self.hyperparameters.as_bytes();
        out.extend_from_slice(&len_u32(json.len(), "hyperparameter block")?.to_le_bytes());
        out.extend_from_slice(json);
        out.extend_from_slice(&len_u32(self.params.len(), "parameter count")?.to_le_bytes());
        for (name, t) in self.params.iter() {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Format(format!("rank of {name} exceeds 255")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let json_len = r.u32("hyperparameter length")? as usize;
        let hyperparameters = std::str::from_utf8(r.take(json_len, "hyperparameter block")?)
            .map_err(|_| Error::Format("hyperparameter block is not UTF-8".into()))?
            .to_string();
        serde_json::from_str::<serde_json::Value>(&hyperparameters)?;
        let count = r.u32("parameter count")?;
        let mut params = Params::default();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4, "parameter payload")?;
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            if params.contains(&name) {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            params.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after parameter table",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            hyperparameters,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} exceeds u32: {n}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncation {
                offset: self.pos as u64,
                what: what.into(),
            }),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelConfig};

    fn tiny() -> Checkpoint {
        let cfg = ModelConfig {
            channels: 4,
            max_time: 6,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers: 1,
            d_embed: 8,
            num_classes: 3,
            ..Default::default()
        };
        Checkpoint::new(&cfg, init_params(&cfg, 7).unwrap()).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = tiny().to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
        let cfg: ModelConfig = loaded.hyperparameters().unwrap();
        assert_eq!(cfg.d_model, 8);
    }

    #[test]
    fn loaded_values_are_f32_rounded() {
        let ck = tiny();
        let loaded = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        for ((na, a), (nb, b)) in ck.params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = tiny().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncation { .. })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
    }
}
