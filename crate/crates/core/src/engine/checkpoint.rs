//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "AMDE" | version u32 | header_len u32 | header JSON
//! | tensor_count u32
//! | per tensor: name_len u16 | name UTF-8 | ndim u8 | dims u32 × ndim | f64 payload
//! | CRC32 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::diffcore::Tensor;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AMDE";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the per-step RNG streams; streams are derived from
/// `(seed, epoch, step)`, so this fully determines the next draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    rng: RngState,
    final_loss: f64,
    clamp_events: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    /// Mean joint loss of the last epoch.
    pub final_loss: f64,
    pub clamp_events: usize,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &EncoderModel,
        config: &TrainConfig,
        epoch: usize,
        final_loss: f64,
        clamp_events: usize,
    ) -> Self {
        Self {
            config: config.clone(),
            epoch,
            rng: RngState {
                seed: config.seed,
                epoch,
                step: 0,
            },
            final_loss,
            clamp_events,
            tensors: model
                .named_parameters()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn model(&self) -> Result<EncoderModel> {
        EncoderModel::from_named(self.config.encoder.clone(), self.tensors.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng,
            final_loss: self.final_loss,
            clamp_events: self.clamp_events,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(json.len(), "header")?.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&u32_len(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let ndim = u8::try_from(t.rank())
                .map_err(|_| Error::contract(format!("tensor {name} has too many axes")))?;
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let parsed = parse_body(bytes);
        let body_end = match &parsed {
            Ok((_, end)) => *end,
            Err(Error::Truncated) => return Err(Error::Truncated),
            // Structure is unreadable; let the checksum decide the report.
            Err(_) => bytes.len().saturating_sub(4),
        };
        if bytes.len() < body_end + 4 {
            return Err(Error::Truncated);
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        if bytes.len() != body_end + 4 {
            return Err(Error::contract("trailing bytes after checkpoint body"));
        }
        parsed.map(|(ckpt, _)| ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::contract(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        // The trailing four bytes are the checksum, never body.
        if end + 4 > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parses everything between the version field and the checksum; returns
/// the checkpoint and the offset where the checksum starts.
fn parse_body(bytes: &[u8]) -> Result<(Checkpoint, usize)> {
    let mut r = Reader { bytes, pos: 8 };
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::contract("tensor name is not UTF-8"))?
            .to_owned();
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::Truncated)?;
        let payload = r.take(n.checked_mul(8).ok_or(Error::Truncated)?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(dims, data)?));
    }
    Ok((
        Checkpoint {
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            final_loss: header.final_loss,
            clamp_events: header.clamp_events,
            tensors,
        },
        r.pos,
    ))
}

/// CRC32 over every parameter's name and raw bytes, in canonical order.
pub fn parameter_checksum(model: &EncoderModel) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (name, t) in model.named_parameters() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;
    use crate::encoder::EncoderConfig;

    fn tiny() -> Checkpoint {
        let encoder = EncoderConfig {
            input_shape: [1, 16, 8],
            backbone_channels: [2, 3],
            feature_channels: 4,
            map_height: 2,
            map_width: 1,
            reduced_channels: 3,
            lstm_hidden: 3,
            embed_dim: 4,
            num_classes: 3,
            ..EncoderConfig::default()
        };
        let config = TrainConfig {
            encoder: encoder.clone(),
            data: DataConfig {
                num_ids: 3,
                input_shape: [1, 16, 8],
                ..DataConfig::default()
            },
            pk: crate::data::PkSpec { p: 2, k: 2 },
            ..TrainConfig::default()
        };
        let model = EncoderModel::new(encoder, 5).unwrap();
        Checkpoint::from_model(&model, &config, 3, 0.125, 4)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = tiny();
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), a);
        assert_eq!(back.model().unwrap(), ck.model().unwrap());
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = tiny().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn bumped_version_is_rejected() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 2, .. })
        ));
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = tiny().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::Truncated)
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..6]),
            Err(Error::Truncated)
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
    }
}
