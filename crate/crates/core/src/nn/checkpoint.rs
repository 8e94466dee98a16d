//! Binary checkpoint container.
//!
//! Layout (all integers and floats in the byte order announced by the marker):
//!
//! | offset | size | field                                           |
//! |--------|------|-------------------------------------------------|
//! | 0      | 8    | magic `AXMLPCK\0`                               |
//! | 8      | 4    | byte-order marker `0x0A0B0C0D`                  |
//! | 12     | 4    | format version (currently 1)                    |
//! | 16     | 8    | header length `n`                               |
//! | 24     | n    | JSON header: model config and metadata          |
//! | 24+n   | 8    | parameter count `p`                             |
//! | 32+n   | 8·p  | parameters as IEEE-754 binary64                 |
//!
//! Writers always emit little-endian; readers accept either order.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::config::{parameter_count, ModelConfig};
use super::model::AxialMlp;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AXMLPCK\0";
pub const BYTE_ORDER_MARK: u32 = 0x0A0B_0C0D;
pub const FORMAT_VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub val_dice: Option<f64>,
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AxialMlp,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: AxialMlp, meta: CheckpointMeta) -> Self {
        Checkpoint { model, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.model.config().clone(),
            meta: self.meta.clone(),
        })?;
        let params = self.model.flat_parameters();
        let mut out = Vec::with_capacity(32 + header.len() + 8 * params.len());
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(BYTE_ORDER_MARK)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        out.write_u64::<LittleEndian>(header.len() as u64)?;
        out.write_all(&header)?;
        out.write_u64::<LittleEndian>(params.len() as u64)?;
        for p in params {
            out.write_f64::<LittleEndian>(p)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::parse(0, "not a checkpoint (bad magic)"));
        }
        if bytes.len() < 24 {
            return Err(Error::parse(bytes.len(), "truncated checkpoint preamble"));
        }
        match LittleEndian::read_u32(&bytes[8..12]) {
            BYTE_ORDER_MARK => decode::<LittleEndian>(bytes),
            m if m == BYTE_ORDER_MARK.swap_bytes() => decode::<BigEndian>(bytes),
            m => Err(Error::parse(8, format!("unrecognized byte-order marker {m:#010x}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn decode<B: ByteOrder>(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    cur.set_position(12);
    let version = cur.read_u32::<B>()?;
    if version != FORMAT_VERSION {
        return Err(Error::parse(12, format!("unsupported checkpoint version {version}")));
    }
    let header_len = cur.read_u64::<B>()? as usize;
    let header_end = 24usize
        .checked_add(header_len)
        .filter(|&e| e + 8 <= bytes.len())
        .ok_or_else(|| Error::parse(16, format!("header length {header_len} runs past end of file")))?;
    let header: Header = serde_json::from_slice(&bytes[24..header_end])
        .map_err(|e| Error::parse(24, format!("invalid checkpoint header: {e}")))?;
    header
        .model
        .validate()
        .map_err(|e| Error::parse(24, format!("invalid model config: {e}")))?;
    cur.set_position(header_end as u64);
    let count = cur.read_u64::<B>()? as usize;
    let expected = parameter_count(&header.model);
    if count != expected {
        return Err(Error::parse(
            header_end,
            format!("checkpoint stores {count} parameters, config requires {expected}"),
        ));
    }
    let data_start = header_end + 8;
    if bytes.len() != data_start + 8 * count {
        return Err(Error::parse(
            bytes.len().min(data_start + 8 * count),
            format!(
                "parameter block is {} bytes, expected {}",
                bytes.len() - data_start,
                8 * count
            ),
        ));
    }
    let mut params = vec![0.0; count];
    cur.read_f64_into::<B>(&mut params)?;
    let mut rest = Vec::new();
    cur.read_to_end(&mut rest)?;
    debug_assert!(rest.is_empty());
    Ok(Checkpoint {
        model: AxialMlp::from_flat(header.model, &params)?,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            crop_shape: [8, 8, 8],
            patch: [4, 4, 4],
            hidden: 2,
            depth: 1,
            ..ModelConfig::default()
        };
        Checkpoint::new(
            AxialMlp::init(cfg, &mut rng::seeded(1)).unwrap(),
            CheckpointMeta {
                epoch: Some(3),
                val_dice: Some(0.5),
                fold: Some(1),
            },
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn big_endian_files_are_readable() {
        let ck = sample();
        let le = ck.to_bytes().unwrap();
        let header_len = LittleEndian::read_u64(&le[16..24]) as usize;
        let mut be = le[..8].to_vec();
        be.write_u32::<BigEndian>(BYTE_ORDER_MARK).unwrap();
        be.write_u32::<BigEndian>(FORMAT_VERSION).unwrap();
        be.write_u64::<BigEndian>(header_len as u64).unwrap();
        be.extend_from_slice(&le[24..24 + header_len]);
        let params = ck.model.flat_parameters();
        be.write_u64::<BigEndian>(params.len() as u64).unwrap();
        for p in params {
            be.write_f64::<BigEndian>(p).unwrap();
        }
        assert_eq!(Checkpoint::from_bytes(&be).unwrap(), ck);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Parse { .. })
        ));
        let header_len = LittleEndian::read_u64(&bytes[16..24]) as usize;
        let mut wrong_count = bytes.clone();
        LittleEndian::write_u64(&mut wrong_count[24 + header_len..32 + header_len], 7);
        assert!(matches!(Checkpoint::from_bytes(&wrong_count), Err(Error::Parse { .. })));
    }
}
