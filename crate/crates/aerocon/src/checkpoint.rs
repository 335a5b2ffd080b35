//! Checkpoint files.
//!
//! Little-endian layout: magic `KWDC`, u32 version, u64 CRC-64 of the
//! payload, then records until the end of the file. A record is a u32 name
//! length, the UTF-8 name, a u8 dtype (0 = f64, 1 = u64, 2 = u8), a u8
//! rank, one u64 per dimension and the raw values.

use std::path::Path;

use aerocon_core::config::Config;
use aerocon_core::pipeline::{Record, TrainState, Values};
use crc::{Crc, CRC_64_XZ};

use crate::error::{self, AppError, Result};
use crate::settings;

pub const MAGIC: &[u8; 4] = b"KWDC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
/// Record holding the TOML echo of the run configuration.
pub const CONFIG_RECORD: &str = "config";

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}{hint}")]
    Checksum { stored: u64, computed: u64, hint: String },
    #[error("malformed record: {0}")]
    Malformed(String),
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut payload = Vec::new();
    for r in records {
        payload.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        payload.extend_from_slice(r.name.as_bytes());
        let dtype: u8 = match r.values {
            Values::F64(_) => 0,
            Values::U64(_) => 1,
            Values::U8(_) => 2,
        };
        payload.push(dtype);
        payload.push(r.dims.len() as u8);
        for &d in &r.dims {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &r.values {
            Values::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            Values::U64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            Values::U8(v) => payload.extend_from_slice(v),
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&CHECKSUM.checksum(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Truncated(format!(
                "record {} ends inside its {what} ({} bytes left, {n} needed)",
                self.record,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_records(payload: &[u8]) -> Result<Vec<Record>, CheckpointError> {
    let mut r = Reader {
        bytes: payload,
        pos: 0,
        record: 0,
    };
    let mut out = Vec::new();
    while r.pos < payload.len() {
        let len = u32::from_le_bytes(r.take(4, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Malformed(format!("record {} name is not UTF-8", r.record)))?
            .to_string();
        let head = r.take(2, "dtype and rank")?;
        let (dtype, rank) = (head[0], head[1] as usize);
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimensions")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: dimensions overflow")))?;
        let values = match dtype {
            0 => Values::F64(
                r.take(count.saturating_mul(8), "values")?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => Values::U64(
                r.take(count.saturating_mul(8), "values")?
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => Values::U8(r.take(count, "values")?.to_vec()),
            d => return Err(CheckpointError::Malformed(format!("{name}: unknown dtype {d}"))),
        };
        out.push(Record { name, dims, values });
        r.record += 1;
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(if bytes.len() < 4 && MAGIC.starts_with(bytes) {
            CheckpointError::Truncated("file ends inside the header".into())
        } else {
            CheckpointError::Magic
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let stored = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    let computed = CHECKSUM.checksum(payload);
    if stored != computed {
        let hint = match parse_records(payload) {
            Err(CheckpointError::Truncated(d)) => format!("; payload looks truncated: {d}"),
            _ => String::new(),
        };
        return Err(CheckpointError::Checksum { stored, computed, hint });
    }
    parse_records(payload)
}

/// Serializes a training state together with its configuration.
pub fn encode_state(state: &TrainState, cfg: &Config) -> Vec<u8> {
    let mut records = state.to_records();
    records.push(Record::bytes(CONFIG_RECORD, settings::to_toml(cfg).into_bytes()));
    encode(&records)
}

/// Inverse of [`encode_state`]; the architecture follows the stored config.
pub fn decode_state(bytes: &[u8]) -> Result<(TrainState, Config), CheckpointError> {
    let mut records = decode(bytes)?;
    let at = records
        .iter()
        .position(|r| r.name == CONFIG_RECORD)
        .ok_or_else(|| CheckpointError::Malformed(format!("missing record {CONFIG_RECORD}")))?;
    let cfg_rec = records.remove(at);
    let text = match cfg_rec.values {
        Values::U8(b) => String::from_utf8(b).map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?,
        _ => return Err(CheckpointError::Malformed("config record must be bytes".into())),
    };
    let cfg = settings::from_toml(&text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let state = TrainState::from_records(records, &cfg).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok((state, cfg))
}

pub fn save(path: &Path, state: &TrainState, cfg: &Config) -> Result<()> {
    error::write(path, encode_state(state, cfg))
}

pub fn load(path: &Path) -> Result<(TrainState, Config)> {
    decode_state(&error::read(path)?).map_err(|e| AppError::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records() -> Vec<Record> {
        vec![
            Record::u64s("a", vec![1, u64::MAX]),
            Record {
                name: "w".into(),
                dims: vec![2, 2],
                values: Values::F64(vec![0.5, -0.0, f64::MIN_POSITIVE, 1e300]),
            },
            Record::bytes("c", b"xyz".to_vec()),
        ]
    }

    #[test]
    fn round_trip() {
        let bytes = encode(&records());
        let back = decode(&bytes).unwrap();
        assert_eq!(back, records());
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&records());
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(decode(&bytes), Err(CheckpointError::Checksum { .. })));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode(&records());
        let err = decode(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(matches!(decode(&bytes[..10]), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn version_and_magic() {
        let mut bytes = encode(&records());
        bytes[4] = 9;
        assert_eq!(decode(&bytes), Err(CheckpointError::Version { found: 9 }));
        bytes[0] = b'X';
        assert_eq!(decode(&bytes), Err(CheckpointError::Magic));
    }

    #[test]
    fn unknown_parameter_name_is_rejected() {
        let mut cfg = Config::default();
        cfg.model.widths = vec![2];
        cfg.model.hidden_dim = 3;
        cfg.model.embed_dim = 2;
        cfg.contrast.queue_size = 4;
        let state = TrainState::new(&cfg).unwrap();
        let mut recs = state.to_records();
        recs.push(Record::u64s("query.encoder.conv9.weight", vec![0]));
        recs.push(Record::bytes(CONFIG_RECORD, settings::to_toml(&cfg).into_bytes()));
        let err = decode_state(&encode(&recs)).unwrap_err();
        assert!(err.to_string().contains("unknown record query.encoder.conv9.weight"), "{err}");
    }
}
