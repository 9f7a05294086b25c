//! `AKHW` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AKHW"  u32 version  u32 entry_count
//! entry*: u32 name_len, name (UTF-8), u32 rank, u32 extent × rank, f32 × numel
//! meta:   u32 epoch, u64 adam_t,
//!         u32 class_count, (u32 len, UTF-8 name) × class_count,
//!         u32 record_count, (u32 epoch, f64 lr, f64 train_loss, f64 val_loss, f64 val_accuracy) × record_count
//! u64 FNV-1a checksum of every byte between the magic and the checksum
//! ```
//!
//! Entry names carry a prefix: `param:`, `buffer:`, `adam.m:` or `adam.v:`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::EpochRecord;

pub const MAGIC: &[u8; 4] = b"AKHW";
pub const VERSION: u32 = 1;

const PARAM: &str = "param:";
const BUFFER: &str = "buffer:";
const ADAM_M: &str = "adam.m:";
const ADAM_V: &str = "adam.v:";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Number of completed epochs.
    pub epoch: u32,
    pub class_names: Vec<String>,
    pub history: Vec<EpochRecord>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_entry(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_str(buf, name);
    put_u32(buf, t.rank() as u32);
    for &d in t.dims() {
        put_u32(buf, d as u32);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut entries: Vec<(String, &Tensor<f32>)> = Vec::new();
    entries.extend(ck.store.params().map(|(k, v)| (format!("{PARAM}{k}"), v)));
    entries.extend(ck.store.buffers().map(|(k, v)| (format!("{BUFFER}{k}"), v)));
    entries.extend(ck.adam.m.iter().map(|(k, v)| (format!("{ADAM_M}{k}"), v)));
    entries.extend(ck.adam.v.iter().map(|(k, v)| (format!("{ADAM_V}{k}"), v)));

    let mut buf = MAGIC.to_vec();
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, entries.len() as u32);
    for (name, t) in &entries {
        put_entry(&mut buf, name, t);
    }
    put_u32(&mut buf, ck.epoch);
    buf.extend_from_slice(&ck.adam.t.to_le_bytes());
    put_u32(&mut buf, ck.class_names.len() as u32);
    for name in &ck.class_names {
        put_str(&mut buf, name);
    }
    put_u32(&mut buf, ck.history.len() as u32);
    for r in &ck.history {
        put_u32(&mut buf, r.epoch as u32);
        for v in [r.lr, r.train_loss, r.val_loss, r.val_accuracy] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&buf[MAGIC.len()..]);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of data, wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint {
            offset: at,
            message: "name is not UTF-8".into(),
        })
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.err(format!("implausible tensor rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| self.err("tensor size overflows"))?;
        let at = self.pos;
        let raw = self.take(bytes)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::from_vec(&dims, data).map_err(|e| Error::Checkpoint {
            offset: at,
            message: e.to_string(),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let min = MAGIC.len() + 8 + 8;
    if bytes.len() < min {
        return Err(Error::Checkpoint {
            offset: bytes.len(),
            message: format!("file too short ({} bytes)", bytes.len()),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let body_end = bytes.len() - 8;
    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: 4,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    for _ in 0..count {
        let at = r.pos;
        let name = r.string()?;
        let t = r.tensor()?;
        let dup = |e: Error| Error::Checkpoint {
            offset: at,
            message: e.to_string(),
        };
        if let Some(k) = name.strip_prefix(PARAM) {
            store.insert_param(k, t).map_err(dup)?;
        } else if let Some(k) = name.strip_prefix(BUFFER) {
            store.insert_buffer(k, t).map_err(dup)?;
        } else if let Some(k) = name.strip_prefix(ADAM_M) {
            m.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix(ADAM_V) {
            v.insert(k.to_string(), t);
        } else {
            return Err(Error::Checkpoint {
                offset: at,
                message: format!("unknown entry {name}"),
            });
        }
    }
    let epoch = r.u32()?;
    let t = r.u64()?;
    let classes = r.u32()?;
    let class_names = (0..classes).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let records = r.u32()?;
    let mut history = Vec::with_capacity(records.min(1 << 16) as usize);
    for _ in 0..records {
        history.push(EpochRecord {
            epoch: r.u32()? as usize,
            lr: r.f64()?,
            train_loss: r.f64()?,
            val_loss: r.f64()?,
            val_accuracy: r.f64()?,
        });
    }
    if r.pos != body_end {
        return Err(r.err(format!("{} unexpected trailing bytes", body_end - r.pos)));
    }
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
    if fnv1a64(&bytes[4..body_end]) != stored {
        return Err(Error::Checkpoint {
            offset: body_end,
            message: "checksum mismatch".into(),
        });
    }

    for (name, p) in store.params() {
        for (which, moments) in [("first", &m), ("second", &v)] {
            match moments.get(name) {
                Some(t) if t.shape() == p.shape() => {}
                _ => {
                    return Err(Error::Checkpoint {
                        offset: body_end,
                        message: format!("missing or misshapen {which} moment for {name}"),
                    })
                }
            }
        }
    }
    if m.len() != store.params().count() || v.len() != m.len() {
        return Err(Error::Checkpoint {
            offset: body_end,
            message: "optimizer moments do not match the parameters".into(),
        });
    }
    // Keep moment order aligned with the parameter order.
    let order = |mut map: IndexMap<String, Tensor<f32>>| -> IndexMap<String, Tensor<f32>> {
        store.params().map(|(k, _)| (k.to_string(), map.shift_remove(k).expect("checked"))).collect()
    };
    let (m, v) = (order(m), order(v));
    Ok(Checkpoint {
        adam: AdamState {
            config: AdamConfig::default(),
            t,
            m,
            v,
        },
        store,
        epoch,
        class_names,
        history,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint { offset, message } => Error::format(path, format!("at byte {offset}: {message}")),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, ModelGraph};

    fn sample() -> Checkpoint {
        let graph = ModelGraph::build(&ArchConfig::reduced_clone()).unwrap();
        let store = graph.init_params::<f32>(4).unwrap();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        adam.t = 17;
        for (i, t) in adam.m.values_mut().enumerate() {
            t.data_mut().iter_mut().for_each(|x| *x = i as f32 * 0.25 - 1.0);
        }
        Checkpoint {
            store,
            adam,
            epoch: 3,
            class_names: vec!["1".into(), "২".into(), "ka".into(), "4".into(), "5".into()],
            history: vec![EpochRecord {
                epoch: 1,
                lr: 1e-3,
                train_loss: 1.5,
                val_loss: 1.25,
                val_accuracy: 0.5,
            }],
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = encode(&ck);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&sample());
        for len in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(matches!(decode(&bytes[..len]), Err(Error::Checkpoint { .. })), "len {len}");
        }
    }

    #[test]
    fn corruption_is_rejected() {
        let mut bytes = encode(&sample());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(decode(&bytes).is_err());
        let mut bad_magic = encode(&sample());
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Checkpoint { offset: 0, .. })));
        let mut bad_version = encode(&sample());
        bad_version[4] = 9;
        assert!(matches!(decode(&bad_version), Err(Error::Checkpoint { offset: 4, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let first = fs::read(&path).unwrap();
        save_checkpoint(&path, &load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        fs::write(&path, &first[..first.len() / 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
