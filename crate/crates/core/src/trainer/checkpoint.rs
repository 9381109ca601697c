//! Binary checkpoints: `MOCO2CK1`, a `u32` version, then named tensors
//! `[name len u32][name][rank u32][dims u32×rank][f32 payload]`, all
//! little-endian.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::compute::Tensor;
use crate::encoder::{param_shapes, EncoderConfig, ModelParams};
use crate::error::{contract_err, Error, Result};
use crate::mechanisms::{MoCoState, NegativeQueue};

use super::{Learner, Sgd, TrainState};

pub const MAGIC: &[u8; 8] = b"MOCO2CK1";
pub const VERSION: u32 = 1;

pub type Records = Vec<(String, Tensor)>;

pub fn encode_records(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Records> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic").ok() != Some(&MAGIC[..]) {
        return Err(Error::Format { offset: 0, msg: "bad magic, not a checkpoint".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 8, msg: format!("unsupported version {version}") });
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::Format { offset: start, msg: "record name is not UTF-8".into() })?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.saturating_mul(4), "payload")?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_records(records);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Records> {
    decode_records(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn scalar(v: usize) -> Tensor {
    assert!(v < 1 << 24, "checkpoint counter {v} exceeds exact f32 range");
    Tensor::new(vec![1], vec![v as f32]).expect("scalar")
}

/// Records for a training state. Query params under `q.`, key params under
/// `k.`, SGD velocity under `v.`, then the queue and `meta.*` counters.
pub fn state_records(state: &TrainState) -> Records {
    let mut out: Records = Vec::new();
    let params = state.learner.query_params();
    out.extend(params.iter().map(|(p, t)| (format!("q.{p}"), t.clone())));
    if let Learner::Moco(st) = &state.learner {
        out.extend(st.k_params.iter().map(|(p, t)| (format!("k.{p}"), t.clone())));
    }
    out.extend(state.sgd.velocity().iter().map(|(p, t)| (format!("v.{p}"), t.clone())));
    out.push(("meta.step".into(), scalar(state.step)));
    out.push(("meta.epoch".into(), scalar(state.epoch)));
    if let Learner::Moco(st) = &state.learner {
        out.push(("queue".into(), st.queue.storage().clone()));
        out.push(("meta.queue_ptr".into(), scalar(st.queue.write_ptr())));
        out.push(("meta.queue_filled".into(), scalar(st.queue.is_filled() as usize)));
    }
    out
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    write_records(path, &state_records(state))
}

fn missing(name: &str, len: usize) -> Error {
    Error::Format { offset: len as u64, msg: format!("checkpoint ends before record `{name}`") }
}

fn prefixed(map: &mut BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let keys: Vec<String> = map.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
    keys.into_iter().map(|k| (k[prefix.len()..].to_string(), map.remove(&k).expect("listed"))).collect()
}

fn params_from(map: &mut BTreeMap<String, Tensor>, prefix: &str, cfg: &EncoderConfig, len: usize) -> Result<ModelParams> {
    let tensors = prefixed(map, prefix);
    if let Some((path, _)) = param_shapes(cfg).into_iter().find(|(p, _)| !tensors.contains_key(p)) {
        return Err(missing(&format!("{prefix}{path}"), len));
    }
    ModelParams::from_tensors(cfg, tensors)
}

fn meta(map: &BTreeMap<String, Tensor>, name: &str, len: usize) -> Result<usize> {
    let t = map.get(name).ok_or_else(|| missing(name, len))?;
    Ok(t.data().first().copied().unwrap_or(0.0) as usize)
}

/// Query-encoder parameters only, e.g. for probing.
pub fn load_query_params(path: &Path, cfg: &EncoderConfig) -> Result<ModelParams> {
    let records = read_records(path)?;
    let len = std::fs::metadata(path).map(|m| m.len() as usize).unwrap_or(0);
    let mut map: BTreeMap<String, Tensor> = records.into_iter().collect();
    params_from(&mut map, "q.", cfg, len)
}

/// Rebuild a training state. `moco` selects the mechanism layout; `m`,
/// `tau` and the SGD settings come from the run configuration.
pub fn load_checkpoint(
    path: &Path,
    cfg: &EncoderConfig,
    moco: Option<(f64, f64)>,
    sgd: (f64, f64),
) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let len = bytes.len();
    let mut map: BTreeMap<String, Tensor> = decode_records(&bytes)?.into_iter().collect();
    let q = params_from(&mut map, "q.", cfg, len)?;
    let velocity = prefixed(&mut map, "v.");
    if velocity.iter().any(|(p, t)| q.get(p).map(Tensor::shape) != Some(t.shape())) {
        return Err(contract_err!("velocity records do not match the parameter shapes"));
    }
    let step = meta(&map, "meta.step", len)?;
    let epoch = meta(&map, "meta.epoch", len)?;
    let learner = match moco {
        Some((m, tau)) => {
            let k = params_from(&mut map, "k.", cfg, len)?;
            let storage = map.remove("queue").ok_or_else(|| missing("queue", len))?;
            let ptr = meta(&map, "meta.queue_ptr", len)?;
            let filled = meta(&map, "meta.queue_filled", len)? != 0;
            let queue = NegativeQueue::from_parts(storage, ptr, filled)?;
            let mut st = MoCoState::new(q, queue.capacity(), m, tau)?;
            if queue.dim() != cfg.embed_dim {
                return Err(contract_err!("queue width {} differs from embed_dim {}", queue.dim(), cfg.embed_dim));
            }
            st.k_params = k;
            st.queue = queue;
            Learner::Moco(st)
        }
        None => Learner::E2e(q),
    };
    Ok(TrainState {
        learner,
        sgd: Sgd::from_velocity(sgd.0, sgd.1, velocity),
        step,
        epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Records {
        vec![
            ("a".into(), Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.25]).unwrap()),
            ("meta.step".into(), scalar(12)),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let bytes = encode_records(&sample());
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(decode_records(&bytes).unwrap(), sample());
    }

    #[test]
    fn header_and_truncation_errors() {
        let mut bytes = encode_records(&sample());
        let cut = bytes.len() - 3;
        match decode_records(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 12 && (offset as usize) < cut),
            other => panic!("{other:?}"),
        }
        bytes[8] = 9;
        assert!(matches!(decode_records(&bytes), Err(Error::Format { offset: 8, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_records(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
