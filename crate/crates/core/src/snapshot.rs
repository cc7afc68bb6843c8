//! `XKV1` cache snapshot files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        b"XKV1"
//! u32 × 7      heads, d_head, bits, group_size, tokens, t_first, budget
//! u32 × T      frame index of each token
//! keys block   then
//! values block
//! ```
//!
//! `bits == 0` (with `group_size == 0`) marks full-precision stores; each
//! block is then `heads × tokens × d_head` f32 values in `[head][token][channel]`
//! order. Otherwise keys are channel-axis groups and values token-axis groups;
//! each block is one `(f64 scale, i32 zero_point)` pair per group in storage
//! order, followed by the packed code stream.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::kv_cache::{KVCacheLayer, KvStore, QuantSettings};
use crate::numerics::MultiHeadTensor;
use crate::packing::packed_len;
use crate::quantization::{group_count, QuantAxis, QuantParams, QuantizedBlockSet};

pub const MAGIC: &[u8; 4] = b"XKV1";

fn u32_field(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::param(format!("{name} = {v} does not fit the snapshot header")))
}

/// Serializes a layer. Both stores must share one representation.
pub fn encode(layer: &KVCacheLayer) -> Result<Vec<u8>> {
    let (bits, group_size) = match (layer.keys(), layer.values()) {
        (KvStore::Full(_), KvStore::Full(_)) => (0u32, 0u32),
        (KvStore::Quantized(k), KvStore::Quantized(v)) => {
            if k.bits() != v.bits() || k.group_size() != v.group_size() {
                return Err(Error::param("key and value blocks use different quantization settings"));
            }
            (k.bits() as u32, u32_field("group_size", k.group_size())?)
        }
        _ => return Err(Error::param("cannot snapshot a layer with mixed store representations")),
    };
    let mut out = Vec::with_capacity(layer.memory_bytes() + 16);
    out.extend_from_slice(MAGIC);
    for v in [
        u32_field("heads", layer.heads())?,
        u32_field("d_head", layer.d_head())?,
        bits,
        group_size,
        u32_field("tokens", layer.total_tokens())?,
        u32_field("t_first", layer.t_first())?,
        u32_field("budget", layer.budget())?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &f in layer.token_frames() {
        out.extend_from_slice(&f.to_le_bytes());
    }
    for store in [layer.keys(), layer.values()] {
        match store {
            KvStore::Full(t) => {
                for &x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            KvStore::Quantized(q) => {
                for p in q.params() {
                    out.extend_from_slice(&p.scale.to_le_bytes());
                    out.extend_from_slice(&p.zero_point.to_le_bytes());
                }
                out.extend_from_slice(q.packed());
            }
        }
    }
    Ok(out)
}

pub fn write<W: Write>(layer: &KVCacheLayer, mut w: W) -> std::io::Result<()> {
    let bytes = encode(layer).map_err(std::io::Error::other)?;
    w.write_all(&bytes)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corruption(format!("snapshot truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<KVCacheLayer> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Corruption("missing XKV1 magic".into()));
    }
    let mut h = [0usize; 7];
    for slot in h.iter_mut() {
        *slot = c.u32()? as usize;
    }
    let [heads, d_head, bits, group_size, tokens, t_first, budget] = h;
    let frames = (0..tokens).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let shape = (heads, tokens, d_head);
    let n = heads * tokens * d_head;
    let mut read_store = |axis: QuantAxis| -> Result<KvStore> {
        if bits == 0 {
            let data = (0..n).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
            return Ok(KvStore::Full(MultiHeadTensor::new(heads, tokens, d_head, data)?));
        }
        let bits = u8::try_from(bits).map_err(|_| Error::Corruption(format!("bit width {bits}")))?;
        if group_size == 0 {
            return Err(Error::Corruption("zero group size".into()));
        }
        let groups = group_count(axis, group_size, heads, tokens, d_head);
        let mut params = Vec::with_capacity(groups);
        for _ in 0..groups {
            let scale = c.f64()?;
            let zero_point = c.i32()?;
            params.push(QuantParams {
                scale,
                zero_point,
                bits,
            });
        }
        let packed = c.take(packed_len(n, bits))?.to_vec();
        Ok(KvStore::Quantized(QuantizedBlockSet::from_parts(
            axis, group_size, bits, shape, params, packed,
        )?))
    };
    let keys = read_store(QuantAxis::Channel)?;
    let values = read_store(QuantAxis::Token)?;
    if c.pos != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after snapshot",
            bytes.len() - c.pos
        )));
    }
    let quant = (bits != 0).then_some(QuantSettings {
        bits: bits as u8,
        group_size,
    });
    KVCacheLayer::from_parts((heads, d_head, budget, t_first), frames, keys, values, quant)
}

pub fn read<R: Read>(mut r: R) -> Result<KVCacheLayer> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<snapshot>", e))?;
    decode(&buf)
}
