//! Per-layer key/value store with frame bookkeeping and a token budget.
//!
//! Appended rows are held at full precision; [`KVCacheLayer::quantize`]
//! replaces both stores with packed blocks (keys per channel, values per
//! token). Any later mutation reads the blocks back to full precision first,
//! so a prune always re-quantizes from the dequantized values.

use crate::error::{Error, Result};
use crate::numerics::MultiHeadTensor;
use crate::quantization::{quantize_tensor, QuantAxis, QuantizedBlockSet};

/// Magic, then seven u32 header fields.
pub const HEADER_BYTES: usize = 4 + 7 * 4;
/// Frame index stored per token.
pub const FRAME_INDEX_BYTES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum KvStore {
    Full(MultiHeadTensor),
    Quantized(QuantizedBlockSet),
}

impl KvStore {
    pub fn tokens(&self) -> usize {
        match self {
            KvStore::Full(t) => t.tokens(),
            KvStore::Quantized(q) => q.tokens(),
        }
    }

    pub fn to_full(&self) -> Result<MultiHeadTensor> {
        match self {
            KvStore::Full(t) => Ok(t.clone()),
            KvStore::Quantized(q) => q.dequantize(),
        }
    }

    pub fn byte_size(&self) -> usize {
        match self {
            KvStore::Full(t) => std::mem::size_of_val(t.data()),
            KvStore::Quantized(q) => q.byte_size(),
        }
    }
}

/// Quantization settings a layer was last compressed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSettings {
    pub bits: u8,
    pub group_size: usize,
}

/// Retained token indices, split into first-frame prefix, selected middle
/// tokens and current-frame suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneSelection {
    keep: Vec<usize>,
    first: usize,
    current: usize,
}

impl PruneSelection {
    /// `middle` must be ascending indices in `t_first..total - t_current`.
    pub fn from_middle(total: usize, t_first: usize, t_current: usize, middle: &[usize]) -> Result<Self> {
        if t_first + t_current > total {
            return Err(Error::InvariantViolation(format!(
                "protected segments ({t_first} + {t_current}) exceed {total} tokens"
            )));
        }
        let mut keep = Vec::with_capacity(t_first + middle.len() + t_current);
        keep.extend(0..t_first);
        keep.extend_from_slice(middle);
        keep.extend(total - t_current..total);
        Self::new(keep, total, t_first, t_current)
    }

    /// Validates an explicit index list against the protected segments.
    pub fn new(keep: Vec<usize>, total: usize, t_first: usize, t_current: usize) -> Result<Self> {
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvariantViolation(
                "selection indices must be strictly ascending".into(),
            ));
        }
        if keep.last().is_some_and(|&i| i >= total) {
            return Err(Error::InvariantViolation(format!(
                "selection index out of range for {total} tokens"
            )));
        }
        if keep.len() < t_first + t_current
            || keep[..t_first] != (0..t_first).collect::<Vec<_>>()[..]
            || keep[keep.len() - t_current..] != (total - t_current..total).collect::<Vec<_>>()[..]
        {
            return Err(Error::InvariantViolation(
                "selection drops first-frame or current-frame tokens".into(),
            ));
        }
        Ok(Self {
            keep,
            first: t_first,
            current: t_current,
        })
    }

    pub fn keep_all(total: usize, t_first: usize, t_current: usize) -> Result<Self> {
        Self::new((0..total).collect(), total, t_first, t_current)
    }

    pub fn keep_indices(&self) -> &[usize] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn first(&self) -> &[usize] {
        &self.keep[..self.first]
    }

    pub fn middle(&self) -> &[usize] {
        &self.keep[self.first..self.keep.len() - self.current]
    }

    pub fn current(&self) -> &[usize] {
        &self.keep[self.keep.len() - self.current..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVCacheLayer {
    heads: usize,
    d_head: usize,
    budget: usize,
    t_first: usize,
    token_frames: Vec<u32>,
    keys: KvStore,
    values: KvStore,
    quant: Option<QuantSettings>,
}

impl KVCacheLayer {
    pub fn new(heads: usize, d_head: usize, budget: usize) -> Self {
        Self {
            heads,
            d_head,
            budget,
            t_first: 0,
            token_frames: Vec::new(),
            keys: KvStore::Full(MultiHeadTensor::zeros(heads, 0, d_head)),
            values: KvStore::Full(MultiHeadTensor::zeros(heads, 0, d_head)),
            quant: None,
        }
    }

    pub(crate) fn from_parts(
        (heads, d_head, budget, t_first): (usize, usize, usize, usize),
        token_frames: Vec<u32>,
        keys: KvStore,
        values: KvStore,
        quant: Option<QuantSettings>,
    ) -> Result<Self> {
        let layer = Self {
            heads,
            d_head,
            budget,
            t_first,
            token_frames,
            keys,
            values,
            quant,
        };
        layer.check_consistency()?;
        Ok(layer)
    }

    fn check_consistency(&self) -> Result<()> {
        let n = self.token_frames.len();
        if self.keys.tokens() != n || self.values.tokens() != n {
            return Err(Error::CacheCorruption(format!(
                "frame map has {n} tokens, keys {}, values {}",
                self.keys.tokens(),
                self.values.tokens()
            )));
        }
        if self.t_first > n
            || (n > 0
                && self.token_frames[..self.t_first]
                    .iter()
                    .any(|&f| f != self.token_frames[0]))
            || self.token_frames.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::CacheCorruption("frame map is not ordered by frame".into()));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn total_tokens(&self) -> usize {
        self.token_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_frames.is_empty()
    }

    /// Token count of the first frame ever appended.
    pub fn t_first(&self) -> usize {
        self.t_first
    }

    /// Token count of the most recent frame, or 0 while that frame is still
    /// the first one (the first-frame prefix already protects it).
    pub fn t_current(&self) -> usize {
        match (self.token_frames.first(), self.token_frames.last()) {
            (Some(first), Some(last)) if first != last => {
                self.token_frames.iter().rev().take_while(|&&f| f == *last).count()
            }
            _ => 0,
        }
    }

    pub fn token_frames(&self) -> &[u32] {
        &self.token_frames
    }

    pub fn last_frame(&self) -> Option<u32> {
        self.token_frames.last().copied()
    }

    pub fn keys(&self) -> &KvStore {
        &self.keys
    }

    pub fn values(&self) -> &KvStore {
        &self.values
    }

    pub fn quant_settings(&self) -> Option<QuantSettings> {
        self.quant
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.keys, KvStore::Quantized(_))
    }

    fn full_stores(&self) -> Result<(MultiHeadTensor, MultiHeadTensor)> {
        Ok((self.keys.to_full()?, self.values.to_full()?))
    }

    pub fn append(&mut self, k_t: &MultiHeadTensor, v_t: &MultiHeadTensor, frame: usize) -> Result<()> {
        if k_t.shape() != v_t.shape() {
            return Err(Error::dim(format!(
                "appended keys {:?} and values {:?} differ",
                k_t.shape(),
                v_t.shape()
            )));
        }
        if k_t.heads() != self.heads || k_t.channels() != self.d_head {
            return Err(Error::dim(format!(
                "appended tensor {:?} does not match layer heads {} x d_head {}",
                k_t.shape(),
                self.heads,
                self.d_head
            )));
        }
        let frame = u32::try_from(frame).map_err(|_| Error::param("frame index exceeds u32"))?;
        if let Some(last) = self.last_frame() {
            if frame <= last {
                return Err(Error::Protocol(format!("frame {frame} appended after frame {last}")));
            }
        }
        let (keys, values) = self.full_stores()?;
        self.keys = KvStore::Full(keys.concat_tokens(k_t)?);
        self.values = KvStore::Full(values.concat_tokens(v_t)?);
        if self.token_frames.is_empty() {
            self.t_first = k_t.tokens();
        }
        self.token_frames.extend(std::iter::repeat_n(frame, k_t.tokens()));
        Ok(())
    }

    /// Keeps exactly the selected tokens, in order, in both stores.
    pub fn gather(&mut self, sel: &PruneSelection) -> Result<()> {
        let total = self.total_tokens();
        // Re-validate against this layer's own segments.
        let sel = PruneSelection::new(sel.keep.clone(), total, self.t_first, self.t_current())?;
        if sel.len() == total {
            return Ok(());
        }
        let (keys, values) = self.full_stores()?;
        let keys = keys.select_tokens(&sel.keep);
        let values = values.select_tokens(&sel.keep);
        self.token_frames = sel.keep.iter().map(|&i| self.token_frames[i]).collect();
        match self.quant.filter(|_| self.is_quantized()) {
            Some(q) => {
                self.keys = KvStore::Quantized(quantize_tensor(&keys, QuantAxis::Channel, q.group_size, q.bits)?);
                self.values = KvStore::Quantized(quantize_tensor(&values, QuantAxis::Token, q.group_size, q.bits)?);
            }
            None => {
                self.keys = KvStore::Full(keys);
                self.values = KvStore::Full(values);
            }
        }
        Ok(())
    }

    /// Keys and values over all retained tokens, dequantized if needed.
    pub fn read_full_precision(&self) -> Result<(MultiHeadTensor, MultiHeadTensor)> {
        if self.is_empty() {
            return Err(Error::EmptyCache);
        }
        self.full_stores()
    }

    /// Compresses keys per channel and values per token.
    pub fn quantize(&mut self, bits: u8, group_size: usize) -> Result<()> {
        let (keys, values) = self.full_stores()?;
        self.keys = KvStore::Quantized(quantize_tensor(&keys, QuantAxis::Channel, group_size, bits)?);
        self.values = KvStore::Quantized(quantize_tensor(&values, QuantAxis::Token, group_size, bits)?);
        self.quant = Some(QuantSettings { bits, group_size });
        Ok(())
    }

    /// Header, per-token frame indices, and both stores.
    pub fn memory_bytes(&self) -> usize {
        HEADER_BYTES + FRAME_INDEX_BYTES * self.total_tokens() + self.keys.byte_size() + self.values.byte_size()
    }
}
