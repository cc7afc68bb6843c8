//! Asymmetric uniform group quantization.
//!
//! For a group with range `[x_min, x_max]` and bit width `b`:
//!
//! ```text
//! s = max((x_max - x_min) / (2^b - 1), EPS_SCALE, max(|x_min|, |x_max|) / ZERO_POINT_REACH)
//! z = round(-x_min / s)
//! code = clamp(round(x / s) + z, 0, 2^b - 1)
//! x~ = (code - z) * s
//! ```
//!
//! Rounding is half-away-from-zero. Keys are grouped per channel (a group
//! runs along consecutive tokens of one channel), values per token (a group
//! runs along consecutive channels of one token).

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::MultiHeadTensor;
use crate::packing::{pack_codes, packed_len, unpack_codes};

/// Floor applied to the scale of a degenerate (constant) group.
/// Largest `|x| / scale` a group may need.
pub const ZERO_POINT_REACH: f64 = (i32::MAX - 255) as f64;

pub const EPS_SCALE: f64 = 1e-8;

/// Stored bytes per group: f64 scale plus i32 zero-point.
pub const GROUP_PARAM_BYTES: usize = 12;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantAxis {
    /// Groups span consecutive tokens within one (head, channel) line.
    Channel,
    /// Groups span consecutive channels within one (head, token) line.
    Token,
}

impl QuantAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantAxis::Channel => "channel",
            QuantAxis::Token => "token",
        }
    }
}

impl fmt::Display for QuantAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(QuantAxis::Channel),
            "token" => Ok(QuantAxis::Token),
            other => Err(Error::param(format!("unknown quantization axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
}

impl QuantParams {
    pub fn max_code(&self) -> i64 {
        (1i64 << self.bits) - 1
    }
}

pub fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::param(format!(
            "bit width {bits} outside {MIN_BITS}..={MAX_BITS}"
        )));
    }
    Ok(())
}

pub fn quant_params(x_min: f64, x_max: f64, bits: u8) -> Result<QuantParams> {
    check_bits(bits)?;
    if x_min.is_nan() || x_max.is_nan() || x_min > x_max {
        return Err(Error::param(format!("x_min {x_min} exceeds x_max {x_max}")));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    // The floor keeps the zero point inside i32 for near-constant groups far from zero.
    let scale = ((x_max - x_min) / levels)
        .max(EPS_SCALE)
        .max(x_min.abs().max(x_max.abs()) / ZERO_POINT_REACH);
    // f64::round is half-away-from-zero.
    let z = (-x_min / scale).round();
    let zero_point = z.clamp(i32::MIN as f64, i32::MAX as f64) as i32;
    Ok(QuantParams {
        scale,
        zero_point,
        bits,
    })
}

/// Parameters covering the range of `x`.
pub fn fit_params(x: &[f32], bits: u8) -> Result<QuantParams> {
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    if x.is_empty() {
        return quant_params(0.0, 0.0, bits);
    }
    quant_params(lo, hi, bits)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupCodes {
    pub codes: Vec<u8>,
    /// How many elements hit either end of the code range before clamping.
    pub clamped: usize,
}

pub fn quantize_group(x: &[f32], p: &QuantParams) -> GroupCodes {
    let max = p.max_code();
    let mut clamped = 0;
    let codes = x
        .iter()
        .map(|&v| {
            let raw = (v as f64 / p.scale).round() as i64 + p.zero_point as i64;
            if raw < 0 || raw > max {
                clamped += 1;
            }
            raw.clamp(0, max) as u8
        })
        .collect();
    GroupCodes { codes, clamped }
}

pub fn dequantize_group(codes: &[u8], p: &QuantParams) -> Result<Vec<f32>> {
    let max = p.max_code();
    codes
        .iter()
        .map(|&c| {
            if c as i64 > max {
                return Err(Error::Corruption(format!("code {c} exceeds {max} for {} bits", p.bits)));
            }
            Ok(((c as i64 - p.zero_point as i64) as f64 * p.scale) as f32)
        })
        .collect()
}

/// A whole tensor quantized group by group along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlockSet {
    axis: QuantAxis,
    group_size: usize,
    bits: u8,
    heads: usize,
    tokens: usize,
    channels: usize,
    params: Vec<QuantParams>,
    packed: Vec<u8>,
    clamped: usize,
}

/// Visits every group as a list of flat offsets into `[head][token][channel]`
/// data, in storage order.
fn for_each_group(
    axis: QuantAxis,
    group_size: usize,
    (heads, tokens, channels): (usize, usize, usize),
    mut f: impl FnMut(&[usize]),
) {
    let mut idx = Vec::with_capacity(group_size);
    let at = |h: usize, t: usize, c: usize| (h * tokens + t) * channels + c;
    for h in 0..heads {
        match axis {
            QuantAxis::Channel => {
                for c in 0..channels {
                    for start in (0..tokens).step_by(group_size) {
                        idx.clear();
                        idx.extend((start..(start + group_size).min(tokens)).map(|t| at(h, t, c)));
                        f(&idx);
                    }
                }
            }
            QuantAxis::Token => {
                for t in 0..tokens {
                    for start in (0..channels).step_by(group_size) {
                        idx.clear();
                        idx.extend((start..(start + group_size).min(channels)).map(|c| at(h, t, c)));
                        f(&idx);
                    }
                }
            }
        }
    }
}

/// Number of groups for a tensor shape.
pub fn group_count(axis: QuantAxis, group_size: usize, heads: usize, tokens: usize, channels: usize) -> usize {
    match axis {
        QuantAxis::Channel => heads * channels * tokens.div_ceil(group_size),
        QuantAxis::Token => heads * tokens * channels.div_ceil(group_size),
    }
}

pub fn quantize_tensor(x: &MultiHeadTensor, axis: QuantAxis, group_size: usize, bits: u8) -> Result<QuantizedBlockSet> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(Error::param("group size must be at least 1"));
    }
    let data = x.data();
    let mut params = Vec::with_capacity(group_count(axis, group_size, x.heads(), x.tokens(), x.channels()));
    let mut codes = Vec::with_capacity(data.len());
    let mut clamped = 0;
    let mut scratch = Vec::with_capacity(group_size);
    let mut failure = None;
    for_each_group(axis, group_size, x.shape(), |idx| {
        if failure.is_some() {
            return;
        }
        scratch.clear();
        scratch.extend(idx.iter().map(|&i| data[i]));
        match fit_params(&scratch, bits) {
            Ok(p) => {
                let g = quantize_group(&scratch, &p);
                clamped += g.clamped;
                codes.extend(g.codes);
                params.push(p);
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(QuantizedBlockSet {
        axis,
        group_size,
        bits,
        heads: x.heads(),
        tokens: x.tokens(),
        channels: x.channels(),
        params,
        packed: pack_codes(&codes, bits)?,
        clamped,
    })
}

impl QuantizedBlockSet {
    /// Reassembles a block set from stored parts, checking the geometry.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        axis: QuantAxis,
        group_size: usize,
        bits: u8,
        (heads, tokens, channels): (usize, usize, usize),
        params: Vec<QuantParams>,
        packed: Vec<u8>,
    ) -> Result<Self> {
        check_bits(bits)?;
        if group_size == 0 {
            return Err(Error::param("group size must be at least 1"));
        }
        let groups = group_count(axis, group_size, heads, tokens, channels);
        if params.len() != groups {
            return Err(Error::Corruption(format!(
                "{} group parameters for {groups} groups",
                params.len()
            )));
        }
        if params
            .iter()
            .any(|p| p.bits != bits || p.scale.is_nan() || p.scale <= 0.0)
        {
            return Err(Error::Corruption("invalid group parameters".into()));
        }
        let n = heads * tokens * channels;
        if packed.len() != packed_len(n, bits) {
            return Err(Error::Corruption(format!(
                "{} code bytes for {n} codes of {bits} bits",
                packed.len()
            )));
        }
        Ok(Self {
            axis,
            group_size,
            bits,
            heads,
            tokens,
            channels,
            params,
            packed,
            clamped: 0,
        })
    }

    pub fn axis(&self) -> QuantAxis {
        self.axis
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.heads, self.tokens, self.channels)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn params(&self) -> &[QuantParams] {
        &self.params
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn codes(&self) -> Result<Vec<u8>> {
        unpack_codes(&self.packed, self.bits, self.heads * self.tokens * self.channels)
    }

    /// Packed code bytes plus one parameter pair per group.
    pub fn byte_size(&self) -> usize {
        self.packed.len() + self.params.len() * GROUP_PARAM_BYTES
    }

    pub fn dequantize(&self) -> Result<MultiHeadTensor> {
        let codes = self.codes()?;
        let mut out = vec![0.0f32; codes.len()];
        let mut cursor = 0;
        let mut group = 0;
        let mut failure = None;
        let params = &self.params;
        for_each_group(self.axis, self.group_size, self.shape(), |idx| {
            if failure.is_some() {
                return;
            }
            let p = &params[group];
            match dequantize_group(&codes[cursor..cursor + idx.len()], p) {
                Ok(vals) => {
                    for (&i, v) in idx.iter().zip(vals) {
                        out[i] = v;
                    }
                }
                Err(e) => failure = Some(e),
            }
            cursor += idx.len();
            group += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        MultiHeadTensor::new(self.heads, self.tokens, self.channels, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Key,
    Value,
}

impl TensorRole {
    pub fn as_str(self) -> &'static str {
        match self {
            TensorRole::Key => "key",
            TensorRole::Value => "value",
        }
    }
}

/// One line of the quantization-error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub tensor: TensorRole,
    pub axis: QuantAxis,
    pub bits: u8,
    pub group_size: usize,
    pub mse: f64,
}

pub fn reconstruction_mse(x: &MultiHeadTensor, axis: QuantAxis, group_size: usize, bits: u8) -> Result<f64> {
    let q = quantize_tensor(x, axis, group_size, bits)?.dequantize()?;
    let n = x.data().len().max(1) as f64;
    let sum: f64 = x
        .data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / n)
}

/// MSE of per-token and per-channel quantization for keys and values at each
/// bit width.
pub fn mse_report(k: &MultiHeadTensor, v: &MultiHeadTensor, bits: &[u8], group_size: usize) -> Result<Vec<MseRow>> {
    let mut rows = Vec::with_capacity(4 * bits.len());
    for (role, x) in [(TensorRole::Key, k), (TensorRole::Value, v)] {
        for axis in [QuantAxis::Token, QuantAxis::Channel] {
            for &b in bits {
                rows.push(MseRow {
                    tensor: role,
                    axis,
                    bits: b,
                    group_size,
                    mse: reconstruction_mse(x, axis, group_size, b)?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_mse_csv<W: Write>(rows: &[MseRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io {
        path: "<mse csv>".into(),
        source: std::io::Error::other(e),
    };
    w.write_record(["tensor", "axis", "bits", "group_size", "mse"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.tensor.as_str().to_string(),
            r.axis.as_str().to_string(),
            r.bits.to_string(),
            r.group_size.to_string(),
            r.mse.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<mse csv>", e))?;
    Ok(())
}
