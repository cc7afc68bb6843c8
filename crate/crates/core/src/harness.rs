//! Synthetic streams and end-to-end runs in the three cache modes.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{project_qkv, temporal_causal_attention, AttentionOutput, FrameTokens, LayerWeights};
use crate::config::StreamConfig;
use crate::error::{Error, Result};
use crate::kv_cache::{KVCacheLayer, PruneSelection};
use crate::numerics::{MultiHeadTensor, RealMatrix};
use crate::pruning::{build_pooled_query, prune_step, score_matrix, summarize_prunable_keys};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unbounded,
    Pruned,
    PrunedQuant,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Unbounded, Mode::Pruned, Mode::PrunedQuant];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Unbounded => "unbounded",
            Mode::Pruned => "pruned",
            Mode::PrunedQuant => "pruned_quant",
        }
    }

    /// Parses a comma-separated list such as `unbounded,pruned`.
    pub fn parse_list(s: &str) -> Result<Vec<Mode>> {
        let modes = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(Mode::from_str)
            .collect::<Result<Vec<_>>>()?;
        if modes.is_empty() {
            return Err(Error::param("empty mode list"));
        }
        Ok(modes)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown mode {s:?}")))
    }
}

/// Endless seeded AR(1) stream of frame embeddings.
pub struct FrameStream {
    rng: ChaCha8Rng,
    prev: Option<Vec<f32>>,
    rows: usize,
    cols: usize,
    registers: usize,
    rho: f64,
    next_index: usize,
}

impl FrameStream {
    pub fn new(config: &StreamConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            prev: None,
            rows: config.tokens_per_frame(),
            cols: config.d_model,
            registers: config.registers,
            rho: config.redundancy,
            next_index: 0,
        }
    }
}

impl Iterator for FrameStream {
    type Item = FrameTokens;

    fn next(&mut self) -> Option<FrameTokens> {
        let n = self.rows * self.cols;
        let innov = (1.0 - self.rho * self.rho).sqrt();
        let data: Vec<f32> = match &self.prev {
            None => (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect(),
            Some(prev) => prev
                .iter()
                .map(|&p| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    (self.rho * p as f64 + innov * z) as f32
                })
                .collect(),
        };
        self.prev = Some(data.clone());
        let index = self.next_index;
        self.next_index += 1;
        let m = RealMatrix::new(self.rows, self.cols, data).expect("stream shape");
        Some(FrameTokens::new(index, self.registers, m).expect("stream has patch tokens"))
    }
}

/// `config.frames` frames of the seeded stream.
pub fn gen_frames(config: &StreamConfig) -> Vec<FrameTokens> {
    FrameStream::new(config).take(config.frames).collect()
}

/// Order-sensitive hash of every embedding bit in a stream.
pub fn stream_hash(frames: &[FrameTokens]) -> u64 {
    let mut h = DefaultHasher::new();
    for f in frames {
        for &x in f.embeddings().data() {
            h.write_u32(x.to_bits());
        }
    }
    h.finish()
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Projection weights for every layer of a run.
pub fn layer_weights(config: &StreamConfig) -> Result<Vec<LayerWeights>> {
    (0..config.layers)
        .map(|l| {
            LayerWeights::seeded(
                config.d_model,
                config.heads,
                config.d_head,
                config.outlier_channels,
                config.outlier_amp,
                layer_seed(config.seed, l),
            )
        })
        .collect()
}

/// Attention outputs indexed by frame, then layer.
pub type OutputSeries = Vec<Vec<AttentionOutput>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deviation {
    pub rel_l2: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchMetrics {
    pub mode: Mode,
    pub wall_ns: Vec<u64>,
    /// Tokens held by each layer after the frame.
    pub cache_tokens: Vec<usize>,
    /// `memory_bytes` summed over layers.
    pub cache_bytes: Vec<usize>,
    pub peak_bytes: usize,
    pub rel_l2: Vec<f64>,
    pub cosine: Vec<f64>,
    /// Relative L2 between the quantized cache and a full-precision copy
    /// that saw the same evictions. Zero outside `pruned_quant`.
    pub quant_drift: Vec<f64>,
}

impl BenchMetrics {
    pub fn frames(&self) -> usize {
        self.wall_ns.len()
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        (0..self.frames())
            .map(|f| MetricRecord {
                frame: f,
                mode: self.mode,
                wall_ns: self.wall_ns[f],
                cache_tokens: self.cache_tokens[f],
                cache_bytes: self.cache_bytes[f],
                rel_l2: self.rel_l2[f],
                cosine: self.cosine[f],
            })
            .collect()
    }
}

/// One frame of emitted metrics. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub frame: usize,
    pub mode: Mode,
    pub wall_ns: u64,
    pub cache_tokens: usize,
    pub cache_bytes: usize,
    pub rel_l2: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone)]
pub struct StreamRun {
    pub metrics: BenchMetrics,
    pub layers: Vec<KVCacheLayer>,
    pub outputs: OutputSeries,
}

/// One frame through one layer: attend over history plus the current frame,
/// append, then prune and quantize as the mode asks.
fn step_layer(
    layer: &mut KVCacheLayer,
    weights: &LayerWeights,
    frame: &FrameTokens,
    mode: Mode,
    config: &StreamConfig,
) -> Result<(AttentionOutput, Option<PruneSelection>)> {
    let qkv = project_qkv(frame, weights)?;
    let out = if layer.is_empty() {
        temporal_causal_attention(&qkv.q, &qkv.k, &qkv.v)?
    } else {
        let (k, v) = layer.read_full_precision()?;
        temporal_causal_attention(&qkv.q, &k.concat_tokens(&qkv.k)?, &v.concat_tokens(&qkv.v)?)?
    };
    layer.append(&qkv.k, &qkv.v, frame.frame_index)?;
    let sel = match mode {
        Mode::Unbounded => None,
        _ => prune_step(layer, &qkv.q, config)?,
    };
    if mode == Mode::PrunedQuant {
        layer.quantize(config.bits, config.group_size)?;
    }
    Ok((out, sel))
}

fn relative_l2(reference: &MultiHeadTensor, other: &MultiHeadTensor) -> f64 {
    let diff: f64 = reference
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    ratio(diff, reference.norm_sq()).sqrt()
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-frame relative L2 (over all layers) and mean per-token cosine
/// (token vectors concatenated over heads, averaged over layers and tokens).
pub fn compare_outputs(
    baseline: &[Vec<AttentionOutput>],
    compressed: &[Vec<AttentionOutput>],
) -> Result<Vec<Deviation>> {
    if baseline.len() != compressed.len() {
        return Err(Error::dim(format!(
            "baseline has {} frames, compressed {}",
            baseline.len(),
            compressed.len()
        )));
    }
    baseline
        .iter()
        .zip(compressed)
        .map(|(a, b)| frame_deviation(a, b))
        .collect()
}

fn frame_deviation(a: &[AttentionOutput], b: &[AttentionOutput]) -> Result<Deviation> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("{} layers against {}", a.len(), b.len())));
    }
    let (mut diff, mut norm, mut cos_sum, mut count) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (&x.values, &y.values);
        if x.shape() != y.shape() {
            return Err(Error::dim(format!("outputs {:?} and {:?}", x.shape(), y.shape())));
        }
        for t in 0..x.tokens() {
            let (mut xy, mut xx, mut yy) = (0.0f64, 0.0f64, 0.0f64);
            for h in 0..x.heads() {
                for (&p, &q) in x.row(h, t).iter().zip(y.row(h, t)) {
                    let (p, q) = (p as f64, q as f64);
                    xy += p * q;
                    xx += p * p;
                    yy += q * q;
                    diff += (p - q) * (p - q);
                }
            }
            norm += xx;
            cos_sum += match (xx > 0.0, yy > 0.0) {
                (true, true) => xy / (xx.sqrt() * yy.sqrt()),
                (false, false) => 1.0,
                _ => 0.0,
            };
            count += 1;
        }
    }
    Ok(Deviation {
        rel_l2: ratio(diff, norm).sqrt(),
        cosine: if count == 0 { 1.0 } else { cos_sum / count as f64 },
    })
}

fn drift(layer: &KVCacheLayer, shadow: &KVCacheLayer) -> Result<f64> {
    let (k, v) = layer.read_full_precision()?;
    let (ks, vs) = shadow.read_full_precision()?;
    let num = {
        let rk = relative_l2(&ks, &k);
        let rv = relative_l2(&vs, &v);
        rk * rk * ks.norm_sq() + rv * rv * vs.norm_sq()
    };
    Ok(ratio(num, ks.norm_sq() + vs.norm_sq()).sqrt())
}

/// Runs `mode` on `frames`. Deviation is measured against `baseline`; when
/// none is given for a compressing mode, an unbounded run is made first.
/// Only the cache path itself is timed.
pub fn run_frames(
    config: &StreamConfig,
    mode: Mode,
    frames: &[FrameTokens],
    baseline: Option<&OutputSeries>,
) -> Result<StreamRun> {
    config.validate()?;
    let weights = layer_weights(config)?;
    let new_layer = || KVCacheLayer::new(config.heads, config.d_head, config.budget);
    let mut layers: Vec<KVCacheLayer> = (0..config.layers).map(|_| new_layer()).collect();
    let mut shadows: Vec<KVCacheLayer> = match mode {
        Mode::PrunedQuant => (0..config.layers).map(|_| new_layer()).collect(),
        _ => Vec::new(),
    };
    let n = frames.len();
    let mut m = BenchMetrics {
        mode,
        wall_ns: Vec::with_capacity(n),
        cache_tokens: Vec::with_capacity(n),
        cache_bytes: Vec::with_capacity(n),
        peak_bytes: 0,
        rel_l2: Vec::with_capacity(n),
        cosine: Vec::with_capacity(n),
        quant_drift: Vec::with_capacity(n),
    };
    let mut outputs = Vec::with_capacity(n);
    for frame in frames {
        let mut wall = 0u64;
        let mut frame_out = Vec::with_capacity(config.layers);
        let mut drift_sq = 0.0f64;
        for (l, layer) in layers.iter_mut().enumerate() {
            let start = Instant::now();
            let (out, sel) = step_layer(layer, &weights[l], frame, mode, config)?;
            wall += start.elapsed().as_nanos() as u64;
            frame_out.push(out);
            if let Some(shadow) = shadows.get_mut(l) {
                let qkv = project_qkv(frame, &weights[l])?;
                shadow.append(&qkv.k, &qkv.v, frame.frame_index)?;
                if let Some(sel) = &sel {
                    shadow.gather(sel)?;
                }
                let d = drift(layer, shadow)?;
                drift_sq += d * d;
            }
        }
        let bytes: usize = layers.iter().map(KVCacheLayer::memory_bytes).sum();
        m.wall_ns.push(wall);
        m.cache_tokens.push(layers[0].total_tokens());
        m.cache_bytes.push(bytes);
        m.peak_bytes = m.peak_bytes.max(bytes);
        m.quant_drift.push((drift_sq / config.layers as f64).sqrt());
        outputs.push(frame_out);
    }

    let deviations = match (mode, baseline) {
        (Mode::Unbounded, _) => compare_outputs(&outputs, &outputs)?,
        (_, Some(base)) => compare_outputs(base, &outputs)?,
        (_, None) => {
            let base = run_frames(config, Mode::Unbounded, frames, None)?;
            compare_outputs(&base.outputs, &outputs)?
        }
    };
    for d in deviations {
        m.rel_l2.push(d.rel_l2);
        m.cosine.push(d.cosine);
    }
    Ok(StreamRun {
        metrics: m,
        layers,
        outputs,
    })
}

/// Generates the configured stream and runs one mode over it.
pub fn run_stream(config: &StreamConfig, mode: Mode) -> Result<BenchMetrics> {
    config.validate()?;
    Ok(run_frames(config, mode, &gen_frames(config), None)?.metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Json,
}

impl MetricsFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MetricsFormat::Csv => "csv",
            MetricsFormat::Json => "json",
        }
    }
}

impl FromStr for MetricsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MetricsFormat::Csv),
            "json" => Ok(MetricsFormat::Json),
            _ => Err(Error::param(format!("unknown metrics format {s:?}"))),
        }
    }
}

pub fn write_metrics<W: Write>(metrics: &BenchMetrics, format: MetricsFormat, mut out: W) -> Result<()> {
    let records = metrics.records();
    match format {
        MetricsFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in &records {
                w.serialize(r).map_err(|e| Error::param(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io("<metrics>", e))
        }
        MetricsFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &records).map_err(|e| Error::param(e.to_string()))?;
            out.write_all(b"\n").map_err(|e| Error::io("<metrics>", e))
        }
    }
}

pub fn emit_metrics(metrics: &BenchMetrics, format: MetricsFormat, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_metrics(metrics, format, &mut w).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_metrics(text: &str, format: MetricsFormat) -> Result<Vec<MetricRecord>> {
    match format {
        MetricsFormat::Csv => csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .map(|r| r.map_err(|e| Error::param(e.to_string())))
            .collect(),
        MetricsFormat::Json => serde_json::from_str(text).map_err(|e| Error::param(e.to_string())),
    }
}

/// Layer-0 keys and values over the first `budget / tokens_per_frame` frames.
pub fn quant_error_tensors(config: &StreamConfig) -> Result<(MultiHeadTensor, MultiHeadTensor)> {
    config.validate()?;
    let weights = &layer_weights(&StreamConfig {
        layers: 1,
        ..config.clone()
    })?[0];
    let count = (config.budget / config.tokens_per_frame()).max(1);
    let mut kv: Option<(MultiHeadTensor, MultiHeadTensor)> = None;
    for frame in FrameStream::new(config).take(count) {
        let qkv = project_qkv(&frame, weights)?;
        kv = Some(match kv {
            None => (qkv.k, qkv.v),
            Some((k, v)) => (k.concat_tokens(&qkv.k)?, v.concat_tokens(&qkv.v)?),
        });
    }
    Ok(kv.expect("at least one frame"))
}

/// The pooled-query-by-prunable-key score matrix that `mode` would consult
/// at `frame` (0-based) in `layer`, or `None` if that step does not prune.
pub fn sparsity_matrix(config: &StreamConfig, mode: Mode, layer: usize, frame: usize) -> Result<Option<RealMatrix>> {
    config.validate()?;
    if layer >= config.layers {
        return Err(Error::param(format!(
            "layer {layer} out of range for {} layers",
            config.layers
        )));
    }
    if frame >= config.frames {
        return Err(Error::param(format!(
            "frame {frame} out of range for {} frames",
            config.frames
        )));
    }
    let weights = &layer_weights(config)?[layer];
    let mut cache = KVCacheLayer::new(config.heads, config.d_head, config.budget);
    for f in FrameStream::new(config).take(frame) {
        step_layer(&mut cache, weights, &f, mode, config)?;
    }
    let current = FrameStream::new(config).nth(frame).expect("endless stream");
    if mode == Mode::Unbounded {
        return Ok(None);
    }
    let qkv = project_qkv(&current, weights)?;
    cache.append(&qkv.k, &qkv.v, frame)?;
    if cache.total_tokens() <= cache.budget() {
        return Ok(None);
    }
    let (keys, _) = cache.read_full_precision()?;
    let summary = summarize_prunable_keys(&keys, cache.t_first(), cache.t_current())?;
    let pooled = build_pooled_query(&qkv.q, config.special_tokens(), config.pooling)?;
    Ok(Some(score_matrix(&pooled, &summary)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StreamConfig {
        StreamConfig {
            heads: 2,
            d_head: 8,
            d_model: 16,
            registers: 1,
            patches: 6,
            pooling: 2,
            budget: 24,
            group_size: 8,
            frames: 8,
            outlier_channels: 2,
            ..Default::default()
        }
    }

    fn sample_correlation(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x as f64 - ma, y as f64 - mb);
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn redundancy_controls_frame_correlation() {
        let base = StreamConfig {
            patches: 1000 - 5,
            d_model: 8,
            frames: 2,
            ..Default::default()
        };
        let indep = gen_frames(&StreamConfig {
            redundancy: 0.0,
            ..base.clone()
        });
        let r = sample_correlation(indep[0].embeddings().data(), indep[1].embeddings().data());
        assert!(r.abs() < 0.1, "r = {r}");

        let close = gen_frames(&StreamConfig {
            redundancy: 0.99,
            ..base
        });
        let (a, b) = (close[0].embeddings().data(), close[1].embeddings().data());
        let cos = crate::numerics::dot(a, b) / (crate::numerics::dot(a, a) * crate::numerics::dot(b, b)).sqrt();
        assert!(cos >= 0.98, "cos = {cos}");
    }

    #[test]
    fn streams_are_reproducible() {
        let c = small();
        assert_eq!(gen_frames(&c), gen_frames(&c));
        assert_eq!(stream_hash(&gen_frames(&c)), stream_hash(&gen_frames(&c)));
        let other = StreamConfig { seed: 1, ..c.clone() };
        assert_ne!(stream_hash(&gen_frames(&c)), stream_hash(&gen_frames(&other)));
    }

    #[test]
    fn token_counts_per_mode() {
        let c = small();
        let per = c.tokens_per_frame();
        let unbounded = run_stream(&c, Mode::Unbounded).unwrap();
        let expected: Vec<usize> = (1..=c.frames).map(|f| f * per).collect();
        assert_eq!(unbounded.cache_tokens, expected);
        assert!(unbounded.rel_l2.iter().all(|&d| d == 0.0));
        assert!(unbounded.cosine.iter().all(|&c| c == 1.0));

        let pruned = run_stream(&c, Mode::Pruned).unwrap();
        let expected: Vec<usize> = (1..=c.frames).map(|f| (f * per).min(c.budget)).collect();
        assert_eq!(pruned.cache_tokens, expected);
        assert_eq!(pruned.frames(), c.frames);
        assert_eq!(pruned.rel_l2[..3], [0.0; 3]);
        assert!(pruned.quant_drift.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn quantized_bytes_follow_layout() {
        let c = small();
        let m = run_stream(&c, Mode::PrunedQuant).unwrap();
        let tokens = c.budget;
        let n = c.heads * tokens * c.d_head;
        let key_groups = c.heads * c.d_head * tokens.div_ceil(c.group_size);
        let value_groups = c.heads * tokens * c.d_head.div_ceil(c.group_size);
        let oracle = 32 + 4 * tokens + 2 * (n * c.bits as usize).div_ceil(8) + 12 * (key_groups + value_groups);
        assert_eq!(*m.cache_bytes.last().unwrap(), oracle);
        assert!(m.quant_drift.iter().all(|&d| d > 0.0));
        assert_eq!(m.peak_bytes, *m.cache_bytes.iter().max().unwrap());
    }

    #[test]
    fn layers_are_independent() {
        let one = StreamConfig { layers: 1, ..small() };
        let two = StreamConfig { layers: 2, ..small() };
        let frames = gen_frames(&one);
        let a = run_frames(&one, Mode::Pruned, &frames, None).unwrap();
        let b = run_frames(&two, Mode::Pruned, &frames, None).unwrap();
        assert_eq!(a.layers[0], b.layers[0]);
        assert_eq!(b.metrics.cache_bytes[0], 2 * a.metrics.cache_bytes[0]);
        assert_ne!(b.layers[0], b.layers[1]);
    }

    #[test]
    fn infeasible_budget_fails_up_front() {
        let c = StreamConfig { budget: 10, ..small() };
        assert!(matches!(
            run_stream(&c, Mode::Pruned),
            Err(Error::BudgetInfeasible { .. })
        ));
    }

    fn output(values: Vec<f32>) -> Vec<AttentionOutput> {
        vec![AttentionOutput {
            values: MultiHeadTensor::new(1, 1, values.len(), values).unwrap(),
        }]
    }

    #[test]
    fn deviation_geometry() {
        let a = vec![output(vec![1.0, 0.0]), output(vec![3.0, 4.0])];
        let same = compare_outputs(&a, &a).unwrap();
        assert!(same.iter().all(|d| d.rel_l2 == 0.0 && d.cosine == 1.0));

        let b = vec![output(vec![0.0, 1.0]), output(vec![-4.0, 3.0])];
        for d in compare_outputs(&a, &b).unwrap() {
            assert!(d.cosine.abs() < 1e-12);
            assert!((d.rel_l2 - 2f64.sqrt()).abs() < 1e-12);
        }
        assert!(compare_outputs(&a, &b[..1]).is_err());
        assert!(compare_outputs(&a[..1], &[output(vec![1.0])]).is_err());
    }

    #[test]
    fn metrics_round_trip_in_both_formats() {
        let m = run_stream(&StreamConfig { frames: 3, ..small() }, Mode::PrunedQuant).unwrap();
        let mut csv = Vec::new();
        write_metrics(&m, MetricsFormat::Csv, &mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(
            csv.lines().next().unwrap(),
            "frame,mode,wall_ns,cache_tokens,cache_bytes,rel_l2,cosine"
        );

        let mut json = Vec::new();
        write_metrics(&m, MetricsFormat::Json, &mut json).unwrap();
        let from_csv = parse_metrics(&csv, MetricsFormat::Csv).unwrap();
        let from_json = parse_metrics(std::str::from_utf8(&json).unwrap(), MetricsFormat::Json).unwrap();
        assert_eq!(from_csv, from_json);
        for (r, orig) in from_csv.iter().zip(m.records()) {
            assert_eq!(
                (r.frame, r.mode, r.wall_ns, r.cache_tokens, r.cache_bytes),
                (orig.frame, orig.mode, orig.wall_ns, orig.cache_tokens, orig.cache_bytes)
            );
            assert!((r.rel_l2 - orig.rel_l2).abs() <= 1e-9);
            assert!((r.cosine - orig.cosine).abs() <= 1e-9);
        }
    }

    #[test]
    fn sparsity_matrix_shape() {
        let c = small();
        assert!(sparsity_matrix(&c, Mode::PrunedQuant, 0, 1).unwrap().is_none());
        let s = sparsity_matrix(&c, Mode::PrunedQuant, 0, 5).unwrap().unwrap();
        let pooled = c.special_tokens() + c.patches.div_ceil(c.pooling);
        let per = c.tokens_per_frame();
        assert_eq!(s.shape(), (pooled, c.budget + per - 2 * per));
        assert_eq!(s, sparsity_matrix(&c, Mode::PrunedQuant, 0, 5).unwrap().unwrap());
        assert!(sparsity_matrix(&c, Mode::Unbounded, 0, 5).unwrap().is_none());
        assert!(sparsity_matrix(&c, Mode::Pruned, 1, 5).is_err());
        assert!(sparsity_matrix(&c, Mode::Pruned, 0, 8).is_err());
    }

    #[test]
    fn mode_names() {
        assert_eq!(
            Mode::parse_list("unbounded, pruned_quant").unwrap(),
            vec![Mode::Unbounded, Mode::PrunedQuant]
        );
        assert!(Mode::parse_list("pruned,fast").is_err());
        assert!(Mode::parse_list("").is_err());
        assert_eq!("json".parse::<MetricsFormat>().unwrap(), MetricsFormat::Json);
    }
}
