//! Dense real arrays and the handful of kernels the rest of the crate needs.
//!
//! Storage is `f32`; every reduction accumulates in `f64`.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite matrix entry");
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> RealMatrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        RealMatrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &RealMatrix) -> Result<RealMatrix> {
        if self.cols != other.cols {
            return Err(Error::dim(format!(
                "cannot stack {}x{} on {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(RealMatrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn transpose(&self) -> RealMatrix {
        let mut out = RealMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Column means as a single-row matrix.
    pub fn column_mean(&self) -> RealMatrix {
        let mut acc = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            for (a, &v) in acc.iter_mut().zip(self.row(r)) {
                *a += v as f64;
            }
        }
        let n = self.rows.max(1) as f64;
        RealMatrix {
            rows: 1,
            cols: self.cols,
            data: acc.into_iter().map(|a| (a / n) as f32).collect(),
        }
    }
}

/// Real values laid out `[head][token][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadTensor {
    heads: usize,
    tokens: usize,
    channels: usize,
    data: Vec<f32>,
}

impl MultiHeadTensor {
    pub fn new(heads: usize, tokens: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != heads * tokens * channels {
            return Err(Error::dim(format!(
                "tensor {heads}x{tokens}x{channels} needs {} values, got {}",
                heads * tokens * channels,
                data.len()
            )));
        }
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor entry");
        Ok(Self {
            heads,
            tokens,
            channels,
            data,
        })
    }

    pub fn zeros(heads: usize, tokens: usize, channels: usize) -> Self {
        Self {
            heads,
            tokens,
            channels,
            data: vec![0.0; heads * tokens * channels],
        }
    }

    /// Stacks one `tokens x channels` matrix per head.
    pub fn from_heads(heads: &[RealMatrix]) -> Result<Self> {
        let (tokens, channels) = heads.first().map_or((0, 0), RealMatrix::shape);
        let mut data = Vec::with_capacity(heads.len() * tokens * channels);
        for (h, m) in heads.iter().enumerate() {
            if m.shape() != (tokens, channels) {
                return Err(Error::dim(format!(
                    "head {h} is {}x{}, expected {tokens}x{channels}",
                    m.rows(),
                    m.cols()
                )));
            }
            data.extend_from_slice(m.data());
        }
        Self::new(heads.len(), tokens, channels, data)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.heads, self.tokens, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, h: usize, t: usize, c: usize) -> usize {
        (h * self.tokens + t) * self.channels + c
    }

    pub fn get(&self, h: usize, t: usize, c: usize) -> f32 {
        self.data[self.offset(h, t, c)]
    }

    pub fn set(&mut self, h: usize, t: usize, c: usize, v: f32) {
        let i = self.offset(h, t, c);
        self.data[i] = v;
    }

    /// One token's channel vector within a head.
    pub fn row(&self, h: usize, t: usize) -> &[f32] {
        let start = self.offset(h, t, 0);
        &self.data[start..start + self.channels]
    }

    /// Contiguous `tokens x channels` slice of one head.
    pub fn head_slice(&self, h: usize) -> &[f32] {
        let n = self.tokens * self.channels;
        &self.data[h * n..(h + 1) * n]
    }

    pub fn head(&self, h: usize) -> RealMatrix {
        RealMatrix {
            rows: self.tokens,
            cols: self.channels,
            data: self.head_slice(h).to_vec(),
        }
    }

    /// Mean over heads, as a `tokens x channels` matrix.
    pub fn head_mean(&self) -> RealMatrix {
        self.head_mean_range(0, self.tokens)
    }

    /// Mean over heads of tokens `start..end`.
    pub fn head_mean_range(&self, start: usize, end: usize) -> RealMatrix {
        assert!(start <= end && end <= self.tokens, "token range out of bounds");
        let n = (end - start) * self.channels;
        let mut acc = vec![0.0f64; n];
        for h in 0..self.heads {
            let src = &self.head_slice(h)[start * self.channels..end * self.channels];
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += v as f64;
            }
        }
        let inv = 1.0 / self.heads.max(1) as f64;
        RealMatrix {
            rows: end - start,
            cols: self.channels,
            data: acc.into_iter().map(|a| (a * inv) as f32).collect(),
        }
    }

    /// Concatenates along the token axis.
    pub fn concat_tokens(&self, other: &MultiHeadTensor) -> Result<MultiHeadTensor> {
        if self.heads != other.heads || self.channels != other.channels {
            return Err(Error::dim(format!(
                "cannot concatenate {:?} with {:?} along tokens",
                self.shape(),
                other.shape()
            )));
        }
        let tokens = self.tokens + other.tokens;
        let mut data = Vec::with_capacity(self.heads * tokens * self.channels);
        for h in 0..self.heads {
            data.extend_from_slice(self.head_slice(h));
            data.extend_from_slice(other.head_slice(h));
        }
        Ok(MultiHeadTensor {
            heads: self.heads,
            tokens,
            channels: self.channels,
            data,
        })
    }

    /// Keeps the listed tokens, in the order given.
    pub fn select_tokens(&self, indices: &[usize]) -> MultiHeadTensor {
        let mut data = Vec::with_capacity(self.heads * indices.len() * self.channels);
        for h in 0..self.heads {
            for &t in indices {
                data.extend_from_slice(self.row(h, t));
            }
        }
        MultiHeadTensor {
            heads: self.heads,
            tokens: indices.len(),
            channels: self.channels,
            data,
        }
    }

    pub fn token_range(&self, start: usize, end: usize) -> MultiHeadTensor {
        let idx: Vec<usize> = (start..end).collect();
        self.select_tokens(&idx)
    }

    /// Squared L2 norm, accumulated in f64.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// Dot product with four independent f64 accumulators.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0.0f64;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x as f64 * y as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn matmul(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let aik = aik as f64;
            for (x, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *x += aik * bkj as f64;
            }
        }
        out.extend(acc.iter().map(|&x| x as f32));
    }
    RealMatrix::new(a.rows, b.cols, out)
}

/// Row-wise softmax with max subtraction. `masked[i]` set means entry `i`
/// (row-major) is excluded and comes out exactly zero.
pub fn softmax_rows(m: &RealMatrix, masked: Option<&[bool]>) -> Result<RealMatrix> {
    if let Some(mask) = masked {
        if mask.len() != m.data.len() {
            return Err(Error::dim(format!(
                "mask has {} entries for a {}x{} matrix",
                mask.len(),
                m.rows,
                m.cols
            )));
        }
    }
    let mut out = RealMatrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let keep = |c: usize| masked.is_none_or(|mask| !mask[r * m.cols + c]);
        let max = (0..m.cols)
            .filter(|&c| keep(c))
            .map(|c| row[c] as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidMask { row: r });
        }
        let mut sum = 0.0f64;
        let mut exps = vec![0.0f64; m.cols];
        for c in (0..m.cols).filter(|&c| keep(c)) {
            let e = (row[c] as f64 - max).exp();
            exps[c] = e;
            sum += e;
        }
        for (o, e) in out.row_mut(r).iter_mut().zip(exps) {
            *o = (e / sum) as f32;
        }
    }
    Ok(out)
}

/// Averages consecutive groups of `g` rows. A trailing short group is averaged
/// over its actual size.
pub fn grouped_mean(m: &RealMatrix, g: usize) -> Result<RealMatrix> {
    if g == 0 {
        return Err(Error::param("group size must be at least 1"));
    }
    let groups = m.rows.div_ceil(g);
    let mut data = Vec::with_capacity(groups * m.cols);
    let mut acc = vec![0.0f64; m.cols];
    for gi in 0..groups {
        let start = gi * g;
        let end = (start + g).min(m.rows);
        acc.iter_mut().for_each(|x| *x = 0.0);
        for r in start..end {
            for (a, &v) in acc.iter_mut().zip(m.row(r)) {
                *a += v as f64;
            }
        }
        let n = (end - start) as f64;
        data.extend(acc.iter().map(|&a| (a / n) as f32));
    }
    RealMatrix::new(groups, m.cols, data)
}

/// Indices of the `k` largest scores in ascending index order. Equal scores
/// prefer the lower index.
pub fn top_k_indices(scores: &[f32], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::param(format!("top-k with k = {k} over {} scores", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_score = |a: &usize, b: &usize| -> Ordering { scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)) };
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, by_score);
    }
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> RealMatrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        RealMatrix::new(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &RealMatrix, b: &RealMatrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i * b.cols() + j] += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_basis() {
        let m = RealMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&RealMatrix::identity(2), &m).unwrap(), m);

        let a = RealMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = RealMatrix::from_rows(&[[5.0], [7.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 3, 2);
        let got = matmul(&a, &b).unwrap();
        assert_eq!(got.shape(), (4, 2));
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((*g as f64 - e).abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = RealMatrix::zeros(2, 3);
        let b = RealMatrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("2x3 by 2x3"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let m = RealMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert_eq!(softmax_rows(&m, None).unwrap().data(), &[0.5, 0.5]);

        let m = RealMatrix::from_rows(&[[1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&m, None).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-6 && s.get(0, 1) < 1e-6);
        assert!(s.data().iter().all(|v| v.is_finite()));

        let m = RealMatrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&m, Some(&[false, false, true])).unwrap();
        let e = std::f64::consts::E;
        assert!((s.get(0, 0) as f64 - 1.0 / (1.0 + e)).abs() < 1e-7);
        assert!((s.get(0, 1) as f64 - e / (1.0 + e)).abs() < 1e-7);
        assert_eq!(s.get(0, 2), 0.0);
    }

    #[test]
    fn softmax_fully_masked_row_rejected() {
        let m = RealMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let err = softmax_rows(&m, Some(&[false, false, true, true])).unwrap_err();
        assert!(matches!(err, Error::InvalidMask { row: 1 }));
    }

    #[test]
    fn grouped_mean_examples() {
        let m = RealMatrix::from_rows(&[[1.0, 1.0], [3.0, 3.0], [5.0, 5.0], [7.0, 7.0]]).unwrap();
        let g = grouped_mean(&m, 2).unwrap();
        assert_eq!(g, RealMatrix::from_rows(&[[2.0, 2.0], [6.0, 6.0]]).unwrap());
        assert_eq!(grouped_mean(&m, 1).unwrap(), m);

        let five = RealMatrix::from_rows(&[[1.0], [2.0], [3.0], [4.0], [9.0]]).unwrap();
        let g = grouped_mean(&five, 2).unwrap();
        assert_eq!(g.data(), &[1.5, 3.5, 9.0]);

        assert!(matches!(grouped_mean(&m, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.5], 2).unwrap(), vec![0, 1]);
        assert!(top_k_indices(&[0.5], 0).unwrap().is_empty());
        assert!(matches!(top_k_indices(&[0.5], 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // Coarse values so ties actually occur.
        let scores: Vec<f32> = (0..100).map(|_| rng.random_range(0..20) as f32).collect();
        let mut oracle: Vec<usize> = (0..100).collect();
        oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut oracle = oracle[..17].to_vec();
        oracle.sort();
        assert_eq!(top_k_indices(&scores, 17).unwrap(), oracle);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, p in 1usize..5, q in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, n, m);
            let b = random_matrix(&mut rng, m, p);
            let c = random_matrix(&mut rng, p, q);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(rows in proptest::collection::vec(proptest::collection::vec(-50.0f32..50.0, 1..12), 1..6)) {
            let cols = rows[0].len();
            let rows: Vec<Vec<f32>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
            let m = RealMatrix::from_rows(&rows).unwrap();
            let s = softmax_rows(&m, None).unwrap();
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().map(|&v| v as f64).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn grouped_mean_full_group_is_column_mean(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, rows, cols);
            let g = grouped_mean(&m, rows).unwrap();
            prop_assert_eq!(g, m.column_mean());
        }

        #[test]
        fn top_k_of_everything_is_identity(v in proptest::collection::vec(-1e3f32..1e3, 0..40)) {
            let all: Vec<usize> = (0..v.len()).collect();
            prop_assert_eq!(top_k_indices(&v, v.len()).unwrap(), all);
        }
    }
}
