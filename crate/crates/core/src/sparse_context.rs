//! Sparse-context block: shrink each reference frame to the handful of
//! tokens that a coarse lesion mask marks as relevant.
//!
//! For reference offset `i` the backbone features are average-pooled with
//! window `K = 2^i` (farther frames see a coarser grid), refined by a 3×3
//! convolution, decoded into a coarse probability mask by a 1×1
//! convolution, and sampled at the positions the mask selects. The sampled
//! tokens of all references are stacked into the fusion context `r`, so
//! cross-attention costs `h·w·m·c` multiply-adds at the logit stage instead
//! of `h²·w²·t·c` for dense fusion over every reference position.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{cross_attention_traced, AttentionWeights, FeatureMap, TokenMatrix};
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::tensor::{avg_pool2d, sigmoid, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pooling window for reference offset `i`.
pub fn pool_window(offset: usize) -> Result<usize> {
    if offset == 0 || offset >= usize::BITS as usize - 1 {
        return Err(Error::param(format!("reference offset must be in 1..63, got {offset}")));
    }
    Ok(1 << offset)
}

/// Pools with `K = 2^offset`, then applies the 3×3 refinement conv.
pub fn pool_and_refine(f: &FeatureMap, offset: usize, conv: &Conv2d) -> Result<FeatureMap> {
    let k = pool_window(offset)?;
    let min_extent = f.height().min(f.width());
    if k >= 2 * min_extent {
        return Err(Error::param(format!(
            "pool window {k} is too large for a {}×{} map",
            f.height(),
            f.width()
        )));
    }
    if conv.kernel_size() != 3 || conv.in_channels() != f.channels() || conv.out_channels() != f.channels() {
        return Err(Error::dim(format!(
            "refinement conv must be 3×3 with {0}→{0} channels, got kernel {1:?}",
            f.channels(),
            conv.kernel.shape()
        )));
    }
    let pooled = avg_pool2d(f.tensor(), k)?;
    FeatureMap::new(conv.forward(&pooled)?)
}

/// Low-resolution lesion probability map.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl CoarseMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width != values.len() || height == 0 || width == 0 {
            return Err(Error::dim(format!(
                "{height}×{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("mask values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.height, self.width], self.values.clone())
    }
}

/// 1×1 convolution to a single channel, then the logistic sigmoid.
pub fn coarse_decode(f: &FeatureMap, decoder: &Conv2d) -> Result<CoarseMask> {
    if decoder.kernel_size() != 1 || decoder.out_channels() != 1 {
        return Err(Error::dim(format!(
            "coarse decoder must be a 1×1 conv to one channel, got {:?}",
            decoder.kernel.shape()
        )));
    }
    let logits = decoder.forward(f.tensor())?;
    CoarseMask::new(
        f.height(),
        f.width(),
        logits.data().iter().map(|&v| sigmoid(v)).collect(),
    )
}

/// Tokens sampled from one reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseContext {
    pub tokens: TokenMatrix,
    /// Pooled-grid `(row, col)` of each token, strictly increasing in
    /// row-major order.
    pub positions: Vec<(usize, usize)>,
    pub frame_offset: usize,
}

impl SparseContext {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.tokens.channels()
    }
}

/// Keeps every position whose mask value exceeds `threshold`. When nothing
/// passes, keeps the single highest-scoring position (first in row-major
/// order on ties), so the result is never empty.
pub fn sparse_sample(
    f: &FeatureMap,
    mask: &CoarseMask,
    threshold: f64,
    frame_offset: usize,
) -> Result<SparseContext> {
    if mask.height != f.height() || mask.width != f.width() {
        return Err(Error::dim(format!(
            "mask grid {}×{} does not match feature grid {}×{}",
            mask.height,
            mask.width,
            f.height(),
            f.width()
        )));
    }
    let mut positions: Vec<(usize, usize)> = (0..mask.height)
        .flat_map(|y| (0..mask.width).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x) > threshold)
        .collect();
    if positions.is_empty() {
        let mut best = 0;
        for (i, &v) in mask.values.iter().enumerate() {
            if v > mask.values[best] {
                best = i;
            }
        }
        positions.push((best / mask.width, best % mask.width));
    }
    let c = f.channels();
    let mut data = Vec::with_capacity(positions.len() * c);
    for &(y, x) in &positions {
        data.extend(f.channel_vector(y, x));
    }
    Ok(SparseContext {
        tokens: TokenMatrix::new(Tensor::from_parts(vec![positions.len(), c], data))?,
        positions,
        frame_offset,
    })
}

/// Stacks the tokens of every reference, nearest frame first.
pub fn build_reference_context(parts: &[SparseContext]) -> Result<TokenMatrix> {
    let first = parts
        .first()
        .ok_or_else(|| Error::param("reference context needs at least one part"))?;
    let c = first.channels();
    if let Some(bad) = parts.iter().find(|p| p.channels() != c) {
        return Err(Error::dim(format!(
            "reference offset {} has {} channels, expected {c}",
            bad.frame_offset,
            bad.channels()
        )));
    }
    let mut ordered: Vec<&SparseContext> = parts.iter().collect();
    ordered.sort_by_key(|p| p.frame_offset);
    let m: usize = ordered.iter().map(|p| p.len()).sum();
    let mut data = Vec::with_capacity(m * c);
    for p in ordered {
        data.extend_from_slice(p.tokens.tensor().data());
    }
    TokenMatrix::new(Tensor::from_parts(vec![m, c], data))
}

/// Logit-stage multiply-add counts of dense and sparse fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FusionCost {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub t: usize,
    pub m: usize,
    /// `h²·w²·t·c`: every target token against every position of `t` frames.
    pub dense_macs: u64,
    /// `h·w·m·c`: every target token against `m` sampled tokens.
    pub sparse_macs: u64,
}

pub fn fusion_cost(h: usize, w: usize, c: usize, t: usize, m: usize) -> Result<FusionCost> {
    if h == 0 || w == 0 || c == 0 || t == 0 || m == 0 {
        return Err(Error::param("fusion cost arguments must all be at least 1"));
    }
    let limit = h * w * (t - 1);
    if m > limit {
        return Err(Error::param(format!(
            "m = {m} exceeds the h·w·(t−1) = {limit} reference positions"
        )));
    }
    let (h, w, c, t, m) = (h as u64, w as u64, c as u64, t as u64, m as u64);
    Ok(FusionCost {
        h: h as usize,
        w: w as usize,
        c: c as usize,
        t: t as usize,
        m: m as usize,
        dense_macs: h * h * w * w * t * c,
        sparse_macs: h * w * m * c,
    })
}

/// One row of the fusion benchmark.
#[derive(Clone, Debug, Serialize)]
pub struct FusionBenchRow {
    pub cost: FusionCost,
    /// Logit-stage multiply-adds counted inside the attention kernels.
    pub dense_counted: u64,
    pub sparse_counted: u64,
    /// Median wall time of one fusion call, in milliseconds.
    pub dense_ms: f64,
    pub sparse_ms: f64,
}

impl FusionBenchRow {
    pub const CSV_HEADER: &'static str = "h,w,c,t,m,dense_macs,sparse_macs,dense_ms,sparse_ms";

    pub fn csv_row(&self) -> String {
        let c = &self.cost;
        format!(
            "{},{},{},{},{},{},{},{:.6},{:.6}",
            c.h, c.w, c.c, c.t, c.m, c.dense_macs, c.sparse_macs, self.dense_ms, self.sparse_ms
        )
    }
}

pub fn median(samples: &mut [f64]) -> f64 {
    assert!(!samples.is_empty());
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Times cross-attention of `h·w` target tokens against a dense context of
/// `h·w·t` tokens and a sparse context of `m` tokens, with projection width
/// `c`. Inputs and weights are seeded; only the timings vary between runs.
pub fn bench_fusion(
    h: usize,
    w: usize,
    c: usize,
    t: usize,
    m: usize,
    reps: usize,
    seed: u64,
) -> Result<FusionBenchRow> {
    let cost = fusion_cost(h, w, c, t, m)?;
    if reps == 0 {
        return Err(Error::param("benchmark needs at least one repetition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = AttentionWeights::init(c, c, &mut rng);
    let random_tokens = |n: usize, rng: &mut ChaCha8Rng| -> Result<TokenMatrix> {
        use rand::Rng;
        TokenMatrix::new(Tensor::from_parts(
            vec![n, c],
            (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ))
    };
    let p = random_tokens(h * w, &mut rng)?;
    let dense = random_tokens(h * w * t, &mut rng)?;
    let sparse = random_tokens(m, &mut rng)?;

    let time = |ctx: &TokenMatrix| -> Result<(f64, u64)> {
        let mut samples = Vec::with_capacity(reps);
        let mut macs = 0;
        for _ in 0..reps {
            let start = Instant::now();
            let (_, trace) = cross_attention_traced(&p, ctx, &weights)?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
            macs = trace.macs.logits;
        }
        Ok((median(&mut samples), macs))
    };
    let (dense_ms, dense_counted) = time(&dense)?;
    let (sparse_ms, sparse_counted) = time(&sparse)?;
    Ok(FusionBenchRow {
        cost,
        dense_counted,
        sparse_counted,
        dense_ms,
        sparse_ms,
    })
}
