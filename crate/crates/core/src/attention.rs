//! Single-head transformer layers over spatial tokens.
//!
//! A `c×h×w` feature map becomes `h·w` tokens of width `c` (row-major
//! spatial order). Self-attention refines the target frame's tokens;
//! cross-attention lets those tokens query a context assembled from
//! reference frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    layer_norm_rows, matmul, matmul_counted, matmul_transpose_b_counted, softmax_rows, Tensor,
};

const LN_EPS: f64 = 1e-5;

/// A `c×h×w` activation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims3()?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Channel vector at spatial position `(y, x)`.
    pub fn channel_vector(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels()).map(|c| self.0.at3(c, y, x)).collect()
    }

    /// Flattens to `h·w` tokens in row-major spatial order.
    pub fn to_tokens(&self) -> TokenMatrix {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let mut data = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(self.0.at3(ch, y, x));
                }
            }
        }
        TokenMatrix(Tensor::from_parts(vec![h * w, c], data))
    }

    /// Inverse of [`FeatureMap::to_tokens`].
    pub fn from_tokens(tokens: &TokenMatrix, h: usize, w: usize) -> Result<Self> {
        let (n, c) = (tokens.len(), tokens.channels());
        if n != h * w {
            return Err(Error::dim(format!("{n} tokens cannot fill a {h}×{w} grid")));
        }
        let mut data = vec![0.0; c * n];
        for (pos, tok) in tokens.0.data().chunks_exact(c).enumerate() {
            for (ch, &v) in tok.iter().enumerate() {
                data[ch * n + pos] = v;
            }
        }
        Ok(Self(Tensor::from_parts(vec![c, h, w], data)))
    }
}

/// `n` tokens of width `c`, stored `n×c`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix(Tensor);

impl TokenMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims2()?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Projections and feed-forward weights of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Tensor,
    pub mlp_b2: Vec<f64>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

impl AttentionWeights {
    /// Seeded uniform initialisation in `[−1/√c, 1/√c]` for token width `c`
    /// and projection width `d`.
    pub fn init(c: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let b = 1.0 / (c as f64).sqrt();
        let hidden = 4 * c;
        Self {
            wq: uniform(&[c, d], b, rng),
            wk: uniform(&[c, d], b, rng),
            wv: uniform(&[c, d], b, rng),
            wo: uniform(&[d, c], b, rng),
            mlp_w1: uniform(&[c, hidden], b, rng),
            mlp_b1: uniform(&[hidden], b, rng).into_data(),
            mlp_w2: uniform(&[hidden, c], b, rng),
            mlp_b2: uniform(&[c], b, rng).into_data(),
        }
    }

    pub fn seeded(c: usize, d: usize, seed: u64) -> Self {
        Self::init(c, d, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn proj_dim(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let d = self.proj_dim();
        let h = self.mlp_w1.shape().get(1).copied().unwrap_or(0);
        let expect: [(&Tensor, [usize; 2], &str); 6] = [
            (&self.wq, [c, d], "wq"),
            (&self.wk, [c, d], "wk"),
            (&self.wv, [c, d], "wv"),
            (&self.wo, [d, c], "wo"),
            (&self.mlp_w1, [c, h], "mlp_w1"),
            (&self.mlp_w2, [h, c], "mlp_w2"),
        ];
        for (t, shape, name) in expect {
            if t.shape() != shape {
                return Err(Error::dim(format!("{name} is {:?}, expected {shape:?}", t.shape())));
            }
        }
        if self.mlp_b1.len() != h || self.mlp_b2.len() != c {
            return Err(Error::dim("mlp bias lengths do not match the hidden/output widths"));
        }
        Ok(())
    }
}

/// Multiply-accumulate counts for the two matrix products of the attention
/// core.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionMacs {
    /// `q·kᵀ`: queries × keys × projection width.
    pub logits: u64,
    /// `A·v`: queries × keys × projection width.
    pub values: u64,
}

/// Intermediate results of one attention core evaluation.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    /// Row-stochastic `n_query×n_key` attention matrix.
    pub attention: Tensor,
    /// `A·v·Wo`, before the residual connection.
    pub attended: Tensor,
    pub macs: AttentionMacs,
}

/// `softmax(q(x)·k(ctx)ᵀ/√d)·v(ctx)·Wo`.
pub fn attention_core(
    queries: &TokenMatrix,
    context: &TokenMatrix,
    w: &AttentionWeights,
) -> Result<AttentionTrace> {
    let c = w.channels();
    if queries.channels() != c || context.channels() != c {
        return Err(Error::dim(format!(
            "token widths {} (query) and {} (context) must match weight width {c}",
            queries.channels(),
            context.channels()
        )));
    }
    if context.is_empty() {
        return Err(Error::Contract("attention context has no tokens".into()));
    }
    let d = w.proj_dim();
    let mut proj_macs = 0;
    let q = matmul_counted(queries.tensor(), &w.wq, &mut proj_macs)?;
    let k = matmul_counted(context.tensor(), &w.wk, &mut proj_macs)?;
    let v = matmul_counted(context.tensor(), &w.wv, &mut proj_macs)?;

    let mut macs = AttentionMacs::default();
    let logits = matmul_transpose_b_counted(&q, &k, &mut macs.logits)?;
    let attention = softmax_rows(&logits.scale(1.0 / (d as f64).sqrt()))?;
    let av = matmul_counted(&attention, &v, &mut macs.values)?;
    let attended = matmul(&av, &w.wo)?;
    Ok(AttentionTrace {
        attention,
        attended,
        macs,
    })
}

fn feed_forward(x: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    let hidden = matmul(x, &w.mlp_w1)?.add_row_bias(&w.mlp_b1)?.map(|v| v.max(0.0));
    matmul(&hidden, &w.mlp_w2)?.add_row_bias(&w.mlp_b2)
}

/// Post-norm transformer block around an attention core:
/// `x = LN(q + attn)`, `out = LN(x + MLP(x))`.
fn transformer_block(
    queries: &TokenMatrix,
    context: &TokenMatrix,
    w: &AttentionWeights,
) -> Result<(TokenMatrix, AttentionTrace)> {
    let trace = attention_core(queries, context, w)?;
    let x = layer_norm_rows(&queries.tensor().add(&trace.attended)?, LN_EPS)?;
    let out = layer_norm_rows(&x.add(&feed_forward(&x, w)?)?, LN_EPS)?;
    Ok((TokenMatrix(out), trace))
}

pub fn self_attention_layer(p_in: &TokenMatrix, w: &AttentionWeights) -> Result<TokenMatrix> {
    self_attention_traced(p_in, w).map(|(out, _)| out)
}

pub fn self_attention_traced(
    p_in: &TokenMatrix,
    w: &AttentionWeights,
) -> Result<(TokenMatrix, AttentionTrace)> {
    transformer_block(p_in, p_in, w)
}

/// Queries come from `p`, keys and values from `r`. The result has one token
/// per token of `p`.
pub fn cross_attention_fuse(
    p: &TokenMatrix,
    r: &TokenMatrix,
    w: &AttentionWeights,
) -> Result<TokenMatrix> {
    cross_attention_traced(p, r, w).map(|(out, _)| out)
}

pub fn cross_attention_traced(
    p: &TokenMatrix,
    r: &TokenMatrix,
    w: &AttentionWeights,
) -> Result<(TokenMatrix, AttentionTrace)> {
    transformer_block(p, r, w)
}

/// Fixed 2-D sinusoidal position code for an `h×w` grid of width-`c`
/// tokens. The first `⌈c/2⌉` channels encode the row, the rest the column;
/// within each half, channel pairs alternate sine and cosine over
/// geometrically spaced frequencies.
pub fn position_encoding(h: usize, w: usize, c: usize) -> Tensor {
    let row_ch = c.div_ceil(2);
    let col_ch = c - row_ch;
    let code = |pos: usize, idx: usize, width: usize| -> f64 {
        let pair = (idx / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / width.max(1) as f64);
        let angle = pos as f64 * freq;
        if idx % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data.push(if ch < row_ch {
                    code(y, ch, row_ch)
                } else {
                    code(x, ch - row_ch, col_ch)
                });
            }
        }
    }
    Tensor::from_parts(vec![h * w, c], data)
}

/// Flattens `f_t`, adds position codes and runs the stacked self-attention
/// layers. Returns `h·w` tokens.
pub fn refine_per_frame(f_t: &FeatureMap, layers: &[AttentionWeights]) -> Result<TokenMatrix> {
    if layers.is_empty() {
        return Err(Error::param("per-frame refinement needs at least one layer"));
    }
    let tokens = f_t.to_tokens();
    let pe = position_encoding(f_t.height(), f_t.width(), f_t.channels());
    let mut p = TokenMatrix(tokens.tensor().add(&pe)?);
    for layer in layers {
        p = self_attention_layer(&p, layer)?;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(n: usize, c: usize, seed: u64) -> TokenMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenMatrix(uniform(&[n, c], 1.0, &mut rng))
    }

    fn row_sums_ok(a: &Tensor) -> bool {
        let (_, n) = a.dims2().unwrap();
        a.data().chunks_exact(n).all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= 1e-12)
    }

    /// Hand-set weights for the scalar oracle cases: c = d = 2.
    fn hand_weights() -> AttentionWeights {
        let mut w = AttentionWeights::seeded(2, 2, 0);
        w.wq = Tensor::from_rows(&[&[1.0, 0.5], &[-0.5, 2.0]]);
        w.wk = Tensor::from_rows(&[&[0.3, -1.0], &[1.2, 0.4]]);
        w.wv = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        w
    }

    /// softmax(q·kᵀ/√d) written out with scalar arithmetic only.
    fn scalar_attention(qs: &[[f64; 2]], ks: &[[f64; 2]], w: &AttentionWeights) -> Vec<Vec<f64>> {
        let proj = |x: &[f64; 2], m: &Tensor| -> [f64; 2] {
            [
                x[0] * m.at2(0, 0) + x[1] * m.at2(1, 0),
                x[0] * m.at2(0, 1) + x[1] * m.at2(1, 1),
            ]
        };
        qs.iter()
            .map(|qt| {
                let q = proj(qt, &w.wq);
                let logits: Vec<f64> = ks
                    .iter()
                    .map(|kt| {
                        let k = proj(kt, &w.wk);
                        (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                logits.iter().map(|l| l.exp() / z).collect()
            })
            .collect()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let w = AttentionWeights::seeded(4, 4, 1);
        let p = tokens(1, 4, 2);
        let (out, trace) = self_attention_traced(&p, &w).unwrap();
        assert_eq!(trace.attention.data(), &[1.0]);
        assert_eq!(out.len(), 1);
        assert!(out.tensor().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let w = AttentionWeights::seeded(3, 3, 4);
        let row = [0.2, -0.7, 1.1];
        let p = TokenMatrix(Tensor::from_rows(&[&row, &row, &row, &row]));
        let (out, trace) = self_attention_traced(&p, &w).unwrap();
        assert!(trace.attention.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        for i in 1..4 {
            assert_eq!(out.token(i), out.token(0));
        }
    }

    #[test]
    fn self_attention_matches_scalar_oracle() {
        let w = hand_weights();
        let x = [[0.5, -1.0], [1.5, 0.25]];
        let p = TokenMatrix(Tensor::from_rows(&[&x[0], &x[1]]));
        let trace = attention_core(&p, &p, &w).unwrap();
        let oracle = scalar_attention(&x, &x, &w);
        for i in 0..2 {
            for j in 0..2 {
                assert!((trace.attention.at2(i, j) - oracle[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_attention_matches_scalar_oracle() {
        let w = hand_weights();
        let q = [[0.5, -1.0], [1.5, 0.25]];
        let k = [[0.0, 1.0], [-1.0, 0.5], [2.0, 2.0]];
        let p = TokenMatrix(Tensor::from_rows(&[&q[0], &q[1]]));
        let r = TokenMatrix(Tensor::from_rows(&[&k[0], &k[1], &k[2]]));
        let (y, trace) = cross_attention_traced(&p, &r, &w).unwrap();
        assert_eq!(y.len(), 2);
        let oracle = scalar_attention(&q, &k, &w);
        for i in 0..2 {
            for j in 0..3 {
                assert!((trace.attention.at2(i, j) - oracle[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_reference_token_broadcasts_its_value() {
        let w = AttentionWeights::seeded(4, 4, 6);
        let p = tokens(5, 4, 7);
        let r = tokens(1, 4, 8);
        let trace = attention_core(&p, &r, &w).unwrap();
        assert!(trace.attention.data().iter().all(|&a| a == 1.0));
        let expected = matmul(&matmul(r.tensor(), &w.wv).unwrap(), &w.wo).unwrap();
        for i in 0..5 {
            assert_eq!(trace.attended.row(i), expected.row(0));
        }
    }

    #[test]
    fn output_token_count_follows_queries() {
        let w = AttentionWeights::seeded(4, 4, 9);
        let p = tokens(6, 4, 10);
        for m in [1, 2, 7, 30] {
            let y = cross_attention_fuse(&p, &tokens(m, 4, m as u64), &w).unwrap();
            assert_eq!(y.len(), 6);
        }
    }

    #[test]
    fn empty_context_is_a_contract_violation() {
        let w = AttentionWeights::seeded(2, 2, 0);
        let p = tokens(3, 2, 1);
        let empty = TokenMatrix(Tensor::from_parts(vec![0, 2], vec![]));
        assert!(matches!(cross_attention_fuse(&p, &empty, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let w = AttentionWeights::seeded(4, 4, 0);
        assert!(matches!(
            self_attention_layer(&tokens(3, 5, 1), &w),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn attention_rows_are_distributions() {
        for trial in 0..200u64 {
            let c = 1 + (trial % 6) as usize;
            let w = AttentionWeights::seeded(c, c, trial);
            let p = tokens(1 + (trial % 9) as usize, c, trial + 1000);
            let r = tokens(1 + (trial % 5) as usize, c, trial + 2000);
            assert!(row_sums_ok(&attention_core(&p, &p, &w).unwrap().attention));
            assert!(row_sums_ok(&attention_core(&p, &r, &w).unwrap().attention));
        }
    }

    #[test]
    fn attention_core_is_permutation_equivariant() {
        let w = AttentionWeights::seeded(4, 4, 11);
        let p = tokens(5, 4, 12);
        let perm = [3, 0, 4, 1, 2];
        let rows: Vec<&[f64]> = perm.iter().map(|&i| p.token(i)).collect();
        let permuted = TokenMatrix(Tensor::from_rows(&rows));
        let a = self_attention_layer(&p, &w).unwrap();
        let b = self_attention_layer(&permuted, &w).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for (x, y) in b.token(dst).iter().zip(a.token(src)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logit_macs_scale_linearly_with_context() {
        let w = AttentionWeights::seeded(8, 8, 13);
        let p = tokens(10, 8, 14);
        let a = attention_core(&p, &tokens(6, 8, 15), &w).unwrap().macs;
        let b = attention_core(&p, &tokens(12, 8, 16), &w).unwrap().macs;
        assert_eq!(a.logits, 10 * 6 * 8);
        assert_eq!(b.logits, 2 * a.logits);
        assert_eq!(b.values, 2 * a.values);
    }

    #[test]
    fn refine_per_frame_shapes() {
        let w = AttentionWeights::seeded(1, 1, 0);
        let f = FeatureMap::new(Tensor::full(&[1, 1, 1], 0.3)).unwrap();
        let p = refine_per_frame(&f, &[w]).unwrap();
        assert_eq!(p.tensor().shape(), &[1, 1]);

        let layers = [AttentionWeights::seeded(8, 8, 1), AttentionWeights::seeded(8, 8, 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FeatureMap::new(uniform(&[8, 4, 5], 1.0, &mut rng)).unwrap();
        let a = refine_per_frame(&f, &layers).unwrap();
        let b = refine_per_frame(&f, &layers).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);

        assert!(refine_per_frame(&f, &[]).is_err());
    }

    #[test]
    fn token_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = FeatureMap::new(uniform(&[3, 4, 2], 1.0, &mut rng)).unwrap();
        let t = f.to_tokens();
        assert_eq!(t.token(5), f.channel_vector(2, 1).as_slice());
        assert_eq!(FeatureMap::from_tokens(&t, 4, 2).unwrap(), f);
    }
    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::seq::SliceRandom;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn permuting_tokens_permutes_outputs(n in 1usize..10, c in 1usize..8, seed in any::<u64>()) {
                let w = AttentionWeights::seeded(c, c, seed);
                let p = tokens(n, c, seed ^ 1);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 2));
                let rows: Vec<&[f64]> = perm.iter().map(|&i| p.token(i)).collect();
                let permuted = TokenMatrix(Tensor::from_rows(&rows));
                let a = self_attention_layer(&p, &w).unwrap();
                let b = self_attention_layer(&permuted, &w).unwrap();
                for (dst, &src) in perm.iter().enumerate() {
                    for (x, y) in b.token(dst).iter().zip(a.token(src)) {
                        prop_assert!((x - y).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn doubling_context_doubles_macs(n in 1usize..12, m in 1usize..12, c in 1usize..8, d in 1usize..8) {
                let w = AttentionWeights::seeded(c, d, 7);
                let p = tokens(n, c, 1);
                let a = attention_core(&p, &tokens(m, c, 2), &w).unwrap().macs;
                let b = attention_core(&p, &tokens(2 * m, c, 3), &w).unwrap().macs;
                prop_assert_eq!(a.logits, (n * m * d) as u64);
                prop_assert_eq!(b.logits, 2 * a.logits);
                prop_assert_eq!(b.values, 2 * a.values);
            }

            #[test]
            fn cross_attention_rows_are_distributions(n in 1usize..10, m in 1usize..10, c in 1usize..6, seed in any::<u64>()) {
                let w = AttentionWeights::seeded(c, c, seed);
                let (_, trace) = cross_attention_traced(&tokens(n, c, seed ^ 3), &tokens(m, c, seed ^ 4), &w).unwrap();
                prop_assert_eq!(trace.attention.shape(), &[n, m]);
                prop_assert!(trace.attention.data().iter().all(|&v| v >= 0.0));
                prop_assert!(row_sums_ok(&trace.attention));
            }
        }
    }
}
