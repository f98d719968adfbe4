//! Fast invariant suite behind `astr selfcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::asma::{roundtrip_error, PolarGeometry};
use crate::attention::{cross_attention_traced, self_attention_traced, AttentionWeights, TokenMatrix};
use crate::config::Config;
use crate::image::ScanMode;
use crate::losses::{loss_gradient, combined_loss};
use crate::metrics::ConfusionCounts;
use crate::model::{clip_sample, Astr, AstrWeights, ModelConfig};
use crate::sparse_context::{fusion_cost, pool_window};
use crate::synthetic::{gen_synthetic, smooth_phantom, SyntheticSpec};
use crate::tensor::{avg_pool2d, Tensor};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn random_tokens(n: usize, c: usize, rng: &mut ChaCha8Rng) -> TokenMatrix {
    let data = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
    TokenMatrix::new(Tensor::from_vec(&[n, c], data).expect("finite")).expect("rank 2")
}

fn attention_rows() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let w = AttentionWeights::init(8, 4, &mut rng);
        let p = random_tokens(rng.random_range(1..12), 8, &mut rng);
        let r = random_tokens(rng.random_range(1..12), 8, &mut rng);
        let (_, sa) = self_attention_traced(&p, &w).map_err(|e| e.to_string())?;
        let (_, ca) = cross_attention_traced(&p, &r, &w).map_err(|e| e.to_string())?;
        for a in [&sa.attention, &ca.attention] {
            let (rows, _) = a.dims2().map_err(|e| e.to_string())?;
            for i in 0..rows {
                worst = worst.max((a.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-12, format!("max |row sum − 1| = {worst:.2e}"))
}

fn asma_round_trip() -> Outcome {
    let img = smooth_phantom(96, 96, 24.0, 3, ScanMode::Convex);
    let geom = PolarGeometry::for_canvas(96, 96).with_grid(192, 192);
    let err = roundtrip_error(&img, &geom).map_err(|e| e.to_string())?;
    ensure(err <= 2.0 / 255.0, format!("interior MAE {:.3}/255", err * 255.0))
}

fn complexity_formula() -> Outcome {
    let cost = fusion_cost(11, 11, 32, 3, 30).map_err(|e| e.to_string())?;
    ensure(
        cost.dense_macs == 1_405_536 && cost.sparse_macs == 116_160,
        format!("dense {} sparse {}", cost.dense_macs, cost.sparse_macs),
    )
}

fn pooling_schedule() -> Outcome {
    let x = Tensor::zeros(&[1, 13, 9]);
    for i in 1..=3 {
        let k = pool_window(i).map_err(|e| e.to_string())?;
        let p = avg_pool2d(&x, k).map_err(|e| e.to_string())?;
        if k != 1 << i || p.shape()[1] != 13usize.div_ceil(k) || p.shape()[2] != 9usize.div_ceil(k) {
            return Err(format!("offset {i}: window {k}, pooled {:?}", p.shape()));
        }
    }
    Ok("K = 2^i, extents ⌈h/K⌉".into())
}

fn gradient_matches_differences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 36;
    let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let gt: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
    let p = Tensor::from_vec(&[6, 6], pred.clone()).map_err(|e| e.to_string())?;
    let g = Tensor::from_vec(&[6, 6], gt).map_err(|e| e.to_string())?;
    let grad = loss_gradient(&p, &g).map_err(|e| e.to_string())?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut plus = pred.clone();
        let mut minus = pred.clone();
        plus[i] += h;
        minus[i] -= h;
        let lp = combined_loss(&Tensor::from_vec(&[6, 6], plus).unwrap(), &g).unwrap();
        let lm = combined_loss(&Tensor::from_vec(&[6, 6], minus).unwrap(), &g).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let a = grad.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
    }
    ensure(worst <= 1e-4, format!("max relative error {worst:.2e}"))
}

fn dice_iou_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let c = ConfusionCounts {
            tp: rng.random_range(0..50),
            fp: rng.random_range(0..50),
            tn: rng.random_range(0..50),
            fn_: rng.random_range(0..50),
        };
        let iou = c.iou();
        if (c.dice() - 2.0 * iou / (1.0 + iou)).abs() > 1e-12 {
            return Err(format!("{c:?}"));
        }
    }
    Ok("1000 tuples".into())
}

fn forward_is_deterministic() -> Outcome {
    let spec = SyntheticSpec::default();
    let (frames, _) = gen_synthetic(&spec, 1).map_err(|e| e.to_string())?;
    let clip = clip_sample(&frames, 2, 3).map_err(|e| e.to_string())?;
    let model = Astr::new(ModelConfig::default(), 4).map_err(|e| e.to_string())?;
    let a = model.forward(&clip).map_err(|e| e.to_string())?;
    let b = model.forward(&clip).map_err(|e| e.to_string())?;
    let shape = a.prob_mask.shape().to_vec();
    ensure(
        a.prob_mask == b.prob_mask && shape == [64, 64],
        format!("mask {shape:?}, tokens {:?}", a.token_counts),
    )
}

fn fallback_keeps_one_token() -> Outcome {
    let (frames, _) = gen_synthetic(&SyntheticSpec::default(), 2).map_err(|e| e.to_string())?;
    let clip = clip_sample(&frames, 2, 3).map_err(|e| e.to_string())?;
    let cfg = ModelConfig::default();
    let mut weights = AstrWeights::init(&cfg, 6).map_err(|e| e.to_string())?;
    for dec in &mut weights.scb_decoder {
        dec.bias = vec![-100.0];
    }
    let out = crate::model::astr_forward(&clip, &weights, cfg.threshold).map_err(|e| e.to_string())?;
    ensure(out.token_counts.iter().all(|&n| n == 1), format!("token counts {:?}", out.token_counts))
}

fn config_round_trip() -> Outcome {
    let mut c = Config::default();
    c.seed = 1234;
    c.scb.threshold = 0.625;
    let back = Config::parse(&c.emit()).map_err(|e| e.to_string())?;
    ensure(back == c, "emit → parse".into())
}

fn weights_round_trip() -> Outcome {
    let cfg = ModelConfig::default();
    let w = AstrWeights::init(&cfg, 8).map_err(|e| e.to_string())?;
    let rec = w.to_records();
    let decoded = crate::weights::NamedTensors::decode(&rec.encode()).map_err(|e| e.to_string())?;
    let back = AstrWeights::from_records(&cfg, &decoded).map_err(|e| e.to_string())?;
    ensure(back.to_records() == rec, format!("{} records", rec.len()))
}

/// Runs every check, in a fixed order.
pub fn run_selfcheck() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> Outcome); 10] = [
        ("attention rows are stochastic", attention_rows),
        ("scan conversion round trip", asma_round_trip),
        ("fusion cost formulas", complexity_formula),
        ("pooling schedule", pooling_schedule),
        ("loss gradient vs finite differences", gradient_matches_differences),
        ("dice/iou identity", dice_iou_identity),
        ("forward determinism", forward_is_deterministic),
        ("empty coarse mask fallback", fallback_keeps_one_token),
        ("config round trip", config_round_trip),
        ("weight file round trip", weights_round_trip),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        for r in super::run_selfcheck() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
