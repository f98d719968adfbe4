//! The end-to-end forward pass: backbone, per-frame refinement, sparse
//! reference contexts, cross-attention fusion, up-sampling and the
//! segmentation head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention_fuse, refine_per_frame, AttentionWeights, FeatureMap, TokenMatrix,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::layers::Conv2d;
use crate::sparse_context::{
    build_reference_context, coarse_decode, pool_and_refine, sparse_sample, CoarseMask,
    DEFAULT_THRESHOLD,
};
use crate::tensor::{avg_pool2d, sigmoid, upsample_bilinear, Tensor};
use crate::weights::NamedTensors;

/// Frames per clip used for training and inference.
pub const DEFAULT_CLIP_LEN: usize = 3;
/// Full-scale input resolution; desk-scale runs use 64×64.
pub const FULL_SCALE_SIZE: usize = 352;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Total backbone down-sampling factor; a power of two, at least 2.
    pub stride: usize,
    /// Token width `c` of the backbone output.
    pub channels: usize,
    /// Number of stacked self-attention layers.
    pub layers: usize,
    /// Attention projection width `d`; defaults to `channels`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proj_dim: Option<usize>,
    /// Frames per clip `T`.
    pub clip_len: usize,
    /// Coarse-mask selection threshold.
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            channels: 32,
            layers: 2,
            proj_dim: None,
            clip_len: DEFAULT_CLIP_LEN,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl ModelConfig {
    pub fn proj_dim(&self) -> usize {
        self.proj_dim.unwrap_or(self.channels)
    }

    pub fn stages(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    /// Output channels of each backbone stage, ending at `channels`.
    pub fn backbone_widths(&self) -> Vec<usize> {
        let n = self.stages();
        (0..n).map(|s| (self.channels >> (n - 1 - s)).max(4).min(self.channels)).collect()
    }

    /// Output channels of each up-sampling stage.
    pub fn decoder_widths(&self) -> Vec<usize> {
        (0..self.stages()).map(|s| (self.channels >> (s + 1)).max(4)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 2 || !self.stride.is_power_of_two() {
            return Err(Error::param(format!(
                "backbone stride must be a power of two ≥ 2, got {}",
                self.stride
            )));
        }
        if self.channels == 0 || self.layers == 0 || self.proj_dim() == 0 || self.clip_len == 0 {
            return Err(Error::param("channels, layers, proj_dim and clip_len must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::param(format!(
                "threshold must lie in [0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Stand-in CNN: `log2(stride)` stages of 3×3 conv, ReLU and 2×2 average
/// pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stages: Vec<Conv2d>,
}

impl Backbone {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut c_in = 1;
        let stages = cfg
            .backbone_widths()
            .into_iter()
            .map(|c_out| {
                let conv = Conv2d::init(c_in, c_out, 3, rng);
                c_in = c_out;
                conv
            })
            .collect();
        Self { stages }
    }

    pub fn stride(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn forward(&self, frame: &Image) -> Result<FeatureMap> {
        let stride = self.stride();
        if frame.width() % stride != 0 || frame.height() % stride != 0 {
            return Err(Error::param(format!(
                "{}×{} frame is not divisible by backbone stride {stride}",
                frame.width(),
                frame.height()
            )));
        }
        let mut x = frame.to_tensor();
        for conv in &self.stages {
            x = avg_pool2d(&conv.forward(&x)?.map(|v| v.max(0.0)), 2)?;
        }
        FeatureMap::new(x)
    }
}

pub fn backbone_forward(frame: &Image, backbone: &Backbone) -> Result<FeatureMap> {
    backbone.forward(frame)
}

/// `T` frames ending at the target. `frames[0]` is the target frame and
/// `frames[i]` lies `i` steps before it.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Image>,
    pub masks: Option<Vec<Image>>,
    pub frame_times: Vec<usize>,
}

impl VideoClip {
    pub fn new(frames: Vec<Image>, masks: Option<Vec<Image>>, frame_times: Vec<usize>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::param("a clip needs at least one frame"))?;
        let same = |img: &Image| img.width() == first.width() && img.height() == first.height();
        if !frames.iter().all(|f| same(f) && f.mode() == first.mode()) {
            return Err(Error::dim("clip frames must share extents and scan mode"));
        }
        if let Some(m) = &masks {
            if m.len() != frames.len() || !m.iter().all(same) {
                return Err(Error::dim("clip masks must match the frames one-to-one"));
            }
        }
        if frame_times.len() != frames.len() {
            return Err(Error::dim("one frame time per frame"));
        }
        Ok(Self {
            frames,
            masks,
            frame_times,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn target(&self) -> &Image {
        &self.frames[0]
    }
}

/// Source indices of a clip of length `len` ending at `t`; positions before
/// the start of the video repeat frame 0.
pub fn clip_indices(t: usize, len: usize) -> Vec<usize> {
    (0..len).map(|i| t.saturating_sub(i)).collect()
}

pub fn clip_sample(video: &[Image], t: usize, len: usize) -> Result<VideoClip> {
    clip_sample_with_masks(video, None, t, len)
}

pub fn clip_sample_with_masks(
    video: &[Image],
    masks: Option<&[Image]>,
    t: usize,
    len: usize,
) -> Result<VideoClip> {
    if video.is_empty() {
        return Err(Error::param("cannot sample a clip from an empty video"));
    }
    if len == 0 {
        return Err(Error::param("clip length must be at least 1"));
    }
    if t >= video.len() {
        return Err(Error::param(format!(
            "target index {t} is past the end of a {}-frame video",
            video.len()
        )));
    }
    if let Some(m) = masks {
        if m.len() != video.len() {
            return Err(Error::dim("one mask per video frame"));
        }
    }
    let idx = clip_indices(t, len);
    let frames = idx.iter().map(|&i| video[i].clone()).collect();
    let clip_masks = masks.map(|m| idx.iter().map(|&i| m[i].clone()).collect());
    VideoClip::new(frames, clip_masks, idx)
}

/// Every learned parameter of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct AstrWeights {
    pub backbone: Backbone,
    pub refiner: Vec<AttentionWeights>,
    /// 3×3 refinement conv per reference offset `1..T`.
    pub scb_refine: Vec<Conv2d>,
    /// 1×1 coarse-map decoder per reference offset `1..T`.
    pub scb_decoder: Vec<Conv2d>,
    pub fusion: AttentionWeights,
    /// 3×3 conv after each ×2 up-sampling.
    pub upsample: Vec<Conv2d>,
    /// 1×1 conv to the single output channel.
    pub head: Conv2d,
}

impl AstrWeights {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let d = cfg.proj_dim();
        let backbone = Backbone::init(cfg, &mut rng);
        let refiner = (0..cfg.layers).map(|_| AttentionWeights::init(c, d, &mut rng)).collect();
        let refs = cfg.clip_len - 1;
        let scb_refine = (0..refs).map(|_| Conv2d::init(c, c, 3, &mut rng)).collect();
        let scb_decoder = (0..refs).map(|_| Conv2d::init(c, 1, 1, &mut rng)).collect();
        let fusion = AttentionWeights::init(c, d, &mut rng);
        let mut c_in = c;
        let upsample = cfg
            .decoder_widths()
            .into_iter()
            .map(|c_out| {
                let conv = Conv2d::init(c_in, c_out, 3, &mut rng);
                c_in = c_out;
                conv
            })
            .collect();
        let head = Conv2d::init(c_in, 1, 1, &mut rng);
        Ok(Self {
            backbone,
            refiner,
            scb_refine,
            scb_decoder,
            fusion,
            upsample,
            head,
        })
    }

    pub fn to_records(&self) -> NamedTensors {
        let mut rec = NamedTensors::default();
        let conv = |rec: &mut NamedTensors, prefix: String, c: &Conv2d| {
            rec.push(format!("{prefix}.kernel"), c.kernel.clone());
            rec.push(format!("{prefix}.bias"), vector(&c.bias));
        };
        for (i, c) in self.backbone.stages.iter().enumerate() {
            conv(&mut rec, format!("backbone.{i}"), c);
        }
        for (i, a) in self.refiner.iter().enumerate() {
            push_attention(&mut rec, &format!("refiner.{i}"), a);
        }
        for (i, c) in self.scb_refine.iter().enumerate() {
            conv(&mut rec, format!("scb.{}.refine", i + 1), c);
        }
        for (i, c) in self.scb_decoder.iter().enumerate() {
            conv(&mut rec, format!("scb.{}.decoder", i + 1), c);
        }
        push_attention(&mut rec, "fusion", &self.fusion);
        for (i, c) in self.upsample.iter().enumerate() {
            conv(&mut rec, format!("upsample.{i}"), c);
        }
        conv(&mut rec, "head".into(), &self.head);
        rec
    }

    /// Rebuilds weights for `cfg` from named records; every expected record
    /// must be present with the shape `cfg` implies.
    pub fn from_records(cfg: &ModelConfig, rec: &NamedTensors) -> Result<Self> {
        let template = Self::init(cfg, 0)?;
        let expected = template.to_records();
        if rec.len() != expected.len() {
            return Err(Error::WeightFormat(format!(
                "expected {} records for this model, found {}",
                expected.len(),
                rec.len()
            )));
        }
        for (name, t) in expected.iter() {
            let got = rec
                .get(name)
                .ok_or_else(|| Error::WeightFormat(format!("missing record {name:?}")))?;
            if got.shape() != t.shape() {
                return Err(Error::WeightFormat(format!(
                    "record {name:?} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        let conv = |prefix: &str| -> Result<Conv2d> {
            Conv2d::new(
                rec.require(&format!("{prefix}.kernel"))?.clone(),
                rec.require(&format!("{prefix}.bias"))?.data().to_vec(),
            )
        };
        let n_backbone = template.backbone.stages.len();
        let refs = cfg.clip_len - 1;
        Ok(Self {
            backbone: Backbone {
                stages: (0..n_backbone).map(|i| conv(&format!("backbone.{i}"))).collect::<Result<_>>()?,
            },
            refiner: (0..cfg.layers)
                .map(|i| read_attention(rec, &format!("refiner.{i}")))
                .collect::<Result<_>>()?,
            scb_refine: (1..=refs).map(|i| conv(&format!("scb.{i}.refine"))).collect::<Result<_>>()?,
            scb_decoder: (1..=refs).map(|i| conv(&format!("scb.{i}.decoder"))).collect::<Result<_>>()?,
            fusion: read_attention(rec, "fusion")?,
            upsample: (0..template.upsample.len())
                .map(|i| conv(&format!("upsample.{i}")))
                .collect::<Result<_>>()?,
            head: conv("head")?,
        })
    }
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::from_parts(vec![v.len()], v.to_vec())
}

fn push_attention(rec: &mut NamedTensors, prefix: &str, a: &AttentionWeights) {
    rec.push(format!("{prefix}.wq"), a.wq.clone());
    rec.push(format!("{prefix}.wk"), a.wk.clone());
    rec.push(format!("{prefix}.wv"), a.wv.clone());
    rec.push(format!("{prefix}.wo"), a.wo.clone());
    rec.push(format!("{prefix}.mlp_w1"), a.mlp_w1.clone());
    rec.push(format!("{prefix}.mlp_b1"), vector(&a.mlp_b1));
    rec.push(format!("{prefix}.mlp_w2"), a.mlp_w2.clone());
    rec.push(format!("{prefix}.mlp_b2"), vector(&a.mlp_b2));
}

fn read_attention(rec: &NamedTensors, prefix: &str) -> Result<AttentionWeights> {
    let get = |s: &str| rec.require(&format!("{prefix}.{s}")).cloned();
    let w = AttentionWeights {
        wq: get("wq")?,
        wk: get("wk")?,
        wv: get("wv")?,
        wo: get("wo")?,
        mlp_w1: get("mlp_w1")?,
        mlp_b1: get("mlp_b1")?.into_data(),
        mlp_w2: get("mlp_w2")?,
        mlp_b2: get("mlp_b2")?.into_data(),
    };
    w.validate()?;
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    /// Lesion probability per input pixel, `h×w`.
    pub prob_mask: Tensor,
    /// One coarse mask per reference frame, nearest first.
    pub coarse_masks: Vec<CoarseMask>,
    /// Tokens kept from each reference frame, nearest first.
    pub token_counts: Vec<usize>,
    /// Refined target-frame tokens before fusion.
    pub per_frame_context: TokenMatrix,
}

/// A configured model with its weights.
#[derive(Clone, Debug)]
pub struct Astr {
    pub config: ModelConfig,
    pub weights: AstrWeights,
}

impl Astr {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = AstrWeights::init(&config, seed)?;
        Ok(Self { config, weights })
    }

    pub fn forward(&self, clip: &VideoClip) -> Result<SegmentationOutput> {
        astr_forward(clip, &self.weights, self.config.threshold)
    }
}

/// Runs the full pipeline on a clip. Clips shorter than the configured `T`
/// use the first SCB weight sets; longer clips are rejected. With a single
/// frame, fusion is skipped and the refined tokens go straight to the
/// decoder.
pub fn astr_forward(clip: &VideoClip, w: &AstrWeights, threshold: f64) -> Result<SegmentationOutput> {
    if clip.is_empty() {
        return Err(Error::param("empty clip"));
    }
    let refs = clip.len() - 1;
    if refs > w.scb_refine.len() {
        return Err(Error::param(format!(
            "clip has {refs} reference frames but the weights support {}",
            w.scb_refine.len()
        )));
    }
    let target = clip.target();
    let (height, width) = (target.height(), target.width());

    let f_t = w.backbone.forward(target)?;
    let (gh, gw) = (f_t.height(), f_t.width());
    let p = refine_per_frame(&f_t, &w.refiner)?;

    let mut parts = Vec::with_capacity(refs);
    let mut coarse_masks = Vec::with_capacity(refs);
    for offset in 1..=refs {
        let f_ref = w.backbone.forward(&clip.frames[offset])?;
        let refined = pool_and_refine(&f_ref, offset, &w.scb_refine[offset - 1])?;
        let mask = coarse_decode(&refined, &w.scb_decoder[offset - 1])?;
        parts.push(sparse_sample(&refined, &mask, threshold, offset)?);
        coarse_masks.push(mask);
    }
    let token_counts = parts.iter().map(|p| p.len()).collect();

    let y = if parts.is_empty() {
        p.clone()
    } else {
        let r = build_reference_context(&parts)?;
        cross_attention_fuse(&p, &r, &w.fusion)?
    };

    let mut x = FeatureMap::from_tokens(&y, gh, gw)?.into_tensor();
    for conv in &w.upsample {
        x = conv.forward(&upsample_bilinear(&x, 2)?)?.map(|v| v.max(0.0));
    }
    let logits = w.head.forward(&x)?;
    let (_, oh, ow) = logits.dims3()?;
    if (oh, ow) != (height, width) {
        return Err(Error::dim(format!(
            "decoder produced {oh}×{ow} for a {height}×{width} input"
        )));
    }
    let prob_mask = Tensor::from_parts(vec![oh, ow], logits.data().iter().map(|&v| sigmoid(v)).collect());
    Ok(SegmentationOutput {
        prob_mask,
        coarse_masks,
        token_counts,
        per_frame_context: p,
    })
}
