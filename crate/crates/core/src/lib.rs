//! Ultrasound video lesion segmentation at desk scale.
//!
//! The crate covers four pieces of a temporal segmentation pipeline:
//!
//! * [`asma`] converts frames between convex-array (fan) and linear-array
//!   (rectangle) scan geometries and balances mixed datasets;
//! * [`attention`] and [`sparse_context`] refine each frame with
//!   self-attention and fuse reference frames through a small set of tokens
//!   picked by a coarse lesion mask;
//! * [`losses`] and [`metrics`] supervise and score the predicted masks;
//! * [`model`] wires a small CNN backbone, the attention stages and a decoder
//!   into one deterministic forward pass.
//!
//! Everything runs on the dense [`Tensor`] type in [`tensor`], in `f64`,
//! on one thread.
//!
//! ```
//! use astr::{clip_sample, gen_synthetic, Astr, ModelConfig, SyntheticSpec};
//!
//! let (frames, _masks) = gen_synthetic(&SyntheticSpec::default(), 7)?;
//! let clip = clip_sample(&frames, 2, 3)?;
//! let model = Astr::new(ModelConfig::default(), 7)?;
//! let out = model.forward(&clip)?;
//! assert_eq!(out.prob_mask.shape(), &[64, 64]);
//! # Ok::<(), astr::Error>(())
//! ```

pub mod asma;
pub mod attention;
pub mod config;
pub mod error;
pub mod image;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod selfcheck;
pub mod sparse_context;
pub mod synthetic;
pub mod tensor;
pub mod weights;

pub use asma::{balance_dataset, convex_to_linear, linear_to_convex, roundtrip_error, PolarGeometry};
pub use attention::{
    cross_attention_fuse, refine_per_frame, self_attention_layer, AttentionWeights, FeatureMap, TokenMatrix,
};
pub use config::Config;
pub use error::{Error, Result};
pub use image::{Image, ScanMode};
pub use losses::{loss_gradient, total_loss, LossReport};
pub use metrics::{dataset_metrics, frame_metrics, measure_fps, MetricReport};
pub use model::{astr_forward, clip_sample, Astr, AstrWeights, ModelConfig, SegmentationOutput, VideoClip};
pub use sparse_context::{fusion_cost, sparse_sample, FusionCost, SparseContext};
pub use synthetic::{gen_synthetic, SyntheticSpec};
pub use tensor::Tensor;

// The guide's code listings compile and run as doc-tests, one module per
// chapter so a failure points at its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/scan-conversion.md")]
    mod scan_conversion {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/sparse-context.md")]
    mod sparse_context {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
