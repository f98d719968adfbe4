//! Pixel-level evaluation: overlap scores from confusion counts, MAE, and
//! throughput.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse_context::median;
use crate::tensor::Tensor;

pub const DEFAULT_BIN_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    /// Counts after complementing both prediction and ground truth.
    pub fn complemented(&self) -> Self {
        Self {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

/// `num/den`, or 1 when the denominator is zero. A zero denominator means
/// every count it sums is zero, so there are no errors to penalise.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn check_extents(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and ground truth {:?} differ in extent",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Binarises `pred_prob` with `p ≥ threshold` and counts agreement classes
/// against a binary `gt` (any value ≥ 0.5 is foreground).
pub fn confusion_counts(pred_prob: &Tensor, gt: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    check_extents(pred_prob, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred_prob.data().iter().zip(gt.data()) {
        match (p >= threshold, g >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Which prediction MAE is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaeSource {
    /// The raw probabilities.
    #[default]
    Continuous,
    /// The thresholded prediction.
    Binarized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub iou: f64,
    pub dice: f64,
    pub sen: f64,
    pub spe: f64,
    /// Frames per second; `None` until throughput is measured.
    pub fps: Option<f64>,
    pub counts: ConfusionCounts,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "frame_id,mae,iou,dice,sen,spe";

    pub fn csv_row(&self, frame_id: &str) -> String {
        format!(
            "{frame_id},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.mae, self.iou, self.dice, self.sen, self.spe
        )
    }
}

pub fn frame_metrics(pred_prob: &Tensor, gt: &Tensor) -> Result<MetricReport> {
    frame_metrics_with(pred_prob, gt, DEFAULT_BIN_THRESHOLD, MaeSource::Continuous)
}

pub fn frame_metrics_with(
    pred_prob: &Tensor,
    gt: &Tensor,
    threshold: f64,
    mae_source: MaeSource,
) -> Result<MetricReport> {
    let counts = confusion_counts(pred_prob, gt, threshold)?;
    let mae_sum: f64 = pred_prob
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let p = match mae_source {
                MaeSource::Continuous => p,
                MaeSource::Binarized => f64::from(u8::from(p >= threshold)),
            };
            (p - g).abs()
        })
        .sum();
    Ok(MetricReport {
        mae: mae_sum / pred_prob.len() as f64,
        iou: counts.iou(),
        dice: counts.dice(),
        sen: counts.sensitivity(),
        spe: counts.specificity(),
        fps: None,
        counts,
    })
}

/// Unweighted per-frame mean of every score. Counts are summed; `fps` is
/// averaged over the frames that carry one.
pub fn dataset_metrics(per_frame: &[MetricReport]) -> Result<MetricReport> {
    if per_frame.is_empty() {
        return Err(Error::param("cannot aggregate an empty metric list"));
    }
    let n = per_frame.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
    let fps: Vec<f64> = per_frame.iter().filter_map(|r| r.fps).collect();
    let counts = per_frame.iter().fold(ConfusionCounts::default(), |acc, r| ConfusionCounts {
        tp: acc.tp + r.counts.tp,
        fp: acc.fp + r.counts.fp,
        tn: acc.tn + r.counts.tn,
        fn_: acc.fn_ + r.counts.fn_,
    });
    Ok(MetricReport {
        mae: mean(|r| r.mae),
        iou: mean(|r| r.iou),
        dice: mean(|r| r.dice),
        sen: mean(|r| r.sen),
        spe: mean(|r| r.spe),
        fps: (!fps.is_empty()).then(|| fps.iter().sum::<f64>() / fps.len() as f64),
        counts,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FpsReport {
    pub fps: f64,
    pub frames_per_pass: usize,
    pub median_pass_secs: f64,
    pub reps: usize,
    pub warmup: usize,
    /// Timing runs on the calling thread only.
    pub threads: usize,
}

/// Runs `forward` over every clip `warmup` times untimed, then `reps` timed
/// passes. `forward` returns the number of frames it produced for a clip.
/// Throughput is frames per pass divided by the median pass time.
pub fn measure_fps<C, E>(
    mut forward: impl FnMut(&C) -> Result<usize, E>,
    clips: &[C],
    warmup: usize,
    reps: usize,
) -> Result<FpsReport, E>
where
    E: From<Error>,
{
    if reps == 0 {
        return Err(Error::param("fps measurement needs at least one timed pass").into());
    }
    for _ in 0..warmup {
        for clip in clips {
            forward(clip)?;
        }
    }
    let mut times = Vec::with_capacity(reps);
    let mut frames = 0;
    for _ in 0..reps {
        let start = Instant::now();
        frames = 0;
        for clip in clips {
            frames += forward(clip)?;
        }
        times.push(start.elapsed().as_secs_f64());
    }
    let median_pass_secs = median(&mut times);
    let fps = frames as f64 / median_pass_secs.max(f64::MIN_POSITIVE);
    Ok(FpsReport {
        fps,
        frames_per_pass: frames,
        median_pass_secs,
        reps,
        warmup,
        threads: 1,
    })
}
