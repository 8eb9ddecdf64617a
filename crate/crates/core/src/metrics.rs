//! Road metrics in BEV space: precision/recall by exact threshold
//! enumeration, maximum F-measure and 11-point average precision.

use crate::error::{Error, Result};
use crate::kitti::GroundTruth;
use crate::warp::{sample_nearest, warp_plane, WarpTable};

/// Scores with binary labels; only `valid` entries are evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    pub scores: Vec<f64>,
    pub gt: Vec<bool>,
    pub valid: Vec<bool>,
}

impl ScoredMask {
    pub fn new(scores: Vec<f64>, gt: Vec<bool>, valid: Vec<bool>) -> Result<Self> {
        if scores.len() != gt.len() || scores.len() != valid.len() {
            return Err(Error::Shape(format!(
                "scores {}, gt {}, valid {}",
                scores.len(),
                gt.len(),
                valid.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::NonFinite(format!("score {s} outside [0, 1]")));
        }
        Ok(ScoredMask { scores, gt, valid })
    }

    pub fn all_valid(scores: Vec<f64>, gt: Vec<bool>) -> Result<Self> {
        let n = scores.len();
        Self::new(scores, gt, vec![true; n])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    /// Entries with score at least this are predicted road.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl CurvePoint {
    pub fn f_measure(&self) -> f64 {
        let s = self.precision + self.recall;
        if s == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / s
        }
    }
}

/// One point per unique score, in descending threshold order.
pub fn pr_curve(sm: &ScoredMask) -> Result<Vec<CurvePoint>> {
    let mut samples: Vec<(f64, bool)> = sm
        .scores
        .iter()
        .zip(&sm.gt)
        .zip(&sm.valid)
        .filter(|(_, &v)| v)
        .map(|((&s, &g), _)| (s, g))
        .collect();
    let positives = samples.iter().filter(|s| s.1).count();
    if positives == 0 {
        return Err(Error::Config("no positive ground-truth samples".into()));
    }
    samples.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < samples.len() {
        let threshold = samples[i].0;
        while i < samples.len() && samples[i].0 == threshold {
            if samples[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(CurvePoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
            tp,
            fp,
            fn_: positives - tp,
        });
    }
    Ok(curve)
}

/// Curve point of maximum F1; ties go to the lower threshold.
pub fn max_f(curve: &[CurvePoint]) -> Result<CurvePoint> {
    let mut best: Option<CurvePoint> = None;
    for p in curve {
        if best.map_or(true, |b| p.f_measure() >= b.f_measure()) {
            best = Some(*p);
        }
    }
    best.ok_or_else(|| Error::Config("empty precision/recall curve".into()))
}

/// 11-point interpolated AP: mean over recall levels `0, 0.1, ..., 1` of the
/// best precision at recall at least that level (0 if unreached).
pub fn average_precision(curve: &[CurvePoint]) -> f64 {
    (0..=10)
        .map(|k| {
            let level = k as f64 / 10.0;
            curve
                .iter()
                .filter(|p| p.recall >= level)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Percentages except `threshold`; counts at the MaxF point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub max_f: f64,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn evaluate(sm: &ScoredMask) -> Result<MetricsReport> {
    let curve = pr_curve(sm)?;
    let best = max_f(&curve)?;
    Ok(MetricsReport {
        max_f: 100.0 * best.f_measure(),
        ap: 100.0 * average_precision(&curve),
        precision: 100.0 * best.precision,
        recall: 100.0 * best.recall,
        threshold: best.threshold,
        tp: best.tp,
        fp: best.fp,
        fn_: best.fn_,
    })
}

/// Plain mean of each field across frames (counts are summed).
pub fn aggregate(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MetricsReport {
        max_f: mean(|r| r.max_f),
        ap: mean(|r| r.ap),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        threshold: mean(|r| r.threshold),
        tp: reports.iter().map(|r| r.tp).sum(),
        fp: reports.iter().map(|r| r.fp).sum(),
        fn_: reports.iter().map(|r| r.fn_).sum(),
    })
}

/// Moves a perspective score map and its ground truth into BEV through a
/// camera-to-BEV table: scores bilinearly, labels by nearest source pixel.
///
/// A BEV cell is evaluated only if every bilinear tap lands on valid ground
/// truth carrying the same label as the nearest pixel, so no cell mixes
/// classes.
pub fn bev_scored_mask(
    persp_scores: &[f64],
    gt: &GroundTruth,
    to_bev: &WarpTable,
) -> Result<ScoredMask> {
    let (w, h) = (gt.width, gt.height);
    if persp_scores.len() != w * h || (to_bev.source_width, to_bev.source_height) != (w, h) {
        return Err(Error::Shape(format!(
            "scores {} and table source {}x{} for a {w}x{h} ground truth",
            persp_scores.len(),
            to_bev.source_width,
            to_bev.source_height
        )));
    }
    let scores = warp_plane(to_bev, persp_scores, 0.0)?;
    let n = to_bev.target_len();
    let mut labels = vec![false; n];
    let mut valid = vec![false; n];
    for t in 0..n {
        let Some((taps, k)) = to_bev.taps(t) else { continue };
        let (u, v) = to_bev.coords[t];
        let label = sample_nearest(&gt.road, w, u, v);
        let ok = sample_nearest(&gt.valid, w, u, v)
            && taps[..k].iter().all(|&(i, _)| gt.valid[i] && gt.road[i] == label);
        labels[t] = label;
        valid[t] = ok;
    }
    ScoredMask::new(scores, labels, valid)
}

/// Metrics of a perspective score map, computed in BEV.
pub fn evaluate_in_bev(persp_scores: &[f64], gt: &GroundTruth, to_bev: &WarpTable) -> Result<MetricsReport> {
    evaluate(&bev_scored_mask(persp_scores, gt, to_bev)?)
}
