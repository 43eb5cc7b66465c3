//! Detection evaluation: per-frame streaming scores → non-maximum
//! suppression → TP/FA/FR matching, DET sweeps, FRR at a fixed false-accept
//! rate, localisation quality and frame-level state confusion.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::decoder::{viterbi_stream_with, Detection, StreamInit};
use crate::dnn::DnnParams;
use crate::e2e::{score_window_with, WindowInit};
use crate::error::{KwsError, Result};
use crate::features::FRAME_HOP_SEC;
use crate::hmm::{scaled_loglik, HmmParams};
use crate::sampling::{iou, SampledExample, Polarity, Source, Window};

/// How a detection is matched to a ground-truth keyword.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "min_iou")]
pub enum MatchCriterion {
    /// Any positive intersection.
    Overlap,
    /// IOU at least the given value.
    MinIou(f64),
}

impl Default for MatchCriterion {
    fn default() -> Self {
        MatchCriterion::Overlap
    }
}

impl MatchCriterion {
    fn matches(&self, det: &Window, gt: &Window) -> bool {
        match *self {
            MatchCriterion::Overlap => det.overlaps(gt),
            MatchCriterion::MinIou(t) => det.overlaps(gt) && iou(gt, det) >= t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Minimum separation of kept detections (seconds).
    pub nms_separation_sec: f64,
    pub criterion: MatchCriterion,
    /// FA/hr at which the headline FRR is read.
    pub operating_fa_per_hour: f64,
    pub num_thresholds: usize,
    pub delta: usize,
    pub stream_init: StreamInit,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nms_separation_sec: 1.0,
            criterion: MatchCriterion::Overlap,
            operating_fa_per_hour: 15.0,
            num_thresholds: 400,
            delta: 9,
            stream_init: StreamInit::FirstState,
        }
    }
}

impl EvalConfig {
    pub fn nms_frames(&self) -> usize {
        (self.nms_separation_sec / FRAME_HOP_SEC).round() as usize
    }
}

pub fn detection_window<T>(d: &Detection<T>) -> Window {
    Window {
        start: d.start_frame,
        end: d.end_frame + 1,
    }
}

/// Above-threshold detections reduced to score maxima whose end frames are
/// at least `min_separation` frames apart; returned in descending score
/// order (ties: earlier end frame first).
pub fn non_max_suppression(dets: &[Detection<f64>], threshold: f64, min_separation: usize) -> Vec<Detection<f64>> {
    let mut cand: Vec<&Detection<f64>> = dets.iter().filter(|d| d.score >= threshold).collect();
    cand.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.end_frame.cmp(&b.end_frame)));
    let mut kept: Vec<Detection<f64>> = Vec::new();
    for d in cand {
        if kept.iter().all(|k| k.end_frame.abs_diff(d.end_frame) >= min_separation) {
            kept.push(*d);
        }
    }
    kept
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fa: usize,
    pub fr: usize,
    /// `(detection window, ground truth)` for every true positive.
    pub tp_pairs: Vec<(Window, Window)>,
}

impl MatchResult {
    fn merge(&mut self, other: MatchResult) {
        self.tp += other.tp;
        self.fa += other.fa;
        self.fr += other.fr;
        self.tp_pairs.extend(other.tp_pairs);
    }
}

/// Matches detections (processed in descending score order) to ground
/// truths. A detection consumes the first unmatched ground truth it
/// matches; otherwise it is a false accept. Unmatched ground truths are
/// false rejects.
pub fn match_detections(dets: &[Detection<f64>], ground_truths: &[Window], criterion: MatchCriterion) -> MatchResult {
    let mut order: Vec<&Detection<f64>> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.end_frame.cmp(&b.end_frame)));
    let mut used = vec![false; ground_truths.len()];
    let mut out = MatchResult::default();
    for d in order {
        let w = detection_window(d);
        match ground_truths
            .iter()
            .enumerate()
            .find(|(i, g)| !used[*i] && criterion.matches(&w, g))
        {
            Some((i, g)) => {
                used[i] = true;
                out.tp += 1;
                out.tp_pairs.push((w, *g));
            }
            None => out.fa += 1,
        }
    }
    out.fr = used.iter().filter(|u| !**u).count();
    out
}

/// Streaming detections of one utterance together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUtterance {
    pub id: String,
    pub num_frames: usize,
    pub detections: Vec<Detection<f64>>,
    pub ground_truths: Vec<Window>,
}

/// Runs the network and the streaming decoder over every test utterance.
pub fn decode_corpus(
    params: &DnnParams<f64>,
    hmm: &HmmParams<f64>,
    corpus: &Corpus,
    delta: usize,
    init: StreamInit,
) -> Result<Vec<ScoredUtterance>> {
    corpus
        .utterances
        .par_iter()
        .map(|u| {
            let feats = u.stacked(delta)?;
            let out = params.forward_matrix(&feats.frames)?;
            let scores = scaled_loglik(&out, hmm)?;
            Ok(ScoredUtterance {
                id: u.id.clone(),
                num_frames: u.num_frames(),
                detections: viterbi_stream_with(scores.view(), hmm, init)?,
                ground_truths: u.keyword.into_iter().collect(),
            })
        })
        .collect()
}

fn match_all(scored: &[ScoredUtterance], threshold: f64, config: &EvalConfig) -> MatchResult {
    let mut total = MatchResult::default();
    for u in scored {
        let kept = non_max_suppression(&u.detections, threshold, config.nms_frames());
        total.merge(match_detections(&kept, &u.ground_truths, config.criterion));
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub fa_per_hour: f64,
    pub frr: f64,
}

/// Evenly spaced thresholds spanning the observed score range, with one
/// threshold below and one above every score.
pub fn threshold_grid(scored: &[ScoredUtterance], n: usize) -> Vec<f64> {
    let (lo, hi) = scored
        .iter()
        .flat_map(|u| u.detections.iter().map(|d| d.score))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s), b.max(s)));
    if !lo.is_finite() {
        return vec![0.0];
    }
    let span = (hi - lo).max(1e-9);
    let n = n.max(2);
    (0..n)
        .map(|i| lo - 1e-6 * span + (span * (1.0 + 2e-6)) * i as f64 / (n - 1) as f64)
        .collect()
}

/// DET points for the given thresholds (ascending threshold order).
pub fn det_curve(scored: &[ScoredUtterance], total_hours: f64, thresholds: &[f64], config: &EvalConfig) -> Result<Vec<DetPoint>> {
    if !(total_hours > 0.0) {
        return Err(KwsError::invalid("total_hours must be positive"));
    }
    let n_gt: usize = scored.iter().map(|u| u.ground_truths.len()).sum();
    if n_gt == 0 {
        return Err(KwsError::Undefined("FRR is undefined without ground-truth keywords".into()));
    }
    let mut ths = thresholds.to_vec();
    ths.sort_by(f64::total_cmp);
    Ok(ths
        .par_iter()
        .map(|&th| {
            let m = match_all(scored, th, config);
            DetPoint {
                threshold: th,
                fa_per_hour: m.fa as f64 / total_hours,
                frr: m.fr as f64 / (m.tp + m.fr) as f64,
            }
        })
        .collect())
}

/// Lower envelope of the DET points: for every FA/hr the best FRR reachable
/// at or below it. Sorted by ascending FA/hr.
fn envelope(points: &[DetPoint]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fa_per_hour, p.frr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut env: Vec<(f64, f64)> = Vec::new();
    for (fa, frr) in pts {
        let best = env.last().map_or(frr, |&(_, b)| b.min(frr));
        match env.last_mut() {
            Some(last) if last.0 == fa => last.1 = best,
            _ => env.push((fa, best)),
        }
    }
    env
}

/// FRR at `target` FA/hr, linearly interpolated between the bracketing
/// points of the DET envelope. Beyond the largest observed FA/hr the
/// envelope's last FRR is returned.
pub fn frr_at_fa(points: &[DetPoint], target: f64) -> Result<f64> {
    let env = envelope(points);
    let Some(&(fa0, frr0)) = env.first() else {
        return Err(KwsError::Undefined("empty DET curve".into()));
    };
    if target <= fa0 {
        return Ok(frr0);
    }
    for w in env.windows(2) {
        let ((fa_a, frr_a), (fa_b, frr_b)) = (w[0], w[1]);
        if target <= fa_b {
            let t = (target - fa_a) / (fa_b - fa_a);
            return Ok(frr_a + t * (frr_b - frr_a));
        }
    }
    Ok(env.last().expect("non-empty").1)
}

/// Smallest threshold whose FA/hr does not exceed `target`.
pub fn threshold_at_fa(points: &[DetPoint], target: f64) -> Option<f64> {
    points
        .iter()
        .filter(|p| p.fa_per_hour <= target)
        .map(|p| p.threshold)
        .min_by(f64::total_cmp)
}

/// `(mean IOU, mean of (|Δstart| + |Δend|)/2 in seconds)` over TP pairs.
pub fn localization_metrics(tp_pairs: &[(Window, Window)], frame_hop_sec: f64) -> Result<(f64, f64)> {
    if tp_pairs.is_empty() {
        return Err(KwsError::Undefined("no true positives to localise".into()));
    }
    let n = tp_pairs.len() as f64;
    let mean_iou = tp_pairs.iter().map(|(d, g)| iou(g, d)).sum::<f64>() / n;
    let mean_err = tp_pairs
        .iter()
        .map(|(d, g)| (d.start.abs_diff(g.start) + d.end.abs_diff(g.end)) as f64 / 2.0)
        .sum::<f64>()
        / n;
    Ok((mean_iou, mean_err * frame_hop_sec))
}

/// Frame-level confusion counts `(true, predicted)` and accuracy. Argmax
/// ties resolve to the lowest state index.
pub fn confusion_matrix(params: &DnnParams<f64>, corpus: &Corpus, delta: usize) -> Result<(Array2<u64>, f64)> {
    let c = params.num_classes();
    let parts = corpus
        .utterances
        .par_iter()
        .map(|u| {
            let feats = u.stacked(delta)?;
            let out = params.forward_matrix(&feats.frames)?;
            let mut m = Array2::<u64>::zeros((c, c));
            for (row, &y) in out.log_posteriors.rows().into_iter().zip(&u.labels) {
                if y as usize >= c {
                    return Err(KwsError::invalid(format!("{}: label {y} out of range", u.id)));
                }
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                m[[y as usize, best]] += 1;
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Array2::<u64>::zeros((c, c));
    for m in parts {
        total += &m;
    }
    let n: u64 = total.sum();
    let acc = if n == 0 { 0.0 } else { total.diag().sum() as f64 / n as f64 };
    Ok((total, acc))
}

/// Mean window score of the intact ground-truth windows and of the same
/// windows with their halves swapped at the midpoint.
pub fn swap_score_gap(params: &DnnParams<f64>, hmm: &HmmParams<f64>, corpus: &Corpus, delta: usize, init: WindowInit) -> Result<(f64, f64)> {
    let pairs = corpus
        .utterances
        .par_iter()
        .filter_map(|u| u.keyword.filter(|w| w.len() >= 2).map(|w| (u, w)))
        .map(|(u, w)| {
            let feats = u.stacked(delta)?;
            let scores = scaled_loglik(&params.forward_matrix(&feats.frames)?, hmm)?;
            let intact = SampledExample {
                window: w,
                polarity: Polarity::Positive,
                source: Source::Sampled,
            };
            let swapped = SampledExample {
                window: w,
                polarity: Polarity::Negative,
                source: Source::SwapAugmented { split: w.start + w.len() / 2 },
            };
            let a = score_window_with(intact.gather(&scores).view(), hmm, init).ok().map(|s| s.d);
            let b = score_window_with(swapped.gather(&scores).view(), hmm, init).ok().map(|s| s.d);
            Ok((a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |v: Vec<f64>| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    // an infeasible swapped window cannot trigger; it scores as -inf would,
    // so only windows where both halves are scorable are averaged
    let both: Vec<(f64, f64)> = pairs.into_iter().filter_map(|(a, b)| Some((a?, b?))).collect();
    Ok((mean(both.iter().map(|p| p.0).collect()), mean(both.iter().map(|p| p.1).collect())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub det_points: Vec<DetPoint>,
    pub operating_fa_per_hour: f64,
    pub frr_at_operating_fa: f64,
    pub operating_threshold: Option<f64>,
    pub mean_tp_iou: Option<f64>,
    pub mean_abs_start_end_error_sec: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub state_accuracy: f64,
    pub total_hours: f64,
    pub num_keywords: usize,
}

/// Full evaluation of one network on a labelled test corpus.
pub fn evaluate(params: &DnnParams<f64>, hmm: &HmmParams<f64>, corpus: &Corpus, config: &EvalConfig) -> Result<EvalReport> {
    let num_keywords = corpus.keyword_count();
    if num_keywords == 0 {
        return Err(KwsError::invalid("no keyword windows in manifest"));
    }
    let scored = decode_corpus(params, hmm, corpus, config.delta, config.stream_init)?;
    let total_hours = corpus.total_hours(FRAME_HOP_SEC);
    let thresholds = threshold_grid(&scored, config.num_thresholds);
    let det_points = det_curve(&scored, total_hours, &thresholds, config)?;
    let frr_at_operating_fa = frr_at_fa(&det_points, config.operating_fa_per_hour)?;
    let operating_threshold = threshold_at_fa(&det_points, config.operating_fa_per_hour);
    let (mean_tp_iou, mean_err) = match operating_threshold {
        Some(th) => match localization_metrics(&match_all(&scored, th, config).tp_pairs, FRAME_HOP_SEC) {
            Ok((a, b)) => (Some(a), Some(b)),
            Err(_) => (None, None),
        },
        None => (None, None),
    };
    let (confusion, state_accuracy) = confusion_matrix(params, corpus, config.delta)?;
    Ok(EvalReport {
        det_points,
        operating_fa_per_hour: config.operating_fa_per_hour,
        frr_at_operating_fa,
        operating_threshold,
        mean_tp_iou,
        mean_abs_start_end_error_sec: mean_err,
        confusion: confusion.rows().into_iter().map(|r| r.to_vec()).collect(),
        state_accuracy,
        total_hours,
        num_keywords,
    })
}

impl EvalReport {
    pub fn write_det_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "threshold,fa_per_hour,frr")?;
        for p in &self.det_points {
            writeln!(f, "{},{},{}", p.threshold, p.fa_per_hour, p.frr)?;
        }
        Ok(())
    }

    pub fn write_confusion_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for row in &self.confusion {
            let line: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(f, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Scalar metrics as JSON (the DET points and confusion live in CSVs).
    pub fn summary_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "operating_fa_per_hour": self.operating_fa_per_hour,
            "frr_at_operating_fa": self.frr_at_operating_fa,
            "operating_threshold": self.operating_threshold,
            "mean_tp_iou": self.mean_tp_iou,
            "mean_abs_start_end_error_sec": self.mean_abs_start_end_error_sec,
            "state_accuracy": self.state_accuracy,
            "total_hours": self.total_hours,
            "num_keywords": self.num_keywords,
            "num_det_points": self.det_points.len(),
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn write_all(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.write_det_csv(dir.join(format!("{prefix}det.csv")))?;
        self.write_confusion_csv(dir.join(format!("{prefix}confusion.csv")))?;
        fs::write(dir.join(format!("{prefix}summary.json")), self.summary_json()?)?;
        Ok(())
    }
}
