//! IOU-based window sampling for end-to-end training.

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

pub const POSITIVE_ATTEMPTS: usize = 100;
pub const NEGATIVE_ATTEMPTS: usize = 400;

/// Half-open frame interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(KwsError::invalid(format!("empty window [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn intersection(&self, other: &Window) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }

    pub fn overlaps(&self, other: &Window) -> bool {
        self.intersection(other) > 0
    }
}

/// Intersection over union of two frame intervals.
pub fn iou(g: &Window, w: &Window) -> f64 {
    let inter = g.intersection(w) as f64;
    let union = (g.end.max(w.end) - g.start.min(w.start)) as f64;
    inter / union
}

/// Length and keyword location of a labelled utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UtteranceSpan {
    pub num_frames: usize,
    pub keyword: Window,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Sampled,
    /// Ground-truth window with its halves swapped at `split`.
    SwapAugmented { split: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledExample {
    pub window: Window,
    pub polarity: Polarity,
    pub source: Source,
}

impl SampledExample {
    /// Utterance row indices making up this example, in presentation order.
    pub fn row_indices(&self) -> Vec<usize> {
        match self.source {
            Source::Sampled => (self.window.start..self.window.end).collect(),
            Source::SwapAugmented { split } => (split..self.window.end).chain(self.window.start..split).collect(),
        }
    }

    /// Materialises the example's rows from an utterance-level matrix.
    pub fn gather<T: Clone>(&self, rows: &Array2<T>) -> Array2<T> {
        let w = self.window;
        match self.source {
            Source::Sampled => rows.slice(s![w.start..w.end, ..]).to_owned(),
            Source::SwapAugmented { split } => concatenate(
                Axis(0),
                &[rows.slice(s![split..w.end, ..]), rows.slice(s![w.start..split, ..])],
            )
            .expect("column counts agree"),
        }
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }
}

/// One positive window with `iou >= iou_p`, jittering both edges of the
/// ground truth by at most the slack that keeps `iou >= iou_p` even when
/// both edges move outwards; falls back to the ground truth itself.
pub fn sample_positive<R: Rng + ?Sized>(utt: &UtteranceSpan, iou_p: f64, rng: &mut R) -> SampledExample {
    let g = utt.keyword;
    let slack = ((1.0 / iou_p - 1.0) * g.len() as f64 / 2.0).floor() as i64;
    let exact = SampledExample {
        window: g,
        polarity: Polarity::Positive,
        source: Source::Sampled,
    };
    if slack <= 0 {
        return exact;
    }
    for _ in 0..POSITIVE_ATTEMPTS {
        let s = g.start as i64 + rng.random_range(-slack..=slack);
        let e = g.end as i64 + rng.random_range(-slack..=slack);
        if s < 0 || e > utt.num_frames as i64 || s >= e {
            continue;
        }
        let w = Window {
            start: s as usize,
            end: e as usize,
        };
        if iou(&g, &w) >= iou_p {
            return SampledExample { window: w, ..exact };
        }
    }
    exact
}

/// Up to `max_count` windows with `iou <= iou_n`. Lengths are drawn from
/// `(0.5, 1.5] ×` the keyword length, starts uniformly over the utterance.
pub fn sample_negatives<R: Rng + ?Sized>(
    utt: &UtteranceSpan,
    iou_n: f64,
    max_count: usize,
    rng: &mut R,
) -> Vec<SampledExample> {
    let g = utt.keyword;
    let min_len = g.len() / 2 + 1;
    let max_len = (g.len() * 3 / 2).max(min_len);
    let mut out = Vec::new();
    if max_count == 0 || min_len > utt.num_frames {
        return out;
    }
    for _ in 0..NEGATIVE_ATTEMPTS {
        if out.len() == max_count {
            break;
        }
        let len = rng.random_range(min_len..=max_len);
        if len > utt.num_frames {
            continue;
        }
        let start = rng.random_range(0..=utt.num_frames - len);
        let w = Window { start, end: start + len };
        if iou(&g, &w) <= iou_n {
            out.push(SampledExample {
                window: w,
                polarity: Polarity::Negative,
                source: Source::Sampled,
            });
        }
    }
    out
}

/// `count` negatives made by splitting the keyword window near its middle
/// (±10% of its length) and swapping the two halves.
pub fn swap_augment<R: Rng + ?Sized>(utt: &UtteranceSpan, count: usize, rng: &mut R) -> Vec<SampledExample> {
    let g = utt.keyword;
    if g.len() < 2 {
        return Vec::new();
    }
    let mid = g.start + g.len() / 2;
    let jitter = (g.len() as f64 * 0.1).floor() as i64;
    (0..count)
        .map(|_| {
            let offset = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
            let split = (mid as i64 + offset).clamp(g.start as i64 + 1, g.end as i64 - 1) as usize;
            SampledExample {
                window: g,
                polarity: Polarity::Negative,
                source: Source::SwapAugmented { split },
            }
        })
        .collect()
}

/// Indices of the `n_hard` highest-loss entries (stable on ties) followed by
/// `n_rand` drawn uniformly without replacement from the rest.
pub fn select_hard_negatives<R: Rng + ?Sized>(losses: &[f64], n_hard: usize, n_rand: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let n_hard = n_hard.min(order.len());
    let rest = order.split_off(n_hard);
    let n_rand = n_rand.min(rest.len());
    order.extend(sample_indices(rng, rest.len(), n_rand).into_iter().map(|i| rest[i]));
    order
}

/// Hard-negative mining over `(example, loss)` pairs.
pub fn mine_hard_negatives<E: Clone, R: Rng + ?Sized>(
    scored: &[(E, f64)],
    n_hard: usize,
    n_rand: usize,
    rng: &mut R,
) -> Vec<(E, f64)> {
    let losses: Vec<f64> = scored.iter().map(|(_, l)| *l).collect();
    select_hard_negatives(&losses, n_hard, n_rand, rng)
        .into_iter()
        .map(|i| scored[i].clone())
        .collect()
}
