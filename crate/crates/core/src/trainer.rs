//! Two-phase optimisation of the state classifier: frame-level cross-entropy
//! pretraining, then end-to-end fine-tuning of the windowed detection score
//! with a hinge loss, IOU-sampled windows and hard-negative mining.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Utterance};
use crate::dnn::{DnnGrads, DnnParams, ForwardTrace, DEFAULT_LAYER_SIZES};
use crate::e2e::{hinge_loss, score_window_with, WindowInit};
use crate::error::{KwsError, Result};
use crate::features::stack_rows;
use crate::hmm::{scaled_loglik, HmmParams};
use crate::optim::{Adam, AdamConfig};
use crate::sampling::{
    sample_negatives, sample_positive, select_hard_negatives, swap_augment, Polarity, SampledExample,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Context half-width used to stack the base features.
    pub delta: usize,
    pub layer_sizes: Vec<usize>,

    pub ce_epochs: usize,
    pub ce_batch_frames: usize,
    pub ce_learning_rate: f64,

    pub e2e_epochs: usize,
    /// Adam step size of the end-to-end phase.
    pub learning_rate: f64,
    pub batch_utterances: usize,
    pub iou_p: f64,
    pub iou_n: f64,
    pub max_negatives: usize,
    pub swap_count: usize,
    pub n_hard: usize,
    pub n_rand: usize,
    pub window_init: WindowInit,

    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,

    /// Scale each utterance's base features by a gain drawn uniformly from
    /// `[gain_min, gain_max]` every epoch.
    pub gain_augment: bool,
    pub gain_min: f64,
    pub gain_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            delta: 9,
            layer_sizes: DEFAULT_LAYER_SIZES.to_vec(),
            ce_epochs: 8,
            ce_batch_frames: 256,
            ce_learning_rate: 1e-3,
            e2e_epochs: 100,
            learning_rate: 1e-3,
            batch_utterances: 48,
            iou_p: 0.95,
            iou_n: 0.5,
            max_negatives: 20,
            swap_count: 10,
            n_hard: 50,
            n_rand: 50,
            window_init: WindowInit::FirstState,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gain_augment: false,
            gain_min: 0.5,
            gain_max: 1.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KwsError::invalid(format!("train config: {m}")));
        if !(self.learning_rate > 0.0) || !(self.ce_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_utterances == 0 || self.ce_batch_frames == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.iou_p) || !(0.0..=1.0).contains(&self.iou_n) || self.iou_n >= self.iou_p {
            return bad("need 0 <= iou_n < iou_p <= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam hyperparameters out of range");
        }
        if self.layer_sizes.len() < 2 {
            return bad("layer_sizes needs at least two entries");
        }
        if self.gain_augment && !(0.0 < self.gain_min && self.gain_min <= self.gain_max) {
            return bad("need 0 < gain_min <= gain_max");
        }
        Ok(())
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ce,
    E2e,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Ce => "ce",
            Phase::E2e => "e2e",
        }
    }
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub pos_mean_score: Option<f64>,
    pub neg_mean_score: Option<f64>,
}

pub fn write_log_csv(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,batch,phase,loss,pos_mean_score,neg_mean_score")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.epoch,
            r.batch,
            r.phase.as_str(),
            r.loss,
            opt(r.pos_mean_score),
            opt(r.neg_mean_score)
        )?;
    }
    Ok(())
}

/// SplitMix64 over a base seed and a path of indices.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

fn epoch_gains(corpus: &Corpus, config: &TrainConfig, phase: Phase, epoch: usize) -> Vec<f64> {
    if !config.gain_augment {
        return vec![1.0; corpus.len()];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[phase as u64, 0xa11, epoch as u64]));
    (0..corpus.len())
        .map(|_| rng.random_range(config.gain_min..=config.gain_max))
        .collect()
}

fn check_labels(corpus: &Corpus, num_classes: usize) -> Result<()> {
    if corpus.is_empty() || corpus.total_frames() == 0 {
        return Err(KwsError::EmptyInput("training corpus has no frames".into()));
    }
    for u in &corpus.utterances {
        if u.labels.len() != u.num_frames() {
            return Err(KwsError::invalid(format!("{}: label count differs from frame count", u.id)));
        }
        if let Some(&bad) = u.labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(KwsError::invalid(format!("{}: label {bad} outside [0, {num_classes})", u.id)));
        }
    }
    Ok(())
}

/// Mean frame cross-entropy `-log p(y|x)` and its gradient w.r.t. the log
/// posteriors (`-1/B` at the label, zero elsewhere).
pub fn cross_entropy(log_post: &Array2<f64>, labels: &[u16]) -> (f64, Array2<f64>) {
    let b = labels.len() as f64;
    let mut grad = Array2::zeros(log_post.raw_dim());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= log_post[[i, y as usize]];
        grad[[i, y as usize]] = -1.0 / b;
    }
    (loss / b, grad)
}

/// Cross-entropy pretraining with mini-batches of shuffled frames.
/// Returns the trained network and one log row per epoch (mean batch loss).
pub fn pretrain_ce(corpus: &Corpus, init: DnnParams<f64>, config: &TrainConfig) -> Result<(DnnParams<f64>, Vec<LogRow>)> {
    config.validate()?;
    init.validate()?;
    check_labels(corpus, init.num_classes())?;
    let mut params = init;
    let mut opt = Adam::new(config.adam(config.ce_learning_rate), &params);
    let index: Vec<(u32, u32)> = corpus
        .utterances
        .iter()
        .enumerate()
        .flat_map(|(u, utt)| (0..utt.num_frames() as u32).map(move |t| (u as u32, t)))
        .collect();
    let mut log = Vec::new();
    for epoch in 0..config.ce_epochs {
        let gains = epoch_gains(corpus, config, Phase::Ce, epoch);
        let mut order = index.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xce, epoch as u64])));
        let (mut loss_sum, mut n) = (0.0, 0usize);
        let mut batches = 0;
        for chunk in order.chunks(config.ce_batch_frames) {
            let (x, y) = gather_frames(corpus, chunk, config.delta, &gains);
            let trace = params.forward_trace(&x)?;
            let (loss, grad) = cross_entropy(&trace.output.log_posteriors, &y);
            let g = params.backward_trace(&trace, &grad)?;
            opt.step(&mut params, &g)?;
            loss_sum += loss * chunk.len() as f64;
            n += chunk.len();
            batches += 1;
        }
        log.push(LogRow {
            epoch,
            batch: batches,
            phase: Phase::Ce,
            loss: loss_sum / n as f64,
            pos_mean_score: None,
            neg_mean_score: None,
        });
    }
    Ok((params, log))
}

fn gather_frames(corpus: &Corpus, chunk: &[(u32, u32)], delta: usize, gains: &[f64]) -> (Array2<f64>, Vec<u16>) {
    let dim = corpus.utterances[chunk[0].0 as usize].base.ncols() * (2 * delta + 1);
    let mut x = Array2::zeros((chunk.len(), dim));
    let mut y = Vec::with_capacity(chunk.len());
    for (i, &(u, t)) in chunk.iter().enumerate() {
        let utt = &corpus.utterances[u as usize];
        let row = stack_rows(&utt.base, delta, &[t as usize]);
        let g = gains[u as usize];
        Zip::from(x.row_mut(i)).and(row.row(0)).for_each(|d, &s| *d = s * g);
        y.push(utt.labels[t as usize]);
    }
    (x, y)
}

/// A scored training window.
#[derive(Debug, Clone)]
pub struct ScoredWindow {
    pub example: SampledExample,
    pub d: f64,
    pub loss: f64,
    pub dloss_dd: f64,
    /// Absolute HMM state per window frame.
    pub path: Vec<usize>,
}

struct UttBatchItem {
    trace: ForwardTrace<f64>,
    positive: Option<ScoredWindow>,
    negatives: Vec<ScoredWindow>,
    skipped: usize,
}

/// Aggregate statistics of one end-to-end batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub positives: usize,
    /// Negatives scored before mining.
    pub negatives: usize,
    /// Negatives kept by mining.
    pub selected: usize,
    pub swap_negatives: usize,
    pub skipped: usize,
    pub pos_mean_score: f64,
    pub neg_mean_score: f64,
}

fn score_example(
    scores: &Array2<f64>,
    hmm: &HmmParams<f64>,
    ex: SampledExample,
    init: WindowInit,
) -> Result<Option<ScoredWindow>> {
    let window = ex.gather(scores);
    match score_window_with(window.view(), hmm, init) {
        Ok(ws) => {
            let (loss, dloss_dd) = hinge_loss(ws.d, ex.polarity == Polarity::Positive);
            Ok(Some(ScoredWindow {
                example: ex,
                d: ws.d,
                loss,
                dloss_dd,
                path: ws.argmax_path,
            }))
        }
        Err(KwsError::InfeasibleWindow { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn prepare_utterance(
    params: &DnnParams<f64>,
    hmm: &HmmParams<f64>,
    utt: &Utterance,
    gain: f64,
    config: &TrainConfig,
    seed: u64,
) -> Result<UttBatchItem> {
    let span = utt
        .span()
        .ok_or_else(|| KwsError::invalid(format!("{}: end-to-end training needs a keyword window", utt.id)))?;
    let mut feats = utt.stacked(config.delta)?;
    if gain != 1.0 {
        feats.frames.mapv_inplace(|v| v * gain);
    }
    let trace = params.forward_trace(&feats.frames)?;
    let scores = scaled_loglik(&trace.output, hmm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = sample_positive(&span, config.iou_p, &mut rng);
    let mut negs = sample_negatives(&span, config.iou_n, config.max_negatives, &mut rng);
    negs.extend(swap_augment(&span, config.swap_count, &mut rng));

    let mut skipped = 0;
    let positive = score_example(&scores, hmm, pos, config.window_init)?;
    skipped += positive.is_none() as usize;
    let mut negatives = Vec::with_capacity(negs.len());
    for ex in negs {
        match score_example(&scores, hmm, ex, config.window_init)? {
            Some(sw) => negatives.push(sw),
            None => skipped += 1,
        }
    }
    Ok(UttBatchItem {
        trace,
        positive,
        negatives,
        skipped,
    })
}

fn accumulate(grad: &mut Array2<f64>, sw: &ScoredWindow, weight: f64) {
    if sw.dloss_dd == 0.0 {
        return;
    }
    let rows = sw.example.row_indices();
    let g = weight * sw.dloss_dd / rows.len() as f64;
    for (&row, &state) in rows.iter().zip(&sw.path) {
        grad[[row, state]] += g;
    }
}

/// Loss gradient for one end-to-end mini-batch over `utts`.
///
/// Each utterance contributes one positive, up to `max_negatives` sampled
/// negatives and `swap_count` swap negatives. Negatives are mined down to
/// `n_hard + n_rand`; the loss is the sum of active hinges over positives and
/// mined negatives divided by their count.
pub fn e2e_batch_gradient(
    params: &DnnParams<f64>,
    hmm: &HmmParams<f64>,
    utts: &[(&Utterance, f64)],
    config: &TrainConfig,
    batch_seed: u64,
) -> Result<(DnnGrads<f64>, BatchStats)> {
    let items = utts
        .par_iter()
        .enumerate()
        .map(|(i, (u, gain))| prepare_utterance(params, hmm, u, *gain, config, derive_seed(batch_seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;

    let mut neg_index = Vec::new();
    let mut neg_losses = Vec::new();
    for (u, item) in items.iter().enumerate() {
        for (j, sw) in item.negatives.iter().enumerate() {
            neg_index.push((u, j));
            neg_losses.push(sw.loss);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(batch_seed, &[0x4d1e]));
    let selected = select_hard_negatives(&neg_losses, config.n_hard, config.n_rand, &mut rng);
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); items.len()];
    for &k in &selected {
        let (u, j) = neg_index[k];
        chosen[u].push(j);
    }

    let positives: Vec<&ScoredWindow> = items.iter().filter_map(|i| i.positive.as_ref()).collect();
    let denom = (positives.len() + selected.len()).max(1) as f64;
    let loss = (positives.iter().map(|p| p.loss).sum::<f64>() + selected.iter().map(|&k| neg_losses[k]).sum::<f64>()) / denom;
    let all_negs: Vec<&ScoredWindow> = items.iter().flat_map(|i| i.negatives.iter()).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let stats = BatchStats {
        loss,
        positives: positives.len(),
        negatives: all_negs.len(),
        selected: selected.len(),
        swap_negatives: all_negs
            .iter()
            .filter(|n| matches!(n.example.source, crate::sampling::Source::SwapAugmented { .. }))
            .count(),
        skipped: items.iter().map(|i| i.skipped).sum(),
        pos_mean_score: mean(&positives.iter().map(|p| p.d).collect::<Vec<_>>()),
        neg_mean_score: mean(&all_negs.iter().map(|n| n.d).collect::<Vec<_>>()),
    };

    let weight = 1.0 / denom;
    let per_utt = items
        .par_iter()
        .zip(chosen.par_iter())
        .map(|(item, chosen)| {
            let mut g = Array2::zeros(item.trace.output.log_posteriors.raw_dim());
            if let Some(p) = &item.positive {
                accumulate(&mut g, p, weight);
            }
            for &j in chosen {
                accumulate(&mut g, &item.negatives[j], weight);
            }
            if g.iter().all(|v| *v == 0.0) {
                Ok(None)
            } else {
                params.backward_trace(&item.trace, &g).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    // fixed reduction order keeps the sum independent of thread count
    let mut total = DnnGrads::zeros_like(params);
    for g in per_utt.into_iter().flatten() {
        total.add_assign(&g);
    }
    Ok((total, stats))
}

/// End-to-end fine-tuning starting from `init` (normally the CE model).
/// Returns the final network and one log row per batch.
pub fn train_e2e(
    corpus: &Corpus,
    init: DnnParams<f64>,
    hmm: &HmmParams<f64>,
    config: &TrainConfig,
) -> Result<(DnnParams<f64>, Vec<LogRow>)> {
    config.validate()?;
    init.validate()?;
    hmm.validate()?;
    check_labels(corpus, init.num_classes())?;
    if hmm.num_states() != init.num_classes() {
        return Err(KwsError::shape(format!(
            "network has {} outputs, HMM has {} states",
            init.num_classes(),
            hmm.num_states()
        )));
    }
    let usable: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.utterances[i].keyword.is_some()).collect();
    if usable.is_empty() {
        return Err(KwsError::EmptyInput("no keyword windows in training corpus".into()));
    }
    let mut params = init;
    let mut opt = Adam::new(config.adam(config.learning_rate), &params);
    let mut log = Vec::new();
    for epoch in 0..config.e2e_epochs {
        let gains = epoch_gains(corpus, config, Phase::E2e, epoch);
        let mut order = usable.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xe2e, epoch as u64])));
        for (b, chunk) in order.chunks(config.batch_utterances).enumerate() {
            let utts: Vec<(&Utterance, f64)> = chunk.iter().map(|&i| (&corpus.utterances[i], gains[i])).collect();
            let seed = derive_seed(config.seed, &[0xba7c, epoch as u64, b as u64]);
            let (g, stats) = e2e_batch_gradient(&params, hmm, &utts, config, seed)?;
            opt.step(&mut params, &g)?;
            log.push(LogRow {
                epoch,
                batch: b,
                phase: Phase::E2e,
                loss: stats.loss,
                pos_mean_score: Some(stats.pos_mean_score),
                neg_mean_score: Some(stats.neg_mean_score),
            });
        }
    }
    Ok((params, log))
}
