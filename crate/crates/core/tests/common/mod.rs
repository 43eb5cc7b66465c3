#![allow(dead_code)]

use kws_core::corpus::Utterance;
use kws_core::dnn::DnnParams;
use kws_core::e2e::WindowInit;
use kws_core::sampling::Window;
use kws_core::hmm::{HmmParams, Topology};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random legal Bakis HMM with `c` states; the keyword chain is a random
/// contiguous block, the rest are fillers.
pub fn random_hmm(c: usize, rng: &mut ChaCha8Rng) -> HmmParams<f64> {
    let first = rng.random_range(0..c);
    let last = rng.random_range(first..c);
    let topology = Topology::new(c, first, last).unwrap();
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let log_priors = raw.iter().map(|p| (p / total).ln()).collect();
    let mut log_self = Vec::with_capacity(c);
    let mut log_forward = Vec::with_capacity(c - 1);
    for i in 0..c {
        let p_self: f64 = rng.random_range(0.05..0.95);
        if i + 1 < c {
            // some mass may leak to non-Bakis successors
            let p_fwd = (1.0 - p_self) * rng.random_range(0.3..1.0);
            log_forward.push(p_fwd.ln());
        }
        log_self.push(p_self.ln());
    }
    let log_entry = if rng.random_bool(0.2) {
        f64::NEG_INFINITY
    } else {
        rng.random_range(0.01f64..0.5).ln()
    };
    let hmm = HmmParams {
        topology,
        log_priors,
        log_self,
        log_forward,
        log_entry,
        log_class_freq: vec![-(c as f64).ln(); c],
    };
    hmm.validate().unwrap();
    hmm
}

pub fn random_scores(t: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((t, c), |_| rng.random_range(-4.0..1.0))
}

/// Best legal path found by exhaustive enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct BrutePath {
    pub log_prob: f64,
    pub start: usize,
    pub path: Vec<usize>,
}

/// Every chain-index sequence of length `len` that starts at `k0`, moves by
/// 0 or +1 per frame, and ends at `k_len - 1`.
fn chain_paths(k0: usize, len: usize, k_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << (len - 1)) {
        let mut k = k0;
        let mut p = vec![k];
        let mut ok = true;
        for step in 0..len - 1 {
            if mask >> step & 1 == 1 {
                k += 1;
                if k >= k_len {
                    ok = false;
                    break;
                }
            }
            p.push(k);
        }
        if ok && k == k_len - 1 {
            out.push(p);
        }
    }
    out
}

fn path_log_prob(hmm: &HmmParams<f64>, scores: &Array2<f64>, t0: usize, ks: &[usize]) -> f64 {
    let first = hmm.topology.first_kw;
    let mut lp = 0.0;
    for (i, &k) in ks.iter().enumerate() {
        lp += scores[[t0 + i, first + k]];
        if i > 0 {
            lp += if k == ks[i - 1] {
                hmm.log_self[first + k]
            } else {
                hmm.log_forward[first + k - 1]
            };
        }
    }
    lp
}

fn consider(best: &mut Option<BrutePath>, lp: f64, start: usize, path: Vec<usize>) {
    if lp.is_finite() && best.as_ref().is_none_or(|b| lp > b.log_prob) {
        *best = Some(BrutePath { log_prob: lp, start, path });
    }
}

/// Exhaustive best path for a whole window ending in the last keyword state.
pub fn brute_window(scores: &Array2<f64>, hmm: &HmmParams<f64>, init: WindowInit) -> Option<BrutePath> {
    let first = hmm.topology.first_kw;
    let k_len = hmm.topology.chain_len();
    let t = scores.nrows();
    let mut best = None;
    for k0 in 0..k_len {
        let base = match init {
            WindowInit::FirstState if k0 == 0 => 0.0,
            WindowInit::FirstState => continue,
            WindowInit::Priors => hmm.log_priors[first + k0],
        };
        for ks in chain_paths(k0, t, k_len) {
            let lp = base + path_log_prob(hmm, scores, 0, &ks);
            consider(&mut best, lp, 0, ks.iter().map(|k| first + k).collect());
        }
    }
    best
}

/// Exhaustive best streaming path ending in the last keyword state at frame
/// `end`. A path starts at frame 0 (from the prior, or the entry arc into the
/// first keyword state) or at any later frame through the entry arc.
pub fn brute_stream(scores: &Array2<f64>, hmm: &HmmParams<f64>, end: usize, first_state_only: bool) -> Option<BrutePath> {
    let first = hmm.topology.first_kw;
    let k_len = hmm.topology.chain_len();
    let mut best = None;
    for ts in 0..=end {
        for k0 in 0..k_len {
            let base = if ts == 0 {
                if k0 == 0 {
                    hmm.log_priors[first].max(hmm.log_entry)
                } else if first_state_only {
                    continue;
                } else {
                    hmm.log_priors[first + k0]
                }
            } else if k0 == 0 {
                hmm.log_entry
            } else {
                continue;
            };
            for ks in chain_paths(k0, end - ts + 1, k_len) {
                let lp = base + path_log_prob(hmm, scores, ts, &ks);
                consider(&mut best, lp, ts, ks.iter().map(|k| first + k).collect());
            }
        }
    }
    best
}

/// `(numeric - analytic)` relative error in the 2-norm.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Saves and reloads a checkpoint, an HMM, a feature matrix, a label file,
/// a manifest and a WAV file; reports the first mismatch.
pub fn round_trip_all(dir: &std::path::Path, seed: u64) -> Result<(), String> {
    use kws_core::corpus::{read_labels, read_manifest, write_labels, write_manifest, ManifestEntry};
    use kws_core::dnn::{init_params, load_checkpoint, save_checkpoint};
    use kws_core::features::{read_features, read_wav, write_features, write_wav, AudioBuffer};

    let mut r = rng(seed);
    let net = init_params::<f32>(&[7, 5, 4], seed).map_err(|e| e.to_string())?;
    let path = dir.join("net.kwse");
    save_checkpoint(&net, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint::<f32>(&path).map_err(|e| e.to_string())?;
    let bits = |p: &kws_core::dnn::DnnParams<f32>| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if back.layer_sizes != net.layer_sizes || bits(&back) != bits(&net) {
        return Err("checkpoint differs after reload".into());
    }

    let mut hmm = random_hmm(5, &mut r);
    hmm.log_priors[0] = f64::NEG_INFINITY;
    let total: f64 = hmm.log_priors.iter().map(|v| v.exp()).sum();
    hmm.log_priors.iter_mut().for_each(|v| *v -= total.ln());
    let path = dir.join("hmm.json");
    hmm.save(&path).map_err(|e| e.to_string())?;
    let back = HmmParams::<f64>::load(&path).map_err(|e| e.to_string())?;
    if back != hmm {
        return Err("HMM differs after reload".into());
    }

    let feats = Array2::from_shape_fn((11, 13), |_| r.random_range(-50.0f32..50.0));
    let path = dir.join("x.kwsf");
    write_features(&path, &feats).map_err(|e| e.to_string())?;
    let back = read_features::<f32>(&path).map_err(|e| e.to_string())?;
    if back.iter().zip(&feats).any(|(a, b)| a.to_bits() != b.to_bits()) || back.dim() != feats.dim() {
        return Err("features differ after reload".into());
    }

    let labels: Vec<u16> = (0..37).map(|_| r.random_range(0..20)).collect();
    let path = dir.join("x.kwsl");
    write_labels(&path, &labels).map_err(|e| e.to_string())?;
    if read_labels(&path).map_err(|e| e.to_string())? != labels {
        return Err("labels differ after reload".into());
    }

    let entries = vec![
        ManifestEntry {
            id: "a".into(),
            features_path: "feats/a.kwsf".into(),
            labels_path: "labels/a.kwsl".into(),
            kw_start_frame: Some(3),
            kw_end_frame: Some(40),
        },
        ManifestEntry {
            id: "b".into(),
            features_path: "feats/b.kwsf".into(),
            labels_path: "labels/b.kwsl".into(),
            kw_start_frame: None,
            kw_end_frame: None,
        },
    ];
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &entries).map_err(|e| e.to_string())?;
    if read_manifest(&path).map_err(|e| e.to_string())? != entries {
        return Err("manifest differs after reload".into());
    }

    let audio = AudioBuffer::new((0..1600).map(|_| r.random::<i16>()).collect(), 16_000);
    let path = dir.join("a.wav");
    write_wav(&path, &audio).map_err(|e| e.to_string())?;
    if read_wav(&path).map_err(|e| e.to_string())? != audio {
        return Err("audio differs after reload".into());
    }
    Ok(())
}

pub fn central_diff(params: &DnnParams<f64>, eps: f64, mut loss: impl FnMut(&DnnParams<f64>) -> f64) -> Vec<f64> {
    let flat = params.to_flat();
    let mut probe = params.clone();
    (0..flat.len())
        .map(|i| {
            let mut x = flat.clone();
            x[i] = flat[i] + eps;
            probe.set_flat(&x).unwrap();
            let up = loss(&probe);
            x[i] = flat[i] - eps;
            probe.set_flat(&x).unwrap();
            let down = loss(&probe);
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Ten frames: filler, three keyword states, filler.
pub fn miniature_utterance(id: usize, r: &mut rand_chacha::ChaCha8Rng) -> Utterance {
    let labels: Vec<u16> = vec![0, 0, 0, 1, 1, 2, 2, 3, 0, 0];
    let base = Array2::from_shape_fn((10, 8), |(t, d)| {
        let centre = labels[t] as f64 * if d % 4 == labels[t] as usize { 1.0 } else { 0.2 };
        centre + r.random_range(-0.5..0.5)
    });
    Utterance {
        id: format!("mini{id}"),
        base,
        labels,
        keyword: Some(Window::new(3, 8).unwrap()),
    }
}

/// Intersection over union of half-open frame intervals, written out directly.
pub fn reference_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = hi.saturating_sub(lo) as f64;
    let union = (a.1 - a.0) as f64 + (b.1 - b.0) as f64 - inter;
    inter / union
}
