//! Synthetic labelled utterances with a known keyword window.
//!
//! Each utterance is background → optional silence → the keyword chain (every
//! state held for a geometric number of frames, strictly in order) → optional
//! silence → background. Frames are 13-dimensional pre-stacking feature
//! vectors: the mean of the frame's emitting state plus isotropic Gaussian
//! noise. Keyword sub-states are grouped into phonemes whose sub-state means
//! sit close together, so neighbouring sub-states are easy to confuse.
//!
//! Background speech is "babble": segments emitted from background-only
//! means or, with some probability, from keyword sub-state means, and
//! occasionally whole in-order fragments of the keyword that stop short of
//! the full phrase. Background may also contain near-miss phrases: the full
//! keyword with one phoneme replaced by decoy means that sit close to the
//! replaced sub-states. All babble frames are labelled background.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::hmm::{Topology, BACKGROUND_STATE, SILENCE_STATE};
use crate::sampling::Window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_states: usize,
    pub keyword_chain_len: usize,
    pub states_per_phoneme: usize,
    pub feature_dim: usize,
    /// Minimum distance between any two state means.
    pub state_mean_separation: f64,
    /// Minimum distance between phoneme (and filler) centres.
    pub phoneme_separation: f64,
    /// Distance of each keyword sub-state mean from its phoneme centre.
    pub substate_radius: f64,
    pub noise_sigma: f64,
    /// Mean dwell (frames, ≥ 1) of every keyword state.
    pub keyword_dwell_mean: f64,
    pub silence_dwell_mean: f64,
    /// Probability of a silence segment on each side of the keyword.
    pub silence_prob: f64,
    /// Background frames before / after the keyword, uniform in the range.
    pub background_min: usize,
    pub background_max: usize,
    /// Number of background-only babble means.
    pub babble_means: usize,
    pub babble_dwell_mean: f64,
    /// Probability that a babble segment borrows a keyword sub-state mean.
    pub babble_confusable_prob: f64,
    /// Probability of inserting an in-order partial keyword into each
    /// background region.
    pub fragment_prob: f64,
    /// Largest fragment, in phonemes (must be below the phoneme count).
    pub fragment_max_phonemes: usize,
    /// Probability of inserting a near-miss phrase into each background
    /// region.
    pub near_miss_prob: f64,
    /// Distance of each decoy mean from the sub-state mean it imitates.
    pub near_miss_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_states: 20,
            keyword_chain_len: 18,
            states_per_phoneme: 3,
            feature_dim: 13,
            state_mean_separation: 1.0,
            phoneme_separation: 4.0,
            substate_radius: 0.8,
            noise_sigma: 1.0,
            keyword_dwell_mean: 3.0,
            silence_dwell_mean: 8.0,
            silence_prob: 0.5,
            background_min: 20,
            background_max: 60,
            babble_means: 6,
            babble_dwell_mean: 8.0,
            babble_confusable_prob: 0.3,
            fragment_prob: 0.5,
            fragment_max_phonemes: 4,
            near_miss_prob: 1.0,
            near_miss_offset: 8.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn topology(&self) -> Topology {
        Topology::keyword_with_fillers(self.keyword_chain_len)
    }

    pub fn num_phonemes(&self) -> usize {
        self.keyword_chain_len / self.states_per_phoneme
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KwsError::invalid(format!("synth config: {m}")));
        if self.keyword_chain_len == 0 || self.keyword_chain_len + 2 > self.num_states {
            return bad("keyword_chain_len must be in 1..=num_states-2");
        }
        if self.num_states != self.keyword_chain_len + 2 {
            return bad("num_states must equal keyword_chain_len + 2 (background, silence, keyword)");
        }
        if self.states_per_phoneme == 0 || self.keyword_chain_len % self.states_per_phoneme != 0 {
            return bad("keyword_chain_len must be a multiple of states_per_phoneme");
        }
        if !(self.noise_sigma > 0.0) {
            return bad("noise_sigma must be positive");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.keyword_dwell_mean < 1.0 || self.silence_dwell_mean < 1.0 || self.babble_dwell_mean < 1.0 {
            return bad("dwell means must be at least one frame");
        }
        if self.background_min == 0 || self.background_min > self.background_max {
            return bad("need 1 <= background_min <= background_max");
        }
        if !(self.near_miss_offset > 0.0) {
            return bad("near_miss_offset must be positive");
        }
        for p in [self.silence_prob, self.babble_confusable_prob, self.fragment_prob, self.near_miss_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.fragment_prob > 0.0 && (self.fragment_max_phonemes == 0 || self.fragment_max_phonemes >= self.num_phonemes()) {
            return bad("fragment_max_phonemes must be in 1..num_phonemes");
        }
        if self.substate_radius * 2.0 < self.state_mean_separation && self.states_per_phoneme > 1 {
            return bad("substate_radius too small to honour state_mean_separation");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    /// `T × feature_dim`, before context stacking.
    pub features: Array2<f64>,
    pub state_labels: Vec<u16>,
    pub keyword_window: Window,
}

/// Emission means for every HMM state plus the babble-only means.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionModel {
    /// `num_states × feature_dim`.
    pub state_means: Array2<f64>,
    /// `babble_means × feature_dim`.
    pub babble_means: Array2<f64>,
    /// `keyword_chain_len × feature_dim`; row `k` imitates keyword state
    /// `first_kw + k`.
    pub decoy_means: Array2<f64>,
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Array1<f64> = Array1::from_shape_fn(dim, |_| n.sample(rng));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

fn far_enough(points: &[Array1<f64>], p: &Array1<f64>, min: f64) -> bool {
    points.iter().all(|q| {
        let d = q - p;
        d.dot(&d).sqrt() >= min
    })
}

impl EmissionModel {
    /// Deterministic placement from the config seed. Phoneme, silence,
    /// background and babble centres are spread at least
    /// `phoneme_separation` apart; keyword sub-states sit on a sphere of
    /// radius `substate_radius` around their phoneme centre.
    pub fn from_config(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d65_616e_735f_7631);
        let dim = cfg.feature_dim;
        let n_centres = cfg.num_phonemes() + 2 + cfg.babble_means;
        let scale = cfg.phoneme_separation * (n_centres as f64).sqrt();
        let mut centres: Vec<Array1<f64>> = Vec::with_capacity(n_centres);
        let mut tries = 0usize;
        while centres.len() < n_centres {
            tries += 1;
            if tries > 1_000_000 {
                return Err(KwsError::invalid("could not place emission means; lower phoneme_separation"));
            }
            let radius = scale * rng.random::<f64>().powf(1.0 / dim as f64);
            let p = random_direction(&mut rng, dim) * radius;
            if far_enough(&centres, &p, cfg.phoneme_separation) {
                centres.push(p);
            }
        }

        let mut state_means = Array2::zeros((cfg.num_states, dim));
        state_means.row_mut(BACKGROUND_STATE).assign(&centres[0]);
        state_means.row_mut(SILENCE_STATE).assign(&centres[1]);
        let topo = cfg.topology();
        let mut placed: Vec<Array1<f64>> = vec![centres[0].clone(), centres[1].clone()];
        for ph in 0..cfg.num_phonemes() {
            let centre = &centres[2 + ph];
            for sub in 0..cfg.states_per_phoneme {
                let state = topo.first_kw + ph * cfg.states_per_phoneme + sub;
                let mut tries = 0usize;
                let mean = loop {
                    tries += 1;
                    if tries > 100_000 {
                        return Err(KwsError::invalid("could not place sub-state means; check substate_radius"));
                    }
                    let m = centre + &(random_direction(&mut rng, dim) * cfg.substate_radius);
                    if far_enough(&placed, &m, cfg.state_mean_separation) {
                        break m;
                    }
                };
                state_means.row_mut(state).assign(&mean);
                placed.push(mean);
            }
        }
        let mut babble_means = Array2::zeros((cfg.babble_means, dim));
        for b in 0..cfg.babble_means {
            babble_means.row_mut(b).assign(&centres[2 + cfg.num_phonemes() + b]);
        }
        let mut decoy_means = Array2::zeros((cfg.keyword_chain_len, dim));
        for k in 0..cfg.keyword_chain_len {
            let m = &state_means.row(topo.first_kw + k) + &(random_direction(&mut rng, dim) * cfg.near_miss_offset);
            decoy_means.row_mut(k).assign(&m);
        }
        Ok(Self {
            state_means,
            babble_means,
            decoy_means,
        })
    }
}

/// Number of frames for a geometric dwell with the given mean (≥ 1).
fn dwell(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let g = Geometric::new(1.0 / mean).expect("valid geometric parameter");
    1 + g.sample(rng) as usize
}

/// Generates utterances from a fixed emission model.
#[derive(Debug, Clone)]
pub struct SynthGenerator {
    pub config: SynthConfig,
    pub emissions: EmissionModel,
}

#[derive(Clone, Copy)]
enum Source {
    State(usize),
    Babble(usize),
    Decoy(usize),
}

impl SynthGenerator {
    pub fn new(config: SynthConfig) -> Result<Self> {
        let emissions = EmissionModel::from_config(&config)?;
        Ok(Self { config, emissions })
    }

    fn fragment(&self, rng: &mut ChaCha8Rng, out: &mut Vec<(u16, Source)>) {
        let cfg = &self.config;
        let first_kw = cfg.topology().first_kw;
        let n_ph = rng.random_range(1..=cfg.fragment_max_phonemes);
        let first_ph = rng.random_range(0..=cfg.num_phonemes() - n_ph);
        let s0 = first_kw + first_ph * cfg.states_per_phoneme;
        for s in s0..s0 + n_ph * cfg.states_per_phoneme {
            for _ in 0..dwell(rng, cfg.keyword_dwell_mean) {
                out.push((BACKGROUND_STATE as u16, Source::State(s)));
            }
        }
    }

    fn near_miss(&self, rng: &mut ChaCha8Rng, out: &mut Vec<(u16, Source)>) {
        let cfg = &self.config;
        let first_kw = cfg.topology().first_kw;
        let swapped = rng.random_range(0..cfg.num_phonemes());
        for k in 0..cfg.keyword_chain_len {
            let src = if k / cfg.states_per_phoneme == swapped {
                Source::Decoy(k)
            } else {
                Source::State(first_kw + k)
            };
            for _ in 0..dwell(rng, cfg.keyword_dwell_mean) {
                out.push((BACKGROUND_STATE as u16, src));
            }
        }
    }

    fn babble_region(&self, rng: &mut ChaCha8Rng, len: usize, out: &mut Vec<(u16, Source)>) {
        let cfg = &self.config;
        let topo = cfg.topology();
        let mut inserts: Vec<(usize, bool)> = Vec::new();
        if rng.random::<f64>() < cfg.fragment_prob {
            inserts.push((rng.random_range(0..len.max(1)), false));
        }
        if rng.random::<f64>() < cfg.near_miss_prob {
            inserts.push((rng.random_range(0..len.max(1)), true));
        }
        inserts.sort_by_key(|&(at, _)| at);
        let mut inserts = inserts.into_iter().peekable();
        let mut remaining = len;
        let mut emitted = 0usize;
        loop {
            while let Some(&(at, near)) = inserts.peek() {
                if at > emitted {
                    break;
                }
                inserts.next();
                if near {
                    self.near_miss(rng, out);
                } else {
                    self.fragment(rng, out);
                }
            }
            if remaining == 0 {
                break;
            }
            let seg = dwell(rng, cfg.babble_dwell_mean).min(remaining);
            let src = if rng.random::<f64>() < cfg.babble_confusable_prob {
                Source::State(rng.random_range(topo.first_kw..=topo.last_kw))
            } else if cfg.babble_means > 0 {
                Source::Babble(rng.random_range(0..cfg.babble_means))
            } else {
                Source::State(BACKGROUND_STATE)
            };
            out.extend(std::iter::repeat_n((BACKGROUND_STATE as u16, src), seg));
            remaining -= seg;
            emitted += seg;
        }
    }

    /// One utterance containing exactly one keyword instance.
    pub fn generate_utterance(&self, rng: &mut ChaCha8Rng) -> SynthUtterance {
        let cfg = &self.config;
        let topo = cfg.topology();
        let mut frames: Vec<(u16, Source)> = Vec::new();

        let pre = rng.random_range(cfg.background_min..=cfg.background_max);
        self.babble_region(rng, pre, &mut frames);
        if rng.random::<f64>() < cfg.silence_prob {
            for _ in 0..dwell(rng, cfg.silence_dwell_mean) {
                frames.push((SILENCE_STATE as u16, Source::State(SILENCE_STATE)));
            }
        }
        let kw_start = frames.len();
        for s in topo.first_kw..=topo.last_kw {
            for _ in 0..dwell(rng, cfg.keyword_dwell_mean) {
                frames.push((s as u16, Source::State(s)));
            }
        }
        let kw_end = frames.len();
        if rng.random::<f64>() < cfg.silence_prob {
            for _ in 0..dwell(rng, cfg.silence_dwell_mean) {
                frames.push((SILENCE_STATE as u16, Source::State(SILENCE_STATE)));
            }
        }
        let post = rng.random_range(cfg.background_min..=cfg.background_max);
        self.babble_region(rng, post, &mut frames);

        let noise = Normal::new(0.0, cfg.noise_sigma).expect("positive sigma");
        let dim = cfg.feature_dim;
        let mut features = Array2::zeros((frames.len(), dim));
        for (t, (_, src)) in frames.iter().enumerate() {
            let mean = match *src {
                Source::State(s) => self.emissions.state_means.row(s),
                Source::Babble(b) => self.emissions.babble_means.row(b),
                Source::Decoy(k) => self.emissions.decoy_means.row(k),
            };
            for j in 0..dim {
                features[[t, j]] = mean[j] + noise.sample(rng);
            }
        }
        SynthUtterance {
            features,
            state_labels: frames.iter().map(|(l, _)| *l).collect(),
            keyword_window: Window {
                start: kw_start,
                end: kw_end,
            },
        }
    }

    /// Utterance `index` of the stream seeded by `seed`; independent of any
    /// other index so corpora can be generated in parallel.
    pub fn utterance_at(&self, seed: u64, index: u64) -> SynthUtterance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        self.generate_utterance(&mut rng)
    }
}
