//! Bakis-topology HMM parameters, maximum-likelihood estimation from frame
//! labels, hybrid posterior scaling and the versioned JSON parameter file.
//!
//! State `i` may only stay (`b_{i,i}`) or advance to `i + 1` (`b_{i,i+1}`).
//! The keyword occupies the contiguous range `first_kw ..= last_kw`; every
//! other state is filler (background, silence). In the default 20-state
//! layout state 0 is background, state 1 is silence and states 2..=19 are the
//! 18 keyword sub-states (6 phonemes × 3).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dnn::DnnOutput;
use crate::error::{KwsError, Result};
use crate::Scalar;

pub const HMM_FORMAT_VERSION: u32 = 1;

pub const BACKGROUND_STATE: usize = 0;
pub const SILENCE_STATE: usize = 1;
pub const DEFAULT_NUM_STATES: usize = 20;
pub const DEFAULT_KEYWORD_STATES: usize = 18;

/// Which states form the keyword chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub num_states: usize,
    pub first_kw: usize,
    pub last_kw: usize,
}

impl Topology {
    pub fn new(num_states: usize, first_kw: usize, last_kw: usize) -> Result<Self> {
        let t = Self {
            num_states,
            first_kw,
            last_kw,
        };
        t.validate()?;
        Ok(t)
    }

    /// Background, silence, then `keyword_states` chain states.
    pub fn keyword_with_fillers(keyword_states: usize) -> Self {
        Self {
            num_states: keyword_states + 2,
            first_kw: 2,
            last_kw: keyword_states + 1,
        }
    }

    /// Whole state space is the keyword chain.
    pub fn chain(num_states: usize) -> Self {
        Self {
            num_states,
            first_kw: 0,
            last_kw: num_states - 1,
        }
    }

    pub fn chain_len(&self) -> usize {
        self.last_kw - self.first_kw + 1
    }

    pub fn is_keyword(&self, state: usize) -> bool {
        (self.first_kw..=self.last_kw).contains(&state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.first_kw > self.last_kw || self.last_kw >= self.num_states {
            return Err(KwsError::invalid(format!("invalid topology {self:?}")));
        }
        Ok(())
    }
}

impl Default for Topology {
    fn default() -> Self {
        Self::keyword_with_fillers(DEFAULT_KEYWORD_STATES)
    }
}

/// Log-domain HMM parameters (natural logarithms).
#[derive(Debug, Clone, PartialEq)]
pub struct HmmParams<T> {
    pub topology: Topology,
    pub log_priors: Vec<T>,
    /// `log b_{i,i}`.
    pub log_self: Vec<T>,
    /// `log_forward[i] = log b_{i,i+1}`, length `C - 1`.
    pub log_forward: Vec<T>,
    /// Log probability of entering the first keyword state from a filler
    /// state; used by the always-on decoder to start a new keyword path.
    pub log_entry: T,
    /// Log empirical state frequencies, divided out of the posteriors.
    pub log_class_freq: Vec<T>,
}

impl<T: Scalar> HmmParams<T> {
    pub fn num_states(&self) -> usize {
        self.topology.num_states
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let c = self.num_states();
        if self.log_priors.len() != c
            || self.log_self.len() != c
            || self.log_forward.len() + 1 != c
            || self.log_class_freq.len() != c
        {
            return Err(KwsError::shape(format!("HMM vectors do not match {c} states")));
        }
        let nan = |v: &[T]| v.iter().any(|x| x.is_nan() || *x > T::lit(1e-9));
        if nan(&self.log_priors) || nan(&self.log_self) || nan(&self.log_forward) || nan(&self.log_class_freq) {
            return Err(KwsError::invalid("log-probabilities must be <= 0 and not NaN"));
        }
        if self.log_entry.is_nan() || self.log_entry > T::lit(1e-9) {
            return Err(KwsError::invalid("log_entry must be a log-probability"));
        }
        let prior_sum: f64 = self.log_priors.iter().map(|v| v.as_f64().exp()).sum();
        if (prior_sum - 1.0).abs() > 1e-9 {
            return Err(KwsError::invalid(format!("priors sum to {prior_sum}, not 1")));
        }
        for i in 0..c {
            let fwd = if i + 1 < c { self.log_forward[i].as_f64().exp() } else { 0.0 };
            if self.log_self[i].as_f64().exp() + fwd > 1.0 + 1e-9 {
                return Err(KwsError::invalid(format!("outgoing mass of state {i} exceeds 1")));
            }
        }
        if self.log_class_freq.iter().any(|v| !v.is_finite()) {
            return Err(KwsError::invalid("class frequencies must be strictly positive"));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> HmmParams<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        HmmParams {
            topology: self.topology,
            log_priors: c(&self.log_priors),
            log_self: c(&self.log_self),
            log_forward: c(&self.log_forward),
            log_entry: U::lit(self.log_entry.as_f64()),
            log_class_freq: c(&self.log_class_freq),
        }
    }

    /// Self-loop log-probability of chain position `k`.
    #[inline]
    pub(crate) fn chain_self(&self, k: usize) -> T {
        self.log_self[self.topology.first_kw + k]
    }

    /// Log-probability of advancing from chain position `k - 1` to `k`.
    #[inline]
    pub(crate) fn chain_forward_into(&self, k: usize) -> T {
        self.log_forward[self.topology.first_kw + k - 1]
    }
}

/// Maximum-likelihood estimation with add-one smoothing.
///
/// * priors: first-frame counts over all `C` states;
/// * `b_{i,i}`, `b_{i,i+1}`: bigram counts over the permitted successors,
///   normalised by every transition leaving `i` (so non-Bakis transitions
///   such as keyword → background leak mass rather than being forced onto
///   the chain);
/// * entry: filler → first keyword state transitions over all filler
///   transitions;
/// * class frequencies: overall label frequencies.
pub fn estimate_hmm<T, L>(utterances: &[L], topology: Topology) -> Result<HmmParams<T>>
where
    T: Scalar,
    L: AsRef<[u16]>,
{
    topology.validate()?;
    let c = topology.num_states;
    if utterances.is_empty() || utterances.iter().all(|u| u.as_ref().is_empty()) {
        return Err(KwsError::EmptyInput("no labelled frames to estimate the HMM from".into()));
    }
    let mut first = vec![0u64; c];
    let mut freq = vec![0u64; c];
    let mut out_total = vec![0u64; c];
    let mut n_self = vec![0u64; c];
    let mut n_fwd = vec![0u64; c];
    let (mut filler_out, mut filler_entry) = (0u64, 0u64);

    for (u, labels) in utterances.iter().enumerate() {
        let labels = labels.as_ref();
        if let Some(&bad) = labels.iter().find(|&&s| s as usize >= c) {
            return Err(KwsError::invalid(format!("utterance {u}: label {bad} outside [0, {c})")));
        }
        let Some(&l0) = labels.first() else { continue };
        first[l0 as usize] += 1;
        for &s in labels {
            freq[s as usize] += 1;
        }
        for w in labels.windows(2) {
            let (a, b) = (w[0] as usize, w[1] as usize);
            out_total[a] += 1;
            if b == a {
                n_self[a] += 1;
            } else if b == a + 1 {
                n_fwd[a] += 1;
            }
            if !topology.is_keyword(a) {
                filler_out += 1;
                if b == topology.first_kw {
                    filler_entry += 1;
                }
            }
        }
    }

    let n_utts: u64 = first.iter().sum();
    let n_frames: u64 = freq.iter().sum();
    let ln = |num: u64, den: u64| T::lit(((num + 1) as f64 / den as f64).ln());
    let log_priors = first.iter().map(|&n| ln(n, n_utts + c as u64)).collect();
    let log_class_freq = freq.iter().map(|&n| ln(n, n_frames + c as u64)).collect();
    let permitted = |i: usize| if i + 1 < c { 2 } else { 1 };
    let log_self = (0..c).map(|i| ln(n_self[i], out_total[i] + permitted(i))).collect();
    let log_forward = (0..c - 1).map(|i| ln(n_fwd[i], out_total[i] + 2)).collect();
    let log_entry = ln(filler_entry, filler_out + 2);

    let hmm = HmmParams {
        topology,
        log_priors,
        log_self,
        log_forward,
        log_entry,
        log_class_freq,
    };
    hmm.validate()?;
    Ok(hmm)
}

/// Hybrid conversion: `log p(state | x) - log p(state)`.
pub fn scaled_loglik<T: Scalar>(dnn_out: &DnnOutput<T>, hmm: &HmmParams<T>) -> Result<Array2<T>> {
    let c = hmm.num_states();
    if dnn_out.num_states() != c {
        return Err(KwsError::shape(format!(
            "network emits {} states, HMM has {c}",
            dnn_out.num_states()
        )));
    }
    let mut out = dnn_out.log_posteriors.clone();
    for mut row in out.rows_mut() {
        for (v, &f) in row.iter_mut().zip(&hmm.log_class_freq) {
            *v = *v - f;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(KwsError::invalid("non-finite scaled log-likelihood"));
    }
    Ok(out)
}

/// On-disk JSON form; `null` encodes a log-probability of `-inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmFile {
    pub format_version: u32,
    pub num_states: usize,
    pub first_kw: usize,
    pub last_kw: usize,
    pub log_priors: Vec<Option<f64>>,
    pub log_self: Vec<Option<f64>>,
    pub log_forward: Vec<Option<f64>>,
    pub log_entry: Option<f64>,
    pub log_class_freq: Vec<Option<f64>>,
}

fn to_opt<T: Scalar>(v: &[T]) -> Vec<Option<f64>> {
    v.iter()
        .map(|x| if x.is_finite() { Some(x.as_f64()) } else { None })
        .collect()
}

fn from_opt<T: Scalar>(v: &[Option<f64>]) -> Vec<T> {
    v.iter()
        .map(|x| x.map_or(T::neg_infinity(), T::lit))
        .collect()
}

impl<T: Scalar> HmmParams<T> {
    pub fn to_file(&self) -> HmmFile {
        HmmFile {
            format_version: HMM_FORMAT_VERSION,
            num_states: self.topology.num_states,
            first_kw: self.topology.first_kw,
            last_kw: self.topology.last_kw,
            log_priors: to_opt(&self.log_priors),
            log_self: to_opt(&self.log_self),
            log_forward: to_opt(&self.log_forward),
            log_entry: to_opt(&[self.log_entry])[0],
            log_class_freq: to_opt(&self.log_class_freq),
        }
    }

    pub fn from_file(file: &HmmFile) -> Result<Self> {
        if file.format_version != HMM_FORMAT_VERSION {
            return Err(KwsError::UnsupportedVersion {
                kind: "HMM file",
                found: file.format_version,
                expected: HMM_FORMAT_VERSION,
            });
        }
        let hmm = Self {
            topology: Topology::new(file.num_states, file.first_kw, file.last_kw)?,
            log_priors: from_opt(&file.log_priors),
            log_self: from_opt(&file.log_self),
            log_forward: from_opt(&file.log_forward),
            log_entry: file.log_entry.map_or(T::neg_infinity(), T::lit),
            log_class_freq: from_opt(&file.log_class_freq),
        };
        hmm.validate()?;
        Ok(hmm)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
