//! Always-on log-domain Viterbi over the keyword chain.
//!
//! For every frame the decoder keeps, per chain state, the best log-probability
//! of any legal path ending there together with the frame that path entered
//! the chain. A path may begin at frame 0, or at any frame by entering the
//! first keyword state from filler speech. Whenever the last
//! keyword state is reachable a [`Detection`] is emitted whose score is the
//! path log-probability divided by the path length.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::hmm::HmmParams;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T> {
    /// Best-path log-likelihood normalised by `end_frame - start_frame + 1`.
    pub score: T,
    /// Unnormalised best-path log-likelihood.
    pub log_prob: T,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl<T: Scalar> Detection<T> {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Chain initialisation at frame 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamInit {
    /// Only the first keyword state is live, with the larger of its prior
    /// and the entry arc: a stream is assumed to start outside the keyword.
    #[default]
    FirstState,
    /// Every chain state starts from its prior.
    Priors,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    /// Path started at frame 0 from the prior.
    Init,
    /// Path entered the first keyword state from filler at this frame.
    Entry,
    Stay,
    Advance,
}

/// Incremental decoder; feed one row of scaled log-likelihoods per frame.
#[derive(Debug, Clone)]
pub struct StreamDecoder<'a, T> {
    hmm: &'a HmmParams<T>,
    v: Vec<T>,
    start: Vec<usize>,
    frame: usize,
    init: StreamInit,
    backptr: Option<Vec<Vec<Step>>>,
}

impl<'a, T: Scalar> StreamDecoder<'a, T> {
    pub fn new(hmm: &'a HmmParams<T>) -> Self {
        Self::with_init(hmm, StreamInit::default())
    }

    pub fn with_init(hmm: &'a HmmParams<T>, init: StreamInit) -> Self {
        let k = hmm.topology.chain_len();
        Self {
            hmm,
            v: vec![T::neg_infinity(); k],
            start: vec![0; k],
            frame: 0,
            init,
            backptr: None,
        }
    }

    /// Stores backpointers so full paths can be recovered.
    pub fn keep_backpointers(mut self) -> Self {
        self.backptr = Some(Vec::new());
        self
    }

    /// Decoder that also stores backpointers so full paths can be recovered.
    pub fn with_backpointers(hmm: &'a HmmParams<T>) -> Self {
        Self::new(hmm).keep_backpointers()
    }

    pub fn frames_seen(&self) -> usize {
        self.frame
    }

    /// Consumes the scores of the next frame (one value per HMM state).
    pub fn push(&mut self, scores: ArrayView1<T>) -> Result<Option<Detection<T>>> {
        let hmm = self.hmm;
        if scores.len() != hmm.num_states() {
            return Err(KwsError::shape(format!(
                "frame has {} scores, HMM has {} states",
                scores.len(),
                hmm.num_states()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(KwsError::invalid(format!("non-finite score at frame {}", self.frame)));
        }
        let first = hmm.topology.first_kw;
        let k_len = self.v.len();
        let t = self.frame;
        let mut steps = vec![Step::Stay; k_len];

        if t == 0 {
            for k in 0..k_len {
                let prior = match self.init {
                    StreamInit::FirstState if k > 0 => T::neg_infinity(),
                    _ => hmm.log_priors[first + k],
                };
                let (base, step) = if k == 0 && hmm.log_entry > prior {
                    (hmm.log_entry, Step::Entry)
                } else {
                    (prior, Step::Init)
                };
                self.v[k] = base + scores[first + k];
                self.start[k] = 0;
                steps[k] = step;
            }
        } else {
            // descending k so v[k-1] still holds the previous frame
            for k in (0..k_len).rev() {
                let stay = self.v[k] + hmm.chain_self(k);
                let (other, other_start, other_step) = if k == 0 {
                    (hmm.log_entry, t, Step::Entry)
                } else {
                    (self.v[k - 1] + hmm.chain_forward_into(k), self.start[k - 1], Step::Advance)
                };
                let best = if stay >= other {
                    stay
                } else {
                    self.start[k] = other_start;
                    steps[k] = other_step;
                    other
                };
                self.v[k] = best + scores[first + k];
            }
        }
        if let Some(bp) = self.backptr.as_mut() {
            bp.push(steps);
        }
        self.frame += 1;

        let log_prob = self.v[k_len - 1];
        if !log_prob.is_finite() {
            return Ok(None);
        }
        let start = self.start[k_len - 1];
        Ok(Some(Detection {
            score: log_prob / T::from_usize_lossy(t - start + 1),
            log_prob,
            start_frame: start,
            end_frame: t,
        }))
    }

    /// Best path (absolute state indices) ending in the last keyword state at
    /// `end_frame`. Requires [`StreamDecoder::with_backpointers`].
    pub fn backtrack(&self, end_frame: usize) -> Option<(usize, Vec<usize>)> {
        let bp = self.backptr.as_ref()?;
        if end_frame >= bp.len() {
            return None;
        }
        let first = self.hmm.topology.first_kw;
        let mut k = self.v.len() - 1;
        let mut t = end_frame;
        let mut path = vec![first + k];
        loop {
            match bp[t][k] {
                Step::Init | Step::Entry => break,
                Step::Stay => {}
                Step::Advance => k -= 1,
            }
            t -= 1;
            path.push(first + k);
        }
        path.reverse();
        Some((t, path))
    }
}

/// Decodes a whole `T × C` score matrix, returning one detection for every
/// frame at which the last keyword state is reachable.
pub fn viterbi_stream<T: Scalar>(scores: ArrayView2<T>, hmm: &HmmParams<T>) -> Result<Vec<Detection<T>>> {
    viterbi_stream_with(scores, hmm, StreamInit::default())
}

pub fn viterbi_stream_with<T: Scalar>(scores: ArrayView2<T>, hmm: &HmmParams<T>, init: StreamInit) -> Result<Vec<Detection<T>>> {
    if scores.nrows() == 0 {
        return Err(KwsError::EmptyInput("score matrix has no frames".into()));
    }
    let mut dec = StreamDecoder::with_init(hmm, init);
    let mut out = Vec::new();
    for row in scores.rows() {
        if let Some(d) = dec.push(row)? {
            out.push(d);
        }
    }
    Ok(out)
}
