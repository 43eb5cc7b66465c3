//! Training-time window scoring through the HMM max recurrence, its
//! subgradient, and the hinge objective.
//!
//! A window is assumed to start at the first keyword state and end at the
//! last one. The score is the best legal chain path's log-likelihood divided
//! by the window length; its subgradient w.r.t. the score matrix is `1/T` on
//! the argmax path and zero elsewhere. HMM parameters are constants.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::hmm::HmmParams;
use crate::Scalar;

/// How the first frame of a window is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowInit {
    /// All mass on the first keyword state.
    #[default]
    FirstState,
    /// Chain-restricted log priors.
    Priors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowScore<T> {
    /// Detection score `v_last(T) / T`.
    pub d: T,
    /// Unnormalised best-path log-likelihood.
    pub log_prob: T,
    /// Absolute state index per frame.
    pub argmax_path: Vec<usize>,
    pub frames: usize,
}

fn check<T: Scalar>(scores: &ArrayView2<T>, hmm: &HmmParams<T>, init: WindowInit) -> Result<()> {
    if scores.ncols() != hmm.num_states() {
        return Err(KwsError::shape(format!(
            "window has {} score columns, HMM has {} states",
            scores.ncols(),
            hmm.num_states()
        )));
    }
    let k = hmm.topology.chain_len();
    let need = if init == WindowInit::FirstState { k } else { 1 };
    if scores.nrows() < need.max(1) {
        return Err(KwsError::InfeasibleWindow {
            frames: scores.nrows(),
            chain_len: k,
        });
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(KwsError::invalid("non-finite window score"));
    }
    Ok(())
}

/// Scores one window (rows are frames, columns are HMM states).
pub fn score_window_with<T: Scalar>(
    scores: ArrayView2<T>,
    hmm: &HmmParams<T>,
    init: WindowInit,
) -> Result<WindowScore<T>> {
    check(&scores, hmm, init)?;
    let first = hmm.topology.first_kw;
    let k_len = hmm.topology.chain_len();
    let t_len = scores.nrows();
    let neg_inf = T::neg_infinity();

    let mut v: Vec<T> = (0..k_len)
        .map(|k| {
            let base = match init {
                WindowInit::FirstState if k == 0 => T::zero(),
                WindowInit::FirstState => neg_inf,
                WindowInit::Priors => hmm.log_priors[first + k],
            };
            base + scores[[0, first + k]]
        })
        .collect();
    // advanced[t][k]: frame t reached state k by a forward step
    let mut advanced = vec![vec![false; k_len]; t_len];
    for t in 1..t_len {
        for k in (0..k_len).rev() {
            let stay = v[k] + hmm.chain_self(k);
            let best = if k > 0 {
                let adv = v[k - 1] + hmm.chain_forward_into(k);
                if adv > stay {
                    advanced[t][k] = true;
                    adv
                } else {
                    stay
                }
            } else {
                stay
            };
            v[k] = best + scores[[t, first + k]];
        }
    }

    let log_prob = v[k_len - 1];
    if !log_prob.is_finite() {
        return Err(KwsError::InfeasibleWindow {
            frames: t_len,
            chain_len: k_len,
        });
    }
    let mut path = vec![0usize; t_len];
    let mut k = k_len - 1;
    for t in (0..t_len).rev() {
        path[t] = first + k;
        if advanced[t][k] {
            k -= 1;
        }
    }
    Ok(WindowScore {
        d: log_prob / T::from_usize_lossy(t_len),
        log_prob,
        argmax_path: path,
        frames: t_len,
    })
}

pub fn score_window<T: Scalar>(scores: ArrayView2<T>, hmm: &HmmParams<T>) -> Result<WindowScore<T>> {
    score_window_with(scores, hmm, WindowInit::FirstState)
}

/// Window score plus `∂d/∂scores`: `1/T` at each (frame, path state).
pub fn score_window_grad_with<T: Scalar>(
    scores: ArrayView2<T>,
    hmm: &HmmParams<T>,
    init: WindowInit,
) -> Result<(WindowScore<T>, Array2<T>)> {
    let ws = score_window_with(scores, hmm, init)?;
    let mut grad = Array2::zeros(scores.raw_dim());
    let inv = T::one() / T::from_usize_lossy(ws.frames);
    for (t, &s) in ws.argmax_path.iter().enumerate() {
        grad[[t, s]] = inv;
    }
    Ok((ws, grad))
}

pub fn score_window_grad<T: Scalar>(scores: ArrayView2<T>, hmm: &HmmParams<T>) -> Result<(WindowScore<T>, Array2<T>)> {
    score_window_grad_with(scores, hmm, WindowInit::FirstState)
}

/// Hinge with unit margin: positives want `d ≥ 1`, negatives `d ≤ -1`.
/// Returns `(loss, ∂loss/∂d)`.
pub fn hinge_loss<T: Scalar>(d: T, is_positive: bool) -> (T, T) {
    let one = T::one();
    if is_positive {
        if d < one {
            (one - d, -one)
        } else {
            (T::zero(), T::zero())
        }
    } else if d > -one {
        (one + d, one)
    } else {
        (T::zero(), T::zero())
    }
}
