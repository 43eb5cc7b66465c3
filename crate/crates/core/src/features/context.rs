use ndarray::{s, Array2};

use crate::error::{KwsError, Result};
use crate::Scalar;

/// Frame hop of the frontend, in seconds.
pub const FRAME_HOP_SEC: f64 = 0.010;

/// Per-frame context-stacked features for one utterance (`T × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures<T> {
    pub frames: Array2<T>,
    pub frame_hop: f64,
    pub base_dim: usize,
    pub delta: usize,
}

impl<T: Scalar> FrameFeatures<T> {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Wraps an already-stacked matrix.
    pub fn from_stacked(frames: Array2<T>, base_dim: usize, delta: usize) -> Result<Self> {
        if frames.ncols() != base_dim * (2 * delta + 1) {
            return Err(KwsError::shape(format!(
                "{} columns is not {} × (2·{} + 1)",
                frames.ncols(),
                base_dim,
                delta
            )));
        }
        Ok(Self {
            frames,
            frame_hop: FRAME_HOP_SEC,
            base_dim,
            delta,
        })
    }
}

/// Concatenates rows `t-δ ..= t+δ` for every frame, replicating the first and
/// last rows past the edges.
pub fn stack_context<T: Scalar>(base: &Array2<T>, delta: usize) -> Result<FrameFeatures<T>> {
    let (t_len, base_dim) = base.dim();
    if t_len == 0 {
        return Err(KwsError::EmptyInput("feature matrix has no frames".into()));
    }
    if base_dim == 0 {
        return Err(KwsError::shape("feature matrix has no columns"));
    }
    if base.iter().any(|v| !v.is_finite()) {
        return Err(KwsError::invalid("non-finite base feature"));
    }
    let width = 2 * delta + 1;
    let mut out = Array2::zeros((t_len, base_dim * width));
    for t in 0..t_len {
        for k in 0..width {
            let src = (t + k).saturating_sub(delta).min(t_len - 1);
            out.slice_mut(s![t, k * base_dim..(k + 1) * base_dim])
                .assign(&base.row(src));
        }
    }
    FrameFeatures::from_stacked(out, base_dim, delta)
}

/// Context-stacked rows for a subset of frames, in the order given.
pub fn stack_rows<T: Scalar>(base: &Array2<T>, delta: usize, rows: &[usize]) -> Array2<T> {
    let (t_len, base_dim) = base.dim();
    let width = 2 * delta + 1;
    let mut out = Array2::zeros((rows.len(), base_dim * width));
    for (i, &t) in rows.iter().enumerate() {
        for k in 0..width {
            let src = (t + k).saturating_sub(delta).min(t_len - 1);
            out.slice_mut(s![i, k * base_dim..(k + 1) * base_dim])
                .assign(&base.row(src));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn delta_zero_is_identity() {
        let m = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(stack_context(&m, 0).unwrap().frames, m);
    }

    #[test]
    fn default_shape_is_247() {
        let m = Array2::<f64>::zeros((100, 13));
        let f = stack_context(&m, 9).unwrap();
        assert_eq!((f.num_frames(), f.dim()), (100, 247));
    }

    #[test]
    fn single_row_replicates() {
        let m = array![[1.0f32, 2.0]];
        let f = stack_context(&m, 1).unwrap();
        assert_eq!(f.frames, array![[1.0f32, 2.0, 1.0, 2.0, 1.0, 2.0]]);
    }

    #[test]
    fn interior_window_is_neighbourhood() {
        let m = Array2::from_shape_fn((5, 1), |(t, _)| t as f64);
        let f = stack_context(&m, 1).unwrap();
        assert_eq!(f.frames.row(0).to_vec(), vec![0.0, 0.0, 1.0]);
        assert_eq!(f.frames.row(2).to_vec(), vec![1.0, 2.0, 3.0]);
        assert_eq!(f.frames.row(4).to_vec(), vec![3.0, 4.0, 4.0]);
    }

    #[test]
    fn subset_rows_match_full_stack() {
        let m = Array2::from_shape_fn((9, 2), |(i, j)| (i * 10 + j) as f64);
        let full = stack_context(&m, 3).unwrap();
        let sub = stack_rows(&m, 3, &[8, 0, 4]);
        assert_eq!(sub.row(0), full.frames.row(8));
        assert_eq!(sub.row(1), full.frames.row(0));
        assert_eq!(sub.row(2), full.frames.row(4));
    }

    #[test]
    fn empty_rejected() {
        assert!(stack_context(&Array2::<f64>::zeros((0, 13)), 2).is_err());
    }

    proptest! {
        #[test]
        fn preserves_rows(t in 1usize..40, d in 1usize..5, delta in 0usize..12) {
            let m = Array2::from_shape_fn((t, d), |(i, j)| (i * 31 + j) as f64);
            let f = stack_context(&m, delta).unwrap();
            prop_assert_eq!(f.num_frames(), t);
            prop_assert_eq!(f.dim(), d * (2 * delta + 1));
            // centre block is the original row
            for i in 0..t {
                let centre = f.frames.slice(s![i, delta * d..(delta + 1) * d]).to_owned();
                prop_assert_eq!(centre, m.row(i).to_owned());
            }
        }
    }
}
