//! Fully-connected state classifier with ReLU hidden layers and a log-softmax
//! output, plus its reverse-mode pass and the `KWSE` checkpoint format.
//!
//! Weights of layer `l` are stored as an `n_l × n_{l+1}` matrix so a batch of
//! row vectors is propagated as `X · W + b`. The checkpoint writes each weight
//! matrix row-major in that orientation, followed by its bias vector.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binfmt::{ByteReader, ByteWriter};
use crate::error::{KwsError, Result};
use crate::features::FrameFeatures;
use crate::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KWSE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Default architecture: 247 stacked inputs, one hidden layer of 52 units,
/// 20 output states (13,956 parameters).
pub const DEFAULT_LAYER_SIZES: [usize; 3] = [247, 52, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct DnnParams<T> {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

/// Gradients with the same layout as [`DnnParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DnnGrads<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

/// Row-wise log-softmax outputs, `T × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct DnnOutput<T> {
    pub log_posteriors: Array2<T>,
}

impl<T: Scalar> DnnOutput<T> {
    pub fn num_frames(&self) -> usize {
        self.log_posteriors.nrows()
    }

    pub fn num_states(&self) -> usize {
        self.log_posteriors.ncols()
    }
}

/// Activations retained by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// `inputs[l]` is the input to layer `l` (post-ReLU for l > 0).
    inputs: Vec<Array2<T>>,
    pub output: DnnOutput<T>,
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(KwsError::invalid("a network needs at least input and output sizes"));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(KwsError::invalid(format!("zero-width layer in {sizes:?}")));
    }
    Ok(())
}

/// Analytic parameter count Σ (n_i · n_{i+1} + n_{i+1}).
pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params<T: Scalar>(layer_sizes: &[usize], seed: u64) -> Result<DnnParams<T>> {
    validate_sizes(layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || {
            T::lit(rng.random_range(-limit..limit))
        }));
        biases.push(Array1::zeros(fan_out));
    }
    Ok(DnnParams {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
    })
}

fn log_softmax_rows<T: Scalar>(z: &mut Array2<T>) {
    for mut row in z.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

impl<T: Scalar> DnnParams<T> {
    /// All-zero network (uniform output).
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights: layer_sizes.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect(),
            biases: layer_sizes.windows(2).map(|w| Array1::zeros(w[1])).collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated sizes")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Checks internal consistency of sizes and tensor shapes.
    pub fn validate(&self) -> Result<()> {
        validate_sizes(&self.layer_sizes)?;
        if self.weights.len() != self.layer_sizes.len() - 1 || self.biases.len() != self.weights.len() {
            return Err(KwsError::shape("layer count disagrees with layer_sizes"));
        }
        for (l, win) in self.layer_sizes.windows(2).enumerate() {
            if self.weights[l].dim() != (win[0], win[1]) || self.biases[l].len() != win[1] {
                return Err(KwsError::shape(format!("layer {l} tensors do not match sizes {win:?}")));
            }
        }
        if !self.is_finite() {
            return Err(KwsError::invalid("non-finite parameter"));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DnnParams<U> {
        DnnParams {
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.iter().map(|w| w.mapv(|v| U::lit(v.as_f64()))).collect(),
            biases: self.biases.iter().map(|b| b.mapv(|v| U::lit(v.as_f64()))).collect(),
        }
    }

    /// Forward pass on a raw `T × d` matrix.
    pub fn forward_matrix(&self, x: &Array2<T>) -> Result<DnnOutput<T>> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &Array2<T>) -> Result<ForwardTrace<T>> {
        if x.ncols() != self.input_dim() {
            return Err(KwsError::shape(format!(
                "feature dim {} but network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut h = x.to_owned();
        for l in 0..self.num_layers() {
            let mut z = h.dot(&self.weights[l]) + &self.biases[l];
            inputs.push(h);
            if l + 1 < self.num_layers() {
                z.mapv_inplace(|v| v.max(T::zero()));
            } else {
                log_softmax_rows(&mut z);
            }
            h = z;
        }
        Ok(ForwardTrace {
            inputs,
            output: DnnOutput { log_posteriors: h },
        })
    }

    /// Reverse pass given `∂L/∂log_posteriors` and a trace of the same input.
    pub fn backward_trace(&self, trace: &ForwardTrace<T>, grad_log_post: &Array2<T>) -> Result<DnnGrads<T>> {
        let logp = &trace.output.log_posteriors;
        if grad_log_post.dim() != logp.dim() {
            return Err(KwsError::shape(format!(
                "gradient shape {:?} but output shape {:?}",
                grad_log_post.dim(),
                logp.dim()
            )));
        }
        // through log-softmax: dz = g - softmax * Σ_c g
        let row_sums = grad_log_post.sum_axis(Axis(1));
        let mut delta = grad_log_post.to_owned();
        Zip::from(delta.rows_mut())
            .and(logp.rows())
            .and(&row_sums)
            .for_each(|mut d, lp, &s| {
                Zip::from(&mut d).and(&lp).for_each(|dv, &l| *dv = *dv - l.exp() * s);
            });

        let n = self.num_layers();
        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        for l in (0..n).rev() {
            let input = &trace.inputs[l];
            gw[l] = input.t().dot(&delta);
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l].t());
                // input[l] is relu output of layer l-1; zero where inactive
                Zip::from(&mut prev).and(input).for_each(|p, &a| {
                    if a <= T::zero() {
                        *p = T::zero();
                    }
                });
                delta = prev;
            }
        }
        Ok(DnnGrads { weights: gw, biases: gb })
    }

    /// Applies `f(param, grad)` to every parameter/gradient pair in layer order.
    pub fn zip_apply(&mut self, grads: &DnnGrads<T>, mut f: impl FnMut(usize, &mut T, T)) {
        let mut idx = 0;
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            Zip::from(w).and(g).for_each(|p, &gv| {
                f(idx, p, gv);
                idx += 1;
            });
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            Zip::from(b).and(g).for_each(|p, &gv| {
                f(idx, p, gv);
                idx += 1;
            });
        }
    }

    /// Flattened parameters (weights of every layer, then biases of every layer).
    pub fn to_flat(&self) -> Vec<T> {
        self.weights
            .iter()
            .flat_map(|w| w.iter().copied())
            .chain(self.biases.iter().flat_map(|b| b.iter().copied()))
            .collect()
    }

    /// Inverse of [`DnnParams::to_flat`].
    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(KwsError::shape(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut it = flat.iter().copied();
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
        }
        Ok(())
    }
}

impl<T: Scalar> DnnGrads<T> {
    pub fn zeros_like(params: &DnnParams<T>) -> Self {
        Self {
            weights: params.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &DnnGrads<T>) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: T) {
        self.weights.iter_mut().for_each(|w| w.mapv_inplace(|v| v * k));
        self.biases.iter_mut().for_each(|b| b.mapv_inplace(|v| v * k));
    }

    /// Same ordering as [`DnnParams::to_flat`].
    pub fn to_flat(&self) -> Vec<T> {
        self.weights
            .iter()
            .flat_map(|w| w.iter().copied())
            .chain(self.biases.iter().flat_map(|b| b.iter().copied()))
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_zero())
    }
}

/// Forward pass producing per-frame log posteriors.
pub fn forward<T: Scalar>(params: &DnnParams<T>, feats: &FrameFeatures<T>) -> Result<DnnOutput<T>> {
    params.forward_matrix(&feats.frames)
}

/// Parameter gradients of a loss whose gradient w.r.t. the log posteriors is
/// `grad_log_post`.
pub fn backward<T: Scalar>(
    params: &DnnParams<T>,
    feats: &FrameFeatures<T>,
    grad_log_post: &Array2<T>,
) -> Result<DnnGrads<T>> {
    let trace = params.forward_trace(&feats.frames)?;
    params.backward_trace(&trace, grad_log_post)
}

pub fn encode_checkpoint<T: Scalar>(params: &DnnParams<T>) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(12 + 4 * params.layer_sizes.len() + 4 * params.num_params());
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(params.layer_sizes.len() as u32);
    for &n in &params.layer_sizes {
        w.u32(n as u32);
    }
    for (wm, b) in params.weights.iter().zip(&params.biases) {
        for v in wm.iter() {
            w.f32(v.as_f64() as f32);
        }
        for v in b.iter() {
            w.f32(v.as_f64() as f32);
        }
    }
    w.into_inner()
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<DnnParams<T>> {
    let mut r = ByteReader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    r.version("checkpoint", CHECKPOINT_VERSION)?;
    let n_sizes = r.u32()? as usize;
    if n_sizes < 2 || n_sizes > 64 {
        return Err(KwsError::Format(format!("implausible layer count {n_sizes}")));
    }
    let sizes = (0..n_sizes).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    validate_sizes(&sizes).map_err(|e| KwsError::Format(e.to_string()))?;
    if r.remaining() != 4 * param_count(&sizes) {
        return Err(KwsError::Format(format!(
            "checkpoint body is {} bytes, expected {}",
            r.remaining(),
            4 * param_count(&sizes)
        )));
    }
    let mut params = DnnParams::<T>::zeros(&sizes)?;
    for l in 0..params.num_layers() {
        for v in params.weights[l].iter_mut() {
            *v = T::lit(r.f32()? as f64);
        }
        for v in params.biases[l].iter_mut() {
            *v = T::lit(r.f32()? as f64);
        }
    }
    r.finish()?;
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &DnnParams<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<DnnParams<T>> {
    decode_checkpoint(&fs::read(path)?)
}
