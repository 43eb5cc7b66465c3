//! MFCC frontend: pre-emphasis, Hann window, power spectrum, mel filterbank,
//! log with floor, DCT-II.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::Scalar;

/// Mono 16-bit PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<i16>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    /// Builds a buffer from float samples in [-1, 1], rejecting non-finite values.
    pub fn from_float(samples: &[f64], sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(KwsError::invalid(format!("non-finite sample at index {i}")));
        }
        let samples = samples
            .iter()
            .map(|&v| (v * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
            .collect();
        Ok(Self::new(samples, sample_rate))
    }

    /// Multiplies every sample by `gain`, saturating at the i16 range.
    pub fn with_gain(&self, gain: f64) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|&s| (s as f64 * gain).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
            .collect();
        Self::new(samples, self.sample_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub num_filters: usize,
    pub num_ceps: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
    pub low_hz: f64,
    /// Upper filterbank edge; Nyquist when `None`.
    pub high_hz: Option<f64>,
    /// Cepstral mean normalization over the utterance.
    pub cmn: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            num_filters: 40,
            num_ceps: 13,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
            low_hz: 0.0,
            high_hz: None,
            cmn: false,
        }
    }
}

impl MfccConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    /// Number of frames produced for `num_samples` input samples.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        let win = self.window_len();
        if num_samples < win {
            0
        } else {
            (num_samples - win) / self.hop_len() + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(KwsError::invalid("sample_rate must be positive"));
        }
        if self.window_len() == 0 || self.hop_len() == 0 {
            return Err(KwsError::invalid("window and hop must span at least one sample"));
        }
        if self.fft_size < self.window_len() {
            return Err(KwsError::invalid(format!(
                "fft_size {} shorter than window {}",
                self.fft_size,
                self.window_len()
            )));
        }
        if self.num_ceps == 0 || self.num_filters < self.num_ceps {
            return Err(KwsError::invalid(format!(
                "need num_filters ({}) >= num_ceps ({}) >= 1",
                self.num_filters, self.num_ceps
            )));
        }
        let high = self.high_hz();
        if !(self.low_hz >= 0.0 && self.low_hz < high && high <= self.sample_rate as f64 / 2.0) {
            return Err(KwsError::invalid("filterbank edges must satisfy 0 <= low < high <= nyquist"));
        }
        if !(self.log_floor > 0.0) {
            return Err(KwsError::invalid("log_floor must be positive"));
        }
        Ok(())
    }

    fn high_hz(&self) -> f64 {
        self.high_hz.unwrap_or(self.sample_rate as f64 / 2.0)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters evaluated at the FFT bin centre frequencies.
/// Returns `num_filters × (fft_size/2 + 1)`.
pub fn mel_filterbank(config: &MfccConfig) -> Array2<f64> {
    let n_bins = config.fft_size / 2 + 1;
    let lo = hz_to_mel(config.low_hz);
    let hi = hz_to_mel(config.high_hz());
    let edges: Vec<f64> = (0..config.num_filters + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.num_filters + 1) as f64))
        .collect();
    let bin_hz = config.sample_rate as f64 / config.fft_size as f64;
    Array2::from_shape_fn((config.num_filters, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > l && f <= c {
            (f - l) / (c - l)
        } else if f > c && f < r {
            (r - f) / (r - c)
        } else {
            0.0
        }
    })
}

/// Symmetric Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Orthonormal DCT-II basis, `num_ceps × num_filters`.
pub fn dct_matrix(num_ceps: usize, num_filters: usize) -> Array2<f64> {
    let m = num_filters as f64;
    Array2::from_shape_fn((num_ceps, num_filters), |(k, n)| {
        let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
        scale * (PI * k as f64 * (n as f64 + 0.5) / m).cos()
    })
}

/// Computes a `T × num_ceps` MFCC matrix.
pub fn compute_mfcc<T: Scalar + FftNum>(audio: &AudioBuffer, config: &MfccConfig) -> Result<Array2<T>> {
    config.validate()?;
    if audio.sample_rate != config.sample_rate {
        return Err(KwsError::invalid(format!(
            "audio sample rate {} does not match frontend rate {}",
            audio.sample_rate, config.sample_rate
        )));
    }
    let win = config.window_len();
    let hop = config.hop_len();
    let n_frames = config.num_frames(audio.samples.len());
    if n_frames == 0 {
        return Err(KwsError::EmptyInput(format!(
            "{} samples is shorter than one {}-sample window",
            audio.samples.len(),
            win
        )));
    }

    let scale = T::lit(1.0 / 32768.0);
    let x: Vec<T> = audio.samples.iter().map(|&s| T::lit(s as f64) * scale).collect();
    let alpha = T::lit(config.pre_emphasis);
    let mut emph = Vec::with_capacity(x.len());
    emph.push(x[0]);
    emph.extend(x.windows(2).map(|w| w[1] - alpha * w[0]));

    let window: Vec<T> = hann(win).into_iter().map(T::lit).collect();
    let fbank = mel_filterbank(config).mapv(T::lit);
    let dct = dct_matrix(config.num_ceps, config.num_filters).mapv(T::lit);
    let n_bins = config.fft_size / 2 + 1;
    let norm = T::lit(1.0 / config.fft_size as f64);
    let floor = T::lit(config.log_floor);

    let fft = FftPlanner::<T>::new().plan_fft_forward(config.fft_size);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); config.fft_size];
    let mut power = Array2::<T>::zeros((n_frames, n_bins));
    for f in 0..n_frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(emph[start + i] * window[i], T::zero())
            } else {
                Complex::new(T::zero(), T::zero())
            };
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[[f, k]] = buf[k].norm_sqr() * norm;
        }
    }

    let log_energies = power.dot(&fbank.t()).mapv(|e| e.max(floor).ln());
    let mut ceps = log_energies.dot(&dct.t());
    if config.cmn {
        let mean = ceps.mean_axis(ndarray::Axis(0)).expect("at least one frame");
        ceps -= &mean;
    }
    if ceps.iter().any(|v| !v.is_finite()) {
        return Err(KwsError::invalid("non-finite MFCC output"));
    }
    Ok(ceps)
}
