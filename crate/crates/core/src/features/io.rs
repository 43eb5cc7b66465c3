//! WAV ingestion and the `KWSF` feature dump format.
//!
//! Feature dump layout (little-endian): magic `KWSF`, version `u32`,
//! frame count `u32`, dimension `u32`, then `T·d` row-major `f32` values.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::mfcc::AudioBuffer;
use crate::binfmt::{ByteReader, ByteWriter};
use crate::error::{KwsError, Result};
use crate::Scalar;

pub const FEATURE_MAGIC: &[u8; 4] = b"KWSF";
pub const FEATURE_VERSION: u32 = 1;

/// Reads a 16-bit mono PCM WAV file. Only 16 kHz input is accepted.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(KwsError::invalid(format!("expected mono audio, got {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(KwsError::invalid("expected 16-bit integer PCM"));
    }
    if spec.sample_rate != 16_000 {
        return Err(KwsError::invalid(format!(
            "expected 16000 Hz audio, got {} Hz (resampling is not supported)",
            spec.sample_rate
        )));
    }
    let samples = reader.into_samples::<i16>().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(AudioBuffer::new(samples, spec.sample_rate))
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in &audio.samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn encode_features<T: Scalar>(frames: &Array2<T>) -> Vec<u8> {
    let (t, d) = frames.dim();
    let mut w = ByteWriter::with_capacity(16 + 4 * t * d);
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.u32(t as u32);
    w.u32(d as u32);
    for v in frames.iter() {
        w.f32(v.as_f64() as f32);
    }
    w.into_inner()
}

pub fn decode_features<T: Scalar>(bytes: &[u8]) -> Result<Array2<T>> {
    let mut r = ByteReader::new(bytes, "feature file");
    r.magic(FEATURE_MAGIC)?;
    r.version("feature file", FEATURE_VERSION)?;
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut data = Vec::with_capacity(t * d);
    for _ in 0..t * d {
        data.push(T::lit(r.f32()? as f64));
    }
    r.finish()?;
    Array2::from_shape_vec((t, d), data).map_err(|e| KwsError::Format(e.to_string()))
}

pub fn write_features<T: Scalar>(path: impl AsRef<Path>, frames: &Array2<T>) -> Result<()> {
    fs::write(path, encode_features(frames))?;
    Ok(())
}

pub fn read_features<T: Scalar>(path: impl AsRef<Path>) -> Result<Array2<T>> {
    decode_features(&fs::read(path)?)
}
