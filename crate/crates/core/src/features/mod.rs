//! Acoustic frontend: MFCC extraction, context stacking and feature files.

mod context;
mod io;
mod mfcc;

pub use context::{stack_context, stack_rows, FrameFeatures, FRAME_HOP_SEC};
pub use io::{
    decode_features, encode_features, read_features, read_wav, write_features, write_wav,
    FEATURE_MAGIC, FEATURE_VERSION,
};
pub use mfcc::{compute_mfcc, dct_matrix, hann, hz_to_mel, mel_filterbank, mel_to_hz, AudioBuffer, MfccConfig};
