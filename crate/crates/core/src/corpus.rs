//! Corpus storage: JSON-lines manifest, `KWSF` feature files and `KWSL`
//! label files, plus the in-memory corpus used by training and evaluation.
//!
//! Label file layout (little-endian): magic `KWSL`, version `u32`, then one
//! `u16` state index per frame.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binfmt::{ByteReader, ByteWriter};
use crate::error::{KwsError, Result};
use crate::features::{read_features, stack_context, write_features, FrameFeatures};
use crate::hmm::Topology;
use crate::sampling::{UtteranceSpan, Window};
use crate::synth::{SynthConfig, SynthGenerator};

pub const LABEL_MAGIC: &[u8; 4] = b"KWSL";
pub const LABEL_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub features_path: String,
    pub labels_path: String,
    pub kw_start_frame: Option<usize>,
    pub kw_end_frame: Option<usize>,
}

impl ManifestEntry {
    pub fn keyword(&self) -> Result<Option<Window>> {
        match (self.kw_start_frame, self.kw_end_frame) {
            (Some(s), Some(e)) => Window::new(s, e).map(Some),
            (None, None) => Ok(None),
            _ => Err(KwsError::invalid(format!("{}: keyword window has only one edge", self.id))),
        }
    }
}

pub fn encode_labels(labels: &[u16]) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(8 + 2 * labels.len());
    w.bytes(LABEL_MAGIC);
    w.u32(LABEL_VERSION);
    for &l in labels {
        w.u16(l);
    }
    w.into_inner()
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u16>> {
    let mut r = ByteReader::new(bytes, "label file");
    r.magic(LABEL_MAGIC)?;
    r.version("label file", LABEL_VERSION)?;
    if r.remaining() % 2 != 0 {
        return Err(KwsError::Format("label file has an odd number of body bytes".into()));
    }
    (0..r.remaining() / 2).map(|_| r.u16()).collect()
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u16]) -> Result<()> {
    fs::write(path, encode_labels(labels))?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u16>> {
    decode_labels(&fs::read(path)?)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            KwsError::Format(format!("{} line {}: {e}", path.as_ref().display(), i + 1))
        })?);
    }
    Ok(out)
}

/// A labelled utterance held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T × base_dim` features before context stacking.
    pub base: Array2<f64>,
    pub labels: Vec<u16>,
    pub keyword: Option<Window>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.base.nrows()
    }

    pub fn span(&self) -> Option<UtteranceSpan> {
        self.keyword.map(|keyword| UtteranceSpan {
            num_frames: self.num_frames(),
            keyword,
        })
    }

    pub fn stacked(&self, delta: usize) -> Result<FrameFeatures<f64>> {
        stack_context(&self.base, delta)
    }

    /// Checks labels against the topology and the keyword window against the
    /// labels (first and last keyword-state frames).
    pub fn validate(&self, topology: &Topology) -> Result<()> {
        if self.labels.len() != self.num_frames() {
            return Err(KwsError::invalid(format!(
                "{}: {} labels for {} frames",
                self.id,
                self.labels.len(),
                self.num_frames()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= topology.num_states) {
            return Err(KwsError::invalid(format!("{}: label {bad} out of range", self.id)));
        }
        if let Some(w) = self.keyword {
            if w.end > self.num_frames() {
                return Err(KwsError::invalid(format!("{}: keyword window past end", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::num_frames).sum()
    }

    pub fn total_hours(&self, frame_hop_sec: f64) -> f64 {
        self.total_frames() as f64 * frame_hop_sec / 3600.0
    }

    pub fn label_sequences(&self) -> Vec<&[u16]> {
        self.utterances.iter().map(|u| u.labels.as_slice()).collect()
    }

    pub fn keyword_count(&self) -> usize {
        self.utterances.iter().filter(|u| u.keyword.is_some()).count()
    }

    pub fn validate(&self, topology: &Topology) -> Result<()> {
        if self.is_empty() {
            return Err(KwsError::EmptyInput("corpus has no utterances".into()));
        }
        self.utterances.iter().try_for_each(|u| u.validate(topology))
    }

    /// Loads every manifest entry; paths resolve against the manifest directory.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let entries = read_manifest(manifest)?;
        let utterances = entries
            .iter()
            .map(|e| {
                Ok(Utterance {
                    id: e.id.clone(),
                    base: read_features(dir.join(&e.features_path))?,
                    labels: read_labels(dir.join(&e.labels_path))?,
                    keyword: e.keyword()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { utterances })
    }

    /// Writes feature/label files and the manifest into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("feats"))?;
        fs::create_dir_all(dir.join("labels"))?;
        let mut entries = Vec::with_capacity(self.len());
        for u in &self.utterances {
            let features_path = format!("feats/{}.kwsf", u.id);
            let labels_path = format!("labels/{}.kwsl", u.id);
            write_features(dir.join(&features_path), &u.base)?;
            write_labels(dir.join(&labels_path), &u.labels)?;
            entries.push(ManifestEntry {
                id: u.id.clone(),
                features_path,
                labels_path,
                kw_start_frame: u.keyword.map(|w| w.start),
                kw_end_frame: u.keyword.map(|w| w.end),
            });
        }
        let manifest = dir.join(MANIFEST_FILE);
        write_manifest(&manifest, &entries)?;
        Ok(manifest)
    }
}

/// Generates `n` synthetic utterances named `{prefix}{index:05}`, utterance
/// `i` drawn from stream `i` of `seed`. Output is independent of threading.
pub fn synthesize_corpus(config: &SynthConfig, n: usize, seed: u64, prefix: &str) -> Result<Corpus> {
    if n == 0 {
        return Err(KwsError::invalid("corpus size must be at least 1"));
    }
    let gen = SynthGenerator::new(config.clone())?;
    let utterances = (0..n)
        .into_par_iter()
        .map(|i| {
            let u = gen.utterance_at(seed, i as u64);
            Utterance {
                id: format!("{prefix}{i:05}"),
                base: u.features,
                labels: u.state_labels,
                keyword: Some(u.keyword_window),
            }
        })
        .collect();
    Ok(Corpus { utterances })
}

/// Generates a corpus and writes it to `dir`; returns the manifest path.
pub fn generate_corpus(config: &SynthConfig, n: usize, seed: u64, prefix: &str, dir: impl AsRef<Path>) -> Result<PathBuf> {
    synthesize_corpus(config, n, seed, prefix)?.save(dir)
}
