//! Synthetic EEG datasets, windowing into node-feature snapshots, the
//! binary dataset format, and train/test splitting.
//!
//! Synthetic signals stand in for recorded EEG at desk scale: each class
//! has a fixed latent spatial pattern (a DC offset and an oscillation
//! amplitude per channel) modulating a class-specific sinusoid, each
//! subject applies a fixed channel gain and phase shift, and Gaussian
//! noise is added on top. Everything is deterministic for a given seed.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::encoder::{EncoderError, NodeFeatureSnapshot};
use crate::graph::ElectrodeLayout;
use crate::tensor::{Matrix, TensorError};

pub const DATASET_MAGIC: [u8; 4] = *b"EEGD";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config: {0}")]
    InvalidConfig(String),
    #[error("layout has {layout} electrodes but config asks for {channels} channels")]
    LayoutMismatch { layout: usize, channels: usize },
    #[error("sequence too short: needs {needed} samples, has {available}")]
    SequenceTooShort { needed: usize, available: usize },
    #[error("window length must be at least 1")]
    ZeroWindow,
    #[error("unknown subject id {0}")]
    UnknownSubject(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated dataset file while reading {context}")]
    Truncated { context: String },
    #[error("dataset shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One trial: a CxT signal block with its subject and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct EegSequence {
    pub subject: usize,
    pub label: usize,
    /// Channels x time samples, arbitrary amplitude units.
    pub signal: Matrix,
    /// Metadata only; windowing is sample-based.
    pub sample_rate: f64,
}

/// Synthetic-dataset recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    pub classes: usize,
    /// Sequences per (subject, class) pair.
    pub sequences_per: usize,
    pub channels: usize,
    pub samples: usize,
    /// Additive Gaussian noise level.
    pub noise_sigma: f64,
    /// Seeds class patterns, subject effects, and noise.
    pub seed: u64,
    /// Strength of per-subject gain and phase deviations.
    pub subject_shift: f64,
    pub sample_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 3,
            classes: 5,
            sequences_per: 20,
            channels: 16,
            samples: 256,
            noise_sigma: 2.5,
            seed: 42,
            subject_shift: 0.3,
            sample_rate: 128.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        for (v, name) in [
            (self.subjects, "subjects"),
            (self.classes, "classes"),
            (self.sequences_per, "sequences_per"),
            (self.channels, "channels"),
            (self.samples, "samples"),
        ] {
            if v == 0 {
                return Err(DataError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        if self.sample_rate <= 0.0 || self.sample_rate.is_nan() {
            return Err(DataError::InvalidConfig("sample_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// An immutable collection of sequences sharing one channel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate: f64,
    pub sequences: Vec<EegSequence>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.sequences.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    pub fn validate_layout(&self, layout: &ElectrodeLayout) -> Result<(), DataError> {
        if layout.len() != self.channels {
            return Err(DataError::LayoutMismatch { layout: layout.len(), channels: self.channels });
        }
        Ok(())
    }

    /// Signals of the given sequences concatenated along time, e.g. to feed
    /// functional-connectivity estimation.
    pub fn concat_signals(&self, indices: &[usize]) -> Result<Matrix, DataError> {
        if indices.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let c = self.channels;
        let total: usize = indices.len() * self.samples;
        let mut m = Matrix::zeros(c, total);
        let mut offset = 0;
        for &idx in indices {
            let sig = &self.sequences[idx].signal;
            for ch in 0..c {
                for t in 0..self.samples {
                    m.set(ch, offset + t, sig.at(ch, t));
                }
            }
            offset += self.samples;
        }
        Ok(m)
    }
}

fn subseed(seed: u64, salt: u64) -> u64 {
    // splitmix64 step keeps the derived streams decorrelated.
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates a synthetic dataset over `layout`. Sequences are emitted in
/// (subject, class, repetition) order and the result is bit-identical for
/// a given config.
pub fn generate_synthetic_dataset(
    cfg: &SynthConfig,
    layout: &ElectrodeLayout,
) -> Result<Dataset, DataError> {
    cfg.validate()?;
    if layout.len() != cfg.channels {
        return Err(DataError::LayoutMismatch { layout: layout.len(), channels: cfg.channels });
    }
    let j = cfg.channels;

    // Class identity lives in the spatial patterns, not in per-channel
    // marginals alone: a weak DC offset plus a per-channel oscillation
    // amplitude on a carrier shared by all classes.
    const DC_SCALE: f64 = 0.3;
    const CARRIER_HZ: f64 = 10.0;
    let mut class_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 1));
    let normal = StandardNormal;
    let mut dc = Vec::with_capacity(cfg.classes);
    let mut osc = Vec::with_capacity(cfg.classes);
    for _ in 0..cfg.classes {
        dc.push(
            (0..j)
                .map(|_| {
                    DC_SCALE * <StandardNormal as Distribution<f64>>::sample(&normal, &mut class_rng)
                })
                .collect::<Vec<f64>>(),
        );
        osc.push(
            (0..j)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&normal, &mut class_rng))
                .collect::<Vec<f64>>(),
        );
    }

    let mut subject_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 2));
    let mut gain = Vec::with_capacity(cfg.subjects);
    let mut phase = Vec::with_capacity(cfg.subjects);
    for _ in 0..cfg.subjects {
        gain.push(
            (0..j)
                .map(|_| 1.0 + cfg.subject_shift * subject_rng.gen_range(-1.0..1.0))
                .collect::<Vec<f64>>(),
        );
        phase.push(cfg.subject_shift * subject_rng.gen_range(0.0..std::f64::consts::TAU));
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 3));
    let mut sequences = Vec::with_capacity(cfg.subjects * cfg.classes * cfg.sequences_per);
    for s in 0..cfg.subjects {
        for k in 0..cfg.classes {
            for _ in 0..cfg.sequences_per {
                let mut signal = Matrix::zeros(j, cfg.samples);
                for ch in 0..j {
                    for t in 0..cfg.samples {
                        let phase_t =
                            std::f64::consts::TAU * CARRIER_HZ * t as f64 / cfg.sample_rate
                                + phase[s];
                        let clean = gain[s][ch] * (dc[k][ch] + osc[k][ch] * phase_t.sin());
                        let noise: f64 =
                            <StandardNormal as Distribution<f64>>::sample(&normal, &mut noise_rng);
                        signal.set(ch, t, clean + cfg.noise_sigma * noise);
                    }
                }
                sequences.push(EegSequence {
                    subject: s,
                    label: k,
                    signal,
                    sample_rate: cfg.sample_rate,
                });
            }
        }
    }
    Ok(Dataset {
        subjects: cfg.subjects,
        channels: j,
        samples: cfg.samples,
        sample_rate: cfg.sample_rate,
        sequences,
    })
}

/// Per-window node features. The default extractor emits, per channel,
/// `(mean, population std, mean |first difference|)` — the three-wide input
/// the embedding expects.
pub trait FeatureExtractor {
    fn extract(&self, window: &[f64]) -> [f64; 3];
}

/// The standard windowed statistics extractor.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanStdDiff;

impl FeatureExtractor for MeanStdDiff {
    fn extract(&self, window: &[f64]) -> [f64; 3] {
        let n = window.len() as f64;
        let mean = window.iter().sum::<f64>() / n;
        let var = window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let diff = if window.len() < 2 {
            0.0
        } else {
            window.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>()
                / (window.len() - 1) as f64
        };
        [mean, var.sqrt(), diff]
    }
}

/// Splits the first `f * window_length` samples into `f` contiguous windows
/// and extracts per-channel features with `extractor`.
pub fn windowize_with(
    seq: &EegSequence,
    f: usize,
    window_length: usize,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<NodeFeatureSnapshot>, DataError> {
    if window_length == 0 {
        return Err(DataError::ZeroWindow);
    }
    let needed = f * window_length;
    let available = seq.signal.cols();
    if needed > available {
        return Err(DataError::SequenceTooShort { needed, available });
    }
    let j = seq.signal.rows();
    let mut snapshots = Vec::with_capacity(f);
    for w in 0..f {
        let mut features = Matrix::zeros(j, 3);
        for ch in 0..j {
            let row = seq.signal.row(ch);
            let window = &row[w * window_length..(w + 1) * window_length];
            let [a, b, c] = extractor.extract(window);
            features.set(ch, 0, a);
            features.set(ch, 1, b);
            features.set(ch, 2, c);
        }
        snapshots.push(NodeFeatureSnapshot::new(w, features)?);
    }
    Ok(snapshots)
}

/// [`windowize_with`] using the standard extractor.
pub fn windowize(
    seq: &EegSequence,
    f: usize,
    window_length: usize,
) -> Result<Vec<NodeFeatureSnapshot>, DataError> {
    windowize_with(seq, f, window_length, &MeanStdDiff)
}

/// Evaluation protocol for splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Train and test within one subject (stratified 80/20 by class).
    SubjectDependent { subject: usize },
    /// The held-out subject is entirely test; everyone else trains.
    LeaveOneSubjectOut { held_out: usize },
}

/// Disjoint train/test index lists into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub protocol: Protocol,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

const TRAIN_FRACTION: f64 = 0.8;

/// Builds a split. Subject-dependent shuffles each class's sequences with
/// the seed and sends ~80% to train; leave-one-subject-out needs no seed.
pub fn make_split(
    dataset: &Dataset,
    protocol: Protocol,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let subject_of = |p: Protocol| match p {
        Protocol::SubjectDependent { subject } => subject,
        Protocol::LeaveOneSubjectOut { held_out } => held_out,
    };
    let subject = subject_of(protocol);
    if !dataset.sequences.iter().any(|s| s.subject == subject) {
        return Err(DataError::UnknownSubject(subject));
    }
    match protocol {
        Protocol::SubjectDependent { subject } => {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 4));
            let n_classes = dataset.n_classes();
            let mut train = Vec::new();
            let mut test = Vec::new();
            for class in 0..n_classes {
                let mut indices: Vec<usize> = dataset
                    .sequences
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.subject == subject && s.label == class)
                    .map(|(i, _)| i)
                    .collect();
                indices.shuffle(&mut rng);
                let n_train = (TRAIN_FRACTION * indices.len() as f64).round() as usize;
                train.extend(&indices[..n_train]);
                test.extend(&indices[n_train..]);
            }
            train.sort_unstable();
            test.sort_unstable();
            Ok(DatasetSplit { protocol, train, test })
        }
        Protocol::LeaveOneSubjectOut { held_out } => {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (i, s) in dataset.sequences.iter().enumerate() {
                if s.subject == held_out {
                    test.push(i);
                } else {
                    train.push(i);
                }
            }
            Ok(DatasetSplit { protocol, train, test })
        }
    }
}

fn io_read_exact(r: &mut impl Read, buf: &mut [u8], context: &str) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated { context: context.to_string() }
        } else {
            DataError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, context: &str) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    io_read_exact(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, context: &str) -> Result<f64, DataError> {
    let mut b = [0u8; 8];
    io_read_exact(r, &mut b, context)?;
    Ok(f64::from_le_bytes(b))
}

/// Writes the dataset: magic `EEGD`, little-endian `u32` header
/// `(version, subjects, channels, samples, sequence count)` plus the sample
/// rate as `f64`, then per sequence `(subject u32, label u32, CxT f64
/// row-major)`.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    for v in [
        DATASET_VERSION,
        dataset.subjects as u32,
        dataset.channels as u32,
        dataset.samples as u32,
        dataset.sequences.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&dataset.sample_rate.to_le_bytes())?;
    for seq in &dataset.sequences {
        if seq.signal.shape() != (dataset.channels, dataset.samples) {
            return Err(DataError::ShapeMismatch {
                context: format!(
                    "sequence block is {}x{}, header says {}x{}",
                    seq.signal.rows(),
                    seq.signal.cols(),
                    dataset.channels,
                    dataset.samples
                ),
            });
        }
        w.write_all(&(seq.subject as u32).to_le_bytes())?;
        w.write_all(&(seq.label as u32).to_le_bytes())?;
        for &v in seq.signal.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]; the round trip is bit-exact.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    io_read_exact(&mut r, &mut magic, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(DataError::BadMagic {
            expected: String::from_utf8_lossy(&DATASET_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != DATASET_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let subjects = read_u32(&mut r, "subjects")? as usize;
    let channels = read_u32(&mut r, "channels")? as usize;
    let samples = read_u32(&mut r, "samples")? as usize;
    let count = read_u32(&mut r, "sequence count")? as usize;
    let sample_rate = read_f64(&mut r, "sample_rate")?;
    if channels == 0 || samples == 0 {
        return Err(DataError::ShapeMismatch {
            context: format!("header declares {channels} channels x {samples} samples"),
        });
    }
    let mut sequences = Vec::with_capacity(count);
    for i in 0..count {
        let subject = read_u32(&mut r, &format!("sequence {i} subject"))? as usize;
        let label = read_u32(&mut r, &format!("sequence {i} label"))? as usize;
        if subject >= subjects {
            return Err(DataError::ShapeMismatch {
                context: format!("sequence {i} subject {subject} >= header subjects {subjects}"),
            });
        }
        let mut block = vec![0u8; channels * samples * 8];
        io_read_exact(&mut r, &mut block, &format!("sequence {i} signal"))?;
        let data: Vec<f64> = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let signal = Matrix::new(channels, samples, data).map_err(|e| DataError::ShapeMismatch {
            context: format!("sequence {i}: {e}"),
        })?;
        sequences.push(EegSequence { subject, label, signal, sample_rate });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(DataError::ShapeMismatch {
            context: format!("{} trailing bytes after declared payload", rest.len()),
        });
    }
    Ok(Dataset { subjects, channels, samples, sample_rate, sequences })
}
