//! Dataset container with a bit-exact binary file format, participant-wise
//! splitting, channel permutations, and a planted-signal synthetic generator.
//!
//! EEG samples are `[129 channels, 500 timepoints]` (one second at 500 Hz);
//! gaze targets are 2-D screen coordinates in native units.
//!
//! File format (little-endian): magic `EEGZ`, u32 version = 1, u64 n,
//! u32 channels, u32 timepoints, then eeg f32 `[n][channels][timepoints]`,
//! gaze f32 `[n][2]`, participant u32 `[n]`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{RngStream, Tensor};

pub const CHANNELS: usize = 129;
pub const TIMEPOINTS: usize = 500;
pub const SAMPLE_RATE_HZ: f64 = 500.0;

const MAGIC: [u8; 4] = *b"EEGZ";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected \"EEGZ\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found}, expected {FORMAT_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("file truncated while reading {section}")]
    Truncated { section: &'static str },
    #[error("{field} mismatch: file has {found}, expected {expected}")]
    ShapeMismatch {
        field: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("malformed permutation: {0}")]
    MalformedPermutation(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// EEG samples with gaze targets and participant ids. Immutable once built;
/// cheap to share across evaluation workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    eeg: Vec<f32>,          // [n][CHANNELS][TIMEPOINTS]
    gaze: Vec<f32>,         // [n][2]
    participants: Vec<u32>, // [n]
}

impl Dataset {
    pub fn new(eeg: Vec<f32>, gaze: Vec<f32>, participants: Vec<u32>) -> Result<Self, DataError> {
        let n = participants.len();
        if eeg.len() != n * CHANNELS * TIMEPOINTS || gaze.len() != n * 2 {
            return Err(DataError::Inconsistent(format!(
                "{n} participants, {} eeg values, {} gaze values",
                eeg.len(),
                gaze.len()
            )));
        }
        if gaze.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Inconsistent("non-finite gaze coordinate".into()));
        }
        Ok(Dataset {
            eeg,
            gaze,
            participants,
        })
    }

    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }

    pub fn eeg_sample(&self, i: usize) -> &[f32] {
        &self.eeg[i * CHANNELS * TIMEPOINTS..(i + 1) * CHANNELS * TIMEPOINTS]
    }

    pub fn gaze_sample(&self, i: usize) -> [f32; 2] {
        [self.gaze[2 * i], self.gaze[2 * i + 1]]
    }

    pub fn participant(&self, i: usize) -> u32 {
        self.participants[i]
    }

    pub fn participants(&self) -> &[u32] {
        &self.participants
    }

    /// Sorted unique participant ids.
    pub fn distinct_participants(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.participants.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let stride = CHANNELS * TIMEPOINTS;
        let mut eeg = Vec::with_capacity(indices.len() * stride);
        let mut gaze = Vec::with_capacity(indices.len() * 2);
        let mut participants = Vec::with_capacity(indices.len());
        for &i in indices {
            eeg.extend_from_slice(&self.eeg[i * stride..(i + 1) * stride]);
            gaze.extend_from_slice(&self.gaze[2 * i..2 * i + 2]);
            participants.push(self.participants[i]);
        }
        Dataset {
            eeg,
            gaze,
            participants,
        }
    }

    /// Input/target tensors for the model: `[B, 1, 129, 500]` and `[B, 2]`.
    pub fn batch_tensors(&self, indices: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let stride = CHANNELS * TIMEPOINTS;
        let mut x = Vec::with_capacity(indices.len() * stride);
        let mut y = Vec::with_capacity(indices.len() * 2);
        for &i in indices {
            x.extend_from_slice(&self.eeg[i * stride..(i + 1) * stride]);
            y.extend_from_slice(&self.gaze[2 * i..2 * i + 2]);
        }
        (
            Tensor::from_vec(vec![indices.len(), 1, CHANNELS, TIMEPOINTS], x)
                .expect("consistent dataset layout"),
            Tensor::from_vec(vec![indices.len(), 2], y).expect("consistent dataset layout"),
        )
    }

    pub fn all_gaze(&self) -> Vec<[f64; 2]> {
        (0..self.len())
            .map(|i| {
                let g = self.gaze_sample(i);
                [g[0] as f64, g[1] as f64]
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// file format
// ---------------------------------------------------------------------------

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    crate::fsutil::atomic_write(path, |w| {
        w.write_all(&MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(ds.len() as u64)?;
        w.write_u32::<LittleEndian>(CHANNELS as u32)?;
        w.write_u32::<LittleEndian>(TIMEPOINTS as u32)?;
        let mut buf = Vec::with_capacity(8192 * 4);
        for chunk in ds.eeg.chunks(8192) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        for v in &ds.gaze {
            w.write_f32::<LittleEndian>(*v)?;
        }
        for p in &ds.participants {
            w.write_u32::<LittleEndian>(*p)?;
        }
        Ok(())
    })?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_section(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(DataError::BadMagic { found: magic });
    }
    let version = read_u32(&mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion { found: version });
    }
    let n = read_u64(&mut r, "sample count")? as usize;
    let channels = read_u32(&mut r, "channels")?;
    let timepoints = read_u32(&mut r, "timepoints")?;
    if channels as usize != CHANNELS {
        return Err(DataError::ShapeMismatch {
            field: "channels",
            expected: CHANNELS as u64,
            found: channels as u64,
        });
    }
    if timepoints as usize != TIMEPOINTS {
        return Err(DataError::ShapeMismatch {
            field: "timepoints",
            expected: TIMEPOINTS as u64,
            found: timepoints as u64,
        });
    }

    let mut eeg = vec![0f32; n * CHANNELS * TIMEPOINTS];
    r.read_f32_into::<LittleEndian>(&mut eeg)
        .map_err(|e| truncation(e, "eeg payload"))?;
    let mut gaze = vec![0f32; n * 2];
    r.read_f32_into::<LittleEndian>(&mut gaze)
        .map_err(|e| truncation(e, "gaze payload"))?;
    let mut participants = vec![0u32; n];
    r.read_u32_into::<LittleEndian>(&mut participants)
        .map_err(|e| truncation(e, "participant payload"))?;

    Dataset::new(eeg, gaze, participants)
}

fn read_section<R: Read>(r: &mut R, buf: &mut [u8], section: &'static str) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| truncation(e, section))
}

fn read_u32<R: Read>(r: &mut R, section: &'static str) -> Result<u32, DataError> {
    r.read_u32::<LittleEndian>().map_err(|e| truncation(e, section))
}

fn read_u64<R: Read>(r: &mut R, section: &'static str) -> Result<u64, DataError> {
    r.read_u64::<LittleEndian>().map_err(|e| truncation(e, section))
}

fn truncation(e: io::Error, section: &'static str) -> DataError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        DataError::Truncated { section }
    } else {
        DataError::Io(e)
    }
}

/// Imports a directory of raw little-endian arrays (`meta.json` with
/// `{"n": ..}` plus `eeg.f32le`, `gaze.f32le`, `participants.u32le`), the
/// documented layout for user-supplied EEGEyeNet exports.
pub fn import_raw_dir(dir: &Path) -> Result<Dataset, DataError> {
    #[derive(Deserialize)]
    struct Meta {
        n: u64,
        #[serde(default = "default_channels")]
        channels: u64,
        #[serde(default = "default_timepoints")]
        timepoints: u64,
    }
    fn default_channels() -> u64 {
        CHANNELS as u64
    }
    fn default_timepoints() -> u64 {
        TIMEPOINTS as u64
    }
    let meta: Meta = serde_json::from_reader(BufReader::new(File::open(dir.join("meta.json"))?))
        .map_err(|e| DataError::Inconsistent(format!("meta.json: {e}")))?;
    if meta.channels as usize != CHANNELS {
        return Err(DataError::ShapeMismatch {
            field: "channels",
            expected: CHANNELS as u64,
            found: meta.channels,
        });
    }
    if meta.timepoints as usize != TIMEPOINTS {
        return Err(DataError::ShapeMismatch {
            field: "timepoints",
            expected: TIMEPOINTS as u64,
            found: meta.timepoints,
        });
    }
    let n = meta.n as usize;
    let mut eeg = vec![0f32; n * CHANNELS * TIMEPOINTS];
    BufReader::new(File::open(dir.join("eeg.f32le"))?)
        .read_f32_into::<LittleEndian>(&mut eeg)
        .map_err(|e| truncation(e, "eeg.f32le"))?;
    let mut gaze = vec![0f32; n * 2];
    BufReader::new(File::open(dir.join("gaze.f32le"))?)
        .read_f32_into::<LittleEndian>(&mut gaze)
        .map_err(|e| truncation(e, "gaze.f32le"))?;
    let mut participants = vec![0u32; n];
    BufReader::new(File::open(dir.join("participants.u32le"))?)
        .read_u32_into::<LittleEndian>(&mut participants)
        .map_err(|e| truncation(e, "participants.u32le"))?;
    Dataset::new(eeg, gaze, participants)
}

// ---------------------------------------------------------------------------
// participant-wise split
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// (train, val, test) fractions, summing to 1.
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: (0.7, 0.15, 0.15),
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let (a, b, c) = self.ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(DataError::InvalidConfig(format!(
                "split ratios must be positive, got {:?}",
                self.ratios
            )));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidConfig(format!(
                "split ratios must sum to 1, got {}",
                a + b + c
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Index-level participant-wise split: participant ids are shuffled by seed,
/// then greedily assigned to test until its sample share reaches the test
/// ratio, then to val likewise; the remainder trains. Every sample of one
/// participant lands in exactly one split.
pub fn split_indices(ds: &Dataset, spec: &SplitSpec) -> Result<SplitIndices, DataError> {
    spec.validate()?;
    let mut pids = ds.distinct_participants();
    if pids.len() < 3 {
        return Err(DataError::InvalidConfig(format!(
            "participant-wise split needs at least 3 participants, got {}",
            pids.len()
        )));
    }
    let mut rng = RngStream::new(spec.seed);
    rng.shuffle(&mut pids);

    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &p in ds.participants() {
        *counts.entry(p).or_insert(0) += 1;
    }
    let n = ds.len() as f64;
    let (_, val_ratio, test_ratio) = spec.ratios;

    #[derive(Clone, Copy, PartialEq)]
    enum Split {
        Train,
        Val,
        Test,
    }
    let mut assignment: BTreeMap<u32, Split> = BTreeMap::new();
    let mut test_share = 0.0;
    let mut val_share = 0.0;
    for &pid in &pids {
        let share = counts[&pid] as f64 / n;
        if test_share < test_ratio {
            assignment.insert(pid, Split::Test);
            test_share += share;
        } else if val_share < val_ratio {
            assignment.insert(pid, Split::Val);
            val_share += share;
        } else {
            assignment.insert(pid, Split::Train);
        }
    }

    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, &p) in ds.participants().iter().enumerate() {
        match assignment[&p] {
            Split::Train => out.train.push(i),
            Split::Val => out.val.push(i),
            Split::Test => out.test.push(i),
        }
    }
    Ok(out)
}

pub fn split_by_participant(
    ds: &Dataset,
    spec: &SplitSpec,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let idx = split_indices(ds, spec)?;
    Ok((
        ds.subset(&idx.train),
        ds.subset(&idx.val),
        ds.subset(&idx.test),
    ))
}

// ---------------------------------------------------------------------------
// channel permutations
// ---------------------------------------------------------------------------

/// A bijection over channel indices; `mapping[new] = old`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPermutation {
    mapping: Vec<usize>,
}

impl ChannelPermutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self, DataError> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n {
                return Err(DataError::MalformedPermutation(format!(
                    "index {m} out of range for {n} channels"
                )));
            }
            if seen[m] {
                return Err(DataError::MalformedPermutation(format!(
                    "duplicate index {m}"
                )));
            }
            seen[m] = true;
        }
        Ok(ChannelPermutation { mapping })
    }

    pub fn identity(n: usize) -> Self {
        ChannelPermutation {
            mapping: (0..n).collect(),
        }
    }

    pub fn reverse(n: usize) -> Self {
        ChannelPermutation {
            mapping: (0..n).rev().collect(),
        }
    }

    pub fn shuffled(n: usize, seed: u64) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        RngStream::new(seed).shuffle(&mut mapping);
        ChannelPermutation { mapping }
    }

    /// Text file of whitespace-separated indices; must list all 129 channels
    /// exactly once (carrier for externally supplied spiral/z-order layouts).
    pub fn from_file(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        let mapping: Vec<usize> = text
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| DataError::MalformedPermutation(format!("not an index: {tok:?}")))
            })
            .collect::<Result<_, _>>()?;
        if mapping.len() != CHANNELS {
            return Err(DataError::MalformedPermutation(format!(
                "expected {CHANNELS} indices, found {}",
                mapping.len()
            )));
        }
        Self::new(mapping)
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationKind {
    Identity,
    Reverse,
    Shuffle { seed: u64 },
    FromFile { path: String },
}

/// Builds one of the standard 129-channel permutations. Spiral and z-order
/// layouts depend on electrode geometry and arrive via `FromFile`.
pub fn builtin_permutation(kind: &PermutationKind) -> Result<ChannelPermutation, DataError> {
    match kind {
        PermutationKind::Identity => Ok(ChannelPermutation::identity(CHANNELS)),
        PermutationKind::Reverse => Ok(ChannelPermutation::reverse(CHANNELS)),
        PermutationKind::Shuffle { seed } => Ok(ChannelPermutation::shuffled(CHANNELS, *seed)),
        PermutationKind::FromFile { path } => ChannelPermutation::from_file(Path::new(path)),
    }
}

/// Reorders EEG channels of every sample; gaze and participants unchanged.
pub fn apply_permutation(ds: &Dataset, perm: &ChannelPermutation) -> Result<Dataset, DataError> {
    if perm.len() != CHANNELS {
        return Err(DataError::MalformedPermutation(format!(
            "dataset has {CHANNELS} channels, permutation covers {}",
            perm.len()
        )));
    }
    let stride = CHANNELS * TIMEPOINTS;
    let mut eeg = vec![0f32; ds.eeg.len()];
    eeg.par_chunks_mut(stride)
        .enumerate()
        .for_each(|(i, sample)| {
            let src = &ds.eeg[i * stride..(i + 1) * stride];
            for (new_c, &old_c) in perm.mapping.iter().enumerate() {
                sample[new_c * TIMEPOINTS..(new_c + 1) * TIMEPOINTS]
                    .copy_from_slice(&src[old_c * TIMEPOINTS..(old_c + 1) * TIMEPOINTS]);
            }
        });
    Ok(Dataset {
        eeg,
        gaze: ds.gaze.clone(),
        participants: ds.participants.clone(),
    })
}

// ---------------------------------------------------------------------------
// synthetic planted-signal generator
// ---------------------------------------------------------------------------

/// Fixation-grid generator: gaze targets are drawn from `grid`, and the
/// normalized coordinates are planted linearly into the amplitudes of
/// per-channel carriers, so a closed-form least-squares fit can certify
/// learnability.
///
/// Signal channel `j` (even encodes x, odd encodes y) carries
/// `amp * (0.8 + 0.6 sin(2 pi f_j t / fs + phi_j)) * 10 uV` with
/// `amp = 1 + 0.9 * coord` and `f_j = 6 + j` Hz; every channel adds Gaussian
/// noise with `sigma = carrier_rms * 10 / snr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub n_participants: usize,
    /// Candidate fixation targets in screen units.
    pub grid: Vec<(f64, f64)>,
    pub signal_channels: Vec<usize>,
    pub snr: f64,
    pub seed: u64,
}

pub const SYNTH_AMPLITUDE_UV: f64 = 10.0;
pub const SYNTH_ENCODE_GAIN: f64 = 0.9;
pub const SYNTH_CARRIER_DC: f64 = 0.8;
pub const SYNTH_CARRIER_AC: f64 = 0.6;

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 1000,
            n_participants: 20,
            grid: grid_points(5, 5, (0.0, 0.0), (1.0, 1.0)),
            signal_channels: (0..16).map(|k| 4 + 8 * k).collect(),
            snr: 5.0,
            seed: 0,
        }
    }
}

/// `nx` by `ny` evenly spaced targets over the given screen rectangle.
pub fn grid_points(nx: usize, ny: usize, lo: (f64, f64), hi: (f64, f64)) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let fx = if nx > 1 { ix as f64 / (nx - 1) as f64 } else { 0.5 };
            let fy = if ny > 1 { iy as f64 / (ny - 1) as f64 } else { 0.5 };
            pts.push((lo.0 + fx * (hi.0 - lo.0), lo.1 + fy * (hi.1 - lo.1)));
        }
    }
    pts
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.grid.is_empty() {
            return Err(DataError::InvalidConfig("empty fixation grid".into()));
        }
        if self.n_participants == 0 {
            return Err(DataError::InvalidConfig("need at least one participant".into()));
        }
        if let Some(&c) = self.signal_channels.iter().find(|&&c| c >= CHANNELS) {
            return Err(DataError::InvalidConfig(format!(
                "signal channel {c} out of range"
            )));
        }
        if !(self.snr > 0.0) {
            return Err(DataError::InvalidConfig(format!(
                "snr must be positive, got {}",
                self.snr
            )));
        }
        Ok(())
    }

    /// Carrier frequency (Hz) of the j-th signal channel.
    pub fn carrier_frequency(j: usize) -> f64 {
        6.0 + j as f64
    }

    /// Carrier phase (radians) of the j-th signal channel.
    pub fn carrier_phase(j: usize) -> f64 {
        j as f64 * 2.399963229728653 // golden angle
    }

    /// RMS of the unit-amplitude carrier (DC pedestal plus sinusoid).
    pub fn carrier_rms() -> f64 {
        (SYNTH_CARRIER_DC * SYNTH_CARRIER_DC + SYNTH_CARRIER_AC * SYNTH_CARRIER_AC / 2.0).sqrt()
    }

    pub fn noise_sigma(&self) -> f64 {
        Self::carrier_rms() * SYNTH_AMPLITUDE_UV / self.snr
    }

    /// Bounding box of the grid, used to normalize coordinates to [-1, 1].
    pub fn grid_bounds(&self) -> ((f64, f64), (f64, f64)) {
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &self.grid {
            lo.0 = lo.0.min(x);
            lo.1 = lo.1.min(y);
            hi.0 = hi.0.max(x);
            hi.1 = hi.1.max(y);
        }
        (lo, hi)
    }
}

pub fn normalize_coord(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        2.0 * (v - lo) / (hi - lo) - 1.0
    } else {
        0.0
    }
}

/// Deterministic generation: sample `i` draws only from substream `i` of the
/// seed, so the result is identical no matter how work is scheduled.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let n = cfg.n_samples;
    let stride = CHANNELS * TIMEPOINTS;
    let mut eeg = vec![0f32; n * stride];
    let mut gaze = vec![0f32; n * 2];
    let participants: Vec<u32> = (0..n).map(|i| (i % cfg.n_participants) as u32).collect();

    let root = RngStream::new(cfg.seed);
    let ((lo_x, lo_y), (hi_x, hi_y)) = cfg.grid_bounds();
    let sigma = cfg.noise_sigma();
    let signal_of: Vec<Option<usize>> = {
        let mut v = vec![None; CHANNELS];
        for (j, &c) in cfg.signal_channels.iter().enumerate() {
            v[c] = Some(j);
        }
        v
    };

    eeg.par_chunks_mut(stride)
        .zip(gaze.par_chunks_mut(2))
        .enumerate()
        .for_each(|(i, (sample, g))| {
            let mut rng = root.substream(i as u64);
            let (tx, ty) = cfg.grid[rng.below(cfg.grid.len())];
            g[0] = tx as f32;
            g[1] = ty as f32;
            let nx = normalize_coord(tx, lo_x, hi_x);
            let ny = normalize_coord(ty, lo_y, hi_y);
            for c in 0..CHANNELS {
                let row = &mut sample[c * TIMEPOINTS..(c + 1) * TIMEPOINTS];
                if let Some(j) = signal_of[c] {
                    let coord = if j % 2 == 0 { nx } else { ny };
                    let amp = (1.0 + SYNTH_ENCODE_GAIN * coord) * SYNTH_AMPLITUDE_UV;
                    let omega = 2.0 * std::f64::consts::PI * SyntheticConfig::carrier_frequency(j)
                        / SAMPLE_RATE_HZ;
                    let phi = SyntheticConfig::carrier_phase(j);
                    for (t, slot) in row.iter_mut().enumerate() {
                        let carrier =
                            SYNTH_CARRIER_DC + SYNTH_CARRIER_AC * (omega * t as f64 + phi).sin();
                        *slot = (amp * carrier) as f32;
                    }
                }
                for slot in row.iter_mut() {
                    *slot += rng.normal(0.0, sigma) as f32;
                }
            }
        });

    Dataset::new(eeg, gaze, participants)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_dataset(n: usize, participants: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_samples: n,
            n_participants: participants,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let ds = tiny_dataset(10, 5, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.eegz");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn load_rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.eegz");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::BadMagic { .. })));

        let ds = tiny_dataset(2, 3, 1);
        save_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // version
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(DataError::UnsupportedVersion { found: 9 })
        ));
    }

    #[test]
    fn load_rejects_wrong_channel_count() {
        let ds = tiny_dataset(2, 3, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.eegz");
        save_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[16] = 64; // channels field
        bytes[17] = 0;
        std::fs::write(&path, &bytes).unwrap();
        match load_dataset(&path) {
            Err(DataError::ShapeMismatch {
                field,
                expected,
                found,
            }) => {
                assert_eq!(field, "channels");
                assert_eq!(expected, 129);
                assert_eq!(found, 64);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_truncation() {
        let ds = tiny_dataset(3, 3, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.eegz");
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn split_partitions_disjointly() {
        let ds = tiny_dataset(200, 20, 7);
        for seed in 0..20 {
            let idx = split_indices(
                &ds,
                &SplitSpec {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            let total = idx.train.len() + idx.val.len() + idx.test.len();
            assert_eq!(total, ds.len());
            let mut all: Vec<usize> = idx
                .train
                .iter()
                .chain(&idx.val)
                .chain(&idx.test)
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());

            let pid_set =
                |ix: &[usize]| -> HashSet<u32> { ix.iter().map(|&i| ds.participant(i)).collect() };
            let (tr, va, te) = (pid_set(&idx.train), pid_set(&idx.val), pid_set(&idx.test));
            assert!(tr.is_disjoint(&va));
            assert!(tr.is_disjoint(&te));
            assert!(va.is_disjoint(&te));
        }
    }

    #[test]
    fn split_share_tracks_ratio() {
        // 20 participants x 50 samples each
        let ds = tiny_dataset(1000, 20, 9);
        let idx = split_indices(
            &ds,
            &SplitSpec {
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let share = idx.train.len() as f64 / ds.len() as f64;
        // greedy fill overshoots by at most one participant (1/20 here)
        assert!((share - 0.7).abs() <= 0.05 + 1e-9, "train share {share}");
    }

    #[test]
    fn split_is_deterministic() {
        let ds = tiny_dataset(100, 10, 2);
        let spec = SplitSpec {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(
            split_indices(&ds, &spec).unwrap(),
            split_indices(&ds, &spec).unwrap()
        );
    }

    #[test]
    fn split_requires_three_participants() {
        let ds = tiny_dataset(10, 2, 0);
        assert!(matches!(
            split_indices(&ds, &SplitSpec::default()),
            Err(DataError::InvalidConfig(_))
        ));
    }

    #[test]
    fn permutation_identity_and_involution() {
        let ds = tiny_dataset(4, 3, 5);
        let id = ChannelPermutation::identity(CHANNELS);
        assert_eq!(apply_permutation(&ds, &id).unwrap(), ds);

        let rev = ChannelPermutation::reverse(CHANNELS);
        let once = apply_permutation(&ds, &rev).unwrap();
        assert_ne!(once, ds);
        let twice = apply_permutation(&once, &rev).unwrap();
        assert_eq!(twice, ds);
    }

    #[test]
    fn permutation_preserves_channel_mean() {
        let ds = tiny_dataset(3, 3, 6);
        let perm = ChannelPermutation::shuffled(CHANNELS, 42);
        let permuted = apply_permutation(&ds, &perm).unwrap();
        for i in 0..ds.len() {
            let mean =
                |d: &Dataset| -> f64 { d.eeg_sample(i).iter().map(|&v| v as f64).sum::<f64>() };
            assert!((mean(&ds) - mean(&permuted)).abs() < 1e-3);
            assert_eq!(ds.gaze_sample(i), permuted.gaze_sample(i));
        }
    }

    #[test]
    fn builtin_permutations() {
        let id = builtin_permutation(&PermutationKind::Identity).unwrap();
        assert_eq!(id.mapping()[..4], [0, 1, 2, 3]);

        let s1 = builtin_permutation(&PermutationKind::Shuffle { seed: 1 }).unwrap();
        let s2 = builtin_permutation(&PermutationKind::Shuffle { seed: 1 }).unwrap();
        assert_eq!(s1, s2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("perm.txt");
        let text: Vec<String> = (0..CHANNELS).rev().map(|i| i.to_string()).collect();
        std::fs::write(&path, text.join(" ")).unwrap();
        let fromfile = builtin_permutation(&PermutationKind::FromFile {
            path: path.display().to_string(),
        })
        .unwrap();
        assert_eq!(fromfile, ChannelPermutation::reverse(CHANNELS));

        // duplicate index is rejected
        std::fs::write(&path, vec!["7"; CHANNELS].join(" ")).unwrap();
        assert!(matches!(
            builtin_permutation(&PermutationKind::FromFile {
                path: path.display().to_string()
            }),
            Err(DataError::MalformedPermutation(_))
        ));
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        let cfg = SyntheticConfig {
            n_samples: 100,
            ..SyntheticConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.eeg_sample(0).len(), CHANNELS * TIMEPOINTS);
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_round_robin_participants() {
        let ds = tiny_dataset(10, 4, 0);
        let expect: Vec<u32> = (0..10).map(|i| (i % 4) as u32).collect();
        assert_eq!(ds.participants(), &expect[..]);
    }

    #[test]
    fn synthetic_covers_grid() {
        let cfg = SyntheticConfig {
            n_samples: 20 * 25,
            seed: 3,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let mut seen: HashSet<(u32, u32)> = HashSet::new();
        for i in 0..ds.len() {
            let g = ds.gaze_sample(i);
            seen.insert((g[0].to_bits(), g[1].to_bits()));
        }
        assert_eq!(seen.len(), 25, "every grid point drawn at least once");
    }

    #[test]
    fn noiseless_amplitude_recovers_encoding() {
        // snr -> infinity approximated by a huge snr: the per-channel DC
        // amplitude is exactly linear in the encoded coordinate.
        let cfg = SyntheticConfig {
            n_samples: 12,
            snr: 1e12,
            seed: 4,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let ((lo_x, _), (hi_x, _)) = cfg.grid_bounds();
        for i in 0..ds.len() {
            let g = ds.gaze_sample(i);
            let nx = normalize_coord(g[0] as f64, lo_x, hi_x);
            // channel of j = 0 encodes x; its time-mean is amp * carrier DC
            let c = cfg.signal_channels[0];
            let row = ds.eeg_sample(i);
            let mean: f64 = row[c * TIMEPOINTS..(c + 1) * TIMEPOINTS]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / TIMEPOINTS as f64;
            let amp = (1.0 + SYNTH_ENCODE_GAIN * nx) * SYNTH_AMPLITUDE_UV;
            assert!(
                (mean - amp * SYNTH_CARRIER_DC).abs() < 0.05 * SYNTH_AMPLITUDE_UV,
                "sample {i}: mean {mean} vs {}",
                amp * SYNTH_CARRIER_DC
            );
        }
    }
}
