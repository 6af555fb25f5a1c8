//! Trial containers, the EEGB on-disk format, min-max normalization, and a
//! synthetic EEG generator for desk-scale experiments.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// A set of EEG trials: N trials of C electrode channels by W samples, with
/// one class label per trial. Values are f64 in memory, f32 on disk.
#[derive(Debug, Clone)]
pub struct TrialSet {
    pub trials: Vec<f64>, // N * C * W, trial-major then channel then time
    pub labels: Vec<u16>,
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
    pub sampling_rate: f32,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        let stride = self.channels * self.samples;
        &self.trials[i * stride..(i + 1) * stride]
    }

    pub fn validate(&self) -> Result<()> {
        let stride = self.channels * self.samples;
        if self.trials.len() != self.labels.len() * stride {
            return Err(Error::Content(format!(
                "trial buffer holds {} values, expected {}",
                self.trials.len(),
                self.labels.len() * stride
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Content(format!(
                "label {} out of range for {} classes",
                bad, self.classes
            )));
        }
        if self.trials.iter().any(|v| !v.is_finite()) {
            return Err(Error::Content("non-finite sample value".into()));
        }
        Ok(())
    }

    /// Subset by trial indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> TrialSet {
        let stride = self.channels * self.samples;
        let mut trials = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            trials.extend_from_slice(self.trial(i));
            labels.push(self.labels[i]);
        }
        TrialSet {
            trials,
            labels,
            ..*self
        }
    }

    /// Pack the trials at `indices` into a (B, 1, C, W) network input.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let stride = self.channels * self.samples;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(self.trial(i));
        }
        Tensor::new(&[indices.len(), 1, self.channels, self.samples], data)
            .expect("batch_tensor: shape mismatch")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }
}

const EEGB_MAGIC: &[u8; 4] = b"EEGB";
const EEGB_VERSION: u32 = 1;

/// Write the EEGB container: magic, version, N, C, W, M, sampling rate,
/// N*C*W little-endian f32 samples, then N u16 labels.
pub fn save_eegb(set: &TrialSet, path: &Path) -> Result<()> {
    set.validate()?;
    let mut buf = Vec::with_capacity(24 + set.trials.len() * 4 + set.labels.len() * 2);
    buf.extend_from_slice(EEGB_MAGIC);
    buf.extend_from_slice(&EEGB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(set.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(set.samples as u32).to_le_bytes());
    buf.extend_from_slice(&(set.classes as u32).to_le_bytes());
    buf.extend_from_slice(&set.sampling_rate.to_le_bytes());
    for &v in &set.trials {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &set.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_eegb(path: &Path) -> Result<TrialSet> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 28];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format("EEGB header truncated".into()))?;
    if &header[0..4] != EEGB_MAGIC {
        return Err(Error::Format("bad EEGB magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != EEGB_VERSION {
        return Err(Error::Format(format!("unsupported EEGB version {version}")));
    }
    let n = u32_at(8) as usize;
    let c = u32_at(12) as usize;
    let w = u32_at(16) as usize;
    let m = u32_at(20) as usize;
    let sampling_rate = f32::from_le_bytes(header[24..28].try_into().unwrap());

    let expected = n * c * w * 4 + n * 2;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "EEGB payload is {} bytes, expected {}",
            payload.len(),
            expected
        )));
    }
    let mut trials = Vec::with_capacity(n * c * w);
    for chunk in payload[..n * c * w * 4].chunks_exact(4) {
        trials.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let mut labels = Vec::with_capacity(n);
    for chunk in payload[n * c * w * 4..].chunks_exact(2) {
        labels.push(u16::from_le_bytes(chunk.try_into().unwrap()));
    }
    let set = TrialSet {
        trials,
        labels,
        channels: c,
        samples: w,
        classes: m,
        sampling_rate,
    };
    set.validate()?;
    Ok(set)
}

/// Outcome of normalizing one trial set; `constant_channels` counts the
/// degenerate channels that were mapped to 0.5.
pub struct NormalizeOutcome {
    pub set: TrialSet,
    pub constant_channels: usize,
}

/// Map each channel of each trial affinely onto [0,1]. A constant channel
/// has no range to stretch; it becomes 0.5 everywhere and is counted in the
/// outcome so callers can warn.
pub fn minmax_normalize(set: &TrialSet) -> NormalizeOutcome {
    let mut out = set.clone();
    let w = set.samples;
    let mut constant = 0usize;
    for ch in out.trials.chunks_exact_mut(w) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in ch.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let inv = 1.0 / (hi - lo);
            for v in ch.iter_mut() {
                *v = (*v - lo) * inv;
            }
        } else {
            constant += 1;
            ch.iter_mut().for_each(|v| *v = 0.5);
        }
    }
    NormalizeOutcome {
        set: out,
        constant_channels: constant,
    }
}

/// Recipe for a synthetic EEG set: each class carries a sinusoid of its own
/// frequency on its own channel subset inside an active window, on top of
/// white Gaussian noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub trials_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub sampling_rate: f32,
    /// Carrier frequency in Hz per class.
    pub class_frequencies: Vec<f64>,
    /// Active channel subset per class.
    pub class_channels: Vec<Vec<usize>>,
    /// Active window in samples, half-open.
    pub window: (usize, usize),
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            trials_per_class: 40,
            channels: 8,
            samples: 256,
            sampling_rate: 128.0,
            class_frequencies: vec![6.0, 11.0, 17.0, 25.0],
            class_channels: vec![
                vec![0, 1, 2],
                vec![2, 3, 4],
                vec![4, 5, 6],
                vec![6, 7, 0],
            ],
            window: (64, 128),
            amplitude: 1.5,
            noise_sigma: 0.5,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig("synth: classes must be >= 2".into()));
        }
        if self.class_frequencies.len() != self.classes
            || self.class_channels.len() != self.classes
        {
            return Err(Error::InvalidConfig(
                "synth: per-class frequency and channel lists must match class count".into(),
            ));
        }
        for &f in &self.class_frequencies {
            if f <= 0.0 || f >= self.sampling_rate as f64 / 2.0 {
                return Err(Error::InvalidConfig(format!(
                    "synth: carrier {} Hz outside (0, Nyquist)",
                    f
                )));
            }
        }
        for subset in &self.class_channels {
            if subset.is_empty() || subset.iter().any(|&c| c >= self.channels) {
                return Err(Error::InvalidConfig(
                    "synth: class channel subset empty or out of range".into(),
                ));
            }
        }
        if self.window.0 >= self.window.1 || self.window.1 > self.samples {
            return Err(Error::InvalidConfig(format!(
                "synth: window {:?} outside [0,{})",
                self.window, self.samples
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("synth: negative noise sigma".into()));
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller; keeps the generator dependency surface
/// to `Rng::gen` only.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate a balanced labeled trial set from the recipe, deterministic
/// under its seed. Trials are emitted class-interleaved (0,1,..,M-1,0,1,..).
pub fn synthesize(spec: &SynthSpec) -> Result<TrialSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.trials_per_class;
    let stride = spec.channels * spec.samples;
    let mut trials = vec![0.0; n * stride];
    let mut labels = Vec::with_capacity(n);
    let dt = 1.0 / spec.sampling_rate as f64;
    for trial_idx in 0..n {
        let class = trial_idx % spec.classes;
        labels.push(class as u16);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let freq = spec.class_frequencies[class];
        let base = trial_idx * stride;
        for ch in 0..spec.channels {
            let active = spec.class_channels[class].contains(&ch);
            for t in 0..spec.samples {
                let mut v = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * gaussian(&mut rng)
                } else {
                    0.0
                };
                if active && t >= spec.window.0 && t < spec.window.1 {
                    v += spec.amplitude
                        * (std::f64::consts::TAU * freq * t as f64 * dt + phase).sin();
                }
                trials[base + ch * spec.samples + t] = v;
            }
        }
    }
    Ok(TrialSet {
        trials,
        labels,
        channels: spec.channels,
        samples: spec.samples,
        classes: spec.classes,
        sampling_rate: spec.sampling_rate,
    })
}

/// Write a CSV of (column per field) rows with a header, 9 significant
/// digits.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}
