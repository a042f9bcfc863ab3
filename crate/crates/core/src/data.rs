//! Recordings, epochs and virtual subjects; the synthetic motor-imagery generator;
//! EDF ingestion and the on-disk epoch cache.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnengine::{read_tensors, write_tensors, Tensor};

/// Task marker at a sample index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub sample: usize,
    pub label: String,
}

/// Continuous multichannel EEG.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    /// `channels x samples`.
    pub samples: Vec<Vec<f64>>,
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub coordinates: Option<Vec<[f64; 3]>>,
    pub events: Vec<Event>,
    pub subject: String,
    pub date: Option<String>,
}

impl Recording {
    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) {
            return Err(Error::invalid(format!("recording {} has fs {}", self.subject, self.fs)));
        }
        let n = self.len();
        if self.samples.iter().any(|ch| ch.len() != n) {
            return Err(Error::invalid(format!("recording {} has ragged channels", self.subject)));
        }
        if self.channel_names.len() != self.channels() {
            return Err(Error::invalid(format!(
                "recording {} names {} channels but holds {}",
                self.subject,
                self.channel_names.len(),
                self.channels()
            )));
        }
        if let Some(c) = &self.coordinates {
            if c.len() != self.channels() {
                return Err(Error::invalid("coordinate count differs from channel count"));
            }
        }
        if let Some(e) = self.events.iter().find(|e| e.sample >= n) {
            return Err(Error::invalid(format!(
                "event `{}` at sample {} is outside the {n}-sample recording",
                e.label, e.sample
            )));
        }
        Ok(())
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, keep: &[usize]) -> Recording {
        Recording {
            samples: keep.iter().map(|&i| self.samples[i].clone()).collect(),
            channel_names: keep.iter().map(|&i| self.channel_names[i].clone()).collect(),
            coordinates: self.coordinates.as_ref().map(|c| keep.iter().map(|&i| c[i]).collect()),
            ..self.clone()
        }
    }
}

/// A labeled fixed-length trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    /// `channels x samples`.
    pub data: Vec<Vec<f64>>,
    pub label: usize,
    pub subject: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSet {
    pub epochs: Vec<Epoch>,
    pub fs: f64,
    pub classes: Vec<String>,
    pub channel_names: Vec<String>,
    pub coordinates: Option<Vec<[f64; 3]>>,
}

impl EpochSet {
    pub fn empty(fs: f64, classes: Vec<String>, channel_names: Vec<String>, coordinates: Option<Vec<[f64; 3]>>) -> Self {
        Self {
            epochs: Vec::new(),
            fs,
            classes,
            channel_names,
            coordinates,
        }
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn samples(&self) -> usize {
        self.epochs.first().map_or(0, |e| e.data.first().map_or(0, Vec::len))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.epochs.iter().map(|e| e.label).collect()
    }

    /// Epoch indices per class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes.len()];
        for (i, e) in self.epochs.iter().enumerate() {
            out[e.label].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> EpochSet {
        EpochSet {
            epochs: indices.iter().map(|&i| self.epochs[i].clone()).collect(),
            ..EpochSet::empty(self.fs, self.classes.clone(), self.channel_names.clone(), self.coordinates.clone())
        }
    }

    /// Appends another set with the same layout.
    pub fn append(&mut self, other: EpochSet) -> Result<()> {
        if other.classes != self.classes || other.channel_names != self.channel_names || other.fs != self.fs {
            return Err(Error::invalid("cannot merge epoch sets with different classes, channels or rates"));
        }
        if !self.is_empty() && !other.is_empty() && other.samples() != self.samples() {
            return Err(Error::invalid("cannot merge epoch sets with different epoch lengths"));
        }
        self.epochs.extend(other.epochs);
        Ok(())
    }

    /// Rounds every value to single precision so cached and in-memory runs agree.
    pub fn quantize(&mut self) {
        for e in &mut self.epochs {
            for ch in &mut e.data {
                for v in ch.iter_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }

    /// Keeps the listed channels (by name) in the given order.
    pub fn select_channels(&self, names: &[String]) -> Result<EpochSet> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.channel_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::invalid(format!("channel {n} not present")))
            })
            .collect::<Result<_>>()?;
        Ok(EpochSet {
            epochs: self
                .epochs
                .iter()
                .map(|e| Epoch {
                    data: idx.iter().map(|&i| e.data[i].clone()).collect(),
                    label: e.label,
                    subject: e.subject.clone(),
                })
                .collect(),
            fs: self.fs,
            classes: self.classes.clone(),
            channel_names: names.to_vec(),
            coordinates: self.coordinates.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
        })
    }
}

/// Epoch placement relative to each task marker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochWindow {
    pub offset_s: f64,
    pub duration_s: f64,
}

impl Default for EpochWindow {
    fn default() -> Self {
        Self {
            offset_s: 0.0,
            duration_s: 4.0,
        }
    }
}

/// One epoch per event whose label is in `classes`; events running past the end are skipped.
pub fn make_epochs(recording: &Recording, window: &EpochWindow, classes: &[String]) -> Result<EpochSet> {
    recording.validate()?;
    let len = (window.duration_s * recording.fs).round() as usize;
    if len == 0 {
        return Err(Error::invalid("epoch duration must cover at least one sample"));
    }
    let offset = (window.offset_s * recording.fs).round() as i64;
    let mut set = EpochSet::empty(
        recording.fs,
        classes.to_vec(),
        recording.channel_names.clone(),
        recording.coordinates.clone(),
    );
    for ev in &recording.events {
        let Some(label) = classes.iter().position(|c| *c == ev.label) else {
            continue;
        };
        let start = ev.sample as i64 + offset;
        if start < 0 || start as usize + len > recording.len() {
            log::warn!(
                "{}: skipping `{}` event at sample {} (epoch does not fit)",
                recording.subject,
                ev.label,
                ev.sample
            );
            continue;
        }
        let start = start as usize;
        set.epochs.push(Epoch {
            data: recording.samples.iter().map(|ch| ch[start..start + len].to_vec()).collect(),
            label,
            subject: recording.subject.clone(),
        });
    }
    Ok(set)
}

/// Recordings grouped under one analysis subject.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualSubject {
    pub key: String,
    pub recordings: Vec<Recording>,
}

fn group_by(recordings: Vec<Recording>, key: impl Fn(&Recording) -> Result<String>) -> Result<Vec<VirtualSubject>> {
    let mut out: Vec<VirtualSubject> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for r in recordings {
        let k = key(&r)?;
        match index.get(&k) {
            Some(&i) => out[i].recordings.push(r),
            None => {
                index.insert(k.clone(), out.len());
                out.push(VirtualSubject {
                    key: k,
                    recordings: vec![r],
                });
            }
        }
    }
    Ok(out)
}

/// One virtual subject per (subject, session date), in order of first appearance.
pub fn to_independent_days(recordings: Vec<Recording>) -> Result<Vec<VirtualSubject>> {
    group_by(recordings, |r| {
        r.date
            .as_ref()
            .map(|d| format!("{}@{d}", r.subject))
            .ok_or_else(|| Error::invalid(format!("recording of {} has no session date", r.subject)))
    })
}

/// One virtual subject per subject id regardless of date.
pub fn merge_days(recordings: Vec<Recording>) -> Result<Vec<VirtualSubject>> {
    group_by(recordings, |r| Ok(r.subject.clone()))
}

/// Artifact injections for the synthetic generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactFlags {
    /// One channel with tenfold amplitude for the whole recording.
    pub bad_channel: bool,
    /// One trial with twentyfold amplitude on all channels.
    pub bad_epoch: bool,
    /// A frontal blink train throughout the recording.
    pub blink: bool,
    /// High-frequency contamination of one channel within one trial.
    pub epoch_channel: bool,
}

/// Description of a synthetic motor-imagery dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub days: usize,
    pub classes: usize,
    pub fs: f64,
    pub channels: usize,
    pub epochs_per_class: usize,
    /// Signal RMS over noise RMS during trials; `inf` disables noise, 0 disables the class signal.
    pub snr: f64,
    pub seed: u64,
    /// Spread of subject-specific patterns around the shared ones (0 = identical subjects).
    pub subject_variability: f64,
    pub trial_s: f64,
    pub rest_s: f64,
    /// Class-independent ongoing oscillations mixed into the background.
    pub rhythms: usize,
    pub artifacts: ArtifactFlags,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            subjects: 12,
            days: 1,
            classes: 2,
            fs: 128.0,
            channels: 16,
            epochs_per_class: 40,
            snr: 2.0,
            seed: 1,
            subject_variability: 0.3,
            trial_s: 4.0,
            rest_s: 2.0,
            rhythms: 4,
            artifacts: ArtifactFlags::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn class_names(&self) -> Vec<String> {
        const NAMES: [&str; 4] = ["left_hand", "right_hand", "feet", "tongue"];
        (0..self.classes)
            .map(|c| {
                if self.classes <= NAMES.len() {
                    NAMES[c].to_string()
                } else {
                    format!("class{c}")
                }
            })
            .collect()
    }
}

/// Ground truth of one synthetic injection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub recording: usize,
    pub kind: InjectionKind,
    pub channel: Option<usize>,
    /// Trial index (event order) for per-trial injections.
    pub trial: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    BadChannel,
    BadEpoch,
    Blink,
    EpochChannel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub recordings: Vec<Recording>,
    pub injections: Vec<Injection>,
    pub classes: Vec<String>,
}

/// Near-uniform electrode positions on the upper unit hemisphere (Fibonacci spiral).
pub fn hemisphere_layout(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Unit-variance noise with a 1/f power spectrum.
pub fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let mut spec: Vec<Complex64> = (0..n)
        .map(|k| {
            let f = k.min(n - k);
            if f == 0 {
                Complex64::new(0.0, 0.0)
            } else {
                let a = 1.0 / (f as f64).sqrt();
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex64::new(re * a, im * a)
            }
        })
        .collect();
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    let x: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    x.iter().map(|v| (v - mean) / sd).collect()
}

fn unit_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Spatially smooth background: half independent per channel, half shared through a
/// distance kernel, each channel at unit variance.
fn background(coords: &[[f64; 3]], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let c = coords.len();
    let own: Vec<Vec<f64>> = (0..c).map(|_| pink_noise(n, rng)).collect();
    let shared: Vec<Vec<f64>> = (0..c).map(|_| pink_noise(n, rng)).collect();
    (0..c)
        .map(|i| {
            let k: Vec<f64> = coords
                .iter()
                .map(|q| {
                    let d2: f64 = (0..3).map(|a| (coords[i][a] - q[a]).powi(2)).sum();
                    (-d2 / (2.0 * 0.35f64.powi(2))).exp()
                })
                .collect();
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            (0..n)
                .map(|t| {
                    let s: f64 = k.iter().zip(&shared).map(|(w, src)| w * src[t]).sum();
                    std::f64::consts::FRAC_1_SQRT_2 * (own[i][t] + s / norm)
                })
                .collect()
        })
        .collect()
}

/// Adds `count` amplitude-modulated oscillations (8–30 Hz, random sign patterns) and
/// rescales so every channel keeps unit variance on average.
fn add_rhythms(x: &mut [Vec<f64>], count: usize, fs: f64, rng: &mut ChaCha8Rng) {
    if count == 0 || x.is_empty() {
        return;
    }
    let n = x[0].len();
    for _ in 0..count {
        let f = rng.gen_range(8.0..30.0);
        let pattern: Vec<f64> = x
            .iter()
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 } * rng.gen_range(0.8..1.2))
            .collect();
        // slow envelope from low-pass pink noise keeps the rhythm waxing and waning
        let env_src = pink_noise(n, rng);
        let mut env = 0.0;
        let alpha = 1.0 / fs;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amp = 0.5 * 2f64.sqrt();
        for t in 0..n {
            env += alpha * (env_src[t] - env);
            let a = amp * (1.0 + 0.5 * (env * 8.0).tanh());
            let v = a * (2.0 * PI * f * t as f64 / fs + phase).sin();
            for (ch, w) in x.iter_mut().zip(&pattern) {
                ch[t] += w * v;
            }
        }
    }
    let gain = 1.0 / (1.0 + 0.25 * count as f64 * 1.07).sqrt();
    for ch in x.iter_mut() {
        ch.iter_mut().for_each(|v| *v *= gain);
    }
}

const MICROVOLTS: f64 = 10.0;

/// Seed-deterministic synthetic motor-imagery recordings.
///
/// Every class has a spatial sign pattern and an oscillation frequency in 8–30 Hz shared
/// by all subjects; subjects perturb both by `subject_variability`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    if spec.subjects == 0 || spec.days == 0 || spec.classes < 2 || spec.channels == 0 || spec.epochs_per_class == 0 {
        return Err(Error::invalid("synthetic spec needs positive counts and at least 2 classes"));
    }
    if !(spec.fs > 0.0) || spec.snr < 0.0 || spec.snr.is_nan() {
        return Err(Error::invalid("synthetic spec needs fs > 0 and snr >= 0"));
    }
    if spec.artifacts.bad_channel && spec.channels < 2 {
        return Err(Error::invalid("bad-channel injection needs at least 2 channels"));
    }
    let classes = spec.class_names();
    let coords = hemisphere_layout(spec.channels);
    let mut shared_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base_patterns: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.channels)
                .map(|_| {
                    let sign = if shared_rng.gen::<bool>() { 1.0 } else { -1.0 };
                    sign * shared_rng.gen_range(0.8..1.2)
                })
                .collect()
        })
        .collect();
    let base_freqs: Vec<f64> = (0..spec.classes)
        .map(|c| 8.0 + 22.0 * (c as f64 + 0.5) / spec.classes as f64)
        .collect();

    let trial = (spec.trial_s * spec.fs).round() as usize;
    let rest = (spec.rest_s * spec.fs).round() as usize;
    let ramp = ((0.25 * spec.fs).round() as usize).min(trial / 2).max(1);
    let trials_per_rec = spec.classes * spec.epochs_per_class;
    let total = rest + trials_per_rec * (trial + rest) + rest;

    let mut recordings = Vec::new();
    let mut injections = Vec::new();
    for s in 0..spec.subjects {
        let mut subj_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(s as u64 + 1)));
        let patterns: Vec<Vec<f64>> = base_patterns
            .iter()
            .map(|p| p.iter().map(|w| w + spec.subject_variability * unit_normal(&mut subj_rng)).collect())
            .collect();
        let freqs: Vec<f64> = base_freqs
            .iter()
            .map(|f| (f + 2.0 * spec.subject_variability * unit_normal(&mut subj_rng)).clamp(8.0, 30.0))
            .collect();
        for d in 0..spec.days {
            let rec_index = recordings.len();
            let mut rng = subj_rng.clone();
            for _ in 0..=d {
                rng = ChaCha8Rng::seed_from_u64(rng.gen());
            }
            let mut labels: Vec<usize> = (0..trials_per_rec).map(|i| i % spec.classes).collect();
            labels.shuffle(&mut rng);

            let noise_gain = if spec.snr.is_infinite() { 0.0 } else { 1.0 };
            let mut x = if noise_gain > 0.0 {
                let mut bg = background(&coords, total, &mut rng);
                add_rhythms(&mut bg, spec.rhythms, spec.fs, &mut rng);
                bg
            } else {
                vec![vec![0.0; total]; spec.channels]
            };
            let mut events = Vec::with_capacity(trials_per_rec);
            let mut onset = rest;
            for &label in &labels {
                events.push(Event {
                    sample: onset,
                    label: classes[label].clone(),
                });
                let p = &patterns[label];
                let rms_p = (p.iter().map(|w| w * w).sum::<f64>() / p.len() as f64).sqrt().max(1e-12);
                let target = if spec.snr.is_infinite() { 1.0 } else { spec.snr };
                let amp = target * 2f64.sqrt() / rms_p;
                let phase = rng.gen_range(0.0..2.0 * PI);
                if amp > 0.0 {
                    for t in 0..trial {
                        let taper = if t < ramp {
                            0.5 - 0.5 * (PI * t as f64 / ramp as f64).cos()
                        } else if t >= trial - ramp {
                            0.5 - 0.5 * (PI * (trial - 1 - t) as f64 / ramp as f64).cos()
                        } else {
                            1.0
                        };
                        let v = amp * taper * (2.0 * PI * freqs[label] * t as f64 / spec.fs + phase).sin();
                        for (ch, w) in x.iter_mut().zip(p) {
                            ch[onset + t] += w * v;
                        }
                    }
                }
                onset += trial + rest;
            }

            let flags = spec.artifacts;
            if flags.blink {
                let width = (0.3 * spec.fs).round() as usize;
                let weights: Vec<f64> = coords.iter().map(|q| (2.0 * (q[0] - 1.0)).exp()).collect();
                let mut t = rng.gen_range(0..(3.0 * spec.fs) as usize);
                while t + width < total {
                    let a = 6.0 * rng.gen_range(0.8..1.2);
                    for k in 0..width {
                        let v = a * (0.5 - 0.5 * (2.0 * PI * k as f64 / width as f64).cos());
                        for (ch, w) in x.iter_mut().zip(&weights) {
                            ch[t + k] += w * v;
                        }
                    }
                    t += rng.gen_range((3.0 * spec.fs) as usize..(7.0 * spec.fs) as usize);
                }
                injections.push(Injection {
                    recording: rec_index,
                    kind: InjectionKind::Blink,
                    channel: None,
                    trial: None,
                });
            }
            let bad_channel = flags.bad_channel.then(|| rng.gen_range(0..spec.channels));
            if let Some(ch) = bad_channel {
                x[ch].iter_mut().for_each(|v| *v *= 10.0);
                injections.push(Injection {
                    recording: rec_index,
                    kind: InjectionKind::BadChannel,
                    channel: Some(ch),
                    trial: None,
                });
            }
            let bad_trial = flags.bad_epoch.then(|| rng.gen_range(0..trials_per_rec));
            if let Some(tr) = bad_trial {
                let start = events[tr].sample;
                for ch in x.iter_mut() {
                    ch[start..start + trial].iter_mut().for_each(|v| *v *= 20.0);
                }
                injections.push(Injection {
                    recording: rec_index,
                    kind: InjectionKind::BadEpoch,
                    channel: None,
                    trial: Some(tr),
                });
            }
            if flags.epoch_channel {
                let ch = loop {
                    let c = rng.gen_range(0..spec.channels);
                    if Some(c) != bad_channel || spec.channels == 1 {
                        break c;
                    }
                };
                let tr = loop {
                    let t = rng.gen_range(0..trials_per_rec);
                    if Some(t) != bad_trial || trials_per_rec == 1 {
                        break t;
                    }
                };
                let start = events[tr].sample;
                let f = 0.3 * spec.fs;
                let phase = rng.gen_range(0.0..2.0 * PI);
                for t in 0..trial {
                    x[ch][start + t] += 8.0 * (2.0 * PI * f * t as f64 / spec.fs + phase).sin();
                }
                injections.push(Injection {
                    recording: rec_index,
                    kind: InjectionKind::EpochChannel,
                    channel: Some(ch),
                    trial: Some(tr),
                });
            }

            for ch in x.iter_mut() {
                ch.iter_mut().for_each(|v| *v *= MICROVOLTS);
            }
            recordings.push(Recording {
                samples: x,
                fs: spec.fs,
                channel_names: (0..spec.channels).map(|c| format!("Ch{:02}", c + 1)).collect(),
                coordinates: Some(coords.clone()),
                events,
                subject: format!("S{:03}", s + 1),
                date: Some(format!("2024-01-{:02}", d + 1)),
            });
        }
    }
    Ok(SyntheticDataset {
        recordings,
        injections,
        classes,
    })
}

// ---------------------------------------------------------------------------
// EDF

const EDF_ANNOTATIONS: &str = "EDF Annotations";

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn field(&mut self, len: usize, what: &str) -> Result<String> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Edf {
                offset: self.pos as u64,
                message: format!("header ends inside field `{what}`"),
            });
        }
        let raw = &self.bytes[self.pos..self.pos + len];
        if !raw.iter().all(|b| (0x20..=0x7e).contains(b)) {
            return Err(Error::Edf {
                offset: self.pos as u64,
                message: format!("field `{what}` holds non-printable bytes"),
            });
        }
        self.pos += len;
        Ok(String::from_utf8_lossy(raw).trim().to_string())
    }

    fn number<T: std::str::FromStr>(&mut self, len: usize, what: &str) -> Result<T> {
        let at = self.pos as u64;
        let text = self.field(len, what)?;
        text.parse().map_err(|_| Error::Edf {
            offset: at,
            message: format!("field `{what}` is not a number: `{text}`"),
        })
    }
}

#[derive(Debug)]
struct EdfSignal {
    label: String,
    phys_min: f64,
    phys_max: f64,
    dig_min: f64,
    dig_max: f64,
    per_record: usize,
}

fn edf_date(start: &str) -> Option<String> {
    let parts: Vec<&str> = start.split('.').collect();
    if parts.len() != 3 {
        return None;
    }
    let (d, m, y): (u32, u32, u32) = (parts[0].parse().ok()?, parts[1].parse().ok()?, parts[2].parse().ok()?);
    let year = if y >= 85 { 1900 + y } else { 2000 + y };
    Some(format!("{year:04}-{m:02}-{d:02}"))
}

/// Time-stamped annotation lists of one record: `(onset s, text)` pairs.
fn parse_tals(bytes: &[u8]) -> Vec<(f64, String)> {
    let mut out = Vec::new();
    for tal in bytes.split(|&b| b == 0).filter(|t| !t.is_empty()) {
        let mut parts = tal.split(|&b| b == 0x14);
        let Some(head) = parts.next() else { continue };
        let onset_txt = head.split(|&b| b == 0x15).next().unwrap_or_default();
        let Ok(onset) = String::from_utf8_lossy(onset_txt).trim().parse::<f64>() else {
            continue;
        };
        for text in parts {
            let t = String::from_utf8_lossy(text).trim().to_string();
            if !t.is_empty() {
                out.push((onset, t));
            }
        }
    }
    out
}

/// Parses an EDF/EDF+ file. Annotation texts become events; the patient field
/// (first token) names the subject and the start date becomes the session date.
pub fn load_edf(path: impl AsRef<Path>) -> Result<Recording> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut h = HeaderCursor { bytes: &bytes, pos: 0 };
    let _version = h.field(8, "version")?;
    let patient = h.field(80, "patient")?;
    let _recording = h.field(80, "recording")?;
    let start_date = h.field(8, "startdate")?;
    let _start_time = h.field(8, "starttime")?;
    let header_bytes: usize = h.number(8, "header bytes")?;
    let _reserved = h.field(44, "reserved")?;
    let n_records: i64 = h.number(8, "number of data records")?;
    let duration: f64 = h.number(8, "record duration")?;
    let ns: usize = h.number(4, "number of signals")?;
    if header_bytes != 256 * (ns + 1) {
        return Err(Error::Edf {
            offset: 184,
            message: format!("header size {header_bytes} does not match {ns} signals"),
        });
    }
    let mut labels = Vec::with_capacity(ns);
    for i in 0..ns {
        labels.push(h.field(16, &format!("label[{i}]"))?);
    }
    for i in 0..ns {
        h.field(80, &format!("transducer[{i}]"))?;
    }
    for i in 0..ns {
        h.field(8, &format!("physical dimension[{i}]"))?;
    }
    let mut read_nums = |what: &str| -> Result<Vec<f64>> { (0..ns).map(|i| h.number(8, &format!("{what}[{i}]"))).collect() };
    let phys_min = read_nums("physical minimum")?;
    let phys_max = read_nums("physical maximum")?;
    let dig_min = read_nums("digital minimum")?;
    let dig_max = read_nums("digital maximum")?;
    for i in 0..ns {
        h.field(80, &format!("prefiltering[{i}]"))?;
    }
    let mut per_record = Vec::with_capacity(ns);
    for i in 0..ns {
        per_record.push(h.number::<usize>(8, &format!("samples per record[{i}]"))?);
    }
    let signals: Vec<EdfSignal> = (0..ns)
        .map(|i| EdfSignal {
            label: labels[i].clone(),
            phys_min: phys_min[i],
            phys_max: phys_max[i],
            dig_min: dig_min[i],
            dig_max: dig_max[i],
            per_record: per_record[i],
        })
        .collect();
    for (i, s) in signals.iter().enumerate() {
        if s.dig_max == s.dig_min {
            return Err(Error::Edf {
                offset: (256 + ns * 120 + 8 * i) as u64,
                message: format!("signal `{}` has a zero digital range", s.label),
            });
        }
    }
    if !(duration > 0.0) {
        return Err(Error::Edf {
            offset: 244,
            message: "record duration must be positive".into(),
        });
    }

    let record_len: usize = 2 * signals.iter().map(|s| s.per_record).sum::<usize>();
    let body = bytes.len() - header_bytes.min(bytes.len());
    let n_records = if n_records < 0 { (body / record_len.max(1)) as i64 } else { n_records } as usize;
    let eeg: Vec<usize> = (0..ns).filter(|&i| signals[i].label != EDF_ANNOTATIONS).collect();
    let spr = eeg.first().map_or(0, |&i| signals[i].per_record);
    if let Some(&bad) = eeg.iter().find(|&&i| signals[i].per_record != spr) {
        return Err(Error::Edf {
            offset: (256 + ns * 216 + 8 * bad) as u64,
            message: format!("signal `{}` uses a different sampling rate", signals[bad].label),
        });
    }
    let mut samples: Vec<Vec<f64>> = eeg.iter().map(|_| Vec::with_capacity(spr * n_records)).collect();
    let mut events = Vec::new();
    let fs = spr as f64 / duration;
    let mut pos = header_bytes;
    for r in 0..n_records {
        for (i, s) in signals.iter().enumerate() {
            let need = 2 * s.per_record;
            if pos + need > bytes.len() {
                return Err(Error::Edf {
                    offset: bytes.len() as u64,
                    message: format!(
                        "data record {r} of {n_records} is truncated (signal `{}` needs bytes {pos}..{})",
                        s.label,
                        pos + need
                    ),
                });
            }
            let chunk = &bytes[pos..pos + need];
            pos += need;
            if s.label == EDF_ANNOTATIONS {
                for (onset, text) in parse_tals(chunk) {
                    let sample = (onset * fs).round();
                    if sample >= 0.0 {
                        events.push(Event {
                            sample: sample as usize,
                            label: text,
                        });
                    }
                }
                continue;
            }
            let k = eeg.iter().position(|&e| e == i).expect("eeg index");
            let scale = (s.phys_max - s.phys_min) / (s.dig_max - s.dig_min);
            samples[k].extend(chunk.chunks_exact(2).map(|b| {
                let d = i16::from_le_bytes([b[0], b[1]]) as f64;
                (d - s.dig_min) * scale + s.phys_min
            }));
        }
    }
    let total = samples.first().map_or(0, Vec::len);
    events.retain(|e| e.sample < total);
    let subject = patient
        .split_whitespace()
        .next()
        .filter(|s| *s != "X")
        .map(str::to_string)
        .unwrap_or_else(|| path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()));
    let rec = Recording {
        samples,
        fs,
        channel_names: eeg.iter().map(|&i| signals[i].label.clone()).collect(),
        coordinates: None,
        events,
        subject,
        date: edf_date(&start_date),
    };
    rec.validate()?;
    Ok(rec)
}

fn pad(s: &str, len: usize) -> Vec<u8> {
    let mut b: Vec<u8> = s.bytes().filter(|c| (0x20..=0x7e).contains(c)).take(len).collect();
    b.resize(len, b' ');
    b
}

/// Writes a recording as EDF+ with 1-second records and 16-bit samples; events
/// go into an annotation signal. `fs` must be an integer.
pub fn write_edf(path: impl AsRef<Path>, rec: &Recording) -> Result<()> {
    rec.validate()?;
    if rec.fs.fract() != 0.0 {
        return Err(Error::invalid("EDF export needs an integer sampling rate"));
    }
    let spr = rec.fs as usize;
    let n_records = rec.len().div_ceil(spr);
    let mut tals: Vec<Vec<u8>> = (0..n_records).map(|r| format!("+{r}\x14\x14\0").into_bytes()).collect();
    for e in &rec.events {
        let r = e.sample / spr;
        tals[r].extend(format!("+{}\x14{}\x14\0", e.sample as f64 / rec.fs, e.label).bytes());
    }
    let annot_spr = tals.iter().map(|t| t.len().div_ceil(2)).max().unwrap_or(1).max(1);
    let ns = rec.channels() + 1;

    let mut out = Vec::new();
    out.extend(pad("0", 8));
    out.extend(pad(&format!("{} X X X", rec.subject), 80));
    out.extend(pad("Startdate X X X X", 80));
    let date = rec.date.as_deref().and_then(|d| {
        let p: Vec<&str> = d.split('-').collect();
        (p.len() == 3 && p[0].len() == 4).then(|| format!("{}.{}.{}", p[2], p[1], &p[0][2..]))
    });
    out.extend(pad(date.as_deref().unwrap_or("01.01.00"), 8));
    out.extend(pad("00.00.00", 8));
    out.extend(pad(&(256 * (ns + 1)).to_string(), 8));
    out.extend(pad("EDF+C", 44));
    out.extend(pad(&n_records.to_string(), 8));
    out.extend(pad("1", 8));
    out.extend(pad(&ns.to_string(), 4));

    let ranges: Vec<(f64, f64)> = rec
        .samples
        .iter()
        .map(|ch| {
            let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
            // round-trip through the 8-character header text
            let lo: f64 = format_edf_number(lo.floor()).parse().unwrap_or(lo);
            let hi: f64 = format_edf_number(hi.ceil()).parse().unwrap_or(hi);
            (lo, hi)
        })
        .collect();
    let mut fields = |f: &dyn Fn(usize) -> String, len: usize| {
        for i in 0..ns {
            out.extend(pad(&f(i), len));
        }
    };
    let name = |i: usize| {
        if i < rec.channels() {
            rec.channel_names[i].clone()
        } else {
            EDF_ANNOTATIONS.to_string()
        }
    };
    fields(&name, 16);
    fields(&|_| String::new(), 80);
    fields(&|i| if i < ns - 1 { "uV".into() } else { String::new() }, 8);
    fields(&|i| if i < ns - 1 { format_edf_number(ranges[i].0) } else { "-1".into() }, 8);
    fields(&|i| if i < ns - 1 { format_edf_number(ranges[i].1) } else { "1".into() }, 8);
    fields(&|_| "-32768".into(), 8);
    fields(&|_| "32767".into(), 8);
    fields(&|_| String::new(), 80);
    fields(&|i| if i < ns - 1 { spr.to_string() } else { annot_spr.to_string() }, 8);
    fields(&|_| String::new(), 32);

    for r in 0..n_records {
        for (ch, &(lo, hi)) in rec.samples.iter().zip(&ranges) {
            for k in 0..spr {
                let v = ch.get(r * spr + k).copied().unwrap_or(lo);
                let d = ((v - lo) / (hi - lo) * 65535.0 - 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend(d.to_le_bytes());
            }
        }
        let mut t = tals[r].clone();
        t.resize(2 * annot_spr, 0);
        out.extend(t);
    }
    fs::write(path, out)?;
    Ok(())
}

fn format_edf_number(v: f64) -> String {
    let s = format!("{v}");
    if s.len() <= 8 {
        s
    } else {
        format!("{:.0}", v).chars().take(8).collect()
    }
}

/// Subject keys to skip, one per line; blank lines and `#` comments ignored.
pub fn read_exclusion_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Loads every `.edf` file of a directory (sorted by name), skipping excluded subjects.
pub fn load_edf_dir(dir: impl AsRef<Path>, exclude: &[String]) -> Result<Vec<Recording>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("edf")))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let rec = load_edf(&p)?;
        if exclude.iter().any(|x| *x == rec.subject) {
            log::info!("excluding {} ({})", rec.subject, p.display());
            continue;
        }
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// epoch cache

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpochSidecar {
    fs: f64,
    classes: Vec<String>,
    channel_names: Vec<String>,
    coordinates: Option<Vec<[f64; 3]>>,
    labels: Vec<usize>,
    subjects: Vec<String>,
}

/// Writes `<stem>.eegb` (epochs as an `[epochs, channels, samples]` tensor) and
/// `<stem>.toml` (metadata).
pub fn save_epochs(stem: impl AsRef<Path>, set: &EpochSet) -> Result<()> {
    let stem = stem.as_ref();
    let (e, c, t) = (set.len(), set.channels(), set.samples());
    let data: Vec<f32> = set
        .epochs
        .iter()
        .flat_map(|ep| ep.data.iter().flatten().map(|&v| v as f32))
        .collect();
    let tensor = Tensor::from_vec(&[e, c, t], data)?;
    let file = fs::File::create(stem.with_extension("eegb"))?;
    write_tensors(BufWriter::new(file), &[("epochs".to_string(), tensor)])?;
    let side = EpochSidecar {
        fs: set.fs,
        classes: set.classes.clone(),
        channel_names: set.channel_names.clone(),
        coordinates: set.coordinates.clone(),
        labels: set.labels(),
        subjects: set.epochs.iter().map(|e| e.subject.clone()).collect(),
    };
    let text = toml::to_string(&side).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(stem.with_extension("toml"), text)?;
    Ok(())
}

pub fn load_epochs(stem: impl AsRef<Path>) -> Result<EpochSet> {
    let stem = stem.as_ref();
    let side: EpochSidecar =
        toml::from_str(&fs::read_to_string(stem.with_extension("toml"))?).map_err(|e| Error::Config(e.to_string()))?;
    let mut file = BufReader::new(fs::File::open(stem.with_extension("eegb"))?);
    let mut records = read_tensors::<_, f32>(&mut file)?;
    let mut trailing = Vec::new();
    file.read_to_end(&mut trailing)?;
    if records.len() != 1 || records[0].0 != "epochs" || !trailing.is_empty() {
        return Err(Error::Container("epoch cache must hold exactly one `epochs` record".into()));
    }
    let tensor = records.remove(0).1;
    let [e, c, t] = tensor.shape() else {
        return Err(Error::Container("epoch tensor must have rank 3".into()));
    };
    let (e, c, t) = (*e, *c, *t);
    if side.labels.len() != e || side.subjects.len() != e || side.channel_names.len() != c {
        return Err(Error::Container("epoch cache metadata disagrees with the tensor".into()));
    }
    let data = tensor.data();
    let epochs = (0..e)
        .map(|i| Epoch {
            data: (0..c)
                .map(|ch| data[(i * c + ch) * t..(i * c + ch + 1) * t].iter().map(|&v| v as f64).collect())
                .collect(),
            label: side.labels[i],
            subject: side.subjects[i].clone(),
        })
        .collect();
    Ok(EpochSet {
        epochs,
        fs: side.fs,
        classes: side.classes,
        channel_names: side.channel_names,
        coordinates: side.coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(subject: &str, date: Option<&str>) -> Recording {
        Recording {
            samples: vec![vec![0.0; 10]],
            fs: 1.0,
            channel_names: vec!["C3".into()],
            coordinates: None,
            events: vec![],
            subject: subject.into(),
            date: date.map(str::to_string),
        }
    }

    #[test]
    fn day_configurations() {
        let recs: Vec<Recording> = (0..9)
            .flat_map(|s| ["2020-01-01", "2020-01-02"].map(|d| rec(&format!("A{s}"), Some(d))))
            .collect();
        assert_eq!(to_independent_days(recs.clone()).unwrap().len(), 18);
        let merged = merge_days(recs.clone()).unwrap();
        assert_eq!(merged.len(), 9);
        assert!(merged.iter().all(|v| v.recordings.len() == 2));
        let recs54: Vec<Recording> = (0..54)
            .flat_map(|s| ["d1", "d2"].map(|d| rec(&format!("G{s}"), Some(d))))
            .collect();
        assert_eq!(to_independent_days(recs54).unwrap().len(), 108);
        assert!(to_independent_days(vec![rec("x", None)]).is_err());
        let single = vec![rec("a", Some("d")), rec("b", Some("d"))];
        assert_eq!(to_independent_days(single).unwrap().len(), 2);
    }

    #[test]
    fn epochs_from_events() {
        let fs = 128.0;
        let n = 20 * 640;
        let mut r = Recording {
            samples: vec![(0..n).map(|i| i as f64).collect()],
            fs,
            channel_names: vec!["C3".into()],
            coordinates: None,
            events: (0..20)
                .map(|i| Event {
                    sample: i * 640,
                    label: if i % 2 == 0 { "a".into() } else { "b".into() },
                })
                .collect(),
            subject: "s".into(),
            date: None,
        };
        let classes = vec!["a".to_string(), "b".to_string()];
        let set = make_epochs(&r, &EpochWindow::default(), &classes).unwrap();
        assert_eq!(set.len(), 20);
        assert!(set.epochs.iter().all(|e| e.data[0].len() == 512));
        assert_eq!(set.labels()[..3], [0, 1, 0]);
        assert_eq!(set.epochs[1].data[0][0], 640.0);
        r.events.last_mut().unwrap().sample = n - 1;
        assert_eq!(make_epochs(&r, &EpochWindow::default(), &classes).unwrap().len(), 19);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            subjects: 2,
            epochs_per_class: 3,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.recordings.len(), 2);
        assert_eq!(a.recordings[0].events.len(), 6);
        assert_ne!(a.recordings[0].samples, a.recordings[1].samples);
    }

    #[test]
    fn pink_noise_spectrum_falls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = pink_noise(8192, &mut rng);
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(8192).process(&mut buf);
        let band = |lo: usize, hi: usize| buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>() / (hi - lo) as f64;
        // power per bin at 10x the frequency is about a tenth
        let ratio = band(20, 40) / band(200, 400);
        assert!((5.0..20.0).contains(&ratio), "{ratio}");
    }

    /// Ordinary least squares linear probe on per-channel log band powers.
    #[test]
    fn classes_linearly_separable() {
        let spec = SyntheticSpec {
            subjects: 1,
            epochs_per_class: 30,
            snr: 1.0,
            seed: 11,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let set = make_epochs(&data.recordings[0], &EpochWindow::default(), &data.classes).unwrap();
        let feats: Vec<Vec<f64>> = set
            .epochs
            .iter()
            .map(|e| {
                let mut f = vec![1.0];
                // signed spatial covariance with channel 0 carries the class sign pattern
                let c0 = &e.data[0];
                for ch in &e.data[1..] {
                    let cov: f64 = c0.iter().zip(ch).map(|(a, b)| a * b).sum::<f64>() / c0.len() as f64;
                    f.push(cov / 100.0);
                }
                f
            })
            .collect();
        let y: Vec<f64> = set.labels().iter().map(|&l| if l == 0 { -1.0 } else { 1.0 }).collect();
        let p = feats[0].len();
        let x = nalgebra::DMatrix::from_fn(feats.len(), p, |i, j| feats[i][j]);
        let yv = nalgebra::DVector::from_vec(y.clone());
        let beta = (x.transpose() * &x + nalgebra::DMatrix::identity(p, p) * 1e-6)
            .lu()
            .solve(&(x.transpose() * yv))
            .unwrap();
        let pred = &x * beta;
        let acc = pred.iter().zip(&y).filter(|(p, y)| p.signum() == y.signum()).count() as f64 / y.len() as f64;
        assert!(acc > 0.9, "{acc}");
    }

    /// Builds an EDF file byte by byte: 2 signals, 10 one-second records of 4 samples.
    fn fixture_bytes(truncate: bool) -> Vec<u8> {
        fn f(s: &str, n: usize) -> String {
            format!("{s:<n$}")
        }
        let mut h = String::new();
        h += &f("0", 8);
        h += &f("P07 M 01-JAN-1990 P07", 80);
        h += &f("Startdate 02-MAR-2009 X X X", 80);
        h += "02.03.09";
        h += "10.11.12";
        h += &f("768", 8);
        h += &f("", 44);
        h += &f("10", 8);
        h += &f("1", 8);
        h += &f("2", 4);
        h += &f("Fz", 16);
        h += &f("Cz", 16);
        h += &f("", 160);
        h += &f("uV", 8);
        h += &f("uV", 8);
        h += &f("-100", 8);
        h += &f("-2048", 8);
        h += &f("100", 8);
        h += &f("2047", 8);
        h += &f("-2048", 8);
        h += &f("-2048", 8);
        h += &f("2047", 8);
        h += &f("2047", 8);
        h += &f("", 160);
        h += &f("4", 8);
        h += &f("4", 8);
        h += &f("", 64);
        assert_eq!(h.len(), 768);
        let mut b = h.into_bytes();
        for r in 0..10i16 {
            for k in 0..4i16 {
                b.extend((r * 4 + k - 20).to_le_bytes());
            }
            for k in 0..4i16 {
                b.extend((-(r * 4 + k)).to_le_bytes());
            }
        }
        if truncate {
            b.truncate(b.len() - 3);
        }
        b
    }

    #[test]
    fn edf_fixture_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fixture.edf");
        fs::write(&p, fixture_bytes(false)).unwrap();
        let r = load_edf(&p).unwrap();
        assert_eq!(r.channel_names, ["Fz", "Cz"]);
        assert_eq!(r.fs, 4.0);
        assert_eq!(r.len(), 40);
        assert_eq!(r.subject, "P07");
        assert_eq!(r.date.as_deref(), Some("2009-03-02"));
        let scale = 200.0 / 4095.0;
        for i in 0..40 {
            let want = (i as f64 - 20.0 + 2048.0) * scale - 100.0;
            assert!((r.samples[0][i] - want).abs() < 1e-12);
            assert_eq!(r.samples[1][i], -(i as f64));
        }
    }

    #[test]
    fn edf_truncation_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.edf");
        let bytes = fixture_bytes(true);
        fs::write(&p, &bytes).unwrap();
        match load_edf(&p) {
            Err(Error::Edf { offset, message }) => {
                assert_eq!(offset, bytes.len() as u64);
                assert!(message.contains("record 9"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn edf_rejects_zero_digital_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.edf");
        let mut b = fixture_bytes(false);
        // digital maximum of signal 0 := digital minimum
        let at = 256 + 2 * (16 + 80 + 8 + 8 + 8 + 8);
        b[at..at + 8].copy_from_slice(b"-2048   ");
        fs::write(&p, b).unwrap();
        assert!(matches!(load_edf(&p), Err(Error::Edf { .. })));
    }

    #[test]
    fn edf_round_trip_with_annotations() {
        let spec = SyntheticSpec {
            subjects: 1,
            epochs_per_class: 2,
            ..SyntheticSpec::default()
        };
        let r = generate_synthetic(&spec).unwrap().recordings.remove(0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.edf");
        write_edf(&p, &r).unwrap();
        let back = load_edf(&p).unwrap();
        assert_eq!(back.subject, r.subject);
        assert_eq!(back.date, r.date);
        assert_eq!(back.events, r.events);
        for (a, b) in r.samples.iter().zip(&back.samples) {
            let lo = a.iter().copied().fold(f64::INFINITY, f64::min).floor();
            let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
            let q = (hi - lo) / 65535.0;
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= q));
        }
    }

    #[test]
    fn epoch_cache_round_trip() {
        let spec = SyntheticSpec {
            subjects: 1,
            epochs_per_class: 2,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let mut set = make_epochs(&data.recordings[0], &EpochWindow::default(), &data.classes).unwrap();
        set.quantize();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("cache");
        save_epochs(&stem, &set).unwrap();
        assert_eq!(load_epochs(&stem).unwrap(), set);
    }
}
