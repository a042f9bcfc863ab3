//! Signal conditioning: Butterworth band-pass design as second-order sections,
//! zero-phase application, rational resampling, window extraction and scaling.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section `(b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let num = self.b[0] + z_inv * (self.b[1] + z_inv * self.b[2]);
        let den = 1.0 + z_inv * (self.a[0] + z_inv * self.a[1]);
        num / den
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let (a1, a2) = (self.a[0], self.a[1]);
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct-form II state reached after a long unit-step input.
    fn step_state(&self) -> [f64; 2] {
        let y = self.dc_gain();
        let z1 = self.b[2] - self.a[1] * y;
        let z0 = self.b[1] - self.a[0] * y + z1;
        [z0, z1]
    }
}

/// Cascade of second-order sections with an overall input gain.
#[derive(Clone, Debug, PartialEq)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    pub gain: f64,
}

impl BiquadCascade {
    pub fn order(&self) -> usize {
        2 * self.sections.len()
    }

    pub fn poles(&self) -> Vec<Complex64> {
        self.sections.iter().flat_map(|s| s.poles()).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }

    /// Complex frequency response at `freq` Hz.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        self.sections
            .iter()
            .fold(Complex64::new(self.gain, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Single causal pass; `x0` seeds the steady-state initial conditions (0 for rest).
    pub fn filter_from(&self, x: &[f64], x0: f64) -> Vec<f64> {
        let mut y: Vec<f64> = x.iter().map(|v| v * self.gain).collect();
        let mut level = x0 * self.gain;
        for s in &self.sections {
            let [mut z0, mut z1] = s.step_state();
            z0 *= level;
            z1 *= level;
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b[0] * xin + z0;
                z0 = s.b[1] * xin - s.a[0] * out + z1;
                z1 = s.b[2] * xin - s.a[1] * out;
                *v = out;
            }
            level *= s.dc_gain();
        }
        y
    }

    /// Single causal pass from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        self.filter_from(x, 0.0)
    }

    /// Edge padding length used by [`filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }
}

/// Butterworth band-pass of the given prototype `order` (the cascade has `2 * order` poles).
pub fn design_bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<BiquadCascade> {
    if order == 0 {
        return Err(Error::invalid("filter order must be positive"));
    }
    if !(fs > 0.0) || !(low_hz > 0.0) || !(low_hz < high_hz) {
        return Err(Error::invalid(format!(
            "band-pass needs 0 < low < high, got {low_hz}..{high_hz} Hz"
        )));
    }
    if high_hz >= fs / 2.0 {
        return Err(Error::invalid(format!(
            "upper edge {high_hz} Hz is not below the Nyquist frequency {} Hz",
            fs / 2.0
        )));
    }
    let fs2 = 2.0 * fs;
    let wl = fs2 * (PI * low_hz / fs).tan();
    let wh = fs2 * (PI * high_hz / fs).tan();
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();
    let to_z = |s: Complex64| (fs2 + s) / (fs2 - s);

    let mut sections = Vec::with_capacity(order);
    // Only the upper-half-plane prototype poles are visited; conjugates are implied.
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        if p.im < -1e-12 {
            continue;
        }
        let half = p * bw / 2.0;
        let root = (half * half - w0 * w0).sqrt();
        let (q1, q2) = (half + root, half - root);
        let pairs: Vec<(Complex64, Complex64)> = if p.im.abs() <= 1e-12 {
            vec![(q1, q2)]
        } else {
            vec![(q1, q1.conj()), (q2, q2.conj())]
        };
        for (s1, s2) in pairs {
            let (z1, z2) = (to_z(s1), to_z(s2));
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [-(z1 + z2).re, (z1 * z2).re],
            });
        }
    }
    let mut cascade = BiquadCascade { sections, gain: 1.0 };
    let center = 2.0 * (w0 / fs2).atan() * fs / (2.0 * PI);
    cascade.gain = 1.0 / cascade.response(center, fs).norm();
    Ok(cascade)
}

/// Forward-backward filtering of one channel with odd-reflection edge padding.
pub fn filtfilt_channel(x: &[f64], filter: &BiquadCascade) -> Result<Vec<f64>> {
    let pad = filter.pad_len();
    let n = x.len();
    if n <= pad {
        return Err(Error::invalid(format!(
            "signal of {n} samples is too short for zero-phase filtering (needs more than {pad})"
        )));
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let mut y = filter.filter_from(&ext, ext[0]);
    y.reverse();
    let mut y = filter.filter_from(&y, y[0]);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// Zero-phase filtering of every channel; output has the input's shape.
pub fn filtfilt(signal: &[Vec<f64>], filter: &BiquadCascade) -> Result<Vec<Vec<f64>>> {
    signal.iter().map(|ch| filtfilt_channel(ch, filter)).collect()
}

/// Reduced `p / q` with `q <= max_den` equal to `ratio` within `1e-9` relative error.
fn rational(ratio: f64, max_den: u64) -> Option<(u64, u64)> {
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut x = ratio;
    for _ in 0..64 {
        let a = x.floor();
        if a > u32::MAX as f64 {
            break;
        }
        let a = a as u64;
        let h2 = a.checked_mul(h1)?.checked_add(h0)?;
        let k2 = a.checked_mul(k1)?.checked_add(k0)?;
        if k2 > max_den {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if ((h1 as f64 / k1 as f64) - ratio).abs() <= 1e-9 * ratio {
            return Some((h1, k1));
        }
        let frac = x - a as f64;
        if frac.abs() < 1e-15 {
            break;
        }
        x = 1.0 / frac;
    }
    None
}

fn hamming_sinc(p: u64, q: u64) -> (Vec<f64>, usize) {
    let half = 10 * p.max(q) as usize;
    let len = 2 * half + 1;
    // cutoff 0.9 x the smaller Nyquist, normalized to the upsampled Nyquist
    let fc = 0.9 / p.max(q) as f64;
    let h = (0..len)
        .map(|k| {
            let t = k as f64 - half as f64;
            let sinc = if t == 0.0 { 1.0 } else { (PI * fc * t).sin() / (PI * fc * t) };
            let w = 0.54 - 0.46 * (2.0 * PI * k as f64 / (len - 1) as f64).cos();
            fc * sinc * w
        })
        .collect();
    (h, half)
}

/// Polyphase rational resampling of one channel from `fs_from` to `fs_to`.
pub fn resample_channel(x: &[f64], fs_from: f64, fs_to: f64) -> Result<Vec<f64>> {
    if !(fs_from > 0.0 && fs_to > 0.0) {
        return Err(Error::invalid("sampling rates must be positive"));
    }
    if fs_from == fs_to {
        return Ok(x.to_vec());
    }
    let (p, q) = rational(fs_to / fs_from, 10_000).ok_or_else(|| {
        Error::invalid(format!(
            "rate ratio {fs_to}/{fs_from} has no rational form with denominator <= 10000"
        ))
    })?;
    let (h, half) = hamming_sinc(p, q);
    let out_len = (x.len() as f64 * fs_to / fs_from).round() as usize;
    let (pi, qi) = (p as i64, q as i64);
    let gain = p as f64;
    let out = (0..out_len)
        .map(|n| {
            // upsampled position of output sample n, shifted to the filter centre
            let m = n as i64 * qi + half as i64;
            let i_lo = ((m - (h.len() as i64 - 1)) + pi - 1).div_euclid(pi).max(0);
            let i_hi = m.div_euclid(pi).min(x.len() as i64 - 1);
            let mut acc = 0.0;
            let mut i = i_lo;
            while i <= i_hi {
                acc += x[i as usize] * h[(m - i * pi) as usize];
                i += 1;
            }
            acc * gain
        })
        .collect();
    Ok(out)
}

pub fn resample(signal: &[Vec<f64>], fs_from: f64, fs_to: f64) -> Result<Vec<Vec<f64>>> {
    signal.iter().map(|ch| resample_channel(ch, fs_from, fs_to)).collect()
}

/// Fixed-length window cut from an epoch, tagged with its source epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Row-major `channels x samples`.
    pub data: Vec<f32>,
    pub epoch: usize,
    pub label: usize,
    pub start: usize,
}

/// Windows of identical extents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowSet {
    pub channels: usize,
    pub samples: usize,
    pub windows: Vec<Window>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn extend(&mut self, other: WindowSet) -> Result<()> {
        if self.windows.is_empty() {
            self.channels = other.channels;
            self.samples = other.samples;
        } else if !other.windows.is_empty() && (other.channels, other.samples) != (self.channels, self.samples) {
            return Err(Error::invalid(format!(
                "cannot merge {}x{} windows into {}x{}",
                other.channels, other.samples, self.channels, self.samples
            )));
        }
        self.windows.extend(other.windows);
        Ok(())
    }
}

/// Per-window normalization variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Zero mean, unit population std for every channel separately.
    #[default]
    PerChannel,
    /// One mean/std over all channels and samples of the window.
    Window,
}

fn scale_slice(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

/// Standard scaling of a `channels x samples` window; constant channels become zeros.
pub fn standard_scale(window: &mut [Vec<f64>], mode: ScaleMode) {
    match mode {
        ScaleMode::PerChannel => window.iter_mut().for_each(|ch| scale_slice(ch)),
        ScaleMode::Window => {
            let len = window.first().map_or(0, Vec::len);
            let mut flat: Vec<f64> = window.iter().flatten().copied().collect();
            if flat.is_empty() {
                return;
            }
            scale_slice(&mut flat);
            for (ch, chunk) in window.iter_mut().zip(flat.chunks(len)) {
                ch.copy_from_slice(chunk);
            }
        }
    }
}

/// Cuts `win_s`-second windows every `shift_s` seconds (`floor(shift_s * fs)` samples),
/// scaling each window. Window count is `floor((samples - win) / shift) + 1`.
pub fn extract_windows(
    epoch: &[Vec<f64>],
    fs: f64,
    win_s: f64,
    shift_s: f64,
    epoch_id: usize,
    label: usize,
    scale: Option<ScaleMode>,
) -> Result<WindowSet> {
    let channels = epoch.len();
    let samples = epoch.first().map_or(0, Vec::len);
    let win = (win_s * fs).round() as usize;
    let shift = (shift_s * fs).floor() as usize;
    if win == 0 || shift == 0 {
        return Err(Error::invalid("window and shift must each span at least one sample"));
    }
    if samples < win {
        return Err(Error::invalid(format!(
            "epoch of {samples} samples is shorter than one {win}-sample window"
        )));
    }
    let count = (samples - win) / shift + 1;
    let mut windows = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * shift;
        let mut w: Vec<Vec<f64>> = epoch.iter().map(|ch| ch[start..start + win].to_vec()).collect();
        if let Some(mode) = scale {
            standard_scale(&mut w, mode);
        }
        windows.push(Window {
            data: w.iter().flatten().map(|&v| v as f32).collect(),
            epoch: epoch_id,
            label,
            start,
        });
    }
    Ok(WindowSet {
        channels,
        samples: win,
        windows,
    })
}
