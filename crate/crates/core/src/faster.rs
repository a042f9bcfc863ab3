//! Four-step FASTER artifact rejection: bad channels, bad epochs, ICA component
//! removal and per-epoch channel repair. Every decision is a population z-score
//! across items exceeding the threshold in absolute value.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::data::{make_epochs, EpochSet, EpochWindow, Recording};
use crate::error::{Error, Result};
use crate::nnengine::{gemm, Op};

pub const DEFAULT_THRESHOLD: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FasterConfig {
    pub threshold: f64,
    pub ica_max_iter: usize,
    pub ica_tol: f64,
    /// Band used for the component spectral slope.
    pub slope_band: (f64, f64),
}

impl Default for FasterConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            ica_max_iter: 200,
            ica_tol: 1e-4,
            slope_band: (1.0, 45.0),
        }
    }
}

/// Population z-scores; a constant vector maps to zeros.
pub fn zscores(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 1e-12 * mean.abs().max(1e-300)) || !sd.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

fn amplitude_range(x: &[f64]) -> f64 {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// Median of absolute first differences.
pub fn median_gradient(x: &[f64]) -> f64 {
    let mut d: Vec<f64> = x.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}

/// Excess kurtosis.
pub fn kurtosis(x: &[f64]) -> f64 {
    let m = mean(x);
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / x.len() as f64;
    if m2 <= 0.0 {
        0.0
    } else {
        m4 / (m2 * m2) - 3.0
    }
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Rescaled-range Hurst estimate over dyadic segment lengths 16..=len/2.
pub fn hurst_exponent(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < 128 {
        return Err(Error::invalid(format!("Hurst exponent needs at least 128 samples, got {n}")));
    }
    if variance(series) <= 0.0 {
        return Err(Error::invalid("Hurst exponent undefined for a constant series"));
    }
    let mut log_n = Vec::new();
    let mut log_rs = Vec::new();
    let mut len = 16;
    while len <= n / 2 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for seg in series.chunks_exact(len) {
            let m = mean(seg);
            let sd = variance(seg).sqrt();
            if sd <= 0.0 {
                continue;
            }
            let (mut z, mut lo, mut hi) = (0.0f64, 0.0f64, 0.0f64);
            for v in seg {
                z += v - m;
                lo = lo.min(z);
                hi = hi.max(z);
            }
            acc += (hi - lo) / sd;
            count += 1;
        }
        if count > 0 {
            log_n.push((len as f64).ln());
            log_rs.push((acc / count as f64).ln());
        }
        len *= 2;
    }
    if log_n.len() < 2 {
        return Err(Error::invalid("Hurst exponent needs at least two non-constant segment scales"));
    }
    Ok(slope(&log_n, &log_rs))
}

/// Slope of log Welch power against log frequency inside `band`.
pub fn spectral_slope(x: &[f64], fs: f64, band: (f64, f64)) -> f64 {
    let seg = (fs.round() as usize).clamp(8, x.len().max(8));
    let seg = seg.min(x.len());
    let step = (seg / 2).max(1);
    let window: Vec<f64> = (0..seg)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / seg as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(seg);
    let mut power = vec![0.0; seg / 2 + 1];
    let mut count = 0;
    let mut start = 0;
    while start + seg <= x.len() {
        let chunk = &x[start..start + seg];
        let m = mean(chunk);
        let mut buf: Vec<Complex64> = chunk
            .iter()
            .zip(&window)
            .map(|(v, w)| Complex64::new((v - m) * w, 0.0))
            .collect();
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p += c.norm_sqr();
        }
        count += 1;
        start += step;
    }
    let (mut lf, mut lp) = (Vec::new(), Vec::new());
    for (k, p) in power.iter().enumerate() {
        let f = k as f64 * fs / seg as f64;
        if f >= band.0 && f <= band.1 && f < fs / 2.0 && *p > 0.0 {
            lf.push(f.ln());
            lp.push((p / count.max(1) as f64).ln());
        }
    }
    if lf.len() < 2 {
        return 0.0;
    }
    slope(&lf, &lp)
}

/// One thresholded decision with the statistic behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Flag {
    pub item: usize,
    /// Channel within the epoch for per-epoch channel repairs.
    pub channel: Option<usize>,
    pub statistic: &'static str,
    pub value: f64,
    pub z: f64,
}

/// Items flagged by one step plus the evidence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutcome {
    pub flagged: Vec<usize>,
    pub flags: Vec<Flag>,
}

fn threshold_table(names: &[&'static str], stats: &[Vec<f64>], threshold: f64) -> StepOutcome {
    let n = stats.first().map_or(0, Vec::len);
    let mut out = StepOutcome::default();
    let zs: Vec<Vec<f64>> = stats.iter().map(|s| zscores(s)).collect();
    for item in 0..n {
        let mut hit = false;
        for (k, name) in names.iter().enumerate() {
            if zs[k][item].abs() > threshold {
                hit = true;
                out.flags.push(Flag {
                    item,
                    channel: None,
                    statistic: name,
                    value: stats[k][item],
                    z: zs[k][item],
                });
            }
        }
        if hit {
            out.flagged.push(item);
        }
    }
    out
}

fn mean_abs_correlation(samples: &[Vec<f64>]) -> Vec<f64> {
    let c = samples.len();
    let centered: Vec<Vec<f64>> = samples
        .iter()
        .map(|ch| {
            let m = mean(ch);
            ch.iter().map(|v| v - m).collect()
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|ch| ch.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut acc = vec![0.0; c];
    for i in 0..c {
        for j in i + 1..c {
            let denom = norms[i] * norms[j];
            let r = if denom > 0.0 {
                centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / denom
            } else {
                0.0
            };
            acc[i] += r.abs();
            acc[j] += r.abs();
        }
    }
    acc.iter().map(|v| v / (c - 1) as f64).collect()
}

/// Step 1: variance, mean absolute correlation and Hurst exponent per channel.
pub fn reject_channels(recording: &Recording, threshold: f64) -> Result<StepOutcome> {
    if recording.channels() < 4 {
        return Err(Error::invalid(format!(
            "channel rejection needs at least 4 channels, got {}",
            recording.channels()
        )));
    }
    let var: Vec<f64> = recording.samples.iter().map(|ch| variance(ch)).collect();
    let corr = mean_abs_correlation(&recording.samples);
    let hurst: Vec<f64> = recording
        .samples
        .iter()
        .map(|ch| hurst_exponent(ch).unwrap_or(0.0))
        .collect();
    Ok(threshold_table(
        &["variance", "correlation", "hurst"],
        &[var, corr, hurst],
        threshold,
    ))
}

/// Step 2: deviation from the channel averages, amplitude range and variance per epoch.
pub fn reject_epochs(epochs: &EpochSet, threshold: f64) -> Result<StepOutcome> {
    if epochs.len() < 4 {
        return Err(Error::invalid(format!(
            "epoch rejection needs at least 4 epochs, got {}",
            epochs.len()
        )));
    }
    let c = epochs.channels();
    let grand: Vec<f64> = (0..c)
        .map(|ch| epochs.epochs.iter().map(|e| mean(&e.data[ch])).sum::<f64>() / epochs.len() as f64)
        .collect();
    let mut dev = Vec::with_capacity(epochs.len());
    let mut range = Vec::with_capacity(epochs.len());
    let mut var = Vec::with_capacity(epochs.len());
    for e in &epochs.epochs {
        dev.push(e.data.iter().zip(&grand).map(|(ch, g)| (mean(ch) - g).abs()).sum::<f64>() / c as f64);
        range.push(e.data.iter().map(|ch| amplitude_range(ch)).sum::<f64>() / c as f64);
        var.push(e.data.iter().map(|ch| variance(ch)).sum::<f64>() / c as f64);
    }
    Ok(threshold_table(&["deviation", "range", "variance"], &[dev, range, var], threshold))
}

/// Result of FastICA: `sources = unmixing * (x - mean)`, `x - mean ≈ mixing * sources`.
#[derive(Clone, Debug)]
pub struct IcaDecomposition {
    pub unmixing: DMatrix<f64>,
    pub mixing: DMatrix<f64>,
    pub sources: DMatrix<f64>,
    pub whitening: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl IcaDecomposition {
    pub fn components(&self) -> usize {
        self.sources.nrows()
    }

    /// Signal with the listed components removed (`x - mixing[:, bad] * sources[bad, :]`).
    pub fn remove(&self, x: &DMatrix<f64>, bad: &[usize]) -> DMatrix<f64> {
        let mut out = x.clone();
        for &k in bad {
            let a = self.mixing.column(k);
            let s = self.sources.row(k);
            out -= a * s;
        }
        out
    }
}

/// Symmetric FastICA with a tanh contrast. Full-rank inputs are whitened
/// symmetrically (so already-white data starts at the solution); otherwise the
/// leading principal directions are kept.
pub fn fastica(x: &DMatrix<f64>, n_components: usize, max_iter: usize, tol: f64) -> Result<IcaDecomposition> {
    let (c, n) = x.shape();
    if n_components == 0 || n_components > c {
        return Err(Error::invalid(format!("cannot extract {n_components} components from {c} channels")));
    }
    if n < 20 * c {
        return Err(Error::invalid(format!(
            "ICA needs at least {} samples for {c} channels, got {n}",
            20 * c
        )));
    }
    let mean: Vec<f64> = (0..c).map(|i| x.row(i).sum() / n as f64).collect();
    let mut xc = x.clone();
    for i in 0..c {
        xc.row_mut(i).add_scalar_mut(-mean[i]);
    }
    let cov = &xc * xc.transpose() / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > top * 1e-10).count();
    let k = if rank < n_components {
        log::warn!("covariance has numerical rank {rank}; extracting {rank} components instead of {n_components}");
        rank
    } else {
        n_components
    };
    if k == 0 {
        return Err(Error::invalid("ICA input has no variance"));
    }
    let e = DMatrix::from_fn(c, k, |r, j| eig.eigenvectors[(r, order[j])]);
    let d: Vec<f64> = (0..k).map(|j| eig.eigenvalues[order[j]]).collect();
    let d_inv_sqrt = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(k, d.iter().map(|v| 1.0 / v.sqrt())));
    let d_sqrt = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(k, d.iter().map(|v| v.sqrt())));
    let (whitening, dewhitening) = if k == c {
        (&e * &d_inv_sqrt * e.transpose(), &e * &d_sqrt * e.transpose())
    } else {
        (&d_inv_sqrt * e.transpose(), &e * &d_sqrt)
    };
    let z = &whitening * &xc;
    // row-major copy for the GEMM kernel
    let z_rm: Vec<f64> = (0..k).flat_map(|i| z.row(i).iter().copied().collect::<Vec<_>>()).collect();

    let mut w = DMatrix::<f64>::identity(k, k);
    let mut g = vec![0.0; k * n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let w_rm: Vec<f64> = (0..k * k).map(|i| w[(i / k, i % k)]).collect();
        gemm(k, k, n, 1.0, &w_rm, Op::N, &z_rm, Op::N, 0.0, &mut g);
        let mut g_prime_mean = vec![0.0; k];
        for (i, row) in g.chunks_exact_mut(n).enumerate() {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                let e = (-2.0 * v.abs()).exp();
                *v = ((1.0 - e) / (1.0 + e)).copysign(*v);
                acc += 1.0 - *v * *v;
            }
            g_prime_mean[i] = acc / n as f64;
        }
        let mut next = vec![0.0; k * k];
        gemm(k, n, k, 1.0 / n as f64, &g, Op::N, &z_rm, Op::T, 0.0, &mut next);
        let w_new = DMatrix::from_fn(k, k, |i, j| next[i * k + j] - g_prime_mean[i] * w[(i, j)]);
        let w_new = symmetric_decorrelation(&w_new);
        let lim = (&w_new * w.transpose())
            .diagonal()
            .iter()
            .map(|v| (v.abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = w_new;
        if lim < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("FastICA did not converge in {max_iter} iterations");
    }
    let unmixing = &w * &whitening;
    let mixing = &dewhitening * w.transpose();
    let sources = &w * &z;
    Ok(IcaDecomposition {
        unmixing,
        mixing,
        sources,
        whitening,
        mean,
        iterations,
        converged,
    })
}

fn symmetric_decorrelation(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = nalgebra::DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| 1.0 / v.max(1e-300).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose() * w
}

/// Step 3: kurtosis, median gradient, spectral slope and Hurst exponent per component.
pub fn reject_components(ica: &IcaDecomposition, fs: f64, config: &FasterConfig) -> Result<StepOutcome> {
    let k = ica.components();
    if k < 4 {
        return Err(Error::invalid(format!("component rejection needs at least 4 components, got {k}")));
    }
    let rows: Vec<Vec<f64>> = (0..k).map(|i| ica.sources.row(i).iter().copied().collect()).collect();
    let kurt = rows.iter().map(|r| kurtosis(r)).collect();
    let grad = rows.iter().map(|r| median_gradient(r)).collect();
    let slopes = rows.iter().map(|r| spectral_slope(r, fs, config.slope_band)).collect();
    let hurst = rows.iter().map(|r| hurst_exponent(r).unwrap_or(0.0)).collect();
    Ok(threshold_table(
        &["kurtosis", "median_gradient", "spectral_slope", "hurst"],
        &[kurt, grad, slopes, hurst],
        config.threshold,
    ))
}

/// One per-epoch channel replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct Repair {
    pub epoch: usize,
    pub channel: usize,
    pub sources: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RepairOutcome {
    pub repairs: Vec<Repair>,
    /// Epochs whose channels were all flagged; removed from the output.
    pub dropped: Vec<usize>,
    pub flags: Vec<Flag>,
}

/// Step 4: per epoch, z across channels of variance, median gradient, amplitude range
/// and deviation; flagged channels become the mean of the 4 nearest good channels
/// (or of all good channels without coordinates).
pub fn repair_epoch_channels(epochs: &EpochSet, threshold: f64) -> Result<(EpochSet, RepairOutcome)> {
    let c = epochs.channels();
    if c < 4 {
        return Err(Error::invalid(format!("channel repair needs at least 4 channels, got {c}")));
    }
    let mut out = epochs.clone();
    out.epochs.clear();
    let mut report = RepairOutcome::default();
    for (ei, e) in epochs.epochs.iter().enumerate() {
        let means: Vec<f64> = e.data.iter().map(|ch| mean(ch)).collect();
        let avg = mean(&means);
        let stats = [
            e.data.iter().map(|ch| variance(ch)).collect::<Vec<_>>(),
            e.data.iter().map(|ch| median_gradient(ch)).collect(),
            e.data.iter().map(|ch| amplitude_range(ch)).collect(),
            means.iter().map(|m| m - avg).collect(),
        ];
        let step = threshold_table(&["variance", "median_gradient", "range", "deviation"], &stats, threshold);
        for f in step.flags {
            report.flags.push(Flag {
                item: ei,
                channel: Some(f.item),
                ..f
            });
        }
        if step.flagged.is_empty() {
            out.epochs.push(e.clone());
            continue;
        }
        let good: Vec<usize> = (0..c).filter(|i| !step.flagged.contains(i)).collect();
        if good.is_empty() {
            report.dropped.push(ei);
            continue;
        }
        let mut fixed = e.clone();
        for &bad in &step.flagged {
            let sources: Vec<usize> = match &epochs.coordinates {
                Some(coords) => {
                    let mut by_dist: Vec<(f64, usize)> = good
                        .iter()
                        .map(|&g| {
                            let d: f64 = (0..3).map(|a| (coords[g][a] - coords[bad][a]).powi(2)).sum();
                            (d, g)
                        })
                        .collect();
                    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    by_dist.iter().take(4).map(|&(_, g)| g).collect()
                }
                None => good.clone(),
            };
            let len = e.data[bad].len();
            fixed.data[bad] = (0..len)
                .map(|t| sources.iter().map(|&s| e.data[s][t]).sum::<f64>() / sources.len() as f64)
                .collect();
            report.repairs.push(Repair {
                epoch: ei,
                channel: bad,
                sources,
            });
        }
        out.epochs.push(fixed);
    }
    Ok((out, report))
}

/// Everything the pipeline decided, with indices in the input's numbering:
/// channels of the recording and epochs in event order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RejectionReport {
    pub channel_names: Vec<String>,
    pub bad_channels: Vec<usize>,
    pub bad_epochs: Vec<usize>,
    pub bad_components: Vec<usize>,
    pub repairs: Vec<Repair>,
    pub dropped_epochs: Vec<usize>,
    pub channel_flags: Vec<Flag>,
    pub epoch_flags: Vec<Flag>,
    pub component_flags: Vec<Flag>,
    pub repair_flags: Vec<Flag>,
    pub ica_iterations: usize,
    pub ica_converged: bool,
}

impl RejectionReport {
    pub fn is_empty(&self) -> bool {
        self.bad_channels.is_empty()
            && self.bad_epochs.is_empty()
            && self.bad_components.is_empty()
            && self.repairs.is_empty()
            && self.dropped_epochs.is_empty()
    }

    /// Human-readable document, one section per step and one line per decision.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, f: &Flag, what: &str| {
            let _ = match f.channel {
                Some(ch) => writeln!(
                    s,
                    "  {what} {} channel {}: {} = {:.6} (z = {:.3})",
                    f.item, ch, f.statistic, f.value, f.z
                ),
                None => writeln!(s, "  {what} {}: {} = {:.6} (z = {:.3})", f.item, f.statistic, f.value, f.z),
            };
        };
        let _ = writeln!(s, "[step1.bad_channels]");
        for f in &self.channel_flags {
            let name = self.channel_names.get(f.item).map_or("?", String::as_str);
            let _ = writeln!(
                s,
                "  channel {} ({name}): {} = {:.6} (z = {:.3})",
                f.item, f.statistic, f.value, f.z
            );
        }
        let _ = writeln!(s, "\n[step2.bad_epochs]");
        for f in &self.epoch_flags {
            line(&mut s, f, "epoch");
        }
        let _ = writeln!(
            s,
            "\n[step3.bad_components]\n  ica iterations {} converged {}",
            self.ica_iterations, self.ica_converged
        );
        for f in &self.component_flags {
            line(&mut s, f, "component");
        }
        let _ = writeln!(s, "\n[step4.repairs]");
        for f in &self.repair_flags {
            line(&mut s, f, "epoch");
        }
        for r in &self.repairs {
            let _ = writeln!(s, "  epoch {} channel {} <- mean of {:?}", r.epoch, r.channel, r.sources);
        }
        for d in &self.dropped_epochs {
            let _ = writeln!(s, "  epoch {d} dropped (all channels flagged)");
        }
        s
    }
}

/// Steps 1 through 4 on one band-passed recording. Epoch numbering in the report follows
/// the epochs `make_epochs` produces from the full recording.
pub fn run_faster(
    recording: &Recording,
    window: &EpochWindow,
    classes: &[String],
    config: &FasterConfig,
) -> Result<(EpochSet, RejectionReport)> {
    let mut report = RejectionReport {
        channel_names: recording.channel_names.clone(),
        ..RejectionReport::default()
    };
    let step1 = reject_channels(recording, config.threshold)?;
    let keep: Vec<usize> = (0..recording.channels()).filter(|i| !step1.flagged.contains(i)).collect();
    report.bad_channels = step1.flagged;
    report.channel_flags = step1.flags;
    let reduced = recording.select_channels(&keep);

    let all = make_epochs(&reduced, window, classes)?;
    let step2 = reject_epochs(&all, config.threshold)?;
    let kept_epochs: Vec<usize> = (0..all.len()).filter(|i| !step2.flagged.contains(i)).collect();
    report.bad_epochs = step2.flagged;
    report.epoch_flags = step2.flags;
    let mut epochs = all.subset(&kept_epochs);

    let c = epochs.channels();
    let t = epochs.samples();
    if epochs.len() * t >= 20 * c && c >= 4 {
        let x = DMatrix::from_fn(c, epochs.len() * t, |ch, i| epochs.epochs[i / t].data[ch][i % t]);
        let ica = fastica(&x, c, config.ica_max_iter, config.ica_tol)?;
        report.ica_iterations = ica.iterations;
        report.ica_converged = ica.converged;
        if ica.components() >= 4 {
            let step3 = reject_components(&ica, epochs.fs, config)?;
            if !step3.flagged.is_empty() {
                let clean = ica.remove(&x, &step3.flagged);
                for (i, e) in epochs.epochs.iter_mut().enumerate() {
                    for (ch, row) in e.data.iter_mut().enumerate() {
                        for (k, v) in row.iter_mut().enumerate() {
                            *v = clean[(ch, i * t + k)];
                        }
                    }
                }
            }
            report.bad_components = step3.flagged;
            report.component_flags = step3.flags;
        }
    } else {
        log::warn!("{}: too little data for ICA; step 3 skipped", recording.subject);
    }

    let (repaired, step4) = repair_epoch_channels(&epochs, config.threshold)?;
    let to_epoch = |i: usize| kept_epochs[i];
    let to_channel = |i: usize| keep[i];
    report.repairs = step4
        .repairs
        .into_iter()
        .map(|r| Repair {
            epoch: to_epoch(r.epoch),
            channel: to_channel(r.channel),
            sources: r.sources.into_iter().map(to_channel).collect(),
        })
        .collect();
    report.dropped_epochs = step4.dropped.into_iter().map(to_epoch).collect();
    report.repair_flags = step4
        .flags
        .into_iter()
        .map(|f| Flag {
            item: to_epoch(f.item),
            channel: f.channel.map(to_channel),
            ..f
        })
        .collect();
    Ok((repaired, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Epoch;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Independent R/S computation: explicit cumulative profile per segment.
    fn rs_oracle(x: &[f64]) -> f64 {
        let mut pts = Vec::new();
        let mut len = 16;
        while len <= x.len() / 2 {
            let segs = x.len() / len;
            let mut total = 0.0;
            for s in 0..segs {
                let seg = &x[s * len..(s + 1) * len];
                let m: f64 = seg.iter().sum::<f64>() / len as f64;
                let profile: Vec<f64> = seg
                    .iter()
                    .scan(0.0, |acc, v| {
                        *acc += v - m;
                        Some(*acc)
                    })
                    .collect();
                let r = profile.iter().cloned().fold(0.0f64, f64::max) - profile.iter().cloned().fold(0.0f64, f64::min);
                let sd = (seg.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len as f64).sqrt();
                total += r / sd;
            }
            pts.push(((len as f64).ln(), (total / segs as f64).ln()));
            len *= 2;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>()
    }

    #[test]
    fn hurst_reference_processes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = gauss(4096, &mut rng);
        let h = hurst_exponent(&noise).unwrap();
        assert!((h - 0.5).abs() <= 0.1, "{h}");
        let walk: Vec<f64> = noise
            .iter()
            .scan(0.0, |a, v| {
                *a += v;
                Some(*a)
            })
            .collect();
        let hw = hurst_exponent(&walk).unwrap();
        assert!((hw - 1.0).abs() <= 0.15, "{hw}");
        assert!((hw - rs_oracle(&walk)).abs() < 1e-12);
        let sine: Vec<f64> = (0..4096).map(|i| (i as f64 * 0.3).sin()).collect();
        let hs = hurst_exponent(&sine).unwrap();
        assert!((hs - rs_oracle(&sine)).abs() < 1e-12);
        assert!(hs < 0.5, "{hs}");
        assert!(hurst_exponent(&[1.0; 512]).is_err());
        assert!(hurst_exponent(&noise[..100]).is_err());
    }

    fn noise_recording(channels: usize, n: usize, seed: u64) -> Recording {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Recording {
            samples: (0..channels).map(|_| gauss(n, &mut rng)).collect(),
            fs: 128.0,
            channel_names: (0..channels).map(|i| format!("E{i}")).collect(),
            coordinates: None,
            events: vec![],
            subject: "n".into(),
            date: None,
        }
    }

    #[test]
    fn step1_high_variance_channel() {
        let mut r = noise_recording(17, 4096, 1);
        r.samples[9].iter_mut().for_each(|v| *v *= 10.0);
        assert_eq!(reject_channels(&r, 3.0).unwrap().flagged, vec![9]);
    }

    #[test]
    fn step1_duplicate_channel() {
        let mut r = noise_recording(32, 4096, 2);
        r.samples[20] = r.samples[4].clone();
        let out = reject_channels(&r, 3.0).unwrap();
        assert!(out.flagged.contains(&20), "{out:?}");
        assert!(out.flags.iter().any(|f| f.item == 20 && f.statistic == "correlation"));
    }

    #[test]
    fn step1_clean_noise_false_positives() {
        let counts: Vec<usize> = (0..100)
            .map(|s| reject_channels(&noise_recording(16, 1024, 100 + s), 3.0).unwrap().flagged.len())
            .collect();
        let mut sorted = counts.clone();
        sorted.sort();
        assert_eq!(sorted[50], 0);
        assert!(counts.iter().sum::<usize>() as f64 / 100.0 <= 1.0);
        assert!(reject_channels(&noise_recording(3, 512, 0), 3.0).is_err());
    }

    fn noise_epochs(count: usize, channels: usize, seed: u64) -> EpochSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EpochSet {
            epochs: (0..count)
                .map(|i| Epoch {
                    data: (0..channels).map(|_| gauss(256, &mut rng)).collect(),
                    label: i % 2,
                    subject: "n".into(),
                })
                .collect(),
            fs: 128.0,
            classes: vec!["a".into(), "b".into()],
            channel_names: (0..channels).map(|i| format!("E{i}")).collect(),
            coordinates: None,
        }
    }

    #[test]
    fn step2_examples() {
        let mut set = noise_epochs(41, 8, 3);
        for ch in &mut set.epochs[17].data {
            ch.iter_mut().for_each(|v| *v *= 20.0);
        }
        assert_eq!(reject_epochs(&set, 3.0).unwrap().flagged, vec![17]);
        let mut same = noise_epochs(1, 8, 4);
        let e = same.epochs[0].clone();
        same.epochs = vec![e; 10];
        assert!(reject_epochs(&same, 3.0).unwrap().flagged.is_empty());
        let mut flagged = 0;
        for s in 0..20 {
            flagged += reject_epochs(&noise_epochs(40, 8, 50 + s), 3.0).unwrap().flagged.len();
        }
        assert!(flagged as f64 / 800.0 <= 0.05);
        assert!(reject_epochs(&noise_epochs(3, 8, 0), 3.0).is_err());
    }

    fn uniform_sources(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(2, n, |_, _| rng.gen_range(-1.0..1.0) * 3f64.sqrt())
    }

    fn abs_corr(a: &[f64], b: &[f64]) -> f64 {
        let (ma, mb) = (mean(a), mean(b));
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        (cov / (va * vb).sqrt()).abs()
    }

    #[test]
    fn ica_recovers_uniform_sources() {
        let s = uniform_sources(5000, 9);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.4, 1.0]);
        let x = &a * &s;
        let ica = fastica(&x, 2, 200, 1e-4).unwrap();
        assert!(ica.converged);
        let ident = &ica.unmixing * &ica.mixing;
        assert!((ident - DMatrix::identity(2, 2)).abs().max() < 1e-4);
        for truth in 0..2 {
            let t: Vec<f64> = s.row(truth).iter().copied().collect();
            let best = (0..2)
                .map(|k| abs_corr(&t, &ica.sources.row(k).iter().copied().collect::<Vec<_>>()))
                .fold(0.0, f64::max);
            assert!(best > 0.95, "{best}");
        }
    }

    #[test]
    fn ica_independent_white_input_converges_fast() {
        let s = uniform_sources(20000, 10);
        let ica = fastica(&s, 2, 200, 1e-4).unwrap();
        assert!(ica.converged && ica.iterations <= 5, "{}", ica.iterations);
    }

    #[test]
    fn ica_rank_deficient_reduces_components() {
        let s = uniform_sources(2000, 11);
        let x = DMatrix::from_fn(3, 2000, |r, c| if r < 2 { s[(r, c)] } else { s[(0, c)] + s[(1, c)] });
        let ica = fastica(&x, 3, 200, 1e-4).unwrap();
        assert_eq!(ica.components(), 2);
        let ident = &ica.unmixing * &ica.mixing;
        assert!((ident - DMatrix::identity(2, 2)).abs().max() < 1e-4);
    }

    #[test]
    fn step3_blink_component_flagged_and_identity_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 128 * 120;
        let mut src: Vec<Vec<f64>> = (0..11).map(|_| gauss(n, &mut rng)).collect();
        let mut blink = vec![0.0; n];
        let mut t = 100;
        while t + 40 < n {
            for k in 0..40 {
                blink[t + k] = 5.0 * (0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / 40.0).cos());
            }
            t += rng.gen_range(256..640);
        }
        src.push(blink);
        let s = DMatrix::from_fn(12, n, |r, c| src[r][c]);
        let mix = DMatrix::from_fn(12, 12, |_, _| rng.gen_range(-1.0..1.0));
        let x = &mix * &s;
        let ica = fastica(&x, 12, 200, 1e-4).unwrap();
        let out = reject_components(&ica, 128.0, &FasterConfig::default()).unwrap();
        assert_eq!(out.flagged.len(), 1, "{out:?}");
        let comp: Vec<f64> = ica.sources.row(out.flagged[0]).iter().copied().collect();
        assert!(abs_corr(&comp, &src[11]) > 0.9);
        let same = ica.remove(&x, &[]);
        assert!((same - &x).abs().max() < 1e-5);
    }

    #[test]
    fn step4_repairs_one_epoch_only() {
        let mut set = noise_epochs(20, 16, 13);
        set.epochs[6].data[3].iter_mut().for_each(|v| *v *= 30f64.sqrt());
        let (fixed, out) = repair_epoch_channels(&set, 3.0).unwrap();
        let on_channel: Vec<usize> = out.repairs.iter().filter(|r| r.channel == 3).map(|r| r.epoch).collect();
        assert_eq!(on_channel, vec![6], "{out:?}");
        let r = out.repairs.iter().find(|r| r.epoch == 6).unwrap();
        assert_eq!(r.sources.len(), 15);
        for (i, (a, b)) in set.epochs.iter().zip(&fixed.epochs).enumerate() {
            if !out.repairs.iter().any(|r| r.epoch == i) {
                assert_eq!(a, b);
            }
            if i != 6 {
                assert_eq!(a.data[3], b.data[3]);
            }
        }
    }

    #[test]
    fn step4_repaired_variance_inside_band_for_smooth_background() {
        use crate::data::{generate_synthetic, SyntheticSpec};
        let spec = SyntheticSpec {
            subjects: 1,
            epochs_per_class: 10,
            snr: 0.0,
            seed: 21,
            // sign-patterned rhythms are not spatially smooth; neighbor averages cancel them
            rhythms: 0,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let mut set = make_epochs(&data.recordings[0], &EpochWindow::default(), &data.classes).unwrap();
        set.epochs[6].data[3].iter_mut().for_each(|v| *v *= 30f64.sqrt());
        let (fixed, out) = repair_epoch_channels(&set, 3.0).unwrap();
        assert!(out.repairs.iter().any(|r| (r.epoch, r.channel) == (6, 3)), "{out:?}");
        let r = out.repairs.iter().find(|r| r.epoch == 6).unwrap();
        assert_eq!(r.sources.len(), 4);
        let vars: Vec<f64> = fixed.epochs[6].data.iter().map(|c| variance(c)).collect();
        assert!(zscores(&vars)[3].abs() <= 3.0, "{}", zscores(&vars)[3]);
    }

    #[test]
    fn step4_uses_nearest_coordinates() {
        let mut set = noise_epochs(4, 6, 14);
        set.coordinates = Some((0..6).map(|i| [i as f64, 0.0, 0.0]).collect());
        set.epochs[2].data[0].iter_mut().for_each(|v| *v *= 50.0);
        let (_, out) = repair_epoch_channels(&set, 2.0).unwrap();
        let r = out.repairs.iter().find(|r| r.epoch == 2 && r.channel == 0).unwrap();
        assert_eq!(r.sources, vec![1, 2, 3, 4]);
    }

    #[test]
    fn step4_clean_false_positive_rate() {
        let set = noise_epochs(80, 16, 15);
        let (_, out) = repair_epoch_channels(&set, 3.0).unwrap();
        assert!(out.repairs.len() as f64 / (80.0 * 16.0) <= 0.05);
    }

    proptest! {
        #[test]
        fn zscores_standardized(values in proptest::collection::vec(-1e3f64..1e3, 2..40)) {
            let z = zscores(&values);
            let n = z.len() as f64;
            let m = z.iter().sum::<f64>() / n;
            let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-9);
            prop_assert!(sd.abs() < 1e-9 || (sd - 1.0).abs() < 1e-9);
        }
    }
}
