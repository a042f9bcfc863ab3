//! Band-pass design, zero-phase filtering and resampling of a two-tone signal.
use eegbench::dsp::*;

fn main() -> eegbench::Result<()> {
    let fs = 250.0;
    let filter = design_bandpass(5, 1.0, 45.0, fs)?;
    println!("order {} stable {}", filter.order(), filter.is_stable());
    for f in [0.2, 1.0, 10.0, 45.0, 60.0, 100.0] {
        println!("  |H({f:>5} Hz)| = {:.4}", filter.response(f, fs).norm());
    }

    // 10 Hz inside the band, 60 Hz line noise outside
    let n = (4.0 * fs) as usize;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            (2.0 * std::f64::consts::PI * 10.0 * t).sin() + 0.8 * (2.0 * std::f64::consts::PI * 60.0 * t).sin()
        })
        .collect();
    let y = filtfilt_channel(&x, &filter)?;
    let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
    println!("rms before {:.3}, after {:.3} (pure 10 Hz tone: {:.3})", rms(&x), rms(&y), 0.5f64.sqrt());

    let down = resample_channel(&y, fs, 128.0)?;
    println!("resampled {} -> {} samples", y.len(), down.len());
    Ok(())
}
