//! FASTER on a synthetic recording with a bad channel, a bad trial, blinks and
//! a per-epoch channel burst, compared with where the artifacts were injected.
use eegbench::data::*;
use eegbench::dsp::{design_bandpass, filtfilt};
use eegbench::faster::*;

fn main() -> eegbench::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let spec = SyntheticSpec {
        subjects: 1,
        seed: 7,
        artifacts: ArtifactFlags {
            bad_channel: true,
            bad_epoch: true,
            blink: true,
            epoch_channel: true,
        },
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec)?;
    let mut rec = ds.recordings[0].clone();
    rec.samples = filtfilt(&rec.samples, &design_bandpass(5, 1.0, 45.0, rec.fs)?)?;

    let (cleaned, report) = run_faster(&rec, &EpochWindow::default(), &ds.classes, &FasterConfig::default())?;
    println!("injected:");
    for i in &ds.injections {
        println!("  {:?} channel {:?} trial {:?}", i.kind, i.channel, i.trial);
    }
    println!("{}", report.to_text());
    println!("{} epochs x {} channels left", cleaned.len(), cleaned.channels());
    Ok(())
}
