//! Five-fold within-subject training of EEGNet on one synthetic subject, with
//! the early-stopping outcome of every fold.
use eegbench::data::*;
use eegbench::dsp::{design_bandpass, filtfilt};
use eegbench::models::ArchitectureKind;
use eegbench::training::*;

fn main() -> eegbench::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let ds = generate_synthetic(&SyntheticSpec {
        subjects: 1,
        seed: 11,
        ..SyntheticSpec::default()
    })?;
    let mut rec = ds.recordings[0].clone();
    rec.samples = filtfilt(&rec.samples, &design_bandpass(5, 1.0, 45.0, rec.fs)?)?;
    let mut epochs = make_epochs(&rec, &EpochWindow::default(), &ds.classes)?;
    epochs.quantize();
    let subject = Subject {
        name: rec.subject.clone(),
        epochs,
    };

    let config = TrainConfig {
        max_epochs: 8,
        give_up: 6,
        patience: 3,
        shift_s: 1.0,
        seed: 11,
        ..TrainConfig::default()
    };
    let folds = within_subject_experiment(&subject, ArchitectureKind::EegNet, &config)?;
    for f in &folds {
        println!(
            "fold {}  accuracy {:.3} ({}/{})  stopped by {} after {} passes, best pass {}",
            f.fold, f.accuracy, f.correct, f.total, f.stop_reason, f.epochs_run, f.best_epoch
        );
    }
    let mean = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64;
    println!("mean accuracy {mean:.3}");
    Ok(())
}
