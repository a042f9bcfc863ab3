//! Builds every architecture for a 22-channel, 250 Hz, 4-class input, prints
//! its layer table and finite-difference checks the gradients of a small copy.
use eegbench::models::*;
use eegbench::nnengine::{gradient_check, random_batch, ModelGraph};

fn main() -> eegbench::Result<()> {
    let kinds = [
        ArchitectureKind::ShallowConvNet,
        ArchitectureKind::DeepConvNet,
        ArchitectureKind::EegNet,
        ArchitectureKind::EegNetFusion,
        ArchitectureKind::MiEegNet,
    ];
    let sig = InputSignature::two_second(22, 250.0, 4);
    for kind in kinds {
        let g: ModelGraph<f32> = build_model(kind, &sig, 1)?;
        println!("== {} ({} parameters)", kind.display_name(), g.parameter_count());
        println!("{}", g.describe_table());
    }

    // gradients on a tiny input in f64
    let small = InputSignature::two_second(3, 32.0, 3);
    for kind in kinds {
        let g: ModelGraph<f64> = build_model(kind, &small, 2)?;
        let (batch, labels) = random_batch(&g, 4, 3);
        let check = gradient_check(&g, &batch, &labels, 30, 1e-5, 4)?;
        println!(
            "{:<16} {} gradients, max relative error {:.2e} at {}",
            kind.id(),
            check.checked,
            check.max_rel_error,
            check.worst
        );
    }
    Ok(())
}
