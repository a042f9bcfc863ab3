//! The whole pipeline from a TOML config: generate, preprocess, train within
//! and transfer, compare, then render the report tables from the fold CSV.
use eegbench::cli::{emit_report, run_pipeline, ExperimentConfig};

const CONFIG: &str = r#"
seed = 5
networks = ["eegnet", "shallow_convnet"]
modes = ["within", "transfer"]

[source]
kind = "synthetic"
subjects = 11
epochs_per_class = 12

[training]
max_epochs = 3
give_up = 3
patience = 2
shift_s = 1.0
"#;

fn main() -> eegbench::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let out = std::env::temp_dir().join("eegbench_pipeline_example");
    let mut config = ExperimentConfig::from_toml(CONFIG)?;
    config.output = out.clone();
    let run = run_pipeline(&config)?;
    println!("{} fold rows written under {}", run.rows.len(), run.dir.display());
    let report = emit_report(&out)?;
    println!("{}", report.text());
    Ok(())
}
