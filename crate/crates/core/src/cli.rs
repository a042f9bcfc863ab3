//! Experiment configuration, the end-to-end pipeline and the report tables.
//!
//! A run directory holds `folds.csv` (the fold table), `significance.csv`,
//! `rankings.csv` and `manifest.toml`. Every report number is recomputed from
//! fold tables, so `emit_report` can be pointed at any finished run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_edf_dir, load_epochs, make_epochs, merge_days, save_epochs, to_independent_days, write_edf,
    EpochSet, EpochWindow, Recording, SyntheticSpec, VirtualSubject,
};
use crate::dsp::{design_bandpass, filtfilt, resample};
use crate::error::{Error, Result};
use crate::faster::{run_faster, FasterConfig};
use crate::models::ArchitectureKind;
use crate::stats::{
    compare_networks, correlate_rows, AccuracySample, CompareConfig, Mode, SignificanceMatrix, SignificanceSummary,
    SummaryRow,
};
use crate::training::{
    permute_labels, read_fold_rows, transfer_experiment, within_subject_experiment, write_fold_rows, FoldRow, Subject,
    TrainConfig,
};

/// Where recordings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    /// Generated data; the generator seed is replaced by the experiment seed.
    Synthetic(SyntheticSpec),
    /// Every `.edf` file in `dir`; `exclude` lists channel labels to drop.
    Edf {
        dir: PathBuf,
        #[serde(default)]
        exclude: Vec<String>,
    },
}

/// How recordings map to analysis subjects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubjectConfig {
    /// Each (subject, session date) is its own virtual subject.
    IndependentDays,
    #[default]
    Merged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub band_hz: [f64; 2],
    pub filter_order: usize,
    pub resample_hz: Option<f64>,
    pub faster: bool,
    pub faster_threshold: f64,
    pub epoch: EpochWindow,
    /// Event labels to keep, in label order. Required for EDF sources.
    pub classes: Option<Vec<String>>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            band_hz: [1.0, 45.0],
            filter_order: 5,
            resample_hz: None,
            faster: true,
            faster_threshold: FasterConfig::default().threshold,
            epoch: EpochWindow::default(),
            classes: None,
        }
    }
}

fn default_database() -> String {
    "synthetic".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

/// One experiment, read from TOML. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives generation, splits, initialization and shuffling.
    pub seed: u64,
    #[serde(default = "default_database")]
    pub database: String,
    pub source: Source,
    #[serde(default)]
    pub subjects: SubjectConfig,
    pub networks: Vec<ArchitectureKind>,
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    /// Shuffle every subject's labels (chance-level control).
    #[serde(default)]
    pub permute_labels: bool,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config.normalized())
    }

    /// Copy with the experiment seed written into the synthetic spec, so the echoed
    /// config shows the seed actually used.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        if let Source::Synthetic(spec) = &mut c.source {
            spec.seed = self.seed;
        }
        c
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.networks.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("at least one network and one mode are required".into()));
        }
        if matches!(self.source, Source::Edf { .. }) && self.preprocess.classes.is_none() {
            return Err(Error::Config("EDF sources need preprocess.classes".into()));
        }
        self.train_config().validate()
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Recordings and class names of the configured source.
pub fn load_recordings(config: &ExperimentConfig) -> Result<(Vec<Recording>, Vec<String>)> {
    match &config.source {
        Source::Synthetic(spec) => {
            let spec = SyntheticSpec {
                seed: config.seed,
                ..spec.clone()
            };
            let ds = generate_synthetic(&spec)?;
            let classes = config.preprocess.classes.clone().unwrap_or(ds.classes);
            Ok((ds.recordings, classes))
        }
        Source::Edf { dir, exclude } => {
            let recordings = load_edf_dir(dir, exclude)?;
            if recordings.is_empty() {
                return Err(Error::invalid(format!("no .edf files in {}", dir.display())));
            }
            Ok((recordings, config.preprocess.classes.clone().unwrap_or_default()))
        }
    }
}

/// FASTER outcome of one recording, by channel name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingReport {
    pub subject: String,
    pub epochs: usize,
    pub bad_channels: Vec<String>,
    pub bad_epochs: usize,
    pub bad_components: usize,
    pub repairs: usize,
    pub dropped_epochs: usize,
}

fn filter_recording(rec: &Recording, pre: &PreprocessConfig) -> Result<Recording> {
    let mut rec = rec.clone();
    if let Some(to) = pre.resample_hz {
        if to != rec.fs {
            let ratio = to / rec.fs;
            rec.samples = resample(&rec.samples, rec.fs, to)?;
            let len = rec.len();
            rec.events.retain_mut(|e| {
                e.sample = (e.sample as f64 * ratio).round() as usize;
                e.sample < len
            });
            rec.fs = to;
        }
    }
    let filter = design_bandpass(pre.filter_order, pre.band_hz[0], pre.band_hz[1], rec.fs)?;
    rec.samples = filtfilt(&rec.samples, &filter)?;
    Ok(rec)
}

fn epochs_of(rec: &Recording, classes: &[String], pre: &PreprocessConfig) -> Result<(EpochSet, RecordingReport)> {
    let filtered = filter_recording(rec, pre).map_err(|e| e.in_stage("filter", rec.subject.clone()))?;
    if !pre.faster {
        let set = make_epochs(&filtered, &pre.epoch, classes).map_err(|e| e.in_stage("epochs", rec.subject.clone()))?;
        let report = RecordingReport {
            subject: rec.subject.clone(),
            epochs: set.len(),
            bad_channels: Vec::new(),
            bad_epochs: 0,
            bad_components: 0,
            repairs: 0,
            dropped_epochs: 0,
        };
        return Ok((set, report));
    }
    let config = FasterConfig {
        threshold: pre.faster_threshold,
        ..FasterConfig::default()
    };
    let (set, r) =
        run_faster(&filtered, &pre.epoch, classes, &config).map_err(|e| e.in_stage("faster", rec.subject.clone()))?;
    let report = RecordingReport {
        subject: rec.subject.clone(),
        epochs: set.len(),
        bad_channels: r.bad_channels.iter().map(|&c| r.channel_names[c].clone()).collect(),
        bad_epochs: r.bad_epochs.len(),
        bad_components: r.bad_components.len(),
        repairs: r.repairs.len(),
        dropped_epochs: r.dropped_epochs.len(),
    };
    Ok((set, report))
}

/// Filter, FASTER and epoching for every virtual subject. Channels removed in any
/// recording are dropped everywhere so all subjects share one input shape.
pub fn preprocess(
    config: &ExperimentConfig,
    recordings: Vec<Recording>,
    classes: &[String],
) -> Result<(Vec<Subject>, Vec<RecordingReport>)> {
    if classes.len() < 2 {
        return Err(Error::invalid("need at least two classes").in_stage("epochs", config.database.clone()));
    }
    let groups: Vec<VirtualSubject> = match config.subjects {
        SubjectConfig::IndependentDays => to_independent_days(recordings),
        SubjectConfig::Merged => merge_days(recordings),
    }
    .map_err(|e| e.in_stage("load", config.database.clone()))?;

    let mut per_subject = Vec::new();
    let mut reports = Vec::new();
    for vs in &groups {
        let mut sets = Vec::new();
        for rec in &vs.recordings {
            let (set, report) = epochs_of(rec, classes, &config.preprocess)?;
            log::info!("{}: {} epochs, bad channels {:?}", vs.key, report.epochs, report.bad_channels);
            sets.push(set);
            reports.push(report);
        }
        per_subject.push((vs.key.clone(), sets));
    }

    let mut common: Option<BTreeSet<String>> = None;
    for (_, sets) in &per_subject {
        for s in sets {
            let names: BTreeSet<String> = s.channel_names.iter().cloned().collect();
            common = Some(match common {
                None => names,
                Some(c) => c.intersection(&names).cloned().collect(),
            });
        }
    }
    let common = common.unwrap_or_default();
    let mut subjects = Vec::new();
    for (index, (key, sets)) in per_subject.into_iter().enumerate() {
        let mut merged: Option<EpochSet> = None;
        for set in sets {
            // keep the recording's own channel order
            let keep: Vec<String> = set.channel_names.iter().filter(|n| common.contains(*n)).cloned().collect();
            let set = set.select_channels(&keep).map_err(|e| e.in_stage("epochs", key.clone()))?;
            match &mut merged {
                None => merged = Some(set),
                Some(m) => m.append(set).map_err(|e| e.in_stage("epochs", key.clone()))?,
            }
        }
        let mut epochs = merged.expect("virtual subjects have recordings");
        epochs.quantize();
        if config.permute_labels {
            epochs = permute_labels(&epochs, crate::training::mix_seed(config.seed ^ 0x5eed, index as u64));
        }
        subjects.push(Subject { name: key, epochs });
    }
    Ok((subjects, reports))
}

/// Every configured (network, mode) experiment; rows are ordered by network, mode,
/// subject and fold.
pub fn run_experiments(config: &ExperimentConfig, subjects: &[Subject]) -> Result<Vec<FoldRow>> {
    let train = config.train_config();
    let mut rows = Vec::new();
    for &kind in &config.networks {
        for &mode in &config.modes {
            match mode {
                Mode::Within => {
                    for s in subjects {
                        let results = within_subject_experiment(s, kind, &train)
                            .map_err(|e| e.in_stage("train", format!("{kind} within, subject {}", s.name)))?;
                        let mean = results.iter().map(|r| r.accuracy).sum::<f64>() / results.len() as f64;
                        log::info!("{kind} within {}: mean accuracy {mean:.3}", s.name);
                        rows.extend(FoldRow::from_results(&config.database, &s.name, kind, mode, &results));
                    }
                }
                Mode::Transfer => {
                    let out = transfer_experiment(subjects, kind, &train)
                        .map_err(|e| e.in_stage("train", format!("{kind} transfer")))?;
                    for (name, results) in &out.results {
                        rows.extend(FoldRow::from_results(&config.database, name, kind, mode, results));
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Accuracy samples keyed by `(database, mode)`, networks in first-seen order.
fn samples_by_group(rows: &[FoldRow]) -> BTreeMap<(String, Mode), Vec<AccuracySample>> {
    let mut out: BTreeMap<(String, Mode), Vec<AccuracySample>> = BTreeMap::new();
    for r in rows {
        let group = out.entry((r.database.clone(), r.mode)).or_default();
        let i = match group.iter().position(|s| s.network == r.network) {
            Some(i) => i,
            None => {
                group.push(AccuracySample::new(&r.network, &r.database, r.mode));
                group.len() - 1
            }
        };
        group[i].push(&r.subject, r.fold, r.accuracy);
    }
    out
}

/// Pairwise significance for every `(database, mode)` with at least two networks.
pub fn compare(rows: &[FoldRow], n_classes: &BTreeMap<String, usize>) -> Result<Vec<SignificanceMatrix>> {
    let mut out = Vec::new();
    for ((database, mode), samples) in samples_by_group(rows) {
        if samples.len() < 2 {
            continue;
        }
        let config = CompareConfig {
            n_classes: *n_classes.get(&database).unwrap_or(&2),
            ..CompareConfig::default()
        };
        out.push(compare_networks(&samples, &config).map_err(|e| e.in_stage("stats", format!("{database} {mode}")))?);
    }
    Ok(out)
}

fn write_significance(path: &Path, matrices: &[SignificanceMatrix]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["database", "mode", "network_a", "network_b", "test", "raw_p", "adjusted_p", "level"])?;
    for m in matrices {
        for p in &m.pairs {
            w.write_record([
                m.database.clone(),
                m.mode.to_string(),
                m.networks[p.a].clone(),
                m.networks[p.b].clone(),
                p.test.to_string(),
                format!("{:e}", p.raw_p),
                format!("{:e}", p.adjusted_p),
                p.level.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_rankings(path: &Path, rows: &[FoldRow], n_classes: &BTreeMap<String, usize>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["database", "mode", "rank", "network", "mean_accuracy", "chance_improvement"])?;
    for ((database, mode), samples) in samples_by_group(rows) {
        let k = *n_classes.get(&database).unwrap_or(&2);
        let mut ranked: Vec<(String, f64)> = samples.iter().map(|s| (s.network.clone(), s.mean())).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        for (i, (network, mean)) in ranked.into_iter().enumerate() {
            w.write_record([
                database.clone(),
                mode.to_string(),
                (i + 1).to_string(),
                network,
                format!("{mean:.6}"),
                format!("{:.6}", crate::stats::chance_improvement(mean, k)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Structured record of a run: the config echo plus everything needed to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub seed: u64,
    /// How per-fold seeds are derived from `seed`.
    pub seed_scheme: String,
    pub database: String,
    pub n_classes: usize,
    pub channels: Vec<String>,
    pub subjects: Vec<String>,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub preprocessing: Vec<RecordingReport>,
}

pub const FOLDS_FILE: &str = "folds.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
const EPOCH_DIR: &str = "epochs";

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_@.".contains(c) { c } else { '_' })
        .collect()
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))
}

fn manifest_for(config: &ExperimentConfig, subjects: &[Subject], reports: Vec<RecordingReport>) -> Manifest {
    let first = subjects.first().map(|s| &s.epochs);
    Manifest {
        package: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        seed_scheme: "splitmix64(seed, subject FNV-1a ^ fold) per split, init and shuffle".into(),
        database: config.database.clone(),
        n_classes: first.map_or(0, |e| e.classes.len()),
        channels: first.map_or_else(Vec::new, |e| e.channel_names.clone()),
        subjects: subjects.iter().map(|s| s.name.clone()).collect(),
        config: config.normalized(),
        preprocessing: reports,
    }
}

/// `generate`: writes the synthetic recordings as EDF files under `<output>/edf`.
pub fn generate(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let Source::Synthetic(_) = config.source else {
        return Err(Error::Config("generate needs a synthetic source".into()));
    };
    let (recordings, _) = load_recordings(config).map_err(|e| e.in_stage("generate", config.database.clone()))?;
    let dir = config.output.join("edf");
    fs::create_dir_all(&dir)?;
    let mut paths = Vec::new();
    for rec in &recordings {
        let name = match &rec.date {
            Some(d) => format!("{}_{d}.edf", rec.subject),
            None => format!("{}.edf", rec.subject),
        };
        let path = dir.join(file_stem(&name));
        write_edf(&path, rec).map_err(|e| e.in_stage("generate", rec.subject.clone()))?;
        paths.push(path);
    }
    Ok(paths)
}

/// `preprocess`: load, filter, FASTER and epochs; caches epochs under `<output>/epochs`.
pub fn preprocess_stage(config: &ExperimentConfig) -> Result<Vec<Subject>> {
    let (recordings, classes) = load_recordings(config).map_err(|e| e.in_stage("load", config.database.clone()))?;
    let (subjects, reports) = preprocess(config, recordings, &classes)?;
    let dir = config.output.join(EPOCH_DIR);
    fs::create_dir_all(&dir)?;
    for s in &subjects {
        save_epochs(dir.join(file_stem(&s.name)), &s.epochs)?;
    }
    fs::create_dir_all(&config.output)?;
    write_manifest(&config.output, &manifest_for(config, &subjects, reports))?;
    Ok(subjects)
}

fn cached_subjects(config: &ExperimentConfig) -> Result<Option<(Vec<Subject>, Manifest)>> {
    let Ok(manifest) = read_manifest(&config.output) else {
        return Ok(None);
    };
    if manifest.config != config.normalized() {
        log::info!("cached epochs were produced by a different config; preprocessing again");
        return Ok(None);
    }
    let dir = config.output.join(EPOCH_DIR);
    let subjects = manifest
        .subjects
        .iter()
        .map(|name| {
            Ok(Subject {
                name: name.clone(),
                epochs: load_epochs(dir.join(file_stem(name)))?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("load", "epoch cache"))?;
    Ok(Some((subjects, manifest)))
}

/// Written results of a run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<FoldRow>,
    pub matrices: Vec<SignificanceMatrix>,
    pub dir: PathBuf,
}

/// `train`: experiments on cached epochs (preprocessing first when the cache is
/// missing or stale); writes the fold table.
pub fn train_stage(config: &ExperimentConfig) -> Result<Vec<FoldRow>> {
    let (subjects, manifest) = match cached_subjects(config)? {
        Some(c) => c,
        None => {
            let subjects = preprocess_stage(config)?;
            let manifest = read_manifest(&config.output)?;
            (subjects, manifest)
        }
    };
    let rows = run_experiments(config, &subjects)?;
    let mut buf = Vec::new();
    write_fold_rows(&mut buf, &rows)?;
    fs::write(config.output.join(FOLDS_FILE), buf)?;
    write_manifest(&config.output, &manifest)?;
    Ok(rows)
}

/// `compare`: significance matrices and rankings from the fold table in `dir`.
pub fn compare_stage(dir: &Path) -> Result<Vec<SignificanceMatrix>> {
    let rows = read_fold_rows(fs::File::open(dir.join(FOLDS_FILE))?)?;
    let manifest = read_manifest(dir)?;
    let classes = BTreeMap::from([(manifest.database.clone(), manifest.n_classes)]);
    let matrices = compare(&rows, &classes)?;
    write_significance(&dir.join("significance.csv"), &matrices)?;
    write_rankings(&dir.join("rankings.csv"), &rows, &classes)?;
    Ok(matrices)
}

/// load → filter → FASTER → epochs → experiments → stats, writing every artifact to
/// the configured output directory.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    fs::create_dir_all(&config.output)?;
    preprocess_stage(config)?;
    let rows = train_stage(config)?;
    let matrices = compare_stage(&config.output)?;
    Ok(RunOutput {
        rows,
        matrices,
        dir: config.output.clone(),
    })
}

// ---------------------------------------------------------------------------
// report tables

/// Mean accuracy per `(database, network)` in within and transfer mode.
pub type ModeMeans = BTreeMap<(String, String), [Option<f64>; 2]>;

fn mode_slot(mode: Mode) -> usize {
    match mode {
        Mode::Within => 0,
        Mode::Transfer => 1,
    }
}

pub fn mode_means(rows: &[FoldRow]) -> ModeMeans {
    let mut sums: BTreeMap<(String, String), [(f64, usize); 2]> = BTreeMap::new();
    for r in rows {
        let e = sums.entry((r.database.clone(), r.network.clone())).or_default();
        let slot = &mut e[mode_slot(r.mode)];
        slot.0 += r.accuracy;
        slot.1 += 1;
    }
    sums.into_iter()
        .map(|(k, v)| (k, v.map(|(s, n)| (n > 0).then(|| s / n as f64))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainRow {
    pub network: String,
    /// One entry per database column; `None` when a mode is missing.
    pub gains: Vec<Option<f64>>,
    pub average: Option<f64>,
}

/// Transfer gains per database plus their average, networks sorted by descending average.
pub fn transfer_gain_table(means: &ModeMeans) -> (Vec<String>, Vec<GainRow>) {
    let databases: Vec<String> = means.keys().map(|(d, _)| d.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let networks: Vec<String> = means.keys().map(|(_, n)| n.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rows: Vec<GainRow> = networks
        .into_iter()
        .map(|network| {
            let gains: Vec<Option<f64>> = databases
                .iter()
                .map(|d| match means.get(&(d.clone(), network.clone())) {
                    Some([Some(w), Some(t)]) => Some(crate::stats::transfer_gain(*w, *t)),
                    _ => None,
                })
                .collect();
            let present: Vec<f64> = gains.iter().flatten().copied().collect();
            let average = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
            GainRow { network, gains, average }
        })
        .collect();
    rows.sort_by(|a, b| match (a.average, b.average) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.network.cmp(&b.network),
    });
    (databases, rows)
}

/// Per mode: networks by descending mean chance improvement over databases.
pub fn ranking_table(means: &ModeMeans, n_classes: &BTreeMap<String, usize>) -> Vec<(Mode, Vec<(String, Option<f64>)>)> {
    let networks: BTreeSet<String> = means.keys().map(|(_, n)| n.clone()).collect();
    Mode::ALL
        .iter()
        .map(|&mode| {
            let mut ranked: Vec<(String, Option<f64>)> = networks
                .iter()
                .map(|n| {
                    let vals: Vec<f64> = means
                        .iter()
                        .filter(|((_, net), _)| net == n)
                        .filter_map(|((db, _), m)| {
                            m[mode_slot(mode)].map(|acc| crate::stats::chance_improvement(acc, *n_classes.get(db).unwrap_or(&2)))
                        })
                        .collect();
                    let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                    (n.clone(), mean)
                })
                .collect();
            ranked.sort_by(|a, b| match (a.1, b.1) {
                (Some(x), Some(y)) => y.total_cmp(&x),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => a.0.cmp(&b.0),
            });
            (mode, ranked)
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |x| format!("{x:.4}"))
}

fn display_network(id: &str) -> String {
    id.parse::<ArchitectureKind>().map_or_else(|_| id.to_string(), |k| k.display_name().to_string())
}

pub fn render_gain_table(databases: &[String], rows: &[GainRow]) -> String {
    let mut s = String::from("Transfer-learning gain (transfer - within mean accuracy)\n");
    let _ = write!(s, "{:<5} {:<16}", "rank", "network");
    for d in databases {
        let _ = write!(s, " {d:>12}");
    }
    s.push_str("      average\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(s, "{:<5} {:<16}", i + 1, display_network(&r.network));
        for g in &r.gains {
            let _ = write!(s, " {:>12}", cell(*g));
        }
        let _ = writeln!(s, " {:>12}", cell(r.average));
    }
    s
}

pub fn render_ranking_table(ranking: &[(Mode, Vec<(String, Option<f64>)>)]) -> String {
    let mut s = String::from("Ranking by mean improvement over chance\n");
    let _ = writeln!(s, "{:<9} {:<5} {:<16} {:>12}", "mode", "rank", "network", "improvement");
    for (mode, rows) in ranking {
        for (i, (network, v)) in rows.iter().enumerate() {
            let _ = writeln!(s, "{:<9} {:<5} {:<16} {:>12}", mode.id(), i + 1, display_network(network), cell(*v));
        }
    }
    s
}

/// Sum/count/subjects rows and the correlation line; with fewer than three databases
/// the correlation is marked absent.
pub fn render_significance_table(rows: &[SummaryRow]) -> Result<String> {
    let mut s = String::from("Significance investigation\n");
    let _ = writeln!(s, "{:<28} {:>5} {:>6} {:>9}", "database", "sum", "count", "subjects");
    for r in rows {
        let _ = writeln!(s, "{:<28} {:>5} {:>6} {:>9}", r.database, r.level_sum, r.significant_count, r.subjects);
    }
    if rows.len() >= 3 {
        let SignificanceSummary { correlation, df, .. } = correlate_rows(rows.to_vec())?;
        let _ = writeln!(s, "{}", correlation_line(df, correlation.statistic, correlation.p));
    } else {
        s.push_str("r: absent (needs at least 3 databases)\n");
    }
    Ok(s)
}

pub fn correlation_line(df: usize, r: f64, p: f64) -> String {
    format!("r({df}) = {r:.4}, p = {p:.6}")
}

/// Fold tables found in `dir` and its immediate subdirectories, with their manifests.
fn collect_runs(dir: &Path) -> Result<Vec<(Vec<FoldRow>, Manifest)>> {
    let mut dirs = vec![dir.to_path_buf()];
    let mut children: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    dirs.extend(children);
    let mut runs = Vec::new();
    for d in dirs {
        if d.join(FOLDS_FILE).is_file() {
            let rows = read_fold_rows(fs::File::open(d.join(FOLDS_FILE))?)?;
            runs.push((rows, read_manifest(&d)?));
        }
    }
    Ok(runs)
}

/// The three report tables as text.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub transfer_gains: String,
    pub rankings: String,
    pub significance: String,
}

impl Report {
    pub fn text(&self) -> String {
        format!("{}\n{}\n{}", self.transfer_gains, self.rankings, self.significance)
    }
}

/// Builds the report from fold rows; `n_classes` maps each database to its class count.
pub fn build_report(rows: &[FoldRow], n_classes: &BTreeMap<String, usize>) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::invalid("no fold results to report"));
    }
    let means = mode_means(rows);
    let (databases, gains) = transfer_gain_table(&means);
    let ranking = ranking_table(&means, n_classes);
    let matrices = compare(rows, n_classes)?;
    let summary: Vec<SummaryRow> = databases
        .iter()
        .map(|d| {
            let own: Vec<&SignificanceMatrix> = matrices.iter().filter(|m| &m.database == d).collect();
            SummaryRow {
                database: d.clone(),
                level_sum: own.iter().map(|m| m.level_sum()).sum(),
                significant_count: own.iter().map(|m| m.significant_count()).sum(),
                subjects: rows.iter().filter(|r| &r.database == d).map(|r| &r.subject).collect::<BTreeSet<_>>().len(),
            }
        })
        .collect();
    Ok(Report {
        transfer_gains: render_gain_table(&databases, &gains),
        rankings: render_ranking_table(&ranking),
        significance: render_significance_table(&summary)?,
    })
}

/// `report`: reads every fold table under `dir` and writes `report.txt`.
pub fn emit_report(dir: &Path) -> Result<Report> {
    let runs = collect_runs(dir).map_err(|e| e.in_stage("report", dir.display().to_string()))?;
    let mut rows = Vec::new();
    let mut classes = BTreeMap::new();
    for (r, m) in runs {
        classes.insert(m.database.clone(), m.n_classes);
        rows.extend(r);
    }
    let report = build_report(&rows, &classes).map_err(|e| e.in_stage("report", dir.display().to_string()))?;
    fs::write(dir.join("report.txt"), report.text())?;
    Ok(report)
}
