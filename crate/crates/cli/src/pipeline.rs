//! Experiment orchestration: dataset loading, single-run train/attack
//! pipelines, repeat aggregation, and artifact emission (manifest JSON,
//! run-index CSV, model checkpoints).

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use vflsim::attack::{
    execute_attack, generate_poisons, infer_labels, AttackPlan,
};
use vflsim::data::{load_idx, make_blobs, partition_columns, select_auxiliary, Dataset};
use vflsim::defense::{NormMonitor, ReplacementPolicy};
use vflsim::engine::{
    evaluate_mta, parties_from_partition, train, ActiveSpec, GradientInterceptor,
    GradientTransform, TrainSettings, TrainedVflModel,
};
use vflsim::metrics::{compute_lisr, compute_masr, compute_rasr, PredictionTrace};
use vflsim::{Result, VflError};

use crate::config::{DatasetConfig, DefenseConfig, ExperimentConfig};

const BLOB_TRAIN_SEED: u64 = 0xB10B;
const BLOB_TEST_SEED: u64 = 0xB10B + 1;

/// Train and test splits for one experiment.
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(config: &DatasetConfig) -> Result<LoadedData> {
    match config {
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } => Ok(LoadedData {
            train: load_idx(train_images, train_labels)?,
            test: load_idx(test_images, test_labels)?,
        }),
        DatasetConfig::Blobs {
            num_classes,
            dim,
            per_class,
            spacing,
            spread,
        } => Ok(LoadedData {
            train: make_blobs(*num_classes, *dim, *per_class, *spacing, *spread, BLOB_TRAIN_SEED),
            test: make_blobs(*num_classes, *dim, *per_class, *spacing, *spread, BLOB_TEST_SEED),
        }),
    }
}

fn gradient_interceptor(defenses: &[DefenseConfig]) -> GradientInterceptor {
    let mut transforms: Vec<Box<dyn GradientTransform>> = Vec::new();
    for defense in defenses {
        match defense {
            DefenseConfig::Clipping { rate } => {
                transforms.push(Box::new(vflsim::defense::ClippingDefense { clip_rate: *rate }));
            }
            DefenseConfig::Compression { rate } => {
                transforms.push(Box::new(vflsim::defense::CompressionDefense {
                    compression_rate: *rate,
                }));
            }
            DefenseConfig::Dp { epsilon, delta, clip_norm } => {
                transforms.push(Box::new(vflsim::defense::DpDefense {
                    epsilon: *epsilon,
                    delta: *delta,
                    clip_norm: *clip_norm,
                }));
            }
            DefenseConfig::NormMonitor { .. } => {}
        }
    }
    GradientInterceptor::with(transforms)
}

fn norm_monitor(defenses: &[DefenseConfig], model: &TrainedVflModel) -> Option<NormMonitor> {
    defenses.iter().find_map(|d| match d {
        DefenseConfig::NormMonitor { policy } => {
            let policy = if policy == "zero" {
                ReplacementPolicy::Zero
            } else {
                ReplacementPolicy::TrainingMean
            };
            Some(NormMonitor::from_trained(model, policy))
        }
        _ => None,
    })
}

/// Metrics and provenance for one repeat.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub repeat: usize,
    pub seed: u64,
    pub lisr: Option<f64>,
    pub masr: Option<f64>,
    pub rasr: Option<f64>,
    pub mta: f64,
    pub resolved_eta: Option<f64>,
    pub epoch_losses: Vec<f64>,
    /// Samples the inference-phase monitor flagged on the attacker's slot.
    pub flagged: Option<usize>,
}

/// Trains one model per the config at the given seed.
pub fn train_once(
    config: &ExperimentConfig,
    data: &LoadedData,
    seed: u64,
) -> Result<(TrainedVflModel, Vec<f64>)> {
    let partition = partition_columns(data.train.num_features(), config.parties.count, seed);
    let mut parties = parties_from_partition(
        &partition,
        &[config.training.embedding_dim],
        config.training.learning_rate,
        None,
    );
    if let Some(a) = config.parties.attacker {
        parties[a].is_attacker = true;
        parties[a].learning_rate = config.attacker_lr();
    }
    let active = ActiveSpec {
        top_hidden: config.training.top_hidden.clone(),
        learning_rate: config.active_lr(),
        num_classes: data.train.num_classes,
    };
    let settings = TrainSettings {
        epochs: config.training.epochs,
        batch_size: config.training.batch_size,
        record_epoch: config.attack.as_ref().and_then(|a| a.record_epoch),
    };
    let interceptor = gradient_interceptor(&config.defense);
    let outcome = train(
        &data.train.features,
        &data.train.labels,
        &parties,
        &active,
        &settings,
        &interceptor,
        seed,
    )?;
    Ok((outcome.model, outcome.epoch_losses))
}

/// Main-task accuracy of a trained model over the test split.
pub fn evaluate_checkpoint(model: &TrainedVflModel, data: &LoadedData) -> Result<f64> {
    evaluate_mta(model, &data.test.features, &data.test.labels)
}

/// Runs label inference, poison generation, and backdoor execution against a
/// trained model, returning the metric fields of a [`RunRecord`].
pub fn attack_once(
    config: &ExperimentConfig,
    data: &LoadedData,
    model: &TrainedVflModel,
    seed: u64,
) -> Result<(Option<f64>, Option<f64>, Option<f64>, Option<f64>, Option<usize>)> {
    let Some(attack) = &config.attack else {
        return Ok((None, None, None, None, None));
    };
    let attacker = model
        .attacker_index()
        .ok_or_else(|| VflError::Validation("checkpoint has no attacker party".into()))?;

    let aux = select_auxiliary(
        &data.train,
        attack.aux_sets,
        &model.parties[attacker].feature_columns,
        seed,
    )?;
    let centers = infer_labels(
        &model.recorded_embeddings,
        &aux,
        &model.bottoms[attacker],
        attack.clustering_mode()?,
    )?;
    let lisr = compute_lisr(&centers.inferred_labels, &data.train.labels)?;

    let eta = attack.eta.resolve(config.parties.count);
    let plan = AttackPlan {
        mode: attack.attack_mode()?,
        source_label: attack.source_label,
        target_label: attack.target_label,
        eta,
        mu_scale: attack.mu_scale,
        sigma_scale: attack.sigma_scale,
    };
    let mut poison_rng = ChaCha8Rng::seed_from_u64(seed);
    poison_rng.set_stream(3);
    let count = attack.poison_count.unwrap_or(data.test.len());
    let poisons = generate_poisons(&centers, &plan, count, &mut poison_rng)?;

    let monitor = norm_monitor(&config.defense, model);
    let outcome = execute_attack(model, &plan, &data.test.features, &poisons, monitor.as_ref())?;

    let trace = PredictionTrace {
        true_labels: data.test.labels.clone(),
        predicted_labels: outcome.predictions,
        manipulated_mask: outcome.manipulated,
        source_label: attack.source_label,
        target_label: attack.target_label,
    };
    let masr = compute_masr(&trace)?.value;
    let rasr = match attack.source_label {
        Some(_) => compute_rasr(&trace)?.value,
        None => None,
    };
    let flagged = outcome
        .flags
        .map(|flags| flags[attacker].iter().filter(|&&f| f).count());
    Ok((Some(lisr), masr, rasr, Some(eta), flagged))
}

/// One full repeat: train, evaluate main-task accuracy, then attack.
pub fn run_once(config: &ExperimentConfig, data: &LoadedData, repeat: usize) -> Result<RunRecord> {
    let seed = config.run.seed + repeat as u64;
    let (model, epoch_losses) = train_once(config, data, seed)?;
    let mta = evaluate_mta(&model, &data.test.features, &data.test.labels)?;
    let (lisr, masr, rasr, resolved_eta, flagged) = attack_once(config, data, &model, seed)?;
    Ok(RunRecord {
        repeat,
        seed,
        lisr,
        masr,
        rasr,
        mta,
        resolved_eta,
        epoch_losses,
        flagged,
    })
}

/// Mean and sample standard deviation over the defined values of one metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined: usize,
}

pub fn aggregate_metric(values: &[Option<f64>]) -> Aggregate {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Aggregate { mean: None, std: None, defined: 0 };
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let std = if defined.len() > 1 {
        (defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Aggregate { mean: Some(mean), std: Some(std), defined: defined.len() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub lisr: Aggregate,
    pub masr: Aggregate,
    pub rasr: Aggregate,
    pub mta: Aggregate,
}

pub fn aggregate_records(records: &[RunRecord]) -> AggregateReport {
    AggregateReport {
        lisr: aggregate_metric(&records.iter().map(|r| r.lisr).collect::<Vec<_>>()),
        masr: aggregate_metric(&records.iter().map(|r| r.masr).collect::<Vec<_>>()),
        rasr: aggregate_metric(&records.iter().map(|r| r.rasr).collect::<Vec<_>>()),
        mta: aggregate_metric(&records.iter().map(|r| Some(r.mta)).collect::<Vec<_>>()),
    }
}

/// The experiment record written next to the run artifacts; together with
/// the config echo it suffices to re-run the experiment bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
    pub aggregate: AggregateReport,
    pub wall_clock_secs: f64,
    pub version: String,
}

/// Runs all repeats of one experiment.
pub fn run_experiment(config: &ExperimentConfig, data: &LoadedData) -> Result<RunManifest> {
    config.validate()?;
    let started = Instant::now();
    let mut records = Vec::with_capacity(config.run.repeats);
    for repeat in 0..config.run.repeats {
        records.push(run_once(config, data, repeat)?);
    }
    let aggregate = aggregate_records(&records);
    Ok(RunManifest {
        config: config.clone(),
        records,
        aggregate,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

/// Picks a fresh `stem`, `stem-1`, `stem-2`, ... directory so reruns never
/// overwrite earlier artifacts.
pub fn fresh_run_dir(base: &Path, stem: &str) -> Result<PathBuf> {
    for i in 0..10_000 {
        let candidate = if i == 0 {
            base.join(stem)
        } else {
            base.join(format!("{stem}-{i}"))
        };
        if !candidate.exists() {
            fs::create_dir_all(&candidate)?;
            return Ok(candidate);
        }
    }
    Err(VflError::Io(std::io::Error::other(format!(
        "no free run directory under {} for stem {stem}",
        base.display()
    ))))
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let file = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), manifest)
        .map_err(|e| VflError::Io(std::io::Error::other(e)))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let file = File::open(path)?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| VflError::Parse(format!("{}: {e}", path.display())))
}

const RUN_INDEX_HEADER: &str = "run_id,dataset,parties,eta,sigma_scale,defense,lisr,masr,rasr,mta,seed";

fn csv_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

/// Appends one row per repeat to the run-index CSV, creating it with a
/// header when absent.
pub fn append_run_index(path: &Path, config: &ExperimentConfig, records: &[RunRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(file, "{RUN_INDEX_HEADER}")?;
    }
    let dataset = config.dataset.name();
    let defense = config.defense_label();
    let sigma = config.attack.as_ref().map(|a| a.sigma_scale);
    for record in records {
        let run_id = format!("{dataset}-{}p-{defense}-r{}", config.parties.count, record.repeat);
        writeln!(
            file,
            "{run_id},{dataset},{},{},{},{defense},{},{},{},{},{}",
            config.parties.count,
            csv_opt(record.resolved_eta),
            csv_opt(sigma),
            csv_opt(record.lisr),
            csv_opt(record.masr),
            csv_opt(record.rasr),
            record.mta,
            record.seed,
        )?;
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"VFLCKPT1";

/// Writes a versioned binary checkpoint of a trained model.
pub fn save_checkpoint(path: &Path, model: &TrainedVflModel) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(CHECKPOINT_MAGIC)?;
    bincode::serde::encode_into_std_write(model, &mut writer, bincode::config::standard())
        .map_err(|e| VflError::Io(std::io::Error::other(e)))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedVflModel> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    std::io::Read::read_exact(&mut reader, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(VflError::Parse(format!(
            "{}: not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    bincode::serde::decode_from_std_read(&mut reader, bincode::config::standard())
        .map_err(|e| VflError::Parse(format!("{}: {e}", path.display())))
}

/// Applies one sweep-axis value to a config copy.
pub fn apply_axis(config: &mut ExperimentConfig, axis: &str, value: f64) -> Result<()> {
    let as_usize = |v: f64| -> Result<usize> {
        if v.fract() != 0.0 || v < 0.0 {
            return Err(VflError::Config(format!(
                "axis {axis:?} needs a non-negative integer, got {v}"
            )));
        }
        Ok(v as usize)
    };
    match axis {
        "eta" | "sigma_scale" | "mu_scale" | "aux_sets" => {
            let attack = config.attack.as_mut().ok_or_else(|| {
                VflError::Config(format!("axis {axis:?} needs an [attack] section"))
            })?;
            match axis {
                "eta" => attack.eta = crate::config::EtaSetting::Fixed(value),
                "sigma_scale" => attack.sigma_scale = value,
                "mu_scale" => attack.mu_scale = value,
                _ => attack.aux_sets = as_usize(value)?,
            }
        }
        "parties" => config.parties.count = as_usize(value)?,
        "epochs" => config.training.epochs = as_usize(value)?,
        "learning_rate" => config.training.learning_rate = value,
        "attacker_learning_rate" => config.training.attacker_learning_rate = Some(value),
        "active_learning_rate" => config.training.active_learning_rate = Some(value),
        "clip_rate" => {
            config.defense = vec![DefenseConfig::Clipping { rate: value }];
        }
        "compression_rate" => {
            config.defense = vec![DefenseConfig::Compression { rate: value }];
        }
        "dp_epsilon" => {
            let found = config.defense.iter_mut().find_map(|d| match d {
                DefenseConfig::Dp { epsilon, .. } => Some(epsilon),
                _ => None,
            });
            match found {
                Some(eps) => *eps = value,
                None => {
                    return Err(VflError::Config(
                        "axis \"dp_epsilon\" needs a dp defense in the config".into(),
                    ))
                }
            }
        }
        other => {
            return Err(VflError::Config(format!(
                "unknown sweep axis {other:?}; expected one of eta, sigma_scale, mu_scale, \
                 aux_sets, parties, epochs, learning_rate, attacker_learning_rate, \
                 active_learning_rate, clip_rate, compression_rate, dp_epsilon"
            )))
        }
    }
    config.validate()
}

/// One sweep point's aggregated results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: f64,
    pub manifest: RunManifest,
}

/// Runs the experiment once per axis value, re-loading data only when the
/// dataset is unaffected by the axis.
pub fn run_sweep(
    config: &ExperimentConfig,
    data: &LoadedData,
    axis: &str,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(VflError::Config("sweep needs at least one value".into()));
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut point_config = config.clone();
        apply_axis(&mut point_config, axis, value)?;
        let manifest = run_experiment(&point_config, data)?;
        points.push(SweepPoint {
            axis: axis.to_string(),
            value,
            manifest,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EtaSetting;

    fn blob_config() -> ExperimentConfig {
        toml::from_str(
            r#"
[dataset]
kind = "blobs"
num_classes = 2
dim = 2
per_class = 60
spacing = 5.0
spread = 0.4

[parties]
count = 2
attacker = 0

[training]
epochs = 25
batch_size = 16
learning_rate = 0.1
embedding_dim = 16

[attack]
mode = "dirty"
source_label = 0
target_label = 1
eta = 4.0

[run]
repeats = 2
seed = 11
"#,
        )
        .unwrap()
    }

    #[test]
    fn blob_experiment_runs_end_to_end() {
        // a lone attacker party so the recorded embeddings carry the target
        // class's signal; with two parties holding one axis each the target
        // center can legitimately be invisible to the attacker
        let mut config = blob_config();
        config.parties.count = 1;
        config.attack.as_mut().unwrap().eta = EtaSetting::Auto;
        let data = load_data(&config.dataset).unwrap();
        let manifest = run_experiment(&config, &data).unwrap();
        assert_eq!(manifest.records.len(), 2);
        assert!(manifest.aggregate.mta.mean.unwrap() > 0.9);
        assert!(manifest.aggregate.masr.mean.unwrap() > 0.9);
        assert_eq!(manifest.records[0].seed, 11);
        assert_eq!(manifest.records[1].seed, 12);
    }

    #[test]
    fn repeats_reproduce_bit_exactly() {
        let config = blob_config();
        let data = load_data(&config.dataset).unwrap();
        let a = run_once(&config, &data, 1).unwrap();
        let b = run_once(&config, &data, 1).unwrap();
        assert_eq!(a.masr, b.masr);
        assert_eq!(a.mta, b.mta);
        assert_eq!(a.lisr, b.lisr);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn checkpoint_round_trips() {
        let config = blob_config();
        let data = load_data(&config.dataset).unwrap();
        let (model, _) = train_once(&config, &data, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.top.layers[0].weight, model.top.layers[0].weight);
        assert_eq!(loaded.recorded_embeddings, model.recorded_embeddings);
        assert_eq!(loaded.recorded_max_norms, model.recorded_max_norms);

        // attacking the reloaded checkpoint reproduces the original metrics
        let direct = attack_once(&config, &data, &model, 5).unwrap();
        let reloaded = attack_once(&config, &data, &loaded, 5).unwrap();
        assert_eq!(direct.1, reloaded.1);
    }

    #[test]
    fn checkpoint_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), VflError::Parse(_)));
    }

    #[test]
    fn run_index_csv_has_expected_columns() {
        let config = blob_config();
        let records = vec![RunRecord {
            repeat: 0,
            seed: 11,
            lisr: Some(1.0),
            masr: Some(0.5),
            rasr: None,
            mta: 0.97,
            resolved_eta: Some(1.25),
            epoch_losses: vec![],
            flagged: None,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        append_run_index(&path, &config, &records).unwrap();
        append_run_index(&path, &config, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], RUN_INDEX_HEADER);
        assert_eq!(lines.len(), 3);
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields.len(), 11);
        assert_eq!(fields[2], "2");
        assert_eq!(fields[8], "");
        assert_eq!(fields[10], "11");
    }

    #[test]
    fn aggregate_skips_undefined_values() {
        let agg = aggregate_metric(&[Some(0.5), None, Some(1.0)]);
        assert_eq!(agg.defined, 2);
        assert!((agg.mean.unwrap() - 0.75).abs() < 1e-12);
        let empty = aggregate_metric(&[None, None]);
        assert_eq!(empty.mean, None);
        assert_eq!(empty.defined, 0);
    }

    #[test]
    fn fresh_run_dirs_never_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = fresh_run_dir(dir.path(), "exp").unwrap();
        let b = fresh_run_dir(dir.path(), "exp").unwrap();
        assert_ne!(a, b);
        assert!(a.exists() && b.exists());
    }

    #[test]
    fn sweep_applies_axis_values() {
        let mut config = blob_config();
        apply_axis(&mut config, "eta", 2.5).unwrap();
        assert_eq!(config.attack.as_ref().unwrap().eta, EtaSetting::Fixed(2.5));
        apply_axis(&mut config, "parties", 4.0).unwrap();
        assert_eq!(config.parties.count, 4);
        assert!(apply_axis(&mut config, "parties", 2.5).is_err());
        assert!(apply_axis(&mut config, "warp_factor", 9.0).is_err());
    }

    #[test]
    fn degenerate_single_value_sweep_matches_direct_run() {
        let config = blob_config();
        let data = load_data(&config.dataset).unwrap();
        let sweep = run_sweep(&config, &data, "eta", &[1.25]).unwrap();
        let mut direct_config = config.clone();
        direct_config.attack.as_mut().unwrap().eta = EtaSetting::Fixed(1.25);
        let direct = run_experiment(&direct_config, &data).unwrap();
        assert_eq!(sweep.len(), 1);
        assert_eq!(
            sweep[0].manifest.aggregate.masr.mean,
            direct.aggregate.masr.mean
        );
        assert_eq!(sweep[0].manifest.aggregate.mta.mean, direct.aggregate.mta.mean);
    }

    #[test]
    fn eta_trend_is_non_decreasing_on_blobs() {
        // lone attacker, so the inferred target center is well aligned and
        // amplification can only help
        let mut config = blob_config();
        config.parties.count = 1;
        let data = load_data(&config.dataset).unwrap();
        let points = run_sweep(&config, &data, "eta", &[1.0, 1.25, 1.5625]).unwrap();
        let asr: Vec<f64> = points
            .iter()
            .map(|p| p.manifest.aggregate.masr.mean.unwrap())
            .collect();
        assert!(asr[1] >= asr[0] - 1e-9);
        assert!(asr[2] >= asr[1] - 1e-9);
    }
}
