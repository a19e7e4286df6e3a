use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vflsim::VflError;
use vflsim_cli::config::{parse_defense_flag, ExperimentConfig};
use vflsim_cli::pipeline::{
    aggregate_records, append_run_index, attack_once, evaluate_checkpoint, fresh_run_dir,
    load_checkpoint, load_data, read_manifest, run_sweep, save_checkpoint,
    train_once, Aggregate, AggregateReport, RunManifest, RunRecord,
};

#[derive(Parser)]
#[command(name = "vflsim", version, about = "Deterministic aggVFL backdoor attack and defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the base seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory root; defaults to the config's `run.out` or `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the repeat count from the config.
    #[arg(long)]
    repeats: Option<usize>,
    /// Add a defense, e.g. `clipping=0.4`, `compression=0.6`,
    /// `dp=1.0,1e-5,3.0`, `norm_monitor=training_mean`. Repeatable;
    /// replaces the config's defense list.
    #[arg(long)]
    defense: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train models (one per repeat), persisting checkpoints and a manifest.
    Train(CommonArgs),
    /// Run the attack pipeline against an existing checkpoint.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep one config axis over a list of values.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Config key to sweep, e.g. `eta`, `parties`, `attacker_learning_rate`.
        #[arg(long)]
        axis: String,
        /// Comma-separated numeric values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Summarize a manifest produced by train/attack/sweep.
    Report {
        /// Path to a manifest.json.
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn apply_overrides(config: &mut ExperimentConfig, args: &CommonArgs) -> Result<(), VflError> {
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    if let Some(repeats) = args.repeats {
        config.run.repeats = repeats;
    }
    if let Some(out) = &args.out {
        config.run.out = Some(out.clone());
    }
    if !args.defense.is_empty() {
        config.defense = args
            .defense
            .iter()
            .map(|d| parse_defense_flag(d))
            .collect::<Result<_, _>>()?;
    }
    config.validate()
}

fn out_root(config: &ExperimentConfig) -> PathBuf {
    config.run.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |x| format!("{:.2}%", 100.0 * x))
}

fn print_aggregate(label: &str, agg: &Aggregate) {
    match (agg.mean, agg.std) {
        (Some(mean), Some(std)) => println!(
            "{label}: {:.2}% ± {:.2}% ({} repeats)",
            100.0 * mean,
            100.0 * std,
            agg.defined
        ),
        _ => println!("{label}: undefined"),
    }
}

fn print_report(report: &AggregateReport) {
    print_aggregate("lisr", &report.lisr);
    print_aggregate("masr", &report.masr);
    print_aggregate("rasr", &report.rasr);
    print_aggregate("mta", &report.mta);
}

fn cmd_train(args: &CommonArgs) -> Result<(), VflError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    apply_overrides(&mut config, args)?;
    let data = load_data(&config.dataset)?;
    let dir = fresh_run_dir(&out_root(&config), &format!("{}-train", config.dataset.name()))?;

    let started = std::time::Instant::now();
    let mut records = Vec::with_capacity(config.run.repeats);
    for repeat in 0..config.run.repeats {
        let seed = config.run.seed + repeat as u64;
        let (model, epoch_losses) = train_once(&config, &data, seed)?;
        let mta = evaluate_checkpoint(&model, &data)?;
        save_checkpoint(&dir.join(format!("checkpoint-r{repeat}.ckpt")), &model)?;
        println!("repeat {repeat}: mta {}", pct(Some(mta)));
        records.push(RunRecord {
            repeat,
            seed,
            lisr: None,
            masr: None,
            rasr: None,
            mta,
            resolved_eta: None,
            epoch_losses,
            flagged: None,
        });
    }
    let manifest = RunManifest {
        aggregate: aggregate_records(&records),
        config: config.clone(),
        records,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    vflsim_cli::pipeline::write_manifest(&dir, &manifest)?;
    append_run_index(&dir.join("run-index.csv"), &config, &manifest.records)?;
    print_report(&manifest.aggregate);
    println!("artifacts: {}", dir.display());
    Ok(())
}

fn cmd_attack(common: &CommonArgs, checkpoint: &PathBuf) -> Result<(), VflError> {
    let mut config = ExperimentConfig::load(&common.config)?;
    apply_overrides(&mut config, common)?;
    if config.attack.is_none() {
        return Err(VflError::Config("attack requires an [attack] section".into()));
    }
    let data = load_data(&config.dataset)?;
    let model = load_checkpoint(checkpoint)?;
    let dir = fresh_run_dir(&out_root(&config), &format!("{}-attack", config.dataset.name()))?;

    let started = std::time::Instant::now();
    let seed = config.run.seed;
    let mta = evaluate_checkpoint(&model, &data)?;
    let (lisr, masr, rasr, resolved_eta, flagged) = attack_once(&config, &data, &model, seed)?;
    let records = vec![RunRecord {
        repeat: 0,
        seed,
        lisr,
        masr,
        rasr,
        mta,
        resolved_eta,
        epoch_losses: vec![],
        flagged,
    }];
    let manifest = RunManifest {
        aggregate: aggregate_records(&records),
        config: config.clone(),
        records,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    vflsim_cli::pipeline::write_manifest(&dir, &manifest)?;
    append_run_index(&dir.join("run-index.csv"), &config, &manifest.records)?;
    print_report(&manifest.aggregate);
    if let Some(flagged) = manifest.records[0].flagged {
        println!("monitor flagged {flagged} attacker embeddings");
    }
    println!("artifacts: {}", dir.display());
    Ok(())
}

fn cmd_sweep(common: &CommonArgs, axis: &str, values: &[f64]) -> Result<(), VflError> {
    let mut config = ExperimentConfig::load(&common.config)?;
    apply_overrides(&mut config, common)?;
    let data = load_data(&config.dataset)?;
    let dir = fresh_run_dir(
        &out_root(&config),
        &format!("{}-sweep-{axis}", config.dataset.name()),
    )?;

    let points = run_sweep(&config, &data, axis, values)?;
    let index = dir.join("run-index.csv");
    for point in &points {
        let point_dir = fresh_run_dir(&dir, &format!("{axis}-{}", point.value))?;
        vflsim_cli::pipeline::write_manifest(&point_dir, &point.manifest)?;
        append_run_index(&index, &point.manifest.config, &point.manifest.records)?;
        println!("{axis} = {}:", point.value);
        print_report(&point.manifest.aggregate);
    }
    println!("artifacts: {}", dir.display());
    Ok(())
}

fn cmd_report(manifest_path: &PathBuf) -> Result<(), VflError> {
    let manifest = read_manifest(manifest_path)?;
    println!(
        "dataset {} | {} parties | defense {} | {} repeats | {:.1}s",
        manifest.config.dataset.name(),
        manifest.config.parties.count,
        manifest.config.defense_label(),
        manifest.records.len(),
        manifest.wall_clock_secs,
    );
    for record in &manifest.records {
        println!(
            "  repeat {} (seed {}): lisr {} masr {} rasr {} mta {}",
            record.repeat,
            record.seed,
            pct(record.lisr),
            pct(record.masr),
            pct(record.rasr),
            pct(Some(record.mta)),
        );
    }
    print_report(&manifest.aggregate);
    Ok(())
}

fn exit_code_for(err: &VflError) -> u8 {
    match err {
        VflError::Divergence { .. } => 2,
        VflError::Io(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(common) => cmd_train(common),
        Command::Attack { common, checkpoint } => cmd_attack(common, checkpoint),
        Command::Sweep { common, axis, values } => cmd_sweep(common, axis, values),
        Command::Report { manifest } => cmd_report(manifest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
