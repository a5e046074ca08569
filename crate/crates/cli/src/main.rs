use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pcuda_core::augment::{make_translation_sample, policy_mix, weak_strong_pair, AugmentPolicy, TranslationSpec};
use pcuda_core::dataio::{build_dataset, read_cloud, write_cloud, Dataset, Domain, Split};
use pcuda_core::experiment::{
    confusion_csv, evaluate, export_projection, run_ablation_suite, run_experiment, write_ablation,
    write_projection_csv, write_run, ExperimentConfig, Grid, TrainingData,
};
use pcuda_core::model::load_checkpoint;

/// Point-cloud domain adaptation laboratory.
#[derive(Parser)]
#[command(name = "pcuda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source/target dataset described by a config.
    GenerateData { config: PathBuf },
    /// Train one model per seed and write reports under the config's output directory.
    Train {
        config: PathBuf,
        /// Train only this seed instead of every configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Suppress per-epoch progress.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for `evaluation.json` and `confusion.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid over every configured seed.
    Ablate {
        config: PathBuf,
        /// modules, axes or augmentation.
        #[arg(long, default_value = "modules")]
        grid: String,
        #[arg(long)]
        quiet: bool,
    },
    /// Write the weak, strong, mixed and translated views of a cloud.
    AugmentPreview {
        cloud: PathBuf,
        /// Policy id such as `JCw/JCsS`.
        policy: String,
        #[arg(long, default_value = "preview")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export a 2-D PCA projection of encoder features as CSV.
    Project {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "projection.csv")]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateData { config } => generate(&config),
        Command::Train { config, seed, quiet } => train(&config, seed, quiet),
        Command::Eval {
            checkpoint,
            manifest,
            domain,
            split,
            out,
        } => eval(&checkpoint, &manifest, &domain, &split, out.as_deref()),
        Command::Ablate { config, grid, quiet } => ablate(&config, &grid, quiet),
        Command::AugmentPreview {
            cloud,
            policy,
            out,
            seed,
        } => preview(&cloud, &policy, &out, seed),
        Command::Project {
            checkpoint,
            manifest,
            domain,
            split,
            out,
        } => project(&checkpoint, &manifest, &domain, &split, &out),
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn load_data(config: &ExperimentConfig) -> Result<TrainingData> {
    let manifest = config.manifest_path();
    if !manifest.exists() {
        bail!("{} does not exist; run `pcuda generate-data` first", manifest.display());
    }
    let dataset = Dataset::open(&manifest)?;
    Ok(TrainingData::load(&dataset)?)
}

fn generate(config_path: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let manifest = build_dataset(&config.data, &config.dataset)?;
    for domain in [Domain::Source, Domain::Target] {
        for split in [Split::Train, Split::Test] {
            println!("{domain} {split}: {:?}", manifest.class_counts(domain, split));
        }
    }
    println!("wrote {}", config.manifest_path().display());
    Ok(())
}

fn progress(quiet: bool, label: &str, e: &pcuda_core::experiment::EpochLosses) {
    if !quiet {
        eprintln!(
            "{label} epoch {:>3} lr {:.2e} total {:.4} rm {:.4} trans {:.4} src {:.4} tgt {:.4}",
            e.epoch, e.lr, e.total, e.relational, e.translation, e.source, e.target
        );
    }
}

fn train(config_path: &Path, seed: Option<u64>, quiet: bool) -> Result<()> {
    let config = load_config(config_path)?;
    let data = load_data(&config)?;
    let seeds = seed.map_or_else(|| config.training.seeds.clone(), |s| vec![s]);
    for seed in seeds {
        let label = format!("seed {seed}");
        let run = run_experiment(&config, &data, seed, &mut |e| progress(quiet, &label, e))?;
        let dir = config.output.join(format!("seed-{seed}"));
        write_run(&dir, &run)?;
        println!(
            "seed {seed}: target accuracy {:.4} ({:.1}s) -> {}",
            run.report.target_test.accuracy,
            run.report.wall_clock_seconds,
            dir.display()
        );
    }
    Ok(())
}

fn parse_split(domain: &str, split: &str) -> Result<(Domain, Split)> {
    Ok((domain.parse()?, split.parse()?))
}

fn eval(checkpoint: &Path, manifest: &Path, domain: &str, split: &str, out: Option<&Path>) -> Result<()> {
    let (domain, split) = parse_split(domain, split)?;
    let params = load_checkpoint(checkpoint)?;
    let dataset = Dataset::open(manifest)?;
    if dataset.manifest.num_classes() != params.config.num_classes {
        bail!(
            "checkpoint has {} classes, dataset {}",
            params.config.num_classes,
            dataset.manifest.num_classes()
        );
    }
    let samples = dataset.load_split(domain, split)?;
    let e = evaluate(&params, &samples)?;
    println!("{domain} {split}: accuracy {:.4} over {} samples", e.accuracy, e.count);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("evaluation.json"), serde_json::to_string_pretty(&e)? + "\n")?;
        fs::write(dir.join("confusion.csv"), confusion_csv(&e))?;
    }
    Ok(())
}

fn ablate(config_path: &Path, grid: &str, quiet: bool) -> Result<()> {
    let config = load_config(config_path)?;
    let grid: Grid = grid.parse()?;
    let data = load_data(&config)?;
    let root = config.output.join("ablation");
    let table = run_ablation_suite(
        &config,
        &data,
        &grid.variants(),
        &mut |v, seed, e| progress(quiet, &format!("{v} seed {seed}"), e),
        &mut |v, seed, run| {
            println!(
                "{v} seed {seed}: target accuracy {:.4}",
                run.report.target_test.accuracy
            );
            write_run(&root.join(v.name()).join(format!("seed-{seed}")), run)
        },
    )?;
    write_ablation(&root, &table)?;
    println!("{:<20} {:>5} {:>8} {:>8}", "variant", "runs", "mean", "sem");
    for s in &table.summary {
        println!("{:<20} {:>5} {:>8.4} {:>8.4}", s.variant, s.runs, s.mean, s.sem);
    }
    Ok(())
}

fn preview(cloud_path: &Path, policy_id: &str, out: &Path, seed: u64) -> Result<()> {
    let cloud = read_cloud(cloud_path)?;
    let policy = AugmentPolicy::from_id(policy_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(out)?;
    let mixed = policy_mix(&cloud, &policy, &mut rng)?;
    let (weak, strong) = weak_strong_pair(&cloud, &policy, &mut rng)?;
    let translated = make_translation_sample(&cloud, &TranslationSpec::default(), &mut rng)?;
    for (name, c) in [
        ("original", &cloud),
        ("mixed", &mixed),
        ("weak", &weak),
        ("strong", &strong),
        ("translated", &translated.cloud),
    ] {
        write_cloud(&out.join(format!("{name}.pcd")), c)?;
    }
    println!(
        "wrote original/mixed/weak/strong/translated to {} (translation labels {:?})",
        out.display(),
        translated.labels
    );
    Ok(())
}

fn project(checkpoint: &Path, manifest: &Path, domain: &str, split: &str, out: &Path) -> Result<()> {
    let (domain, split) = parse_split(domain, split)?;
    let params = load_checkpoint(checkpoint)?;
    let samples = Dataset::open(manifest)?.load_split(domain, split)?;
    let projection = export_projection(&params, &samples)?;
    let labels: Vec<usize> = samples.iter().map(|(_, y)| *y).collect();
    write_projection_csv(out, &projection, &labels)?;
    println!(
        "explained variance {:.4} + {:.4} of {:.4} -> {}",
        projection.component_variance[0],
        projection.component_variance[1],
        projection.total_variance,
        out.display()
    );
    Ok(())
}
