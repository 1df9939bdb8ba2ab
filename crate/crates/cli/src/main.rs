//! `repshot` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use repshot_core::classification::{classify, train_classifier};
use repshot_core::evolution::{predict_trajectory, train_cascade};
use repshot_core::harness::{
    classification_training_set, regression_training_set, run_classification_benchmark, run_regression_benchmark,
    synth_population, synth_trajectories, two_classes, StrategyKind, SynthSpec,
};
use repshot_core::io::{
    self, Checkpoint, Dataset, DatasetSource, Manifest, ManifestEntry, RunConfig, Task, TemplateMeta,
    TemplateSource,
};
use repshot_core::report;
use repshot_core::seed;
use repshot_core::templates::{estimate_cbt, linear_average_template, random_one_shot_select, TemplateConfig};
use repshot_core::Population;

const DEFAULT_OUTPUT_DIR: &str = "repshot-out";

#[derive(Parser, Debug)]
#[command(name = "repshot", version, about = "One-representative-shot training of brain graph models")]
struct Cli {
    /// Worker threads for benchmark jobs.
    #[arg(long, global = true, env = "REPSHOT_THREADS")]
    threads: Option<usize>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true, env = "REPSHOT_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate a population template and write it with a metadata sidecar.
    EstimateCbt(EstimateArgs),
    /// Train a graph GAN cascade on trajectories.
    TrainEvolution(TrainEvolutionArgs),
    /// Forecast follow-up graphs from a baseline graph.
    Predict(PredictArgs),
    /// Train a graph attention classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Classify graphs with a trained classifier.
    Classify(ClassifyArgs),
    /// Cross-validated comparison of training strategies.
    Benchmark(BenchmarkArgs),
    /// Write a synthetic dataset and its manifest.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Cbt,
    Avg,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    All,
    Random,
    Avg,
    Cbt,
}

impl From<Strategy> for StrategyKind {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::All => StrategyKind::TrainOnAll,
            Strategy::Random => StrategyKind::RandomOneShot,
            Strategy::Avg => StrategyKind::LinearAverageOneShot,
            Strategy::Cbt => StrategyKind::CbtOneShot,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Args, Debug)]
struct TemplateOpts {
    /// Size of the random subset scored each epoch.
    #[arg(long)]
    subset_size: Option<usize>,
    #[arg(long)]
    template_epochs: Option<usize>,
}

impl TemplateOpts {
    fn config(&self, seed: u64) -> TemplateConfig {
        let d = TemplateConfig::default();
        TemplateConfig {
            subset_size: self.subset_size.unwrap_or(d.subset_size),
            max_epochs: self.template_epochs.unwrap_or(d.max_epochs),
            rng_seed: seed,
            ..d
        }
    }
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Method::Cbt)]
    method: Method,
    /// Use only members with this label.
    #[arg(long)]
    class: Option<String>,
    /// Timepoint to use when the manifest lists trajectories.
    #[arg(long, default_value_t = 0)]
    timepoint: usize,
    #[command(flatten)]
    template: TemplateOpts,
}

#[derive(Args, Debug)]
struct TrainEvolutionArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Strategy::Cbt)]
    strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    template: TemplateOpts,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    baseline: PathBuf,
}

#[derive(Args, Debug)]
struct TrainClassifierArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Strategy::Cbt)]
    strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = "AD")]
    positive_class: String,
    #[command(flatten)]
    template: TemplateOpts,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Matrix files to classify.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Run config (TOML); flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Generate the dataset with default synthetic settings.
    #[arg(long, conflicts_with = "manifest")]
    synthetic: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated subset of all,random,avg,cbt.
    #[arg(long)]
    strategies: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Random one-shot draws per fold.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    num_subjects: Option<usize>,
    #[arg(long)]
    rois: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    timepoints: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let out_dir = cli.output_dir;
    match cli.command {
        Command::EstimateCbt(a) => estimate(a),
        Command::TrainEvolution(a) => train_evolution(a),
        Command::Predict(a) => predict(a, out_dir),
        Command::TrainClassifier(a) => train_cls(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Benchmark(a) => benchmark(a, out_dir),
        Command::Synth(a) => synth(a),
    }
}

fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let pop = match io::load_manifest(&a.manifest)? {
        Dataset::Population(p) => p,
        Dataset::Trajectories(ts) => {
            let len = ts[0].states().len();
            if a.timepoint >= len {
                bail!("timepoint {} out of range (trajectories have {len})", a.timepoint);
            }
            Population::new(ts.iter().map(|t| t.states()[a.timepoint].clone()).collect())?
        }
    };
    let pop = match &a.class {
        Some(c) => {
            if pop.labels().is_none() {
                bail!("--class given but the manifest has no labels");
            }
            let members = pop.class_members(c);
            if members.is_empty() {
                bail!("no members labelled `{c}`");
            }
            Population::new(members)?
        }
        None => pop,
    };
    let cfg = a.template.config(a.seed);
    let (template, source, config) = match a.method {
        Method::Cbt => (estimate_cbt(&pop, &cfg)?, TemplateSource::Cbt, Some(cfg)),
        Method::Avg => (linear_average_template(&pop)?, TemplateSource::LinearAverage, None),
        Method::Random => {
            let index = random_one_shot_select(&pop, a.seed)?;
            (pop.members()[index].clone(), TemplateSource::RandomMember { index }, None)
        }
    };
    let meta = TemplateMeta {
        source,
        population_hash: io::population_hash(&pop),
        num_members: pop.len(),
        num_rois: pop.num_rois(),
        config,
        seed: a.seed,
    };
    io::write_template(&a.out, &template, &meta)?;
    println!("{}", a.out.display());
    println!("{}", io::sidecar_path(&a.out).display());
    Ok(())
}

fn train_evolution(a: TrainEvolutionArgs) -> Result<()> {
    let trajectories = io::load_manifest(&a.manifest)?.into_trajectories(&a.manifest)?;
    let kind = StrategyKind::from(a.strategy);
    let template = a.template.config(0);
    let (train, _) = regression_training_set(&trajectories, &all_indices(trajectories.len()), kind, a.seed, &template)?;
    let mut hp = repshot_core::evolution::EvolutionHyperparams {
        rng_seed: seed::derive(a.seed, "cascade"),
        ..Default::default()
    };
    if let Some(e) = a.epochs {
        hp.epochs = e;
    }
    info!("training {} stage(s) on {} trajectory(ies)", trajectories[0].follow_ups(), train.len());
    let model = train_cascade(&train, &hp)?;
    io::write_checkpoint(&a.out, &Checkpoint::Cascade { model, hyperparams: hp })?;
    println!("{}", a.out.display());
    Ok(())
}

fn predict(a: PredictArgs, out_dir: Option<PathBuf>) -> Result<()> {
    let Checkpoint::Cascade { model, .. } = io::read_checkpoint(&a.checkpoint)? else {
        bail!("{} holds a classifier, not a cascade", a.checkpoint.display());
    };
    let baseline = io::read_matrix(&a.baseline)?;
    let preds = predict_trajectory(&model, &baseline)?;
    let dir = out_dir.unwrap_or_else(|| a.baseline.parent().map(Path::to_path_buf).unwrap_or_default());
    let stem = a.baseline.file_stem().and_then(|s| s.to_str()).unwrap_or("baseline");
    for (k, p) in preds.iter().enumerate() {
        let path = dir.join(format!("{stem}_pred_t{}.txt", k + 1));
        io::write_matrix(&path, p)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn train_cls(a: TrainClassifierArgs) -> Result<()> {
    let pop = io::load_manifest(&a.manifest)?.into_population(&a.manifest)?;
    let classes = two_classes(&pop, &a.positive_class)?;
    let kind = StrategyKind::from(a.strategy);
    let template = a.template.config(0);
    let (train, _) = classification_training_set(&pop, &all_indices(pop.len()), &classes, kind, a.seed, &template)?;
    let mut cfg = repshot_core::classification::ClassifierConfig {
        rng_seed: seed::derive(a.seed, "classifier"),
        ..Default::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    info!("training on {} graph(s)", train.len());
    let model = train_classifier(&train, &classes, &cfg)?;
    io::write_checkpoint(&a.out, &Checkpoint::Classifier(model))?;
    println!("{}", a.out.display());
    Ok(())
}

fn classify_cmd(a: ClassifyArgs) -> Result<()> {
    let Checkpoint::Classifier(model) = io::read_checkpoint(&a.checkpoint)? else {
        bail!("{} holds a cascade, not a classifier", a.checkpoint.display());
    };
    println!("file\tlabel\tp_{}\tp_{}", model.classes[0], model.classes[1]);
    for path in &a.inputs {
        let g = io::read_matrix(path)?;
        let p = classify(&model, &g).with_context(|| path.display().to_string())?;
        println!(
            "{}\t{}\t{:.6}\t{:.6}",
            path.display(),
            p.label,
            p.probabilities[0],
            p.probabilities[1]
        );
    }
    Ok(())
}

fn benchmark(a: BenchmarkArgs, out_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let Some(task) = a.task else {
                bail!("--task is required without --config");
            };
            let dataset = match (&a.manifest, a.synthetic) {
                (Some(m), false) => DatasetSource::Manifest(m.clone()),
                (None, true) => DatasetSource::Synthetic(SynthSpec {
                    seed: a.seed.unwrap_or(0),
                    ..Default::default()
                }),
                _ => bail!("give exactly one of --synthetic or --manifest"),
            };
            RunConfig::new(task.into(), dataset)
        }
    };
    if let Some(t) = a.task {
        if Task::from(t) != cfg.task {
            bail!("--task conflicts with the config file");
        }
    }
    if let Some(s) = &a.strategies {
        cfg.strategies = s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.folds {
        cfg.folds = f;
    }
    if let Some(r) = a.repeats {
        cfg.random_repeats = r;
    }
    if let Some(d) = out_dir {
        cfg.output_dir = Some(d);
    }
    let cfg = RunConfig::from_toml(&cfg.to_toml(), Path::new("<command line>"), None)?;
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));

    let (files, table) = match cfg.task {
        Task::Regression => {
            let trajectories = match &cfg.dataset {
                DatasetSource::Synthetic(s) => synth_trajectories(s)?,
                DatasetSource::Manifest(m) => io::load_manifest(m)?.into_trajectories(m)?,
            };
            let rep = run_regression_benchmark(&trajectories, &cfg.regression())?;
            (io::write_regression_report(&dir, &rep)?, report::regression_table(&rep))
        }
        Task::Classification => {
            let pop = match &cfg.dataset {
                DatasetSource::Synthetic(s) => synth_population(s)?,
                DatasetSource::Manifest(m) => io::load_manifest(m)?.into_population(m)?,
            };
            let rep = run_classification_benchmark(&pop, &cfg.classification())?;
            (io::write_classification_report(&dir, &rep)?, report::classification_table(&rep))
        }
    };
    let cfg_path = dir.join("run_config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).with_context(|| cfg_path.display().to_string())?;
    print!("{table}");
    for f in files.iter().chain(std::iter::once(&cfg_path)) {
        println!("{}", f.display());
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        num_subjects: a.num_subjects.unwrap_or(d.num_subjects),
        r: a.rois.unwrap_or(d.r),
        class_separation: a.separation.unwrap_or(d.class_separation),
        noise_std: a.noise.unwrap_or(d.noise_std),
        timepoints: a.timepoints.unwrap_or(d.timepoints),
        seed: a.seed,
        ..d
    };
    let mut entries = Vec::new();
    match a.task {
        TaskArg::Classification => {
            let pop = synth_population(&spec)?;
            let labels = pop.labels().expect("synthetic populations are labelled");
            for (k, (m, label)) in pop.members().iter().zip(labels).enumerate() {
                let name = format!("subject{k:03}.txt");
                io::write_matrix(&a.out_dir.join(&name), m)?;
                entries.push(ManifestEntry {
                    path: name.into(),
                    subject: format!("subject{k:03}"),
                    label: Some(label.clone()),
                    timepoint: None,
                });
            }
        }
        TaskArg::Regression => {
            for t in synth_trajectories(&spec)? {
                for (k, m) in t.states().iter().enumerate() {
                    let name = format!("{}_t{k}.txt", t.subject_id());
                    io::write_matrix(&a.out_dir.join(&name), m)?;
                    entries.push(ManifestEntry {
                        path: name.into(),
                        subject: t.subject_id().to_string(),
                        label: None,
                        timepoint: Some(k),
                    });
                }
            }
        }
    }
    let manifest = Manifest {
        schema_version: io::SCHEMA_VERSION,
        normalize: false,
        entries,
    };
    let path = a.out_dir.join("manifest.toml");
    std::fs::write(&path, manifest.to_toml()).with_context(|| path.display().to_string())?;
    println!("{}", path.display());
    Ok(())
}
