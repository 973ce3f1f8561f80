use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use polyrefine::cnn::{load_model, save_model, CnnError, CnnModel, TrainConfig};
use polyrefine::dataset::{self, load_dataset, save_dataset, DatasetConfig, DatasetError, Split};
use polyrefine::grid_gen::{generate, GridKind, GridSpec};
use polyrefine::io::{self, IoError};
use polyrefine::pipeline::{
    self, create_dir, desk_train_config, refine_mesh, unrefinable_fraction, write_run_json, Figure, Mode,
    PipelineError, Reproduction, Scale,
};
use polyrefine::refine::{Field, RefineConfig, RefineError, Refiner, Strategy};

/// Share of refined elements allowed to stay unrefined before the run fails.
const UNREFINABLE_BUDGET: f64 = 0.01;

#[derive(Debug, Parser)]
#[command(name = "polyrefine", version, about = "Polyhedral mesh refinement with plane cuts, k-means and a CNN shape classifier")]
struct Cli {
    /// Worker threads (default: all cores). `--threads 1` gives reproducible timing logs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true, env = "POLYREFINE_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a test grid on the unit cube.
    GenGrid(GenGridArgs),
    /// Generate the labelled voxel dataset.
    GenDataset(GenDatasetArgs),
    /// Train the classifier on a dataset file.
    Train(TrainArgs),
    /// Label every element of a mesh with the classifier.
    Classify(ClassifyArgs),
    /// Refine a mesh uniformly or adaptively.
    Refine(RefineArgs),
    /// Quality and complexity reports of a mesh.
    Metrics(MetricsArgs),
    /// Run a figure pipeline end to end at desk scale.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenGridArgs {
    #[arg(long)]
    kind: GridKind,
    /// Boxes per axis (cubes, prisms, tetrahedra) or number of seeds (voronoi, cvt).
    #[arg(long)]
    resolution: usize,
    /// Lloyd iterations for cvt grids.
    #[arg(long, default_value_t = 50)]
    cvt_iterations: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DatasetScale {
    Desk,
    Full,
}

#[derive(Debug, Args, Serialize)]
struct GenDatasetArgs {
    #[arg(long, value_enum, default_value_t = DatasetScale::Desk)]
    scale: DatasetScale,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Dataset file written by `gen-dataset`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Disable symmetry augmentation of training images.
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ClassifyArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct RefineArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, default_value = "cnn")]
    strategy: Strategy,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Refine every element at each step (default).
    #[arg(long, conflicts_with = "adaptive")]
    uniform: bool,
    /// Refine the fraction `--r` of elements with the largest error indicator.
    #[arg(long)]
    adaptive: bool,
    #[arg(long, default_value_t = 0.4, requires = "adaptive")]
    r: f64,
    #[arg(long, default_value = "boundary_layer", requires = "adaptive")]
    field: Field,
    /// Trained model, needed by the cnn strategy.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Plane-snap tolerance relative to the element diameter.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 8)]
    nmax: usize,
    /// Target child size relative to the element diameter.
    #[arg(long, default_value_t = 0.5)]
    target_h: f64,
    /// Largest child diameter, relative to the element, accepted from a
    /// pattern picked by the classifier before falling back to k-means.
    #[arg(long, default_value_t = 0.7)]
    pattern_max_ratio: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct MetricsArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FigureArg {
    Fig7,
    Fig8,
    Fig9,
    Fig12,
}

impl From<FigureArg> for Figure {
    fn from(f: FigureArg) -> Self {
        match f {
            FigureArg::Fig7 => Figure::Fig7,
            FigureArg::Fig8 => Figure::Fig8,
            FigureArg::Fig9 => Figure::Fig9,
            FigureArg::Fig12 => Figure::Fig12,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct ReproduceArgs {
    #[arg(value_enum)]
    figure: FigureArg,
    /// Trained model; when absent a desk-scale model is trained first.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Format(String),
    #[error("{unrefinable:.2}% of refined elements could not be refined (budget {budget}%)")]
    Unrefinable { unrefinable: f64, budget: f64 },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Failed(_) => 1,
            CliError::Format(_) => 2,
            CliError::Unrefinable { .. } => 3,
        }
    }
}

fn input_error(path: &Path, e: IoError) -> CliError {
    if e.is_format() {
        CliError::Format(format!("{}: {e}", path.display()))
    } else {
        CliError::Failed(format!("{}: {e}", path.display()))
    }
}

fn model_error(path: &Path, e: CnnError) -> CliError {
    match e {
        CnnError::Format(_) => CliError::Format(format!("{}: {e}", path.display())),
        e => CliError::Failed(format!("{}: {e}", path.display())),
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Refine(RefineError::Config(m)) => CliError::Usage(m),
            PipelineError::Refine(RefineError::MissingModel) => CliError::Usage(e.to_string()),
            e => CliError::Failed(e.to_string()),
        }
    }
}

impl From<RefineError> for CliError {
    fn from(e: RefineError) -> Self {
        PipelineError::from(e).into()
    }
}

fn load_mesh(path: &Path) -> Result<polyrefine::mesh::Mesh, CliError> {
    io::load_mesh(path).map_err(|e| input_error(path, e))
}

fn load(path: &Path) -> Result<CnnModel, CliError> {
    load_model(path).map_err(|e| model_error(path, e))
}

fn out_dir(path: &Path) -> Result<(), CliError> {
    Ok(create_dir(path)?)
}

#[derive(Serialize)]
struct Resolved<'a, A: Serialize, C: Serialize> {
    rng_seed: u64,
    threads: Option<usize>,
    args: &'a A,
    resolved: C,
}

fn record<A: Serialize, C: Serialize>(cli: &Cli, out: &Path, name: &str, args: &A, resolved: C) -> Result<(), CliError> {
    let r = Resolved {
        rng_seed: cli.seed,
        threads: cli.threads,
        args,
        resolved,
    };
    Ok(write_run_json(out, name, &r)?)
}

fn save_mesh_files(mesh: &polyrefine::mesh::Mesh, out: &Path) -> Result<(), CliError> {
    let json = out.join("mesh.json");
    io::save_mesh(mesh, &json).map_err(|e| CliError::Failed(format!("{}: {e}", json.display())))?;
    let vtk = out.join("mesh.vtk");
    let f = std::fs::File::create(&vtk).map_err(|e| CliError::Failed(format!("{}: {e}", vtk.display())))?;
    io::write_vtk(mesh, f).map_err(|e| CliError::Failed(format!("{}: {e}", vtk.display())))
}

fn create_file(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::create(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn gen_grid(cli: &Cli, a: &GenGridArgs) -> Result<(), CliError> {
    let spec = GridSpec {
        cvt_iterations: a.cvt_iterations,
        ..GridSpec::new(a.kind, a.resolution, cli.seed)
    };
    let mesh = generate(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    out_dir(&a.out)?;
    save_mesh_files(&mesh, &a.out)?;
    record(cli, &a.out, "gen-grid", a, spec)
}

fn gen_dataset(cli: &Cli, a: &GenDatasetArgs) -> Result<(), CliError> {
    let cfg = match a.scale {
        DatasetScale::Desk => DatasetConfig::desk(cli.seed),
        DatasetScale::Full => DatasetConfig::full(cli.seed),
    };
    let ds = dataset::generate(&cfg).map_err(|e| CliError::Failed(e.to_string()))?;
    out_dir(&a.out)?;
    let path = a.out.join("dataset.bin");
    save_dataset(&ds, &path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    record(cli, &a.out, "gen-dataset", a, cfg)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<(), CliError> {
    let ds = load_dataset(&a.dataset).map_err(|e| match e {
        DatasetError::Format(_) | DatasetError::Json(_) => CliError::Format(format!("{}: {e}", a.dataset.display())),
        e => CliError::Failed(format!("{}: {e}", a.dataset.display())),
    })?;
    let base = desk_train_config(cli.seed);
    let cfg = TrainConfig {
        learning_rate: a.learning_rate.unwrap_or(base.learning_rate),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        max_epochs: a.max_epochs.unwrap_or(base.max_epochs),
        patience: a.patience.unwrap_or(base.patience),
        augment: base.augment && !a.no_augment,
        ..base
    };
    let model = CnnModel::new(polyrefine::cnn::Arch::standard(), cli.seed).map_err(|e| CliError::Failed(e.to_string()))?;
    let (model, history) = polyrefine::cnn::train(model, &ds.examples(Split::Train), &ds.examples(Split::Validation), &cfg)
        .map_err(|e| match e {
            CnnError::Config(m) => CliError::Usage(m),
            e => CliError::Failed(e.to_string()),
        })?;
    let ev = polyrefine::cnn::evaluate(&model, &ds.examples(Split::Test));
    log::info!("test accuracy {:.4}", ev.accuracy);
    out_dir(&a.out)?;
    let path = a.out.join("model.prcnn");
    save_model(&model, &path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    io::write_history(&history, create_file(&a.out.join("history.csv"))?).map_err(|e| CliError::Failed(e.to_string()))?;
    pipeline::write_confusion_csv(&ev, create_file(&a.out.join("confusion.csv"))?)?;
    record(cli, &a.out, "train", a, cfg)
}

fn classify(cli: &Cli, a: &ClassifyArgs) -> Result<(), CliError> {
    let mesh = load_mesh(&a.mesh)?;
    let model = load(&a.model)?;
    let rows = pipeline::classify_mesh(&mesh, &model)?;
    out_dir(&a.out)?;
    io::write_labels(&rows, create_file(&a.out.join("labels.csv"))?).map_err(|e| CliError::Failed(e.to_string()))?;
    record(cli, &a.out, "classify", a, ())
}

fn refine(cli: &Cli, a: &RefineArgs) -> Result<(), CliError> {
    let mode = if a.adaptive {
        if !(a.r > 0.0 && a.r <= 1.0) {
            return Err(CliError::Usage(format!("--r must be in (0, 1], got {}", a.r)));
        }
        Mode::Adaptive { r: a.r, field: a.field }
    } else {
        Mode::Uniform
    };
    let cfg = RefineConfig {
        tol: a.tol,
        nmax: a.nmax,
        target_h: a.target_h,
        pattern_max_ratio: a.pattern_max_ratio,
        rng_seed: cli.seed,
        ..RefineConfig::with_strategy(a.strategy)
    };
    cfg.validate()?;
    let model = a.model.as_deref().map(load).transpose()?;
    let refiner = Refiner::new(cfg, model.as_ref())?;
    let mut mesh = load_mesh(&a.mesh)?;
    let reports = refine_mesh(&mut mesh, &refiner, mode, a.steps)?;
    for r in &reports {
        log::info!("step {}: refined {} of {} elements, {} now", r.step, r.marked - r.unrefinable, r.elements_before, r.stats.n_elements);
    }
    out_dir(&a.out)?;
    save_mesh_files(&mesh, &a.out)?;
    pipeline::write_refine_outputs(&a.out, &reports)?;
    #[derive(Serialize)]
    struct Resolved {
        refine: RefineConfig,
        mode: Mode,
    }
    record(cli, &a.out, "refine", a, Resolved { refine: cfg, mode })?;
    let worst = unrefinable_fraction(&reports);
    if worst > UNREFINABLE_BUDGET {
        return Err(CliError::Unrefinable {
            unrefinable: 100.0 * worst,
            budget: 100.0 * UNREFINABLE_BUDGET,
        });
    }
    Ok(())
}

fn metrics(cli: &Cli, a: &MetricsArgs) -> Result<(), CliError> {
    let mesh = load_mesh(&a.mesh)?;
    out_dir(&a.out)?;
    pipeline::write_quality_outputs(&a.out, "", &mesh)?;
    let stats = mesh.complexity_stats(&Default::default());
    polyrefine::metrics::write_complexity_csv(&[("mesh".to_string(), stats)], create_file(&a.out.join("complexity.csv"))?)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    record(cli, &a.out, "metrics", a, ())
}

fn reproduce(cli: &Cli, a: &ReproduceArgs) -> Result<(), CliError> {
    out_dir(&a.out)?;
    let model = match &a.model {
        Some(p) => load(p)?,
        None => {
            log::info!("training the desk-scale model");
            let t = pipeline::train_model(&DatasetConfig::desk(cli.seed), &desk_train_config(cli.seed))?;
            log::info!("test accuracy {:.4}", t.evaluation.accuracy);
            let path = a.out.join("model.prcnn");
            save_model(&t.model, &path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
            io::write_history(&t.history, create_file(&a.out.join("history.csv"))?)
                .map_err(|e| CliError::Failed(e.to_string()))?;
            pipeline::write_confusion_csv(&t.evaluation, create_file(&a.out.join("confusion.csv"))?)?;
            t.model
        }
    };
    let scale = Scale::desk();
    Reproduction {
        scale,
        rng_seed: cli.seed,
        model: &model,
        out: &a.out,
    }
    .run(a.figure.into())?;
    record(cli, &a.out, "reproduce", a, scale)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(e.to_string()))?;
    }
    match &cli.command {
        Command::GenGrid(a) => gen_grid(cli, a),
        Command::GenDataset(a) => gen_dataset(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Classify(a) => classify(cli, a),
        Command::Refine(a) => refine(cli, a),
        Command::Metrics(a) => metrics(cli, a),
        Command::Reproduce(a) => reproduce(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
