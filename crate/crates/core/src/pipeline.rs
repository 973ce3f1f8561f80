//! End-to-end experiment drivers shared by the command line and the tests:
//! refinement runs with their logs, and the desk-scale figure pipelines.
//!
//! Every pipeline writes CSV files that depend only on the configuration and
//! seed. Wall-clock measurements go to separate `*.timing.csv` files.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::cnn::{evaluate, train, Arch, CnnError, CnnModel, EpochRecord, Evaluation, Label, TrainConfig};
use crate::dataset::{generate as generate_dataset, DatasetConfig, DatasetError, Split};
use crate::grid_gen::{generate as generate_grid, GridError, GridKind, GridSpec};
use crate::io::{self, Classification, IoError};
use crate::mesh::{ComplexityStats, Mesh};
use crate::metrics::{self, is_axis_aligned_box, quality_report, slab_density, MetricsError};
use crate::refine::{adaptive_refine, uniform_refine, Field, LogRecord, RefineConfig, RefineError, Refiner, StepReport, Strategy};
use crate::voxel::{voxelize, VoxelError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
}

fn create(path: &Path) -> Result<File, PipelineError> {
    File::create(path).map_err(|source| PipelineError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|source| PipelineError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// How elements are marked at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Mode {
    Uniform,
    Adaptive { r: f64, field: Field },
}

/// Runs `steps` refinement steps in the given mode.
pub fn refine_mesh(mesh: &mut Mesh, refiner: &Refiner<'_>, mode: Mode, steps: usize) -> Result<Vec<StepReport>, RefineError> {
    match mode {
        Mode::Uniform => uniform_refine(mesh, refiner, steps),
        Mode::Adaptive { r, field } => adaptive_refine(mesh, refiner, field, r, steps),
    }
}

/// Share of refined elements that could not be refined in the worst step.
pub fn unrefinable_fraction(reports: &[StepReport]) -> f64 {
    reports
        .iter()
        .filter(|r| r.marked > 0)
        .map(|r| r.unrefinable as f64 / r.marked as f64)
        .fold(0.0, f64::max)
}

fn all_log(reports: &[StepReport]) -> Vec<LogRecord> {
    reports.iter().flat_map(|r| r.log.iter().cloned()).collect()
}

fn step_rows(prefix: &str, reports: &[StepReport]) -> Vec<(String, ComplexityStats)> {
    reports.iter().map(|r| (format!("{prefix}step{}", r.step), r.stats)).collect()
}

/// Writes `refine_log.csv`, `complexity.csv` and their timing companions to
/// `dir`.
pub fn write_refine_outputs(dir: &Path, reports: &[StepReport]) -> Result<(), PipelineError> {
    let log = all_log(reports);
    io::write_refine_log(&log, create(&dir.join("refine_log.csv"))?)?;
    io::write_refine_timing(&log, create(&dir.join("refine_log.timing.csv"))?)?;
    let rows = step_rows("", reports);
    metrics::write_complexity_csv(&rows, create(&dir.join("complexity.csv"))?)?;
    metrics::write_timing_csv(&rows, create(&dir.join("complexity.timing.csv"))?)?;
    Ok(())
}

/// Writes `quality.csv` and `quality_hist.csv` for `mesh` into `dir`.
pub fn write_quality_outputs(dir: &Path, prefix: &str, mesh: &Mesh) -> Result<metrics::QualityReport, PipelineError> {
    let report = quality_report(mesh)?;
    report.write_quality_csv(create(&dir.join(format!("{prefix}quality.csv")))?)?;
    report.write_histogram_csv(create(&dir.join(format!("{prefix}quality_hist.csv")))?)?;
    Ok(report)
}

/// Predicted label and class probabilities of every element.
pub fn classify_mesh(mesh: &Mesh, model: &CnnModel) -> Result<Vec<Classification>, PipelineError> {
    mesh.elements()
        .map(|p| {
            let img = voxelize(p)?;
            let probs = model.probabilities(&img);
            Ok(Classification {
                element_id: p.id(),
                label: Label::from_index(crate::cnn::argmax(&probs)).expect("four classes"),
                p_tetrahedron: probs[0],
                p_prism: probs[1],
                p_cube: probs[2],
                p_other: probs[3],
            })
        })
        .collect()
}

/// Training settings used for the desk-scale model.
pub fn desk_train_config(rng_seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 32,
        max_epochs: 150,
        patience: 10,
        rng_seed,
        augment: true,
        ..TrainConfig::default()
    }
}

pub struct TrainedModel {
    pub model: CnnModel,
    pub history: Vec<EpochRecord>,
    pub evaluation: Evaluation,
}

/// Generates a dataset, trains the standard network on it and evaluates it
/// on the held-out test split.
pub fn train_model(data: &DatasetConfig, cfg: &TrainConfig) -> Result<TrainedModel, PipelineError> {
    let ds = generate_dataset(data)?;
    let model = CnnModel::new(Arch::standard(), cfg.rng_seed)?;
    let (model, history) = train(model, &ds.examples(Split::Train), &ds.examples(Split::Validation), cfg)?;
    let evaluation = evaluate(&model, &ds.examples(Split::Test));
    Ok(TrainedModel {
        model,
        history,
        evaluation,
    })
}

/// Writes the row-normalised confusion matrix, one row per true class.
pub fn write_confusion_csv(ev: &Evaluation, out: impl Write) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["true".to_string()];
    header.extend((0..4).map(|j| Label::from_index(j).expect("label").name().to_string()));
    w.write_record(&header).map_err(IoError::from)?;
    for (i, row) in ev.matrix.iter().enumerate() {
        let mut rec = vec![Label::from_index(i).expect("label").name().to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(IoError::from)?;
    }
    w.flush().map_err(IoError::from)?;
    Ok(())
}

/// Grid sizes and step count of the figure pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scale {
    pub cube_resolution: usize,
    pub prism_resolution: usize,
    pub tet_resolution: usize,
    pub seeds: usize,
    pub steps: usize,
}

impl Scale {
    pub fn desk() -> Self {
        Self {
            cube_resolution: 4,
            prism_resolution: 3,
            tet_resolution: 2,
            seeds: 64,
            steps: 3,
        }
    }

    pub fn grid(&self, kind: GridKind, rng_seed: u64) -> GridSpec {
        let res = match kind {
            GridKind::Cubes => self.cube_resolution,
            GridKind::Prisms => self.prism_resolution,
            GridKind::Tetrahedra => self.tet_resolution,
            GridKind::Voronoi | GridKind::Cvt => self.seeds,
        };
        GridSpec::new(kind, res, rng_seed)
    }
}

pub const FIGURE_STRATEGIES: [Strategy; 3] = [Strategy::Diameter, Strategy::KMeans, Strategy::Cnn];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Figure {
    Fig7,
    Fig8,
    Fig9,
    Fig12,
}

impl Figure {
    pub fn name(self) -> &'static str {
        match self {
            Figure::Fig7 => "fig7",
            Figure::Fig8 => "fig8",
            Figure::Fig9 => "fig9",
            Figure::Fig12 => "fig12",
        }
    }
}

pub struct Reproduction<'a> {
    pub scale: Scale,
    pub rng_seed: u64,
    pub model: &'a CnnModel,
    pub out: &'a Path,
}

impl Reproduction<'_> {
    fn refiner(&self, strategy: Strategy) -> Result<Refiner<'_>, RefineError> {
        let cfg = RefineConfig {
            rng_seed: self.rng_seed,
            ..RefineConfig::with_strategy(strategy)
        };
        Refiner::new(cfg, Some(self.model))
    }

    fn grid(&self, kind: GridKind) -> Result<Mesh, GridError> {
        generate_grid(&self.scale.grid(kind, self.rng_seed))
    }

    pub fn run(&self, fig: Figure) -> Result<(), PipelineError> {
        let dir = self.out.join(fig.name());
        create_dir(&dir)?;
        match fig {
            Figure::Fig7 => self.fig7(&dir),
            Figure::Fig8 => self.fig8(&dir),
            Figure::Fig9 => self.fig9(&dir),
            Figure::Fig12 => self.fig12(&dir),
        }?;
        fs::write(dir.join("plot.py"), plot_script(fig)).map_err(|source| PipelineError::File {
            path: dir.join("plot.py"),
            source,
        })
    }

    /// One step of each strategy on the cube, Voronoi and CVT grids; meshes
    /// are exported for viewing and the share of box-shaped children counted.
    fn fig7(&self, dir: &Path) -> Result<(), PipelineError> {
        #[derive(Serialize)]
        struct Row {
            grid: &'static str,
            strategy: String,
            n_elements: usize,
            boxes: usize,
            n_vertices: usize,
            n_faces: usize,
        }
        let mut rows = Vec::new();
        for kind in [GridKind::Cubes, GridKind::Voronoi, GridKind::Cvt] {
            let base = self.grid(kind)?;
            let labels = classify_mesh(&base, self.model)?;
            io::write_labels(&labels, create(&dir.join(format!("{kind}_labels.csv")))?)?;
            for strategy in FIGURE_STRATEGIES {
                let mut mesh = base.clone();
                let reports = uniform_refine(&mut mesh, &self.refiner(strategy)?, 1)?;
                let stem = format!("{kind}_{}", file_stem(strategy));
                io::write_vtk(&mesh, create(&dir.join(format!("{stem}.vtk")))?)?;
                let boxes = mesh.elements().filter(|p| is_axis_aligned_box(p, 1e-9)).count();
                let s = reports.last().map(|r| r.stats).unwrap_or_else(|| mesh.complexity_stats(&Default::default()));
                rows.push(Row {
                    grid: kind.name(),
                    strategy: strategy.name(),
                    n_elements: mesh.len(),
                    boxes,
                    n_vertices: s.n_vertices,
                    n_faces: s.n_faces,
                });
            }
        }
        write_rows(&rows, &dir.join("structure.csv"))
    }

    /// Quality histograms after `steps` uniform steps on the Voronoi and CVT
    /// grids.
    fn fig8(&self, dir: &Path) -> Result<(), PipelineError> {
        #[derive(Serialize)]
        struct Row {
            grid: &'static str,
            strategy: String,
            n_elements: usize,
            mean_uf: f64,
            mean_cr: f64,
        }
        let mut rows = Vec::new();
        for kind in [GridKind::Voronoi, GridKind::Cvt] {
            let base = self.grid(kind)?;
            for strategy in FIGURE_STRATEGIES {
                let mut mesh = base.clone();
                uniform_refine(&mut mesh, &self.refiner(strategy)?, self.scale.steps)?;
                let prefix = format!("{kind}_{}_", file_stem(strategy));
                let q = write_quality_outputs(dir, &prefix, &mesh)?;
                rows.push(Row {
                    grid: kind.name(),
                    strategy: strategy.name(),
                    n_elements: mesh.len(),
                    mean_uf: q.mean_uf(),
                    mean_cr: q.mean_cr(),
                });
            }
        }
        write_rows(&rows, &dir.join("summary.csv"))
    }

    /// Entity counts after each uniform step, all grids and strategies.
    fn fig9(&self, dir: &Path) -> Result<(), PipelineError> {
        let mut rows = Vec::new();
        for kind in GridKind::ALL {
            let base = self.grid(kind)?;
            for strategy in FIGURE_STRATEGIES {
                let mut mesh = base.clone();
                let reports = uniform_refine(&mut mesh, &self.refiner(strategy)?, self.scale.steps)?;
                rows.extend(step_rows(&format!("{kind}/{}/", strategy.name()), &reports));
            }
        }
        metrics::write_complexity_csv(&rows, create(&dir.join("complexity.csv"))?)?;
        metrics::write_timing_csv(&rows, create(&dir.join("complexity.timing.csv"))?)?;
        Ok(())
    }

    /// Adaptive refinement of the cube grid towards the boundary layer.
    fn fig12(&self, dir: &Path) -> Result<(), PipelineError> {
        #[derive(Serialize)]
        struct Row {
            strategy: String,
            step: usize,
            marked: usize,
            n_elements: usize,
            density_near: f64,
            density_far: f64,
        }
        let mode = Mode::Adaptive {
            r: 0.4,
            field: Field::BoundaryLayer,
        };
        let base = self.grid(GridKind::Cubes)?;
        let mut rows = Vec::new();
        for strategy in FIGURE_STRATEGIES {
            let mut mesh = base.clone();
            let refiner = self.refiner(strategy)?;
            // Step by step so that densities can be recorded in between.
            for step in 1..=self.scale.steps {
                let report = refine_mesh(&mut mesh, &refiner, mode, 1)?.remove(0);
                rows.push(Row {
                    strategy: strategy.name(),
                    step,
                    marked: report.marked,
                    n_elements: mesh.len(),
                    density_near: slab_density(&mesh, 0.0, 0.25),
                    density_far: slab_density(&mesh, 0.75, 1.0),
                });
            }
            io::write_vtk(&mesh, create(&dir.join(format!("cubes_{}.vtk", file_stem(strategy))))?)?;
        }
        write_rows(&rows, &dir.join("adaptive.csv"))
    }
}

fn file_stem(s: Strategy) -> String {
    s.name().replace(':', "_")
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(IoError::from)?;
    }
    w.flush().map_err(IoError::from)?;
    Ok(())
}

fn plot_script(fig: Figure) -> &'static str {
    match fig {
        Figure::Fig7 => include_str!("plots/fig7.py"),
        Figure::Fig8 => include_str!("plots/fig8.py"),
        Figure::Fig9 => include_str!("plots/fig9.py"),
        Figure::Fig12 => include_str!("plots/fig12.py"),
    }
}

/// Contents of `run.json`.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config: &'a C,
}

pub fn write_run_json<C: Serialize>(dir: &Path, command: &str, config: &C) -> Result<(), PipelineError> {
    let rec = RunRecord {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
    };
    let mut f = create(&dir.join("run.json"))?;
    serde_json::to_writer_pretty(&mut f, &rec)?;
    writeln!(f).map_err(|source| PipelineError::File {
        path: dir.join("run.json"),
        source,
    })?;
    Ok(())
}
