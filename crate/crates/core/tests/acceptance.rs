//! Acceptance suite. Each criterion prints one PASS/FAIL line with the
//! measured values; the run fails if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polyrefine::clustering::{kmeans_details, KMeansConfig, KMeansInit};
use polyrefine::cnn::{save_model, Arch, CnnModel, Label, TrainConfig};
use polyrefine::dataset::{self, DatasetConfig};
use polyrefine::geometry::shapes::{box_solid, pitted_cube};
use polyrefine::geometry::{clip_by_plane, convex_polyhedron, CuttingPlane, Point3, Polyhedron};
use polyrefine::grid_gen::{generate, GridKind, GridSpec};
use polyrefine::io::write_history;
use polyrefine::mesh::{ComplexityStats, Mesh};
use polyrefine::metrics::{is_axis_aligned_box, quality_report, slab_density};
use polyrefine::pipeline::{classify_mesh, desk_train_config, train_model, Figure, Reproduction, Scale, TrainedModel};
use polyrefine::refine::{
    adaptive_refine, marked_count, uniform_refine, validity_check, Field, RefineConfig, RefineError, Refiner, Shape,
    Strategy,
};

/// Seed shared by every randomised step of the suite.
const SEED: u64 = 42;

// Tolerances and budgets.
const VOLUME_RTOL: f64 = 1e-6;
const UNIFORM_BUDGET: Duration = Duration::from_secs(10 * 60);
const BOX_TOL: f64 = 1e-9;
const HALF_DIAMETER_TOL: f64 = 1e-9;
const KMEANS_MAX_ANGLE_DEG: f64 = 5.0;
const KMEANS_MAX_ORIGIN_OFFSET: f64 = 0.05;
const GRADIENT_STEP: f64 = 1e-4;
const GRADIENT_RTOL: f64 = 1e-4;
const MIN_TEST_ACCURACY: f64 = 0.85;
const TRAIN_BUDGET: Duration = Duration::from_secs(20 * 60);
const MIN_CVT_SHAPE_SHARE: f64 = 0.5;
const QUALITY_SLACK: f64 = 0.02;
const MIN_DENSITY_RATIO: f64 = 2.0;
const VALIDITY_SAMPLES: usize = 1000;
const MAX_UNREFINABLE_SHARE: f64 = 0.01;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Trained {
    inner: TrainedModel,
    elapsed: Duration,
}

fn train_desk_model() -> Trained {
    let t = Instant::now();
    let inner = train_model(&DatasetConfig::desk(SEED), &desk_train_config(SEED)).expect("training runs");
    Trained {
        inner,
        elapsed: t.elapsed(),
    }
}

/// Grid sizes used by the uniform-refinement criteria.
fn acceptance_scale() -> Scale {
    Scale::desk()
}

/// Results of 3 uniform steps for one (grid, strategy) pair.
struct UniformRun {
    volume_error: f64,
    max_children: usize,
    unrefinable: usize,
    stats: ComplexityStats,
    mean_uf: Option<f64>,
    mean_cr: Option<f64>,
}

struct UniformRuns {
    runs: BTreeMap<(GridKind, String), UniformRun>,
    elapsed: Duration,
}

fn uniform_runs(model: &CnnModel) -> UniformRuns {
    let scale = acceptance_scale();
    let mut runs = BTreeMap::new();
    let mut elapsed = Duration::ZERO;
    for kind in GridKind::ALL {
        let base = generate(&scale.grid(kind, SEED)).expect("grid");
        let v0 = base.total_volume();
        for strategy in Strategy::ALL {
            let mut mesh = base.clone();
            let cfg = RefineConfig {
                rng_seed: SEED,
                ..RefineConfig::with_strategy(strategy)
            };
            let refiner = Refiner::new(cfg, Some(model)).expect("refiner");
            let t = Instant::now();
            let reports = uniform_refine(&mut mesh, &refiner, scale.steps).expect("uniform refinement");
            elapsed += t.elapsed();
            let quality = (kind == GridKind::Voronoi).then(|| quality_report(&mesh).expect("quality"));
            let run = UniformRun {
                volume_error: (mesh.total_volume() - v0).abs() / v0,
                max_children: reports.iter().flat_map(|r| &r.log).map(|l| l.children).max().unwrap_or(0),
                unrefinable: reports.iter().map(|r| r.unrefinable).sum(),
                stats: reports.last().expect("steps").stats,
                mean_uf: quality.as_ref().map(|q| q.mean_uf()),
                mean_cr: quality.as_ref().map(|q| q.mean_cr()),
            };
            println!(
                "    {:>10} {:>16}: {:>6} elements, volume error {:.1e}, {} unrefinable",
                kind.name(),
                strategy.name(),
                run.stats.n_elements,
                run.volume_error,
                run.unrefinable
            );
            runs.insert((kind, strategy.name()), run);
        }
    }
    UniformRuns { runs, elapsed }
}

fn criterion_1(u: &UniformRuns) -> Outcome {
    let worst = u.runs.values().map(|r| r.volume_error).fold(0.0, f64::max);
    check(
        worst <= VOLUME_RTOL && u.elapsed < UNIFORM_BUDGET,
        format!(
            "{} runs, worst relative volume error {worst:.2e} (<= {VOLUME_RTOL:.0e}), refinement time {:.0} s (< {} s)",
            u.runs.len(),
            u.elapsed.as_secs_f64(),
            UNIFORM_BUDGET.as_secs()
        ),
    )
}

fn refine_once(mesh: &Mesh, strategy: Strategy, model: &CnnModel) -> Mesh {
    let mut m = mesh.clone();
    let cfg = RefineConfig {
        rng_seed: SEED,
        ..RefineConfig::with_strategy(strategy)
    };
    uniform_refine(&mut m, &Refiner::new(cfg, Some(model)).unwrap(), 1).unwrap();
    m
}

fn criterion_2(model: &CnnModel) -> Outcome {
    let base = generate(&GridSpec::new(GridKind::Cubes, 4, SEED)).unwrap();
    let cnn = refine_once(&base, Strategy::Cnn, model);
    let classical = refine_once(&base, Strategy::Classical(Shape::Cube), model);
    let boxes = cnn.elements().filter(|p| is_axis_aligned_box(p, BOX_TOL)).count();
    let identical = cnn.len() == classical.len()
        && cnn
            .elements()
            .zip(classical.elements())
            .all(|(a, b)| a.vertices() == b.vertices() && a.faces() == b.faces());
    check(
        cnn.len() == 512 && boxes == 512 && identical,
        format!(
            "{} elements, {boxes} axis-aligned boxes (tol {BOX_TOL:.0e}), identical to classical:cube: {identical}",
            cnn.len()
        ),
    )
}

fn criterion_3(u: &UniformRuns, model: &CnnModel) -> Outcome {
    let max_children = u.runs.values().map(|r| r.max_children).max().unwrap_or(0);
    let base = generate(&GridSpec::new(GridKind::Cubes, 4, SEED)).unwrap();
    let refined = refine_once(&base, Strategy::Classical(Shape::Cube), model);
    let worst = refined
        .elements()
        .map(|c| {
            let parent = base.get(refined.parent_of(c.id()).expect("parent")).expect("parent element");
            (c.diam() - parent.diam() / 2.0).abs()
        })
        .fold(0.0, f64::max);
    check(
        max_children <= 8 && worst <= HALF_DIAMETER_TOL,
        format!("largest child count {max_children} (<= 8); classical:cube worst |diam - parent/2| {worst:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    let b = box_solid(Point3::zeros(), Point3::new(2.0, 1.0, 1.0));
    let center = Point3::new(1.0, 0.5, 0.5);
    let mut worst_angle = 0.0f64;
    let mut worst_offset = 0.0f64;
    let mut monotone = true;
    for run in 0..20 {
        let cfg = KMeansConfig {
            n_grid_points: 20 * 20 * 20,
            rng_seed: SEED + run,
            init: KMeansInit::Random,
            ..KMeansConfig::default()
        };
        let (plane, res) = kmeans_details(&b, &cfg).unwrap();
        let angle = plane.normal().x.abs().min(1.0).acos().to_degrees();
        worst_angle = worst_angle.max(angle);
        worst_offset = worst_offset.max((plane.origin() - center).norm());
        monotone &= res.objective.windows(2).all(|w| w[1] <= w[0]);
    }
    check(
        worst_angle <= KMEANS_MAX_ANGLE_DEG && worst_offset <= KMEANS_MAX_ORIGIN_OFFSET && monotone,
        format!(
            "20 random initialisations: worst normal angle {worst_angle:.3} deg (<= {KMEANS_MAX_ANGLE_DEG}), worst origin offset {worst_offset:.4} (<= {KMEANS_MAX_ORIGIN_OFFSET}), objective monotone: {monotone}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let arch = Arch {
        input: 4,
        channels: 2,
        kernels: vec![3, 2],
        classes: 4,
    };
    let model = CnnModel::new(arch, SEED).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let input: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let label = 2;
    let (_, grad) = model.loss_and_gradient(&input, label).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let i = rng.gen_range(0..model.params().len());
        let loss_at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut()[i] += delta;
            m.loss_and_gradient(&input, label).unwrap().0
        };
        let fd = (loss_at(GRADIENT_STEP) - loss_at(-GRADIENT_STEP)) / (2.0 * GRADIENT_STEP);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    check(
        worst < GRADIENT_RTOL,
        format!(
            "{} parameters, 100 probes, worst relative error {worst:.2e} (< {GRADIENT_RTOL:.0e})",
            model.params().len()
        ),
    )
}

fn criterion_6(t: &Trained) -> Outcome {
    let ev = &t.inner.evaluation;
    let diag: Vec<f64> = (0..4).map(|i| ev.matrix[i][i]).collect();
    let other = Label::Other.index();
    let other_lowest = (0..4).filter(|&i| i != other).all(|i| diag[other] < diag[i]);
    check(
        ev.accuracy >= MIN_TEST_ACCURACY && other_lowest && t.elapsed < TRAIN_BUDGET,
        format!(
            "test accuracy {:.4} (>= {MIN_TEST_ACCURACY}), diagonal [tet {:.3}, prism {:.3}, cube {:.3}, other {:.3}], other lowest: {other_lowest}, {} epochs in {:.0} s (< {} s)",
            ev.accuracy,
            diag[0],
            diag[1],
            diag[2],
            diag[3],
            t.inner.history.len(),
            t.elapsed.as_secs_f64(),
            TRAIN_BUDGET.as_secs()
        ),
    )
}

fn criterion_7(model: &CnnModel) -> Outcome {
    let spec = GridSpec {
        cvt_iterations: 500,
        ..GridSpec::new(GridKind::Cvt, 64, SEED + 1)
    };
    let cvt = generate(&spec).unwrap();
    let labels = classify_mesh(&cvt, model).unwrap();
    let mut counts = [0usize; 4];
    for l in &labels {
        counts[l.label.index()] += 1;
    }
    let share = 1.0 - counts[Label::Other.index()] as f64 / labels.len() as f64;
    check(
        share >= MIN_CVT_SHAPE_SHARE,
        format!(
            "{} CVT cells: tet {}, prism {}, cube {}, other {}; shape-class share {share:.3} (>= {MIN_CVT_SHAPE_SHARE})",
            labels.len(),
            counts[0],
            counts[1],
            counts[2],
            counts[3]
        ),
    )
}

fn criterion_8(u: &UniformRuns) -> Outcome {
    let get = |s: Strategy| &u.runs[&(GridKind::Voronoi, s.name())];
    let (d, k, c) = (get(Strategy::Diameter), get(Strategy::KMeans), get(Strategy::Cnn));
    let (cr_d, cr_k) = (d.mean_cr.unwrap(), k.mean_cr.unwrap());
    let (uf_d, uf_c) = (d.mean_uf.unwrap(), c.mean_uf.unwrap());
    check(
        cr_k >= cr_d - QUALITY_SLACK && uf_c >= uf_d - QUALITY_SLACK,
        format!(
            "Voronoi after 3 steps: mean CR kmeans {cr_k:.4} vs diameter {cr_d:.4}; mean UF cnn {uf_c:.4} vs diameter {uf_d:.4} (slack {QUALITY_SLACK})"
        ),
    )
}

fn criterion_9(u: &UniformRuns) -> Outcome {
    let get = |s: Strategy| u.runs[&(GridKind::Cubes, s.name())].stats;
    let (c, d) = (get(Strategy::Cnn), get(Strategy::Diameter));
    check(
        c.n_vertices <= d.n_vertices && c.n_edges <= d.n_edges && c.n_faces <= d.n_faces,
        format!(
            "cube grid after 3 steps: cnn (V {}, E {}, F {}) vs diameter (V {}, E {}, F {})",
            c.n_vertices, c.n_edges, c.n_faces, d.n_vertices, d.n_edges, d.n_faces
        ),
    )
}

fn criterion_10(model: &CnnModel) -> Outcome {
    let mut mesh = generate(&GridSpec::new(GridKind::Cubes, 4, SEED)).unwrap();
    let cfg = RefineConfig {
        rng_seed: SEED,
        ..RefineConfig::with_strategy(Strategy::Cnn)
    };
    let refiner = Refiner::new(cfg, Some(model)).unwrap();
    let reports = adaptive_refine(&mut mesh, &refiner, Field::BoundaryLayer, 0.4, 3).unwrap();
    let exact = reports.iter().all(|r| r.marked == marked_count(0.4, r.elements_before));
    let marked: Vec<String> = reports.iter().map(|r| format!("{}/{}", r.marked, r.elements_before)).collect();
    let near = slab_density(&mesh, 0.0, 0.25);
    let far = slab_density(&mesh, 0.75, 1.0);
    let ratio = near / far;
    check(
        ratio >= MIN_DENSITY_RATIO && exact,
        format!(
            "marked per step [{}] = ceil(0.4 N): {exact}; density x<0.25 {near:.0}, x>0.75 {far:.0}, ratio {ratio:.2} (>= {MIN_DENSITY_RATIO})",
            marked.join(", ")
        ),
    )
}

fn random_convex(rng: &mut ChaCha8Rng) -> Polyhedron {
    loop {
        let n = rng.gen_range(6..24);
        let stretch = Point3::new(rng.gen_range(0.3..3.0), rng.gen_range(0.3..3.0), rng.gen_range(0.3..3.0));
        let pts: Vec<Point3> = (0..n)
            .map(|_| {
                let q = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                q.component_mul(&stretch)
            })
            .collect();
        let Ok(p) = convex_polyhedron(&pts) else { continue };
        let tol = 1e-3 * p.diam();
        // Inputs must themselves be free of features below the checked size.
        if p.volume().map_or(false, |v| v > 1e-3 * p.diam().powi(3)) && shortest_edge(&p) >= 0.1 * tol {
            return p;
        }
    }
}

fn shortest_edge(p: &Polyhedron) -> f64 {
    p.edges()
        .iter()
        .map(|&(a, b)| (p.vertices()[a] - p.vertices()[b]).norm())
        .fold(f64::INFINITY, f64::min)
}

fn criterion_11(model: &CnnModel) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut failures = Vec::new();
    let mut unrefinable = Vec::new();
    let mut per_strategy = BTreeMap::<String, usize>::new();
    for i in 0..VALIDITY_SAMPLES {
        let p = random_convex(&mut rng);
        let strategy = Strategy::ALL[rng.gen_range(0..Strategy::ALL.len())];
        *per_strategy.entry(strategy.name()).or_default() += 1;
        let cfg = RefineConfig {
            rng_seed: rng.gen(),
            ..RefineConfig::with_strategy(strategy)
        };
        let tol = cfg.tol * p.diam();
        match Refiner::new(cfg, Some(model)).unwrap().refine_element(&p) {
            Ok(r) => {
                let bad = r
                    .children
                    .iter()
                    .find(|c| c.check_invariants().is_err() || shortest_edge(c) < 0.1 * tol);
                if bad.is_some() || r.children.len() < 2 {
                    failures.push(format!("sample {i} ({})", strategy.name()));
                }
            }
            // Refusing an element yields no children; refusals are held to
            // the same budget the command line enforces.
            Err(RefineError::Unrefinable { .. }) => unrefinable.push(i),
            Err(e) => failures.push(format!("sample {i} ({}): {e}", strategy.name())),
        }
    }
    // The pitted cube cut just below the pit rim leaves a ring-shaped piece.
    let p = pitted_cube();
    let plane = CuttingPlane::new(Point3::new(0.5, 0.5, 0.9), Point3::z()).unwrap();
    let res = clip_by_plane(&p, &plane).unwrap();
    let pieces: Vec<Polyhedron> = res.negative.into_iter().chain(res.positive).collect();
    let hole_found = pieces.iter().any(|c| c.check_invariants().is_err());
    let hole_rejected = !validity_check(&p, &pieces, 1e-3 * p.diam());
    let counts: Vec<String> = per_strategy.iter().map(|(k, v)| format!("{k} {v}")).collect();
    let refused = unrefinable.len() as f64 / VALIDITY_SAMPLES as f64;
    check(
        failures.is_empty() && refused <= MAX_UNREFINABLE_SHARE && hole_found && hole_rejected,
        format!(
            "{VALIDITY_SAMPLES} random polyhedra ({}), {} with invalid children{}, unrefinable {:?} ({:.1}% <= {}%); ring piece detected: {hole_found}, cut rejected: {hole_rejected}",
            counts.join(", "),
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            unrefinable,
            100.0 * refused,
            100.0 * MAX_UNREFINABLE_SHARE
        ),
    )
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                let compared = [".csv", ".json", ".vtk", ".bin", ".prcnn"].iter().any(|x| name.ends_with(x));
                if compared && !name.ends_with(".timing.csv") {
                    out.insert(name, fs::read(&path).unwrap());
                }
            }
        }
    }
    out
}

fn compare(a: &Path, b: &Path, what: &str, differing: &mut Vec<String>) -> usize {
    let (fa, fb) = (artifacts(a), artifacts(b));
    if fa.keys().ne(fb.keys()) {
        differing.push(format!("{what}: file sets differ"));
    }
    for (name, bytes) in &fa {
        if fb.get(name) != Some(bytes) {
            differing.push(format!("{what}/{name}"));
        }
    }
    fa.len()
}

fn run_cli(args: &[&str], dir: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_polyrefine"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .status()
        .expect("binary runs");
    assert!(status.success(), "polyrefine {args:?} failed with {status}");
}

fn criterion_12(model: &CnnModel) -> Outcome {
    let scale = Scale {
        cube_resolution: 2,
        prism_resolution: 2,
        tet_resolution: 1,
        seeds: 12,
        steps: 2,
    };
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for root in &roots {
        let out = root.path();
        for fig in [Figure::Fig7, Figure::Fig8, Figure::Fig9, Figure::Fig12] {
            Reproduction {
                scale,
                rng_seed: SEED,
                model,
                out,
            }
            .run(fig)
            .unwrap();
        }
        // Dataset generation and a short training run.
        let small = DatasetConfig {
            counts: [20, 20, 20, 15],
            ..DatasetConfig::desk(SEED)
        };
        let ds = dataset::generate(&small).unwrap();
        fs::write(out.join("dataset.bin"), ds.to_bytes()).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            ..desk_train_config(SEED)
        };
        let trained = train_model(&small, &cfg).unwrap();
        write_history(&trained.history, fs::File::create(out.join("history.csv")).unwrap()).unwrap();
        // Command-line pipeline, including the cnn strategy with a saved model.
        save_model(model, &out.join("model.prcnn")).unwrap();
        run_cli(&["--seed", "7", "gen-grid", "--kind", "voronoi", "--resolution", "10", "--out", "grid"], out);
        run_cli(
            &["--seed", "7", "refine", "--mesh", "grid/mesh.json", "--strategy", "cnn", "--model", "model.prcnn", "--steps", "2", "--out", "uniform"],
            out,
        );
        run_cli(
            &["--seed", "7", "refine", "--mesh", "grid/mesh.json", "--strategy", "kmeans", "--adaptive", "--r", "0.4", "--steps", "2", "--out", "adaptive"],
            out,
        );
        run_cli(&["metrics", "--mesh", "uniform/mesh.json", "--out", "metrics"], out);
        run_cli(&["classify", "--mesh", "grid/mesh.json", "--model", "model.prcnn", "--out", "labels"], out);
    }
    let mut differing = Vec::new();
    let n = compare(roots[0].path(), roots[1].path(), "run", &mut differing);
    check(
        differing.is_empty() && n > 0,
        format!("{n} artifacts (CSV, JSON, VTK, dataset, model) compared across two runs, {} differ {:?}", differing.len(), differing),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {tag} {name}: {detail} [{:.1} s]", t.elapsed().as_secs_f64());
        results.push((n, name, outcome));
    };

    let trained = train_desk_model();
    let model = &trained.inner.model;
    let uniform = uniform_runs(model);

    run(1, "volume conservation", &mut || criterion_1(&uniform));
    run(2, "structure preservation", &mut || criterion_2(model));
    run(3, "child-count and size contracts", &mut || criterion_3(&uniform, model));
    run(4, "k-means correctness", &mut criterion_4);
    run(5, "CNN gradient check", &mut criterion_5);
    run(6, "CNN classification", &mut || criterion_6(&trained));
    run(7, "generalization to CVT", &mut || criterion_7(model));
    run(8, "strategy-quality ordering", &mut || criterion_8(&uniform));
    run(9, "complexity ordering", &mut || criterion_9(&uniform));
    run(10, "adaptive concentration", &mut || criterion_10(model));
    run(11, "validity suite", &mut || criterion_11(model));
    run(12, "determinism", &mut || criterion_12(model));

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
