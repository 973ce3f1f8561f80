//! Labelled voxel images for training the shape classifier: perturbed
//! tetrahedra, prisms and cubes, plus Voronoi cells labelled "other".

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{Example, Label};
use crate::geometry::shapes::{regular_tetrahedron, unit_cube, unit_prism};
use crate::geometry::{convex_polyhedron, GeometryError, Point3, Polyhedron};
use crate::grid_gen::voronoi_cells;
use crate::voxel::{voxelize, BinaryImage, VOXELS};

/// Bumped whenever sampling changes in a way that alters generated images.
pub const GENERATOR_VERSION: u32 = 2;

/// Images with fewer occupied voxels are redrawn.
pub const MIN_OCCUPIED: usize = 32;

const RECORD_BYTES: usize = VOXELS + 2;

/// Voronoi cells taken from each random grid of the "other" class.
const CELLS_PER_GRID: usize = 8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("class {label} has {count} samples, at least 5 are needed to split")]
    TooFewSamples { label: Label, count: usize },
    #[error("class {0} has no reference shape")]
    NoReferenceShape(Label),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Validation = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    fn from_byte(b: u8) -> Option<Split> {
        Self::ALL.get(b as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: BinaryImage,
    pub label: Label,
}

/// Random deformation applied to a reference shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Per-axis stretch factor range.
    pub stretch: (f64, f64),
    /// Vertex jitter per coordinate, as a fraction of the diameter.
    pub jitter: f64,
    pub reflect_probability: f64,
    pub rotate: bool,
    /// Chance that a rotated sample keeps the shape axis-aligned, using one
    /// of the 24 rotations of the cube instead of a uniform rotation.
    /// Structured grids consist of axis-aligned elements, which a uniform
    /// rotation essentially never produces.
    #[serde(default)]
    pub aligned_probability: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            stretch: (0.6, 1.6),
            jitter: 0.05,
            reflect_probability: 0.5,
            rotate: true,
            aligned_probability: 0.25,
        }
    }
}

impl Perturbation {
    pub fn none() -> Self {
        Self {
            stretch: (1.0, 1.0),
            jitter: 0.0,
            reflect_probability: 0.0,
            rotate: false,
            aligned_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Sample count per label, in [`Label::ALL`] order.
    pub counts: [usize; 4],
    pub rng_seed: u64,
    pub perturbation: Perturbation,
}

impl DatasetConfig {
    /// 2250 images: 600 per shape class and 450 "other".
    pub fn desk(rng_seed: u64) -> Self {
        Self {
            counts: [600, 600, 600, 450],
            rng_seed,
            perturbation: Perturbation::default(),
        }
    }

    /// 22500 images: 6000 per shape class and 4500 "other".
    pub fn full(rng_seed: u64) -> Self {
        Self {
            counts: [6000, 6000, 6000, 4500],
            ..Self::desk(rng_seed)
        }
    }
}

/// Stream `index` of a generator keyed by `rng_seed` and `tag`.
fn stream_rng(rng_seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream((tag << 48) ^ index);
    rng
}

/// Regular base polyhedron for a shape class.
pub fn reference_shape(label: Label) -> Result<Polyhedron, DatasetError> {
    match label {
        Label::Tetrahedron => Ok(regular_tetrahedron(1.0)),
        Label::Prism => Ok(unit_prism()),
        Label::Cube => Ok(unit_cube()),
        Label::Other => Err(DatasetError::NoReferenceShape(label)),
    }
}

/// Uniformly distributed rotation from three uniform variates.
fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    UnitQuaternion::from_quaternion(Quaternion::new(
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    ))
}

/// The 24 proper rotations mapping the coordinate axes onto themselves.
fn axis_rotations() -> Vec<UnitQuaternion<f64>> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for perm in PERMS {
        for signs in 0..8 {
            let m = Matrix3::from_fn(|r, c| {
                if perm[r] == c {
                    if signs >> r & 1 == 1 {
                        -1.0
                    } else {
                        1.0
                    }
                } else {
                    0.0
                }
            });
            if m.determinant() > 0.0 {
                out.push(UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m)));
            }
        }
    }
    out
}

/// Stretch, rotate, reflect and jitter `base`, returning the convex hull of
/// the moved vertices.
pub fn perturb(base: &Polyhedron, pert: &Perturbation, rng: &mut impl Rng) -> Result<Polyhedron, GeometryError> {
    let (lo, hi) = pert.stretch;
    let stretch = Point3::from_fn(|_, _| if hi > lo { rng.gen_range(lo..hi) } else { lo });
    let rotation = if pert.rotate {
        if pert.aligned_probability > 0.0 && rng.gen::<f64>() < pert.aligned_probability {
            let all = axis_rotations();
            all[rng.gen_range(0..all.len())]
        } else {
            random_rotation(rng)
        }
    } else {
        UnitQuaternion::identity()
    };
    let reflect = rng.gen::<f64>() < pert.reflect_probability;
    let mut points: Vec<Point3> = base
        .vertices()
        .iter()
        .map(|v| {
            let mut p = rotation * v.component_mul(&stretch);
            if reflect {
                p.x = -p.x;
            }
            p
        })
        .collect();
    if pert.jitter > 0.0 {
        let amp = pert.jitter * base.map_vertices(|v| v.component_mul(&stretch)).diam();
        for p in &mut points {
            *p += Point3::from_fn(|_, _| rng.gen_range(-amp..=amp));
        }
    }
    convex_polyhedron(&points)
}

fn accept(p: &Polyhedron) -> Option<BinaryImage> {
    voxelize(p).ok().filter(|img| img.occupied() >= MIN_OCCUPIED)
}

/// `count` perturbed images of the reference shape of `label`. Sample `i`
/// depends only on `(rng_seed, label, i)`.
pub fn gen_shape_samples(
    label: Label,
    count: usize,
    rng_seed: u64,
    pert: &Perturbation,
) -> Result<Vec<Sample>, DatasetError> {
    let base = reference_shape(label)?;
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(rng_seed, label.index() as u64 + 1, i);
            loop {
                if let Some(image) = perturb(&base, pert, &mut rng).ok().as_ref().and_then(accept) {
                    return Sample { image, label };
                }
            }
        })
        .collect())
}

/// Cells of one random Voronoi grid with 8 to 48 seeds, in random order.
fn random_voronoi_cells(rng: &mut impl Rng) -> Vec<Polyhedron> {
    let n = rng.gen_range(8..=48);
    let seeds: Vec<Point3> = (0..n).map(|_| Point3::from_fn(|_, _| rng.gen())).collect();
    let mut cells = voronoi_cells(&seeds).unwrap_or_default();
    cells.shuffle(rng);
    cells
}

/// `count` images of cells from fresh random Voronoi grids, labelled
/// "other". Each block of eight samples uses its own generator stream.
pub fn gen_other_samples(count: usize, rng_seed: u64) -> Vec<Sample> {
    let blocks = count.div_ceil(CELLS_PER_GRID) as u64;
    let mut samples: Vec<Sample> = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = stream_rng(rng_seed, Label::Other.index() as u64 + 1, b);
            let mut out = Vec::with_capacity(CELLS_PER_GRID);
            while out.len() < CELLS_PER_GRID {
                for cell in random_voronoi_cells(&mut rng) {
                    if out.len() == CELLS_PER_GRID {
                        break;
                    }
                    if let Some(image) = accept(&cell) {
                        out.push(Sample {
                            image,
                            label: Label::Other,
                        });
                    }
                }
            }
            out
        })
        .collect();
    samples.truncate(count);
    samples
}

/// Samples with a train/validation/test assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
    pub rng_seed: u64,
}

/// Stratified 60/20/20 assignment: each class is shuffled on its own and cut
/// at rounded fractions.
pub fn split(samples: Vec<Sample>, rng_seed: u64) -> Result<LabeledDataset, DatasetError> {
    let mut splits = vec![Split::Train; samples.len()];
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == label).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 5 {
            return Err(DatasetError::TooFewSamples {
                label,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut stream_rng(rng_seed, 0xff, label.index() as u64));
        let n = idx.len() as f64;
        let n_train = (0.6 * n).round() as usize;
        let n_val = (0.2 * n).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            splits[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
    }
    Ok(LabeledDataset {
        samples,
        splits,
        rng_seed,
    })
}

/// Generates and splits a full dataset.
pub fn generate(cfg: &DatasetConfig) -> Result<LabeledDataset, DatasetError> {
    let mut samples = Vec::with_capacity(cfg.counts.iter().sum());
    for label in [Label::Tetrahedron, Label::Prism, Label::Cube] {
        samples.extend(gen_shape_samples(
            label,
            cfg.counts[label.index()],
            cfg.rng_seed,
            &cfg.perturbation,
        )?);
    }
    samples.extend(gen_other_samples(cfg.counts[Label::Other.index()], cfg.rng_seed));
    split(samples, cfg.rng_seed)
}

/// Per-label sample counts of one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// JSON sidecar written next to a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub rng_seed: u64,
    pub total: usize,
    pub record_bytes: usize,
    pub counts: std::collections::BTreeMap<Label, SplitCounts>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Network inputs of one split, in sample order.
    pub fn examples(&self, which: Split) -> Vec<Example> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == which)
            .map(|(s, _)| Example {
                input: s.image.to_f64(),
                label: s.label.index(),
            })
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        let mut counts = std::collections::BTreeMap::new();
        for (s, split) in self.samples.iter().zip(&self.splits) {
            let c: &mut SplitCounts = counts.entry(s.label).or_default();
            match split {
                Split::Train => c.train += 1,
                Split::Validation => c.validation += 1,
                Split::Test => c.test += 1,
            }
        }
        Manifest {
            generator_version: GENERATOR_VERSION,
            rng_seed: self.rng_seed,
            total: self.samples.len(),
            record_bytes: RECORD_BYTES,
            counts,
        }
    }

    /// Records of 4096 voxel bytes, a label byte and a split byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * RECORD_BYTES);
        for (s, split) in self.samples.iter().zip(&self.splits) {
            out.extend_from_slice(s.image.as_bytes());
            out.push(s.label.index() as u8);
            out.push(*split as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], rng_seed: u64) -> Result<Self, DatasetError> {
        if bytes.len() % RECORD_BYTES != 0 {
            return Err(DatasetError::Format(format!(
                "{} bytes is not a multiple of the {RECORD_BYTES}-byte record",
                bytes.len()
            )));
        }
        let mut samples = Vec::with_capacity(bytes.len() / RECORD_BYTES);
        let mut splits = Vec::with_capacity(samples.capacity());
        for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
            let image = BinaryImage::from_bytes(&rec[..VOXELS])
                .map_err(|e| DatasetError::Format(format!("record {r}: {e}")))?;
            let label = Label::from_index(rec[VOXELS] as usize)
                .ok_or_else(|| DatasetError::Format(format!("record {r}: label byte {}", rec[VOXELS])))?;
            let split = Split::from_byte(rec[VOXELS + 1])
                .ok_or_else(|| DatasetError::Format(format!("record {r}: split byte {}", rec[VOXELS + 1])))?;
            samples.push(Sample { image, label });
            splits.push(split);
        }
        Ok(Self {
            samples,
            splits,
            rng_seed,
        })
    }
}

/// Location of the manifest belonging to a dataset file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the record file at `path` and its manifest next to it.
pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, ds.to_bytes())?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&ds.manifest())?)?;
    Ok(())
}

/// Reads a dataset file and checks it against its manifest.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset, DatasetError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(path))?)?;
    if manifest.record_bytes != RECORD_BYTES {
        return Err(DatasetError::Format(format!(
            "manifest record size {} differs from {RECORD_BYTES}",
            manifest.record_bytes
        )));
    }
    let ds = LabeledDataset::from_bytes(&fs::read(path)?, manifest.rng_seed)?;
    if ds.manifest().counts != manifest.counts {
        return Err(DatasetError::Format("record counts disagree with the manifest".into()));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(label: Label, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut image = BinaryImage::empty();
                image.set(i % 16, (i / 16) % 16, 0, true);
                Sample { image, label }
            })
            .collect()
    }

    #[test]
    fn unperturbed_cube_matches_the_unit_cube_image() {
        let s = gen_shape_samples(Label::Cube, 3, 1, &Perturbation::none()).unwrap();
        let expected = voxelize(&unit_cube()).unwrap();
        for sample in s {
            assert_eq!(sample.image.as_bytes(), expected.as_bytes());
        }
    }

    #[test]
    fn perturbed_shapes_are_valid_convex_polyhedra() {
        let pert = Perturbation::default();
        for label in [Label::Tetrahedron, Label::Prism, Label::Cube] {
            let base = reference_shape(label).unwrap();
            for i in 0..40 {
                let mut rng = stream_rng(9, 1, i);
                let p = perturb(&base, &pert, &mut rng).unwrap();
                p.check_invariants().unwrap();
                assert!(p.is_convex());
                assert!(p.num_vertices() <= base.num_vertices());
            }
        }
    }

    #[test]
    fn reflection_keeps_volume() {
        let pert = Perturbation {
            reflect_probability: 1.0,
            ..Perturbation::none()
        };
        let p = perturb(&unit_prism(), &pert, &mut stream_rng(0, 0, 0)).unwrap();
        assert!((p.volume().unwrap() - unit_prism().volume().unwrap()).abs() < 1e-12);
        assert!(p.vertices().iter().all(|v| v.x <= 1e-12));
    }

    #[test]
    fn axis_rotations_form_the_cube_group() {
        let all = axis_rotations();
        assert_eq!(all.len(), 24);
        for (i, a) in all.iter().enumerate() {
            assert!(all[..i].iter().all(|b| a.angle_to(b) > 1e-6));
            // Each axis lands on a signed axis.
            for e in [Point3::x(), Point3::y(), Point3::z()] {
                let v = a * e;
                assert!((v.abs().max() - 1.0).abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn aligned_cube_samples_stay_boxes() {
        let pert = Perturbation {
            jitter: 0.0,
            aligned_probability: 1.0,
            ..Perturbation::default()
        };
        let mut rng = stream_rng(5, 0, 0);
        for _ in 0..20 {
            let p = perturb(&unit_cube(), &pert, &mut rng).unwrap();
            assert!(crate::metrics::is_axis_aligned_box(&p, 1e-9));
        }
    }

    #[test]
    fn rotations_are_spread_over_the_sphere() {
        // Mean of R·e over uniform rotations tends to zero.
        let mut rng = stream_rng(3, 0, 0);
        let n = 4000;
        let mean: Point3 = (0..n).map(|_| random_rotation(&mut rng) * Point3::z()).sum::<Point3>() / n as f64;
        assert!(mean.norm() < 0.05, "{mean}");
    }

    #[test]
    fn generation_is_deterministic_and_dense_enough() {
        let cfg = DatasetConfig {
            counts: [6, 6, 6, 9],
            ..DatasetConfig::desk(17)
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 27);
        assert!(a.samples.iter().all(|s| s.image.occupied() >= MIN_OCCUPIED));
        let other = generate(&DatasetConfig { rng_seed: 18, ..cfg }).unwrap();
        assert_ne!(a.samples, other.samples);
        let m = a.manifest();
        assert_eq!(m.counts[&Label::Other].train + m.counts[&Label::Other].validation + m.counts[&Label::Other].test, 9);
    }

    #[test]
    fn prefix_of_a_larger_run_is_identical() {
        let small = gen_shape_samples(Label::Prism, 3, 5, &Perturbation::default()).unwrap();
        let large = gen_shape_samples(Label::Prism, 7, 5, &Perturbation::default()).unwrap();
        assert_eq!(small[..], large[..3]);
    }

    #[test]
    fn other_class_has_no_reference_shape() {
        assert!(matches!(
            gen_shape_samples(Label::Other, 1, 0, &Perturbation::default()),
            Err(DatasetError::NoReferenceShape(Label::Other))
        ));
    }

    #[test]
    fn ten_per_class_split_six_two_two() {
        let samples: Vec<Sample> = Label::ALL.iter().flat_map(|&l| fake(l, 10)).collect();
        let ds = split(samples.clone(), 4).unwrap();
        for c in ds.manifest().counts.values() {
            assert_eq!((c.train, c.validation, c.test), (6, 2, 2));
        }
        assert_eq!(ds, split(samples.clone(), 4).unwrap());
        assert_ne!(ds.splits, split(samples, 5).unwrap().splits);
    }

    #[test]
    fn starved_class_is_an_error() {
        let mut samples = fake(Label::Cube, 10);
        samples.extend(fake(Label::Prism, 4));
        assert!(matches!(
            split(samples, 0),
            Err(DatasetError::TooFewSamples {
                label: Label::Prism,
                count: 4
            })
        ));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let samples: Vec<Sample> = Label::ALL.iter().flat_map(|&l| fake(l, 5)).collect();
        let ds = split(samples, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 20 * 4098);
        assert_eq!(load_dataset(&path).unwrap(), ds);

        let mut bytes = ds.to_bytes();
        bytes[4096] = 7;
        assert!(matches!(LabeledDataset::from_bytes(&bytes, 0), Err(DatasetError::Format(_))));
        assert!(matches!(LabeledDataset::from_bytes(&bytes[..100], 0), Err(DatasetError::Format(_))));
        fs::write(&path, &ds.to_bytes()[..4098 * 19]).unwrap();
        assert!(matches!(load_dataset(&path), Err(DatasetError::Format(_))));
    }
}
