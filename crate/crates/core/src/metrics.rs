//! Element quality metrics (uniformity factor, circle ratio), their
//! histograms, and CSV reports.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{ElementId, GeometryError, Polyhedron};
use crate::mesh::{ComplexityStats, Mesh, MeshError};

/// Histogram bin width over [0, 1].
pub const BIN_WIDTH: f64 = 0.05;
pub const BINS: usize = 20;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("element {id}: {source}")]
    Element { id: ElementId, source: GeometryError },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Element diameter over mesh size.
pub fn uniformity_factor(p: &Polyhedron, mesh: &Mesh) -> Result<f64, MetricsError> {
    Ok(p.diam() / mesh.mesh_size()?)
}

/// Inscribed-ball radius over half the diameter (the circumscribed radius
/// approximation).
pub fn circle_ratio(p: &Polyhedron) -> Result<f64, GeometryError> {
    let r = p.inscribed_radius()?;
    let d = p.diameter()?.length;
    Ok((2.0 * r / d).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElementQuality {
    pub element_id: ElementId,
    pub uf: f64,
    pub cr: f64,
}

/// Percentage of values per 0.05-wide bin; 1.0 falls in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub percent: [f64; BINS],
}

impl Histogram {
    pub fn of(values: impl ExactSizeIterator<Item = f64>) -> Self {
        let n = values.len();
        let mut counts = [0usize; BINS];
        for v in values {
            let b = ((v / BIN_WIDTH).floor().max(0.0) as usize).min(BINS - 1);
            counts[b] += 1;
        }
        let mut percent = [0.0; BINS];
        if n > 0 {
            for (p, c) in percent.iter_mut().zip(counts) {
                *p = 100.0 * c as f64 / n as f64;
            }
        }
        Self { percent }
    }

    /// Lower edge of bin `b`.
    pub fn bin_start(b: usize) -> f64 {
        b as f64 * BIN_WIDTH
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityReport {
    pub elements: Vec<ElementQuality>,
    pub uf_hist: Histogram,
    pub cr_hist: Histogram,
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len().max(1) as f64;
    v.sum::<f64>() / n
}

impl QualityReport {
    pub fn mean_uf(&self) -> f64 {
        mean(self.elements.iter().map(|e| e.uf))
    }

    pub fn mean_cr(&self) -> f64 {
        mean(self.elements.iter().map(|e| e.cr))
    }

    /// `element_id,uf,cr`
    pub fn write_quality_csv(&self, out: impl Write) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.elements {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `bin_start,bin_end,uf_percent,cr_percent`
    pub fn write_histogram_csv(&self, out: impl Write) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_start", "bin_end", "uf_percent", "cr_percent"])?;
        for b in 0..BINS {
            w.write_record([
                format!("{:.2}", Histogram::bin_start(b)),
                format!("{:.2}", Histogram::bin_start(b + 1)),
                self.uf_hist.percent[b].to_string(),
                self.cr_hist.percent[b].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// UF and CR of every element, in id order.
pub fn quality_report(mesh: &Mesh) -> Result<QualityReport, MetricsError> {
    let h = mesh.mesh_size()?;
    let elements: Vec<&Polyhedron> = mesh.elements().collect();
    let elements = elements
        .par_iter()
        .map(|p| {
            let cr = circle_ratio(p).map_err(|source| MetricsError::Element { id: p.id(), source })?;
            Ok(ElementQuality {
                element_id: p.id(),
                uf: p.diam() / h,
                cr,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(QualityReport {
        uf_hist: Histogram::of(elements.iter().map(|e| e.uf)),
        cr_hist: Histogram::of(elements.iter().map(|e| e.cr)),
        elements,
    })
}

/// True when `p` has 8 vertices sitting on the corners of its bounding box
/// (within `tol` per coordinate) and fills that box.
pub fn is_axis_aligned_box(p: &Polyhedron, tol: f64) -> bool {
    if p.num_vertices() != 8 {
        return false;
    }
    let (lo, hi) = p.bounding_box();
    let on_corner = p.vertices().iter().all(|v| {
        (0..3).all(|k| (v[k] - lo[k]).abs() <= tol || (v[k] - hi[k]).abs() <= tol)
    });
    let mut corners: Vec<[bool; 3]> = p
        .vertices()
        .iter()
        .map(|v| [0, 1, 2].map(|k| (v[k] - hi[k]).abs() < (v[k] - lo[k]).abs()))
        .collect();
    corners.sort_unstable();
    corners.dedup();
    let e = hi - lo;
    let box_volume = e.x * e.y * e.z;
    let box_area = 2.0 * (e.x * e.y + e.y * e.z + e.z * e.x);
    on_corner && corners.len() == 8 && (p.signed_volume() - box_volume).abs() <= tol * box_area
}

/// Elements per unit volume among those whose centroid has `lo < x < hi`,
/// relative to the slab `lo < x < hi` of the mesh domain.
pub fn slab_density(mesh: &Mesh, lo: f64, hi: f64) -> f64 {
    let (dlo, dhi) = mesh.domain();
    let slab = (hi - lo) * (dhi.y - dlo.y) * (dhi.z - dlo.z);
    let count = mesh
        .elements()
        .filter(|p| p.centroid().is_ok_and(|c| c.x > lo && c.x < hi))
        .count();
    count as f64 / slab
}

/// Deterministic part of a complexity row.
#[derive(Debug, Clone, Serialize)]
struct CountRow<'a> {
    label: &'a str,
    n_vertices: usize,
    n_edges: usize,
    n_faces: usize,
    n_elements: usize,
}

#[derive(Debug, Clone, Serialize)]
struct TimingRow<'a> {
    label: &'a str,
    total_refine_time: f64,
    mean_time_per_element: f64,
}

/// Entity counts per labelled run (`label,n_vertices,n_edges,n_faces,n_elements`).
pub fn write_complexity_csv(rows: &[(String, ComplexityStats)], out: impl Write) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for (label, s) in rows {
        w.serialize(CountRow {
            label,
            n_vertices: s.n_vertices,
            n_edges: s.n_edges,
            n_faces: s.n_faces,
            n_elements: s.n_elements,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock refinement times per labelled run, in seconds. Kept apart from
/// the counts because they vary between runs.
pub fn write_timing_csv(rows: &[(String, ComplexityStats)], out: impl Write) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for (label, s) in rows {
        w.serialize(TimingRow {
            label,
            total_refine_time: s.total_refine_time,
            mean_time_per_element: s.mean_time_per_element,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes::*;
    use crate::geometry::{CuttingPlane, Point3};
    use crate::grid_gen::{generate, GridKind, GridSpec};
    use approx::assert_relative_eq;

    #[test]
    fn cube_circle_ratio() {
        assert_relative_eq!(circle_ratio(&unit_cube()).unwrap(), 1.0 / 3f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn long_box_circle_ratio() {
        let b = box_solid(Point3::zeros(), Point3::new(10.0, 1.0, 1.0));
        assert_relative_eq!(circle_ratio(&b).unwrap(), 1.0 / 102f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn flat_element_has_no_circle_ratio() {
        assert!(circle_ratio(&box_solid(Point3::zeros(), Point3::new(1.0, 1.0, 0.0))).is_err());
    }

    #[test]
    fn uniform_grid_has_unit_uf() {
        let m = generate(&GridSpec::new(GridKind::Cubes, 3, 0)).unwrap();
        let r = quality_report(&m).unwrap();
        assert!(r.elements.iter().all(|e| (e.uf - 1.0).abs() < 1e-12));
        assert_eq!(r.uf_hist.percent[BINS - 1], 100.0);
    }

    #[test]
    fn refined_octant_has_half_uf() {
        let mut m = generate(&GridSpec::new(GridKind::Cubes, 2, 0)).unwrap();
        let id = m.ids()[0];
        let p = m.get(id).unwrap().clone();
        let c = p.centroid().unwrap();
        let mut pieces = vec![p];
        for axis in [Point3::x(), Point3::y(), Point3::z()] {
            let plane = CuttingPlane::new(c, axis).unwrap();
            pieces = pieces
                .iter()
                .flat_map(|q| {
                    let r = crate::geometry::clip_by_plane(q, &plane).unwrap();
                    r.negative.into_iter().chain(r.positive)
                })
                .collect();
        }
        let new_ids = m.replace_element(id, pieces).unwrap();
        let r = quality_report(&m).unwrap();
        for e in &r.elements {
            let expected = if new_ids.contains(&e.element_id) { 0.5 } else { 1.0 };
            assert_relative_eq!(e.uf, expected, max_relative = 1e-12);
        }
        let max = r.elements.iter().map(|e| e.uf).fold(0.0, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn histograms_sum_to_one_hundred() {
        let m = generate(&GridSpec::new(GridKind::Voronoi, 30, 4)).unwrap();
        let r = quality_report(&m).unwrap();
        for h in [&r.uf_hist, &r.cr_hist] {
            assert!((h.percent.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        }
        assert!(r.elements.iter().all(|e| (0.0..=1.0).contains(&e.uf) && (0.0..=1.0).contains(&e.cr)));
    }

    #[test]
    fn histogram_edges() {
        let h = Histogram::of([0.0, 0.05, 0.999, 1.0].into_iter());
        assert_eq!(h.percent[0], 25.0);
        assert_eq!(h.percent[1], 25.0);
        assert_eq!(h.percent[BINS - 1], 50.0);
    }

    #[test]
    fn boxes_are_recognised() {
        assert!(is_axis_aligned_box(&unit_cube(), 1e-9));
        let b = box_solid(Point3::new(0.25, 0.0, 0.5), Point3::new(0.5, 0.125, 1.0));
        assert!(is_axis_aligned_box(&b, 1e-9));
        let t = unit_cube().map_vertices(|v| Point3::new(v.x + 0.1 * v.y, v.y, v.z));
        assert!(!is_axis_aligned_box(&t, 1e-9));
        let half = crate::geometry::clip_by_plane(
            &unit_cube(),
            &CuttingPlane::new(Point3::repeat(0.5), Point3::new(1.0, 1.0, 0.0)).unwrap(),
        )
        .unwrap();
        assert!(!is_axis_aligned_box(&half.negative[0], 1e-9));
    }

    #[test]
    fn slab_density_counts_centroids() {
        let m = generate(&GridSpec::new(GridKind::Cubes, 4, 0)).unwrap();
        assert_relative_eq!(slab_density(&m, 0.0, 0.25), 64.0, max_relative = 1e-12);
        assert_relative_eq!(slab_density(&m, 0.0, 0.5), 64.0, max_relative = 1e-12);
    }

    #[test]
    fn csv_layouts() {
        let m = generate(&GridSpec::new(GridKind::Cubes, 1, 0)).unwrap();
        let r = quality_report(&m).unwrap();
        let mut q = Vec::new();
        r.write_quality_csv(&mut q).unwrap();
        let q = String::from_utf8(q).unwrap();
        assert!(q.starts_with("element_id,uf,cr\n0,1.0,0.57735"));
        let mut h = Vec::new();
        r.write_histogram_csv(&mut h).unwrap();
        let h = String::from_utf8(h).unwrap();
        assert_eq!(h.lines().count(), BINS + 1);
        assert!(h.lines().nth(12).unwrap().starts_with("0.55,0.60,0,100"));
    }
}
