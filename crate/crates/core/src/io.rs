//! Mesh interchange (JSON read/write, legacy VTK export) and the CSV logs
//! written by refinement, training and classification.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{EpochRecord, Label};
use crate::geometry::{ElementId, Point3, Polyhedron};
use crate::mesh::{Mesh, MeshError};
use crate::refine::LogRecord;

pub const MESH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IoError {
    /// True for errors caused by the content of an input file rather than by
    /// the file system.
    pub fn is_format(&self) -> bool {
        matches!(self, IoError::Syntax { .. } | IoError::Format(_))
    }
}

impl From<serde_json::Error> for IoError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            return IoError::Io(e.into());
        }
        let message = e.to_string();
        let message = match message.rfind(" at line ") {
            Some(i) => message[..i].to_string(),
            None => message,
        };
        IoError::Syntax {
            line: e.line(),
            column: e.column(),
            message,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MeshFile {
    version: u32,
    domain: [[f64; 3]; 2],
    #[serde(default)]
    generation: u32,
    #[serde(default)]
    next_id: ElementId,
    vertices: Vec<f64>,
    elements: Vec<ElementRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ElementRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<ElementId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<ElementId>,
    faces: Vec<Vec<usize>>,
}

fn bits(p: &Point3) -> [u64; 3] {
    [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]
}

/// Shared vertex table; vertices are merged only when bitwise equal.
#[derive(Default)]
struct VertexTable {
    index: HashMap<[u64; 3], usize>,
    coords: Vec<f64>,
}

impl VertexTable {
    fn add(&mut self, p: &Point3) -> usize {
        let next = self.index.len();
        *self.index.entry(bits(p)).or_insert_with(|| {
            self.coords.extend([p.x, p.y, p.z]);
            next
        })
    }
}

fn to_file(mesh: &Mesh) -> MeshFile {
    let mut table = VertexTable::default();
    let elements = mesh
        .elements()
        .map(|p| {
            // Numbering follows the face loops, so the output depends only on
            // the loops and a written mesh reads back to the same bytes.
            let faces = p
                .faces()
                .iter()
                .map(|f| f.iter().map(|&i| table.add(&p.vertices()[i])).collect())
                .collect();
            ElementRecord {
                id: Some(p.id()),
                parent: mesh.parent_of(p.id()),
                faces,
            }
        })
        .collect();
    let (lo, hi) = mesh.domain();
    MeshFile {
        version: MESH_FORMAT_VERSION,
        domain: [[lo.x, lo.y, lo.z], [hi.x, hi.y, hi.z]],
        generation: mesh.generation(),
        next_id: mesh.next_id(),
        vertices: table.coords,
        elements,
    }
}

fn from_file(f: MeshFile) -> Result<Mesh, IoError> {
    if f.version != MESH_FORMAT_VERSION {
        return Err(IoError::Format(format!(
            "unsupported mesh format version {} (expected {MESH_FORMAT_VERSION})",
            f.version
        )));
    }
    if f.vertices.len() % 3 != 0 {
        return Err(IoError::Format(format!(
            "vertex array length {} is not a multiple of 3",
            f.vertices.len()
        )));
    }
    let points: Vec<Point3> = f.vertices.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
    let mut next_fallback = 0;
    let mut elements = Vec::with_capacity(f.elements.len());
    for (k, e) in f.elements.into_iter().enumerate() {
        let bad = |msg: String| IoError::Format(format!("element {k}: {msg}"));
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut vertices = Vec::new();
        let mut faces = Vec::with_capacity(e.faces.len());
        for face in &e.faces {
            let mut loop_ = Vec::with_capacity(face.len());
            for &g in face {
                let v = *points
                    .get(g)
                    .ok_or_else(|| bad(format!("vertex index {g} out of range ({} vertices)", points.len())))?;
                let li = *local.entry(g).or_insert_with(|| {
                    vertices.push(v);
                    vertices.len() - 1
                });
                loop_.push(li);
            }
            faces.push(loop_);
        }
        let p = Polyhedron::new(vertices, faces).map_err(|e| bad(e.to_string()))?;
        p.check_invariants().map_err(|e| bad(e.to_string()))?;
        let id = e.id.unwrap_or(next_fallback);
        next_fallback = id + 1;
        elements.push((p.with_id(id), e.parent));
    }
    let [lo, hi] = f.domain;
    Mesh::restore(
        (Point3::from(lo), Point3::from(hi)),
        f.generation,
        f.next_id,
        elements,
    )
    .map_err(|e: MeshError| IoError::Format(e.to_string()))
}

pub fn write_mesh(mesh: &Mesh, out: impl Write) -> Result<(), IoError> {
    let mut out = BufWriter::new(out);
    serde_json::to_writer(&mut out, &to_file(mesh))?;
    out.flush()?;
    Ok(())
}

/// Reads a mesh; syntax errors carry the line and column of the problem.
pub fn read_mesh(src: impl Read) -> Result<Mesh, IoError> {
    let f: MeshFile = serde_json::from_reader(BufReader::new(src))?;
    from_file(f)
}

pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<(), IoError> {
    write_mesh(mesh, File::create(path)?)
}

pub fn load_mesh(path: &Path) -> Result<Mesh, IoError> {
    read_mesh(File::open(path)?)
}

const VTK_POLYHEDRON: u32 = 42;

/// Legacy-VTK unstructured grid with one polyhedron cell per element and the
/// element id as cell data. Export only.
pub fn write_vtk(mesh: &Mesh, out: impl Write) -> Result<(), IoError> {
    let mut out = BufWriter::new(out);
    let mut table = VertexTable::default();
    let mut cells: Vec<Vec<usize>> = Vec::with_capacity(mesh.len());
    for p in mesh.elements() {
        let global: Vec<usize> = p.vertices().iter().map(|v| table.add(v)).collect();
        let mut stream = vec![p.num_faces()];
        for f in p.faces() {
            stream.push(f.len());
            stream.extend(f.iter().map(|&i| global[i]));
        }
        cells.push(stream);
    }
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "polyrefine mesh")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {} double", table.coords.len() / 3)?;
    for c in table.coords.chunks_exact(3) {
        writeln!(out, "{} {} {}", c[0], c[1], c[2])?;
    }
    let size: usize = cells.iter().map(|c| c.len() + 1).sum();
    writeln!(out, "CELLS {} {size}", cells.len())?;
    for c in &cells {
        write!(out, "{}", c.len())?;
        for v in c {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    writeln!(out, "CELL_TYPES {}", cells.len())?;
    for _ in &cells {
        writeln!(out, "{VTK_POLYHEDRON}")?;
    }
    writeln!(out, "CELL_DATA {}", cells.len())?;
    writeln!(out, "SCALARS element_id double 1")?;
    writeln!(out, "LOOKUP_TABLE default")?;
    for p in mesh.elements() {
        writeln!(out, "{}", p.id())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LogRow<'a> {
    step: usize,
    element_id: ElementId,
    strategy: &'a str,
    method: &'a str,
    label: &'a str,
    children: usize,
    emergency_attempts: usize,
}

#[derive(Serialize)]
struct LogTimingRow {
    step: usize,
    element_id: ElementId,
    wall_time: f64,
}

fn label_name(l: Option<Label>) -> &'static str {
    l.map_or("", Label::name)
}

/// Per-element refinement log without timings, so it is reproducible.
pub fn write_refine_log(records: &[LogRecord], out: impl Write) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(LogRow {
            step: r.step,
            element_id: r.element_id,
            strategy: &r.strategy,
            method: &r.method,
            label: label_name(r.label),
            children: r.children,
            emergency_attempts: r.emergency_attempts,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Wall time of each `refine_element` call, in seconds.
pub fn write_refine_timing(records: &[LogRecord], out: impl Write) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(LogTimingRow {
            step: r.step,
            element_id: r.element_id,
            wall_time: r.wall_time.as_secs_f64(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// `epoch,train_loss,val_loss,val_accuracy`
pub fn write_history(history: &[EpochRecord], out: impl Write) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One predicted label per element.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub element_id: ElementId,
    pub label: Label,
    pub p_tetrahedron: f64,
    pub p_prism: f64,
    pub p_cube: f64,
    pub p_other: f64,
}

pub fn write_labels(rows: &[Classification], out: impl Write) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes::*;
    use crate::grid_gen::{generate, GridKind, GridSpec};
    use crate::refine::{uniform_refine, RefineConfig, Refiner, Strategy};

    fn roundtrip(m: &Mesh) -> Mesh {
        let mut buf = Vec::new();
        write_mesh(m, &mut buf).unwrap();
        read_mesh(buf.as_slice()).unwrap()
    }

    fn same(a: &Mesh, b: &Mesh) {
        assert_eq!(a.ids(), b.ids());
        assert_eq!(a.domain(), b.domain());
        assert_eq!(a.generation(), b.generation());
        assert_eq!(a.next_id(), b.next_id());
        for (p, q) in a.elements().zip(b.elements()) {
            assert_eq!(a.parent_of(p.id()), b.parent_of(q.id()));
            let loops = |x: &Polyhedron| -> Vec<Vec<Point3>> {
                x.faces().iter().map(|f| f.iter().map(|&i| x.vertices()[i]).collect()).collect()
            };
            assert_eq!(loops(p), loops(q));
        }
        let mut once = Vec::new();
        write_mesh(b, &mut once).unwrap();
        let mut twice = Vec::new();
        write_mesh(&read_mesh(once.as_slice()).unwrap(), &mut twice).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn voronoi_roundtrip_is_exact() {
        let m = generate(&GridSpec::new(GridKind::Voronoi, 20, 3)).unwrap();
        same(&m, &roundtrip(&m));
    }

    #[test]
    fn refined_mesh_keeps_ids_and_parents() {
        let mut m = generate(&GridSpec::new(GridKind::Cubes, 2, 0)).unwrap();
        let cfg = RefineConfig::with_strategy(Strategy::Diameter);
        uniform_refine(&mut m, &Refiner::new(cfg, None).unwrap(), 1).unwrap();
        let r = roundtrip(&m);
        same(&m, &r);
        assert!(r.parent_of(r.ids()[0]).is_some());
    }

    #[test]
    fn shared_vertices_stored_once() {
        let m = generate(&GridSpec::new(GridKind::Cubes, 4, 0)).unwrap();
        let f = to_file(&m);
        assert_eq!(f.vertices.len(), 125 * 3);
    }

    #[test]
    fn syntax_error_has_position() {
        let text = "{\n  \"version\": 1,\n  \"domain\": [[0,0,0],[1,1,1]],\n  \"vertices\": [0, 1,,]\n}";
        match read_mesh(text.as_bytes()) {
            Err(IoError::Syntax { line, column, .. }) => {
                assert_eq!(line, 4);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_index_is_format_error() {
        let text = r#"{"version":1,"domain":[[0,0,0],[1,1,1]],"vertices":[0,0,0],"elements":[{"faces":[[0,1,2]]}]}"#;
        let e = read_mesh(text.as_bytes()).unwrap_err();
        assert!(e.is_format());
        assert!(e.to_string().contains("element 0"));
    }

    #[test]
    fn open_surface_is_rejected() {
        let cube = unit_cube();
        let mut m = to_file(&Mesh::from_elements(Mesh::unit_box().domain(), [cube]));
        m.elements[0].faces.pop();
        let e = from_file(m).unwrap_err();
        assert!(e.is_format());
    }

    #[test]
    fn unknown_version_is_rejected() {
        let text = r#"{"version":9,"domain":[[0,0,0],[1,1,1]],"vertices":[],"elements":[]}"#;
        assert!(read_mesh(text.as_bytes()).unwrap_err().is_format());
    }

    #[test]
    fn vtk_layout() {
        let m = generate(&GridSpec::new(GridKind::Cubes, 1, 0)).unwrap();
        let mut buf = Vec::new();
        write_vtk(&m, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("POINTS 8 double"));
        // 1 face count + 6 faces of (1 + 4) entries, plus the leading size.
        assert!(s.contains("CELLS 1 32\n31 6 4 "));
        assert!(s.contains("CELL_TYPES 1\n42\n"));
    }

    #[test]
    fn log_csv_has_no_timing() {
        let rec = LogRecord {
            step: 1,
            element_id: 3,
            strategy: "cnn".into(),
            method: "classical:cube".into(),
            label: Some(Label::Cube),
            children: 8,
            emergency_attempts: 0,
            wall_time: std::time::Duration::from_millis(5),
        };
        let mut a = Vec::new();
        write_refine_log(std::slice::from_ref(&rec), &mut a).unwrap();
        assert_eq!(
            String::from_utf8(a).unwrap(),
            "step,element_id,strategy,method,label,children,emergency_attempts\n1,3,cnn,classical:cube,cube,8,0\n"
        );
        let mut b = Vec::new();
        write_refine_timing(&[rec], &mut b).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "step,element_id,wall_time\n1,3,0.005\n");
    }

    #[test]
    fn history_header() {
        let h = [EpochRecord {
            epoch: 1,
            train_loss: 1.0,
            val_loss: 0.5,
            val_accuracy: 0.25,
        }];
        let mut b = Vec::new();
        write_history(&h, &mut b).unwrap();
        assert_eq!(
            String::from_utf8(b).unwrap(),
            "epoch,train_loss,val_loss,val_accuracy\n1,1.0,0.5,0.25\n"
        );
    }
}
