//! Occupancy images of polyhedra for the classifier.

use thiserror::Error;

use crate::geometry::{ElementId, GeometryError, Point3, Polyhedron, PointLocator};

/// Voxels per axis.
pub const RES: usize = 16;
/// Total voxel count.
pub const VOXELS: usize = RES * RES * RES;
/// Fraction of the image spanned by the longest bounding-box extent.
pub const FILL: f64 = 14.0 / 16.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error("cannot voxelize degenerate element: {0}")]
    Degenerate(String),
    #[error("no voxel center falls inside the element")]
    Empty,
    #[error("raw image must have {VOXELS} bytes, got {0}")]
    Length(usize),
    #[error("raw image byte {index} is {value}, expected 0 or 1")]
    Value { index: usize, value: u8 },
}

impl From<GeometryError> for VoxelError {
    fn from(e: GeometryError) -> Self {
        VoxelError::Degenerate(e.to_string())
    }
}

/// 16³ binary image, stored with x fastest, then y, then z.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryImage {
    voxels: Box<[u8; VOXELS]>,
    pub source_id: ElementId,
}

impl std::fmt::Debug for BinaryImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryImage")
            .field("occupied", &self.occupied())
            .field("source_id", &self.source_id)
            .finish()
    }
}

#[inline]
pub fn index(x: usize, y: usize, z: usize) -> usize {
    (z * RES + y) * RES + x
}

impl BinaryImage {
    pub fn empty() -> Self {
        Self {
            voxels: Box::new([0; VOXELS]),
            source_id: 0,
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[index(x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        self.voxels[index(x, y, z)] = u8::from(on);
    }

    pub fn occupied(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    /// Flat 0/1 bytes, z-major then y then x.
    pub fn as_bytes(&self) -> &[u8] {
        &self.voxels[..]
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VoxelError> {
        if bytes.len() != VOXELS {
            return Err(VoxelError::Length(bytes.len()));
        }
        if let Some(index) = bytes.iter().position(|&b| b > 1) {
            return Err(VoxelError::Value {
                index,
                value: bytes[index],
            });
        }
        let mut voxels = Box::new([0u8; VOXELS]);
        voxels.copy_from_slice(bytes);
        Ok(Self { voxels, source_id: 0 })
    }

    /// Voxel values as floats for the network input.
    pub fn to_f64(&self) -> Vec<f64> {
        self.voxels.iter().map(|&v| f64::from(v)).collect()
    }

    /// Image translated by whole voxels; content pushed past the border is
    /// dropped.
    pub fn shifted(&self, dx: isize, dy: isize, dz: isize) -> Self {
        let mut out = Self::empty();
        out.source_id = self.source_id;
        for z in 0..RES {
            for y in 0..RES {
                for x in 0..RES {
                    if !self.get(x, y, z) {
                        continue;
                    }
                    let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    let r = 0..RES as isize;
                    if r.contains(&nx) && r.contains(&ny) && r.contains(&nz) {
                        out.set(nx as usize, ny as usize, nz as usize, true);
                    }
                }
            }
        }
        out
    }

    /// Occupied index range per axis, `None` when empty.
    pub fn extents(&self) -> Option<[(usize, usize); 3]> {
        let mut lo = [RES; 3];
        let mut hi = [0; 3];
        let mut any = false;
        for z in 0..RES {
            for y in 0..RES {
                for x in 0..RES {
                    if self.get(x, y, z) {
                        any = true;
                        for (a, v) in [x, y, z].into_iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v);
                        }
                    }
                }
            }
        }
        any.then(|| [0, 1, 2].map(|a| (lo[a], hi[a])))
    }
}

/// Maps `p` into the unit cube (bounding-box center to the image center,
/// longest extent scaled to [`FILL`]) and marks every voxel whose center is
/// inside.
pub fn voxelize(p: &Polyhedron) -> Result<BinaryImage, VoxelError> {
    let (lo, hi) = p.bounding_box();
    let extent = (hi - lo).max();
    if !extent.is_finite() || extent <= 0.0 {
        return Err(VoxelError::Degenerate("zero extent".into()));
    }
    let center = (lo + hi) * 0.5;
    let scale = FILL / extent;
    let normalized = p.map_vertices(|v| (v - center) * scale + Point3::repeat(0.5));
    normalized.centroid()?;
    let loc = PointLocator::new(&normalized);
    let mut img = BinaryImage::empty();
    img.source_id = p.id();
    for z in 0..RES {
        for y in 0..RES {
            for x in 0..RES {
                let q = Point3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) / RES as f64;
                if loc.contains(&q) {
                    img.set(x, y, z, true);
                }
            }
        }
    }
    if img.occupied() == 0 {
        return Err(VoxelError::Empty);
    }
    Ok(img)
}
