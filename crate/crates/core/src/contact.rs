//! Analytic contact estimation between hand and object surfel sets:
//! nearest-neighbor contact maps, accumulation over frames, contact-voxel
//! labeling for the contact-guided density strategy, template projection
//! and overlap metrics.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::geom::Vec3;
use crate::model::{Surfel2D, SurfelTag, TemplateTopology, TriangleBinding};
use crate::{Error, Result};

/// Squared distance with a fixed evaluation order so the spatial hash and
/// the brute-force oracle produce bit-identical values.
#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Per-hand-surfel contact state at one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactEntry {
    pub in_contact: bool,
    /// Distance to the nearest object surfel; +inf when none exist.
    pub distance: f64,
    /// Index of the nearest object surfel (ties resolved to the smallest
    /// index); `None` when the object set is empty.
    pub nearest: Option<usize>,
}

/// Contact state of every hand surfel against an object surfel set.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactMap {
    pub tau: f64,
    pub entries: Vec<ContactEntry>,
}

impl ContactMap {
    pub fn contact_count(&self) -> usize {
        self.entries.iter().filter(|e| e.in_contact).count()
    }
}

/// Uniform spatial hash over points, cell size = query radius.
pub struct SpatialHash {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    cell_min: (i64, i64, i64),
    cell_max: (i64, i64, i64),
    len: usize,
}

#[inline]
fn cell_of(p: &Vec3, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

impl SpatialHash {
    pub fn build(points: &[Vec3], cell: f64) -> SpatialHash {
        assert!(cell > 0.0);
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let mut cell_min = (i64::MAX, i64::MAX, i64::MAX);
        let mut cell_max = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let key = cell_of(p, cell);
            cell_min = (cell_min.0.min(key.0), cell_min.1.min(key.1), cell_min.2.min(key.2));
            cell_max = (cell_max.0.max(key.0), cell_max.1.max(key.1), cell_max.2.max(key.2));
            cells.entry(key).or_default().push(i as u32);
        }
        SpatialHash { cell, cells, cell_min, cell_max, len: points.len() }
    }

    /// Exact nearest neighbor by expanding shell search. Ties resolve to
    /// the smallest index, matching a sequential brute-force scan.
    pub fn nearest(&self, query: &Vec3, points: &[Vec3]) -> Option<(usize, f64)> {
        if self.len == 0 {
            return None;
        }
        let qc = cell_of(query, self.cell);
        // Beyond this shell there are no occupied cells in any direction.
        let k_max = [
            (qc.0 - self.cell_min.0).abs(),
            (self.cell_max.0 - qc.0).abs(),
            (qc.1 - self.cell_min.1).abs(),
            (self.cell_max.1 - qc.1).abs(),
            (qc.2 - self.cell_min.2).abs(),
            (self.cell_max.2 - qc.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap() as i64;

        let mut best: Option<(f64, u32)> = None;
        let mut k: i64 = 0;
        loop {
            self.visit_shell(qc, k, |indices| {
                for &i in indices {
                    let d2 = dist2(&points[i as usize], query);
                    let cand = (d2, i);
                    if best.map_or(true, |b| cand < b) {
                        best = Some(cand);
                    }
                }
            });
            // Cells on shell k+1 or beyond only contain points at distance
            // >= k * cell; once that strictly exceeds the best squared
            // distance no closer point (or equal-distance tie) remains.
            if let Some((d2, _)) = best {
                let guard = k as f64 * self.cell;
                if guard * guard > d2 {
                    break;
                }
            }
            if k > k_max {
                break;
            }
            k += 1;
        }
        best.map(|(d2, i)| (i as usize, d2))
    }

    fn visit_shell(&self, c: (i64, i64, i64), k: i64, mut f: impl FnMut(&[u32])) {
        if k == 0 {
            if let Some(v) = self.cells.get(&c) {
                f(v);
            }
            return;
        }
        for dx in -k..=k {
            for dy in -k..=k {
                let on_face = dx.abs() == k || dy.abs() == k;
                if on_face {
                    for dz in -k..=k {
                        if let Some(v) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                            f(v);
                        }
                    }
                } else {
                    for dz in [-k, k] {
                        if let Some(v) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                            f(v);
                        }
                    }
                }
            }
        }
    }
}

/// Nearest object surfel for every hand surfel; in contact iff the
/// distance is strictly below `tau`. Backed by a uniform spatial hash with
/// cell size `tau`; results equal an exhaustive scan exactly.
pub fn instantaneous_contact(hand: &[Surfel2D], object: &[Surfel2D], tau: f64) -> ContactMap {
    let hp: Vec<Vec3> = hand.iter().map(|s| s.pos).collect();
    let op: Vec<Vec3> = object.iter().map(|s| s.pos).collect();
    instantaneous_contact_positions(&hp, &op, tau)
}

pub fn instantaneous_contact_positions(hand: &[Vec3], object: &[Vec3], tau: f64) -> ContactMap {
    assert!(tau > 0.0);
    if object.is_empty() {
        return ContactMap {
            tau,
            entries: vec![
                ContactEntry { in_contact: false, distance: f64::INFINITY, nearest: None };
                hand.len()
            ],
        };
    }
    let hash = SpatialHash::build(object, tau);
    let entries: Vec<ContactEntry> = hand
        .par_iter()
        .map(|h| {
            let (idx, d2) = hash.nearest(h, object).expect("object set nonempty");
            let distance = d2.sqrt();
            ContactEntry { in_contact: distance < tau, distance, nearest: Some(idx) }
        })
        .collect();
    ContactMap { tau, entries }
}

/// Union of per-frame contact maps over a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulatedContact {
    pub ever_contact: Vec<bool>,
    pub min_distance: Vec<f64>,
    /// Per-template-vertex labels; filled by [`project_to_template`].
    pub vertex_labels: Vec<bool>,
}

/// Folds a sequence of contact maps: OR on booleans, min on distances.
/// All maps must cover the same hand surfel array.
pub fn accumulate(maps: &[ContactMap]) -> Result<AccumulatedContact> {
    let first = maps.first().ok_or(Error::EmptySequence)?;
    let n = first.entries.len();
    let mut ever = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    for map in maps {
        if map.entries.len() != n {
            return Err(Error::LengthMismatch { a: n, b: map.entries.len() });
        }
        for (i, e) in map.entries.iter().enumerate() {
            ever[i] |= e.in_contact;
            if e.distance < min_d[i] {
                min_d[i] = e.distance;
            }
        }
    }
    Ok(AccumulatedContact { ever_contact: ever, min_distance: min_d, vertex_labels: Vec::new() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VoxelFlags {
    pub has_hand: bool,
    pub has_object: bool,
}

/// Sparse voxelization of the composed scene at voxel size tau / sqrt(3).
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    pub origin: Vec3,
    pub occupancy: HashMap<(i64, i64, i64), VoxelFlags>,
}

impl VoxelGrid {
    pub fn voxel_of(&self, p: &Vec3) -> (i64, i64, i64) {
        (
            ((p.x - self.origin.x) / self.voxel_size).floor() as i64,
            ((p.y - self.origin.y) / self.voxel_size).floor() as i64,
            ((p.z - self.origin.z) / self.voxel_size).floor() as i64,
        )
    }
}

/// Voxel labeling result: the grid, the contact voxels (cells containing
/// both hand and object surfels) and the indices of all scene surfels
/// inside contact voxels (the isotropic-regularization set).
#[derive(Clone, Debug)]
pub struct ContactVoxels {
    pub grid: VoxelGrid,
    pub contact_cells: Vec<(i64, i64, i64)>,
    pub surfels_in_contact: Vec<usize>,
}

/// Voxelizes the tagged scene with voxel size `tau / sqrt(3)`; a voxel is
/// a contact voxel when it holds both hand and object surfels. The grid
/// origin is the axis-wise scene minimum shifted by half a voxel.
pub fn label_contact_voxels(positions: &[Vec3], tags: &[SurfelTag], tau: f64) -> ContactVoxels {
    assert!(tau > 0.0);
    assert_eq!(positions.len(), tags.len());
    let voxel_size = tau / 3f64.sqrt();
    let mut origin = Vec3::zeros();
    if !positions.is_empty() {
        let mut lo = positions[0];
        for p in positions {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            lo.z = lo.z.min(p.z);
        }
        origin = lo - Vec3::new(voxel_size, voxel_size, voxel_size) * 0.5;
    }
    let grid = VoxelGrid { voxel_size, origin, occupancy: HashMap::new() };
    let mut grid = grid;
    let mut keys: Vec<(i64, i64, i64)> = Vec::with_capacity(positions.len());
    for (p, tag) in positions.iter().zip(tags) {
        let key = grid.voxel_of(p);
        keys.push(key);
        let flags = grid.occupancy.entry(key).or_default();
        if tag.is_hand() {
            flags.has_hand = true;
        } else {
            flags.has_object = true;
        }
    }
    let mut contact_cells: Vec<(i64, i64, i64)> = grid
        .occupancy
        .iter()
        .filter(|(_, f)| f.has_hand && f.has_object)
        .map(|(k, _)| *k)
        .collect();
    contact_cells.sort_unstable();
    let surfels_in_contact: Vec<usize> = keys
        .iter()
        .enumerate()
        .filter(|(_, k)| grid.occupancy.get(k).is_some_and(|f| f.has_hand && f.has_object))
        .map(|(i, _)| i)
        .collect();
    ContactVoxels { grid, contact_cells, surfels_in_contact }
}

/// Projects accumulated surfel contacts to template vertices: a vertex is
/// contacted iff any surfel bound to one of its incident triangles ever
/// contacted.
pub fn project_to_template(
    acc: &AccumulatedContact,
    bindings: &[TriangleBinding],
    topology: &TemplateTopology,
) -> Vec<bool> {
    let mut labels = vec![false; topology.vertex_count];
    for (i, binding) in bindings.iter().enumerate() {
        if acc.ever_contact[i] {
            for &v in &topology.faces[binding.triangle_id] {
                labels[v] = true;
            }
        }
    }
    labels
}

/// IoU and F1 between binary label vectors. IoU of two empty sets is 1;
/// F1 is 0 when precision + recall is undefined.
pub fn contact_metrics(pred: &[bool], gt: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch { a: pred.len(), b: gt.len() });
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let union = tp + fp + fne;
    let iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
    let f1 = if 2 * tp + fp + fne == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fne) as f64
    };
    Ok((iou, f1))
}
