//! Hidden workspace volume behind visible segments.
//!
//! Every segment is voxelized; each voxel casts a square shadow cone from the
//! camera. The part of the cone between the voxel's far face and the workspace
//! boundary is the volume that voxel hides.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Point};
use crate::scene::{Scene, SegmentId};

pub const DEFAULT_VOXEL_EDGE: f64 = 0.01;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HiddenVolumeReport {
    pub per_segment_hidden: BTreeMap<SegmentId, f64>,
    pub v_hidden: f64,
    pub v_visible: f64,
    pub v_total: f64,
    pub mean_patch_height: f64,
    pub floor_area: f64,
    /// Set when the hidden volume exceeded the total and `v_visible` was clamped to 0.
    pub clamped: bool,
}

impl HiddenVolumeReport {
    /// Hidden volume behind a set of segments.
    pub fn hidden_behind(&self, ids: &[SegmentId]) -> f64 {
        ids.iter().filter_map(|id| self.per_segment_hidden.get(id)).sum()
    }
}

pub fn hidden_volume(scene: &Scene) -> Result<HiddenVolumeReport> {
    hidden_volume_with(scene, DEFAULT_VOXEL_EDGE)
}

pub fn hidden_volume_with(scene: &Scene, voxel_edge: f64) -> Result<HiddenVolumeReport> {
    if !(voxel_edge > 0.0 && voxel_edge.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "voxel edge must be positive, got {voxel_edge}"
        )));
    }
    let workspace = scene.workspace();
    let camera = scene.camera_origin();
    if workspace.contains_strictly(&camera) {
        return Err(Error::DegenerateProjection("camera lies inside the workspace".into()));
    }

    let mut per_segment_hidden = BTreeMap::new();
    for seg in scene.segments() {
        let mut total = 0.0;
        for center in voxel_centers(&seg.points, &workspace.min, voxel_edge) {
            total += voxel_shadow(&camera, &center, voxel_edge, workspace)?;
        }
        per_segment_hidden.insert(seg.id, total);
    }
    let v_hidden: f64 = per_segment_hidden.values().sum();

    let floor = workspace.min.z;
    let n = scene.segments().len();
    let mean_patch_height = if n == 0 {
        0.0
    } else {
        scene
            .segments()
            .iter()
            .map(|s| (s.max_z() - floor).max(0.0))
            .sum::<f64>()
            / n as f64
    };
    let floor_area = workspace.floor_area();
    let v_total = 2.0 * mean_patch_height * floor_area;
    let clamped = v_hidden > v_total;
    let v_visible = (v_total - v_hidden).max(0.0);
    Ok(HiddenVolumeReport {
        per_segment_hidden,
        v_hidden,
        v_visible,
        v_total: if clamped { v_hidden } else { v_total },
        mean_patch_height,
        floor_area,
        clamped,
    })
}

/// Centers of the occupied voxels of a point set, on a grid anchored at `anchor`.
pub fn voxel_centers(points: &[Point], anchor: &Point, edge: f64) -> Vec<Point> {
    let cells: BTreeSet<[i64; 3]> = points
        .iter()
        .map(|p| {
            let v = (p - anchor) / edge;
            [v.x.floor() as i64, v.y.floor() as i64, v.z.floor() as i64]
        })
        .collect();
    cells
        .into_iter()
        .map(|c| {
            Point::new(
                anchor.x + (c[0] as f64 + 0.5) * edge,
                anchor.y + (c[1] as f64 + 0.5) * edge,
                anchor.z + (c[2] as f64 + 0.5) * edge,
            )
        })
        .collect()
}

/// Volume of the shadow cone behind one voxel, clipped at the workspace boundary.
///
/// The cone has a square cross-section of side `edge` at the voxel center
/// distance `r0` and grows quadratically with distance; it is integrated from
/// the far face `r0 + edge/2` to the exit distance of the central ray.
pub fn voxel_shadow(camera: &Point, center: &Point, edge: f64, workspace: &Aabb) -> Result<f64> {
    let ray = center - camera;
    let r0 = ray.norm();
    if r0 - 0.5 * edge <= 0.0 {
        return Err(Error::DegenerateProjection(format!(
            "voxel at {center:?} straddles the camera origin"
        )));
    }
    let dir = ray / r0;
    let exit = match workspace.ray_interval(camera, &dir) {
        Some((_, t1)) => t1,
        None => return Ok(0.0),
    };
    let near = r0 + 0.5 * edge;
    if exit <= near {
        return Ok(0.0);
    }
    Ok(edge * edge * (exit.powi(3) - near.powi(3)) / (3.0 * r0 * r0))
}
