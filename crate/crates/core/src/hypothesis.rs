//! Per-hypothesis data derived from one scene view: shape, grasp, color,
//! visibility, occluders, and the cross-hypothesis grasp quality table.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::Vector2;

use crate::composition::{Composition, ConnectionModel};
use crate::error::{Error, Result};
use crate::geometry::{centroid, planar, Point};
use crate::grasp::{self, Grasp, GraspKey, Shape, FOOTPRINT_RADIUS};
use crate::occlusion::{hidden_volume, HiddenVolumeReport};
use crate::scene::{Fingerprint, Scene, Segment, SegmentId};

/// Index of a hypothesis inside a [`SceneContext`].
pub type HypId = usize;

#[derive(Clone, Debug)]
pub struct HypothesisInfo {
    pub fingerprint: Fingerprint,
    pub shape: Shape,
    pub grasp: Option<Grasp>,
    pub grasp_key: Option<GraspKey>,
    /// Segments with a point in the clearance cylinders of this hypothesis' grasp.
    pub blockers: Vec<SegmentId>,
    /// Point-weighted mean of the segments' visible fractions.
    pub visible_fraction: f64,
    /// Point-weighted mean red fraction.
    pub red_fraction: f64,
    pub is_red: bool,
    /// Segments outside the hypothesis that occlude any of its segments.
    pub occluders: Vec<SegmentId>,
    /// Occlusion signature of this hypothesis in the current view.
    pub signature: u64,
    pub centroid: Point,
    /// Scene slots (segment indices) of the hypothesis, its blockers and its occluders.
    pub slots: Vec<usize>,
    pub blocker_slots: Vec<usize>,
    pub occluder_slots: Vec<usize>,
    bbox_min: Vector2<f64>,
    bbox_max: Vector2<f64>,
}

/// A scene view plus every hypothesis that appears in its composition samples.
///
/// Hypotheses are interned once, when the context is built; quality rows are
/// filled lazily and are safe to compute from several threads.
#[derive(Debug)]
pub struct SceneContext {
    scene: Scene,
    model: ConnectionModel,
    hyps: Vec<HypothesisInfo>,
    index: BTreeMap<Fingerprint, HypId>,
    quality: Vec<OnceLock<Vec<f64>>>,
    hidden: OnceLock<std::result::Result<HiddenVolumeReport, String>>,
}

impl SceneContext {
    pub fn new<'a>(scene: Scene, hypotheses: impl IntoIterator<Item = &'a Fingerprint>) -> Result<Self> {
        let model = ConnectionModel::new(&scene);
        let mut ctx = SceneContext {
            scene,
            model,
            hyps: Vec::new(),
            index: BTreeMap::new(),
            quality: Vec::new(),
            hidden: OnceLock::new(),
        };
        for fp in hypotheses {
            ctx.intern(fp)?;
        }
        ctx.quality = (0..ctx.hyps.len()).map(|_| OnceLock::new()).collect();
        Ok(ctx)
    }

    /// Context holding every hypothesis of the given compositions.
    pub fn from_compositions<'a>(
        scene: Scene,
        compositions: impl IntoIterator<Item = &'a Composition>,
    ) -> Result<Self> {
        let mut all: Vec<&Fingerprint> = compositions.into_iter().flat_map(|c| c.hypotheses.iter()).collect();
        all.sort();
        all.dedup();
        SceneContext::new(scene, all)
    }

    fn intern(&mut self, fp: &Fingerprint) -> Result<HypId> {
        if let Some(&id) = self.index.get(fp) {
            return Ok(id);
        }
        let info = self.describe(fp)?;
        let id = self.hyps.len();
        self.hyps.push(info);
        self.index.insert(fp.clone(), id);
        Ok(id)
    }

    fn describe(&self, fp: &Fingerprint) -> Result<HypothesisInfo> {
        if fp.is_empty() {
            return Err(Error::InvalidArgument("empty hypothesis".into()));
        }
        let mut points = Vec::new();
        let mut visible = 0.0;
        let mut red = 0.0;
        let mut occluders = Vec::new();
        for &id in fp.ids() {
            let seg = self.scene.segment(id).ok_or(Error::StaleAction(id))?;
            let n = seg.points.len() as f64;
            visible += seg.visible_fraction * n;
            red += seg.red_fraction * n;
            points.extend_from_slice(&seg.points);
            occluders.extend(seg.occluded_by.iter().copied().filter(|o| !fp.contains(*o)));
        }
        occluders.sort_unstable();
        occluders.dedup();
        let n = points.len() as f64;
        let shape = Shape::new(fp.clone(), points);
        let grasp = shape.synthesize_grasp().ok();
        let blockers = match &grasp {
            Some(g) => self
                .scene
                .segments()
                .iter()
                .filter(|s| s.points.iter().any(|p| grasp::blocks(g, p)))
                .map(|s| s.id)
                .collect(),
            None => Vec::new(),
        };
        let slot = |id: &SegmentId| self.scene.index_of(*id).expect("ids come from the scene");
        let slots = fp.ids().iter().map(slot).collect();
        let blocker_slots = blockers.iter().map(slot).collect();
        let occluder_slots = occluders.iter().map(slot).collect();
        let planar_pts: Vec<Vector2<f64>> = shape.points.iter().map(planar).collect();
        let bbox_min = planar_pts.iter().fold(Vector2::repeat(f64::INFINITY), |a, p| a.inf(p));
        let bbox_max = planar_pts
            .iter()
            .fold(Vector2::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
        Ok(HypothesisInfo {
            fingerprint: fp.clone(),
            centroid: centroid(&shape.points).expect("non-empty"),
            grasp_key: grasp.as_ref().map(Grasp::key),
            grasp,
            blockers,
            visible_fraction: visible / n,
            red_fraction: red / n,
            is_red: red / n >= 0.5,
            signature: grasp::occlusion_signature(&occluders),
            occluders,
            slots,
            blocker_slots,
            occluder_slots,
            shape,
            bbox_min,
            bbox_max,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn model(&self) -> &ConnectionModel {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }

    pub fn hypothesis(&self, id: HypId) -> &HypothesisInfo {
        &self.hyps[id]
    }

    pub fn hypotheses(&self) -> &[HypothesisInfo] {
        &self.hyps
    }

    pub fn id_of(&self, fp: &Fingerprint) -> Option<HypId> {
        self.index.get(fp).copied()
    }

    pub fn ids_of(&self, composition: &Composition) -> Vec<HypId> {
        composition
            .hypotheses
            .iter()
            .map(|h| self.id_of(h).expect("composition hypotheses are interned"))
            .collect()
    }

    /// Quality of the grasp computed for `owner` when applied to `target`.
    /// Zero when `owner` has no grasp.
    pub fn quality(&self, owner: HypId, target: HypId) -> f64 {
        self.quality[owner].get_or_init(|| self.quality_row(owner))[target]
    }

    fn quality_row(&self, owner: HypId) -> Vec<f64> {
        match &self.hyps[owner].grasp {
            Some(g) => self.quality_for(g),
            None => vec![0.0; self.hyps.len()],
        }
    }

    /// Quality of an arbitrary grasp against every hypothesis.
    pub fn quality_for(&self, g: &Grasp) -> Vec<f64> {
        if let Some(owner) = self.id_of(&g.optimized_for) {
            if self.hyps[owner].grasp.as_ref() == Some(g) {
                if let Some(row) = self.quality[owner].get() {
                    return row.clone();
                }
            }
        }
        let Some(contacts) = self.contact_segments(g) else {
            return vec![0.0; self.hyps.len()];
        };
        let a = planar(&g.contact_a);
        let b = planar(&g.contact_b);
        let lo = a.inf(&b);
        let hi = a.sup(&b);
        self.hyps
            .iter()
            .map(|info| {
                if info.fingerprint == g.optimized_for {
                    1.0
                } else if !contacts.iter().all(|&c| info.fingerprint.contains(c)) {
                    // Fingers on two different objects cannot lift either.
                    0.0
                } else if (0..2)
                    .any(|k| hi[k] < info.bbox_min[k] - FOOTPRINT_RADIUS || lo[k] > info.bbox_max[k] + FOOTPRINT_RADIUS)
                {
                    0.0
                } else {
                    grasp::grasp_quality(g, &info.shape)
                }
            })
            .collect()
    }

    /// Segments the two contacts of `g` rest on, or `None` when one of the
    /// segments the grasp was computed for has left the scene.
    pub fn contact_segments(&self, g: &Grasp) -> Option<[SegmentId; 2]> {
        let segments: Vec<&Segment> = g
            .optimized_for
            .ids()
            .iter()
            .map(|&id| self.scene.segment(id))
            .collect::<Option<_>>()?;
        let nearest = |c: &Point| {
            segments
                .iter()
                .flat_map(|s| s.points.iter().map(move |p| (s.id, (p - c).norm_squared())))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .map(|(id, _)| id)
        };
        Some([nearest(&g.contact_a)?, nearest(&g.contact_b)?])
    }

    /// Hidden-volume report of the scene (computed once).
    pub fn hidden_volume(&self) -> Result<&HiddenVolumeReport> {
        self.hidden
            .get_or_init(|| hidden_volume(&self.scene).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::DegenerateProjection(e.clone()))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use crate::grasp::tests::box_cloud;
    use crate::scene::{Edge, SceneParts, Segment};

    /// Boxes given as (id, min, max, red_fraction); candidate edges between all
    /// consecutive ids with the given prior.
    pub(crate) fn box_scene(boxes: &[(u32, [f64; 3], [f64; 3], f64)], prior: f64) -> Scene {
        let segments: Vec<Segment> = boxes
            .iter()
            .map(|&(id, lo, hi, red)| Segment::new(id, box_cloud(lo, hi), red))
            .collect();
        let edges: Vec<Edge> = boxes.windows(2).map(|w| Edge::new(w[0].0, w[1].0)).collect();
        Scene::new(SceneParts {
            pair_prior: edges.iter().map(|e| (*e, prior)).collect(),
            candidate_edges: edges,
            segments,
            camera_origin: Point::new(-0.35, 0.0, 0.45),
            workspace: Aabb::new(Point::new(0.0, -0.25, 0.0), Point::new(0.5, 0.25, 0.3)),
            ground_truth: None,
        })
        .unwrap()
    }

    #[test]
    fn hypothesis_attributes() {
        let scene = box_scene(
            &[
                (1, [0.10, 0.00, 0.0], [0.14, 0.03, 0.03], 1.0),
                (2, [0.14, 0.00, 0.0], [0.20, 0.03, 0.03], 0.0),
            ],
            0.5,
        );
        let fps = [
            Fingerprint::from([1]),
            Fingerprint::from([2]),
            Fingerprint::from([1, 2]),
        ];
        let ctx = SceneContext::new(scene, &fps).unwrap();
        assert_eq!(ctx.len(), 3);
        let red = ctx.hypothesis(ctx.id_of(&fps[0]).unwrap());
        assert!(red.is_red);
        let both = ctx.hypothesis(2);
        assert!(!both.is_red, "the blue part has more points");
        assert!(both.grasp.is_some());
        // Own grasp has full quality; the joint grasp crosses segment 2 only partly.
        assert_eq!(ctx.quality(2, 2), 1.0);
        let q = ctx.quality(2, 1);
        assert!(q > 0.0 && q < 1.0, "{q}");
    }

    #[test]
    fn far_hypotheses_have_zero_quality() {
        let scene = box_scene(
            &[
                (1, [0.10, 0.00, 0.0], [0.14, 0.03, 0.03], 0.0),
                (2, [0.30, 0.10, 0.0], [0.34, 0.13, 0.03], 0.0),
            ],
            0.5,
        );
        let ctx = SceneContext::new(scene, &[Fingerprint::from([1]), Fingerprint::from([2])]).unwrap();
        assert_eq!(ctx.quality(0, 1), 0.0);
        assert_eq!(ctx.quality(1, 0), 0.0);
    }
}
