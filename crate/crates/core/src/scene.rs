//! Scene data model and the `composition-scene/1` file format.
//!
//! A [`Scene`] is an over-segmented view of a tabletop: segments with point
//! clouds and color attributes, the candidate direct connections between
//! segments, and a prior probability for every candidate pair to belong to the
//! same object. Everything downstream (sampling, belief, planning) reads the
//! scene through this type, so all invariants are checked once, here.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, Aabb, Point};

pub type SegmentId = u32;

pub const FORMAT_TAG: &str = "composition-scene/1";

/// Prior used for a segment pair that is not listed in `pair_prior`.
pub const DEFAULT_PAIR_PRIOR: f64 = 0.5;

/// Unordered segment pair, stored with the smaller id first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[SegmentId; 2]", into = "[SegmentId; 2]")]
pub struct Edge(SegmentId, SegmentId);

impl Edge {
    pub fn new(a: SegmentId, b: SegmentId) -> Self {
        if a <= b {
            Edge(a, b)
        } else {
            Edge(b, a)
        }
    }

    pub fn a(&self) -> SegmentId {
        self.0
    }

    pub fn b(&self) -> SegmentId {
        self.1
    }
}

impl From<[SegmentId; 2]> for Edge {
    fn from(v: [SegmentId; 2]) -> Self {
        Edge::new(v[0], v[1])
    }
}

impl From<Edge> for [SegmentId; 2] {
    fn from(e: Edge) -> Self {
        [e.0, e.1]
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.0, self.1)
    }
}

/// Sorted set of segment ids naming one object hypothesis.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fingerprint(Vec<SegmentId>);

impl Fingerprint {
    pub fn new(mut ids: Vec<SegmentId>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Fingerprint(ids)
    }

    pub fn ids(&self) -> &[SegmentId] {
        &self.0
    }

    pub fn contains(&self, id: SegmentId) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn intersects(&self, other: &Fingerprint) -> bool {
        other.0.iter().any(|id| self.contains(*id))
    }
}

impl<const N: usize> From<[SegmentId; N]> for Fingerprint {
    fn from(ids: [SegmentId; N]) -> Self {
        Fingerprint::new(ids.to_vec())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, id) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{id}")?;
        }
        write!(f, "}}")
    }
}

/// One over-segmented surface patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub id: SegmentId,
    pub points: Vec<Point>,
    pub centroid: Point,
    pub red_fraction: f64,
    /// Estimated fraction of the patch surface the camera sees.
    pub visible_fraction: f64,
    /// Segments standing between the camera and this one.
    pub occluded_by: Vec<SegmentId>,
}

impl Segment {
    pub fn new(id: SegmentId, points: Vec<Point>, red_fraction: f64) -> Self {
        let centroid = centroid(&points).unwrap_or_else(Point::origin);
        Segment {
            id,
            points,
            centroid,
            red_fraction,
            visible_fraction: 1.0,
            occluded_by: Vec::new(),
        }
    }

    pub fn max_z(&self) -> f64 {
        self.points.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A true object, known only to the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueObject {
    pub segment_ids: Vec<SegmentId>,
    pub is_red: bool,
}

/// Parts of a scene before validation.
#[derive(Clone, Debug)]
pub struct SceneParts {
    pub segments: Vec<Segment>,
    pub candidate_edges: Vec<Edge>,
    pub pair_prior: BTreeMap<Edge, f64>,
    pub camera_origin: Point,
    pub workspace: Aabb,
    pub ground_truth: Option<Vec<TrueObject>>,
}

/// A validated scene. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    segments: Vec<Segment>,
    candidate_edges: Vec<Edge>,
    pair_prior: BTreeMap<Edge, f64>,
    camera_origin: Point,
    workspace: Aabb,
    ground_truth: Option<Vec<TrueObject>>,
}

impl Scene {
    /// Validates `parts` and builds a scene. Segments are reordered by id and
    /// candidate edges are normalized and sorted.
    pub fn new(parts: SceneParts) -> Result<Self> {
        let SceneParts {
            mut segments,
            candidate_edges,
            pair_prior,
            camera_origin,
            workspace,
            ground_truth,
        } = parts;

        segments.sort_by_key(|s| s.id);
        for w in segments.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::scene("segments", format!("duplicate segment id {}", w[0].id)));
            }
        }
        for s in &segments {
            if s.points.is_empty() {
                return Err(Error::scene(
                    "segments.points",
                    format!("segment {} has no points", s.id),
                ));
            }
            if s.points.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
                return Err(Error::scene(
                    "segments.points",
                    format!("segment {} has a non-finite point", s.id),
                ));
            }
            let c = centroid(&s.points).expect("non-empty");
            if (c - s.centroid).norm() > 1e-9 {
                return Err(Error::scene(
                    "segments.centroid",
                    format!("segment {} centroid is not the mean of its points", s.id),
                ));
            }
            if !(0.0..=1.0).contains(&s.red_fraction) {
                return Err(Error::scene(
                    "segments.red_fraction",
                    format!("segment {}: {} outside [0,1]", s.id, s.red_fraction),
                ));
            }
            if !(s.visible_fraction > 0.0 && s.visible_fraction <= 1.0) {
                return Err(Error::scene(
                    "segments.visible_fraction",
                    format!("segment {}: {} outside (0,1]", s.id, s.visible_fraction),
                ));
            }
        }
        let known = |id: SegmentId| segments.binary_search_by_key(&id, |s| s.id).is_ok();
        for s in &segments {
            if let Some(bad) = s.occluded_by.iter().find(|o| !known(**o) || **o == s.id) {
                return Err(Error::scene(
                    "segments.occluded_by",
                    format!("segment {} lists invalid occluder {}", s.id, bad),
                ));
            }
        }

        let mut edges = candidate_edges;
        edges.sort_unstable();
        edges.dedup();
        for e in &edges {
            if e.a() == e.b() {
                return Err(Error::scene(
                    "candidate_edges",
                    format!("edge {e} connects a segment to itself"),
                ));
            }
            if !known(e.a()) || !known(e.b()) {
                return Err(Error::scene(
                    "candidate_edges",
                    format!("edge {e} references an unknown segment"),
                ));
            }
            if !pair_prior.contains_key(e) {
                return Err(Error::scene(
                    "pair_prior",
                    format!("missing pair_prior for candidate edge {e}"),
                ));
            }
        }
        for (e, p) in &pair_prior {
            if !(p.is_finite() && *p > 0.0 && *p < 1.0) {
                return Err(Error::scene(
                    "pair_prior",
                    format!("prior must lie strictly in (0,1), got {p} for {e}"),
                ));
            }
            if e.a() == e.b() || !known(e.a()) || !known(e.b()) {
                return Err(Error::scene(
                    "pair_prior",
                    format!("prior for {e} references an unknown pair"),
                ));
            }
        }
        if !workspace.is_valid() {
            return Err(Error::scene(
                "workspace",
                "min must be strictly below max on every axis",
            ));
        }
        if let Some(truth) = &ground_truth {
            let mut seen: Vec<SegmentId> = truth.iter().flat_map(|o| o.segment_ids.iter().copied()).collect();
            seen.sort_unstable();
            let ids: Vec<SegmentId> = segments.iter().map(|s| s.id).collect();
            if seen != ids {
                return Err(Error::scene("ground_truth", "objects must partition the segment ids"));
            }
        }
        Ok(Scene {
            segments,
            candidate_edges: edges,
            pair_prior,
            camera_origin,
            workspace,
            ground_truth,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> Option<&Segment> {
        self.index_of(id).map(|k| &self.segments[k])
    }

    /// Dense index of a segment id (position in [`Scene::segments`]).
    pub fn index_of(&self, id: SegmentId) -> Option<usize> {
        self.segments.binary_search_by_key(&id, |s| s.id).ok()
    }

    pub fn candidate_edges(&self) -> &[Edge] {
        &self.candidate_edges
    }

    pub fn pair_prior(&self) -> &BTreeMap<Edge, f64> {
        &self.pair_prior
    }

    /// `P(c_uv = 1)`; pairs without an explicit prior get [`DEFAULT_PAIR_PRIOR`].
    pub fn prior(&self, a: SegmentId, b: SegmentId) -> f64 {
        self.pair_prior
            .get(&Edge::new(a, b))
            .copied()
            .unwrap_or(DEFAULT_PAIR_PRIOR)
    }

    pub fn camera_origin(&self) -> Point {
        self.camera_origin
    }

    pub fn workspace(&self) -> &Aabb {
        &self.workspace
    }

    pub fn ground_truth(&self) -> Option<&[TrueObject]> {
        self.ground_truth.as_deref()
    }

    pub fn to_document(&self) -> SceneDocument {
        SceneDocument {
            format: FORMAT_TAG.to_string(),
            segments: self
                .segments
                .iter()
                .map(|s| SegmentRecord {
                    id: s.id,
                    points: s.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
                    red_fraction: s.red_fraction,
                    visible_fraction: Some(s.visible_fraction),
                    occluded_by: Some(s.occluded_by.clone()),
                })
                .collect(),
            candidate_edges: self.candidate_edges.iter().map(|e| [e.a(), e.b()]).collect(),
            pair_prior: self
                .pair_prior
                .iter()
                .map(|(e, p)| PriorRecord {
                    edge: [e.a(), e.b()],
                    p: *p,
                })
                .collect(),
            camera_origin: [self.camera_origin.x, self.camera_origin.y, self.camera_origin.z],
            workspace: WorkspaceRecord {
                min: [self.workspace.min.x, self.workspace.min.y, self.workspace.min.z],
                max: [self.workspace.max.x, self.workspace.max.y, self.workspace.max.z],
            },
            ground_truth: self.ground_truth.clone(),
        }
    }

    pub fn from_document(doc: SceneDocument) -> Result<Self> {
        if doc.format != FORMAT_TAG {
            return Err(Error::scene(
                "format",
                format!("expected \"{FORMAT_TAG}\", found \"{}\"", doc.format),
            ));
        }
        let explicit_occluders = doc.segments.iter().all(|s| s.occluded_by.is_some());
        let segments: Vec<Segment> = doc
            .segments
            .into_iter()
            .map(|r| {
                let points: Vec<Point> = r.points.iter().map(|p| Point::new(p[0], p[1], p[2])).collect();
                let mut s = Segment::new(r.id, points, r.red_fraction);
                s.visible_fraction = r.visible_fraction.unwrap_or(1.0);
                s.occluded_by = r.occluded_by.unwrap_or_default();
                s.occluded_by.sort_unstable();
                s.occluded_by.dedup();
                s
            })
            .collect();
        let camera_origin = Point::from(doc.camera_origin);
        let segments = if explicit_occluders {
            segments
        } else {
            infer_occluders(segments, &camera_origin)
        };
        let mut pair_prior = BTreeMap::new();
        for r in doc.pair_prior {
            let e = Edge::from(r.edge);
            if pair_prior.insert(e, r.p).is_some() {
                return Err(Error::scene("pair_prior", format!("duplicate prior for {e}")));
            }
        }
        Scene::new(SceneParts {
            segments,
            candidate_edges: doc.candidate_edges.into_iter().map(Edge::from).collect(),
            pair_prior,
            camera_origin,
            workspace: Aabb::new(Point::from(doc.workspace.min), Point::from(doc.workspace.max)),
            ground_truth: doc.ground_truth,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("scene documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SceneDocument = serde_json::from_str(text)?;
        Scene::from_document(doc)
    }
}

/// Reads and validates a scene file.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Scene::from_json(&text)
}

/// Writes a scene in the `composition-scene/1` format.
pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scene.to_json()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

// Occluder inference for files that carry raw points only: `s` occludes `t`
// when a point of `s` sits on (within half a centimeter of) the camera ray of
// a point of `t` and is at least a centimeter closer to the camera.
fn infer_occluders(mut segments: Vec<Segment>, camera: &Point) -> Vec<Segment> {
    const RAY_RADIUS: f64 = 0.005;
    const MIN_DEPTH_GAP: f64 = 0.01;
    let n = segments.len();
    let mut occluders: Vec<Vec<SegmentId>> = vec![Vec::new(); n];
    for t in 0..n {
        for s in 0..n {
            if s == t {
                continue;
            }
            let hit = segments[t].points.iter().any(|pt| {
                let ray = pt - camera;
                let len = ray.norm();
                if len < 1e-12 {
                    return false;
                }
                let dir = ray / len;
                segments[s].points.iter().any(|ps| {
                    let v = ps - camera;
                    let along = v.dot(&dir);
                    along > 0.0 && along < len - MIN_DEPTH_GAP && (v - dir * along).norm() < RAY_RADIUS
                })
            });
            if hit {
                occluders[t].push(segments[s].id);
            }
        }
    }
    for (seg, occ) in segments.iter_mut().zip(occluders) {
        seg.occluded_by = occ;
    }
    segments
}

/// Wire form of a scene file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneDocument {
    pub format: String,
    pub segments: Vec<SegmentRecord>,
    pub candidate_edges: Vec<[SegmentId; 2]>,
    pub pair_prior: Vec<PriorRecord>,
    pub camera_origin: [f64; 3],
    pub workspace: WorkspaceRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<TrueObject>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: SegmentId,
    pub points: Vec<[f64; 3]>,
    pub red_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occluded_by: Option<Vec<SegmentId>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorRecord {
    pub edge: [SegmentId; 2],
    pub p: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkspaceRecord {
    pub min: [f64; 3],
    pub max: [f64; 3],
}
