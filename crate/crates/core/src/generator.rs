//! Synthetic tabletop worlds: box-shaped objects split into segments, with
//! stacking, adjacent clutter, two-tone objects and objects hidden behind
//! others. A [`TrueWorld`] knows the truth; it emits [`Scene`] views that
//! carry only what perception would deliver.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{surface_points, Aabb, Point};
use crate::grasp::{blocked, grasp_quality, occlusion_signature, success_probability, GraspAction, Location, Shape};
use crate::rng::{derive_seed, stream_rng};
use crate::scene::{Edge, Fingerprint, Scene, SceneParts, Segment, SegmentId, TrueObject};

/// Camera and workspace used for generated worlds.
pub const CAMERA: [f64; 3] = [-0.35, 0.0, 0.45];
pub const WORKSPACE_MIN: [f64; 3] = [0.0, -0.25, 0.0];
pub const WORKSPACE_MAX: [f64; 3] = [0.5, 0.25, 0.3];
/// Surface sampling step of generated objects.
pub const SURFACE_STEP: f64 = 0.005;
const PRIOR_CLAMP: f64 = 1e-4;
// Planar region objects are placed in.
const REGION_MIN: [f64; 2] = [0.08, -0.2];
const REGION_MAX: [f64; 2] = [0.46, 0.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Inclusive range of objects standing on the table.
    pub objects: [usize; 2],
    pub segments_per_object: [usize; 2],
    pub red_probability: f64,
    /// Probability that an object is placed touching an earlier one.
    pub clutter: f64,
    pub stack_probability: f64,
    /// Probability that a non-red object carries one red end segment.
    pub two_tone_probability: f64,
    /// Inclusive range of objects hidden behind visible ones.
    pub hidden_objects: [usize; 2],
    pub hidden_red_probability: f64,
    /// Same-object priors are `sigmoid(bias + noise * z)`, others `sigmoid(-bias + noise * z)`.
    pub prior_bias: f64,
    pub prior_noise: f64,
    /// Segments closer than this are candidates for a direct connection.
    pub contact_gap: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            objects: [4, 7],
            segments_per_object: [1, 3],
            red_probability: 0.35,
            clutter: 0.7,
            stack_probability: 0.25,
            two_tone_probability: 0.25,
            hidden_objects: [0, 2],
            hidden_red_probability: 0.5,
            prior_bias: 1.0,
            prior_noise: 1.0,
            contact_gap: 0.012,
        }
    }
}

impl GeneratorConfig {
    /// Object-search scenes: always at least one hidden object.
    pub fn object_search() -> Self {
        GeneratorConfig {
            hidden_objects: [1, 2],
            ..GeneratorConfig::default()
        }
    }

    /// Plain scenes without stacking, two-tone objects or hidden objects.
    pub fn simple(objects: usize, segments: usize) -> Self {
        GeneratorConfig {
            objects: [objects, objects],
            segments_per_object: [segments, segments],
            clutter: 0.0,
            stack_probability: 0.0,
            two_tone_probability: 0.0,
            hidden_objects: [0, 0],
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [usize; 2], min: usize| {
            if r[0] < min || r[0] > r[1] {
                Err(Error::InvalidConfig(format!("{name} range {r:?} is infeasible")))
            } else {
                Ok(())
            }
        };
        range("objects", self.objects, 1)?;
        range("segments_per_object", self.segments_per_object, 1)?;
        range("hidden_objects", self.hidden_objects, 0)?;
        for (name, p) in [
            ("red_probability", self.red_probability),
            ("clutter", self.clutter),
            ("stack_probability", self.stack_probability),
            ("two_tone_probability", self.two_tone_probability),
            ("hidden_red_probability", self.hidden_red_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.prior_noise < 0.0 || !self.prior_bias.is_finite() || self.contact_gap < 0.0 {
            return Err(Error::InvalidConfig(
                "prior_noise and contact_gap must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A segment of a true object.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueSegment {
    pub id: SegmentId,
    pub points: Vec<Point>,
    pub red_fraction: f64,
    pub bounds: Aabb,
    pub object: usize,
}

/// Result of executing one grasp in the true world.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub succeeded: bool,
    /// Object the fingers closed on, if both contacts touched the same one.
    pub object: Option<usize>,
    /// True segments that left the table.
    pub moved: Option<Fingerprint>,
    pub success_probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldObject {
    /// Indices into [`TrueWorld::segments`].
    pub segments: Vec<usize>,
    pub is_red: bool,
    pub location: Location,
    /// Object this one is hidden behind while that object is on the table.
    pub hidden_behind: Option<usize>,
    /// `(grasp digest, occlusion signature)` pairs that already failed.
    pub failed: Vec<(u64, u64)>,
}

/// How a world assigns pair priors to each view.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorModel {
    /// Fresh noise on every view.
    Noisy { bias: f64, noise: f64, contact_gap: f64 },
    /// Candidate edges and priors fixed by a scene file.
    Fixed {
        edges: Vec<Edge>,
        priors: BTreeMap<Edge, f64>,
    },
}

/// Ground truth of a simulated tabletop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueWorld {
    pub segments: Vec<TrueSegment>,
    pub objects: Vec<WorldObject>,
    pub camera: Point,
    pub workspace: Aabb,
    pub priors: PriorModel,
    pub seed: u64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bounds_of(points: &[Point]) -> Aabb {
    let mut min = Point::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut max = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        min = min.inf(p);
        max = max.sup(p);
    }
    Aabb::new(min, max)
}

// Planar footprint overlap with a separation margin.
fn overlaps(a: &Aabb, b: &Aabb, margin: f64) -> bool {
    (0..2).all(|k| a.min[k] < b.max[k] + margin && b.min[k] < a.max[k] + margin)
}

struct Placed {
    bounds: Aabb,
    /// Split direction (0 = x, 1 = y) and segment count.
    axis: usize,
    parts: usize,
    red: Red,
    hidden_behind: Option<usize>,
    stacked_on: Option<usize>,
}

#[derive(Clone, Copy, PartialEq)]
enum Red {
    No,
    Yes,
    /// Non-red object with one red end segment.
    TwoTone,
}

impl TrueWorld {
    /// Random world; deterministic given `seed`.
    pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(config.objects[0]..=config.objects[1]);
        let mut placed: Vec<Placed> = Vec::new();
        let in_region = |b: &Aabb| {
            b.min.x >= REGION_MIN[0] && b.min.y >= REGION_MIN[1] && b.max.x <= REGION_MAX[0] && b.max.y <= REGION_MAX[1]
        };
        let free = |placed: &[Placed], b: &Aabb| {
            placed
                .iter()
                .filter(|p| p.stacked_on.is_none())
                .all(|p| !overlaps(&p.bounds, b, 0.0))
        };

        for _ in 0..n {
            let parts = rng.random_range(config.segments_per_object[0]..=config.segments_per_object[1]);
            let red = if rng.random::<f64>() < config.red_probability {
                Red::Yes
            } else if rng.random::<f64>() < config.two_tone_probability {
                Red::TwoTone
            } else {
                Red::No
            };
            let parts = if red == Red::TwoTone { parts.max(3) } else { parts };
            let stack = !placed.is_empty() && rng.random::<f64>() < config.stack_probability;
            if stack {
                if let Some(b) = pick_stack_base(&placed, &mut rng) {
                    let under = placed[b].bounds;
                    let len = [under.max.x - under.min.x, under.max.y - under.min.y];
                    let axis = if len[0] >= len[1] { 0 } else { 1 };
                    let size = [len[0] * 0.7, len[1] * 0.7];
                    let c = under.center();
                    let h = rng.random_range(0.015..0.03);
                    let bounds = Aabb::new(
                        Point::new(c.x - size[0] / 2.0, c.y - size[1] / 2.0, under.max.z),
                        Point::new(c.x + size[0] / 2.0, c.y + size[1] / 2.0, under.max.z + h),
                    );
                    placed.push(Placed {
                        bounds,
                        axis,
                        parts: parts.min(2),
                        red: if red == Red::TwoTone { Red::No } else { red },
                        hidden_behind: None,
                        stacked_on: Some(b),
                    });
                    continue;
                }
            }
            let min_long = 0.022 * parts as f64;
            let long = rng.random_range(min_long.max(0.04)..min_long.max(0.04) + 0.03);
            let short = rng.random_range(0.03..0.045);
            let h = rng.random_range(0.02..0.04);
            let axis = rng.random_range(0..2usize);
            let size = if axis == 0 { [long, short] } else { [short, long] };
            let mut chosen = None;
            for _ in 0..60 {
                let ground: Vec<usize> = (0..placed.len()).filter(|&k| placed[k].stacked_on.is_none()).collect();
                let corner = if !ground.is_empty() && rng.random::<f64>() < config.clutter {
                    let anchor = placed[ground[rng.random_range(0..ground.len())]].bounds;
                    let gap = rng.random_range(0.0..0.008);
                    let side = rng.random_range(0..4);
                    let along = |k: usize, rng: &mut ChaCha8Rng| {
                        rng.random_range(anchor.min[k] - size[k] * 0.5..anchor.max[k] - size[k] * 0.5)
                    };
                    match side {
                        0 => [anchor.max.x + gap, along(1, &mut rng)],
                        1 => [anchor.min.x - gap - size[0], along(1, &mut rng)],
                        2 => [along(0, &mut rng), anchor.max.y + gap],
                        _ => [along(0, &mut rng), anchor.min.y - gap - size[1]],
                    }
                } else {
                    [
                        rng.random_range(REGION_MIN[0]..REGION_MAX[0] - size[0]),
                        rng.random_range(REGION_MIN[1]..REGION_MAX[1] - size[1]),
                    ]
                };
                let b = Aabb::new(
                    Point::new(corner[0], corner[1], 0.0),
                    Point::new(corner[0] + size[0], corner[1] + size[1], h),
                );
                if in_region(&b) && free(&placed, &b) {
                    chosen = Some(b);
                    break;
                }
            }
            if let Some(bounds) = chosen {
                placed.push(Placed {
                    bounds,
                    axis,
                    parts,
                    red,
                    hidden_behind: None,
                    stacked_on: None,
                });
            }
        }
        if placed.is_empty() {
            return Err(Error::InvalidConfig("no object could be placed".into()));
        }

        let hidden = rng.random_range(config.hidden_objects[0]..=config.hidden_objects[1]);
        for _ in 0..hidden {
            let candidates: Vec<usize> = (0..placed.len())
                .filter(|&k| placed[k].stacked_on.is_none() && placed[k].hidden_behind.is_none())
                .filter(|&k| !placed.iter().any(|p| p.hidden_behind == Some(k)))
                .collect();
            let mut done = false;
            for _ in 0..candidates.len() {
                let k = candidates[rng.random_range(0..candidates.len())];
                let front = placed[k].bounds;
                let height = (front.max.z * 0.5).min(0.015);
                let cy = front.center().y;
                let b = Aabb::new(
                    Point::new(front.max.x + 0.004, cy - 0.0125, 0.0),
                    Point::new(front.max.x + 0.034, cy + 0.0125, height),
                );
                if in_region(&b) && free(&placed, &b) {
                    let red = if rng.random::<f64>() < config.hidden_red_probability {
                        Red::Yes
                    } else {
                        Red::No
                    };
                    placed.push(Placed {
                        bounds: b,
                        axis: 0,
                        parts: 1,
                        red,
                        hidden_behind: Some(k),
                        stacked_on: None,
                    });
                    done = true;
                    break;
                }
            }
            if !done {
                break;
            }
        }

        let mut segments = Vec::new();
        let mut objects = Vec::new();
        for (k, p) in placed.iter().enumerate() {
            let cloud = surface_points(&p.bounds, SURFACE_STEP);
            let lo = p.bounds.min[p.axis];
            let width = (p.bounds.max[p.axis] - lo) / p.parts as f64;
            let mut parts: Vec<Vec<Point>> = vec![Vec::new(); p.parts];
            for q in cloud {
                let slot = (((q[p.axis] - lo) / width).floor() as usize).min(p.parts - 1);
                parts[slot].push(q);
            }
            let mut ids = Vec::new();
            for (s, points) in parts.into_iter().enumerate() {
                let red_fraction = match p.red {
                    Red::Yes => 1.0,
                    Red::TwoTone if s == 0 => 1.0,
                    _ => 0.0,
                };
                ids.push(segments.len());
                segments.push(TrueSegment {
                    id: segments.len() as SegmentId + 1,
                    bounds: bounds_of(&points),
                    points,
                    red_fraction,
                    object: k,
                });
            }
            objects.push(WorldObject {
                segments: ids,
                is_red: p.red == Red::Yes,
                location: Location::Table,
                hidden_behind: p.hidden_behind,
                failed: Vec::new(),
            });
        }
        Ok(TrueWorld {
            segments,
            objects,
            camera: Point::from(CAMERA),
            workspace: Aabb::new(Point::from(WORKSPACE_MIN), Point::from(WORKSPACE_MAX)),
            priors: PriorModel::Noisy {
                bias: config.prior_bias,
                noise: config.prior_noise,
                contact_gap: config.contact_gap,
            },
            seed,
        })
    }

    /// World reconstructed from a scene file with ground truth. Priors stay
    /// as given; there are no hidden objects.
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let truth = scene
            .ground_truth()
            .ok_or_else(|| Error::scene("ground_truth", "the simulator needs ground-truth objects"))?;
        let mut segments = Vec::new();
        let mut objects = Vec::new();
        for (k, obj) in truth.iter().enumerate() {
            let mut ids = Vec::new();
            for &id in &obj.segment_ids {
                let seg = scene
                    .segment(id)
                    .ok_or_else(|| Error::scene("ground_truth", format!("unknown segment {id}")))?;
                ids.push(segments.len());
                segments.push(TrueSegment {
                    id,
                    bounds: bounds_of(&seg.points),
                    points: seg.points.clone(),
                    red_fraction: seg.red_fraction,
                    object: k,
                });
            }
            objects.push(WorldObject {
                segments: ids,
                is_red: obj.is_red,
                location: Location::Table,
                hidden_behind: None,
                failed: Vec::new(),
            });
        }
        Ok(TrueWorld {
            segments,
            objects,
            camera: scene.camera_origin(),
            workspace: *scene.workspace(),
            priors: PriorModel::Fixed {
                edges: scene.candidate_edges().to_vec(),
                priors: scene.pair_prior().clone(),
            },
            seed: 0,
        })
    }

    /// Is object `k` on the table and seen by the camera?
    pub fn is_visible(&self, k: usize) -> bool {
        let obj = &self.objects[k];
        obj.location == Location::Table
            && obj
                .hidden_behind
                .is_none_or(|front| self.objects[front].location != Location::Table)
    }

    /// Objects still on the table, hidden or not.
    pub fn on_table(&self) -> usize {
        self.objects.iter().filter(|o| o.location == Location::Table).count()
    }

    pub fn visible_objects(&self) -> Vec<usize> {
        (0..self.objects.len()).filter(|&k| self.is_visible(k)).collect()
    }

    pub fn fingerprint(&self, k: usize) -> Fingerprint {
        Fingerprint::new(self.objects[k].segments.iter().map(|&s| self.segments[s].id).collect())
    }

    /// Reward so far in object search: red objects in the red box minus
    /// non-red ones.
    pub fn red_box_score(&self) -> f64 {
        self.objects
            .iter()
            .filter(|o| o.location == Location::RedBox)
            .map(|o| if o.is_red { 1.0 } else { -1.0 })
            .sum()
    }

    /// Executes `action`, planned on `view`, against the true objects.
    /// Success probability is the grasp quality on the true object times the
    /// occlusion factor of its true visibility, scaled by `multiplier`; zero
    /// when blocked or when the same grasp already failed under the same
    /// occlusion.
    pub fn step(
        &mut self,
        action: &GraspAction,
        view: &Scene,
        multiplier: f64,
        rng: &mut impl Rng,
    ) -> Result<StepResult> {
        for &id in action.grasp.optimized_for.ids() {
            if view.segment(id).is_none() {
                return Err(Error::StaleAction(id));
            }
        }
        let failed = StepResult {
            succeeded: false,
            object: None,
            moved: None,
            success_probability: 0.0,
        };
        let touched = |c: &Point| {
            view.segments()
                .iter()
                .flat_map(|s| s.points.iter().map(move |p| (s.id, (p - c).norm_squared())))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(id, _)| self.object_of_segment(id))
        };
        let (Some(Some(a)), Some(Some(b))) = (touched(&action.grasp.contact_a), touched(&action.grasp.contact_b))
        else {
            return Ok(failed);
        };
        if a != b {
            return Ok(failed);
        }
        let target = a;
        let obstacles = (0..self.objects.len())
            .filter(|&k| k != target && self.objects[k].location == Location::Table)
            .flat_map(|k| self.objects[k].segments.iter())
            .flat_map(|&s| self.segments[s].points.iter());
        let is_blocked = blocked(&action.grasp, obstacles);
        let own: Vec<&Segment> = self.objects[target]
            .segments
            .iter()
            .filter_map(|&s| view.segment(self.segments[s].id))
            .collect();
        let total: usize = own.iter().map(|s| s.points.len()).sum();
        let visible = own
            .iter()
            .map(|s| s.visible_fraction * s.points.len() as f64)
            .sum::<f64>()
            / total.max(1) as f64;
        let fingerprint = self.fingerprint(target);
        let occluders: Vec<SegmentId> = own
            .iter()
            .flat_map(|s| s.occluded_by.iter().copied())
            .filter(|&o| !fingerprint.contains(o))
            .collect();
        let key = (action.grasp.key().digest(), occlusion_signature(&occluders));
        let points: Vec<Point> = self.objects[target]
            .segments
            .iter()
            .flat_map(|&s| self.segments[s].points.iter().copied())
            .collect();
        let quality = grasp_quality(&action.grasp, &Shape::new(fingerprint.clone(), points));
        let repeated = self.objects[target].failed.contains(&key);
        let p = (success_probability(quality, visible, is_blocked, repeated) * multiplier).clamp(0.0, 1.0);
        let succeeded = rng.random::<f64>() < p;
        if succeeded {
            self.objects[target].location = action.destination;
        } else if !self.objects[target].failed.contains(&key) {
            self.objects[target].failed.push(key);
        }
        Ok(StepResult {
            succeeded,
            object: Some(target),
            moved: succeeded.then_some(fingerprint),
            success_probability: p,
        })
    }

    fn object_of_segment(&self, id: SegmentId) -> Option<usize> {
        self.segments.iter().find(|s| s.id == id).map(|s| s.object)
    }

    /// The perception output at step `step`: visible segments with visibility
    /// estimates, candidate edges and freshly noised priors.
    pub fn view(&self, step: u64) -> Result<Scene> {
        let visible = self.visible_objects();
        let seg_idx: Vec<usize> = visible
            .iter()
            .flat_map(|&k| self.objects[k].segments.iter().copied())
            .collect();
        let mut order = seg_idx.clone();
        order.sort_by_key(|&s| self.segments[s].id);
        let mut segments = Vec::with_capacity(order.len());
        for &s in &order {
            let seg = &self.segments[s];
            let mut blockers = Vec::new();
            let mut hidden = 0usize;
            for p in &seg.points {
                let mut blocked = false;
                for &o in &order {
                    if o != s && self.segments[o].bounds.blocks_segment(p, &self.camera) {
                        blocked = true;
                        if !blockers.contains(&self.segments[o].id) {
                            blockers.push(self.segments[o].id);
                        }
                    }
                }
                hidden += usize::from(blocked);
            }
            // The camera cannot report a segment it does not see at all.
            if hidden == seg.points.len() {
                continue;
            }
            blockers.sort_unstable();
            let mut out = Segment::new(seg.id, seg.points.clone(), seg.red_fraction);
            out.visible_fraction = 1.0 - hidden as f64 / seg.points.len() as f64;
            out.occluded_by = blockers;
            segments.push(out);
        }
        let (candidate_edges, pair_prior) = match &self.priors {
            PriorModel::Fixed { edges, priors } => {
                let present = |id: SegmentId| segments.iter().any(|s| s.id == id);
                let edges: Vec<Edge> = edges
                    .iter()
                    .copied()
                    .filter(|e| present(e.a()) && present(e.b()))
                    .collect();
                let priors = edges.iter().map(|e| (*e, priors[e])).collect();
                (edges, priors)
            }
            PriorModel::Noisy {
                bias,
                noise,
                contact_gap,
            } => {
                let mut rng = stream_rng(derive_seed(self.seed, &[step]), 0);
                let mut edges = Vec::new();
                let mut priors = BTreeMap::new();
                let seen: Vec<usize> = order
                    .iter()
                    .copied()
                    .filter(|&s| segments.iter().any(|out| out.id == self.segments[s].id))
                    .collect();
                for (i, &a) in seen.iter().enumerate() {
                    for &b in &seen[i + 1..] {
                        let (sa, sb) = (&self.segments[a], &self.segments[b]);
                        if sa.bounds.gap(&sb.bounds) > *contact_gap {
                            continue;
                        }
                        let z: f64 = rng.sample(StandardNormal);
                        let sign = if sa.object == sb.object { 1.0 } else { -1.0 };
                        let p = sigmoid(sign * bias + noise * z).clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
                        let e = Edge::new(sa.id, sb.id);
                        edges.push(e);
                        priors.insert(e, p);
                    }
                }
                (edges, priors)
            }
        };
        let ground_truth = visible
            .iter()
            .filter_map(|&k| {
                let segment_ids: Vec<SegmentId> = self
                    .fingerprint(k)
                    .ids()
                    .iter()
                    .copied()
                    .filter(|&id| segments.iter().any(|s| s.id == id))
                    .collect();
                (!segment_ids.is_empty()).then(|| TrueObject {
                    segment_ids,
                    is_red: self.objects[k].is_red,
                })
            })
            .collect();
        Scene::new(SceneParts {
            segments,
            candidate_edges,
            pair_prior,
            camera_origin: self.camera,
            workspace: self.workspace,
            ground_truth: Some(ground_truth),
        })
    }
}

// A ground object with nothing on it yet, chosen uniformly.
fn pick_stack_base(placed: &[Placed], rng: &mut impl Rng) -> Option<usize> {
    let free: Vec<usize> = (0..placed.len())
        .filter(|&k| placed[k].stacked_on.is_none() && !placed.iter().any(|q| q.stacked_on == Some(k)))
        .collect();
    (!free.is_empty()).then(|| free[rng.random_range(0..free.len())])
}

/// Scene view of a freshly generated world, ground truth included.
pub fn generate_scene(config: &GeneratorConfig, seed: u64) -> Result<Scene> {
    TrueWorld::generate(config, seed)?.view(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::{ConnectionModel, EdgeAssignment};

    #[test]
    fn counts_follow_the_config() {
        let scene = generate_scene(&GeneratorConfig::simple(3, 2), 1).unwrap();
        assert_eq!(scene.segments().len(), 6);
        assert_eq!(scene.ground_truth().unwrap().len(), 3);
    }

    #[test]
    fn same_seed_same_scene() {
        let config = GeneratorConfig::object_search();
        let a = generate_scene(&config, 9).unwrap().to_json();
        let b = generate_scene(&config, 9).unwrap().to_json();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(&config, 10).unwrap().to_json());
    }

    #[test]
    fn noiseless_priors_separate_objects() {
        let config = GeneratorConfig {
            prior_noise: 0.0,
            ..GeneratorConfig::default()
        };
        for seed in 0..10 {
            let scene = generate_scene(&config, seed).unwrap();
            let truth = scene.ground_truth().unwrap();
            let object_of = |id| truth.iter().position(|o| o.segment_ids.contains(&id)).unwrap();
            for (e, &p) in scene.pair_prior() {
                if object_of(e.a()) == object_of(e.b()) {
                    assert!(p > 0.5);
                } else {
                    assert!(p < 0.5);
                }
            }
        }
    }

    // Partition score of an edge assignment: the product over candidate pairs
    // of the prior of the pair's same-object status.
    fn partition_score(scene: &Scene, labels: &[usize]) -> f64 {
        scene
            .pair_prior()
            .iter()
            .map(|(e, &p)| {
                let same = labels[scene.index_of(e.a()).unwrap()] == labels[scene.index_of(e.b()).unwrap()];
                if same {
                    p
                } else {
                    1.0 - p
                }
            })
            .product()
    }

    #[test]
    fn noiseless_map_composition_is_the_truth() {
        let config = GeneratorConfig {
            objects: [2, 4],
            segments_per_object: [1, 2],
            prior_noise: 0.0,
            hidden_objects: [0, 0],
            ..GeneratorConfig::default()
        };
        let mut checked = 0;
        for seed in 0..40 {
            let scene = generate_scene(&config, seed).unwrap();
            if scene.segments().len() > 8 || scene.candidate_edges().len() > 14 {
                continue;
            }
            checked += 1;
            let model = ConnectionModel::new(&scene);
            let e = model.edge_count();
            let best = (0u32..1 << e)
                .map(|m| EdgeAssignment::from_bits((0..e).map(|k| m >> k & 1 == 1)))
                .map(|a| {
                    let labels = model.labels(&a);
                    (partition_score(&scene, &labels), a)
                })
                .max_by(|x, y| x.0.total_cmp(&y.0))
                .unwrap()
                .1;
            let map = model.components(&best);
            let mut truth: Vec<Fingerprint> = scene
                .ground_truth()
                .unwrap()
                .iter()
                .map(|o| Fingerprint::new(o.segment_ids.clone()))
                .collect();
            truth.sort_by_key(|f| f.ids()[0]);
            assert_eq!(map.hypotheses, truth, "seed {seed}");
        }
        assert!(checked >= 20, "only {checked} small scenes");
    }

    #[test]
    fn hidden_objects_appear_after_their_occluder_leaves() {
        let config = GeneratorConfig {
            hidden_objects: [1, 1],
            ..GeneratorConfig::default()
        };
        let (world, hidden) = (0..50)
            .find_map(|seed| {
                let w = TrueWorld::generate(&config, seed).unwrap();
                let h = w.objects.iter().position(|o| o.hidden_behind.is_some())?;
                Some((w, h))
            })
            .unwrap();
        let front = world.objects[hidden].hidden_behind.unwrap();
        let ids = world.fingerprint(hidden);
        let before = world.view(0).unwrap();
        assert!(ids.ids().iter().all(|&id| before.segment(id).is_none()));
        let mut after = world.clone();
        after.objects[front].location = Location::Removed;
        let view = after.view(1).unwrap();
        assert!(ids.ids().iter().all(|&id| view.segment(id).is_some()));
    }

    #[test]
    fn stacked_tops_occlude_nothing_below_but_are_candidates() {
        let config = GeneratorConfig {
            stack_probability: 1.0,
            objects: [2, 2],
            hidden_objects: [0, 0],
            ..GeneratorConfig::default()
        };
        let world = TrueWorld::generate(&config, 3).unwrap();
        let scene = world.view(0).unwrap();
        let top = &world.objects[1];
        let bottom = &world.objects[0];
        let t = world.segments[top.segments[0]].id;
        assert!(bottom
            .segments
            .iter()
            .any(|&b| scene.candidate_edges().contains(&Edge::new(world.segments[b].id, t))));
    }

    #[test]
    fn views_are_valid_scenes() {
        // Enough seeds to include segments hidden entirely by ray casting.
        for seed in 0..300 {
            let world = TrueWorld::generate(&GeneratorConfig::object_search(), seed).unwrap();
            let scene = world.view(0).unwrap();
            for s in scene.segments() {
                assert!(s.visible_fraction > 0.0 && s.visible_fraction <= 1.0);
                assert!(!s.points.is_empty());
                assert!(s.points.iter().all(|p| scene.workspace().contains(p)));
            }
            let round = Scene::from_json(&scene.to_json()).unwrap();
            assert_eq!(round.to_json(), scene.to_json());
        }
    }

    fn grasp_of(world: &TrueWorld, k: usize) -> GraspAction {
        let points: Vec<Point> = world.objects[k]
            .segments
            .iter()
            .flat_map(|&s| world.segments[s].points.iter().copied())
            .collect();
        GraspAction {
            grasp: crate::grasp::synthesize_grasp(&world.fingerprint(k), &points).unwrap(),
            destination: Location::Removed,
        }
    }

    #[test]
    fn own_grasp_on_a_lone_object_succeeds_often() {
        let world = TrueWorld::generate(&GeneratorConfig::simple(1, 2), 4).unwrap();
        let view = world.view(0).unwrap();
        let action = grasp_of(&world, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wins = (0..200)
            .filter(|_| world.clone().step(&action, &view, 1.0, &mut rng).unwrap().succeeded)
            .count();
        assert!(wins > 150, "{wins}");
        let mut w = world.clone();
        let r = loop {
            let r = w.step(&action, &view, 1.0, &mut rng).unwrap();
            if r.succeeded {
                break r;
            }
        };
        assert_eq!(r.moved, Some(world.fingerprint(0)));
        assert_eq!(w.objects[0].location, Location::Removed);
        assert_eq!(w.on_table(), 0);
    }

    #[test]
    fn repeated_failure_is_remembered() {
        let world = TrueWorld::generate(&GeneratorConfig::simple(1, 1), 2).unwrap();
        let view = world.view(0).unwrap();
        let action = grasp_of(&world, 0);
        let mut w = world.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let first = w.step(&action, &view, 0.0, &mut rng).unwrap();
        assert!(!first.succeeded);
        let second = w.step(&action, &view, 1.0, &mut rng).unwrap();
        assert_eq!(second.success_probability, 0.0);
    }

    #[test]
    fn stale_actions_are_rejected() {
        let world = TrueWorld::generate(&GeneratorConfig::simple(2, 1), 2).unwrap();
        let action = grasp_of(&world, 0);
        let mut gone = world.clone();
        gone.objects[0].location = Location::Removed;
        let view = gone.view(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            gone.step(&action, &view, 1.0, &mut rng),
            Err(Error::StaleAction(_))
        ));
    }
}
