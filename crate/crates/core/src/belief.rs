//! Weighted particle beliefs over world states.
//!
//! Each composition sample becomes one particle. Particle weights come from
//! the grasp history, attributes from the segments, and optional hidden
//! objects from the occlusion geometry.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::composition::Composition;
use crate::error::{Error, Result};
use crate::grasp::{occlusion_success, Grasp, GraspKey, Location};
use crate::hypothesis::{HypId, SceneContext};
use crate::occlusion::HiddenVolumeReport;
use crate::rng::stream_rng;
use crate::scene::{Fingerprint, SegmentId};

/// Bounds of the prior probability that a hidden object is red.
pub const RED_PRIOR_MIN: f64 = 0.2;
pub const RED_PRIOR_MAX: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

/// One executed grasp as remembered by the robot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspRecord {
    pub grasp: Grasp,
    pub outcome: Outcome,
    /// Signature of the occluders of the grasped hypothesis at execution time.
    pub occlusion_signature: u64,
    /// Segments inside the clearance cylinders at execution time.
    #[serde(default)]
    pub blockers: Vec<SegmentId>,
    /// Segments that left the table on success.
    #[serde(default)]
    pub moved: Option<Fingerprint>,
}

impl GraspRecord {
    pub fn key(&self) -> (GraspKey, u64) {
        (self.grasp.key(), self.occlusion_signature)
    }

    pub fn optimized_for(&self) -> &Fingerprint {
        &self.grasp.optimized_for
    }

    /// Would the recorded grasp have been blocked for hypothesis `h`?
    pub fn blocked_for(&self, h: &Fingerprint) -> bool {
        self.blockers.iter().any(|b| !h.contains(*b))
    }
}

/// Unique executed grasps: a repeat of the same grasp under the same
/// occlusion adds nothing and is dropped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct History {
    records: Vec<GraspRecord>,
}

impl History {
    pub fn new() -> Self {
        History::default()
    }

    /// Adds a record unless an identical (grasp, signature) pair is present.
    /// Returns whether the record was added.
    pub fn push(&mut self, record: GraspRecord) -> bool {
        let key = record.key();
        if self.records.iter().any(|r| r.key() == key) {
            return false;
        }
        self.records.push(record);
        true
    }

    pub fn records(&self) -> &[GraspRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl FromIterator<GraspRecord> for History {
    fn from_iter<I: IntoIterator<Item = GraspRecord>>(iter: I) -> Self {
        let mut h = History::new();
        for r in iter {
            h.push(r);
        }
        h
    }
}

/// Weight of a composition given the grasp history.
///
/// `p_succ(record, h)` is the success probability the recorded grasp had on
/// hypothesis `h`. A failure contributes `1 - p_succ` for every hypothesis.
/// A success needs the moved segments to form one hypothesis, which then
/// contributes `p_succ`; a composition that splits or extends the moved
/// segments gets weight 0. Moved segments absent from the composition (they
/// already left the scene) contribute 1.
pub fn composition_weight<F>(hypotheses: &[Fingerprint], history: &History, mut p_succ: F) -> f64
where
    F: FnMut(&GraspRecord, &Fingerprint) -> f64,
{
    let records = history.records();
    weight_by_index(hypotheses, history, |k, h| p_succ(&records[k], h))
}

// `composition_weight` with records identified by their history index.
fn weight_by_index<F>(hypotheses: &[Fingerprint], history: &History, mut p_succ: F) -> f64
where
    F: FnMut(usize, &Fingerprint) -> f64,
{
    let mut weight = 1.0;
    for (k, record) in history.records().iter().enumerate() {
        match record.outcome {
            Outcome::Failure => {
                for h in hypotheses {
                    weight *= 1.0 - p_succ(k, h);
                }
            }
            Outcome::Success => {
                let Some(moved) = &record.moved else { continue };
                if let Some(h) = hypotheses.iter().find(|h| *h == moved) {
                    weight *= p_succ(k, h);
                } else if hypotheses.iter().any(|h| h.intersects(moved)) {
                    return 0.0;
                }
            }
        }
        if weight == 0.0 {
            return 0.0;
        }
    }
    weight
}

/// Success probability a recorded grasp had on a hypothesis of the current view.
pub fn recorded_success(quality: f64, visible_fraction: f64, record: &GraspRecord, h: &Fingerprint) -> f64 {
    if record.blocked_for(h) {
        0.0
    } else {
        quality * occlusion_success(visible_fraction)
    }
}

/// Expected number of hidden objects behind each hypothesis.
///
/// The occupancy density is `n_objects / V_visible` with `n_objects` clamped
/// to at least 1; each hypothesis contributes the hidden volume of its segments.
pub fn expected_hidden_objects<'a>(
    hv: &HiddenVolumeReport,
    hypotheses: impl IntoIterator<Item = &'a Fingerprint>,
    n_objects: f64,
) -> Result<Vec<f64>> {
    if hv.v_visible <= 0.0 || !hv.v_visible.is_finite() {
        return Err(Error::NoVisibleVolume(hv.v_visible));
    }
    let density = n_objects.max(1.0) / hv.v_visible;
    Ok(hypotheses
        .into_iter()
        .map(|h| density * hv.hidden_behind(h.ids()))
        .collect())
}

/// Probability of one hidden object behind an occluder expecting `n` objects:
/// `1 - Phi((1 - n) / sqrt(n / 4))`, and 0 for `n <= 0`.
pub fn hidden_object_probability(n: f64) -> f64 {
    if n <= 0.0 || !n.is_finite() {
        return 0.0;
    }
    let z = (1.0 - n) / (n / 4.0).sqrt();
    1.0 - Normal::standard().cdf(z)
}

/// Red prior for hidden objects from the mean fraction of red visible objects.
pub fn red_prior(mean_red_fraction: f64) -> f64 {
    RED_PRIOR_MIN + (RED_PRIOR_MAX - RED_PRIOR_MIN) * mean_red_fraction.clamp(0.0, 1.0)
}

/// Identity of a failed grasp under one occlusion configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FailureKey {
    pub grasp: u64,
    pub signature: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    /// A hypothesis of the current view.
    Visible { hyp: HypId },
    /// A hallucinated object behind the object at index `parent`.
    Hidden { parent: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectState {
    pub kind: ObjectKind,
    pub location: Location,
    pub is_red: bool,
    pub failed: Vec<FailureKey>,
    pub visible_fraction: f64,
}

impl ObjectState {
    pub fn hyp(&self) -> Option<HypId> {
        match self.kind {
            ObjectKind::Visible { hyp } => Some(hyp),
            ObjectKind::Hidden { .. } => None,
        }
    }

    pub fn is_hidden(&self) -> bool {
        matches!(self.kind, ObjectKind::Hidden { .. })
    }

    pub fn on_table(&self) -> bool {
        self.location == Location::Table
    }
}

/// One particle: the objects of a composition, plus any hidden ones.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub objects: Vec<ObjectState>,
    /// Object index owning each scene slot.
    owner: Arc<[usize]>,
}

impl WorldState {
    /// Objects of one composition, all on the table.
    pub fn from_hypotheses(ctx: &SceneContext, hyps: &[HypId]) -> Self {
        let mut owner = vec![usize::MAX; ctx.scene().segments().len()];
        let objects = hyps
            .iter()
            .enumerate()
            .map(|(k, &hyp)| {
                let info = ctx.hypothesis(hyp);
                for &s in &info.slots {
                    owner[s] = k;
                }
                ObjectState {
                    kind: ObjectKind::Visible { hyp },
                    location: Location::Table,
                    is_red: info.is_red,
                    failed: Vec::new(),
                    visible_fraction: info.visible_fraction,
                }
            })
            .collect();
        WorldState {
            objects,
            owner: owner.into(),
        }
    }

    /// Object holding the segment in scene slot `slot`.
    pub fn owner_of(&self, slot: usize) -> usize {
        self.owner[slot]
    }

    /// Is the segment in `slot` still on the table?
    pub fn slot_on_table(&self, slot: usize) -> bool {
        self.objects[self.owner[slot]].on_table()
    }

    /// Hidden object behind the object at `parent`, if any.
    pub fn hidden_child(&self, parent: usize) -> Option<usize> {
        self.objects
            .iter()
            .position(|o| o.kind == ObjectKind::Hidden { parent })
    }

    /// Object index of hypothesis `hyp`.
    pub fn object_of(&self, hyp: HypId) -> Option<usize> {
        self.objects.iter().position(|o| o.hyp() == Some(hyp))
    }

    pub fn hidden_count(&self) -> usize {
        self.objects.iter().filter(|o| o.is_hidden()).count()
    }
}

/// Weighted particle set; weights are normalized.
#[derive(Clone, Debug)]
pub struct Belief {
    pub particles: Vec<WorldState>,
    pub weights: Vec<f64>,
}

impl Belief {
    /// Normalizes the weights; all-zero weights are a belief collapse.
    pub fn new(particles: Vec<WorldState>, weights: Vec<f64>) -> Result<Self> {
        if particles.is_empty() || particles.len() != weights.len() {
            return Err(Error::InvalidArgument("belief needs one weight per particle".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::BeliefCollapse);
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Belief { particles, weights })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&WorldState, f64)> {
        self.particles.iter().zip(self.weights.iter().copied())
    }

    /// Summed weight of the particles containing each hypothesis.
    pub fn hypothesis_probabilities(&self, hypotheses: usize) -> Vec<f64> {
        let mut probs = vec![0.0; hypotheses];
        for (state, w) in self.iter() {
            for hyp in state.objects.iter().filter_map(ObjectState::hyp) {
                probs[hyp] += w;
            }
        }
        probs
    }

    /// Expected number of hallucinated objects.
    pub fn expected_hidden(&self) -> f64 {
        self.iter().map(|(s, w)| w * s.hidden_count() as f64).sum()
    }

    /// Effective number of particles, `1 / sum w^2`.
    pub fn effective_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BeliefOptions {
    pub hallucination: bool,
    /// Fixed red prior for hidden objects; derived from the view when `None`.
    pub red_prior: Option<f64>,
    pub seed: u64,
}

/// Adds at most one hidden object behind each visible table object.
///
/// `expected[hyp]` is the expected number of hidden objects behind `hyp`.
pub fn hallucinate(state: &WorldState, expected: &[f64], red_prior: f64, rng: &mut impl Rng) -> WorldState {
    let mut next = state.clone();
    for (k, obj) in state.objects.iter().enumerate() {
        let Some(hyp) = obj.hyp() else { continue };
        if !obj.on_table() {
            continue;
        }
        if rng.random::<f64>() < hidden_object_probability(expected[hyp]) {
            next.objects.push(ObjectState {
                kind: ObjectKind::Hidden { parent: k },
                location: Location::Table,
                is_red: rng.random::<f64>() < red_prior,
                failed: Vec::new(),
                visible_fraction: 0.0,
            });
        }
    }
    next
}

/// Summary of a belief, recorded with every episode step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BeliefSummary {
    pub particles: usize,
    pub distinct_hypotheses: usize,
    pub effective_size: f64,
    pub expected_hidden: f64,
    pub red_prior: f64,
}

/// One particle per composition, weighted by the history.
pub fn build_belief(
    ctx: &SceneContext,
    compositions: &[Composition],
    history: &History,
    options: &BeliefOptions,
) -> Result<(Belief, BeliefSummary)> {
    if compositions.is_empty() {
        return Err(Error::InvalidArgument("no composition samples".into()));
    }
    // Quality rows of recorded grasps, shared by all particles.
    let record_quality: Vec<Vec<f64>> = history.records().iter().map(|r| ctx.quality_for(&r.grasp)).collect();
    let mut cache: HashMap<&Composition, f64> = HashMap::new();
    let mut particles = Vec::with_capacity(compositions.len());
    let mut weights = Vec::with_capacity(compositions.len());
    for comp in compositions {
        let hyps = ctx.ids_of(comp);
        let weight = *cache.entry(comp).or_insert_with(|| {
            weight_by_index(&comp.hypotheses, history, |k, h| {
                let id = ctx.id_of(h).expect("composition hypotheses are interned");
                let record = &history.records()[k];
                recorded_success(record_quality[k][id], ctx.hypothesis(id).visible_fraction, record, h)
            })
        });
        let mut state = WorldState::from_hypotheses(ctx, &hyps);
        attach_failures(ctx, &mut state, history, &record_quality);
        particles.push(state);
        weights.push(weight);
    }
    let mut belief = Belief::new(particles, weights)?;

    let red = options
        .red_prior
        .unwrap_or_else(|| red_prior(mean_red_fraction(&belief)));
    if options.hallucination {
        let n_objects = compositions.iter().map(|c| c.hypotheses.len() as f64).sum::<f64>() / compositions.len() as f64;
        let hv = ctx.hidden_volume()?;
        let expected = expected_hidden_objects(hv, ctx.hypotheses().iter().map(|h| &h.fingerprint), n_objects)?;
        for (k, state) in belief.particles.iter_mut().enumerate() {
            let mut rng = stream_rng(options.seed, k as u64);
            *state = hallucinate(state, &expected, red, &mut rng);
        }
    }
    let summary = BeliefSummary {
        particles: belief.len(),
        distinct_hypotheses: ctx.len(),
        effective_size: belief.effective_size(),
        expected_hidden: belief.expected_hidden(),
        red_prior: red,
    };
    Ok((belief, summary))
}

/// Weighted mean fraction of red objects among the visible table objects.
pub fn mean_red_fraction(belief: &Belief) -> f64 {
    belief
        .iter()
        .map(|(s, w)| {
            let visible: Vec<&ObjectState> = s.objects.iter().filter(|o| !o.is_hidden() && o.on_table()).collect();
            if visible.is_empty() {
                0.0
            } else {
                w * visible.iter().filter(|o| o.is_red).count() as f64 / visible.len() as f64
            }
        })
        .sum()
}

// A recorded failure whose occlusion is unchanged marks the hypothesis the
// grasp would have acted on in this particle.
fn attach_failures(ctx: &SceneContext, state: &mut WorldState, history: &History, record_quality: &[Vec<f64>]) {
    for (record, quality) in history.records().iter().zip(record_quality) {
        if record.outcome != Outcome::Failure {
            continue;
        }
        let Some(owner) = ctx.id_of(record.optimized_for()) else {
            continue;
        };
        if ctx.hypothesis(owner).signature != record.occlusion_signature {
            continue;
        }
        let target = state
            .objects
            .iter()
            .enumerate()
            .filter_map(|(k, o)| o.hyp().map(|h| (k, h)))
            .map(|(k, h)| {
                let info = ctx.hypothesis(h);
                (
                    k,
                    recorded_success(quality[h], info.visible_fraction, record, &info.fingerprint),
                )
            })
            .filter(|&(_, p)| p > 0.0)
            .fold(None, |best: Option<(usize, f64)>, (k, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((k, p)),
            });
        if let Some((k, _)) = target {
            state.objects[k].failed.push(FailureKey {
                grasp: record.grasp.key().digest(),
                signature: record.occlusion_signature,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypothesis::tests::box_scene;
    use crate::scene::Fingerprint as Fp;
    use proptest::prelude::*;

    fn record(owner: &[u32], outcome: Outcome, moved: Option<&[u32]>) -> GraspRecord {
        GraspRecord {
            grasp: Grasp {
                contact_a: crate::geometry::Point::new(0.0, 0.0, 0.0),
                contact_b: crate::geometry::Point::new(0.0, 0.01 * owner.len() as f64, 0.0),
                centroid: crate::geometry::Point::new(0.0, 0.0, 0.0),
                hand_rotation: 0.0,
                finger_distance: 0.01,
                optimized_for: Fp::new(owner.to_vec()),
            },
            outcome,
            occlusion_signature: 0,
            blockers: Vec::new(),
            moved: moved.map(|m| Fp::new(m.to_vec())),
        }
    }

    fn comp(hyps: &[&[u32]]) -> Vec<Fp> {
        hyps.iter().map(|h| Fp::new(h.to_vec())).collect()
    }

    #[test]
    fn empty_history_weighs_one() {
        assert_eq!(
            composition_weight(&comp(&[&[1], &[2]]), &History::new(), |_, _| 0.5),
            1.0
        );
    }

    #[test]
    fn failure_contributes_complement() {
        let history: History = [record(&[1], Outcome::Failure, None)].into_iter().collect();
        let w = composition_weight(&comp(&[&[1]]), &history, |_, _| 0.8);
        assert!((w - 0.2).abs() < 1e-12);
    }

    #[test]
    fn success_eliminates_compositions_without_the_moved_object() {
        let history: History = [record(&[2], Outcome::Success, Some(&[2]))].into_iter().collect();
        let p = |_: &GraspRecord, _: &Fp| 0.9;
        assert_eq!(composition_weight(&comp(&[&[1], &[2], &[3]]), &history, p), 0.9);
        assert_eq!(composition_weight(&comp(&[&[1, 2], &[3]]), &history, p), 0.0);
        // Segments already gone from the view do not count against a composition.
        assert_eq!(composition_weight(&comp(&[&[1], &[3]]), &history, p), 1.0);
    }

    #[test]
    fn impossible_success_zeroes_the_weight() {
        let history: History = [record(&[2], Outcome::Success, Some(&[2]))].into_iter().collect();
        assert_eq!(composition_weight(&comp(&[&[2]]), &history, |_, _| 0.0), 0.0);
    }

    #[test]
    fn duplicates_are_merged() {
        let mut history = History::new();
        assert!(history.push(record(&[1], Outcome::Failure, None)));
        assert!(!history.push(record(&[1], Outcome::Failure, None)));
        let mut other = record(&[1], Outcome::Failure, None);
        other.occlusion_signature = 7;
        assert!(history.push(other));
        assert_eq!(history.len(), 2);
    }

    #[test]
    fn hidden_object_probability_values() {
        assert_eq!(hidden_object_probability(1.0), 0.5);
        assert!((hidden_object_probability(0.25) - 0.001_349_9).abs() < 1e-6);
        assert!((hidden_object_probability(4.0) - 0.998_650_1).abs() < 1e-6);
        assert_eq!(hidden_object_probability(0.0), 0.0);
    }

    #[test]
    fn red_prior_endpoints() {
        assert_eq!(red_prior(0.0), 0.2);
        assert_eq!(red_prior(1.0), 0.8);
        assert!((red_prior(0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn expected_hidden_objects_scale_with_volume() {
        let mut hv = HiddenVolumeReport {
            v_visible: 0.04,
            ..Default::default()
        };
        hv.per_segment_hidden.insert(1, 0.02);
        hv.per_segment_hidden.insert(2, 0.0);
        let fps = [Fp::from([1]), Fp::from([2])];
        let n = expected_hidden_objects(&hv, &fps, 2.0).unwrap();
        assert!((n[0] - 1.0).abs() < 1e-12);
        assert_eq!(n[1], 0.0);
        // Fewer than one object on average is clamped to one.
        let clamped = expected_hidden_objects(&hv, &fps, 0.3).unwrap();
        assert!((clamped[0] - 0.5).abs() < 1e-12);
        hv.v_visible = 0.0;
        assert!(matches!(
            expected_hidden_objects(&hv, &fps, 2.0),
            Err(Error::NoVisibleVolume(_))
        ));
    }

    fn two_box_context() -> (SceneContext, Vec<Composition>) {
        let scene = box_scene(
            &[
                (1, [0.10, 0.00, 0.0], [0.14, 0.03, 0.03], 1.0),
                (2, [0.14, 0.00, 0.0], [0.20, 0.03, 0.03], 0.0),
            ],
            0.5,
        );
        let split = Composition {
            hypotheses: comp(&[&[1], &[2]]),
            source: "0".parse().unwrap(),
        };
        let joined = Composition {
            hypotheses: comp(&[&[1, 2]]),
            source: "1".parse().unwrap(),
        };
        let comps = vec![split.clone(), joined, split];
        (SceneContext::from_compositions(scene, &comps).unwrap(), comps)
    }

    #[test]
    fn belief_is_uniform_without_history() {
        let (ctx, comps) = two_box_context();
        let (belief, summary) = build_belief(&ctx, &comps, &History::new(), &BeliefOptions::default()).unwrap();
        assert_eq!(belief.len(), 3);
        assert!(belief.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(summary.expected_hidden, 0.0);
        let red = ctx.id_of(&Fp::from([1])).unwrap();
        assert!(belief.particles[0]
            .objects
            .iter()
            .any(|o| o.hyp() == Some(red) && o.is_red));
        // Red fraction: split particles have 1 of 2 red, the joined one 0 of 1.
        assert!((mean_red_fraction(&belief) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn recorded_failure_reweights_and_marks_target() {
        let (ctx, comps) = two_box_context();
        let joined = ctx.id_of(&Fp::from([1, 2])).unwrap();
        let grasp = ctx.hypothesis(joined).grasp.clone().unwrap();
        let history: History = [GraspRecord {
            grasp: grasp.clone(),
            outcome: Outcome::Failure,
            occlusion_signature: ctx.hypothesis(joined).signature,
            blockers: Vec::new(),
            moved: None,
        }]
        .into_iter()
        .collect();
        let (belief, _) = build_belief(&ctx, &comps, &history, &BeliefOptions::default()).unwrap();
        // The joined particle loses 1 - 0.95 of its mass; the split ones keep the
        // product of their complements.
        let q1 = ctx.quality(joined, ctx.id_of(&Fp::from([1])).unwrap());
        let q2 = ctx.quality(joined, ctx.id_of(&Fp::from([2])).unwrap());
        let split = (1.0 - 0.95 * q1) * (1.0 - 0.95 * q2);
        let joined_w = 1.0 - 0.95;
        let total = 2.0 * split + joined_w;
        assert!((belief.weights[1] - joined_w / total).abs() < 1e-9);
        assert!((belief.weights[0] - split / total).abs() < 1e-9);
        assert_eq!(belief.particles[1].objects[0].failed.len(), 1);
    }

    #[test]
    fn hallucination_adds_children_only_when_enabled() {
        let (ctx, comps) = two_box_context();
        let options = BeliefOptions {
            hallucination: false,
            red_prior: None,
            seed: 3,
        };
        let (plain, _) = build_belief(&ctx, &comps, &History::new(), &options).unwrap();
        assert!(plain.particles.iter().all(|p| p.hidden_count() == 0));

        let state = plain.particles[0].clone();
        let mut rng = stream_rng(1, 0);
        let all = hallucinate(&state, &vec![100.0; ctx.len()], 1.0, &mut rng);
        assert_eq!(all.hidden_count(), state.objects.len());
        for (k, _) in state.objects.iter().enumerate() {
            let child = all.hidden_child(k).unwrap();
            assert!(all.objects[child].is_red);
            assert_eq!(all.objects[child].visible_fraction, 0.0);
        }
        let none = hallucinate(&state, &vec![0.0; ctx.len()], 1.0, &mut rng);
        assert_eq!(none.hidden_count(), 0);
    }

    proptest! {
        #[test]
        fn probability_is_monotone(a in 1e-3f64..20.0, b in 1e-3f64..20.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(hidden_object_probability(lo) <= hidden_object_probability(hi) + 1e-15);
        }

        #[test]
        fn weight_ignores_record_order(ps in proptest::collection::vec(0.0f64..1.0, 1..5)) {
            let records: Vec<GraspRecord> = (0..ps.len())
                .map(|k| record(&[k as u32 + 1], Outcome::Failure, None))
                .collect();
            let hyps = comp(&[&[1], &[2, 3]]);
            let p = |r: &GraspRecord, h: &Fp| ps[r.optimized_for().ids()[0] as usize - 1] * h.len() as f64 / 2.0;
            let forward: History = records.iter().cloned().collect();
            let backward: History = records.iter().rev().cloned().collect();
            let a = composition_weight(&hyps, &forward, p);
            let b = composition_weight(&hyps, &backward, p);
            prop_assert!((a - b).abs() < 1e-12);
            let doubled: History = records.iter().chain(records.iter()).cloned().collect();
            prop_assert!((composition_weight(&hyps, &doubled, p) - a).abs() < 1e-15);
        }
    }
}
