//! Budgeted grasp selection maximizing the expected success of the best
//! available grasp per hypothesis.

use serde::{Deserialize, Serialize};

use crate::belief::{Belief, FailureKey};
use crate::grasp::occlusion_success;
use crate::hypothesis::HypId;
use crate::world::{Action, WorldModel};

/// Default number of grasps kept per step.
pub const DEFAULT_BUDGET: usize = 8;

/// Chosen grasps, each paired with every destination of the task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    #[serde(skip)]
    pub actions: Vec<Action>,
    /// Owners of the chosen grasps, in selection order.
    #[serde(skip)]
    pub grasps: Vec<HypId>,
    pub expected_value: f64,
}

/// Greedy restricted action set over the hypotheses of a belief.
///
/// Candidates are the grasps of every hypothesis with positive probability.
/// A grasp's success on a hypothesis counts the quality, the occlusion term,
/// blocking by other segments and recorded failures.
pub fn restricted_action_set(model: &WorldModel, belief: &Belief, budget: usize) -> ActionSet {
    let ctx = model.ctx;
    let probs = belief.hypothesis_probabilities(ctx.len());
    let present: Vec<HypId> = (0..ctx.len()).filter(|&h| probs[h] > 0.0).collect();
    let candidates: Vec<HypId> = present
        .iter()
        .copied()
        .filter(|&g| ctx.hypothesis(g).grasp.is_some())
        .collect();
    let mut failed: Vec<(HypId, FailureKey)> = belief
        .particles
        .iter()
        .flat_map(|s| s.objects.iter().filter_map(|o| Some(o.hyp()?).map(|h| (h, o))))
        .flat_map(|(h, o)| o.failed.iter().map(move |k| (h, *k)))
        .collect();
    failed.sort_by_key(|(h, k)| (*h, k.grasp, k.signature));
    failed.dedup();
    let success: Vec<Vec<f64>> = candidates
        .iter()
        .map(|&g| {
            let owner = ctx.hypothesis(g);
            let digest = owner.grasp_key.as_ref().map(|k| k.digest());
            present
                .iter()
                .map(|&h| {
                    let info = ctx.hypothesis(h);
                    let blocked = owner.blockers.iter().any(|b| !info.fingerprint.contains(*b));
                    let has_failed = failed
                        .iter()
                        .any(|(fh, k)| *fh == h && Some(k.grasp) == digest && k.signature == owner.signature);
                    if blocked || has_failed {
                        0.0
                    } else {
                        ctx.quality(g, h) * occlusion_success(info.visible_fraction)
                    }
                })
                .collect()
        })
        .collect();
    let weights: Vec<f64> = present.iter().map(|&h| probs[h]).collect();
    let (chosen, expected_value) = greedy_select(&success, &weights, budget);
    let grasps: Vec<HypId> = chosen.iter().map(|&k| candidates[k]).collect();
    let actions = grasps
        .iter()
        .flat_map(|&owner| {
            model
                .task
                .destinations()
                .iter()
                .map(move |&destination| Action::Grasp { owner, destination })
        })
        .collect();
    ActionSet {
        actions,
        grasps,
        expected_value,
    }
}

/// Expected success of grasp subset `chosen`:
/// `sum_h probs[h] * max_{g in chosen} success[g][h]`.
pub fn coverage_value(success: &[Vec<f64>], probs: &[f64], chosen: &[usize]) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(h, p)| p * chosen.iter().map(|&g| success[g][h]).fold(0.0, f64::max))
        .sum()
}

/// Greedy selection of at most `budget` grasps (rows of `success`).
///
/// Each round adds the grasp with the largest marginal gain, lowest index on
/// ties, and stops early once no grasp adds anything. Returns the chosen
/// indices in selection order and the objective value.
pub fn greedy_select(success: &[Vec<f64>], probs: &[f64], budget: usize) -> (Vec<usize>, f64) {
    let mut best_per_h = vec![0.0; probs.len()];
    let mut chosen = Vec::new();
    let mut value = 0.0;
    while chosen.len() < budget {
        let mut pick: Option<(usize, f64)> = None;
        for (g, row) in success.iter().enumerate() {
            if chosen.contains(&g) {
                continue;
            }
            let gain: f64 = probs
                .iter()
                .zip(row)
                .zip(&best_per_h)
                .map(|((p, s), b)| p * (s - b).max(0.0))
                .sum();
            if gain > 1e-15 && pick.is_none_or(|(_, best)| gain > best) {
                pick = Some((g, gain));
            }
        }
        let Some((g, gain)) = pick else { break };
        for (b, s) in best_per_h.iter_mut().zip(&success[g]) {
            *b = f64::max(*b, *s);
        }
        chosen.push(g);
        value += gain;
    }
    (chosen, value)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive optimum over all subsets of size at most `budget`.
    pub(crate) fn brute_force(success: &[Vec<f64>], probs: &[f64], budget: usize) -> f64 {
        let n = success.len();
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize <= budget)
            .map(|m| {
                let set: Vec<usize> = (0..n).filter(|g| m >> g & 1 == 1).collect();
                coverage_value(success, probs, &set)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn shared_grasp_beats_specialist() {
        // Grasp 0 serves two hypotheses (0.45 each); grasp 1 is worth 0.8 on one.
        let success = vec![vec![0.9, 0.9, 0.0], vec![0.0, 0.0, 1.0]];
        let probs = vec![0.5, 0.5, 0.8];
        let (chosen, value) = greedy_select(&success, &probs, 1);
        assert_eq!(chosen, vec![0]);
        assert!((value - 0.9).abs() < 1e-12);
        assert!((value - brute_force(&success, &probs, 1)).abs() < 1e-12);
    }

    #[test]
    fn disjoint_grasps_are_all_taken() {
        let success = vec![vec![0.9, 0.0, 0.0], vec![0.0, 0.5, 0.0], vec![0.0, 0.0, 0.7]];
        let probs = vec![0.2, 0.6, 0.9];
        let (chosen, value) = greedy_select(&success, &probs, 5);
        assert_eq!(chosen.len(), 3);
        assert!((value - (0.18 + 0.3 + 0.63)).abs() < 1e-12);
    }

    #[test]
    fn no_positive_gain_gives_empty_set() {
        let (chosen, value) = greedy_select(&[vec![0.0, 0.0]], &[0.5, 0.5], 3);
        assert!(chosen.is_empty());
        assert_eq!(value, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let success = vec![vec![0.5], vec![0.5]];
        assert_eq!(greedy_select(&success, &[1.0], 1).0, vec![0]);
    }

    fn instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
        let g = rng.random_range(1..=6);
        let h = rng.random_range(1..=4);
        let success = (0..g)
            .map(|_| {
                (0..h)
                    .map(|_| if rng.random::<f64>() < 0.4 { 0.0 } else { rng.random() })
                    .collect()
            })
            .collect();
        let probs = (0..h).map(|_| rng.random()).collect();
        (success, probs)
    }

    #[test]
    fn greedy_meets_the_submodular_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let (success, probs) = instance(&mut rng);
            let budget = rng.random_range(1..=3);
            let (chosen, value) = greedy_select(&success, &probs, budget);
            assert!(chosen.len() <= budget);
            let opt = brute_force(&success, &probs, budget);
            assert!(value >= (1.0 - (-1.0f64).exp()) * opt - 1e-12);
            assert!((value - coverage_value(&success, &probs, &chosen)).abs() < 1e-12);
        }
    }

    #[test]
    fn action_set_over_a_belief() {
        use crate::belief::{build_belief, BeliefOptions, History};
        use crate::composition::Composition;
        use crate::hypothesis::{tests::box_scene, SceneContext};
        use crate::scene::Fingerprint;
        use crate::world::TaskKind;

        let scene = box_scene(
            &[
                (1, [0.10, 0.00, 0.0], [0.14, 0.03, 0.03], 1.0),
                (2, [0.30, 0.10, 0.0], [0.34, 0.13, 0.03], 0.0),
            ],
            0.5,
        );
        let comps = vec![Composition {
            hypotheses: vec![Fingerprint::from([1]), Fingerprint::from([2])],
            source: "0".parse().unwrap(),
        }];
        let ctx = SceneContext::from_compositions(scene, &comps).unwrap();
        let (belief, _) = build_belief(&ctx, &comps, &History::new(), &BeliefOptions::default()).unwrap();
        let model = WorldModel::new(&ctx, TaskKind::ObjectSearch);
        let set = restricted_action_set(&model, &belief, 5);
        // Far-apart boxes: both grasps, two destinations each, value 2 * 0.95.
        assert_eq!(set.grasps.len(), 2);
        assert_eq!(set.actions.len(), 4);
        assert!((set.expected_value - 1.9).abs() < 1e-12);
        let one = restricted_action_set(&model, &belief, 1);
        assert_eq!(one.grasps, vec![0]);
    }

    proptest! {
        #[test]
        fn value_grows_with_budget(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (success, probs) = instance(&mut rng);
            let mut last = 0.0;
            for b in 1..=6 {
                let (_, v) = greedy_select(&success, &probs, b);
                prop_assert!(v >= last - 1e-12);
                last = v;
            }
        }

        #[test]
        fn marginal_gains_diminish(seed in 0u64..1000) {
            // f(S + g) - f(S) >= f(T + g) - f(T) for S subset of T.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (success, probs) = instance(&mut rng);
            let n = success.len();
            let t: Vec<usize> = (0..n).filter(|_| rng.random::<bool>()).collect();
            let s: Vec<usize> = t.iter().copied().filter(|_| rng.random::<bool>()).collect();
            for g in 0..n {
                let gain = |set: &[usize]| {
                    let mut with = set.to_vec();
                    with.push(g);
                    coverage_value(&success, &probs, &with) - coverage_value(&success, &probs, set)
                };
                prop_assert!(gain(&s) >= gain(&t) - 1e-12);
            }
        }
    }
}
