//! Rank tests, bootstrap intervals and the comparison report over methods.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::generator::TrueWorld;
use crate::rng::{derive_seed, stream_rng};
use crate::sim::{run_episode, Episode, EpisodeConfig, Method};

/// Largest `n * m` handled by exact enumeration.
pub const EXACT_LIMIT: usize = 400;
pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
const MIN_SAMPLE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Values of `a` tend to exceed values of `b`.
    Greater,
    Less,
}

// Midranks of the pooled sample, 1-based.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pooled[order[end]] == pooled[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

/// One-sided Mann-Whitney U test of `a` against `b`.
///
/// Exact permutation distribution of the rank sum (with midranks) when
/// `a.len() * b.len() <= 400`, otherwise the tie-corrected normal
/// approximation with continuity correction. Samples whose values are all
/// identical give p = 1.
pub fn mann_whitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<f64> {
    if a.len() < MIN_SAMPLE || b.len() < MIN_SAMPLE {
        return Err(Error::InvalidArgument(format!(
            "mann-whitney needs at least {MIN_SAMPLE} values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("mann-whitney samples must be finite".into()));
    }
    let (a, b) = match alternative {
        Alternative::Greater => (a, b),
        Alternative::Less => (b, a),
    };
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    if pooled.iter().all(|&x| x == pooled[0]) {
        return Ok(1.0);
    }
    let ranks = midranks(&pooled);
    let p = if a.len() * b.len() <= EXACT_LIMIT {
        exact_upper_tail(&ranks, a.len())
    } else {
        normal_upper_tail(&pooled, &ranks, a.len())
    };
    Ok(p.clamp(f64::MIN_POSITIVE, 1.0))
}

// P(rank sum of a random n-subset >= observed), by counting subsets of the
// smaller sample size. Ranks are doubled so midranks become integers.
fn exact_upper_tail(ranks: &[f64], n: usize) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let observed: usize = doubled[..n].iter().sum();
    let max_sum: usize = doubled.iter().sum();
    let m = doubled.len() - n;
    let k_max = n.min(m);
    // counts[k][s]: subsets of size k with doubled rank sum s.
    let mut counts = vec![vec![0u128; max_sum + 1]; k_max + 1];
    counts[0][0] = 1;
    for &r in &doubled {
        for k in (1..=k_max).rev() {
            let (lower, upper) = counts.split_at_mut(k);
            for s in (r..=max_sum).rev() {
                upper[0][s] += lower[k - 1][s - r];
            }
        }
    }
    let row = &counts[k_max];
    let total: u128 = row.iter().sum();
    // With the complement as the counted sample, a large sum for `a` is a
    // small sum for `b`.
    let tail: u128 = if n <= m {
        row[observed..].iter().sum()
    } else {
        row[..=max_sum - observed].iter().sum()
    };
    tail as f64 / total as f64
}

fn normal_upper_tail(pooled: &[f64], ranks: &[f64], n: usize) -> f64 {
    let m = pooled.len() - n;
    let (nf, mf) = (n as f64, m as f64);
    let total = nf + mf;
    let u = ranks[..n].iter().sum::<f64>() - nf * (nf + 1.0) / 2.0;
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let ties: f64 = sorted
        .chunk_by(|x, y| x == y)
        .map(|g| {
            let t = g.len() as f64;
            t * t * t - t
        })
        .sum();
    let var = nf * mf / 12.0 * ((total + 1.0) - ties / (total * (total - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = (u - nf * mf / 2.0 - 0.5) / var.sqrt();
    let normal = Normal::standard();
    1.0 - normal.cdf(z)
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], level: f64, resamples: usize, rng: &mut impl Rng) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::InvalidArgument("bootstrap needs values and resamples".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    let mean = values.iter().sum::<f64>() / n as f64;
    Ok((at(tail).min(mean), at(1.0 - tail).max(mean)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub episodes: usize,
    pub failed_episodes: usize,
    pub mean_reward: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// One-sided test that `better` earns more reward than `worse`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub better: Method,
    pub worse: Method,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub methods: Vec<MethodSummary>,
    pub pairwise: Vec<PairwiseTest>,
}

impl EvaluationReport {
    /// Summarizes episodes. For every pair of methods the later one in
    /// `methods` is tested for larger reward than the earlier one.
    pub fn from_episodes(episodes: &[Episode], methods: &[Method], seed: u64) -> Result<Self> {
        let mut rewards: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
        let mut failed: BTreeMap<Method, usize> = BTreeMap::new();
        for e in episodes {
            rewards.entry(e.record.method).or_default().push(e.record.total_reward);
            *failed.entry(e.record.method).or_default() += usize::from(e.record.error.is_some());
        }
        let mut summaries = Vec::new();
        for (k, &m) in methods.iter().enumerate() {
            let r = rewards.get(&m).map(Vec::as_slice).unwrap_or_default();
            if r.is_empty() {
                return Err(Error::InvalidArgument(format!("no episodes for method {m}")));
            }
            let mut rng = stream_rng(derive_seed(seed, &[k as u64]), 0);
            let (ci_low, ci_high) = bootstrap_ci(r, 0.95, BOOTSTRAP_RESAMPLES, &mut rng)?;
            summaries.push(MethodSummary {
                method: m,
                episodes: r.len(),
                failed_episodes: failed.get(&m).copied().unwrap_or(0),
                mean_reward: r.iter().sum::<f64>() / r.len() as f64,
                ci_low,
                ci_high,
            });
        }
        let mut pairwise = Vec::new();
        for (i, &worse) in methods.iter().enumerate() {
            for &better in &methods[i + 1..] {
                pairwise.push(PairwiseTest {
                    better,
                    worse,
                    p_value: mann_whitney_u(&rewards[&better], &rewards[&worse], Alternative::Greater)?,
                });
            }
        }
        Ok(EvaluationReport {
            methods: summaries,
            pairwise,
        })
    }

    pub fn p_value(&self, better: Method, worse: Method) -> Option<f64> {
        self.pairwise
            .iter()
            .find(|t| t.better == better && t.worse == worse)
            .map(|t| t.p_value)
    }
}

/// A named ground-truth world to evaluate on.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub id: String,
    pub world: TrueWorld,
}

/// Runs every (scene, trial, method) episode in parallel and reports.
/// Episode seeds depend on scene and trial only, so methods face the same
/// randomness. Episodes come back ordered by scene, trial, then method.
pub fn evaluate_methods(
    scenes: &[EvalScene],
    methods: &[Method],
    trials_per_scene: usize,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<(Vec<Episode>, EvaluationReport)> {
    if methods.len() < 2 {
        return Err(Error::InvalidArgument("evaluation needs at least two methods".into()));
    }
    if scenes.is_empty() || trials_per_scene == 0 {
        return Err(Error::InvalidArgument("evaluation needs scenes and trials".into()));
    }
    config.validate()?;
    let jobs: Vec<(usize, usize, Method)> = (0..scenes.len())
        .flat_map(|s| (0..trials_per_scene).flat_map(move |t| methods.iter().map(move |&m| (s, t, m))))
        .collect();
    let episodes: Vec<Episode> = jobs
        .par_iter()
        .map(|&(s, t, m)| {
            let scene = &scenes[s];
            run_episode(
                &scene.world,
                &scene.id,
                m,
                config,
                derive_seed(seed, &[s as u64, t as u64]),
            )
        })
        .collect();
    let report = EvaluationReport::from_episodes(&episodes, methods, derive_seed(seed, &[u64::MAX]))?;
    Ok((episodes, report))
}
