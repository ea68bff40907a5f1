//! Composition sampling: coupling from the past for the first sample, then a
//! forward chain grown until the effective sample size is large enough.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composition::{Composition, ConnectionModel, EdgeAssignment};
use crate::error::{Error, Result};
use crate::ess::min_ess;
use crate::scene::Scene;

pub const DEFAULT_CFTP_CAP: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_ess_target: usize,
    pub n_start: usize,
    pub h_size: usize,
    pub t_max: usize,
    pub seed: u64,
    pub cftp_cap: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_ess_target: 200,
            n_start: 100,
            h_size: 2000,
            t_max: 131_072,
            seed: 0,
            cftp_cap: DEFAULT_CFTP_CAP,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ess_target == 0 {
            return Err(Error::InvalidConfig("n_ess_target must be positive".into()));
        }
        if self.n_start < 3 {
            return Err(Error::InvalidConfig("n_start must be at least 3".into()));
        }
        if self.h_size == 0 || self.t_max == 0 || self.cftp_cap == 0 {
            return Err(Error::InvalidConfig(
                "h_size, t_max and cftp_cap must be positive".into(),
            ));
        }
        if self.h_size < self.n_ess_target {
            return Err(Error::InvalidConfig(format!(
                "h_size ({}) must be at least n_ess_target ({})",
                self.h_size, self.n_ess_target
            )));
        }
        Ok(())
    }
}

/// Randomness for one absolute time step, shared by every coupled chain.
///
/// Derived from a ChaCha stream keyed by `key` at a position fixed by `t`, so
/// the draw for a time step never depends on how many other steps were drawn.
#[derive(Clone, Debug)]
pub struct StepRandomness {
    key: u64,
    stream: ChaCha8Rng,
}

impl StepRandomness {
    pub fn new(key: u64) -> Self {
        StepRandomness {
            key,
            stream: ChaCha8Rng::seed_from_u64(key),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Edge index in `0..edges` and threshold in `[0, 1)` for time step `t`.
    pub fn draw(&mut self, t: u64, edges: usize) -> (usize, f64) {
        self.stream.set_word_pos(u128::from(t) * 4);
        let a = self.stream.next_u64();
        let b = self.stream.next_u64();
        let w = ((u128::from(a) * edges as u128) >> 64) as usize;
        let q = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (w, q)
    }
}

#[derive(Clone, Debug)]
pub struct CftpOutcome {
    pub state: EdgeAssignment,
    pub horizon: u64,
    pub starts: Vec<EdgeAssignment>,
    /// Key of the shared step randomness; see [`run_from_past`].
    pub key: u64,
}

/// Start states: everything connected, everything apart, and uniform random
/// assignments for the rest.
pub fn start_states(edges: usize, n_start: usize, rng: &mut impl Rng) -> Vec<EdgeAssignment> {
    let mut starts = vec![EdgeAssignment::ones(edges), EdgeAssignment::zeros(edges)];
    for _ in 2..n_start {
        starts.push(EdgeAssignment::from_bits((0..edges).map(|_| rng.random::<bool>())));
    }
    starts
}

/// Runs every start from time `-horizon` to 0 with the shared randomness of `key`.
/// Returns one final state per start, in order.
pub fn run_from_past(
    model: &ConnectionModel,
    starts: &[EdgeAssignment],
    key: u64,
    horizon: u64,
) -> Vec<EdgeAssignment> {
    let mut steps = StepRandomness::new(key);
    let mut chains = starts.to_vec();
    for t in (1..=horizon).rev() {
        let (w, q) = steps.draw(t, model.edge_count());
        for c in chains.iter_mut() {
            model.gibbs_update(c, w, q);
        }
    }
    chains
}

/// Coupling from the past with dispersed start states.
pub fn cftp(model: &ConnectionModel, n_start: usize, cap: u64, rng: &mut impl Rng) -> Result<CftpOutcome> {
    let edges = model.edge_count();
    let key = rng.next_u64();
    if edges == 0 {
        return Ok(CftpOutcome {
            state: EdgeAssignment::zeros(0),
            horizon: 1,
            starts: vec![EdgeAssignment::zeros(0); n_start],
            key,
        });
    }
    let starts = start_states(edges, n_start, rng);
    let mut steps = StepRandomness::new(key);
    let mut horizon = 1u64;
    loop {
        horizon *= 2;
        if horizon > cap {
            return Err(Error::CftpNotCollapsed { horizon: horizon / 2 });
        }
        // Chains that meet stay together, so a sorted set of distinct states suffices.
        let mut chains = starts.clone();
        chains.sort_unstable();
        chains.dedup();
        for t in (1..=horizon).rev() {
            let (w, q) = steps.draw(t, edges);
            for c in chains.iter_mut() {
                model.gibbs_update(c, w, q);
            }
            if chains.len() > 1 {
                chains.sort_unstable();
                chains.dedup();
            }
        }
        if chains.len() == 1 {
            return Ok(CftpOutcome {
                state: chains.pop().expect("one chain"),
                horizon,
                starts,
                key,
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionSet {
    pub samples: Vec<EdgeAssignment>,
    pub cftp_collapsed: bool,
    pub cftp_horizon: u64,
    pub ess_achieved: f64,
    pub truncated: bool,
    /// Chain length before pruning.
    pub chain_length: usize,
}

impl CompositionSet {
    /// Fraction of samples with each candidate edge enabled.
    pub fn edge_marginals(&self) -> Vec<f64> {
        let edges = self.samples.first().map_or(0, |s| s.len());
        let mut counts = vec![0usize; edges];
        for s in &self.samples {
            for (k, b) in s.iter().enumerate() {
                counts[k] += b as usize;
            }
        }
        counts.iter().map(|&c| c as f64 / self.samples.len() as f64).collect()
    }

    /// Distinct assignments with their sample counts, in assignment order.
    pub fn histogram(&self) -> BTreeMap<EdgeAssignment, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.clone()).or_insert(0) += 1;
        }
        h
    }

    /// Most frequent assignment; ties go to the smallest assignment.
    pub fn modal(&self) -> &EdgeAssignment {
        let mut best: Option<(&EdgeAssignment, usize)> = None;
        let hist = self.histogram();
        for (a, &count) in &hist {
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((self.samples.iter().find(|s| *s == a).expect("from samples"), count));
            }
        }
        best.expect("samples are never empty").0
    }

    pub fn compositions<'a>(&'a self, model: &'a ConnectionModel) -> impl Iterator<Item = Composition> + 'a {
        self.samples.iter().map(move |s| model.components(s))
    }
}

/// Indices that keep `target` of `len` samples evenly spread, first and last included.
pub fn prune_indices(len: usize, target: usize) -> Vec<usize> {
    if len <= target {
        return (0..len).collect();
    }
    if target == 1 {
        return vec![0];
    }
    (0..target).map(|i| i * (len - 1) / (target - 1)).collect()
}

pub fn sample_compositions(scene: &Scene, config: &SamplerConfig) -> Result<CompositionSet> {
    sample_with_model(&ConnectionModel::new(scene), config)
}

pub fn sample_with_model(model: &ConnectionModel, config: &SamplerConfig) -> Result<CompositionSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let edges = model.edge_count();
    let start = cftp(model, config.n_start, config.cftp_cap, &mut rng)?;
    if edges == 0 {
        return Ok(CompositionSet {
            samples: vec![start.state],
            cftp_collapsed: true,
            cftp_horizon: start.horizon,
            ess_achieved: config.n_ess_target as f64,
            truncated: false,
            chain_length: 1,
        });
    }

    let mut traces: Vec<Vec<bool>> = vec![Vec::new(); edges];
    let mut samples = Vec::new();
    fn push(s: &EdgeAssignment, samples: &mut Vec<EdgeAssignment>, traces: &mut [Vec<bool>]) {
        for (k, b) in s.iter().enumerate() {
            traces[k].push(b);
        }
        samples.push(s.clone());
    }
    let mut state = start.state;
    push(&state, &mut samples, &mut traces);

    let mut horizon = (start.horizon as usize).max(2);
    let mut truncated = false;
    let ess_achieved = loop {
        while samples.len() < horizon.min(config.t_max) {
            let w = rng.random_range(0..edges);
            let q: f64 = rng.random();
            model.gibbs_update(&mut state, w, q);
            push(&state, &mut samples, &mut traces);
        }
        let ess = if samples.len() < 2 { 1.0 } else { min_ess(&traces) };
        if ess >= config.n_ess_target as f64 {
            break ess;
        }
        if samples.len() >= config.t_max {
            truncated = true;
            break ess;
        }
        horizon *= 2;
    };

    let chain_length = samples.len();
    let keep = prune_indices(chain_length, config.h_size);
    let samples = keep.into_iter().map(|i| samples[i].clone()).collect();
    Ok(CompositionSet {
        samples,
        cftp_collapsed: true,
        cftp_horizon: start.horizon,
        ess_achieved,
        truncated,
        chain_length,
    })
}
