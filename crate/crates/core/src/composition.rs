//! Direct-connection assignments, the partitions they induce, and the
//! single-edge Gibbs update.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scene::{Fingerprint, Scene, SegmentId};

/// One boolean per candidate edge, packed into words.
///
/// Ordering is lexicographic over the bit string, edge 0 first.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct EdgeAssignment {
    words: Vec<u64>,
    len: usize,
}

impl EdgeAssignment {
    pub fn zeros(len: usize) -> Self {
        EdgeAssignment {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut a = Self::zeros(len);
        for k in 0..len {
            a.set(k, true);
        }
        a
    }

    pub fn from_bits(bits: impl IntoIterator<Item = bool>) -> Self {
        let bits: Vec<bool> = bits.into_iter().collect();
        let mut a = Self::zeros(bits.len());
        for (k, b) in bits.into_iter().enumerate() {
            a.set(k, b);
        }
        a
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, k: usize) -> bool {
        assert!(k < self.len, "edge index {k} out of range {}", self.len);
        self.words[k / 64] >> (k % 64) & 1 == 1
    }

    pub fn set(&mut self, k: usize, value: bool) {
        assert!(k < self.len, "edge index {k} out of range {}", self.len);
        let mask = 1u64 << (k % 64);
        if value {
            self.words[k / 64] |= mask;
        } else {
            self.words[k / 64] &= !mask;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|k| self.get(k))
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

impl Ord for EdgeAssignment {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversing bits puts edge 0 in the most significant position of each word.
        self.words
            .iter()
            .map(|w| w.reverse_bits())
            .cmp(other.words.iter().map(|w| w.reverse_bits()))
            .then(self.len.cmp(&other.len))
    }
}

impl PartialOrd for EdgeAssignment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for EdgeAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for EdgeAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EdgeAssignment({self})")
    }
}

impl FromStr for EdgeAssignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidArgument(format!("bad assignment digit {other:?}"))),
            })
            .collect::<Result<Vec<bool>>>()
            .map(EdgeAssignment::from_bits)
    }
}

impl Serialize for EdgeAssignment {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EdgeAssignment {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A partition of the segments into object hypotheses.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composition {
    /// Sorted by smallest member id.
    pub hypotheses: Vec<Fingerprint>,
    pub source: EdgeAssignment,
}

impl Composition {
    pub fn contains(&self, hypothesis: &Fingerprint) -> bool {
        self.hypotheses.iter().any(|h| h == hypothesis)
    }

    pub fn hypothesis_of(&self, id: SegmentId) -> Option<&Fingerprint> {
        self.hypotheses.iter().find(|h| h.contains(id))
    }
}

/// Result of the connect/disconnect comparison for one edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkProbability {
    /// `ln` of the product of same-object priors over `U x V`.
    pub ln_connected: f64,
    /// `ln` of the product of different-object priors over `U x V`.
    pub ln_disconnected: f64,
    pub p_connect: f64,
    /// Whether the endpoints were already joined through other edges.
    pub indirect: bool,
}

impl LinkProbability {
    pub fn connected(&self) -> f64 {
        self.ln_connected.exp()
    }

    pub fn disconnected(&self) -> f64 {
        self.ln_disconnected.exp()
    }
}

/// Dense view of a scene used by the sampler's inner loop.
#[derive(Clone, Debug)]
pub struct ConnectionModel {
    ids: Vec<SegmentId>,
    endpoints: Vec<(usize, usize)>,
    // Row-major n x n tables of ln P(c=1) and ln P(c=0).
    ln_same: Vec<f64>,
    ln_apart: Vec<f64>,
    prior: Vec<f64>,
}

impl ConnectionModel {
    pub fn new(scene: &Scene) -> Self {
        let ids: Vec<SegmentId> = scene.segments().iter().map(|s| s.id).collect();
        let n = ids.len();
        let mut prior = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    prior[a * n + b] = scene.prior(ids[a], ids[b]);
                }
            }
        }
        let endpoints = scene
            .candidate_edges()
            .iter()
            .map(|e| {
                (
                    scene.index_of(e.a()).expect("validated edge"),
                    scene.index_of(e.b()).expect("validated edge"),
                )
            })
            .collect();
        ConnectionModel {
            ln_same: prior.iter().map(|p| p.ln()).collect(),
            ln_apart: prior.iter().map(|p| (1.0 - p).ln()).collect(),
            prior,
            endpoints,
            ids,
        }
    }

    pub fn segment_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.endpoints.len()
    }

    pub fn segment_ids(&self) -> &[SegmentId] {
        &self.ids
    }

    /// Dense endpoint indices of candidate edge `w`.
    pub fn endpoints(&self, w: usize) -> (usize, usize) {
        self.endpoints[w]
    }

    fn union_find(&self, assignment: &EdgeAssignment, skip: Option<usize>) -> UnionFind<usize> {
        assert_eq!(
            assignment.len(),
            self.edge_count(),
            "assignment length does not match scene"
        );
        let mut uf = UnionFind::new(self.ids.len());
        for (k, &(a, b)) in self.endpoints.iter().enumerate() {
            if Some(k) != skip && assignment.get(k) {
                uf.union(a, b);
            }
        }
        uf
    }

    /// Component label (a representative dense index) for every segment.
    pub fn labels(&self, assignment: &EdgeAssignment) -> Vec<usize> {
        self.union_find(assignment, None).into_labeling()
    }

    pub fn components(&self, assignment: &EdgeAssignment) -> Composition {
        let labels = self.labels(assignment);
        let mut groups: Vec<Vec<SegmentId>> = vec![Vec::new(); self.ids.len()];
        for (k, &root) in labels.iter().enumerate() {
            groups[root].push(self.ids[k]);
        }
        let mut hypotheses: Vec<Fingerprint> = groups
            .into_iter()
            .filter(|g| !g.is_empty())
            .map(Fingerprint::new)
            .collect();
        hypotheses.sort_by_key(|h| h.ids()[0]);
        Composition {
            hypotheses,
            source: assignment.clone(),
        }
    }

    /// Probability that edge `w` is enabled given every other edge of `assignment`.
    /// The state of edge `w` itself is ignored.
    pub fn link_probability(&self, assignment: &EdgeAssignment, w: usize) -> LinkProbability {
        let (i, j) = self.endpoints[w];
        let n = self.ids.len();
        let uf = self.union_find(assignment, Some(w));
        let ri = uf.find(i);
        let rj = uf.find(j);
        if ri == rj {
            let p = self.prior[i * n + j];
            return LinkProbability {
                ln_connected: p.ln(),
                ln_disconnected: (1.0 - p).ln(),
                p_connect: p,
                indirect: true,
            };
        }
        let mut u_side = Vec::new();
        let mut v_side = Vec::new();
        for k in 0..n {
            let r = uf.find(k);
            if r == ri {
                u_side.push(k);
            } else if r == rj {
                v_side.push(k);
            }
        }
        let mut ln_connected = 0.0;
        let mut ln_disconnected = 0.0;
        for &u in &u_side {
            for &v in &v_side {
                ln_connected += self.ln_same[u * n + v];
                ln_disconnected += self.ln_apart[u * n + v];
            }
        }
        // a / (a + b) = 1 / (1 + exp(ln b - ln a))
        let p_connect = 1.0 / (1.0 + (ln_disconnected - ln_connected).exp());
        LinkProbability {
            ln_connected,
            ln_disconnected,
            p_connect,
            indirect: false,
        }
    }

    /// In-place Gibbs update of edge `w` with threshold `q`.
    pub fn gibbs_update(&self, assignment: &mut EdgeAssignment, w: usize, q: f64) {
        let p = self.link_probability(assignment, w).p_connect;
        assignment.set(w, p > q);
    }

    /// Gibbs update of edge `w`; the edge ends up enabled iff its connection
    /// probability exceeds `q` (ties disable it).
    pub fn gibbs_step(&self, assignment: &EdgeAssignment, w: usize, q: f64) -> EdgeAssignment {
        let mut next = assignment.clone();
        self.gibbs_update(&mut next, w, q);
        next
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb, Point};
    use crate::scene::{Edge, SceneParts, Segment};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    pub(crate) fn scene(n: u32, edges: &[(u32, u32, f64)], extra: &[(u32, u32, f64)]) -> Scene {
        let segments = (1..=n)
            .map(|id| Segment::new(id, vec![Point::new(0.05 * id as f64, 0.0, 0.02)], 0.0))
            .collect();
        let mut pair_prior = BTreeMap::new();
        for &(a, b, p) in edges.iter().chain(extra) {
            pair_prior.insert(Edge::new(a, b), p);
        }
        Scene::new(SceneParts {
            segments,
            candidate_edges: edges.iter().map(|&(a, b, _)| Edge::new(a, b)).collect(),
            pair_prior,
            camera_origin: Point::new(-0.4, 0.0, 0.5),
            workspace: Aabb::new(Point::new(0.0, -0.25, 0.0), Point::new(0.5, 0.25, 0.3)),
            ground_truth: None,
        })
        .unwrap()
    }

    fn ids(c: &Composition) -> Vec<Vec<u32>> {
        c.hypotheses.iter().map(|h| h.ids().to_vec()).collect()
    }

    #[test]
    fn components_without_edges_are_singletons() {
        let s = scene(3, &[(1, 2, 0.5), (2, 3, 0.5)], &[]);
        let m = ConnectionModel::new(&s);
        assert_eq!(
            ids(&m.components(&EdgeAssignment::zeros(2))),
            vec![vec![1], vec![2], vec![3]]
        );
        assert_eq!(ids(&m.components(&EdgeAssignment::ones(2))), vec![vec![1, 2, 3]]);
    }

    #[test]
    fn components_of_two_pairs() {
        let s = scene(5, &[(1, 2, 0.5), (2, 3, 0.5), (3, 4, 0.5)], &[]);
        let m = ConnectionModel::new(&s);
        let a: EdgeAssignment = "101".parse().unwrap();
        assert_eq!(ids(&m.components(&a)), vec![vec![1, 2], vec![3, 4], vec![5]]);
    }

    #[test]
    fn link_probability_of_isolated_pair_is_the_prior() {
        let s = scene(2, &[(1, 2, 0.7)], &[]);
        let m = ConnectionModel::new(&s);
        let lp = m.link_probability(&EdgeAssignment::zeros(1), 0);
        assert!((lp.p_connect - 0.7).abs() < 1e-12);
    }

    #[test]
    fn link_probability_over_components() {
        // U = {1,3} via edge (1,3); V = {2}. Cross pairs (1,2) 0.9 and (3,2) 0.1.
        let s = scene(3, &[(1, 2, 0.9), (1, 3, 0.5)], &[(2, 3, 0.1)]);
        let m = ConnectionModel::new(&s);
        let lp = m.link_probability(&"01".parse().unwrap(), 0);
        let oracle = (0.9 * 0.1) / (0.9 * 0.1 + 0.1 * 0.9);
        assert!((lp.p_connect - oracle).abs() < 1e-12);
        assert!((lp.connected() - 0.09).abs() < 1e-12);
        assert!((lp.disconnected() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn indirectly_connected_pair_uses_its_prior() {
        let s = scene(3, &[(1, 2, 0.7), (2, 3, 0.2), (1, 3, 0.05)], &[]);
        let m = ConnectionModel::new(&s);
        let lp = m.link_probability(&"011".parse().unwrap(), 0);
        assert!(lp.indirect);
        assert!((lp.p_connect - 0.7).abs() < 1e-12);
    }

    #[test]
    fn missing_cross_prior_defaults_to_half() {
        // U = {1,3}, V = {2}; only (1,2) has a prior, (2,3) falls back to 0.5.
        let s = scene(3, &[(1, 2, 0.8), (1, 3, 0.5)], &[]);
        let m = ConnectionModel::new(&s);
        let lp = m.link_probability(&"01".parse().unwrap(), 0);
        assert!((lp.p_connect - 0.8).abs() < 1e-12);
    }

    #[test]
    fn gibbs_threshold_rule() {
        let s = scene(2, &[(1, 2, 0.7)], &[]);
        let m = ConnectionModel::new(&s);
        let off = EdgeAssignment::zeros(1);
        assert!(m.gibbs_step(&off, 0, 0.5).get(0));
        assert!(!m.gibbs_step(&off, 0, 0.99).get(0));
        assert!(m.gibbs_step(&off, 0, 0.0).get(0));
        assert!(!m.gibbs_step(&off, 0, 0.7).get(0), "a tie disables the edge");
    }

    #[test]
    fn large_components_do_not_underflow() {
        // 40 segments in two chains of 20 with tiny cross priors.
        let mut edges = Vec::new();
        for k in 1..20 {
            edges.push((k, k + 1, 0.9));
            edges.push((20 + k, 21 + k, 0.9));
        }
        edges.push((20, 21, 0.5));
        let mut extra = Vec::new();
        for u in 1..=20 {
            for v in 21..=40 {
                if (u, v) != (20, 21) {
                    extra.push((u, v, 1e-4));
                }
            }
        }
        let s = scene(40, &edges, &extra);
        let m = ConnectionModel::new(&s);
        let w = s
            .candidate_edges()
            .iter()
            .position(|e| *e == Edge::new(20, 21))
            .unwrap();
        let mut a = EdgeAssignment::ones(edges.len());
        a.set(w, false);
        let lp = m.link_probability(&a, w);
        assert!(lp.ln_connected.is_finite() && lp.ln_connected < -3000.0);
        assert_eq!(lp.connected(), 0.0);
        assert!(lp.p_connect >= 0.0 && lp.p_connect < 1e-300);
    }

    #[test]
    fn ordering_is_lexicographic_over_bits() {
        let a: EdgeAssignment = "0111".parse().unwrap();
        let b: EdgeAssignment = "1000".parse().unwrap();
        assert!(a < b);
        let long_a = EdgeAssignment::from_bits((0..70).map(|k| k == 69));
        let long_b = EdgeAssignment::from_bits((0..70).map(|k| k == 0));
        assert!(long_a < long_b);
    }

    #[test]
    fn assignment_serializes_as_bit_string() {
        let a: EdgeAssignment = "0110".parse().unwrap();
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(text, "\"0110\"");
        assert_eq!(serde_json::from_str::<EdgeAssignment>(&text).unwrap(), a);
    }

    proptest! {
        #[test]
        fn gibbs_step_is_pure(bits in prop::collection::vec(any::<bool>(), 5), w in 0usize..5, q in 0.0f64..1.0) {
            let s = scene(5, &[(1, 2, 0.3), (2, 3, 0.6), (3, 4, 0.8), (1, 4, 0.4), (4, 5, 0.2)], &[]);
            let m = ConnectionModel::new(&s);
            let a = EdgeAssignment::from_bits(bits);
            let x = m.gibbs_step(&a, w, q);
            let y = m.gibbs_step(&a, w, q);
            prop_assert_eq!(&x, &y);
            for k in 0..5 {
                if k != w {
                    prop_assert_eq!(x.get(k), a.get(k));
                }
            }
        }

        #[test]
        fn connectivity_ignores_edge_order(bits in prop::collection::vec(any::<bool>(), 6), rot in 0usize..6) {
            let edges = [(1, 2, 0.5), (2, 3, 0.5), (3, 4, 0.5), (4, 5, 0.5), (5, 6, 0.5), (1, 6, 0.5)];
            let s = scene(6, &edges, &[]);
            let m = ConnectionModel::new(&s);
            let mut rotated = edges.to_vec();
            rotated.rotate_left(rot);
            let s2 = scene(6, &rotated, &[]);
            let m2 = ConnectionModel::new(&s2);
            // Map the bits onto the second scene's (sorted) edge order.
            let enabled: Vec<Edge> = s.candidate_edges().iter().zip(&bits).filter(|(_, b)| **b).map(|(e, _)| *e).collect();
            let a2 = EdgeAssignment::from_bits(s2.candidate_edges().iter().map(|e| enabled.contains(e)));
            prop_assert_eq!(
                m.components(&EdgeAssignment::from_bits(bits)).hypotheses,
                m2.components(&a2).hypotheses
            );
        }

        #[test]
        fn components_partition_segments(bits in prop::collection::vec(any::<bool>(), 5)) {
            let s = scene(6, &[(1, 2, 0.3), (2, 3, 0.6), (3, 4, 0.8), (1, 4, 0.4), (5, 6, 0.2)], &[]);
            let m = ConnectionModel::new(&s);
            let a = EdgeAssignment::from_bits(bits);
            let c = m.components(&a);
            let mut all: Vec<u32> = c.hypotheses.iter().flat_map(|h| h.ids().to_vec()).collect();
            all.sort();
            prop_assert_eq!(all, vec![1, 2, 3, 4, 5, 6]);
            // Enabled edges never cross hypotheses.
            for (k, e) in s.candidate_edges().iter().enumerate() {
                if a.get(k) {
                    prop_assert_eq!(c.hypothesis_of(e.a()), c.hypothesis_of(e.b()));
                }
            }
        }
    }
}
