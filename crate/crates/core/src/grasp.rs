//! Top-down grasps: synthesis by planar PCA, cross-hypothesis quality, the
//! clearance check and the success model.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, planar, Point};
use crate::scene::Fingerprint;

/// Planar grid used to even out point density before PCA.
pub const THINNING_CELL: f64 = 0.005;
/// Radius of the vertical clearance cylinder above each contact.
pub const FINGER_CLEARANCE: f64 = 0.015;
/// Planar radius around a point that still counts as inside its hypothesis.
pub const FOOTPRINT_RADIUS: f64 = 0.004;
/// Occlusion-dependent success: `OCC_MIN + (OCC_MAX - OCC_MIN) * visible_fraction`.
pub const OCC_MIN: f64 = 0.30;
pub const OCC_MAX: f64 = 0.95;

const EIGEN_TIE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Table,
    RedBox,
    GreenBox,
    Removed,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Location::Table => "table",
            Location::RedBox => "red_box",
            Location::GreenBox => "green_box",
            Location::Removed => "removed",
        })
    }
}

/// Grasp geometry, computed for one hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub contact_a: Point,
    pub contact_b: Point,
    pub centroid: Point,
    /// Rotation of the closing direction about the vertical, in `[0, pi)`.
    pub hand_rotation: f64,
    pub finger_distance: f64,
    pub optimized_for: Fingerprint,
}

impl Grasp {
    /// Identity used by the grasp history: same target and same contacts to 0.1 mm.
    pub fn key(&self) -> GraspKey {
        let q = |p: &Point| [p.x, p.y, p.z].map(|c| (c * 1e4).round() as i64);
        GraspKey {
            optimized_for: self.optimized_for.clone(),
            contacts: [q(&self.contact_a), q(&self.contact_b)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GraspKey {
    pub optimized_for: Fingerprint,
    pub contacts: [[i64; 3]; 2],
}

impl GraspKey {
    /// Stable 64-bit digest, used where a compact identity is enough.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        for id in self.optimized_for.ids() {
            h.write(&id.to_le_bytes());
        }
        for c in self.contacts.iter().flatten() {
            h.write(&c.to_le_bytes());
        }
        h.finish()
    }
}

// FNV-1a, stable across platforms and releases.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspAction {
    #[serde(flatten)]
    pub grasp: Grasp,
    pub destination: Location,
}

/// Planar footprint of a hypothesis with the data grasp evaluation needs.
#[derive(Clone, Debug)]
pub struct Shape {
    pub fingerprint: Fingerprint,
    pub points: Vec<Point>,
    /// Thinned planar cloud (cell means).
    pub thinned: Vec<Vector2<f64>>,
    pub plane_z: f64,
    /// Planar grasp centroid (mean of the thinned cloud).
    pub center: Vector2<f64>,
    cells: HashMap<(i64, i64), Vec<Vector2<f64>>>,
}

fn cell_of(p: &Vector2<f64>, size: f64) -> (i64, i64) {
    ((p.x / size).floor() as i64, (p.y / size).floor() as i64)
}

impl Shape {
    pub fn new(fingerprint: Fingerprint, points: Vec<Point>) -> Self {
        let thinned = thin(&points, THINNING_CELL);
        let plane_z = points.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
        let center = if thinned.is_empty() {
            Vector2::zeros()
        } else {
            thinned.iter().sum::<Vector2<f64>>() / thinned.len() as f64
        };
        let mut cells: HashMap<(i64, i64), Vec<Vector2<f64>>> = HashMap::new();
        for p in &points {
            let v = planar(p);
            cells.entry(cell_of(&v, FOOTPRINT_RADIUS)).or_default().push(v);
        }
        Shape {
            fingerprint,
            points,
            thinned,
            plane_z,
            center,
            cells,
        }
    }

    /// Is the planar point within [`FOOTPRINT_RADIUS`] of the projected cloud?
    pub fn contains_planar(&self, p: &Vector2<f64>) -> bool {
        let (cx, cy) = cell_of(p, FOOTPRINT_RADIUS);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(pts) = self.cells.get(&(cx + dx, cy + dy)) {
                    if pts.iter().any(|q| (q - p).norm() <= FOOTPRINT_RADIUS) {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Projected cloud point nearest to `p`.
    pub fn nearest_planar(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.points
            .iter()
            .map(planar)
            .min_by(|a, b| (a - p).norm_squared().total_cmp(&(b - p).norm_squared()))
            .expect("shapes are never empty")
    }

    pub fn synthesize_grasp(&self) -> Result<Grasp> {
        synthesize_grasp(&self.fingerprint, &self.points)
    }
}

/// One point per occupied planar cell (the cell mean), cells anchored at the
/// cloud's bounding-box minimum.
pub fn thin(points: &[Point], cell: f64) -> Vec<Vector2<f64>> {
    if points.is_empty() {
        return Vec::new();
    }
    let min_x = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let min_y = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let mut cells: BTreeMap<(i64, i64), (Vector2<f64>, usize)> = BTreeMap::new();
    for p in points {
        let key = (
            ((p.x - min_x) / cell).round() as i64,
            ((p.y - min_y) / cell).round() as i64,
        );
        let e = cells.entry(key).or_insert((Vector2::zeros(), 0));
        e.0 += planar(p);
        e.1 += 1;
    }
    cells.into_values().map(|(sum, n)| sum / n as f64).collect()
}

/// Top-down grasp across the narrow direction of a cloud.
pub fn synthesize_grasp(fingerprint: &Fingerprint, points: &[Point]) -> Result<Grasp> {
    if points.len() < 3 {
        return Err(Error::NoStableGrasp(format!(
            "{fingerprint} has {} points",
            points.len()
        )));
    }
    let plane_z = points.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
    let thinned = thin(points, THINNING_CELL);
    if thinned.len() < 3 {
        return Err(Error::NoStableGrasp(format!(
            "{fingerprint} covers fewer than 3 grid cells"
        )));
    }
    let c2 = thinned.iter().sum::<Vector2<f64>>() / thinned.len() as f64;
    let c1 = centroid(points).expect("non-empty");
    let lift = (c1 - Point::new(c2.x, c2.y, plane_z)).norm();
    let grasp_centroid = Point::new(c2.x, c2.y, plane_z - lift);

    let mut cov = Matrix2::zeros();
    for p in &thinned {
        let d = p - c2;
        cov += d * d.transpose();
    }
    cov /= thinned.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let (major, minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let (l_major, l_minor) = (eig.eigenvalues[major], eig.eigenvalues[minor]);
    if l_minor <= EIGEN_TIE {
        return Err(Error::NoStableGrasp(format!(
            "{fingerprint} is collinear in the wrist plane"
        )));
    }
    let axis = if l_major - l_minor <= EIGEN_TIE {
        // Any direction is principal; take the lexicographically smaller coordinate axis.
        Vector2::new(0.0, 1.0)
    } else {
        let v: Vector2<f64> = eig.eigenvectors.column(minor).into();
        canonical_axis(v.normalize())
    };

    let center = planar(&grasp_centroid);
    let radius = points.iter().map(|p| (planar(p) - center).norm()).fold(0.0, f64::max);
    let reach = 2.0 * radius.max(THINNING_CELL);
    let contact_a = nearest_contact(points, &(center + axis * reach));
    let contact_b = nearest_contact(points, &(center - axis * reach));
    if (contact_a - contact_b).norm() < 1e-9 {
        return Err(Error::NoStableGrasp(format!(
            "{fingerprint} yields coincident contacts"
        )));
    }
    Ok(Grasp {
        contact_a,
        contact_b,
        centroid: grasp_centroid,
        hand_rotation: axis.y.atan2(axis.x).rem_euclid(std::f64::consts::PI),
        finger_distance: (contact_a - contact_b).norm(),
        optimized_for: fingerprint.clone(),
    })
}

// Sign convention for a line direction: positive x, or positive y on the y axis.
fn canonical_axis(v: Vector2<f64>) -> Vector2<f64> {
    if v.x < -1e-12 || (v.x.abs() <= 1e-12 && v.y < 0.0) {
        -v
    } else {
        v
    }
}

// Nearest cloud point in the plane; ties go to the higher point, then the earlier one.
fn nearest_contact(points: &[Point], target: &Vector2<f64>) -> Point {
    let mut best = points[0];
    let mut best_d = (planar(&best) - target).norm();
    for p in &points[1..] {
        let d = (planar(p) - target).norm();
        if d < best_d - 1e-12 || ((d - best_d).abs() <= 1e-12 && p.z > best.z) {
            best = *p;
            best_d = d;
        }
    }
    best
}

/// Does any of `obstacles` sit in the clearance cylinder above a contact?
pub fn blocked<'a>(grasp: &Grasp, obstacles: impl IntoIterator<Item = &'a Point>) -> bool {
    obstacles.into_iter().any(|p| blocks(grasp, p))
}

/// Single-point version of [`blocked`].
pub fn blocks(grasp: &Grasp, p: &Point) -> bool {
    [grasp.contact_a, grasp.contact_b]
        .iter()
        .any(|c| p.z > c.z + 1e-3 && (planar(p) - planar(c)).norm() <= FINGER_CLEARANCE)
}

/// Quality in `[0, 1]` of `grasp` when applied to `target`.
pub fn grasp_quality(grasp: &Grasp, target: &Shape) -> f64 {
    if grasp.optimized_for == target.fingerprint {
        return 1.0;
    }
    let a = planar(&grasp.contact_a);
    let b = planar(&grasp.contact_b);
    let Some((y1, y2)) = inside_span(target, &a, &b) else {
        return 0.0;
    };
    let c_y = (y1 + y2) / 2.0;
    let c_x = target.center;
    let offset = c_y - c_x;
    if offset.norm() < 1e-9 {
        return 1.0;
    }
    let extent = target
        .points
        .iter()
        .map(|p| (planar(p) - c_x).norm())
        .fold(0.0, f64::max);
    let far = c_x + offset.normalize() * (2.0 * extent + offset.norm() + FOOTPRINT_RADIUS);
    let x1 = target.nearest_planar(&far);
    let denom = (c_x - x1).norm();
    if denom < 1e-9 {
        return 1.0;
    }
    ((c_y - x1).norm() / denom).clamp(0.0, 1.0)
}

// First and last points of the segment a-b inside the target footprint.
fn inside_span(target: &Shape, a: &Vector2<f64>, b: &Vector2<f64>) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let len = (b - a).norm();
    let steps = ((len / 0.001).ceil() as usize).max(1);
    let at = |s: f64| a + (b - a) * s;
    let inside = |s: f64| target.contains_planar(&at(s));
    let ts: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let first = ts.iter().position(|&s| inside(s))?;
    let last = ts.iter().rposition(|&s| inside(s)).expect("first exists");
    let refine = |mut out: f64, mut inn: f64| {
        for _ in 0..30 {
            let mid = 0.5 * (out + inn);
            if inside(mid) {
                inn = mid;
            } else {
                out = mid;
            }
        }
        inn
    };
    let s1 = if first == 0 {
        0.0
    } else {
        refine(ts[first - 1], ts[first])
    };
    let s2 = if last == steps {
        1.0
    } else {
        refine(ts[last + 1], ts[last])
    };
    Some((at(s1), at(s2)))
}

/// Occlusion-dependent success factor.
pub fn occlusion_success(visible_fraction: f64) -> f64 {
    OCC_MIN + (OCC_MAX - OCC_MIN) * visible_fraction.clamp(0.0, 1.0)
}

/// Success probability of a grasp on one hypothesis.
pub fn success_probability(quality: f64, visible_fraction: f64, is_blocked: bool, failed_before: bool) -> f64 {
    if is_blocked || failed_before {
        0.0
    } else {
        quality * occlusion_success(visible_fraction)
    }
}

/// FNV-1a hash of a sorted occluder id list.
pub fn occlusion_signature(occluders: &[u32]) -> u64 {
    let mut sorted = occluders.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut h = Fnv::new();
    for id in sorted {
        h.write(&id.to_le_bytes());
    }
    h.finish()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) fn box_cloud(min: [f64; 3], max: [f64; 3]) -> Vec<Point> {
        crate::geometry::surface_points(&crate::geometry::Aabb::new(Point::from(min), Point::from(max)), 0.005)
    }

    fn shape(id: u32, min: [f64; 3], max: [f64; 3]) -> Shape {
        Shape::new(Fingerprint::from([id]), box_cloud(min, max))
    }

    #[test]
    fn elongated_box_is_grasped_across() {
        let s = shape(1, [0.10, 0.00, 0.0], [0.20, 0.03, 0.03]);
        let g = s.synthesize_grasp().unwrap();
        assert_relative_eq!(g.hand_rotation, std::f64::consts::FRAC_PI_2, epsilon = 1e-6);
        let ys = [g.contact_a.y, g.contact_b.y];
        assert!(ys.iter().any(|y| (y - 0.03).abs() <= THINNING_CELL));
        assert!(ys.iter().any(|y| y.abs() <= THINNING_CELL));
        assert!((g.contact_a.x - 0.15).abs() <= THINNING_CELL);
        assert_relative_eq!(g.finger_distance, (g.contact_a - g.contact_b).norm(), epsilon = 1e-12);
        assert_eq!(g.contact_a.z, 0.03, "contacts prefer the top edge");
    }

    #[test]
    fn symmetric_cloud_breaks_tie_deterministically() {
        let s = shape(1, [0.10, 0.00, 0.0], [0.14, 0.04, 0.02]);
        let g1 = s.synthesize_grasp().unwrap();
        let g2 = s.synthesize_grasp().unwrap();
        assert_eq!(g1, g2);
        assert_relative_eq!(g1.hand_rotation, std::f64::consts::FRAC_PI_2, epsilon = 1e-9);
    }

    #[test]
    fn tiny_clouds_have_no_grasp() {
        let fp = Fingerprint::from([3]);
        let two = vec![Point::new(0.0, 0.0, 0.0), Point::new(0.01, 0.0, 0.0)];
        assert!(matches!(synthesize_grasp(&fp, &two), Err(Error::NoStableGrasp(_))));
        let line: Vec<Point> = (0..20).map(|k| Point::new(0.005 * k as f64, 0.0, 0.01)).collect();
        assert!(matches!(synthesize_grasp(&fp, &line), Err(Error::NoStableGrasp(_))));
    }

    #[test]
    fn clearance_cylinder() {
        let s = shape(1, [0.10, 0.00, 0.0], [0.20, 0.03, 0.03]);
        let g = s.synthesize_grasp().unwrap();
        assert!(!blocked(&g, std::iter::empty()));
        let above = g.contact_a + nalgebra::Vector3::new(0.005, 0.0, 0.05);
        assert!(blocked(&g, [&above]));
        let below = Point::new(g.contact_a.x, g.contact_a.y, -0.01);
        assert!(!blocked(&g, [&below]));
        let aside = g.contact_a + nalgebra::Vector3::new(0.02, 0.0, 0.05);
        assert!(!blocked(&g, [&aside]));
    }

    #[test]
    fn own_grasp_has_full_quality() {
        let s = shape(1, [0.10, 0.00, 0.0], [0.20, 0.03, 0.03]);
        assert_eq!(grasp_quality(&s.synthesize_grasp().unwrap(), &s), 1.0);
    }

    #[test]
    fn grasp_line_outside_target_has_zero_quality() {
        let x = shape(1, [0.10, 0.00, 0.0], [0.20, 0.03, 0.03]);
        let y = shape(2, [0.30, 0.00, 0.0], [0.34, 0.06, 0.03]);
        assert_eq!(grasp_quality(&y.synthesize_grasp().unwrap(), &x), 0.0);
    }

    #[test]
    fn midpoint_instance_gives_half() {
        // X is a thin horizontal strip from x=0 to x=0.2; its center sits at
        // x=0.1 and the boundary point opposite the cast is at x=0.2. A grasp
        // line crossing the strip at x=0.15 puts c_Y halfway to x1.
        let strip: Vec<Point> = (0..=40)
            .flat_map(|i| (0..=2).map(move |j| Point::new(0.005 * i as f64, 0.005 * j as f64 - 0.005, 0.02)))
            .collect();
        let x = Shape::new(Fingerprint::from([1]), strip);
        assert_relative_eq!(x.center.x, 0.1, epsilon = 1e-12);
        assert_relative_eq!(x.center.y, 0.0, epsilon = 1e-12);
        let g = Grasp {
            contact_a: Point::new(0.15, -0.05, 0.02),
            contact_b: Point::new(0.15, 0.05, 0.02),
            centroid: Point::new(0.15, 0.0, 0.01),
            hand_rotation: std::f64::consts::FRAC_PI_2,
            finger_distance: 0.1,
            optimized_for: Fingerprint::from([9]),
        };
        assert_relative_eq!(grasp_quality(&g, &x), 0.5, epsilon = 1e-6);
    }

    #[test]
    fn occlusion_model() {
        assert_relative_eq!(success_probability(1.0, 1.0, false, false), 0.95);
        assert_eq!(success_probability(0.0, 1.0, false, false), 0.0);
        assert_eq!(success_probability(1.0, 1.0, false, true), 0.0);
        assert_eq!(success_probability(1.0, 1.0, true, false), 0.0);
        assert_relative_eq!(occlusion_success(0.0), 0.30);
    }

    #[test]
    fn signature_ignores_order() {
        assert_eq!(occlusion_signature(&[3, 1, 2]), occlusion_signature(&[1, 2, 3, 3]));
        assert_ne!(occlusion_signature(&[1, 2]), occlusion_signature(&[1, 3]));
        assert_ne!(occlusion_signature(&[]), occlusion_signature(&[0]));
    }

    #[test]
    fn action_serializes_flat() {
        let s = shape(1, [0.10, 0.00, 0.0], [0.20, 0.03, 0.03]);
        let a = GraspAction {
            grasp: s.synthesize_grasp().unwrap(),
            destination: Location::RedBox,
        };
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.contains("\"destination\":\"red_box\""));
        assert!(json.contains("\"optimized_for\":[1]"));
        let back: GraspAction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }

    proptest! {
        #[test]
        fn quality_is_a_fraction(
            dx in -0.05f64..0.15, dy in -0.05f64..0.08, rot in 0.0f64..std::f64::consts::PI, half in 0.01f64..0.08
        ) {
            let x = shape(1, [0.10, 0.00, 0.0], [0.20, 0.03, 0.03]);
            let c = Point::new(0.10 + dx, dy, 0.03);
            let off = nalgebra::Vector3::new(rot.cos(), rot.sin(), 0.0) * half;
            let g = Grasp {
                contact_a: c + off,
                contact_b: c - off,
                centroid: c,
                hand_rotation: rot,
                finger_distance: 2.0 * half,
                optimized_for: Fingerprint::from([5]),
            };
            let q = grasp_quality(&g, &x);
            prop_assert!((0.0..=1.0).contains(&q));
        }

        #[test]
        fn hand_rotation_in_range(w in 0.02f64..0.1, h in 0.02f64..0.1) {
            let s = shape(1, [0.1, 0.0, 0.0], [0.1 + w, h, 0.02]);
            let g = s.synthesize_grasp().unwrap();
            prop_assert!((0.0..std::f64::consts::PI).contains(&g.hand_rotation));
        }
    }
}
