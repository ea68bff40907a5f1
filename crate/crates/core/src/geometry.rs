//! Small geometric helpers shared by the scene, occlusion and grasp code.

use nalgebra::{Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub type Point = Point3<f64>;

/// Axis-aligned box in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn new(min: Point, max: Point) -> Self {
        Aabb { min, max }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|k| self.min[k] < self.max[k])
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Strict interior test.
    pub fn contains_strictly(&self, p: &Point) -> bool {
        (0..3).all(|k| p[k] > self.min[k] && p[k] < self.max[k])
    }

    pub fn floor_area(&self) -> f64 {
        (self.max.x - self.min.x) * (self.max.y - self.min.y)
    }

    pub fn center(&self) -> Point {
        nalgebra::center(&self.min, &self.max)
    }

    /// Parametric interval `[t_enter, t_exit]` where `origin + t * dir` lies in the box.
    pub fn ray_interval(&self, origin: &Point, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-300 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let mut a = (self.min[k] - origin[k]) * inv;
            let mut b = (self.max[k] - origin[k]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    /// Does the open segment `from -> to` pass through the box interior?
    pub fn blocks_segment(&self, from: &Point, to: &Point) -> bool {
        let dir = to - from;
        match self.ray_interval(from, &dir) {
            Some((t0, t1)) => {
                let lo = t0.max(1e-9);
                let hi = t1.min(1.0 - 1e-9);
                // Require a non-degenerate overlap through the interior so grazing a face does not count.
                hi - lo > 1e-9 && self.contains_strictly(&(from + dir * (0.5 * (lo + hi))))
            }
            None => false,
        }
    }

    /// Euclidean gap between two boxes (0 when they touch or overlap).
    pub fn gap(&self, other: &Aabb) -> f64 {
        let mut sq = 0.0;
        for k in 0..3 {
            let d = (other.min[k] - self.max[k]).max(self.min[k] - other.max[k]).max(0.0);
            sq += d * d;
        }
        sq.sqrt()
    }
}

pub fn planar(p: &Point) -> Vector2<f64> {
    Vector2::new(p.x, p.y)
}

pub fn centroid<'a>(points: impl IntoIterator<Item = &'a Point>) -> Option<Point> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for p in points {
        sum += p.coords;
        n += 1;
    }
    (n > 0).then(|| Point::from(sum / n as f64))
}

/// Lattice points on the top face and the four side faces of a box.
///
/// The spacing along each axis is the largest value not above `step` that
/// divides the side evenly, so edges and corners are always sampled.
pub fn surface_points(b: &Aabb, step: f64) -> Vec<Point> {
    let count = |k: usize| (((b.max[k] - b.min[k]) / step).ceil() as usize).max(1);
    let (nx, ny, nz) = (count(0), count(1), count(2));
    let at = |k: usize, i: usize, n: usize| b.min[k] + (b.max[k] - b.min[k]) * i as f64 / n as f64;
    let mut pts = Vec::new();
    for i in 0..=nx {
        for j in 0..=ny {
            let (x, y) = (at(0, i, nx), at(1, j, ny));
            pts.push(Point::new(x, y, b.max.z));
            if i == 0 || j == 0 || i == nx || j == ny {
                for k in 0..nz {
                    pts.push(Point::new(x, y, at(2, k, nz)));
                }
            }
        }
    }
    pts
}
