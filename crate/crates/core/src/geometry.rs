//! Planar primitives for disk neighborhoods: points, closed disks, perimeter
//! discretization, segment/disk intersection and tour length.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use crate::error::GeometryError;

/// Slack applied to every "distance ≤ radius" comparison so that tangent
/// edges still count as touching the (closed) disk.
pub const TANGENCY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

/// A closed disk. The depot is modelled as a disk of radius zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub center: Point,
    pub radius: f64,
}

impl Disk {
    pub const fn new(center: Point, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn contains(&self, p: Point) -> bool {
        self.center.dist(p) <= self.radius + TANGENCY_TOL
    }

    /// Point on the boundary at the given angle.
    pub fn boundary_point(&self, angle: f64) -> Point {
        self.center + Point::new(angle.cos(), angle.sin()) * self.radius
    }
}

/// Closest point of segment `ab` to `p`. A zero-length segment collapses to `a`.
pub fn closest_point_on_segment(a: Point, b: Point, p: Point) -> Point {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Whether segment `ab` meets the closed disk `d` (tangency counts).
///
/// The endpoints are put in a canonical order first so the answer is exactly
/// symmetric in `(a, b)`, rounding included.
pub fn segment_disk_intersects(a: Point, b: Point, d: &Disk) -> bool {
    let (a, b) = if (a.x, a.y) <= (b.x, b.y) { (a, b) } else { (b, a) };
    let q = closest_point_on_segment(a, b, d.center);
    q.dist(d.center) <= d.radius + TANGENCY_TOL
}

/// The perimetral discretization of a disk: `gamma` points at equal central
/// angles `2π/gamma`, starting at `phase`.
pub fn pds_points(d: &Disk, gamma: usize, phase: f64) -> Result<Vec<Point>, GeometryError> {
    if gamma == 0 {
        return Err(GeometryError::ZeroGamma);
    }
    Ok((0..gamma)
        .map(|k| d.boundary_point(phase + 2.0 * PI * k as f64 / gamma as f64))
        .collect())
}

/// Sum of consecutive edge lengths, plus the closing edge back to the first
/// waypoint when `closed` is set. A single waypoint has length zero.
pub fn tour_length(waypoints: &[Point], closed: bool) -> f64 {
    let mut total: f64 = waypoints.windows(2).map(|w| w[0].dist(w[1])).sum();
    if closed && waypoints.len() > 1 {
        total += waypoints[waypoints.len() - 1].dist(waypoints[0]);
    }
    total
}
