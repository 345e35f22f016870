//! Convex polygons, obstacle shapes and motion, and the conversion of collision zones
//! into angular restrictions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervals::{Interval, RestrictionSet};

/// Vertex count of the polygon approximating a circle (step region and inflation disk).
pub const CIRCLE_SEGMENTS: usize = 64;

/// Restricted spans narrower than this (degrees) are discarded as degenerate.
pub const MIN_SPAN_DEG: f64 = 1e-6;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    #[inline]
    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    #[inline]
    pub fn scale(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    #[inline]
    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    #[inline]
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn dist(self, o: Point2) -> f64 {
        self.sub(o).norm()
    }

    /// Direction angle in degrees, in (−180, 180].
    #[inline]
    pub fn angle_deg(self) -> f64 {
        self.y.atan2(self.x).to_degrees()
    }

    /// Unit vector at `deg` degrees.
    #[inline]
    pub fn from_angle_deg(deg: f64) -> Point2 {
        let r = deg.to_radians();
        Point2::new(r.cos(), r.sin())
    }
}

/// Wraps an angle into `[0, 360)`.
pub fn normalize_360(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    if d >= 360.0 {
        0.0
    } else {
        d
    }
}

/// Wraps an angle into `(−180, 180]`.
pub fn normalize_180(deg: f64) -> f64 {
    let d = normalize_360(deg);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Agent position and heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Point2,
    /// Heading in degrees, `[0, 360)`.
    pub perspective: f64,
}

impl Pose {
    pub fn new(position: Point2, perspective: f64) -> Self {
        Self {
            position,
            perspective: normalize_360(perspective),
        }
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point2,
    pub max: Point2,
}

impl Aabb {
    pub fn distance_to(&self, p: Point2) -> f64 {
        let dx = (self.min.x - p.x).max(0.0).max(p.x - self.max.x);
        let dy = (self.min.y - p.y).max(0.0).max(p.y - self.max.y);
        dx.hypot(dy)
    }
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

impl ConvexPolygon {
    /// Validates at least three vertices, CCW order and strict convexity.
    pub fn new(vertices: Vec<Point2>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "polygon needs >= 3 vertices, got {}",
                vertices.len()
            )));
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if !(a.x.is_finite() && a.y.is_finite()) {
                return Err(Error::InvalidArgument("non-finite polygon vertex".into()));
            }
            if b.sub(a).cross(c.sub(b)) <= 0.0 {
                return Err(Error::InvalidArgument(
                    "polygon must be strictly convex and counter-clockwise".into(),
                ));
            }
        }
        Ok(Self { vertices })
    }

    fn from_ccw(vertices: Vec<Point2>) -> Self {
        Self { vertices }
    }

    /// Regular `n`-gon inscribed in the circle, first vertex at `phase_deg`.
    pub fn regular(center: Point2, radius: f64, n: usize, phase_deg: f64) -> Self {
        let vertices = (0..n)
            .map(|k| {
                let a = (phase_deg + 360.0 * k as f64 / n as f64).to_radians();
                Point2::new(center.x + radius * a.cos(), center.y + radius * a.sin())
            })
            .collect();
        Self::from_ccw(vertices)
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(vec![
            Point2::new(x0, y0),
            Point2::new(x1, y0),
            Point2::new(x1, y1),
            Point2::new(x0, y1),
        ])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| a.cross(b)).sum::<f64>()
    }

    /// Vertex average (inside the polygon by convexity).
    pub fn vertex_mean(&self) -> Point2 {
        let n = self.vertices.len() as f64;
        let s = self.vertices.iter().fold(Point2::default(), |acc, v| acc.add(*v));
        s.scale(1.0 / n)
    }

    pub fn translate(&self, d: Point2) -> Self {
        Self::from_ccw(self.vertices.iter().map(|v| v.add(d)).collect())
    }

    pub fn aabb(&self) -> Aabb {
        let mut min = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            min.x = min.x.min(v.x);
            min.y = min.y.min(v.y);
            max.x = max.x.max(v.x);
            max.y = max.y.max(v.y);
        }
        Aabb { min, max }
    }

    /// Closed containment with a small tolerance.
    pub fn contains(&self, p: Point2) -> bool {
        self.edges().all(|(a, b)| b.sub(a).cross(p.sub(a)) >= -EPS)
    }

    /// Euclidean distance from a point to the polygon (0 inside).
    pub fn distance_to_point(&self, p: Point2) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Minimum distance between the segment `[p, q]` and the polygon (0 on contact).
    pub fn distance_to_segment(&self, p: Point2, q: Point2) -> f64 {
        if self.contains(p) || self.contains(q) {
            return 0.0;
        }
        self.edges()
            .map(|(a, b)| segment_segment_distance(p, q, a, b))
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a.add(ab.scale(t)))
}

fn segments_intersect(p: Point2, q: Point2, a: Point2, b: Point2) -> bool {
    let d1 = q.sub(p).cross(a.sub(p));
    let d2 = q.sub(p).cross(b.sub(p));
    let d3 = b.sub(a).cross(p.sub(a));
    let d4 = b.sub(a).cross(q.sub(a));
    (d1 * d2 <= 0.0) && (d3 * d4 <= 0.0) && !(d1 == 0.0 && d2 == 0.0 && d3 == 0.0 && d4 == 0.0)
}

pub fn segment_segment_distance(p: Point2, q: Point2, a: Point2, b: Point2) -> f64 {
    if segments_intersect(p, q, a, b) {
        return 0.0;
    }
    point_segment_distance(p, a, b)
        .min(point_segment_distance(q, a, b))
        .min(point_segment_distance(a, p, q))
        .min(point_segment_distance(b, p, q))
}

/// Convex hull (CCW, collinear points removed), Andrew's monotone chain.
fn convex_hull(mut pts: Vec<Point2>) -> Vec<Point2> {
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| (a.x - b.x).abs() < EPS && (a.y - b.y).abs() < EPS);
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: Point2, a: Point2, b: Point2| a.sub(o).cross(b.sub(o));
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= EPS {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= EPS {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// The four obstacle shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Rectangle,
    Trapeze,
    Triangle,
    Octagon,
}

impl Form {
    pub const ALL: [Form; 4] = [Form::Rectangle, Form::Trapeze, Form::Triangle, Form::Octagon];
}

/// Deterministic vertex layout of a form, inscribed in the circle of `radius`.
///
/// Rectangle: square with corners on the diagonals. Triangle: equilateral, apex up.
/// Trapeze: isosceles, bottom corners at 210°/330°, top width half the bottom width.
/// Octagon: regular, vertices at 22.5° + k·45°.
pub fn canonical_polygon(form: Form, center: Point2, radius: f64) -> ConvexPolygon {
    match form {
        Form::Rectangle => ConvexPolygon::regular(center, radius, 4, 45.0),
        Form::Triangle => ConvexPolygon::regular(center, radius, 3, 90.0),
        Form::Octagon => ConvexPolygon::regular(center, radius, 8, 22.5),
        Form::Trapeze => {
            let bottom = radius * (PI / 6.0).cos();
            let top = 0.5 * bottom;
            let top_y = (radius * radius - top * top).sqrt();
            let v = |x: f64, y: f64| Point2::new(center.x + x, center.y + y);
            ConvexPolygon::from_ccw(vec![
                v(-bottom, -0.5 * radius),
                v(bottom, -0.5 * radius),
                v(top, top_y),
                v(-top, top_y),
            ])
        }
    }
}

/// Minkowski sum of `poly` with a disk of radius `margin`.
///
/// The disk is approximated by the regular 64-gon inscribed in it with a vertex at 0°.
/// Using one fixed disk polygon keeps the operation additive,
/// `inflate(inflate(p, a), b) = inflate(p, a + b)`, and gives each right-angle corner
/// an arc of 16 segments. The result lies inside the exact offset and its edges are at
/// least `margin · cos(π/64)` from the original.
pub fn inflate(poly: &ConvexPolygon, margin: f64) -> ConvexPolygon {
    if margin <= 0.0 {
        return poly.clone();
    }
    let disk = ConvexPolygon::regular(Point2::default(), margin, CIRCLE_SEGMENTS, 0.0);
    let mut pts = Vec::with_capacity(poly.vertices.len() * CIRCLE_SEGMENTS);
    for v in &poly.vertices {
        pts.extend(disk.vertices.iter().map(|d| v.add(*d)));
    }
    ConvexPolygon::from_ccw(convex_hull(pts))
}

/// Intersection of two convex polygons by half-plane clipping; `None` when it has no area.
pub fn convex_clip(subject: &ConvexPolygon, clip: &ConvexPolygon) -> Option<ConvexPolygon> {
    let mut out: Vec<Point2> = subject.vertices.clone();
    for (a, b) in clip.edges() {
        if out.is_empty() {
            break;
        }
        let edge = b.sub(a);
        let side = |p: Point2| edge.cross(p.sub(a));
        let input = std::mem::take(&mut out);
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let next = input[(i + 1) % n];
            let (sc, sn) = (side(cur), side(next));
            if sc >= 0.0 {
                out.push(cur);
            }
            if (sc >= 0.0) != (sn >= 0.0) {
                let t = sc / (sc - sn);
                out.push(cur.add(next.sub(cur).scale(t)));
            }
        }
    }
    out.dedup_by(|a, b| a.dist(*b) < EPS);
    while out.len() > 1 && out[0].dist(out[out.len() - 1]) < EPS {
        out.pop();
    }
    if out.len() < 3 {
        return None;
    }
    let poly = ConvexPolygon::from_ccw(out);
    if poly.area() <= EPS * EPS {
        return None;
    }
    Some(poly)
}

/// Converts an absolute heading arc `[start, start + extent]` (degrees) into open
/// intervals relative to `perspective`, split at the ±180° seam.
fn push_relative_arc(out: &mut Vec<Interval>, perspective: f64, start: f64, extent: f64) {
    if extent < MIN_SPAN_DEG {
        return;
    }
    if extent >= 360.0 {
        out.push(Interval {
            low: -180.0,
            high: 180.0,
        });
        return;
    }
    let lo = normalize_180(start - perspective);
    let hi = lo + extent;
    if hi <= 180.0 {
        out.push(Interval { low: lo, high: hi });
    } else {
        out.push(Interval { low: lo, high: 180.0 });
        out.push(Interval {
            low: -180.0,
            high: hi - 360.0,
        });
    }
}

/// Restricted action angles (relative to `pose.perspective`) for one collision zone.
///
/// `zone` must already include every safety margin. From outside the zone the
/// restriction is the angular span of the intersection between the step region and the
/// zone. From inside it, every direction whose one-step endpoint remains in the zone is
/// restricted.
pub fn restricted_angles(pose: &Pose, zone: &ConvexPolygon, step: f64) -> RestrictionSet {
    let agent = pose.position;
    if zone.aabb().distance_to(agent) > step {
        return RestrictionSet::empty();
    }
    let step_region = ConvexPolygon::regular(agent, step, CIRCLE_SEGMENTS, 0.0);
    let mut arcs = Vec::new();
    if !zone.contains(agent) {
        let Some(inter) = convex_clip(&step_region, zone) else {
            return RestrictionSet::empty();
        };
        let base = inter.vertex_mean().sub(agent).angle_deg();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in inter.vertices() {
            let rel = normalize_180(v.sub(agent).angle_deg() - base);
            lo = lo.min(rel);
            hi = hi.max(rel);
        }
        push_relative_arc(&mut arcs, pose.perspective, base + lo, hi - lo);
    } else {
        let mut any_outside = false;
        for (k, (a, b)) in step_region.edges().enumerate() {
            let Some((t0, t1)) = clip_segment(a, b, zone) else {
                any_outside = true;
                continue;
            };
            if t0 > 0.0 || t1 < 1.0 {
                any_outside = true;
            }
            let phi = 360.0 * k as f64 / CIRCLE_SEGMENTS as f64;
            let angle_at = |t: f64| {
                let p = a.add(b.sub(a).scale(t));
                phi + normalize_180(p.sub(agent).angle_deg() - phi)
            };
            let (s, e) = (angle_at(t0), angle_at(t1));
            push_relative_arc(&mut arcs, pose.perspective, s, e - s);
        }
        if !any_outside {
            return RestrictionSet::from_unsorted([Interval {
                low: -180.0,
                high: 180.0,
            }]);
        }
    }
    RestrictionSet::from_unsorted(arcs)
}

/// Parameter range `[t0, t1] ⊆ [0, 1]` of the segment `a + t(b − a)` inside `poly`.
fn clip_segment(a: Point2, b: Point2, poly: &ConvexPolygon) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let d = b.sub(a);
    for (p, q) in poly.edges() {
        let e = q.sub(p);
        // Inside when e × (x − p) ≥ 0, linear in t.
        let f0 = e.cross(a.sub(p));
        let df = e.cross(d);
        if df.abs() < 1e-300 {
            if f0 < 0.0 {
                return None;
            }
            continue;
        }
        let t = -f0 / df;
        if df > 0.0 {
            t0 = t0.max(t);
        } else {
            t1 = t1.min(t);
        }
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Inflates `zone` by `safety` and derives the restricted angles.
pub fn restriction_from_zone(pose: &Pose, zone: &ConvexPolygon, step: f64, safety: f64) -> Result<RestrictionSet> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    Ok(restricted_angles(pose, &inflate(zone, safety), step))
}

/// Direction of travel along an obstacle's waypoint path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Traversal {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub form: Form,
    pub center: Point2,
    pub radius: f64,
    /// Waypoint path including the initial location as its first point; empty for static
    /// obstacles.
    pub path: Vec<Point2>,
    pub waypoint_step: f64,
    pub direction: Traversal,
    /// Arc length travelled along `path`.
    pub progress: f64,
}

impl Obstacle {
    pub fn fixed(form: Form, center: Point2, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "obstacle radius must be > 0, got {radius}"
            )));
        }
        Ok(Self {
            form,
            center,
            radius,
            path: Vec::new(),
            waypoint_step: 0.0,
            direction: Traversal::Forward,
            progress: 0.0,
        })
    }

    /// Moving obstacle travelling from `center` through `waypoints` and back.
    pub fn moving(form: Form, center: Point2, radius: f64, waypoints: &[Point2], step: f64) -> Result<Self> {
        if !(step >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "waypoint step must be >= 0, got {step}"
            )));
        }
        let mut ob = Self::fixed(form, center, radius)?;
        if !waypoints.is_empty() {
            ob.path = std::iter::once(center).chain(waypoints.iter().copied()).collect();
        }
        ob.waypoint_step = step;
        Ok(ob)
    }

    pub fn polygon(&self) -> ConvexPolygon {
        canonical_polygon(self.form, self.center, self.radius)
    }

    fn path_length(&self) -> f64 {
        self.path.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    fn point_at(&self, s: f64) -> Point2 {
        let mut rest = s;
        for w in self.path.windows(2) {
            let len = w[0].dist(w[1]);
            if rest <= len {
                if len == 0.0 {
                    return w[0];
                }
                return w[0].add(w[1].sub(w[0]).scale(rest / len));
            }
            rest -= len;
        }
        *self.path.last().expect("non-empty path")
    }

    /// Moves one waypoint step along the path, reversing at either end.
    pub fn advance(&mut self) {
        let total = self.path_length();
        if self.path.len() < 2 || self.waypoint_step <= 0.0 || total <= 0.0 {
            return;
        }
        let mut s = match self.direction {
            Traversal::Forward => self.progress + self.waypoint_step,
            Traversal::Backward => self.progress - self.waypoint_step,
        };
        if s >= total - EPS {
            s = (2.0 * total - s).min(total);
            self.direction = Traversal::Backward;
        } else if s <= EPS {
            s = (-s).max(0.0);
            self.direction = Traversal::Forward;
        }
        self.progress = s.clamp(0.0, total);
        self.center = self.point_at(self.progress);
    }
}

/// Pure variant of [`Obstacle::advance`].
pub fn advance_obstacle(ob: &Obstacle) -> Obstacle {
    let mut next = ob.clone();
    next.advance();
    next
}

/// Four wall rectangles of thickness 1 surrounding the `width × height` map.
pub fn walls(width: f64, height: f64) -> Vec<ConvexPolygon> {
    vec![
        ConvexPolygon::from_ccw(rect_vertices(-1.0, -1.0, 0.0, height + 1.0)),
        ConvexPolygon::from_ccw(rect_vertices(width, -1.0, width + 1.0, height + 1.0)),
        ConvexPolygon::from_ccw(rect_vertices(-1.0, -1.0, width + 1.0, 0.0)),
        ConvexPolygon::from_ccw(rect_vertices(-1.0, height, width + 1.0, height + 1.0)),
    ]
}

fn rect_vertices(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point2> {
    vec![
        Point2::new(x0, y0),
        Point2::new(x1, y0),
        Point2::new(x1, y1),
        Point2::new(x0, y1),
    ]
}
