//! Planar geometry on points, convex polygons and oriented rectangles.
//!
//! Everything here works in `f64` image coordinates (x to the right, y down).
//! "Counter-clockwise" means positive shoelace area in those raw coordinates,
//! which is the usual mathematical orientation applied to (x, y) pairs.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-plane tolerance used by convex clipping and containment tests.
pub const CLIP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 2-D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Rotates by `angle` radians about `center`.
    pub fn rotate_about(self, angle: f64, center: Point2) -> Point2 {
        let (s, c) = angle.sin_cos();
        let d = self.sub(center);
        Point2::new(center.x + c * d.x - s * d.y, center.y + s * d.x + c * d.y)
    }
}

/// `(b - a) x (c - a)`; positive when `c` lies left of the directed line `a -> b`.
pub fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    b.sub(a).cross(c.sub(a))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Point2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point2>) -> Self {
        Self { vertices }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    /// Shoelace signed area; positive for counter-clockwise vertex order.
    pub fn signed_area(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            acc += a.cross(b);
        }
        0.5 * acc
    }

    pub fn area(&self) -> f64 {
        polygon_area(self)
    }

    /// Point-in-polygon with edges counted as inside when within `eps`.
    /// Works for any simple polygon, convex or not.
    pub fn contains(&self, p: Point2, eps: f64) -> bool {
        if self.is_empty() {
            return false;
        }
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if segment_distance(p, a, b) <= eps {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Axis-aligned bounds as `(min, max)`.
    pub fn bounds(&self) -> Option<(Point2, Point2)> {
        bounds_of(&self.vertices)
    }
}

pub(crate) fn bounds_of(points: &[Point2]) -> Option<(Point2, Point2)> {
    let first = *points.first()?;
    let mut lo = first;
    let mut hi = first;
    for p in &points[1..] {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    Some((lo, hi))
}

fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.sub(a).norm();
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.sub(a.add(ab.scale(t))).norm()
}

/// Rectangle stored as center, side lengths and rotation of the `w` side.
///
/// Canonical form keeps `w >= h` and `alpha` in `[-pi/2, pi/2)`; every
/// constructor in this module returns canonical boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub alpha: f64,
}

impl OrientedBox {
    /// Builds a canonical box. Fails on non-positive or non-finite sizes.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, alpha: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && alpha.is_finite()) {
            return Err(Error::InvalidArgument("non-finite box parameter".into()));
        }
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "box sides must be positive, got w={w} h={h}"
            )));
        }
        Ok(Self::canonical(cx, cy, w, h, alpha))
    }

    /// Canonicalizes without validation.
    pub fn canonical(cx: f64, cy: f64, w: f64, h: f64, alpha: f64) -> Self {
        let (w, h, alpha) = if w < h {
            (h, w, alpha + FRAC_PI_2)
        } else {
            (w, h, alpha)
        };
        Self {
            cx,
            cy,
            w,
            h,
            alpha: normalize_half_turn(alpha),
        }
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Unit vectors along the `w` and `h` sides.
    pub fn axes(&self) -> (Point2, Point2) {
        let (s, c) = self.alpha.sin_cos();
        (Point2::new(c, s), Point2::new(-s, c))
    }

    pub fn corners(&self) -> [Point2; 4] {
        obb_to_corners(self)
    }

    pub fn polygon(&self) -> Polygon {
        Polygon::new(self.corners().to_vec())
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    pub fn contains(&self, p: Point2, eps: f64) -> bool {
        let (u, v) = self.axes();
        let d = p.sub(self.center());
        d.dot(u).abs() <= 0.5 * self.w + eps && d.dot(v).abs() <= 0.5 * self.h + eps
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }
}

/// Wraps an angle into `[-pi/2, pi/2)`.
pub fn normalize_half_turn(alpha: f64) -> f64 {
    let mut a = (alpha + FRAC_PI_2).rem_euclid(PI);
    if a >= PI {
        a = 0.0;
    }
    a - FRAC_PI_2
}

fn collinearity_eps(points: &[Point2]) -> f64 {
    let scale = bounds_of(points)
        .map(|(lo, hi)| (hi.x - lo.x).max(hi.y - lo.y))
        .unwrap_or(0.0)
        .max(1.0);
    1e-9 * scale * scale
}

/// Monotone-chain convex hull, counter-clockwise, collinear vertices dropped.
pub fn convex_hull(points: &[Point2]) -> Result<Polygon> {
    if points.is_empty() {
        return Err(Error::DegenerateGeometry("empty point set".into()));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument("non-finite point".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    let eps = collinearity_eps(&pts);

    let mut hull: Vec<Point2> = Vec::with_capacity(pts.len() + 1);
    for &p in &pts {
        while hull.len() >= 2 && orient(hull[hull.len() - 2], hull[hull.len() - 1], p) <= eps {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len
            && orient(hull[hull.len() - 2], hull[hull.len() - 1], p) <= eps
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();

    if hull.len() < 3 {
        return Err(Error::DegenerateGeometry(
            "fewer than 3 non-collinear points".into(),
        ));
    }
    Ok(Polygon::new(hull))
}

/// Minimum-area enclosing rectangle by rotating calipers over the convex hull.
///
/// One side of the result is collinear with a hull edge. The three support
/// pointers (far end along the edge, far end across it, near end along it)
/// only ever move forward, so the sweep is linear in the hull size.
pub fn min_area_rect(points: &[Point2]) -> Result<OrientedBox> {
    let hull = convex_hull(points)?;
    let p = &hull.vertices;
    let n = p.len();

    let edge_dir = |i: usize| {
        let e = p[(i + 1) % n].sub(p[i]);
        e.scale(1.0 / e.norm())
    };

    let u0 = edge_dir(0);
    let v0 = Point2::new(-u0.y, u0.x);
    let argbest = |f: &dyn Fn(Point2) -> f64| {
        (0..n)
            .max_by(|&a, &b| f(p[a]).total_cmp(&f(p[b])).then(b.cmp(&a)))
            .unwrap()
    };
    let mut right = argbest(&|q| q.dot(u0));
    let mut top = argbest(&|q| q.dot(v0));
    let mut left = argbest(&|q| -q.dot(u0));

    let mut best: Option<(f64, OrientedBox)> = None;
    for i in 0..n {
        let u = edge_dir(i);
        let v = Point2::new(-u.y, u.x);
        let advance = |mut k: usize, f: &dyn Fn(Point2) -> f64| {
            for _ in 0..n {
                let next = (k + 1) % n;
                if f(p[next]) > f(p[k]) {
                    k = next;
                } else {
                    break;
                }
            }
            k
        };
        right = advance(right, &|q| q.dot(u));
        top = advance(top, &|q| q.dot(v));
        left = advance(left, &|q| -q.dot(u));

        let umin = p[left].dot(u);
        let umax = p[right].dot(u);
        let vmin = p[i].dot(v);
        let vmax = p[top].dot(v);
        let w = umax - umin;
        let h = vmax - vmin;
        let area = w * h;
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let c = u
                .scale(0.5 * (umin + umax))
                .add(v.scale(0.5 * (vmin + vmax)));
            let alpha = u.y.atan2(u.x);
            best = Some((area, OrientedBox::canonical(c.x, c.y, w, h, alpha)));
        }
    }
    let (_, rect) = best.expect("hull has at least 3 edges");
    if !(rect.w > 0.0 && rect.h > 0.0) {
        return Err(Error::DegenerateGeometry("zero-area rectangle".into()));
    }
    Ok(rect)
}

/// Corners in counter-clockwise order, starting at `center - w/2*u - h/2*v`.
pub fn obb_to_corners(b: &OrientedBox) -> [Point2; 4] {
    let (u, v) = b.axes();
    let c = b.center();
    let hu = u.scale(0.5 * b.w);
    let hv = v.scale(0.5 * b.h);
    [
        c.sub(hu).sub(hv),
        c.add(hu).sub(hv),
        c.add(hu).add(hv),
        c.sub(hu).add(hv),
    ]
}

/// Smallest rectangle containing the four points; exact for true rectangles.
pub fn corners_to_obb(corners: &[Point2; 4]) -> Result<OrientedBox> {
    min_area_rect(corners)
}

/// Intersection of two convex counter-clockwise polygons (Sutherland-Hodgman).
///
/// Points within [`CLIP_EPS`] of a clip edge count as inside.
pub fn convex_clip(subject: &Polygon, clip: &Polygon) -> Polygon {
    if subject.is_empty() || clip.is_empty() {
        return Polygon::empty();
    }
    let mut output = subject.vertices.clone();
    let m = clip.vertices.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip.vertices[i];
        let b = clip.vertices[(i + 1) % m];
        let edge_len = b.sub(a).norm();
        if edge_len == 0.0 {
            continue;
        }
        let side = |p: Point2| orient(a, b, p) / edge_len;
        let input = std::mem::take(&mut output);
        let k = input.len();
        for j in 0..k {
            let cur = input[j];
            let prev = input[(j + k - 1) % k];
            let sc = side(cur);
            let sp = side(prev);
            let cur_in = sc >= -CLIP_EPS;
            let prev_in = sp >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(line_cross(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_cross(prev, cur, sp, sc));
            }
        }
    }
    cleanup(output)
}

fn line_cross(s: Point2, e: Point2, ds: f64, de: f64) -> Point2 {
    let denom = ds - de;
    if denom == 0.0 {
        return s;
    }
    let t = ds / denom;
    s.add(e.sub(s).scale(t))
}

fn cleanup(mut pts: Vec<Point2>) -> Polygon {
    let scale = bounds_of(&pts)
        .map(|(lo, hi)| (hi.x - lo.x).max(hi.y - lo.y))
        .unwrap_or(0.0)
        .max(1.0);
    let tol = 1e-12 * scale;
    pts.dedup_by(|a, b| a.sub(*b).norm() <= tol);
    while pts.len() > 1 && pts[0].sub(*pts.last().unwrap()).norm() <= tol {
        pts.pop();
    }
    if pts.len() < 3 {
        return Polygon::empty();
    }
    Polygon::new(pts)
}

/// Shoelace area, never negative; empty polygons have zero area.
pub fn polygon_area(p: &Polygon) -> f64 {
    p.signed_area().abs()
}

/// Intersection over union of two oriented rectangles.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    // Separating-distance shortcut: circumscribed circles do not meet.
    let reach = 0.5 * (a.diagonal() + b.diagonal());
    if a.center().sub(b.center()).norm() > reach {
        return 0.0;
    }
    let inter = polygon_area(&convex_clip(&a.polygon(), &b.polygon()));
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Rigid rotation of a box by `angle` radians about `center`.
pub fn rotate_box(b: &OrientedBox, angle: f64, center: Point2) -> OrientedBox {
    let c = b.center().rotate_about(angle, center);
    OrientedBox::canonical(c.x, c.y, b.w, b.h, b.alpha + angle)
}

/// Rotation about the box's own center.
pub fn rotate_box_in_place(b: &OrientedBox, angle: f64) -> OrientedBox {
    rotate_box(b, angle, b.center())
}
