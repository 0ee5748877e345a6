//! Oriented boxes, convex polygons and binary masks.
//!
//! Boxes use the long-side convention: `w >= h` and `theta` in `[-pi/2, pi/2)`.
//! A box with angle `theta` has its `w` side along `(cos theta, sin theta)` in
//! image coordinates (x right, y down).

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating polygon convexity.
pub const CONVEXITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Rotates the vector counter-clockwise (in x-right/y-up terms) by `theta`.
    pub fn rotate(self, theta: f64) -> Point {
        let (s, c) = theta.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// Rotated rectangle `(cx, cy, w, h, theta)` in pixels and radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl OrientedBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Self {
        Self { cx, cy, w, h, theta }
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.cx, self.cy, self.w, self.h, self.theta];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::NonPositiveSize(format!(
                "box sides w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn is_canonical(&self) -> bool {
        self.w >= self.h && (-FRAC_PI_2..FRAC_PI_2).contains(&self.theta)
    }

    /// The four corners in counter-clockwise order, starting from the local
    /// `(-w/2, -h/2)` corner.
    pub fn corners(&self) -> [Point; 4] {
        let c = self.center();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(x, y)| c.add(Point::new(x, y).rotate(self.theta)))
    }

    /// Point-in-box test with an absolute tolerance in pixels.
    pub fn contains(&self, p: Point, tol: f64) -> bool {
        let local = p.sub(self.center()).rotate(-self.theta);
        local.x.abs() <= self.w / 2.0 + tol && local.y.abs() <= self.h / 2.0 + tol
    }

    /// Applies a rotation by `angle` about `pivot` followed by a translation.
    pub fn rigid_motion(&self, pivot: Point, angle: f64, shift: Point) -> OrientedBox {
        let c = self.center().sub(pivot).rotate(angle).add(pivot).add(shift);
        OrientedBox::new(c.x, c.y, self.w, self.h, self.theta + angle)
    }
}

/// Wraps an angle into `[-pi/2, pi/2)`.
pub fn wrap_half_turn(theta: f64) -> f64 {
    let mut t = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    if t < -FRAC_PI_2 {
        t += PI;
    }
    t
}

/// Returns the same rectangle in long-side canonical form.
pub fn canonicalize(b: &OrientedBox) -> Result<OrientedBox> {
    b.validate()?;
    let (w, h, theta) = if b.w < b.h {
        (b.h, b.w, b.theta + FRAC_PI_2)
    } else {
        (b.w, b.h, b.theta)
    };
    Ok(OrientedBox::new(b.cx, b.cy, w, h, wrap_half_turn(theta)))
}

/// Normalized corner and orientation coordinates fed to the prompt encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    pub phi1: [f64; 2],
    pub phi2: [f64; 2],
    pub theta_pair: [f64; 2],
}

/// Corner pair (local top-left and bottom-right, rotated into the image) and
/// orientation pair `((sin+1)/2, (cos+1)/2)`, all normalized by the image size.
pub fn to_prompt_params(b: &OrientedBox, image_w: f64, image_h: f64) -> Result<PromptParams> {
    if !(image_w > 0.0 && image_h > 0.0) {
        return Err(Error::NonPositiveSize(format!(
            "image dims {image_w}x{image_h}"
        )));
    }
    let b = canonicalize(b)?;
    let c = b.center();
    let half = Point::new(b.w / 2.0, b.h / 2.0);
    let tl = c.add(half.scale(-1.0).rotate(b.theta));
    let br = c.add(half.rotate(b.theta));
    let (s, co) = b.theta.sin_cos();
    Ok(PromptParams {
        phi1: [tl.x / image_w, tl.y / image_h],
        phi2: [br.x / image_w, br.y / image_h],
        theta_pair: [(s + 1.0) / 2.0, (co + 1.0) / 2.0],
    })
}

/// Inverse of [`to_prompt_params`].
pub fn from_prompt_params(p: &PromptParams, image_w: f64, image_h: f64) -> Result<OrientedBox> {
    if !(image_w > 0.0 && image_h > 0.0) {
        return Err(Error::NonPositiveSize(format!(
            "image dims {image_w}x{image_h}"
        )));
    }
    let tl = Point::new(p.phi1[0] * image_w, p.phi1[1] * image_h);
    let br = Point::new(p.phi2[0] * image_w, p.phi2[1] * image_h);
    let theta = (2.0 * p.theta_pair[0] - 1.0).atan2(2.0 * p.theta_pair[1] - 1.0);
    let c = tl.add(br).scale(0.5);
    let diag = br.sub(tl).rotate(-theta);
    canonicalize(&OrientedBox::new(c.x, c.y, diag.x, diag.y, theta))
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidPolygon(format!(
                "{} vertices, need at least 3",
                vertices.len()
            )));
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::NonFinite("polygon vertex".into()));
        }
        let area = shoelace_area(&vertices);
        if area <= 0.0 {
            return Err(Error::InvalidPolygon(format!(
                "signed area {area} is not positive"
            )));
        }
        let n = vertices.len();
        let scale = vertices
            .iter()
            .map(|p| p.x.abs().max(p.y.abs()))
            .fold(1.0, f64::max);
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if b.sub(a).cross(c.sub(b)) < -CONVEXITY_TOL * scale * scale {
                return Err(Error::InvalidPolygon(format!("reflex vertex at {}", (i + 1) % n)));
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        shoelace_area(&self.vertices)
    }
}

/// Signed shoelace area (positive for counter-clockwise order).
pub fn shoelace_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n).map(|i| pts[i].cross(pts[(i + 1) % n])).sum();
    twice / 2.0
}

pub fn obb_to_polygon(b: &OrientedBox) -> Result<ConvexPolygon> {
    b.validate()?;
    ConvexPolygon::new(b.corners().to_vec())
}

/// Andrew's monotone chain. Collinear points are dropped; the result is
/// counter-clockwise and may have fewer than 3 points for degenerate input.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if b.sub(a).cross(p.sub(a)) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle of a convex polygon by rotating calipers.
pub fn min_area_obb_polygon(poly: &ConvexPolygon) -> Result<OrientedBox> {
    // The input may carry collinear vertices; the calipers want a strict hull.
    let hull = convex_hull(poly.vertices());
    if hull.len() < 3 {
        return Err(Error::InvalidPolygon("degenerate hull".into()));
    }
    rotating_calipers(&hull)
}

/// Minimum-area enclosing rectangle of a mask's foreground, using the four
/// corners of every foreground pixel.
pub fn min_area_obb_mask(mask: &BinaryMask) -> Result<OrientedBox> {
    let pts = mask.corner_points();
    if pts.is_empty() {
        return Err(Error::EmptyMask);
    }
    let hull = convex_hull(&pts);
    rotating_calipers(&hull)
}

/// Minimum-area enclosing rectangle of an arbitrary point set.
pub fn min_area_obb_points(points: &[Point]) -> Result<OrientedBox> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(Error::InvalidPolygon("fewer than 3 non-collinear points".into()));
    }
    rotating_calipers(&hull)
}

fn rotating_calipers(hull: &[Point]) -> Result<OrientedBox> {
    let n = hull.len();
    let edge_dir = |i: usize| {
        let e = hull[(i + 1) % n].sub(hull[i]);
        e.scale(1.0 / e.norm())
    };
    let proj = |k: usize, d: Point| hull[k % n].dot(d);

    // Extreme vertices for the first edge: far along the edge, far from the
    // edge (the interior lies on the left of a CCW edge), and far backwards.
    let u0 = edge_dir(0);
    let n0 = Point::new(-u0.y, u0.x);
    let argmax = |d: Point| {
        (0..n)
            .max_by(|&a, &b| proj(a, d).total_cmp(&proj(b, d)))
            .unwrap_or(0)
    };
    let mut right = argmax(u0);
    let mut top = argmax(n0);
    let mut left = argmax(u0.scale(-1.0));

    let mut best: Option<(f64, OrientedBox)> = None;
    for i in 0..n {
        let u = edge_dir(i);
        let nrm = Point::new(-u.y, u.x);
        for _ in 0..n {
            if proj(right + 1, u) > proj(right, u) {
                right += 1;
            } else {
                break;
            }
        }
        for _ in 0..n {
            if proj(top + 1, nrm) > proj(top, nrm) {
                top += 1;
            } else {
                break;
            }
        }
        for _ in 0..n {
            if proj(left + 1, u) < proj(left, u) {
                left += 1;
            } else {
                break;
            }
        }
        let base = hull[i];
        let max_u = proj(right, u) - base.dot(u);
        let min_u = proj(left, u) - base.dot(u);
        let max_n = proj(top, nrm) - base.dot(nrm);
        let width = max_u - min_u;
        let height = max_n;
        let area = width * height;
        if best.as_ref().map_or(true, |(a, _)| area < *a) {
            let c = base
                .add(u.scale((max_u + min_u) / 2.0))
                .add(nrm.scale(max_n / 2.0));
            let theta = u.y.atan2(u.x);
            best = Some((area, OrientedBox::new(c.x, c.y, width, height, theta)));
        }
    }
    let (_, b) = best.ok_or_else(|| Error::InvalidPolygon("empty hull".into()))?;
    canonicalize(&b)
}

/// Sutherland-Hodgman clip of one convex CCW polygon by another.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let edge = b.sub(a);
        let side = |p: Point| edge.cross(p.sub(a));
        let input = std::mem::take(&mut out);
        let k = input.len();
        for j in 0..k {
            let cur = input[j];
            let prev = input[(j + k - 1) % k];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    p.add(q.sub(p).scale(t))
}

/// Intersection-over-union of two rotated rectangles.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let pa = a.corners();
    let pb = b.corners();
    let inter = shoelace_area(&clip_convex(&pa, &pb)).max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Row-major boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "mask data length {} != {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Foreground as a 0/1 float field.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    /// All four corners of every foreground pixel. Pixel `(r, c)` covers
    /// `[c, c+1] x [r, r+1]`.
    pub fn corner_points(&self) -> Vec<Point> {
        let mut pts = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    let (x, y) = (c as f64, r as f64);
                    pts.extend([
                        Point::new(x, y),
                        Point::new(x + 1.0, y),
                        Point::new(x + 1.0, y + 1.0),
                        Point::new(x, y + 1.0),
                    ]);
                }
            }
        }
        pts
    }
}

/// `|a and b| / |a or b|`; two empty masks agree perfectly.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::DimMismatch(format!(
            "masks {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn same_vertex_set(a: &OrientedBox, b: &OrientedBox, tol: f64) -> bool {
        let ca = a.corners();
        let cb = b.corners();
        ca.iter()
            .all(|p| cb.iter().any(|q| p.sub(*q).norm() <= tol))
    }

    #[test]
    fn canonicalize_swaps_short_side() {
        let b = canonicalize(&OrientedBox::new(5.0, 5.0, 2.0, 4.0, 0.0)).unwrap();
        assert_eq!((b.cx, b.cy, b.w, b.h), (5.0, 5.0, 4.0, 2.0));
        assert_relative_eq!(b.theta, -FRAC_PI_2);
    }

    #[test]
    fn canonicalize_wraps_half_period() {
        let b = canonicalize(&OrientedBox::new(1.0, 1.0, 4.0, 2.0, FRAC_PI_2)).unwrap();
        assert_eq!((b.w, b.h), (4.0, 2.0));
        assert_relative_eq!(b.theta, -FRAC_PI_2);
    }

    #[test]
    fn canonicalize_rejects_bad_boxes() {
        assert!(matches!(
            canonicalize(&OrientedBox::new(0.0, 0.0, 0.0, 1.0, 0.0)),
            Err(Error::NonPositiveSize(_))
        ));
        assert!(matches!(
            canonicalize(&OrientedBox::new(0.0, 0.0, 1.0, -1.0, 0.0)),
            Err(Error::NonPositiveSize(_))
        ));
        assert!(matches!(
            canonicalize(&OrientedBox::new(f64::NAN, 0.0, 1.0, 1.0, 0.0)),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            canonicalize(&OrientedBox::new(0.0, 0.0, 1.0, 1.0, f64::INFINITY)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn prompt_params_axis_aligned() {
        let (w, h) = (100.0, 50.0);
        let b = OrientedBox::new(0.5 * w, 0.5 * h, 0.4 * w, 0.2 * h, 0.0);
        let p = to_prompt_params(&b, w, h).unwrap();
        assert_relative_eq!(p.phi1[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(p.phi1[1], 0.4, epsilon = 1e-12);
        assert_relative_eq!(p.phi2[0], 0.7, epsilon = 1e-12);
        assert_relative_eq!(p.phi2[1], 0.6, epsilon = 1e-12);
        assert_eq!(p.theta_pair, [0.5, 1.0]);
    }

    #[test]
    fn prompt_params_canonicalize_first() {
        let b = OrientedBox::new(30.0, 30.0, 20.0, 10.0, FRAC_PI_2);
        let direct = to_prompt_params(&b, 64.0, 64.0).unwrap();
        let canon = to_prompt_params(
            &OrientedBox::new(30.0, 30.0, 20.0, 10.0, -FRAC_PI_2),
            64.0,
            64.0,
        )
        .unwrap();
        assert_eq!(direct, canon);
        assert_relative_eq!(direct.theta_pair[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn prompt_params_rotated_matches_matrix() {
        // Square image of side 1: explicit 2x2 rotation of the half-extents.
        let b = OrientedBox::new(0.5, 0.5, 0.4, 0.2, std::f64::consts::FRAC_PI_4);
        let p = to_prompt_params(&b, 1.0, 1.0).unwrap();
        let (c, s) = (0.5f64.sqrt(), 0.5f64.sqrt());
        let rot = |x: f64, y: f64| (c * x - s * y, s * x + c * y);
        let (dx1, dy1) = rot(-0.2, -0.1);
        let (dx2, dy2) = rot(0.2, 0.1);
        assert_relative_eq!(p.phi1[0], 0.5 + dx1, epsilon = 1e-12);
        assert_relative_eq!(p.phi1[1], 0.5 + dy1, epsilon = 1e-12);
        assert_relative_eq!(p.phi2[0], 0.5 + dx2, epsilon = 1e-12);
        assert_relative_eq!(p.phi2[1], 0.5 + dy2, epsilon = 1e-12);
    }

    #[test]
    fn prompt_params_reject_bad_image() {
        let b = OrientedBox::new(1.0, 1.0, 2.0, 1.0, 0.0);
        assert!(matches!(
            to_prompt_params(&b, 0.0, 10.0),
            Err(Error::NonPositiveSize(_))
        ));
    }

    #[test]
    fn polygon_axis_aligned() {
        let p = obb_to_polygon(&OrientedBox::new(0.0, 0.0, 2.0, 1.0, 0.0)).unwrap();
        let expect = [(-1.0, -0.5), (1.0, -0.5), (1.0, 0.5), (-1.0, 0.5)];
        for (v, (x, y)) in p.vertices().iter().zip(expect) {
            assert_relative_eq!(v.x, x);
            assert_relative_eq!(v.y, y);
        }
        assert_relative_eq!(p.area(), 2.0);
    }

    #[test]
    fn polygon_diamond() {
        let s = 2f64.sqrt();
        let p = obb_to_polygon(&OrientedBox::new(0.0, 0.0, s, s, std::f64::consts::FRAC_PI_4))
            .unwrap();
        for v in p.vertices() {
            assert_relative_eq!(v.norm(), 1.0, epsilon = 1e-12);
            assert!(v.x.abs() < 1e-12 || v.y.abs() < 1e-12);
        }
    }

    #[test]
    fn polygon_validation() {
        let cw = vec![
            Point::new(0.0, 0.0),
            Point::new(0.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
        ];
        assert!(ConvexPolygon::new(cw).is_err());
        let reflex = vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(1.0, 0.2),
            Point::new(2.0, 2.0),
            Point::new(0.0, 2.0),
        ];
        assert!(ConvexPolygon::new(reflex).is_err());
        assert!(ConvexPolygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]).is_err());
    }

    #[test]
    fn min_obb_of_rectangle_points() {
        let poly = ConvexPolygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(2.0, 1.0),
            Point::new(0.0, 1.0),
        ])
        .unwrap();
        let b = min_area_obb_polygon(&poly).unwrap();
        assert_relative_eq!(b.cx, 1.0, epsilon = 1e-12);
        assert_relative_eq!(b.cy, 0.5, epsilon = 1e-12);
        assert_relative_eq!(b.w, 2.0, epsilon = 1e-12);
        assert_relative_eq!(b.h, 1.0, epsilon = 1e-12);
        assert_relative_eq!(b.theta, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn min_obb_of_diamond() {
        let poly = ConvexPolygon::new(vec![
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
            Point::new(-1.0, 0.0),
            Point::new(0.0, -1.0),
        ])
        .unwrap();
        let b = min_area_obb_polygon(&poly).unwrap();
        assert_relative_eq!(b.area(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(b.w, 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(b.theta.abs(), std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
    }

    #[test]
    fn min_obb_of_filled_mask() {
        let mask = BinaryMask::from_fn(40, 40, |r, c| (5..15).contains(&r) && (8..28).contains(&c));
        let b = min_area_obb_mask(&mask).unwrap();
        assert_relative_eq!(b.w, 20.0, epsilon = 1e-9);
        assert_relative_eq!(b.h, 10.0, epsilon = 1e-9);
        assert_relative_eq!(b.theta, 0.0, epsilon = 1e-9);
        assert_relative_eq!(b.cx, 18.0, epsilon = 1e-9);
        assert_relative_eq!(b.cy, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn min_obb_of_empty_mask() {
        assert!(matches!(
            min_area_obb_mask(&BinaryMask::new(4, 4)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn iou_basic_cases() {
        let a = OrientedBox::new(3.0, 4.0, 5.0, 2.0, 0.3);
        assert_relative_eq!(rotated_iou(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let b = OrientedBox::new(103.0, 4.0, 1.0, 1.0, 0.3);
        let c = OrientedBox::new(3.0, 4.0, 1.0, 0.5, -1.0);
        assert_eq!(rotated_iou(&b, &c).unwrap(), 0.0);
    }

    #[test]
    fn iou_square_vs_rotated_square() {
        let a = OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = OrientedBox::new(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        // Intersection is a regular octagon of area 2(sqrt2 - 1).
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let expect = inter / (2.0 - inter);
        assert_relative_eq!(rotated_iou(&a, &b).unwrap(), expect, epsilon = 1e-12);
        assert!((expect - 0.7071).abs() < 2e-3);
    }

    #[test]
    fn mask_iou_cases() {
        let a = BinaryMask::from_fn(2, 2, |r, c| r == 0 && c == 0);
        let b = BinaryMask::from_fn(2, 2, |r, _| r == 0);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.5);
        assert_eq!(mask_iou(&b, &b).unwrap(), 1.0);
        let top = BinaryMask::from_fn(4, 4, |r, _| r < 2);
        let bottom = BinaryMask::from_fn(4, 4, |r, _| r >= 2);
        assert_eq!(mask_iou(&top, &bottom).unwrap(), 0.0);
        assert_eq!(mask_iou(&BinaryMask::new(3, 3), &BinaryMask::new(3, 3)).unwrap(), 1.0);
        assert!(matches!(
            mask_iou(&BinaryMask::new(3, 3), &BinaryMask::new(3, 4)),
            Err(Error::DimMismatch(_))
        ));
    }

    fn arb_box() -> impl Strategy<Value = OrientedBox> {
        (
            -50.0..50.0f64,
            -50.0..50.0f64,
            0.1..30.0f64,
            0.1..30.0f64,
            -10.0..10.0f64,
        )
            .prop_map(|(cx, cy, w, h, t)| OrientedBox::new(cx, cy, w, h, t))
    }

    proptest! {
        #[test]
        fn canonicalize_idempotent_and_same_rectangle(b in arb_box()) {
            let c = canonicalize(&b).unwrap();
            prop_assert!(c.is_canonical());
            prop_assert_eq!(canonicalize(&c).unwrap(), c);
            prop_assert!(same_vertex_set(&b, &c, 1e-9 * (1.0 + b.w.max(b.h))));
        }

        #[test]
        fn polygon_area_is_w_times_h(b in arb_box()) {
            let p = obb_to_polygon(&canonicalize(&b).unwrap()).unwrap();
            prop_assert!((p.area() - b.w * b.h).abs() <= 1e-9 * b.w * b.h);
        }

        #[test]
        fn prompt_params_roundtrip(b in arb_box(), iw in 16.0..256.0f64, ih in 16.0..256.0f64) {
            let c = canonicalize(&b).unwrap();
            let p = to_prompt_params(&c, iw, ih).unwrap();
            let r = from_prompt_params(&p, iw, ih).unwrap();
            let tol = 1e-7 * iw.max(ih);
            prop_assert!((r.cx - c.cx).abs() <= tol && (r.cy - c.cy).abs() <= tol);
            prop_assert!((r.w - c.w).abs() <= tol && (r.h - c.h).abs() <= tol);
            prop_assert!(same_vertex_set(&r, &c, tol));
        }

        #[test]
        fn iou_symmetric_and_rigid_invariant(
            a in arb_box(), b in arb_box(),
            angle in -3.0..3.0f64, dx in -20.0..20.0f64, dy in -20.0..20.0f64,
        ) {
            let ab = rotated_iou(&a, &b).unwrap();
            let ba = rotated_iou(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((rotated_iou(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
            let pivot = Point::new(1.0, -2.0);
            let shift = Point::new(dx, dy);
            let ma = a.rigid_motion(pivot, angle, shift);
            let mb = b.rigid_motion(pivot, angle, shift);
            prop_assert!((rotated_iou(&ma, &mb).unwrap() - ab).abs() <= 1e-9);
        }
    }
}
