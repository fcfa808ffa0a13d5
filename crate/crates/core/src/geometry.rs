//! Boxes, polygons, masks and the overlap measures shared by the detector,
//! the losses and the evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the square instance mask grid.
pub const MASK_SIZE: usize = 28;
/// Flattened mask dimension.
pub const MASK_DIM: usize = MASK_SIZE * MASK_SIZE;

/// Axis-aligned box in (cx, cy, w, h) form, normalized to [0,1] relative to
/// the image width/height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// (x0, y0, x1, y1)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    /// Clip the box to the unit square, keeping a tiny minimum extent so the
    /// validity invariant survives.
    pub fn clip_unit(&self) -> Self {
        const MIN_SIZE: f64 = 1e-4;
        let (x0, y0, x1, y1) = self.corners();
        if x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0 && self.w > 0.0 && self.h > 0.0 {
            return *self;
        }
        let x0 = x0.clamp(0.0, 1.0 - MIN_SIZE);
        let y0 = y0.clamp(0.0, 1.0 - MIN_SIZE);
        let x1 = x1.clamp(x0 + MIN_SIZE, 1.0);
        let y1 = y1.clamp(y0 + MIN_SIZE, 1.0);
        Self::from_corners(x0, y0, x1, y1)
    }
}

/// Plain intersection-over-union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU(a,b) - |C \ (a u b)| / |C| with C the tightest
/// enclosing box. Lies in (-1, 1]; symmetric; 1 iff a == b.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::Geometry(format!(
            "giou on degenerate box: {a:?} vs {b:?}"
        )));
    }
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = ax1.max(bx1) - ax0.min(bx0);
    let ch = ay1.max(by1) - ay0.min(by0);
    let enclose = cw * ch;
    let iou = inter / union;
    Ok(iou - (enclose - union) / enclose)
}

/// Simple polygon in absolute pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub points: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() < 6 || flat.len() % 2 != 0 {
            return Err(Error::Data(format!(
                "polygon needs >= 3 (x, y) points, got {} coordinates",
                flat.len()
            )));
        }
        Ok(Self {
            points: flat.chunks(2).map(|c| [c[0], c[1]]).collect(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Signed shoelace area (positive for counter-clockwise winding).
    pub fn signed_area(&self) -> f64 {
        let n = self.points.len();
        let mut s = 0.0;
        for i in 0..n {
            let p = self.points[i];
            let q = self.points[(i + 1) % n];
            s += p[0] * q[1] - q[0] * p[1];
        }
        0.5 * s
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn is_valid(&self) -> bool {
        self.points.len() >= 3 && self.area() > 0.0
    }

    /// Axis-aligned bounding box in absolute coordinates (corner form).
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut x0 = f64::INFINITY;
        let mut y0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for p in &self.points {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        (x0, y0, x1, y1)
    }

    /// Bounding box normalized to [0,1] by the given image dimensions.
    pub fn bbox_normalized(&self, img_w: f64, img_h: f64) -> BBox {
        let (x0, y0, x1, y1) = self.bounds();
        BBox::from_corners(x0 / img_w, y0 / img_h, x1 / img_w, y1 / img_h).clip_unit()
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.points.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let pi = self.points[i];
            let pj = self.points[j];
            if (pi[1] > y) != (pj[1] > y) {
                let xint = pj[0] + (y - pj[1]) / (pi[1] - pj[1]) * (pi[0] - pj[0]);
                if x < xint {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Counter-clockwise copy.
    fn ccw(&self) -> Vec<[f64; 2]> {
        if self.signed_area() >= 0.0 {
            self.points.clone()
        } else {
            self.points.iter().rev().cloned().collect()
        }
    }
}

/// Ear-clipping triangulation of a simple polygon (CCW input).
fn triangulate(pts: &[[f64; 2]]) -> Vec<[[f64; 2]; 3]> {
    fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    }
    fn in_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
        // boundary counts as inside: a reflex vertex on an ear edge must
        // still block the ear
        let d1 = cross(a, b, p);
        let d2 = cross(b, c, p);
        let d3 = cross(c, a, p);
        d1 >= -1e-12 && d2 >= -1e-12 && d3 >= -1e-12
    }
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    let mut tris = Vec::new();
    let mut guard = 0usize;
    while idx.len() > 3 && guard < 10_000 {
        guard += 1;
        let n = idx.len();
        let mut clipped = false;
        for k in 0..n {
            let a = pts[idx[(k + n - 1) % n]];
            let b = pts[idx[k]];
            let c = pts[idx[(k + 1) % n]];
            if cross(a, b, c) <= 1e-12 {
                continue; // reflex or degenerate corner
            }
            let any_inside = idx
                .iter()
                .filter(|&&i| i != idx[(k + n - 1) % n] && i != idx[k] && i != idx[(k + 1) % n])
                .any(|&i| in_triangle(pts[i], a, b, c));
            if !any_inside {
                tris.push([a, b, c]);
                idx.remove(k);
                clipped = true;
                break;
            }
        }
        if !clipped {
            break; // numerically stuck; remaining region dropped
        }
    }
    if idx.len() == 3 {
        let a = pts[idx[0]];
        let b = pts[idx[1]];
        let c = pts[idx[2]];
        if cross(a, b, c) > 0.0 {
            tris.push([a, b, c]);
        }
    }
    tris
}

/// Sutherland-Hodgman clip of a convex subject polygon against a convex clip
/// polygon (both CCW). Returns the intersection area.
fn convex_intersection_area(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> f64 {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            return 0.0;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut out);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let m = input.len();
        for j in 0..m {
            let p = input[j];
            let q = input[(j + 1) % m];
            let sp = side(p);
            let sq = side(q);
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp > 0.0 && sq < 0.0) || (sp < 0.0 && sq > 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    let mut s = 0.0;
    let m = out.len();
    for i in 0..m {
        let p = out[i];
        let q = out[(i + 1) % m];
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s.abs()
}

/// Intersection area of two simple polygons via triangulation of both sides
/// and pairwise convex clipping.
pub fn polygon_intersection_area(a: &Polygon, b: &Polygon) -> f64 {
    let ta = triangulate(&a.ccw());
    let tb = triangulate(&b.ccw());
    let mut total = 0.0;
    for x in &ta {
        for y in &tb {
            total += convex_intersection_area(x, y);
        }
    }
    total
}

/// area(a n b) / area(a u b); 0 for degenerate polygons.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> f64 {
    if !a.is_valid() || !b.is_valid() {
        log::warn!("polygon_iou on degenerate polygon");
        return 0.0;
    }
    // cheap reject
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    if ax1 <= bx0 || bx1 <= ax0 || ay1 <= by0 || by1 <= ay0 {
        return 0.0;
    }
    let inter = polygon_intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// 28x28 binary instance mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub data: Vec<u8>, // MASK_DIM entries, values in {0,1}
}

impl BinaryMask {
    pub fn zeros() -> Self {
        Self {
            data: vec![0u8; MASK_DIM],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * MASK_SIZE + col]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / MASK_DIM as f64
    }

    pub fn is_valid(&self) -> bool {
        self.foreground_count() > 0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            let a = *a != 0;
            let b = *b != 0;
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Rasterize a polygon (absolute pixel coords) into the 28x28 grid of the
/// given normalized box, sampling at cell centers. An all-zero result means
/// the polygon missed the box; callers check `is_valid`.
pub fn rasterize_polygon(p: &Polygon, b: &BBox, img_w: f64, img_h: f64) -> BinaryMask {
    let (x0, y0, x1, y1) = b.corners();
    let (bx0, by0) = (x0 * img_w, y0 * img_h);
    let (bw, bh) = ((x1 - x0) * img_w, (y1 - y0) * img_h);
    let mut mask = BinaryMask::zeros();
    for r in 0..MASK_SIZE {
        let y = by0 + (r as f64 + 0.5) / MASK_SIZE as f64 * bh;
        for c in 0..MASK_SIZE {
            let x = bx0 + (c as f64 + 0.5) / MASK_SIZE as f64 * bw;
            if p.contains(x, y) {
                mask.data[r * MASK_SIZE + c] = 1;
            }
        }
    }
    mask
}

/// Convex hull (Andrew monotone chain), counter-clockwise, no duplicates.
/// Returns fewer than 3 points for degenerate input.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup_by(|a, b| a[0] == b[0] && a[1] == b[1]);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let chain = |iter: &mut dyn Iterator<Item = &[f64; 2]>| {
        let mut h: Vec<[f64; 2]> = Vec::new();
        for p in iter {
            while h.len() >= 2 && cross(&h[h.len() - 2], &h[h.len() - 1], p) <= 0.0 {
                h.pop();
            }
            h.push(*p);
        }
        h.pop(); // endpoint repeats in the other chain
        h
    };
    let mut hull = chain(&mut pts.iter());
    hull.extend(chain(&mut pts.iter().rev()));
    hull
}

impl BinaryMask {
    /// Outline of the foreground as a convex polygon in image pixels,
    /// un-mapping the mask from its normalized box. None when (nearly) empty.
    pub fn to_polygon(&self, b: &BBox, img_w: f64, img_h: f64) -> Option<Polygon> {
        let (x0, y0, x1, y1) = b.corners();
        let (bx0, by0) = (x0 * img_w, y0 * img_h);
        let (bw, bh) = ((x1 - x0) * img_w, (y1 - y0) * img_h);
        let mut corners = Vec::new();
        for r in 0..MASK_SIZE {
            for c in 0..MASK_SIZE {
                if self.get(r, c) != 0 {
                    for (dr, dc) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
                        corners.push([
                            bx0 + (c as f64 + dc) / MASK_SIZE as f64 * bw,
                            by0 + (r as f64 + dr) / MASK_SIZE as f64 * bh,
                        ]);
                    }
                }
            }
        }
        let hull = convex_hull(&corners);
        if hull.len() < 3 {
            return None;
        }
        let p = Polygon::new(hull);
        p.is_valid().then_some(p)
    }
}

/// Refine a box by (dx, dy, dw, dh): center shifted by deltas scaled by the
/// current size, log-space size update, result clipped to the unit square.
pub fn apply_box_deltas(b: &BBox, deltas: [f64; 4]) -> Result<BBox> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric(format!("non-finite box deltas {deltas:?}")));
    }
    let cx = b.cx + deltas[0] * b.w;
    let cy = b.cy + deltas[1] * b.h;
    let w = b.w * deltas[2].exp();
    let h = b.h * deltas[3].exp();
    Ok(BBox::new(cx, cy, w, h).clip_unit())
}
