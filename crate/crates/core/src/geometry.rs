//! Planar primitives: points, boxes, polygons and rasterization.
//!
//! Pixel `(c, r)` covers `[c, c+1) × [r, r+1)`; rasterization samples pixel
//! centers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }
}

/// Axis-aligned box as corner coordinates `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(b: [f64; 4]) -> Self {
        Self::new(b[0], b[1], b[0] + b[2], b[1] + b[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let iw = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let ih = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn of_points(points: &[Point]) -> BBox {
        let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            b.x1 = b.x1.min(p.x);
            b.y1 = b.y1.min(p.y);
            b.x2 = b.x2.max(p.x);
            b.y2 = b.y2.max(p.y);
        }
        b
    }

    /// Mirror across the vertical axis of an image of width `w`.
    pub fn hflip(&self, w: f64) -> BBox {
        BBox::new(w - self.x2, self.y1, w - self.x1, self.y2)
    }

    pub fn max_corner_error(&self, o: &BBox) -> f64 {
        self.to_array().iter().zip(o.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Signed shoelace area (positive for counter-clockwise in y-up axes).
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p.x * q.y - q.x * p.y;
    }
    a / 2.0
}

pub fn polygon_area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

/// Even-odd point-in-polygon test.
pub fn contains(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Distance from `p` to the closest polygon edge.
pub fn boundary_distance(poly: &[Point], p: Point) -> f64 {
    let n = poly.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 { 0.0 } else { (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0) };
        best = best.min(p.dist(Point::new(a.x + t * dx, a.y + t * dy)));
    }
    best
}

pub fn hflip_polygon(poly: &[Point], w: f64) -> Vec<Point> {
    poly.iter().rev().map(|p| Point::new(w - p.x, p.y)).collect()
}

/// Binary mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn iou(&self, o: &Mask) -> f64 {
        assert_eq!((self.width, self.height), (o.width, o.height));
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&o.data) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Marks every pixel whose center lies inside `poly`.
pub fn rasterize(poly: &[Point], width: usize, height: usize) -> Mask {
    let mut mask = Mask::new(width, height);
    if poly.len() < 3 {
        return mask;
    }
    let b = BBox::of_points(poly);
    let x0 = (b.x1.floor().max(0.0)) as usize;
    let y0 = (b.y1.floor().max(0.0)) as usize;
    let x1 = (b.x2.ceil().max(0.0) as usize).min(width);
    let y1 = (b.y2.ceil().max(0.0) as usize).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            if contains(poly, Point::new(x as f64 + 0.5, y as f64 + 0.5)) {
                mask.data[y * width + x] = true;
            }
        }
    }
    mask
}

/// Regular `n`-gon approximating a circle.
pub fn circle_polygon(center: Point, radius: f64, n: usize) -> Vec<Point> {
    (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            Point::new(center.x + radius * a.cos(), center.y + radius * a.sin())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_iou_and_conversion() {
        let a = BBox::from_xywh([0.0, 0.0, 10.0, 10.0]);
        assert_eq!(a, BBox::new(0.0, 0.0, 10.0, 10.0));
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
    }

    #[test]
    fn rasterized_square_has_exact_area() {
        let sq = [Point::new(2.0, 2.0), Point::new(6.0, 2.0), Point::new(6.0, 6.0), Point::new(2.0, 6.0)];
        let m = rasterize(&sq, 10, 10);
        assert_eq!(m.count(), 16);
        assert!(m.get(2, 2) && m.get(5, 5) && !m.get(6, 6));
    }

    #[test]
    fn flip_is_involution() {
        let b = BBox::new(1.0, 2.0, 7.0, 9.0);
        assert_eq!(b.hflip(20.0).hflip(20.0), b);
    }
}
