//! Label assignment from annotations to grid tracks.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::codec::{
    background_target, encode_caption, encode_dense, encode_detection, encode_grounding, encode_instance, BoxAnn,
    InstAnn, LabelMap, TrackTarget,
};
use crate::error::{Result, UliError};
use crate::geometry::{boundary_distance, contains, signed_area, BBox, Point};
use crate::scalar::Scalar;
use crate::task::{TaskKind, TaskSpec, DENSE_SIDE, SEMSEG_CELL, SEMSEG_DOWNSAMPLE};
use crate::template::GridSpec;
use crate::vocab::Vocabulary;

/// Minimum-cost assignment of every row to a distinct column (`rows ≤ cols`).
///
/// `cost` is row-major `rows × cols`. Shortest augmenting paths with
/// potentials, `O(rows² · cols)`.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols, "hungarian needs rows <= cols");
    assert_eq!(cost.len(), rows * cols);
    let a = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![usize::MAX; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// What to do when there are more boxes than grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverflowPolicy {
    Reject,
    /// Keep the boxes of the cheapest matching that covers every point.
    #[default]
    KeepBest,
}

/// Grid point → instance mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub matched: Vec<Option<usize>>,
    /// Total normalized cost of the matched pairs.
    pub cost: f64,
}

impl Assignment {
    pub fn positives(&self) -> Vec<bool> {
        self.matched.iter().map(Option::is_some).collect()
    }
}

fn l1(a: Point, b: Point) -> f64 {
    (a.x - b.x).abs() + (a.y - b.y).abs()
}

/// `|dx| + |dy|` between grid point and box center over the image diagonal.
pub fn center_cost(point: Point, center: Point, resolution: f64) -> f64 {
    l1(point, center) / (resolution * std::f64::consts::SQRT_2)
}

pub fn cost_matrix(grid: &GridSpec, boxes: &[BBox]) -> Vec<f64> {
    let r = grid.resolution as f64;
    let mut out = Vec::with_capacity(boxes.len() * grid.len());
    for b in boxes {
        let c = b.center();
        out.extend(grid.points.iter().map(|&p| center_cost(p, c, r)));
    }
    out
}

/// One-to-one matching of boxes to grid points minimizing total center cost.
pub fn hungarian_match(grid: &GridSpec, boxes: &[BBox], policy: OverflowPolicy) -> Result<Assignment> {
    let n = grid.len();
    let m = boxes.len();
    let cost = cost_matrix(grid, boxes);
    let mut matched = vec![None; n];
    if m <= n {
        for (b, p) in hungarian(&cost, m, n).into_iter().enumerate() {
            matched[p] = Some(b);
        }
    } else {
        if policy == OverflowPolicy::Reject {
            return Err(UliError::CapacityExceeded { boxes: m, points: n });
        }
        log::warn!("{m} boxes exceed {n} grid points; keeping the {n} cheapest");
        let mut t = vec![0.0; n * m];
        for b in 0..m {
            for p in 0..n {
                t[p * m + b] = cost[b * n + p];
            }
        }
        for (p, b) in hungarian(&t, n, m).into_iter().enumerate() {
            matched[p] = Some(b);
        }
    }
    let mut by_box = vec![None; m];
    for (p, b) in matched.iter().enumerate() {
        if let Some(b) = b {
            by_box[*b] = Some(p);
        }
    }
    // Sum raw L1 distances and normalize once, so lattice coordinates give
    // order-independent totals.
    let l1: f64 = by_box
        .iter()
        .enumerate()
        .filter_map(|(b, p)| p.map(|p| l1(grid.points[p], boxes[b].center())))
        .sum();
    Ok(Assignment { matched, cost: l1 / (grid.resolution as f64 * std::f64::consts::SQRT_2) })
}

/// Area centroid of a simple polygon.
pub fn mass_center(poly: &[Point]) -> Result<Point> {
    let a = signed_area(poly);
    if poly.len() < 3 || a.abs() < 1e-12 {
        return Err(UliError::DegenerateInstance("zero-area polygon".into()));
    }
    let n = poly.len();
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        let cross = p.x * q.y - q.x * p.y;
        cx += (p.x + q.x) * cross;
        cy += (p.y + q.y) * cross;
    }
    Ok(Point::new(cx / (6.0 * a), cy / (6.0 * a)))
}

/// Mass center when it is interior; otherwise an approximate pole of
/// inaccessibility (grid search refined three times), ties broken toward
/// the centroid.
pub fn interior_center(poly: &[Point]) -> Result<Point> {
    let c = mass_center(poly)?;
    if contains(poly, c) {
        return Ok(c);
    }
    let b = BBox::of_points(poly);
    let (mut cx, mut cy) = (b.center().x, b.center().y);
    let (mut hw, mut hh) = (b.width() / 2.0, b.height() / 2.0);
    let steps = 16;
    let mut best: Option<(f64, f64, Point)> = None;
    for _ in 0..4 {
        for iy in 0..=steps {
            for ix in 0..=steps {
                let p = Point::new(
                    cx - hw + 2.0 * hw * ix as f64 / steps as f64,
                    cy - hh + 2.0 * hh * iy as f64 / steps as f64,
                );
                if !contains(poly, p) {
                    continue;
                }
                let d = boundary_distance(poly, p);
                let to_c = p.dist(c);
                let better = match best {
                    None => true,
                    Some((bd, bc, _)) => d > bd + 1e-12 || ((d - bd).abs() <= 1e-12 && to_c < bc),
                };
                if better {
                    best = Some((d, to_c, p));
                }
            }
        }
        let Some((_, _, p)) = best else { break };
        cx = p.x;
        cy = p.y;
        hw /= 4.0;
        hh /= 4.0;
    }
    best.map(|(_, _, p)| p).ok_or(UliError::CenterOutside)
}

/// Ray direction `k` of `n`: angle `2πk/n` from +x.
pub fn ray_direction(k: usize, n: usize) -> (f64, f64) {
    let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
    (a.cos(), a.sin())
}

/// Distance from `center` to the farthest boundary crossing along each ray.
pub fn polar_encode(poly: &[Point], center: Point, rays: usize) -> Result<Vec<f64>> {
    if !contains(poly, center) {
        return Err(UliError::CenterOutside);
    }
    let n = poly.len();
    Ok((0..rays)
        .map(|k| {
            let (dx, dy) = ray_direction(k, rays);
            let mut far: f64 = 0.0;
            for i in 0..n {
                let (p, q) = (poly[i], poly[(i + 1) % n]);
                let (ex, ey) = (q.x - p.x, q.y - p.y);
                let den = dx * ey - dy * ex;
                if den.abs() < 1e-12 {
                    continue;
                }
                let (wx, wy) = (p.x - center.x, p.y - center.y);
                let t = (wx * ey - wy * ex) / den;
                let s = (wx * dy - wy * dx) / den;
                if t >= 0.0 && (-1e-9..=1.0 + 1e-9).contains(&s) {
                    far = far.max(t);
                }
            }
            far
        })
        .collect())
}

/// Polygon through the ray endpoints.
pub fn polar_decode(center: Point, lengths: &[f64]) -> Vec<Point> {
    let n = lengths.len();
    lengths
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let (dx, dy) = ray_direction(k, n);
            Point::new(center.x + l * dx, center.y + l * dy)
        })
        .collect()
}

/// Majority vote over `factor × factor` blocks, ties to the lowest label.
pub fn downsample_majority(map: &LabelMap, factor: usize) -> Result<LabelMap> {
    if !map.width.is_multiple_of(factor) || !map.height.is_multiple_of(factor) {
        return Err(UliError::GeometryError(format!(
            "{}×{} map not divisible by {factor}",
            map.width, map.height
        )));
    }
    let (w, h) = (map.width / factor, map.height / factor);
    let mut out = LabelMap::new(w, h);
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            counts.clear();
            for dy in 0..factor {
                for dx in 0..factor {
                    let l = map.get(x * factor + dx, y * factor + dy);
                    match counts.iter_mut().find(|(k, _)| *k == l) {
                        Some(e) => e.1 += 1,
                        None => counts.push((l, 1)),
                    }
                }
            }
            let best = counts.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).unwrap();
            out.set(x, y, best.0);
        }
    }
    Ok(out)
}

/// Each grid point's 4×4 block of the 4×-downsampled map, raster order.
pub fn semseg_targets(map: &LabelMap, grid: &GridSpec) -> Result<Vec<Vec<u32>>> {
    if map.width != grid.resolution || map.height != grid.resolution || !map.width.is_multiple_of(SEMSEG_CELL) {
        return Err(UliError::GeometryError(format!(
            "{}×{} map does not match a {} grid",
            map.width, map.height, grid.resolution
        )));
    }
    if grid.len() != (map.width / SEMSEG_CELL) * (map.height / SEMSEG_CELL) {
        return Err(UliError::GeometryError("grid is not a semantic-segmentation grid".into()));
    }
    let small = downsample_majority(map, SEMSEG_DOWNSAMPLE)?;
    Ok(grid
        .points
        .iter()
        .map(|p| {
            let (cx, cy) = ((p.x / SEMSEG_CELL as f64) as usize, (p.y / SEMSEG_CELL as f64) as usize);
            let mut labels = Vec::with_capacity(DENSE_SIDE * DENSE_SIDE);
            for dy in 0..DENSE_SIDE {
                for dx in 0..DENSE_SIDE {
                    labels.push(small.get(cx * DENSE_SIDE + dx, cy * DENSE_SIDE + dy));
                }
            }
            labels
        })
        .collect())
}

/// Per-window subsampling of training tracks: positives first (uniformly
/// chosen if they exceed the budget), the rest uniform negatives.
pub fn sample_grid_points<R: Rng + ?Sized>(
    positive: &[bool],
    window_of: &[usize],
    budget: usize,
    rng: &mut R,
) -> Vec<usize> {
    assert_eq!(positive.len(), window_of.len());
    let windows = window_of.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for w in 0..windows {
        let members: Vec<usize> = (0..positive.len()).filter(|&i| window_of[i] == w).collect();
        let (pos, neg): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&i| positive[i]);
        if pos.len() >= budget {
            out.extend(pos.choose_multiple(rng, budget).copied());
        } else {
            out.extend(&pos);
            out.extend(neg.choose_multiple(rng, budget - pos.len()).copied());
        }
    }
    out.sort_unstable();
    out
}

/// Annotation of one image for one task.
#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    Detection(Vec<BoxAnn>),
    Instance(Vec<InstAnn>),
    Semantic(LabelMap),
    Caption(String),
    Grounding { phrase: String, bbox: BBox },
}

impl Annotation {
    pub fn task(&self) -> TaskKind {
        match self {
            Annotation::Detection(_) => TaskKind::Detection,
            Annotation::Instance(_) => TaskKind::InstanceSeg,
            Annotation::Semantic(_) => TaskKind::SemanticSeg,
            Annotation::Caption(_) => TaskKind::Caption,
            Annotation::Grounding { .. } => TaskKind::Grounding,
        }
    }
}

/// Targets for every grid track of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignedTargets {
    pub targets: Vec<TrackTarget>,
    /// Tracks carrying an object (sparse tasks); all tracks otherwise.
    pub positive: Vec<bool>,
}

pub fn assign_targets<T: Scalar>(
    task: &TaskSpec,
    vocab: &Vocabulary<T>,
    grid: &GridSpec,
    ann: &Annotation,
    policy: OverflowPolicy,
) -> Result<AssignedTargets> {
    if ann.task() != task.kind {
        return Err(UliError::LayoutMismatch(format!("{} annotation for {} task", ann.task(), task.kind)));
    }
    let sparse = |boxes: Vec<BBox>, encode: &dyn Fn(usize, Point) -> Result<TrackTarget>| {
        let a = hungarian_match(grid, &boxes, policy)?;
        let targets = a
            .matched
            .iter()
            .zip(&grid.points)
            .map(|(m, &p)| match m {
                Some(i) => encode(*i, p),
                None => Ok(background_target(task, vocab)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AssignedTargets { targets, positive: a.positives() })
    };
    match ann {
        Annotation::Detection(boxes) => {
            sparse(boxes.iter().map(|b| b.bbox).collect(), &|i, p| encode_detection(&boxes[i], p, vocab))
        }
        Annotation::Instance(insts) => {
            sparse(insts.iter().map(|b| b.bbox).collect(), &|i, p| encode_instance(&insts[i], p, vocab))
        }
        Annotation::Semantic(map) => {
            let targets =
                semseg_targets(map, grid)?.iter().map(|l| encode_dense(l, vocab)).collect::<Result<Vec<_>>>()?;
            let positive = vec![true; targets.len()];
            Ok(AssignedTargets { targets, positive })
        }
        Annotation::Caption(text) => {
            Ok(AssignedTargets { targets: vec![encode_caption(text, vocab)?], positive: vec![true] })
        }
        Annotation::Grounding { bbox, .. } => {
            Ok(AssignedTargets { targets: vec![encode_grounding(bbox, vocab)?], positive: vec![true] })
        }
    }
}
