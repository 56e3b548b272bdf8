//! Multi-track sequence layout: shared observation (image patches plus an
//! optional instruction) followed by N parallel tracks of
//! `[local feature][task identifier][response...]`, with the grid that
//! anchors each track and the attention mask that isolates them.

use std::fmt::Write as _;

use crate::error::{Result, UliError};
use crate::geometry::Point;
use crate::scalar::Scalar;
use crate::task::{TaskKind, TaskSpec, SEMSEG_CELL};
use crate::tensor::{KeyLists, Matrix};

/// Grid points in row-major order with their window assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub cols: usize,
    pub rows: usize,
    pub points: Vec<Point>,
    pub window_of: Vec<usize>,
    pub windows_per_side: usize,
    /// Window side in pixels.
    pub window_px: usize,
    pub per_window: Vec<usize>,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn window_at(&self, p: Point) -> usize {
        window_index(p, self.window_px, self.windows_per_side)
    }

    /// Track indices grouped by window.
    pub fn by_window(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.windows_per_side * self.windows_per_side];
        for (i, &w) in self.window_of.iter().enumerate() {
            out[w].push(i);
        }
        out
    }
}

fn window_index(p: Point, window_px: usize, per_side: usize) -> usize {
    let wx = ((p.x / window_px as f64).floor() as usize).min(per_side - 1);
    let wy = ((p.y / window_px as f64).floor() as usize).min(per_side - 1);
    wy * per_side + wx
}

fn check_geometry(task: &TaskSpec) -> Result<()> {
    if task.patch == 0 || !task.resolution.is_multiple_of(task.patch) {
        return Err(UliError::GeometryError(format!(
            "resolution {} not divisible by patch {}",
            task.resolution, task.patch
        )));
    }
    let grid = task.resolution / task.patch;
    if task.window == 0 || !grid.is_multiple_of(task.window) && grid > task.window {
        return Err(UliError::GeometryError(format!("window {} does not divide patch grid {grid}", task.window)));
    }
    Ok(())
}

/// Window geometry `(window_px, windows_per_side)`; a window larger than the
/// image degenerates to one window.
pub fn window_geometry(task: &TaskSpec) -> (usize, usize) {
    let grid = task.resolution / task.patch;
    let w = task.window.min(grid);
    (w * task.patch, grid / w)
}

pub fn make_grid(task: &TaskSpec) -> Result<GridSpec> {
    check_geometry(task)?;
    let (window_px, per_side) = window_geometry(task);
    let r = task.resolution as f64;
    let (cols, points) = match task.kind {
        TaskKind::Detection | TaskKind::InstanceSeg => {
            let k = task.points_per_window_side;
            if k == 0 {
                return Err(UliError::GeometryError("zero points per window".into()));
            }
            let cols = per_side * k;
            let cell = window_px as f64 / k as f64;
            let mut pts = Vec::with_capacity(cols * cols);
            for gy in 0..cols {
                for gx in 0..cols {
                    let (wy, sy) = (gy / k, gy % k);
                    let (wx, sx) = (gx / k, gx % k);
                    pts.push(Point::new(
                        (wx * window_px) as f64 + (sx as f64 + 0.5) * cell,
                        (wy * window_px) as f64 + (sy as f64 + 0.5) * cell,
                    ));
                }
            }
            (cols, pts)
        }
        TaskKind::SemanticSeg => {
            if !task.resolution.is_multiple_of(SEMSEG_CELL) {
                return Err(UliError::GeometryError(format!(
                    "semantic resolution {} not divisible by {SEMSEG_CELL}",
                    task.resolution
                )));
            }
            let cols = task.resolution / SEMSEG_CELL;
            let c = SEMSEG_CELL as f64;
            let pts = (0..cols * cols)
                .map(|i| Point::new(((i % cols) as f64 + 0.5) * c, ((i / cols) as f64 + 0.5) * c))
                .collect();
            (cols, pts)
        }
        TaskKind::Caption | TaskKind::Grounding => (1, vec![Point::new(r / 2.0, r / 2.0)]),
    };
    let window_of: Vec<usize> = points.iter().map(|&p| window_index(p, window_px, per_side)).collect();
    let mut per_window = vec![0; per_side * per_side];
    for &w in &window_of {
        per_window[w] += 1;
    }
    Ok(GridSpec {
        resolution: task.resolution,
        cols,
        rows: cols,
        points,
        window_of,
        windows_per_side: per_side,
        window_px,
        per_window,
    })
}

/// Bilinear weights over the patch grid for a pixel location; patch
/// centers sit at `(i + 0.5) · patch`, locations beyond the outer centers
/// clamp to the border.
pub fn bilinear_weights(point: Point, patch: usize, grid_w: usize, grid_h: usize) -> Vec<(usize, f64)> {
    let u = (point.x / patch as f64 - 0.5).clamp(0.0, (grid_w - 1) as f64);
    let v = (point.y / patch as f64 - 0.5).clamp(0.0, (grid_h - 1) as f64);
    let (i0, j0) = (u.floor() as usize, v.floor() as usize);
    let (i1, j1) = ((i0 + 1).min(grid_w - 1), (j0 + 1).min(grid_h - 1));
    let (fu, fv) = (u - i0 as f64, v - j0 as f64);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (idx, w) in [
        (j0 * grid_w + i0, (1.0 - fu) * (1.0 - fv)),
        (j0 * grid_w + i1, fu * (1.0 - fv)),
        (j1 * grid_w + i0, (1.0 - fu) * fv),
        (j1 * grid_w + i1, fu * fv),
    ] {
        if w == 0.0 {
            continue;
        }
        match out.iter_mut().find(|(i, _)| *i == idx) {
            Some(e) => e.1 += w,
            None => out.push((idx, w)),
        }
    }
    out
}

/// Local image feature at a grid point, interpolated from a patch-feature
/// map in raster order.
pub fn interpolate_local_feature<T: Scalar>(
    features: &Matrix<T>,
    grid_w: usize,
    grid_h: usize,
    patch: usize,
    point: Point,
) -> Vec<T> {
    assert_eq!(features.rows, grid_w * grid_h, "feature map does not match patch grid");
    let mut out = vec![T::zero(); features.cols];
    for (idx, w) in bilinear_weights(point, patch, grid_w, grid_h) {
        let w = T::of(w);
        for (o, f) in out.iter_mut().zip(features.row(idx)) {
            *o += w * *f;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Image,
    Instruction,
    LocalPrompt,
    TaskPrompt,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub track: Option<usize>,
    pub start: usize,
    pub len: usize,
}

/// Flattened sequence layout. Every track has the same length
/// `2 + steps`; the local time-step index of a track position is its offset
/// inside the track.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackLayout {
    pub image_len: usize,
    pub instruction_len: usize,
    pub tracks: usize,
    pub steps: usize,
    pub segments: Vec<Segment>,
}

impl TrackLayout {
    pub fn new(image_len: usize, instruction_len: usize, tracks: usize, steps: usize) -> Self {
        let mut segments = vec![Segment { kind: SegmentKind::Image, track: None, start: 0, len: image_len }];
        let mut pos = image_len;
        if instruction_len > 0 {
            segments.push(Segment { kind: SegmentKind::Instruction, track: None, start: pos, len: instruction_len });
            pos += instruction_len;
        }
        for t in 0..tracks {
            for (kind, len) in
                [(SegmentKind::LocalPrompt, 1), (SegmentKind::TaskPrompt, 1), (SegmentKind::Response, steps)]
            {
                segments.push(Segment { kind, track: Some(t), start: pos, len });
                pos += len;
            }
        }
        Self { image_len, instruction_len, tracks, steps, segments }
    }

    pub fn shared_len(&self) -> usize {
        self.image_len + self.instruction_len
    }

    pub fn track_len(&self) -> usize {
        2 + self.steps
    }

    pub fn total_len(&self) -> usize {
        self.shared_len() + self.tracks * self.track_len()
    }

    pub fn track_start(&self, track: usize) -> usize {
        self.shared_len() + track * self.track_len()
    }

    pub fn position(&self, track: usize, local: usize) -> usize {
        debug_assert!(local < self.track_len());
        self.track_start(track) + local
    }

    /// `(track, local index)` of a track position.
    pub fn locate(&self, pos: usize) -> Option<(usize, usize)> {
        let s = self.shared_len();
        (pos >= s && pos < self.total_len()).then(|| ((pos - s) / self.track_len(), (pos - s) % self.track_len()))
    }

    /// Position whose output predicts response step `step`.
    pub fn prediction_position(&self, track: usize, step: usize) -> usize {
        self.position(track, 1 + step)
    }

    pub fn segment_kind(&self, pos: usize) -> SegmentKind {
        if pos < self.image_len {
            SegmentKind::Image
        } else if pos < self.shared_len() {
            SegmentKind::Instruction
        } else {
            match self.locate(pos).expect("position inside layout").1 {
                0 => SegmentKind::LocalPrompt,
                1 => SegmentKind::TaskPrompt,
                _ => SegmentKind::Response,
            }
        }
    }
}

pub fn build_layout(task: &TaskSpec, grid: &GridSpec, instruction_len: usize) -> TrackLayout {
    let patches = task.patch_grid() * task.patch_grid();
    let instr = if task.kind.has_instruction() { instruction_len.min(crate::task::MAX_INSTRUCTION) } else { 0 };
    TrackLayout::new(patches, instr, grid.len(), task.steps())
}

/// Factored attention mask over a [`TrackLayout`].
///
/// Image and instruction blocks are bidirectional, instructions always see
/// the image, the image sees the instruction only with text conditioning,
/// tracks see the whole shared observation plus their own prefix, tracks
/// never see each other, and the shared observation never sees tracks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub layout: TrackLayout,
    pub text_conditioning: bool,
}

/// Per-position window membership for window-attention layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowMap {
    pub image_window: Vec<usize>,
    pub track_window: Vec<usize>,
}

impl WindowMap {
    pub fn new(task: &TaskSpec, track_points: &[Point]) -> Self {
        let (window_px, per_side) = window_geometry(task);
        let g = task.patch_grid();
        let image_window = (0..g * g)
            .map(|i| {
                let p = Point::new(((i % g) * task.patch) as f64, ((i / g) * task.patch) as f64);
                window_index(p, window_px, per_side)
            })
            .collect();
        let track_window = track_points.iter().map(|&p| window_index(p, window_px, per_side)).collect();
        Self { image_window, track_window }
    }

    pub fn windows(&self) -> usize {
        self.image_window.iter().copied().max().map_or(1, |m| m + 1)
    }
}

impl AttentionMask {
    pub fn new(layout: TrackLayout, text_conditioning: bool) -> Self {
        Self { layout, text_conditioning }
    }

    pub fn len(&self) -> usize {
        self.layout.total_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        let l = &self.layout;
        let (img, shared) = (l.image_len, l.shared_len());
        if q < img {
            k < img || (k < shared && self.text_conditioning)
        } else if q < shared {
            k < shared
        } else if k < shared {
            true
        } else {
            let (tq, iq) = l.locate(q).unwrap();
            let (tk, ik) = l.locate(k).unwrap();
            tq == tk && ik <= iq
        }
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let n = self.len();
        let mut out = vec![false; n * n];
        for q in 0..n {
            for k in 0..n {
                out[q * n + k] = self.allows(q, k);
            }
        }
        out
    }

    /// Plain PBM (`P1`); `1` marks an allowed query→key entry.
    pub fn to_pbm(&self) -> String {
        let n = self.len();
        let mut out = format!("P1\n# rows=query cols=key text_conditioning={}\n{n} {n}\n", self.text_conditioning);
        for q in 0..n {
            let mut line = String::with_capacity(2 * n);
            for k in 0..n {
                let _ = write!(line, "{}", if self.allows(q, k) { '1' } else { '0' });
                if k + 1 < n {
                    line.push(' ');
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// Admissible keys for each query, optionally restricted to windows.
    ///
    /// Under a window restriction, image↔image and track→image pairs must
    /// share a window; instruction tokens belong to every window.
    pub fn key_lists(&self, windows: Option<&WindowMap>) -> KeyLists {
        let l = &self.layout;
        let (img, shared) = (l.image_len, l.shared_len());
        let same = |a: usize, b: usize| windows.is_none_or(|w| w.image_window[a] == w.image_window[b]);
        let image_in = |track: usize, k: usize| windows.is_none_or(|w| w.track_window[track] == w.image_window[k]);
        let mut kl = KeyLists::new();
        for q in 0..l.total_len() {
            if q < img {
                let instr = if self.text_conditioning { img..shared } else { shared..shared };
                kl.push_query((0..img).filter(|&k| same(q, k)).chain(instr));
            } else if q < shared {
                kl.push_query(0..shared);
            } else {
                let (t, i) = l.locate(q).unwrap();
                let start = l.track_start(t);
                kl.push_query((0..img).filter(|&k| image_in(t, k)).chain(img..shared).chain(start..=start + i));
            }
        }
        kl
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Profile;

    #[test]
    fn paper_grids() {
        let det = TaskSpec::new(TaskKind::Detection, &Profile::paper());
        assert_eq!(make_grid(&det).unwrap().len(), 625);
        let sem = TaskSpec::new(TaskKind::SemanticSeg, &Profile::paper());
        let g = make_grid(&sem).unwrap();
        assert_eq!(g.len(), 1764);
        assert!(g.per_window.iter().all(|&c| c == 196));
        let cap = TaskSpec::new(TaskKind::Caption, &Profile::paper());
        assert_eq!(make_grid(&cap).unwrap().len(), 1);
    }

    #[test]
    fn desk_detection_grid_sits_in_windows() {
        let det = TaskSpec::new(TaskKind::Detection, &Profile::desk());
        let g = make_grid(&det).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g.points[0], Point::new(8.0, 8.0));
        assert_eq!(g.points[3], Point::new(56.0, 8.0));
        assert_eq!(g.per_window, vec![4, 4, 4, 4]);
        for (p, &w) in g.points.iter().zip(&g.window_of) {
            let (wx, wy) = (w % 2, w / 2);
            assert!(p.x > (wx * 32) as f64 && p.x < ((wx + 1) * 32) as f64);
            assert!(p.y > (wy * 32) as f64 && p.y < ((wy + 1) * 32) as f64);
        }
    }

    #[test]
    fn indivisible_geometry_is_rejected() {
        let mut t = TaskSpec::new(TaskKind::Detection, &Profile::desk());
        t.resolution = 60;
        assert!(matches!(make_grid(&t), Err(UliError::GeometryError(_))));
        let mut t = TaskSpec::new(TaskKind::Detection, &Profile::desk());
        t.resolution = 72;
        assert!(matches!(make_grid(&t), Err(UliError::GeometryError(_))));
    }

    #[test]
    fn bilinear_identity_and_midpoint() {
        let f = Matrix::from_fn(4, 3, |r, c| (r * 10 + c) as f64);
        let at_center = interpolate_local_feature(&f, 2, 2, 8, Point::new(12.0, 4.0));
        assert_eq!(at_center, f.row(1).to_vec());
        let mid = interpolate_local_feature(&f, 2, 2, 8, Point::new(8.0, 4.0));
        for c in 0..3 {
            assert_eq!(mid[c], (f.get(0, c) + f.get(1, c)) / 2.0);
        }
    }

    #[test]
    fn layout_lengths() {
        let cap = TaskSpec::new(TaskKind::Caption, &Profile::paper());
        let l = build_layout(&cap, &make_grid(&cap).unwrap(), 0);
        assert_eq!(l.total_len(), 196 + 1 + 1 + 20);
        let det = TaskSpec::new(TaskKind::Detection, &Profile::desk());
        let l = build_layout(&det, &make_grid(&det).unwrap(), 5);
        assert_eq!(l.total_len(), 64 + 16 * 7);
        assert!(!l.segments.iter().any(|s| s.kind == SegmentKind::Instruction));
        let gr = TaskSpec::new(TaskKind::Grounding, &Profile::desk());
        let l = build_layout(&gr, &make_grid(&gr).unwrap(), 3);
        assert!(l.segments.iter().any(|s| s.kind == SegmentKind::Instruction && s.len == 3));
        let total: usize = l.segments.iter().map(|s| s.len).sum();
        assert_eq!(total, l.total_len());
    }

    /// Two tracks of length 3 after a shared observation of 2 image tokens.
    #[test]
    fn two_track_mask_enumerated() {
        let layout = TrackLayout::new(2, 0, 2, 1);
        let mask = AttentionMask::new(layout, false);
        #[rustfmt::skip]
        let want = [
            [1, 1, 0, 0, 0, 0, 0, 0],
            [1, 1, 0, 0, 0, 0, 0, 0],
            [1, 1, 1, 0, 0, 0, 0, 0],
            [1, 1, 1, 1, 0, 0, 0, 0],
            [1, 1, 1, 1, 1, 0, 0, 0],
            [1, 1, 0, 0, 0, 1, 0, 0],
            [1, 1, 0, 0, 0, 1, 1, 0],
            [1, 1, 0, 0, 0, 1, 1, 1],
        ];
        let dense = mask.to_dense();
        for q in 0..8 {
            for k in 0..8 {
                assert_eq!(dense[q * 8 + k], want[q][k] == 1, "q={q} k={k}");
            }
        }
    }

    #[test]
    fn text_conditioning_opens_image_to_instruction() {
        let layout = TrackLayout::new(4, 2, 1, 4);
        let on = AttentionMask::new(layout.clone(), true);
        let off = AttentionMask::new(layout, false);
        assert!(on.allows(0, 4) && on.allows(3, 5));
        assert!(!off.allows(0, 4));
        assert!(off.allows(4, 0) && off.allows(4, 5));
        for q in 0..6 {
            for k in 6..12 {
                assert!(!on.allows(q, k));
            }
        }
    }

    #[test]
    fn block_structure_properties() {
        let layout = TrackLayout::new(5, 3, 3, 4);
        let m = AttentionMask::new(layout.clone(), true);
        let shared = layout.shared_len();
        for q in 0..shared {
            for k in 0..shared {
                assert_eq!(m.allows(q, k), m.allows(k, q), "bidirectional block symmetric");
            }
        }
        for t in 0..3 {
            let s = layout.track_start(t);
            for i in 0..layout.track_len() {
                for j in 0..layout.track_len() {
                    assert_eq!(m.allows(s + i, s + j), j <= i);
                }
            }
        }
    }

    #[test]
    fn key_lists_agree_with_dense_mask() {
        let layout = TrackLayout::new(6, 2, 3, 2);
        let m = AttentionMask::new(layout, true);
        let kl = m.key_lists(None);
        let n = m.len();
        for q in 0..n {
            let want: Vec<u32> = (0..n).filter(|&k| m.allows(q, k)).map(|k| k as u32).collect();
            assert_eq!(kl.keys_of(q), want.as_slice());
        }
    }

    #[test]
    fn pbm_header() {
        let m = AttentionMask::new(TrackLayout::new(1, 0, 1, 1), false);
        let pbm = m.to_pbm();
        assert!(pbm.starts_with("P1\n"));
        assert!(pbm.contains("\n4 4\n"));
    }
}
