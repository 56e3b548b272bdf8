//! Conversions between structured annotations and fixed-length token
//! responses.
//!
//! Sparse targets are `[class, offsets...]` relative to the anchoring grid
//! point, dense targets are 16 raster-order labels, captions are padded with
//! the terminator to 20 tokens and grounding boxes are 4 absolute
//! coordinates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assign::{interior_center, polar_decode, polar_encode};
use crate::error::{Result, UliError};
use crate::geometry::{polygon_area, BBox, Point};
use crate::scalar::Scalar;
use crate::task::{StepSlice, TaskKind, TaskSpec, CAPTION_LEN, DENSE_SIDE, RAYS};
use crate::vocab::{TokenId, Vocabulary};

/// A bin on a uniform quantization of `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizedCoord {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl QuantizedCoord {
    pub fn signed(&self) -> bool {
        self.lo < 0.0
    }
}

pub fn discretize(x: f64, lo: f64, hi: f64, bins: usize) -> Result<QuantizedCoord> {
    assert!(lo < hi && bins >= 2, "invalid quantizer [{lo}, {hi}] with {bins} bins");
    if !x.is_finite() {
        return Err(UliError::InvalidCoordinate(x));
    }
    let t = ((x - lo) / (hi - lo) * bins as f64).floor();
    let bin = t.clamp(0.0, (bins - 1) as f64) as usize;
    Ok(QuantizedCoord { bin, lo, hi, bins })
}

/// Center of the bin.
pub fn undiscretize(q: QuantizedCoord) -> f64 {
    q.lo + (q.bin as f64 + 0.5) * (q.hi - q.lo) / q.bins as f64
}

/// Box annotation; `category` indexes the vocabulary's concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnn {
    pub category: usize,
    pub bbox: BBox,
}

/// Instance annotation with its polygon boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstAnn {
    pub category: usize,
    pub bbox: BBox,
    pub polygon: Vec<Point>,
}

impl InstAnn {
    pub fn from_polygon(category: usize, polygon: Vec<Point>) -> Self {
        Self { category, bbox: BBox::of_points(&polygon), polygon }
    }

    pub fn as_box(&self) -> BoxAnn {
        BoxAnn { category: self.category, bbox: self.bbox }
    }
}

/// Per-pixel labels: 0 is background, `c + 1` is concept `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, labels: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u32) {
        self.labels[y * self.width + x] = v;
    }

    pub fn hflip(&self) -> LabelMap {
        let mut out = LabelMap::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, width: usize, height: usize) -> LabelMap {
        let mut out = LabelMap::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let sx = (x * self.width) / width;
                let sy = (y * self.height) / height;
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }
}

/// One track's response tokens with the positions that carry loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackTarget {
    pub tokens: Vec<TokenId>,
    pub supervised: Vec<bool>,
}

impl TrackTarget {
    fn full(tokens: Vec<TokenId>) -> Self {
        let supervised = vec![true; tokens.len()];
        Self { tokens, supervised }
    }
}

/// Decoded content of one track.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructuredOutput {
    Empty,
    Box { category: usize, bbox: BBox },
    Instance { category: usize, bbox: BBox, center: Point, rays: Vec<f64>, polygon: Vec<Point> },
    /// Raster-order labels, 0 for background.
    Dense { labels: Vec<u32> },
    Caption { text: String },
    Grounding { bbox: BBox },
}

fn resolution<T: Scalar>(vocab: &Vocabulary<T>) -> f64 {
    vocab.resolution() as f64
}

fn signed_token<T: Scalar>(vocab: &Vocabulary<T>, offset: f64) -> Result<TokenId> {
    let r = resolution(vocab);
    if !offset.is_finite() {
        return Err(UliError::InvalidCoordinate(offset));
    }
    if offset.abs() > r {
        return Err(UliError::OffsetOverflow { offset, range: r });
    }
    Ok(vocab.coord_id(discretize(offset, -r, r, vocab.coord_bins())?.bin))
}

fn unsigned_token<T: Scalar>(vocab: &Vocabulary<T>, x: f64) -> Result<TokenId> {
    let r = resolution(vocab);
    Ok(vocab.coord_id(discretize(x, 0.0, r, vocab.coord_bins())?.bin))
}

fn concept_token<T: Scalar>(vocab: &Vocabulary<T>, category: usize) -> Result<TokenId> {
    if category >= vocab.concepts().len() {
        return Err(UliError::UnknownCategory(format!("category index {category}")));
    }
    Ok(vocab.concept_id(category))
}

/// Token of the zero-offset bin; fills unsupervised coordinate positions.
pub fn coord_padding<T: Scalar>(vocab: &Vocabulary<T>) -> TokenId {
    vocab.coord_id(vocab.coord_bins() / 2)
}

/// `[class, x1−gx, y1−gy, x2−gx, y2−gy]`.
pub fn encode_detection<T: Scalar>(ann: &BoxAnn, grid_point: Point, vocab: &Vocabulary<T>) -> Result<TrackTarget> {
    let b = ann.bbox;
    Ok(TrackTarget::full(vec![
        concept_token(vocab, ann.category)?,
        signed_token(vocab, b.x1 - grid_point.x)?,
        signed_token(vocab, b.y1 - grid_point.y)?,
        signed_token(vocab, b.x2 - grid_point.x)?,
        signed_token(vocab, b.y2 - grid_point.y)?,
    ]))
}

/// `[class, box(4), centroid(2), rays(24)]`; the box and centroid are
/// offsets, the rays absolute lengths.
pub fn encode_instance<T: Scalar>(inst: &InstAnn, grid_point: Point, vocab: &Vocabulary<T>) -> Result<TrackTarget> {
    if inst.polygon.len() < 3 || polygon_area(&inst.polygon) <= 0.0 {
        return Err(UliError::DegenerateInstance(format!("{} vertices, zero area", inst.polygon.len())));
    }
    let mut t = encode_detection(&inst.as_box(), grid_point, vocab)?;
    let center = interior_center(&inst.polygon)?;
    t.tokens.push(signed_token(vocab, center.x - grid_point.x)?);
    t.tokens.push(signed_token(vocab, center.y - grid_point.y)?);
    for len in polar_encode(&inst.polygon, center, RAYS)? {
        t.tokens.push(unsigned_token(vocab, len)?);
    }
    t.supervised = vec![true; t.tokens.len()];
    Ok(t)
}

/// Background track of a sparse task: only the class step is supervised.
pub fn background_target<T: Scalar>(task: &TaskSpec, vocab: &Vocabulary<T>) -> TrackTarget {
    let mut tokens = vec![vocab.background_id()];
    let mut supervised = vec![true];
    tokens.resize(task.steps(), coord_padding(vocab));
    supervised.resize(task.steps(), false);
    TrackTarget { tokens, supervised }
}

/// 16 labels (0 = background, `c + 1` = concept `c`) in raster order.
pub fn encode_dense<T: Scalar>(labels: &[u32], vocab: &Vocabulary<T>) -> Result<TrackTarget> {
    if labels.len() != DENSE_SIDE * DENSE_SIDE {
        return Err(UliError::LayoutMismatch(format!("dense target needs 16 labels, got {}", labels.len())));
    }
    let tokens = labels
        .iter()
        .map(|&l| match l {
            0 => Ok(vocab.background_id()),
            c => concept_token(vocab, c as usize - 1).map_err(|_| UliError::UnknownCategory(format!("label {l}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrackTarget::full(tokens))
}

/// Tokenized caption, truncated or padded with the terminator to 20.
///
/// Loss covers the words and the first terminator only.
pub fn encode_caption<T: Scalar>(text: &str, vocab: &Vocabulary<T>) -> Result<TrackTarget> {
    let mut tokens = vocab.tokenizer().tokenize(text)?;
    tokens.truncate(CAPTION_LEN);
    let live = (tokens.len() + 1).min(CAPTION_LEN);
    tokens.resize(CAPTION_LEN, vocab.eos());
    let supervised = (0..CAPTION_LEN).map(|i| i < live).collect();
    Ok(TrackTarget { tokens, supervised })
}

/// Absolute box corners over `[0, R]`.
pub fn encode_grounding<T: Scalar>(bbox: &BBox, vocab: &Vocabulary<T>) -> Result<TrackTarget> {
    Ok(TrackTarget::full(
        [bbox.x1, bbox.y1, bbox.x2, bbox.y2].iter().map(|&v| unsigned_token(vocab, v)).collect::<Result<_>>()?,
    ))
}

fn check_slice<T: Scalar>(vocab: &Vocabulary<T>, slice: StepSlice, step: usize, token: TokenId) -> Result<()> {
    let range = vocab.slice(slice);
    if range.contains(&token.0) {
        Ok(())
    } else {
        Err(UliError::ScheduleViolation { step, token: token.0, expected: format!("{slice:?} {range:?}") })
    }
}

fn bin_value<T: Scalar>(vocab: &Vocabulary<T>, token: TokenId, signed: bool) -> f64 {
    let r = resolution(vocab);
    let lo = if signed { -r } else { 0.0 };
    undiscretize(QuantizedCoord { bin: vocab.bin_of(token).expect("checked coordinate"), lo, hi: r, bins: vocab.coord_bins() })
}

/// Inverse of the task's encoder.
pub fn decode_response<T: Scalar>(
    task: &TaskSpec,
    vocab: &Vocabulary<T>,
    tokens: &[TokenId],
    grid_point: Point,
) -> Result<StructuredOutput> {
    if tokens.len() != task.steps() {
        return Err(UliError::LayoutMismatch(format!("{} tokens for {} steps", tokens.len(), task.steps())));
    }
    // Text steps are exempt past the terminator: they are ignored anyway.
    let eos_at = tokens.iter().position(|&t| t == vocab.eos());
    for (step, (&slice, &tok)) in task.schedule.iter().zip(tokens).enumerate() {
        if task.kind == TaskKind::Caption && eos_at.is_some_and(|e| step > e) {
            continue;
        }
        if task.kind.is_sparse() && step > 0 && tokens[0] == vocab.background_id() {
            continue;
        }
        check_slice(vocab, slice, step, tok)?;
    }
    let sx = |t: TokenId| bin_value(vocab, t, true);
    Ok(match task.kind {
        TaskKind::Detection | TaskKind::InstanceSeg => {
            let Some(category) = vocab.class_of(tokens[0]) else {
                return Ok(StructuredOutput::Empty);
            };
            let (gx, gy) = (grid_point.x, grid_point.y);
            let bbox = BBox::new(gx + sx(tokens[1]), gy + sx(tokens[2]), gx + sx(tokens[3]), gy + sx(tokens[4]));
            if task.kind == TaskKind::Detection {
                StructuredOutput::Box { category, bbox }
            } else {
                let center = Point::new(gx + sx(tokens[5]), gy + sx(tokens[6]));
                let rays: Vec<f64> = tokens[7..].iter().map(|&t| bin_value(vocab, t, false)).collect();
                let polygon = polar_decode(center, &rays);
                StructuredOutput::Instance { category, bbox, center, rays, polygon }
            }
        }
        TaskKind::SemanticSeg => StructuredOutput::Dense {
            labels: tokens.iter().map(|&t| vocab.class_of(t).map_or(0, |c| c as u32 + 1)).collect(),
        },
        TaskKind::Caption => StructuredOutput::Caption { text: vocab.tokenizer().detokenize(tokens) },
        TaskKind::Grounding => {
            let v: Vec<f64> = tokens.iter().map(|&t| bin_value(vocab, t, false)).collect();
            StructuredOutput::Grounding { bbox: BBox::new(v[0], v[1], v[2], v[3]) }
        }
    })
}

/// One track per line as space-separated surface forms under a `#` header.
pub fn dump_tracks<T: Scalar>(task: &TaskSpec, vocab: &Vocabulary<T>, tracks: &[(Point, TrackTarget)]) -> String {
    let mut out = String::new();
    for (p, t) in tracks {
        let _ = writeln!(out, "# task={} grid=({}, {})", task.kind, p.x, p.y);
        let words: Vec<String> = t
            .tokens
            .iter()
            .zip(&t.supervised)
            .map(|(&id, &sup)| {
                let s = vocab.compact_surface(id);
                if sup {
                    s
                } else {
                    format!("({s})")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", words.join(" "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_matrix;
    use crate::task::Profile;
    use crate::vocab::{build_task_vocabulary, OovComposer, Tokenizer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn vocab(kind: TaskKind, cats: &[&str]) -> (TaskSpec, Vocabulary<f64>) {
        let tok = Arc::new(Tokenizer::builtin());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let te = normal_matrix(&mut rng, tok.len(), 8, 1.0);
        let comp = OovComposer::init(&mut rng, te);
        let task = TaskSpec::new(kind, &Profile::desk());
        let v = build_task_vocabulary(&task, cats, &comp, tok).unwrap();
        (task, v)
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(112.0, 0.0, 224.0, 448).unwrap().bin, 224);
        assert_eq!(discretize(224.0, 0.0, 224.0, 448).unwrap().bin, 447);
        let q = discretize(17.3, 0.0, 64.0, 128).unwrap();
        assert_eq!(q.bin, 34);
        assert_eq!(undiscretize(q), 17.25);
        assert_eq!(undiscretize(discretize(112.0, 0.0, 224.0, 448).unwrap()), 112.25);
        assert_eq!(undiscretize(QuantizedCoord { bin: 0, lo: 0.0, hi: 224.0, bins: 448 }), 0.25);
        assert!(matches!(discretize(f64::NAN, 0.0, 1.0, 2), Err(UliError::InvalidCoordinate(_))));
    }

    #[test]
    fn detection_offsets_from_grid_point() {
        let (task, v) = vocab(TaskKind::Detection, &["square"]);
        let ann = BoxAnn { category: 0, bbox: BBox::new(16.0, 16.0, 48.0, 48.0) };
        let t = encode_detection(&ann, Point::new(32.0, 32.0), &v).unwrap();
        let q = |x: f64| v.coord_id(discretize(x, -64.0, 64.0, 128).unwrap().bin);
        assert_eq!(t.tokens, vec![v.concept_id(0), q(-16.0), q(-16.0), q(16.0), q(16.0)]);
        let out = decode_response(&task, &v, &t.tokens, Point::new(32.0, 32.0)).unwrap();
        let StructuredOutput::Box { category: 0, bbox } = out else { panic!("{out:?}") };
        assert!(bbox.max_corner_error(&ann.bbox) <= 0.5);
    }

    #[test]
    fn zero_offset_and_overflow() {
        let (_, v) = vocab(TaskKind::Detection, &["square"]);
        let ann = BoxAnn { category: 0, bbox: BBox::new(10.0, 10.0, 20.0, 20.0) };
        let t = encode_detection(&ann, Point::new(10.0, 10.0), &v).unwrap();
        assert_eq!(t.tokens[1], v.coord_id(64));
        let far = BoxAnn { category: 0, bbox: BBox::new(0.0, 0.0, 200.0, 20.0) };
        assert!(matches!(encode_detection(&far, Point::new(0.0, 0.0), &v), Err(UliError::OffsetOverflow { .. })));
    }

    #[test]
    fn background_track_masks_padding() {
        let (task, v) = vocab(TaskKind::Detection, &["square"]);
        let t = background_target(&task, &v);
        assert_eq!(t.tokens.len(), 5);
        assert_eq!(t.tokens[0], v.background_id());
        assert_eq!(t.supervised, vec![true, false, false, false, false]);
        assert_eq!(decode_response(&task, &v, &t.tokens, Point::default()).unwrap(), StructuredOutput::Empty);
    }

    #[test]
    fn dense_raster_order() {
        let (task, v) = vocab(TaskKind::SemanticSeg, &["sky", "grass"]);
        let checker: Vec<u32> = (0..16).map(|i| if (i % 4 + i / 4) % 2 == 0 { 1 } else { 2 }).collect();
        let t = encode_dense(&checker, &v).unwrap();
        for (i, tok) in t.tokens.iter().enumerate() {
            assert_eq!(*tok, v.concept_id(checker[i] as usize - 1));
        }
        let sky = encode_dense(&[1; 16], &v).unwrap();
        assert!(sky.tokens.iter().all(|&t| t == v.concept_id(0)));
        assert!(matches!(encode_dense(&[3; 16], &v), Err(UliError::UnknownCategory(_))));
        let bg = encode_dense(&[0; 16], &v).unwrap();
        assert_eq!(
            decode_response(&task, &v, &bg.tokens, Point::default()).unwrap(),
            StructuredOutput::Dense { labels: vec![0; 16] }
        );
    }

    #[test]
    fn caption_padding_and_junk() {
        let (task, v) = vocab(TaskKind::Caption, &[]);
        let t = encode_caption("a red square", &v).unwrap();
        assert_eq!(t.tokens.len(), 20);
        assert_eq!(t.tokens[3..], [v.eos(); 17]);
        assert_eq!(t.supervised.iter().filter(|&&s| s).count(), 4);
        let mut junk = t.tokens.clone();
        junk[10] = v.tokenizer().tokenize("dog").unwrap()[0];
        let StructuredOutput::Caption { text } = decode_response(&task, &v, &junk, Point::default()).unwrap() else {
            panic!()
        };
        assert_eq!(text, "a red square");
    }

    #[test]
    fn grounding_full_image() {
        let tok = Arc::new(Tokenizer::builtin());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let te = normal_matrix(&mut rng, tok.len(), 8, 1.0);
        let comp = OovComposer::<f64>::init(&mut rng, te);
        let task = TaskSpec::with_resolution(TaskKind::Grounding, &Profile::paper(), 224);
        let v = build_task_vocabulary(&task, &[], &comp, tok).unwrap();
        let t = encode_grounding(&BBox::new(0.0, 0.0, 224.0, 224.0), &v).unwrap();
        let bins: Vec<usize> = t.tokens.iter().map(|&t| v.bin_of(t).unwrap()).collect();
        assert_eq!(bins, vec![0, 0, 447, 447]);
    }

    #[test]
    fn schedule_violation_detected() {
        let (task, v) = vocab(TaskKind::Detection, &["square"]);
        let bad = vec![v.concept_id(0), v.concept_id(0), v.coord_id(0), v.coord_id(0), v.coord_id(0)];
        assert!(matches!(
            decode_response(&task, &v, &bad, Point::default()),
            Err(UliError::ScheduleViolation { step: 1, .. })
        ));
    }

    #[test]
    fn instance_layout_is_31_tokens() {
        let (task, v) = vocab(TaskKind::InstanceSeg, &["square"]);
        let sq = vec![Point::new(20.0, 20.0), Point::new(40.0, 20.0), Point::new(40.0, 40.0), Point::new(20.0, 40.0)];
        let t = encode_instance(&InstAnn::from_polygon(0, sq.clone()), Point::new(24.0, 24.0), &v).unwrap();
        assert_eq!(t.tokens.len(), 31);
        let out = decode_response(&task, &v, &t.tokens, Point::new(24.0, 24.0)).unwrap();
        let StructuredOutput::Instance { center, rays, .. } = out else { panic!() };
        assert!(center.dist(Point::new(30.0, 30.0)) < 0.75);
        assert!((rays[0] - 10.0).abs() <= 0.25);
        assert!((rays[3] - 10.0 * 2f64.sqrt()).abs() <= 0.25);
        let flat = vec![Point::new(0.0, 0.0), Point::new(1.0, 1.0), Point::new(2.0, 2.0)];
        assert!(matches!(
            encode_instance(&InstAnn::from_polygon(0, flat), Point::default(), &v),
            Err(UliError::DegenerateInstance(_))
        ));
    }
}
