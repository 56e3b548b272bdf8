//! Synthetic scenes: coloured squares, circles and triangles on a flat
//! background, annotated consistently for all five tasks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::Annotation;
use crate::codec::{BoxAnn, InstAnn, LabelMap};
use crate::error::{Result, UliError};
use crate::geometry::{circle_polygon, rasterize, BBox, Mask, Point};
use crate::image::Image;
use crate::task::{Profile, TaskKind, TaskSpec};
use crate::train::{Sample, TaskData};

pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
const RGB: [[f32; 3]; 3] = [[0.9, 0.15, 0.15], [0.15, 0.8, 0.2], [0.2, 0.3, 0.95]];
pub const BACKGROUND_RGB: [f32; 3] = [0.1, 0.1, 0.1];

/// The nine class names, `color * 3 + shape` order.
pub fn class_names() -> Vec<String> {
    COLORS.iter().flat_map(|c| SHAPES.iter().map(move |s| format!("{c} {s}"))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub resolution: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Bounding-square side range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Positions and sizes are multiples of this.
    pub snap: usize,
    /// Shape indices allowed (into [`SHAPES`]).
    pub shapes: Vec<usize>,
    /// Every shape in a scene has a different class.
    pub distinct_classes: bool,
}

impl SceneConfig {
    /// Defaults for a task under the desk profile.
    pub fn for_task(kind: TaskKind) -> Self {
        let resolution = Profile::desk().resolution(kind);
        let base = Self {
            resolution,
            min_shapes: 1,
            max_shapes: 3,
            min_size: 14,
            max_size: 26,
            snap: 1,
            shapes: vec![0, 1, 2],
            distinct_classes: true,
        };
        match kind {
            TaskKind::Detection | TaskKind::InstanceSeg => base,
            // block-aligned squares keep the 4×-downsampled labels exact
            TaskKind::SemanticSeg => Self { min_size: 16, max_size: 28, snap: 4, shapes: vec![0], ..base },
            TaskKind::Caption => Self { max_shapes: 2, min_size: 10, max_size: 14, ..base },
            TaskKind::Grounding => Self { min_shapes: 2, max_shapes: 3, min_size: 8, max_size: 12, ..base },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneShape {
    pub color: usize,
    pub shape: usize,
    pub bbox: BBox,
    pub polygon: Vec<Point>,
}

impl SceneShape {
    pub fn class(&self) -> usize {
        self.color * SHAPES.len() + self.shape
    }

    pub fn phrase(&self) -> String {
        format!("{} {}", COLORS[self.color], SHAPES[self.shape])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Image,
    /// Left to right by box centre.
    pub shapes: Vec<SceneShape>,
    /// 0 for background, class + 1 elsewhere.
    pub semantic: LabelMap,
    pub caption: String,
}

fn polygon_of(shape: usize, x: f64, y: f64, s: f64) -> Vec<Point> {
    match shape {
        0 => vec![Point::new(x, y), Point::new(x + s, y), Point::new(x + s, y + s), Point::new(x, y + s)],
        1 => circle_polygon(Point::new(x + s / 2.0, y + s / 2.0), s / 2.0, 32),
        _ => vec![Point::new(x + s / 2.0, y), Point::new(x + s, y + s), Point::new(x, y + s)],
    }
}

pub fn caption_of(shapes: &[SceneShape]) -> String {
    if shapes.is_empty() {
        return "an empty image".into();
    }
    shapes.iter().map(|s| format!("a {}", s.phrase())).collect::<Vec<_>>().join(" and ")
}

/// Inverse of the caption grammar: the (color, shape) pairs in order.
pub fn parse_caption(text: &str) -> Result<Vec<(usize, usize)>> {
    if text == "an empty image" {
        return Ok(Vec::new());
    }
    let bad = || UliError::ParseError { line: 1, column: 1, message: format!("not a scene caption: {text:?}") };
    text.split(" and ")
        .map(|part| {
            let w: Vec<&str> = part.split(' ').collect();
            if w.len() != 3 || w[0] != "a" {
                return Err(bad());
            }
            let c = COLORS.iter().position(|&c| c == w[1]).ok_or_else(bad)?;
            let s = SHAPES.iter().position(|&s| s == w[2]).ok_or_else(bad)?;
            Ok((c, s))
        })
        .collect()
}

fn overlaps(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x1 < b.x2 + margin && b.x1 < a.x2 + margin && a.y1 < b.y2 + margin && b.y1 < a.y2 + margin
}

pub fn gen_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> SyntheticScene {
    let r = cfg.resolution;
    let k = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let snap = cfg.snap.max(1);
    let mut shapes: Vec<SceneShape> = Vec::new();
    let mut attempts = 0;
    while shapes.len() < k && attempts < 200 {
        attempts += 1;
        let s = rng.random_range(cfg.min_size / snap..=cfg.max_size / snap) * snap;
        let x = rng.random_range(0..=(r - s) / snap) * snap;
        let y = rng.random_range(0..=(r - s) / snap) * snap;
        let color = rng.random_range(0..COLORS.len());
        let shape = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
        let bbox = BBox::new(x as f64, y as f64, (x + s) as f64, (y + s) as f64);
        if shapes.iter().any(|o| overlaps(&o.bbox, &bbox, 2.0)) {
            continue;
        }
        if cfg.distinct_classes && shapes.iter().any(|o| o.color == color && o.shape == shape) {
            continue;
        }
        let polygon = polygon_of(shape, x as f64, y as f64, s as f64);
        let bbox = BBox::of_points(&polygon);
        shapes.push(SceneShape { color, shape, bbox, polygon });
    }
    shapes.sort_by(|a, b| a.bbox.center().x.total_cmp(&b.bbox.center().x));
    let mut image = Image::filled(r, r, BACKGROUND_RGB);
    let mut semantic = LabelMap::new(r, r);
    for sh in &shapes {
        let m = rasterize(&sh.polygon, r, r);
        for y in 0..r {
            for x in 0..r {
                if m.get(x, y) {
                    image.set_pixel(x, y, RGB[sh.color]);
                    semantic.set(x, y, sh.class() as u32 + 1);
                }
            }
        }
    }
    let caption = caption_of(&shapes);
    SyntheticScene { image, shapes, semantic, caption }
}

impl SyntheticScene {
    pub fn boxes(&self) -> Vec<BoxAnn> {
        self.shapes.iter().map(|s| BoxAnn { category: s.class(), bbox: s.bbox }).collect()
    }

    pub fn instances(&self) -> Vec<InstAnn> {
        self.shapes.iter().map(|s| InstAnn::from_polygon(s.class(), s.polygon.clone())).collect()
    }

    /// Phrase → box for every shape.
    pub fn grounding_pairs(&self) -> Vec<(String, BBox)> {
        self.shapes.iter().map(|s| (s.phrase(), s.bbox)).collect()
    }

    pub fn masks(&self) -> Vec<Mask> {
        let r = self.image.width;
        self.shapes.iter().map(|s| rasterize(&s.polygon, r, r)).collect()
    }

    /// Annotation for one task; grounding uses the `pick`-th shape.
    pub fn annotation(&self, kind: TaskKind, pick: usize) -> Option<Annotation> {
        Some(match kind {
            TaskKind::Detection => Annotation::Detection(self.boxes()),
            TaskKind::InstanceSeg => Annotation::Instance(self.instances()),
            TaskKind::SemanticSeg => Annotation::Semantic(self.semantic.clone()),
            TaskKind::Caption => Annotation::Caption(self.caption.clone()),
            TaskKind::Grounding => {
                let (phrase, bbox) = self.grounding_pairs().into_iter().nth(pick)?;
                Annotation::Grounding { phrase, bbox }
            }
        })
    }

    /// Checks that the semantic map, image and captions all agree with the
    /// shape list. Returns the smallest polygon/semantic-map IoU.
    pub fn audit(&self) -> Result<f64> {
        let r = self.image.width;
        let mut worst: f64 = 1.0;
        for (sh, m) in self.shapes.iter().zip(self.masks()) {
            if m.count() < 16 {
                return Err(UliError::DegenerateInstance(format!("{} covers {} px", sh.phrase(), m.count())));
            }
            let mut from_map = Mask::new(r, r);
            for y in 0..r {
                for x in 0..r {
                    from_map.data[y * r + x] = self.semantic.get(x, y) == sh.class() as u32 + 1;
                }
            }
            worst = worst.min(m.iou(&from_map));
        }
        let parsed = parse_caption(&self.caption)?;
        let mut want: Vec<(usize, usize)> = self.shapes.iter().map(|s| (s.color, s.shape)).collect();
        let mut got = parsed;
        want.sort_unstable();
        got.sort_unstable();
        if want != got {
            return Err(UliError::LayoutMismatch("caption disagrees with the drawn shapes".into()));
        }
        Ok(worst)
    }
}

/// `n` scenes turned into training samples for one task. Grounding uses
/// every shape of every scene as its own sample.
pub fn scene_dataset(kind: TaskKind, n: usize, seed: u64, cfg: &SceneConfig) -> TaskData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = TaskSpec::with_resolution(kind, &Profile::desk(), cfg.resolution);
    let mut samples = Vec::new();
    for _ in 0..n {
        let scene = gen_scene(&mut rng, cfg);
        let picks = if kind == TaskKind::Grounding { scene.shapes.len() } else { 1 };
        for p in 0..picks {
            if let Some(annotation) = scene.annotation(kind, p) {
                samples.push(Sample { image: scene.image.clone(), annotation });
            }
        }
    }
    let categories = if kind.is_grid() { class_names() } else { Vec::new() };
    TaskData { task, categories, samples }
}
