//! A small COCO-JSON reader: boxes, polygon masks and captions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::assign::Annotation;
use crate::codec::{BoxAnn, InstAnn, LabelMap};
use crate::error::{Result, UliError};
use crate::geometry::{rasterize, BBox, Point};
use crate::task::TaskKind;

#[derive(Debug, Deserialize)]
struct RawFile {
    #[serde(default)]
    images: Vec<RawImage>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
    #[serde(default)]
    categories: Vec<RawCategory>,
}

#[derive(Debug, Deserialize)]
struct RawImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize)]
struct RawAnnotation {
    image_id: u64,
    #[serde(default)]
    category_id: Option<u64>,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    segmentation: Option<serde_json::Value>,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoxAnn>,
    /// Polygon instances; a multi-part polygon keeps its largest part.
    pub instances: Vec<InstAnn>,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CocoSubset {
    pub images: Vec<CocoImage>,
    /// Category names in contiguous-index order.
    pub categories: Vec<String>,
    /// Original COCO id → contiguous index.
    pub remap: BTreeMap<u64, usize>,
    /// Annotations dropped (RLE masks, crowd regions, unknown ids).
    pub skipped: usize,
}

impl CocoImage {
    /// Annotation for one task with coordinates scaled to a square
    /// `resolution`. Grounding and captioning use the first box/caption.
    pub fn annotation(&self, kind: TaskKind, resolution: usize, categories: &[String]) -> Option<Annotation> {
        let (sx, sy) = (resolution as f64 / self.width as f64, resolution as f64 / self.height as f64);
        let sp = |p: &Point| Point::new(p.x * sx, p.y * sy);
        let sb = |b: &BBox| BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy);
        Some(match kind {
            TaskKind::Detection => {
                Annotation::Detection(self.boxes.iter().map(|b| BoxAnn { category: b.category, bbox: sb(&b.bbox) }).collect())
            }
            TaskKind::InstanceSeg => Annotation::Instance(
                self.instances.iter().map(|i| InstAnn::from_polygon(i.category, i.polygon.iter().map(sp).collect())).collect(),
            ),
            TaskKind::SemanticSeg => {
                let mut map = LabelMap::new(resolution, resolution);
                for inst in &self.instances {
                    let poly: Vec<Point> = inst.polygon.iter().map(sp).collect();
                    let m = rasterize(&poly, resolution, resolution);
                    for (k, &on) in m.data.iter().enumerate() {
                        if on {
                            map.labels[k] = inst.category as u32 + 1;
                        }
                    }
                }
                Annotation::Semantic(map)
            }
            TaskKind::Caption => Annotation::Caption(self.captions.first()?.clone()),
            TaskKind::Grounding => {
                let b = self.boxes.first()?;
                Annotation::Grounding { phrase: categories.get(b.category)?.clone(), bbox: sb(&b.bbox) }
            }
        })
    }
}

pub fn load_coco_subset(path: &Path, max_images: usize) -> Result<CocoSubset> {
    let text = std::fs::read_to_string(path)?;
    parse_coco(&text, max_images)
}

fn polygon_of(flat: &[serde_json::Value]) -> Option<Vec<Point>> {
    let xs: Option<Vec<f64>> = flat.iter().map(|v| v.as_f64()).collect();
    let xs = xs?;
    if xs.len() < 6 || xs.len() % 2 != 0 {
        return None;
    }
    Some(xs.chunks(2).map(|c| Point::new(c[0], c[1])).collect())
}

/// Parses COCO JSON text; `max_images` of 0 keeps every image.
pub fn parse_coco(text: &str, max_images: usize) -> Result<CocoSubset> {
    let raw: RawFile = serde_json::from_str(text)
        .map_err(|e| UliError::ParseError { line: e.line(), column: e.column(), message: e.to_string() })?;
    let mut cats = raw.categories;
    cats.sort_by_key(|c| c.id);
    let remap: BTreeMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let categories: Vec<String> = cats.into_iter().map(|c| c.name).collect();

    let keep = if max_images == 0 { raw.images.len() } else { max_images.min(raw.images.len()) };
    let mut images: Vec<CocoImage> = raw.images[..keep]
        .iter()
        .map(|i| CocoImage {
            id: i.id,
            file_name: i.file_name.clone(),
            width: i.width,
            height: i.height,
            boxes: Vec::new(),
            instances: Vec::new(),
            captions: Vec::new(),
        })
        .collect();
    let slot: BTreeMap<u64, usize> = images.iter().enumerate().map(|(k, i)| (i.id, k)).collect();

    let mut skipped = 0;
    for a in raw.annotations {
        let Some(&k) = slot.get(&a.image_id) else { continue };
        let img = &mut images[k];
        if let Some(c) = a.caption {
            img.captions.push(c);
            continue;
        }
        let Some(category) = a.category_id.and_then(|c| remap.get(&c).copied()) else {
            log::warn!("annotation on image {} has an unknown category; skipped", a.image_id);
            skipped += 1;
            continue;
        };
        if a.iscrowd != 0 {
            skipped += 1;
            continue;
        }
        if let Some(b) = a.bbox {
            img.boxes.push(BoxAnn { category, bbox: BBox::from_xywh(b) });
        }
        match a.segmentation {
            Some(serde_json::Value::Array(parts)) => {
                let best = parts
                    .iter()
                    .filter_map(|p| p.as_array().and_then(|p| polygon_of(p)))
                    .max_by(|a, b| crate::geometry::polygon_area(a).total_cmp(&crate::geometry::polygon_area(b)));
                if let Some(polygon) = best {
                    img.instances.push(InstAnn::from_polygon(category, polygon));
                }
            }
            Some(serde_json::Value::Object(_)) => {
                log::warn!("RLE segmentation on image {} is not supported; mask skipped", a.image_id);
                skipped += 1;
            }
            _ => {}
        }
    }
    Ok(CocoSubset { images, categories, remap, skipped })
}
