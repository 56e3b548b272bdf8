//! Horizontal flip of an image together with its annotation.

use crate::assign::Annotation;
use crate::codec::{BoxAnn, InstAnn};
use crate::geometry::hflip_polygon;
use crate::image::Image;

pub fn hflip_sample(image: &Image, ann: &Annotation) -> (Image, Annotation) {
    let w = image.width as f64;
    let ann = match ann {
        Annotation::Detection(boxes) => {
            Annotation::Detection(boxes.iter().map(|b| BoxAnn { category: b.category, bbox: b.bbox.hflip(w) }).collect())
        }
        Annotation::Instance(insts) => Annotation::Instance(
            insts.iter().map(|i| InstAnn::from_polygon(i.category, hflip_polygon(&i.polygon, w))).collect(),
        ),
        Annotation::Semantic(map) => Annotation::Semantic(map.hflip()),
        Annotation::Caption(text) => Annotation::Caption(text.clone()),
        Annotation::Grounding { phrase, bbox } => Annotation::Grounding { phrase: phrase.clone(), bbox: bbox.hflip(w) },
    };
    (image.hflip(), ann)
}
