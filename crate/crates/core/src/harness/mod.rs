//! Synthetic data, dataset loading and evaluation.

pub mod coco;
pub mod eval;
pub mod metrics;
pub mod scene;

pub use metrics::{eval_ap, eval_bleu4, eval_grounding_acc, eval_miou, ApReport};
pub use scene::{gen_scene, scene_dataset, SceneConfig, SyntheticScene};
