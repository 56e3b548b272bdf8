//! Runs a model over a dataset and scores it with the task's metric.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assign::Annotation;
use crate::decode::{
    beam_decode, parallel_decode, postprocess_caption, postprocess_detection, postprocess_grounding, postprocess_instance,
    postprocess_semseg, DecodedTrack,
};
use crate::error::{Result, UliError};
use crate::geometry::{rasterize, BBox};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::task::TaskKind;
use crate::template::make_grid;
use crate::train::{instruction_of, TaskData};
use crate::vocab::{build_task_vocabulary, Tokenizer, Vocabulary};

use super::metrics::{
    eval_ap, eval_bleu4, eval_grounding_acc, eval_mask_ap, eval_miou, exact_match, mean_best_mask_iou, ApReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Class-wise NMS threshold for boxes; off when `None`.
    pub nms_iou: Option<f64>,
    /// Caption beam width; 1 is greedy.
    pub beam_width: usize,
    /// Evaluate at most this many samples (0 = all).
    pub limit: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { nms_iou: None, beam_width: 1, limit: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_ap: Option<ApReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_ap: Option<ApReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grounding_acc: Option<f64>,
    pub seconds: f64,
}

impl EvalReport {
    /// The number each task is usually judged by.
    pub fn headline(&self) -> f64 {
        self.box_ap
            .map(|a| a.ap50)
            .or(self.mask_iou)
            .or(self.miou)
            .or(self.exact)
            .or(self.grounding_acc)
            .unwrap_or(0.0)
    }
}

fn wrong(kind: TaskKind) -> UliError {
    UliError::LayoutMismatch(format!("annotation does not belong to {kind}"))
}

/// Builds the task vocabulary with the model's current composer.
pub fn task_vocabulary<T: Scalar>(model: &Model<T>, data: &TaskData) -> Result<Vocabulary<T>> {
    let cats: Vec<&str> = data.categories.iter().map(String::as_str).collect();
    build_task_vocabulary(&data.task, &cats, &model.composer(), Arc::new(Tokenizer::builtin()))
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &TaskData, opts: &EvalOptions) -> Result<EvalReport> {
    let start = Instant::now();
    let task = &data.task;
    let vocab = task_vocabulary(model, data)?;
    let grid = make_grid(task)?;
    let n = if opts.limit == 0 { data.samples.len() } else { opts.limit.min(data.samples.len()) };
    let samples = &data.samples[..n];
    let mut report = EvalReport { task: task.kind.to_string(), samples: n, ..Default::default() };

    let run = |image, ann: &Annotation| -> Result<Vec<DecodedTrack>> {
        let instruction = instruction_of(&vocab, ann)?;
        parallel_decode(model, &vocab, task, image, &instruction, &grid.points)
    };

    match task.kind {
        TaskKind::Detection => {
            let (mut preds, mut gts) = (Vec::new(), Vec::new());
            for s in samples {
                let Annotation::Detection(boxes) = &s.annotation else { return Err(wrong(task.kind)) };
                let tracks = run(&s.image, &s.annotation)?;
                preds.push(postprocess_detection(task, &vocab, &tracks, opts.nms_iou)?);
                gts.push(boxes.clone());
            }
            report.box_ap = Some(eval_ap(&preds, &gts));
        }
        TaskKind::InstanceSeg => {
            let r = task.resolution;
            let (mut preds, mut gts) = (Vec::new(), Vec::new());
            for s in samples {
                let Annotation::Instance(insts) = &s.annotation else { return Err(wrong(task.kind)) };
                let tracks = run(&s.image, &s.annotation)?;
                let p = postprocess_instance(task, &vocab, &tracks)?;
                preds.push(p.into_iter().map(|i| (i.category, i.score, i.mask)).collect::<Vec<_>>());
                gts.push(insts.iter().map(|i| (i.category, rasterize(&i.polygon, r, r))).collect::<Vec<_>>());
            }
            report.mask_ap = Some(eval_mask_ap(&preds, &gts));
            report.mask_iou = Some(mean_best_mask_iou(&preds, &gts));
        }
        TaskKind::SemanticSeg => {
            let (mut preds, mut gts) = (Vec::new(), Vec::new());
            for s in samples {
                let Annotation::Semantic(map) = &s.annotation else { return Err(wrong(task.kind)) };
                let tracks = run(&s.image, &s.annotation)?;
                preds.push(postprocess_semseg(task, &vocab, &tracks)?);
                gts.push(map.clone());
            }
            report.miou = Some(eval_miou(&preds, &gts));
        }
        TaskKind::Caption => {
            let (mut cands, mut refs) = (Vec::new(), Vec::new());
            for s in samples {
                let Annotation::Caption(text) = &s.annotation else { return Err(wrong(task.kind)) };
                let out = if opts.beam_width > 1 {
                    let (tokens, _) = beam_decode(model, &vocab, task, &s.image, opts.beam_width)?;
                    vocab.tokenizer().detokenize(&tokens)
                } else {
                    let tracks = run(&s.image, &s.annotation)?;
                    postprocess_caption(&vocab, &tracks[0])
                };
                cands.push(out);
                refs.push(text.clone());
            }
            report.bleu4 = Some(eval_bleu4(&cands, &refs));
            report.exact = Some(exact_match(&cands, &refs));
        }
        TaskKind::Grounding => {
            let (mut preds, mut gts): (Vec<BBox>, Vec<BBox>) = (Vec::new(), Vec::new());
            for s in samples {
                let Annotation::Grounding { bbox, .. } = &s.annotation else { return Err(wrong(task.kind)) };
                let tracks = run(&s.image, &s.annotation)?;
                preds.push(postprocess_grounding(task, &vocab, &tracks[0])?);
                gts.push(*bbox);
            }
            report.grounding_acc = Some(eval_grounding_acc(&preds, &gts));
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
