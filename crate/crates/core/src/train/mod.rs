//! Joint training: batch preparation, the slice cross-entropy objective,
//! AdamW with layer-wise cosine rates and the sampling loop.

mod augment;
mod config;
mod loss;
mod optim;
mod sampler;

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use augment::hflip_sample;
pub use config::{ModelSize, TrainConfig};
pub use loss::{masked_cross_entropy, sequence_loss};
pub use optim::{AdamW, LrSchedule};
pub use sampler::{sample_task, DatasetEntry, TaskSampler};

use crate::assign::{assign_targets, sample_grid_points, Annotation, OverflowPolicy};
use crate::autograd::Graph;
use crate::error::{Result, UliError};
use crate::geometry::Point;
use crate::image::Image;
use crate::model::{ForwardInput, Model};
use crate::params::Gradients;
use crate::scalar::Scalar;
use crate::task::{TaskKind, TaskSpec};
use crate::template::{make_grid, GridSpec};
use crate::vocab::{build_task_vocabulary, TokenId, Tokenizer, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub annotation: Annotation,
}

/// Samples of one task with the category names its vocabulary is built from.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: TaskSpec,
    pub categories: Vec<String>,
    pub samples: Vec<Sample>,
}

/// One image's supervised tracks, ready for a forward pass.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub image: Image,
    pub instruction: Vec<TokenId>,
    pub points: Vec<Point>,
    pub targets: Vec<Vec<TokenId>>,
    pub supervised: Vec<Vec<bool>>,
}

pub fn instruction_of<T: Scalar>(vocab: &Vocabulary<T>, ann: &Annotation) -> Result<Vec<TokenId>> {
    match ann {
        Annotation::Grounding { phrase, .. } => vocab.tokenizer().tokenize(phrase),
        _ => Ok(Vec::new()),
    }
}

/// Flips (optionally), assigns targets and subsamples grid tracks.
pub fn prepare_item<T: Scalar, R: Rng + ?Sized>(
    task: &TaskSpec,
    vocab: &Vocabulary<T>,
    grid: &GridSpec,
    sample: &Sample,
    tracks_per_window: usize,
    flip: bool,
    rng: &mut R,
) -> Result<PreparedItem> {
    let (image, ann) = if flip {
        hflip_sample(&sample.image, &sample.annotation)
    } else {
        (sample.image.clone(), sample.annotation.clone())
    };
    let assigned = assign_targets(task, vocab, grid, &ann, OverflowPolicy::KeepBest)?;
    let keep: Vec<usize> = if task.kind.is_grid() && tracks_per_window > 0 {
        sample_grid_points(&assigned.positive, &grid.window_of, tracks_per_window, rng)
    } else {
        (0..grid.len()).collect()
    };
    Ok(PreparedItem {
        instruction: instruction_of(vocab, &ann)?,
        image,
        points: keep.iter().map(|&i| grid.points[i]).collect(),
        targets: keep.iter().map(|&i| assigned.targets[i].tokens.clone()).collect(),
        supervised: keep.iter().map(|&i| assigned.targets[i].supervised.clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub task: TaskKind,
    pub loss: f64,
    pub grad_norm: f64,
    /// Rate of the last layer of the stack.
    pub lr: f64,
}

/// Teacher-forced forward of one item; summed loss and its position count.
pub fn item_gradients<T: Scalar>(
    model: &Model<T>,
    task: &TaskSpec,
    vocab: &Vocabulary<T>,
    item: &PreparedItem,
) -> Result<Option<(f64, usize, Gradients<T>)>> {
    let mut g = Graph::new(&model.params);
    let input = ForwardInput {
        task,
        image: &item.image,
        instruction: &item.instruction,
        points: &item.points,
        responses: &item.targets,
    };
    let f = model.forward(&mut g, vocab, input)?;
    let Some((loss, n)) = sequence_loss(&mut g, model, &f, task, vocab, &item.targets, &item.supervised)? else {
        return Ok(None);
    };
    let value = g.value(loss).data[0].to_f64().unwrap_or(f64::NAN);
    Ok(Some((value, n, g.backward(loss))))
}

/// One optimizer update on the mean loss over every supervised position.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    schedule: &LrSchedule,
    iteration: usize,
    task: &TaskSpec,
    vocab: &Vocabulary<T>,
    items: &[PreparedItem],
    grad_clip: f64,
) -> Result<(f64, f64)> {
    let mut grads = Gradients::empty(model.params.len());
    let mut total = 0.0;
    let mut count = 0;
    for item in items {
        if let Some((l, n, g)) = item_gradients(model, task, vocab, item)? {
            total += l;
            count += n;
            grads.accumulate(&g);
        }
    }
    if count == 0 {
        return Ok((0.0, 0.0));
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(UliError::Diverged { iteration, loss });
    }
    grads.scale(T::of(1.0 / count as f64));
    let norm = grads.global_norm().to_f64().unwrap_or(f64::NAN);
    if !norm.is_finite() {
        return Err(UliError::Diverged { iteration, loss: norm });
    }
    if grad_clip > 0.0 && norm > grad_clip {
        grads.scale(T::of(grad_clip / norm));
    }
    opt.step(&mut model.params, &grads, |g| schedule.lr_at(iteration, g));
    Ok((loss, norm))
}

struct Prepared<T: Scalar> {
    data: TaskData,
    vocab: Vocabulary<T>,
    grid: GridSpec,
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    pub schedule: LrSchedule,
    pub iteration: usize,
    tasks: Vec<Prepared<T>>,
    sampler: TaskSampler,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, config: TrainConfig, data: Vec<TaskData>) -> Result<Self> {
        config.validate()?;
        model.config.accelerated |= config.accelerated;
        let weights = config.task_weights()?;
        for (kind, _) in &weights {
            if !data.iter().any(|d| d.task.kind == *kind && !d.samples.is_empty()) {
                return Err(UliError::Config(format!("no training samples for {kind}")));
            }
        }
        let tokenizer = Arc::new(Tokenizer::builtin());
        let composer = model.composer();
        let tasks = data
            .into_iter()
            .map(|d| {
                let cats: Vec<&str> = d.categories.iter().map(String::as_str).collect();
                let vocab = build_task_vocabulary(&d.task, &cats, &composer, tokenizer.clone())?;
                let grid = make_grid(&d.task)?;
                Ok(Prepared { data: d, vocab, grid })
            })
            .collect::<Result<Vec<_>>>()?;
        let schedule =
            LrSchedule { base: config.base_lr, horizon: config.horizon, pretrained_layers: model.config.pretrained_layers };
        Ok(Self {
            optimizer: AdamW::new(&model.params, config.weight_decay),
            sampler: TaskSampler::new(weights)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            schedule,
            iteration: 0,
            tasks,
        })
    }

    fn prepared(&self, kind: TaskKind) -> Option<&Prepared<T>> {
        self.tasks.iter().find(|p| p.data.task.kind == kind)
    }

    /// Vocabulary built for a task at start-up (weights are re-read by the
    /// model on every forward pass).
    pub fn vocab(&self, kind: TaskKind) -> Option<&Vocabulary<T>> {
        self.prepared(kind).map(|p| &p.vocab)
    }

    pub fn data(&self, kind: TaskKind) -> Option<&TaskData> {
        self.prepared(kind).map(|p| &p.data)
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let (kind, _) = self.sampler.sample(&mut self.rng);
        let idx = self.tasks.iter().position(|p| p.data.task.kind == kind).expect("checked in new");
        let p = &self.tasks[idx];
        let mut items = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let sample = p.data.samples.choose(&mut self.rng).expect("non-empty");
            let flip = self.rng.random::<f64>() < self.config.flip_prob;
            items.push(prepare_item(&p.data.task, &p.vocab, &p.grid, sample, self.config.tracks_per_window, flip, &mut self.rng)?);
        }
        let (loss, grad_norm) = train_step(
            &mut self.model,
            &mut self.optimizer,
            &self.schedule,
            self.iteration,
            &p.data.task,
            &p.vocab,
            &items,
            self.config.grad_clip,
        )?;
        let last = crate::params::LrGroup::Layer(self.model.config.layers() - 1);
        let report = StepReport { iteration: self.iteration, task: kind, loss, grad_norm, lr: self.schedule.lr_at(self.iteration, last) };
        self.iteration += 1;
        Ok(report)
    }

    /// Runs `iterations` steps, calling `on_step` after each.
    pub fn run(&mut self, iterations: usize, mut on_step: impl FnMut(&Self, &StepReport)) -> Result<()> {
        for _ in 0..iterations {
            let r = self.step()?;
            on_step(self, &r);
        }
        Ok(())
    }
}
