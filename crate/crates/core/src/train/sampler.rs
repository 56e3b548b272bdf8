//! Task and dataset sampling: a categorical draw over tasks, then a draw
//! over dataset groups (equal weights) and datasets (size-proportional).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Result, UliError};
use crate::task::TaskKind;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub name: String,
    pub task: TaskKind,
    pub group: usize,
    pub size: f64,
}

#[derive(Debug, Clone)]
pub struct TaskSampler {
    tasks: Vec<(TaskKind, f64)>,
    datasets: Vec<DatasetEntry>,
    task_dist: WeightedIndex<f64>,
}

fn check_weights(weights: &[(TaskKind, f64)]) -> Result<()> {
    if weights.is_empty() {
        return Err(UliError::Config("no tasks to sample".into()));
    }
    if weights.iter().any(|&(_, w)| !(w > 0.0 && w.is_finite())) {
        return Err(UliError::Config("task weights must be positive".into()));
    }
    let sum: f64 = weights.iter().map(|w| w.1).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(UliError::Config(format!("task weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// One categorical draw.
pub fn sample_task<R: Rng + ?Sized>(rng: &mut R, weights: &[(TaskKind, f64)]) -> Result<TaskKind> {
    check_weights(weights)?;
    let d = WeightedIndex::new(weights.iter().map(|w| w.1)).map_err(|e| UliError::Config(e.to_string()))?;
    Ok(weights[d.sample(rng)].0)
}

impl TaskSampler {
    pub fn new(tasks: Vec<(TaskKind, f64)>) -> Result<Self> {
        check_weights(&tasks)?;
        let task_dist = WeightedIndex::new(tasks.iter().map(|w| w.1)).map_err(|e| UliError::Config(e.to_string()))?;
        Ok(Self { tasks, datasets: Vec::new(), task_dist })
    }

    pub fn uniform(tasks: &[TaskKind]) -> Result<Self> {
        let w = 1.0 / tasks.len().max(1) as f64;
        Self::new(tasks.iter().map(|&t| (t, w)).collect())
    }

    pub fn with_datasets(mut self, datasets: Vec<DatasetEntry>) -> Result<Self> {
        for d in &datasets {
            if !self.tasks.iter().any(|t| t.0 == d.task) {
                return Err(UliError::Config(format!("dataset {} belongs to unsampled task {}", d.name, d.task)));
            }
            if !(d.size > 0.0) {
                return Err(UliError::Config(format!("dataset {} has no samples", d.name)));
            }
        }
        self.datasets = datasets;
        Ok(self)
    }

    pub fn tasks(&self) -> &[(TaskKind, f64)] {
        &self.tasks
    }

    pub fn datasets(&self) -> &[DatasetEntry] {
        &self.datasets
    }

    /// Overall probability of drawing dataset `index`.
    pub fn dataset_weight(&self, index: usize) -> f64 {
        let d = &self.datasets[index];
        let task_w = self.tasks.iter().find(|t| t.0 == d.task).map_or(0.0, |t| t.1);
        let mut groups: Vec<usize> = self.datasets.iter().filter(|e| e.task == d.task).map(|e| e.group).collect();
        groups.sort_unstable();
        groups.dedup();
        let group_size: f64 = self.datasets.iter().filter(|e| e.task == d.task && e.group == d.group).map(|e| e.size).sum();
        task_w / groups.len() as f64 * d.size / group_size
    }

    /// Task, plus a dataset index when datasets are registered for it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (TaskKind, Option<usize>) {
        let task = self.tasks[self.task_dist.sample(rng)].0;
        let members: Vec<usize> = (0..self.datasets.len()).filter(|&i| self.datasets[i].task == task).collect();
        if members.is_empty() {
            return (task, None);
        }
        let w: Vec<f64> = members.iter().map(|&i| self.dataset_weight(i)).collect();
        let d = WeightedIndex::new(&w).expect("positive dataset weights");
        (task, Some(members[d.sample(rng)]))
    }
}
