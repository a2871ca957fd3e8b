use std::fmt;
use std::path::PathBuf;

use softmoa::encoder::Petl;
use softmoa::training::{accuracy, train};

use super::build_model;
use crate::config::RunConfig;
use crate::report::{median, opt, write_csv};
use crate::Result;

#[derive(Clone, Debug)]
pub struct TaskSummary {
    pub task: String,
    pub petl: Petl,
    pub trainable: usize,
    pub trainable_non_head: usize,
    pub head: usize,
    pub steps: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub median_step_ms: f64,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub tasks: Vec<TaskSummary>,
}

impl TrainReport {
    /// Mean test accuracy over tasks, when every task has a test set.
    pub fn mean_test_accuracy(&self) -> Option<f64> {
        let accs: Option<Vec<f64>> = self.tasks.iter().map(|t| t.test_accuracy).collect();
        accs.map(|a| a.iter().sum::<f64>() / a.len() as f64)
    }

    pub fn mean_train_accuracy(&self) -> f64 {
        self.tasks.iter().map(|t| t.train_accuracy).sum::<f64>() / self.tasks.len() as f64
    }
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tasks {
            writeln!(
                f,
                "{:<16} {:<14} trainable {:>8} (non-head {:>8}, head {:>6})  train {:.4}  test {}",
                t.task,
                t.petl.to_string(),
                t.trainable,
                t.trainable_non_head,
                t.head,
                t.train_accuracy,
                t.test_accuracy.map_or("-".to_string(), |a| format!("{a:.4}")),
            )?;
        }
        if self.tasks.len() > 1 {
            writeln!(
                f,
                "{:<16} {:<14} train {:.4}  test {}",
                "avg",
                "",
                self.mean_train_accuracy(),
                self.mean_test_accuracy().map_or("-".to_string(), |a| format!("{a:.4}")),
            )?;
        }
        Ok(())
    }
}

/// Trains one model per task and writes `train_log.csv`, `summary.csv` and
/// the checkpoints.
pub fn run(cfg: &RunConfig) -> Result<TrainReport> {
    let tasks = cfg.tasks()?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut log_rows = Vec::new();
    let mut summaries = Vec::new();
    for task in &tasks {
        let mut model = build_model(cfg, cfg.model.petl, task.train.n_classes)?;
        let before = model.params.frozen_hash();
        let log = train(&mut model, &task.train, task.test.as_ref(), &cfg.train)?;
        let after = model.params.frozen_hash();

        for s in &log.steps {
            log_rows.push(vec![
                task.name.clone(),
                "step".into(),
                s.step.to_string(),
                s.epoch.to_string(),
                s.loss.to_string(),
                s.lr.to_string(),
                s.step_ms.to_string(),
                String::new(),
                String::new(),
            ]);
        }
        for e in &log.evals {
            log_rows.push(vec![
                task.name.clone(),
                "eval".into(),
                e.step.to_string(),
                e.epoch.to_string(),
                String::new(),
                String::new(),
                String::new(),
                e.train_accuracy.to_string(),
                opt(e.test_accuracy),
            ]);
        }

        let (train_accuracy, test_accuracy) = match log.final_eval() {
            Some(e) if e.step == log.steps.len() => (e.train_accuracy, e.test_accuracy),
            _ => (
                accuracy(&model, &task.train, cfg.train.batch_size)?,
                task.test.as_ref().map(|t| accuracy(&model, t, cfg.train.batch_size)).transpose()?,
            ),
        };
        let checkpoint = if tasks.len() == 1 {
            cfg.out.join("model.ckpt")
        } else {
            cfg.out.join(format!("model-{}.ckpt", task.name))
        };
        model.save_checkpoint(&checkpoint)?;
        let step_ms: Vec<f64> = log.steps.iter().map(|s| s.step_ms).collect();
        summaries.push(TaskSummary {
            task: task.name.clone(),
            petl: cfg.model.petl,
            trainable: model.params.count(true),
            trainable_non_head: model.trainable_non_head(),
            head: model.head_param_count(),
            steps: log.steps.len(),
            train_accuracy,
            test_accuracy,
            median_step_ms: median(&step_ms),
            frozen_hash_before: before,
            frozen_hash_after: after,
            checkpoint,
        });
    }

    write_csv(
        &cfg.out.join("train_log.csv"),
        &cfg.hash,
        &["task", "row", "step", "epoch", "loss", "lr", "step_ms", "train_accuracy", "test_accuracy"],
        &log_rows,
    )?;
    let report = TrainReport { tasks: summaries };
    let mut rows: Vec<Vec<String>> = report
        .tasks
        .iter()
        .map(|t| {
            vec![
                t.task.clone(),
                t.petl.to_string(),
                t.trainable.to_string(),
                t.trainable_non_head.to_string(),
                t.head.to_string(),
                t.steps.to_string(),
                t.train_accuracy.to_string(),
                opt(t.test_accuracy),
            ]
        })
        .collect();
    if report.tasks.len() > 1 {
        rows.push(vec![
            "avg".into(),
            cfg.model.petl.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            report.mean_train_accuracy().to_string(),
            opt(report.mean_test_accuracy()),
        ]);
    }
    write_csv(
        &cfg.out.join("summary.csv"),
        &cfg.hash,
        &[
            "task",
            "petl",
            "trainable",
            "trainable_non_head",
            "head",
            "steps",
            "train_accuracy",
            "test_accuracy",
        ],
        &rows,
    )?;
    Ok(report)
}
