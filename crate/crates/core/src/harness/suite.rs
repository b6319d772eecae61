//! Paired-seed experiment runners on the toy classification task.

use serde::{Deserialize, Serialize};

use super::dataset::{make_toy_dataset_with, GratingSpec, ToyDataset};
use super::train::{distill, train_teacher, RunMetrics};
use super::{DistillConfig, HarnessError};
use crate::align::{plan_with_mode, AlignmentPlan};
use crate::ir::{model_zoo, NetworkGraph, ZooConfig, ZooModel};
use crate::kernel::{Model, RedAblation};
use crate::par::{self, Execution};
use crate::rewrite::{rewrite_aggressive, RewriteConfig};

/// Zoo configuration of the toy CNN for a dataset's image size and classes.
pub fn toy_zoo_config(data: &ToyDataset) -> ZooConfig {
    let mut cfg = ZooConfig::new(data.train.images.h() as u64);
    cfg.in_channels = data.train.images.c() as u64;
    cfg.num_classes = data.classes as u64;
    cfg
}

/// A trained teacher and its aggressively pooled student architecture.
#[derive(Debug, Clone)]
pub struct ToyExperiment {
    pub data: ToyDataset,
    pub teacher: Model,
    pub teacher_metrics: RunMetrics,
    pub student: NetworkGraph,
    pub multiplier: u64,
}

impl ToyExperiment {
    /// Trains the teacher on `data` and distills students on the same data.
    pub fn prepare(data: ToyDataset, multiplier: u64, teacher_config: &DistillConfig) -> Result<Self, HarnessError> {
        Self::prepare_pretrained(&data.clone(), data, multiplier, teacher_config)
    }

    /// Trains the teacher on `teacher_data`; students only ever see `data`.
    pub fn prepare_pretrained(teacher_data: &ToyDataset, data: ToyDataset, multiplier: u64, teacher_config: &DistillConfig) -> Result<Self, HarnessError> {
        let teacher_graph = model_zoo(ZooModel::ToyCnn, &toy_zoo_config(&data))?;
        let (student, _) = rewrite_aggressive(&teacher_graph, &RewriteConfig::new(multiplier))?;
        let (teacher, teacher_metrics) = train_teacher(&teacher_graph, teacher_data, &DistillConfig::plain().with_schedule_of(teacher_config))?;
        Ok(Self { data, teacher, teacher_metrics, student, multiplier })
    }

    pub fn plan(&self, config: &DistillConfig) -> Result<AlignmentPlan, HarnessError> {
        Ok(plan_with_mode(self.teacher.graph(), &self.student, config.alignment)?)
    }

    pub fn run(&self, config: &DistillConfig) -> Result<RunMetrics, HarnessError> {
        let plan = self.plan(config)?;
        Ok(distill(&self.teacher, &self.student, &plan, config, &self.data)?.1)
    }
}

/// The efficacy experiment: a teacher pretrained on a larger sample of
/// the grating distribution, and an aggressively pooled student distilled
/// on a subset of it, where supervision is scarce enough for the teacher's
/// features to matter.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyProtocol {
    pub dataset_seed: u64,
    pub grating: GratingSpec,
    pub teacher_per_class: usize,
    pub student_per_class: usize,
    pub test_per_class: usize,
    pub multiplier: u64,
    pub seeds: Vec<u64>,
}

impl Default for ToyProtocol {
    fn default() -> Self {
        Self {
            dataset_seed: 0,
            grating: GratingSpec::default(),
            teacher_per_class: 256,
            student_per_class: 128,
            test_per_class: 256,
            multiplier: 4,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ToyProtocol {
    pub fn prepare(&self, teacher_config: &DistillConfig) -> Result<ToyExperiment, HarnessError> {
        let full = make_toy_dataset_with(self.dataset_seed, self.teacher_per_class, self.test_per_class, &self.grating);
        let data = full.with_train_per_class(self.student_per_class);
        ToyExperiment::prepare_pretrained(&full, data, self.multiplier, teacher_config)
    }
}

impl DistillConfig {
    /// `self` with the optimizer schedule (epochs, lr, decay, batch, seed) of `other`.
    pub fn with_schedule_of(&self, other: &DistillConfig) -> DistillConfig {
        DistillConfig {
            epochs: other.epochs,
            lr: other.lr,
            momentum: other.momentum,
            weight_decay: other.weight_decay,
            milestones: other.milestones.clone(),
            lr_decay: other.lr_decay,
            batch_size: other.batch_size,
            seed: other.seed,
            ..self.clone()
        }
    }
}

/// Runs every `(label, config)` for every seed; seeds replace `config.seed`.
/// Results are grouped per label in seed order.
pub fn paired_runs(exp: &ToyExperiment, configs: &[(String, DistillConfig)], seeds: &[u64]) -> Result<Vec<(String, Vec<RunMetrics>)>, HarnessError> {
    let jobs: Vec<(usize, DistillConfig)> = configs
        .iter()
        .enumerate()
        .flat_map(|(k, (_, c))| seeds.iter().map(move |&s| (k, DistillConfig { seed: s, ..c.clone() })))
        .collect();
    let results = par::map(Execution::current(), &jobs, |(_, c)| exp.run(c));
    let mut grouped: Vec<(String, Vec<RunMetrics>)> = configs.iter().map(|(l, _)| (l.clone(), Vec::new())).collect();
    for ((k, _), r) in jobs.iter().zip(results) {
        let mut m = r?;
        m.label = grouped[*k].0.clone();
        grouped[*k].1.push(m);
    }
    Ok(grouped)
}

pub fn mean_accuracy(runs: &[RunMetrics]) -> f64 {
    runs.iter().map(|r| r.test_accuracy).sum::<f64>() / runs.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: RedAblation,
    pub kernel_size: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Full RED at the default kernel size against no block at all.
    pub fn full_beats_no_block(&self) -> bool {
        match (self.row("RED (ks=3)"), self.row("w/o RED block")) {
            (Some(f), Some(n)) => f.mean >= n.mean,
            _ => false,
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | ablation | ks | mean acc | per-seed |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let per: Vec<String> = r.accuracies.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
            s.push_str(&format!("| {} | {} | {} | {:.2} | {} |\n", r.label, r.ablation, r.kernel_size, 100.0 * r.mean, per.join(" ")));
        }
        s
    }
}

/// Block variants (plus the kernel-size sweep for the full block), each
/// over all seeds.
pub fn ablation_suite(exp: &ToyExperiment, seeds: &[u64], base: &DistillConfig) -> Result<AblationTable, HarnessError> {
    if seeds.len() < 3 {
        return Err(HarnessError::Config(format!("ablation suite needs at least 3 seeds, got {}", seeds.len())));
    }
    let variant = |label: &str, ablation, ks| (label.to_string(), DistillConfig { ablation, re_kernel_size: ks, ..base.clone() });
    let configs = vec![
        variant("w/o LM", RedAblation::NoLogit, 3),
        variant("w/o RE", RedAblation::NoResidualEncoder, 3),
        variant("w/o Shortcut", RedAblation::NoShortcut, 3),
        variant("w/o RED block", RedAblation::NoRedBlock, 3),
        variant("RED (ks=1)", RedAblation::Full, 1),
        variant("RED (ks=3)", RedAblation::Full, 3),
        variant("RED (ks=5)", RedAblation::Full, 5),
    ];
    let runs = paired_runs(exp, &configs, seeds)?;
    let rows = runs
        .into_iter()
        .zip(&configs)
        .map(|((label, r), (_, c))| AblationRow {
            label,
            ablation: c.ablation,
            kernel_size: c.re_kernel_size,
            accuracies: r.iter().map(|m| m.test_accuracy).collect(),
            mean: mean_accuracy(&r),
        })
        .collect();
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}
