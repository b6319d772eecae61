//! Supervised training and feature distillation on the toy task.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Split, ToyDataset};
use super::{DistillConfig, HarnessError};
use crate::align::AlignmentPlan;
use crate::ir::NetworkGraph;
use crate::kernel::ops::{self, PoolGeom};
use crate::kernel::{cross_entropy, insert_red_blocks, kd_loss, red_loss, BnMode, Model, ParamStore, Tensor, RED_TAG};
use crate::memory::trace;

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<Tensor>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self { velocity: params.tensors().iter().map(|t| Tensor::zeros(t.dims())).collect(), momentum, weight_decay }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gw), vw) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vw = self.momentum * *vw + gw + self.weight_decay * *w;
                *w -= lr * *vw;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub task_loss: f64,
    pub red_losses: Vec<f64>,
    pub kd_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub red_losses: Vec<f64>,
    pub kd_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub label: String,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
    pub test_accuracy: f64,
    /// Theoretical peak of the network without and with RED blocks.
    pub peak_bytes: u64,
    pub peak_bytes_with_red: u64,
    pub param_count: usize,
    pub red_param_count: usize,
}

/// Teacher-side targets for one RED block, precomputed over the train split.
struct FeatureTarget {
    node: usize,
    teacher: Tensor,
}

struct Objective<'a> {
    alpha: f64,
    features: Vec<FeatureTarget>,
    teacher_logits: Option<Tensor>,
    config: &'a DistillConfig,
}

/// Teacher outputs at `nodes` for every training image, in eval mode.
fn teacher_outputs(teacher: &Model, images: &Tensor, nodes: &[usize]) -> Result<Vec<Tensor>, HarnessError> {
    let n = images.n();
    let mut chunks: Vec<Vec<Tensor>> = vec![Vec::new(); nodes.len()];
    let idx: Vec<usize> = (0..n).collect();
    for batch in idx.chunks(128) {
        let pass = teacher.forward(&images.gather(batch), BnMode::Eval)?;
        for (k, &node) in nodes.iter().enumerate() {
            chunks[k].push(pass.output(node).clone());
        }
    }
    chunks
        .into_iter()
        .map(|parts| {
            let [_, c, h, w] = parts[0].dims();
            let data = parts.into_iter().flat_map(Tensor::into_vec).collect();
            Ok(Tensor::from_vec([n, c, h, w], data)?)
        })
        .collect()
}

pub fn accuracy(model: &Model, split: &Split) -> Result<f64, HarnessError> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0usize;
    for batch in idx.chunks(128) {
        let logits = model.predict(&split.images.gather(batch), BnMode::Eval)?;
        for (row, &i) in logits.data().chunks(logits.sample_len()).zip(batch) {
            let pred = row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            correct += usize::from(pred == split.labels[i]);
        }
    }
    Ok(correct as f64 / split.len().max(1) as f64)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn fit(model: &mut Model, data: &ToyDataset, config: &DistillConfig, objective: &Objective) -> Result<(Vec<EpochMetrics>, Vec<StepRecord>), HarnessError> {
    let out = model.graph().output_index();
    let mut sgd = Sgd::new(model.params(), config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle.set_stream(4);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut shuffle);
        let first = steps.len();
        for batch in order.chunks(config.batch_size) {
            let x = data.train.images.gather(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.train.labels[i]).collect();
            let pass = model.forward(&x, BnMode::Train)?;
            let logits = pass.output(out);
            let task = cross_entropy(logits, &labels)?;
            let mut out_grad = task.grad;
            let mut seeds = Vec::new();
            let mut red_values = Vec::with_capacity(objective.features.len());
            for f in &objective.features {
                let target = f.teacher.gather(batch);
                let l = red_loss(&target, pass.output(f.node), objective.config.distance)?;
                red_values.push(l.value);
                if objective.alpha != 0.0 {
                    let mut g = l.grad;
                    g.scale(objective.alpha);
                    seeds.push((f.node, g));
                }
            }
            let mut kd_value = 0.0;
            if let Some(t) = &objective.teacher_logits {
                let l = kd_loss(logits, &t.gather(batch), config.kd_temperature, config.kd_direction)?;
                kd_value = l.value;
                out_grad.add_assign(&l.grad)?;
            }
            let total = task.value + objective.alpha * red_values.iter().sum::<f64>() + kd_value;
            if !total.is_finite() {
                return Err(HarnessError::DivergenceDetected { epoch, step });
            }
            seeds.push((out, out_grad));
            let grads = model.backward(&pass, seeds)?;
            sgd.step(model.params_mut(), &grads.params, lr);
            model.update_running_stats(&pass, batch.len());
            steps.push(StepRecord { epoch, step, task_loss: task.value, red_losses: red_values, kd_loss: kd_value, total_loss: total });
            step += 1;
        }
        let window = &steps[first..];
        let blocks = objective.features.len();
        epochs.push(EpochMetrics {
            epoch,
            lr,
            task_loss: mean(window.iter().map(|s| s.task_loss)),
            red_losses: (0..blocks).map(|k| mean(window.iter().map(|s| s.red_losses[k]))).collect(),
            kd_loss: mean(window.iter().map(|s| s.kd_loss)),
            total_loss: mean(window.iter().map(|s| s.total_loss)),
        });
    }
    Ok((epochs, steps))
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn train_teacher(graph: &NetworkGraph, data: &ToyDataset, config: &DistillConfig) -> Result<(Model, RunMetrics), HarnessError> {
    config.validate().map_err(HarnessError::Config)?;
    let mut model = Model::new(graph.clone(), &mut init_rng(config.seed, 0))?;
    let objective = Objective { alpha: 0.0, features: Vec::new(), teacher_logits: None, config };
    let (epochs, steps) = fit(&mut model, data, config, &objective)?;
    let peak = trace(graph)?.peak_bytes;
    let metrics = RunMetrics {
        label: "teacher".into(),
        seed: config.seed,
        epochs,
        steps,
        test_accuracy: accuracy(&model, &data.test)?,
        peak_bytes: peak,
        peak_bytes_with_red: peak,
        param_count: model.params().numel(),
        red_param_count: 0,
    };
    Ok((model, metrics))
}

/// Trains `student` with the combined objective
/// `task + α·Σ RED_i (+ KD)`, with RED blocks spliced in at the plan's
/// student taps. The teacher is only read.
pub fn distill(teacher: &Model, student: &NetworkGraph, plan: &AlignmentPlan, config: &DistillConfig, data: &ToyDataset) -> Result<(Model, RunMetrics), HarnessError> {
    config.validate().map_err(HarnessError::Config)?;
    for p in &plan.pairs {
        if student.get(&p.student_tap).is_none() {
            return Err(HarnessError::PlanMismatch(format!("student has no node `{}`", p.student_tap)));
        }
        if teacher.graph().get(&p.teacher_tap).is_none() {
            return Err(HarnessError::PlanMismatch(format!("teacher has no node `{}`", p.teacher_tap)));
        }
    }
    let (red_graph, insertions) = insert_red_blocks(student, plan, config.ablation, config.re_kernel_size)?;
    let base = Model::new(student.clone(), &mut init_rng(config.seed, 0))?;
    let mut model = Model::new(red_graph.clone(), &mut init_rng(config.seed, 3))?;
    model.copy_matching(&base);

    let tg = teacher.graph();
    let mut nodes: Vec<usize> = plan.pairs.iter().map(|p| tg.index_of(&p.teacher_tap).expect("checked above")).collect();
    if config.use_kd {
        nodes.push(tg.output_index());
    }
    let mut outputs = teacher_outputs(teacher, &data.train.images, &nodes)?;
    let teacher_logits = if config.use_kd { outputs.pop() } else { None };
    let features = insertions
        .iter()
        .zip(outputs)
        .zip(&plan.pairs)
        .map(|((ins, t), pair)| {
            let t = if pair.resample_factor > 1 {
                let f = pair.resample_factor as usize;
                ops::avgpool(&t, PoolGeom { kernel: f, stride: f, pad: 0 })?
            } else {
                t
            };
            Ok(FeatureTarget { node: red_graph.index_of(&ins.output).expect("inserted node"), teacher: t })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let objective = Objective { alpha: config.alpha, features, teacher_logits, config };
    let (epochs, steps) = fit(&mut model, data, config, &objective)?;
    let metrics = RunMetrics {
        label: config.ablation.to_string(),
        seed: config.seed,
        epochs,
        steps,
        test_accuracy: accuracy(&model, &data.test)?,
        peak_bytes: trace(student)?.peak_bytes,
        peak_bytes_with_red: trace(&red_graph)?.peak_bytes,
        param_count: model.params().numel(),
        red_param_count: red_param_count(&model),
    };
    Ok((model, metrics))
}

fn red_param_count(model: &Model) -> usize {
    let g = model.graph();
    g.nodes()
        .iter()
        .filter(|n| n.has_tag(RED_TAG))
        .map(|n| model.params().numel_with_prefix(&format!("{}.", n.id)))
        .sum()
}

