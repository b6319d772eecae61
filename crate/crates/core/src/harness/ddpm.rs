//! Miniature denoising-diffusion distillation.
//!
//! A two-level U-Net teacher learns to predict the noise added to 8×8
//! images drawn from a two-mode distribution (one horizontal or one
//! vertical bar). The student is the stride-4 single-level rewrite of the
//! same U-Net, trained either plainly or with RED blocks after its encoder
//! downsampling layer and before its decoder upsample layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::train::Sgd;
use super::HarnessError;
use crate::align::{plan_unet, AlignmentPlan};
use crate::ir::{model_zoo, NetworkGraph, ZooConfig, ZooModel};
use crate::kernel::ops;
use crate::kernel::{ddpm_noise, diffusion_loss, insert_red_blocks, red_loss, BnMode, DiffusionSchedule, Model, RedAblation, RedDistance, Tensor};
use crate::memory::trace;
use crate::par::{self, Execution};
use crate::rewrite::{rewrite_aggressive, RewriteConfig};

pub const IMAGE_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmConfig {
    pub width: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub multiplier: u64,
    pub seeds: Vec<u64>,
    pub teacher_seed: u64,
    pub data_seed: u64,
    /// Diffusion steps at which held-out denoising error is measured.
    pub eval_steps: Vec<usize>,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            width: 32,
            train_images: 512,
            test_images: 128,
            teacher_steps: 1500,
            student_steps: 400,
            batch_size: 32,
            lr: 0.002,
            momentum: 0.9,
            alpha: 1.0,
            multiplier: 2,
            seeds: vec![0, 1, 2],
            teacher_seed: 100,
            data_seed: 7,
            eval_steps: vec![10, 50, 100, 250, 500, 750],
        }
    }
}

/// Bars on a background of -1: mode 0 is a horizontal bar, mode 1 vertical.
pub fn two_mode_images(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = IMAGE_SIZE;
    let jitter = Normal::new(0.0, 0.05).expect("finite");
    let mut data = Vec::with_capacity(n * s * s);
    for i in 0..n {
        let pos = rng.random_range(1..s - 2);
        for y in 0..s {
            for x in 0..s {
                let on = if i % 2 == 0 { y == pos || y == pos + 1 } else { x == pos || x == pos + 1 };
                data.push(if on { 1.0 } else { -1.0 } + jitter.sample(rng));
            }
        }
    }
    Tensor::from_vec([n, 1, s, s], data).expect("image dims")
}

pub fn unet_config(width: u64) -> ZooConfig {
    let mut cfg = ZooConfig::new(IMAGE_SIZE as u64);
    cfg.in_channels = 2;
    cfg.out_channels = Some(1);
    cfg.width = Some(width);
    cfg.levels = 2;
    cfg
}

/// `x_t` with a constant `t / T` plane appended as the second channel.
fn conditioned(x_t: &Tensor, t: &[usize], steps: usize) -> Tensor {
    let [n, _, h, w] = x_t.dims();
    let plane = Tensor::from_vec([n, 1, h, w], t.iter().flat_map(|&ti| std::iter::repeat_n(ti as f64 / steps as f64, h * w)).collect())
        .expect("plane dims");
    ops::concat(&[x_t, &plane]).expect("same batch and size")
}

struct NoisyBatch {
    input: Tensor,
    eps: Tensor,
}

fn noisy_batch(x0: &Tensor, t: &[usize], eps: Tensor, schedule: &DiffusionSchedule) -> Result<NoisyBatch, HarnessError> {
    let mut parts = Vec::with_capacity(x0.n());
    for (i, &ti) in t.iter().enumerate() {
        let xi = x0.gather(&[i]);
        let ei = eps.gather(&[i]);
        parts.extend(ddpm_noise(&xi, ti, schedule, &ei)?.into_vec());
    }
    let x_t = Tensor::from_vec(x0.dims(), parts)?;
    Ok(NoisyBatch { input: conditioned(&x_t, t, schedule.steps()), eps })
}

fn sample_batch(data: &Tensor, batch: usize, schedule: &DiffusionSchedule, rng: &mut ChaCha8Rng) -> Result<NoisyBatch, HarnessError> {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.n())).collect();
    let t: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let x0 = data.gather(&idx);
    let eps = Tensor::from_vec(x0.dims(), (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect())?;
    noisy_batch(&x0, &t, eps, schedule)
}

/// Held-out noise-prediction error per element, averaged over the step grid.
pub fn denoising_mse(model: &Model, test: &Tensor, eval_steps: &[usize], schedule: &DiffusionSchedule, seed: u64) -> Result<f64, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(9);
    let eps = Tensor::from_vec(test.dims(), (0..test.len()).map(|_| rng.sample(StandardNormal)).collect())?;
    let mut total = 0.0;
    for &t in eval_steps {
        let b = noisy_batch(test, &vec![t; test.n()], eps.clone(), schedule)?;
        let pred = model.predict(&b.input, BnMode::Eval)?;
        total += diffusion_loss(&b.eps, &pred)?.value / test.sample_len() as f64;
    }
    Ok(total / eval_steps.len() as f64)
}

struct Distillation<'a> {
    teacher: &'a Model,
    pairs: Vec<(usize, usize)>,
    alpha: f64,
}

fn train_denoiser(
    model: &mut Model,
    data: &Tensor,
    steps: usize,
    config: &DdpmConfig,
    seed: u64,
    distill: Option<&Distillation>,
) -> Result<Vec<f64>, HarnessError> {
    let schedule = DiffusionSchedule::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let mut sgd = Sgd::new(model.params(), config.momentum, 0.0);
    let out = model.graph().output_index();
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let lr = if step >= steps * 4 / 5 { config.lr * 0.2 } else { config.lr };
        let b = sample_batch(data, config.batch_size, &schedule, &mut rng)?;
        let pass = model.forward(&b.input, BnMode::Train)?;
        let l = diffusion_loss(&b.eps, pass.output(out))?;
        let mut total = l.value;
        let mut seeds = vec![(out, l.grad)];
        if let Some(d) = distill {
            let tp = d.teacher.forward(&b.input, BnMode::Eval)?;
            for &(s_node, t_node) in &d.pairs {
                let r = red_loss(tp.output(t_node), pass.output(s_node), RedDistance::Cosine)?;
                total += d.alpha * r.value;
                let mut g = r.grad;
                g.scale(d.alpha);
                seeds.push((s_node, g));
            }
        }
        if !total.is_finite() {
            return Err(HarnessError::DivergenceDetected { epoch: 0, step });
        }
        let grads = model.backward(&pass, seeds)?;
        sgd.step(model.params_mut(), &grads.params, lr);
        model.update_running_stats(&pass, config.batch_size);
        log.push(total);
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmSeedResult {
    pub seed: u64,
    pub plain_mse: f64,
    pub distilled_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmReport {
    pub teacher_mse: f64,
    pub seeds: Vec<DdpmSeedResult>,
    pub teacher_peak_bytes: u64,
    pub student_peak_bytes: u64,
    pub plan: AlignmentPlan,
}

impl DdpmReport {
    pub fn mean_plain(&self) -> f64 {
        self.seeds.iter().map(|s| s.plain_mse).sum::<f64>() / self.seeds.len().max(1) as f64
    }

    pub fn mean_distilled(&self) -> f64 {
        self.seeds.iter().map(|s| s.distilled_mse).sum::<f64>() / self.seeds.len().max(1) as f64
    }
}

/// Teacher and student U-Nets for a given width and multiplier.
pub fn unet_pair(width: u64, multiplier: u64) -> Result<(NetworkGraph, NetworkGraph), HarnessError> {
    let teacher = model_zoo(ZooModel::UnetDdpm, &unet_config(width))?;
    let (student, _) = rewrite_aggressive(&teacher, &RewriteConfig::new(multiplier))?;
    Ok((teacher, student))
}

pub fn toy_ddpm_distill(config: &DdpmConfig) -> Result<DdpmReport, HarnessError> {
    let (tg, sg) = unet_pair(config.width, config.multiplier)?;
    let plan = plan_unet(&tg, &sg)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.data_seed);
    let train = two_mode_images(config.train_images, &mut data_rng);
    let test = two_mode_images(config.test_images, &mut data_rng);
    let schedule = DiffusionSchedule::standard();

    let mut init = ChaCha8Rng::seed_from_u64(config.teacher_seed);
    let mut teacher = Model::new(tg.clone(), &mut init)?;
    train_denoiser(&mut teacher, &train, config.teacher_steps, config, config.teacher_seed, None)?;
    let teacher_mse = denoising_mse(&teacher, &test, &config.eval_steps, &schedule, config.data_seed)?;

    let (red_graph, insertions) = insert_red_blocks(&sg, &plan, RedAblation::Full, 3)?;
    let pairs: Vec<(usize, usize)> = insertions
        .iter()
        .zip(&plan.pairs)
        .map(|(ins, p)| (red_graph.index_of(&ins.output).expect("inserted"), tg.index_of(&p.teacher_tap).expect("planned")))
        .collect();
    let results = par::map(Execution::current(), &config.seeds, |&seed| -> Result<DdpmSeedResult, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plain = Model::new(sg.clone(), &mut rng)?;
        let mut red = Model::new(red_graph.clone(), &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))?;
        red.copy_matching(&plain);
        train_denoiser(&mut plain, &train, config.student_steps, config, seed, None)?;
        let d = Distillation { teacher: &teacher, pairs: pairs.clone(), alpha: config.alpha };
        train_denoiser(&mut red, &train, config.student_steps, config, seed, Some(&d))?;
        Ok(DdpmSeedResult {
            seed,
            plain_mse: denoising_mse(&plain, &test, &config.eval_steps, &schedule, config.data_seed)?,
            distilled_mse: denoising_mse(&red, &test, &config.eval_steps, &schedule, config.data_seed)?,
        })
    });
    Ok(DdpmReport {
        teacher_mse,
        seeds: results.into_iter().collect::<Result<_, _>>()?,
        teacher_peak_bytes: trace(&tg)?.peak_bytes,
        student_peak_bytes: trace(&sg)?.peak_bytes,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_predictor_loss_is_element_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = Tensor::randn([4096, 1, 8, 8], &mut rng);
        let l = diffusion_loss(&eps, &Tensor::zeros(eps.dims())).unwrap().value;
        assert!((l / 64.0 - 1.0).abs() < 0.01, "{l}");
    }

    #[test]
    fn two_modes_alternate() {
        let x = two_mode_images(2, &mut ChaCha8Rng::seed_from_u64(1));
        let row_sum = |i: usize, y: usize| (0..8).map(|xx| x.at(i, 0, y, xx)).sum::<f64>();
        assert!((0..8).any(|y| row_sum(0, y) > 7.0));
        assert!((0..8).all(|y| row_sum(1, y) < 0.0));
    }
}
