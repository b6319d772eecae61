use serde::{Deserialize, Serialize};

use crate::align::AlignmentMode;
use crate::kernel::{KlDirection, RedAblation, RedDistance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of each RED loss term.
    pub alpha: f64,
    pub distance: RedDistance,
    pub use_kd: bool,
    pub kd_temperature: f64,
    pub kd_direction: KlDirection,
    pub alignment: AlignmentMode,
    pub ablation: RedAblation,
    pub re_kernel_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of training after which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 50.0,
            distance: RedDistance::Cosine,
            use_kd: false,
            kd_temperature: 4.0,
            kd_direction: KlDirection::TeacherStudent,
            alignment: AlignmentMode::PoolingAlign,
            ablation: RedAblation::Full,
            re_kernel_size: 3,
            epochs: 60,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.6, 0.8, 0.9],
            lr_decay: 0.2,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Plain supervised training: no feature loss and no RED blocks.
    pub fn plain() -> Self {
        Self { alpha: 0.0, ablation: RedAblation::NoRedBlock, ..Self::default() }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let progress = epoch as f64 / self.epochs.max(1) as f64;
        let drops = self.milestones.iter().filter(|&&m| progress >= m).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha >= 0.0) {
            return Err(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if ![1, 3, 5].contains(&self.re_kernel_size) {
            return Err(format!("RE kernel size must be 1, 3 or 5, got {}", self.re_kernel_size));
        }
        if self.batch_size == 0 {
            return Err("batch size must be positive".into());
        }
        if self.use_kd && !(self.kd_temperature > 0.0) {
            return Err(format!("temperature must be positive, got {}", self.kd_temperature));
        }
        Ok(())
    }
}
