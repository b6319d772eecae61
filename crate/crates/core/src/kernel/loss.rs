//! Training losses for classification and distillation. Each returns the
//! batch-mean value together with its gradient.

use serde::{Deserialize, Serialize};

use super::{KernelError, Tensor};

/// Norm below which a channel-mean map is treated as degenerate.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient with respect to the student-side argument.
    pub grad: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedDistance {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(p_teacher ‖ p_student), the usual distillation objective.
    #[default]
    TeacherStudent,
    /// KL(p_student ‖ p_teacher).
    StudentTeacher,
}

/// Numerically stable softmax of `logits / t`.
pub fn softmax(logits: &[f64], t: f64) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|&z| ((z - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax(logits: &[f64], t: f64) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = logits.iter().map(|&z| ((z - m) / t).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| (z - m) / t - lse).collect()
}

/// Softmax cross-entropy against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossOutput, KernelError> {
    let n = logits.n();
    let k = logits.sample_len();
    if labels.len() != n || labels.iter().any(|&l| l >= k) {
        return Err(KernelError::ShapeMismatch(format!("{} labels for logits {:?}", labels.len(), logits.dims())));
    }
    let mut grad = Tensor::zeros(logits.dims());
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let z = logits.sample(i);
        let ls = log_softmax(z, 1.0);
        total -= ls[label];
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = (ls[j].exp() - f64::from(u8::from(j == label))) / n as f64;
        }
    }
    Ok(LossOutput { value: total / n as f64, grad })
}

/// Temperature-softened KL divergence scaled by `t²`, averaged over the batch.
pub fn kd_loss(student: &Tensor, teacher: &Tensor, t: f64, direction: KlDirection) -> Result<LossOutput, KernelError> {
    teacher.expect_dims(student.dims(), "kd_loss teacher logits")?;
    if !(t > 0.0) {
        return Err(KernelError::Unsupported(format!("temperature {t}")));
    }
    let n = student.n();
    let k = student.sample_len();
    let mut grad = Tensor::zeros(student.dims());
    let mut total = 0.0;
    for i in 0..n {
        let (zs, zt) = (student.sample(i), teacher.sample(i));
        let (ls, lt) = (log_softmax(zs, t), log_softmax(zt, t));
        let ps: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
        let pt: Vec<f64> = lt.iter().map(|v| v.exp()).collect();
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        match direction {
            KlDirection::TeacherStudent => {
                total += (0..k).map(|j| pt[j] * (lt[j] - ls[j])).sum::<f64>();
                for j in 0..k {
                    g[j] = t * (ps[j] - pt[j]) / n as f64;
                }
            }
            KlDirection::StudentTeacher => {
                let r: Vec<f64> = (0..k).map(|j| ls[j] - lt[j]).collect();
                let kl: f64 = (0..k).map(|j| ps[j] * r[j]).sum();
                total += kl;
                for j in 0..k {
                    g[j] = t * ps[j] * (r[j] - kl) / n as f64;
                }
            }
        }
    }
    Ok(LossOutput { value: t * t * total / n as f64, grad })
}

/// Per-sample channel mean, `n × (h·w)`.
fn channel_mean(x: &Tensor) -> Vec<Vec<f64>> {
    let hw = x.h() * x.w();
    (0..x.n())
        .map(|i| {
            let mut m = vec![0.0; hw];
            for plane in x.sample(i).chunks(hw) {
                m.iter_mut().zip(plane).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|v| *v /= x.c() as f64);
            m
        })
        .collect()
}

/// Distance between channel-averaged teacher features and RED outputs.
///
/// Cosine: `1 − cos(m_T, m_D)` per sample over the flattened spatial map; a
/// pair where either map has norm below [`ZERO_NORM`] contributes 1 with no
/// gradient. Euclidean: mean squared difference over the spatial map.
/// Channel counts may differ; batch and spatial dims must agree.
pub fn red_loss(f_t: &Tensor, f_d: &Tensor, distance: RedDistance) -> Result<LossOutput, KernelError> {
    if f_t.n() != f_d.n() || f_t.h() != f_d.h() || f_t.w() != f_d.w() {
        return Err(KernelError::ShapeMismatch(format!("red_loss teacher {:?} vs student {:?}", f_t.dims(), f_d.dims())));
    }
    f_t.check_finite("red_loss teacher features")?;
    f_d.check_finite("red_loss student features")?;
    let n = f_d.n();
    let hw = f_d.h() * f_d.w();
    let (mt, md) = (channel_mean(f_t), channel_mean(f_d));
    let mut total = 0.0;
    let mut dm = vec![vec![0.0; hw]; n];
    for i in 0..n {
        let (a, b) = (&mt[i], &md[i]);
        match distance {
            RedDistance::Cosine => {
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na < ZERO_NORM || nb < ZERO_NORM {
                    total += 1.0;
                    continue;
                }
                let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                total += 1.0 - cos;
                for p in 0..hw {
                    dm[i][p] = -(a[p] / (na * nb) - cos * b[p] / (nb * nb)) / n as f64;
                }
            }
            RedDistance::Euclidean => {
                total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / hw as f64;
                for p in 0..hw {
                    dm[i][p] = -2.0 * (a[p] - b[p]) / (hw as f64 * n as f64);
                }
            }
        }
    }
    let c = f_d.c();
    let mut grad = Tensor::zeros(f_d.dims());
    for (i, s) in grad.data_mut().chunks_mut(c * hw).enumerate() {
        for plane in s.chunks_mut(hw) {
            plane.iter_mut().zip(&dm[i]).for_each(|(g, d)| *g = d / c as f64);
        }
    }
    Ok(LossOutput { value: total / n as f64, grad })
}
