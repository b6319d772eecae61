//! Central-difference gradient checking.
//!
//! Each parameter is perturbed by `h = 1e-5·max(1, |θ|)` and the error is
//! reported relative to `max(|analytic|, |numeric|, δ)` with `δ = 1e-3`.
//! The floor keeps exactly-zero gradients (a conv bias feeding a train-mode
//! batch norm, say) from turning round-off noise near 1e-10 into large
//! relative errors; below `δ` the check is effectively absolute.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::exec::BnMode;
use super::loss::{kd_loss, red_loss, KlDirection, RedDistance};
use super::red::{red_backward, red_forward, RedAblation, RedBlockParams};
use super::{diffusion_loss, Tensor};

/// Denominator floor for relative errors.
pub const DEFAULT_DELTA: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64, delta: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(delta)
}

/// One parameter group: current values and the analytic gradient.
#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub values: Vec<f64>,
    pub analytic: Vec<f64>,
}

impl Probe {
    pub fn new(name: impl Into<String>, values: &[f64], analytic: &[f64]) -> Self {
        Self { name: name.into(), values: values.to_vec(), analytic: analytic.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
    pub delta: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn merge(mut self, other: GradCheckReport) -> Self {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.groups.extend(other.groups);
        self.passed &= other.passed;
        self
    }
}

/// Compares `probes[i].analytic` with central differences of `loss`, which
/// receives the current values of every group.
pub fn grad_check(op: &str, probes: &[Probe], loss: impl Fn(&[Vec<f64>]) -> f64, tolerance: f64, delta: f64) -> GradCheckReport {
    let mut values: Vec<Vec<f64>> = probes.iter().map(|p| p.values.clone()).collect();
    let mut groups = Vec::with_capacity(probes.len());
    for (g, probe) in probes.iter().enumerate() {
        let mut worst = (0.0f64, 0usize);
        for i in 0..probe.values.len() {
            let theta = probe.values[i];
            let h = 1e-5 * theta.abs().max(1.0);
            values[g][i] = theta + h;
            let plus = loss(&values);
            let step_up = values[g][i];
            values[g][i] = theta - h;
            let minus = loss(&values);
            let step = step_up - values[g][i];
            values[g][i] = theta;
            let numeric = (plus - minus) / step;
            let e = relative_error(probe.analytic[i], numeric, delta);
            if !(e <= worst.0) {
                worst = (e, i);
            }
        }
        groups.push(GroupError { name: probe.name.clone(), max_rel_error: worst.0, worst_index: worst.1 });
    }
    let max_rel_error = groups.iter().fold(0.0f64, |m, g| if g.max_rel_error.is_nan() { f64::NAN } else { m.max(g.max_rel_error) });
    GradCheckReport { op: op.to_string(), max_rel_error, groups, tolerance, delta, passed: max_rel_error < tolerance }
}

/// Built-in checks on seeded random instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradCheckOp {
    RedBlock,
    RedLoss,
    KdLoss,
    DiffusionLoss,
    /// RED block with a sign-flipped input gradient; must fail.
    CorruptedRedBlock,
}

impl GradCheckOp {
    pub const ALL: [GradCheckOp; 5] = [Self::RedBlock, Self::RedLoss, Self::KdLoss, Self::DiffusionLoss, Self::CorruptedRedBlock];

    pub fn name(self) -> &'static str {
        match self {
            Self::RedBlock => "red-block",
            Self::RedLoss => "red-loss",
            Self::KdLoss => "kd-loss",
            Self::DiffusionLoss => "diffusion-loss",
            Self::CorruptedRedBlock => "corrupted-red-block",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    pub fn run(self, seed: u64, tolerance: f64) -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Self::RedBlock => RedAblation::ALL[..4]
                .iter()
                .map(|&a| check_red(&mut rng, a, tolerance, None, false))
                .reduce(GradCheckReport::merge)
                .expect("four ablations"),
            Self::RedLoss => {
                let f_t = Tensor::randn([2, 6, 5, 5], &mut rng);
                check_red(&mut rng, RedAblation::Full, tolerance, Some(f_t), false)
            }
            Self::KdLoss => check_kd(&mut rng, KlDirection::TeacherStudent, tolerance).merge(check_kd(&mut rng, KlDirection::StudentTeacher, tolerance)),
            Self::DiffusionLoss => check_diffusion(&mut rng, tolerance),
            Self::CorruptedRedBlock => check_red(&mut rng, RedAblation::Full, tolerance, None, true),
        }
    }
}

/// Random RED instance whose ReLU6 pre-activations keep a margin from the
/// kinks at 0 and 6, so finite differences never straddle one.
fn red_instance(rng: &mut ChaCha8Rng, ablation: RedAblation) -> (RedBlockParams, Tensor) {
    loop {
        let mut p = RedBlockParams::init(4, 3, rng);
        for bn in [&mut p.logit_bn, &mut p.re_bn] {
            bn.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            bn.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        p.logit_b.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        let x = Tensor::randn([2, 4, 5, 5], rng);
        let (_, cache) = red_forward(&p, &x, ablation, BnMode::Train).expect("valid instance");
        let margin = cache
            .encoder_pre_activation()
            .unwrap_or(&[])
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min(v.abs()).min((v - 6.0).abs()));
        if margin > 1e-3 {
            return (p, x);
        }
    }
}

fn red_params_as_probes(p: &RedBlockParams, x: &Tensor, g: &super::red::RedGrads) -> Vec<Probe> {
    vec![
        Probe::new("f_s", x.data(), g.f_s.data()),
        Probe::new("logit_w", p.logit_w.data(), g.logit_w.data()),
        Probe::new("logit_b", &p.logit_b, &g.logit_b),
        Probe::new("logit_gamma", &p.logit_bn.gamma, &g.logit_gamma),
        Probe::new("logit_beta", &p.logit_bn.beta, &g.logit_beta),
        Probe::new("re_w", p.re_w.data(), g.re_w.data()),
        Probe::new("re_b", &p.re_b, &g.re_b),
        Probe::new("re_gamma", &p.re_bn.gamma, &g.re_gamma),
        Probe::new("re_beta", &p.re_bn.beta, &g.re_beta),
    ]
}

fn with_values(p: &RedBlockParams, x: &Tensor, v: &[Vec<f64>]) -> (RedBlockParams, Tensor) {
    let mut q = p.clone();
    let xs = Tensor::from_vec(x.dims(), v[0].clone()).expect("probe dims");
    q.logit_w = Tensor::from_vec(p.logit_w.dims(), v[1].clone()).expect("probe dims");
    q.logit_b = v[2].clone();
    q.logit_bn.gamma = v[3].clone();
    q.logit_bn.beta = v[4].clone();
    q.re_w = Tensor::from_vec(p.re_w.dims(), v[5].clone()).expect("probe dims");
    q.re_b = v[6].clone();
    q.re_bn.gamma = v[7].clone();
    q.re_bn.beta = v[8].clone();
    (q, xs)
}

fn check_red(rng: &mut ChaCha8Rng, ablation: RedAblation, tolerance: f64, f_t: Option<Tensor>, corrupt: bool) -> GradCheckReport {
    let (p, x) = red_instance(rng, ablation);
    let r = Tensor::randn(x.dims(), rng);
    let objective = |p: &RedBlockParams, x: &Tensor| -> (f64, Tensor) {
        let (f_d, _) = red_forward(p, x, ablation, BnMode::Train).expect("forward");
        match &f_t {
            Some(t) => {
                let l = red_loss(t, &f_d, RedDistance::Cosine).expect("loss");
                (l.value, l.grad)
            }
            None => (f_d.dot(&r), r.clone()),
        }
    };
    let (_, d_fd) = objective(&p, &x);
    let (_, cache) = red_forward(&p, &x, ablation, BnMode::Train).expect("forward");
    let mut grads = red_backward(&p, &cache, &d_fd).expect("backward");
    if corrupt {
        grads.f_s.scale(-1.0);
    }
    let probes = red_params_as_probes(&p, &x, &grads);
    let op = match (&f_t, corrupt) {
        (_, true) => "red_forward (corrupted backward)".to_string(),
        (Some(_), _) => "red_loss∘red_forward".to_string(),
        (None, _) => format!("red_forward[{ablation}]"),
    };
    grad_check(
        &op,
        &probes,
        |v| {
            let (q, xs) = with_values(&p, &x, v);
            objective(&q, &xs).0
        },
        tolerance,
        DEFAULT_DELTA,
    )
}

fn check_kd(rng: &mut ChaCha8Rng, direction: KlDirection, tolerance: f64) -> GradCheckReport {
    let s = Tensor::randn([3, 5, 1, 1], rng);
    let t = Tensor::randn([3, 5, 1, 1], rng).map(|v| 2.0 * v);
    let temp = [1.0, 2.0, 4.0][rng.random_range(0..3)];
    let out = kd_loss(&s, &t, temp, direction).expect("kd");
    let name = match direction {
        KlDirection::TeacherStudent => "student_logits[kl(t||s)]",
        KlDirection::StudentTeacher => "student_logits[kl(s||t)]",
    };
    grad_check(
        "kd_loss",
        &[Probe::new(name, s.data(), out.grad.data())],
        |v| kd_loss(&Tensor::from_vec(s.dims(), v[0].clone()).unwrap(), &t, temp, direction).unwrap().value,
        tolerance,
        DEFAULT_DELTA,
    )
}

fn check_diffusion(rng: &mut ChaCha8Rng, tolerance: f64) -> GradCheckReport {
    let eps = Tensor::randn([2, 1, 4, 4], rng);
    let pred = Tensor::randn([2, 1, 4, 4], rng);
    let out = diffusion_loss(&eps, &pred).expect("loss");
    grad_check(
        "diffusion_loss",
        &[Probe::new("eps_pred", pred.data(), out.grad.data())],
        |v| diffusion_loss(&eps, &Tensor::from_vec(pred.dims(), v[0].clone()).unwrap()).unwrap().value,
        tolerance,
        DEFAULT_DELTA,
    )
}
