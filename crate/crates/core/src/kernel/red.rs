//! Residual encoded distillation (RED) block.
//!
//! `f_D = f_R + f_S ⊙ ĝ` where the gate `ĝ = sigmoid(BN(conv1×1(f_S)))` and
//! the residual encoding `f_R = relu6(BN(conv_k×k(f_S)))`. Both convs keep
//! the channel count so the gate and residual match `f_S` elementwise.
//!
//! The block exists in two forms: [`red_forward`]/[`red_backward`] operate on
//! a standalone [`RedBlockParams`], and [`insert_red_blocks`] splices the same
//! computation into a student graph as primitive nodes so the executor and
//! the memory analyzer see it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::exec::{BnMode, ParamStore, ZERO_BIAS_TAG};
use super::ops::{self, BnCache, BnState, ConvGeom};
use super::{KernelError, Tensor};
use crate::align::AlignmentPlan;
use crate::ir::{build_graph, infer_shapes, Activation, Conv2dParams, IrError, NetworkGraph, OpKind, OpNode};

/// Tag carried by every node that belongs to a RED block.
pub const RED_TAG: &str = "red";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedAblation {
    #[default]
    Full,
    /// `f_R + f_S`: no gate.
    NoLogit,
    /// `f_S ⊙ ĝ`: no residual encoder.
    NoResidualEncoder,
    /// `relu6(BN(conv(ĝ)))`: gate and encoder stacked, no skip paths.
    NoShortcut,
    /// No block; the feature loss acts on `f_S` directly.
    NoRedBlock,
}

impl RedAblation {
    pub const ALL: [RedAblation; 5] = [Self::Full, Self::NoLogit, Self::NoResidualEncoder, Self::NoShortcut, Self::NoRedBlock];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoLogit => "no_logit",
            Self::NoResidualEncoder => "no_residual_encoder",
            Self::NoShortcut => "no_shortcut",
            Self::NoRedBlock => "no_red_block",
        }
    }

    fn has_gate(self) -> bool {
        matches!(self, Self::Full | Self::NoResidualEncoder | Self::NoShortcut)
    }

    fn has_encoder(self) -> bool {
        matches!(self, Self::Full | Self::NoLogit | Self::NoShortcut)
    }
}

impl fmt::Display for RedAblation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RedAblation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown ablation `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RedBlockParams {
    pub channels: usize,
    pub kernel_size: usize,
    pub logit_w: Tensor,
    pub logit_b: Vec<f64>,
    pub logit_bn: BnState,
    pub re_w: Tensor,
    pub re_b: Vec<f64>,
    pub re_bn: BnState,
}

impl RedBlockParams {
    /// All conv weights and biases zero, identity batch norm.
    pub fn zeros(channels: usize, kernel_size: usize) -> Self {
        Self {
            channels,
            kernel_size,
            logit_w: Tensor::zeros([channels, channels, 1, 1]),
            logit_b: vec![0.0; channels],
            logit_bn: BnState::identity(channels),
            re_w: Tensor::zeros([channels, channels, kernel_size, kernel_size]),
            re_b: vec![0.0; channels],
            re_bn: BnState::identity(channels),
        }
    }

    /// Fan-in scaled uniform weights; the gate bias starts at zero.
    pub fn init<R: Rng + ?Sized>(channels: usize, kernel_size: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, kernel_size);
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / ((channels * kernel_size * kernel_size) as f64).sqrt();
        p.logit_w = Tensor::uniform(p.logit_w.dims(), b1, rng);
        p.re_w = Tensor::uniform(p.re_w.dims(), b2, rng);
        p.re_b = (0..channels).map(|_| rng.random_range(-b2..=b2)).collect();
        p
    }

    fn re_geom(&self) -> ConvGeom {
        ConvGeom::new(1, self.kernel_size / 2)
    }

    /// Reads a block inserted by [`insert_red_blocks`] out of a model's
    /// parameters. Running statistics are left at identity.
    pub fn from_store(store: &ParamStore, prefix: &str, channels: usize, kernel_size: usize) -> Self {
        let mut p = Self::zeros(channels, kernel_size);
        let get = |name: &str| store.get(&format!("{prefix}.{name}")).cloned();
        if let Some(t) = get("gate.conv.weight") {
            p.logit_w = t;
        }
        if let Some(t) = get("gate.conv.bias") {
            p.logit_b = t.into_vec();
        }
        if let Some(t) = get("gate.bn.gamma") {
            p.logit_bn.gamma = t.into_vec();
        }
        if let Some(t) = get("gate.bn.beta") {
            p.logit_bn.beta = t.into_vec();
        }
        if let Some(t) = get("re.conv.weight") {
            p.re_w = t;
        }
        if let Some(t) = get("re.conv.bias") {
            p.re_b = t.into_vec();
        }
        if let Some(t) = get("re.bn.gamma") {
            p.re_bn.gamma = t.into_vec();
        }
        if let Some(t) = get("re.bn.beta") {
            p.re_bn.beta = t.into_vec();
        }
        p
    }

    /// Momentum update from the batch statistics of a train-mode pass.
    pub fn absorb_batch_stats(&mut self, cache: &RedCache) {
        let n = cache.f_s.n() * cache.f_s.h() * cache.f_s.w();
        if let Some(g) = &cache.gate {
            if let Some((m, v)) = &g.stats {
                ops::update_running_stats(&mut self.logit_bn, m, v, n);
            }
        }
        if let Some(r) = &cache.encoder {
            if let Some((m, v)) = &r.stats {
                ops::update_running_stats(&mut self.re_bn, m, v, n);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    input: Tensor,
    bn_in: Tensor,
    bn_out: Tensor,
    bn: BnCache,
    stats: Option<(Vec<f64>, Vec<f64>)>,
    pub out: Tensor,
}

#[derive(Debug, Clone)]
pub struct RedCache {
    pub ablation: RedAblation,
    pub f_s: Tensor,
    /// Gate branch; `out` is `ĝ`.
    pub gate: Option<BranchCache>,
    /// Residual encoder branch; `out` is `f_R`.
    pub encoder: Option<BranchCache>,
}

impl RedCache {
    /// Residual-encoder values entering the ReLU6.
    pub fn encoder_pre_activation(&self) -> Option<&[f64]> {
        self.encoder.as_ref().map(|e| e.bn_out.data())
    }
}

fn branch(input: &Tensor, w: &Tensor, b: &[f64], geom: ConvGeom, bn: &BnState, act: Activation, mode: BnMode) -> Result<BranchCache, KernelError> {
    let z = ops::conv2d(input, w, Some(b), geom)?;
    let (y, cache, stats) = ops::batchnorm(&z, bn, mode == BnMode::Train)?;
    let out = ops::activate(act, &y);
    Ok(BranchCache { input: input.clone(), bn_in: z, bn_out: y, bn: cache, stats, out })
}

struct BranchGrads {
    dx: Tensor,
    dw: Tensor,
    db: Vec<f64>,
    dgamma: Vec<f64>,
    dbeta: Vec<f64>,
}

fn branch_backward(c: &BranchCache, w: &Tensor, geom: ConvGeom, gamma: &[f64], act: Activation, dy: &Tensor) -> Result<BranchGrads, KernelError> {
    let da = ops::activate_backward(act, &c.bn_out, dy);
    let bg = ops::batchnorm_backward(&da, &c.bn, gamma);
    debug_assert_eq!(bg.dx.dims(), c.bn_in.dims());
    let cg = ops::conv2d_backward(&c.input, w, &bg.dx, geom)?;
    Ok(BranchGrads { dx: cg.dx, dw: cg.dw, db: cg.db, dgamma: bg.dgamma, dbeta: bg.dbeta })
}

pub fn red_forward(p: &RedBlockParams, f_s: &Tensor, ablation: RedAblation, mode: BnMode) -> Result<(Tensor, RedCache), KernelError> {
    if f_s.c() != p.channels {
        return Err(KernelError::ShapeMismatch(format!("RED block over {} channels, input {:?}", p.channels, f_s.dims())));
    }
    f_s.check_finite("RED input")?;
    let gate = if ablation.has_gate() {
        Some(branch(f_s, &p.logit_w, &p.logit_b, ConvGeom::new(1, 0), &p.logit_bn, Activation::Sigmoid, mode)?)
    } else {
        None
    };
    let encoder = if ablation.has_encoder() {
        let input = match (&gate, ablation) {
            (Some(g), RedAblation::NoShortcut) => &g.out,
            _ => f_s,
        };
        Some(branch(input, &p.re_w, &p.re_b, p.re_geom(), &p.re_bn, Activation::Relu6, mode)?)
    } else {
        None
    };
    let f_d = match ablation {
        RedAblation::Full => ops::add(&encoder.as_ref().unwrap().out, &ops::mul(f_s, &gate.as_ref().unwrap().out)?)?,
        RedAblation::NoLogit => ops::add(&encoder.as_ref().unwrap().out, f_s)?,
        RedAblation::NoResidualEncoder => ops::mul(f_s, &gate.as_ref().unwrap().out)?,
        RedAblation::NoShortcut => encoder.as_ref().unwrap().out.clone(),
        RedAblation::NoRedBlock => f_s.clone(),
    };
    f_d.check_finite("RED output")?;
    Ok((f_d, RedCache { ablation, f_s: f_s.clone(), gate, encoder }))
}

/// Gradients of a RED block; entries for absent branches are zero.
#[derive(Debug, Clone)]
pub struct RedGrads {
    pub f_s: Tensor,
    pub logit_w: Tensor,
    pub logit_b: Vec<f64>,
    pub logit_gamma: Vec<f64>,
    pub logit_beta: Vec<f64>,
    pub re_w: Tensor,
    pub re_b: Vec<f64>,
    pub re_gamma: Vec<f64>,
    pub re_beta: Vec<f64>,
}

pub fn red_backward(p: &RedBlockParams, cache: &RedCache, d_fd: &Tensor) -> Result<RedGrads, KernelError> {
    d_fd.expect_dims(cache.f_s.dims(), "RED output gradient")?;
    let c = p.channels;
    let mut g = RedGrads {
        f_s: Tensor::zeros(cache.f_s.dims()),
        logit_w: Tensor::zeros(p.logit_w.dims()),
        logit_b: vec![0.0; c],
        logit_gamma: vec![0.0; c],
        logit_beta: vec![0.0; c],
        re_w: Tensor::zeros(p.re_w.dims()),
        re_b: vec![0.0; c],
        re_gamma: vec![0.0; c],
        re_beta: vec![0.0; c],
    };
    let mut d_gate = None;
    let mut d_re = None;
    match cache.ablation {
        RedAblation::Full => {
            let gate = &cache.gate.as_ref().unwrap().out;
            g.f_s = ops::mul(d_fd, gate)?;
            d_gate = Some(ops::mul(d_fd, &cache.f_s)?);
            d_re = Some(d_fd.clone());
        }
        RedAblation::NoLogit => {
            g.f_s = d_fd.clone();
            d_re = Some(d_fd.clone());
        }
        RedAblation::NoResidualEncoder => {
            g.f_s = ops::mul(d_fd, &cache.gate.as_ref().unwrap().out)?;
            d_gate = Some(ops::mul(d_fd, &cache.f_s)?);
        }
        RedAblation::NoShortcut => d_re = Some(d_fd.clone()),
        RedAblation::NoRedBlock => g.f_s = d_fd.clone(),
    }
    if let (Some(enc), Some(dr)) = (&cache.encoder, d_re) {
        let bg = branch_backward(enc, &p.re_w, p.re_geom(), &p.re_bn.gamma, Activation::Relu6, &dr)?;
        (g.re_w, g.re_b, g.re_gamma, g.re_beta) = (bg.dw, bg.db, bg.dgamma, bg.dbeta);
        if cache.ablation == RedAblation::NoShortcut {
            d_gate = Some(bg.dx);
        } else {
            g.f_s.add_assign(&bg.dx)?;
        }
    }
    if let (Some(gate), Some(dg)) = (&cache.gate, d_gate) {
        let bg = branch_backward(gate, &p.logit_w, ConvGeom::new(1, 0), &p.logit_bn.gamma, Activation::Sigmoid, &dg)?;
        (g.logit_w, g.logit_b, g.logit_gamma, g.logit_beta) = (bg.dw, bg.db, bg.dgamma, bg.dbeta);
        g.f_s.add_assign(&bg.dx)?;
    }
    Ok(g)
}

/// Where a RED block was spliced into a student graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedInsertion {
    pub pair: usize,
    /// Node-id prefix of the block's nodes and parameters.
    pub prefix: String,
    /// Student node whose output is `f_S`.
    pub tap: String,
    /// Node whose output is `f_D` (the tap itself when no block is inserted).
    pub output: String,
}

/// Inserts one RED block per plan pair after the pair's student tap and
/// reroutes the tap's former consumers to the block output.
pub fn insert_red_blocks(
    student: &NetworkGraph,
    plan: &AlignmentPlan,
    ablation: RedAblation,
    kernel_size: usize,
) -> Result<(NetworkGraph, Vec<RedInsertion>), IrError> {
    let shapes = infer_shapes(student)?;
    let mut blocks: BTreeMap<String, (Vec<OpNode>, RedInsertion)> = BTreeMap::new();
    for (k, pair) in plan.pairs.iter().enumerate() {
        let tap = pair.student_tap.clone();
        let c = shapes
            .get(&tap)
            .ok_or_else(|| IrError::DanglingInput { node: format!("red{}", k + 1), input: tap.clone() })?
            .c;
        let prefix = format!("red{}", k + 1);
        let (nodes, output) = red_nodes(&prefix, &tap, c, kernel_size as u64, ablation);
        let ins = RedInsertion { pair: k, prefix, tap: tap.clone(), output };
        if blocks.insert(tap.clone(), (nodes, ins)).is_some() {
            return Err(IrError::InvalidNode { node: tap, detail: "two RED blocks on the same feature".into() });
        }
    }
    let reroute: BTreeMap<String, String> = blocks.iter().map(|(t, (_, i))| (t.clone(), i.output.clone())).collect();
    let mut nodes = Vec::new();
    for n in student.nodes() {
        let mut n = n.clone();
        for input in &mut n.inputs {
            if let Some(out) = reroute.get(input) {
                *input = out.clone();
            }
        }
        let id = n.id.clone();
        nodes.push(n);
        if let Some((block, _)) = blocks.get(&id) {
            nodes.extend(block.iter().cloned());
        }
    }
    let graph = build_graph(nodes, student.input_shape())?;
    let mut insertions: Vec<RedInsertion> = blocks.into_values().map(|(_, i)| i).collect();
    insertions.sort_by_key(|i| i.pair);
    Ok((graph, insertions))
}

fn red_nodes(prefix: &str, tap: &str, c: u64, ks: u64, ablation: RedAblation) -> (Vec<OpNode>, String) {
    let node = |suffix: &str, kind: OpKind, inputs: &[&str]| {
        let mut n = OpNode::new(format!("{prefix}.{suffix}"), kind, inputs);
        n.tags = BTreeSet::from([RED_TAG.to_string()]);
        n
    };
    let id = |suffix: &str| format!("{prefix}.{suffix}");
    let mut nodes = Vec::new();
    if ablation.has_gate() {
        nodes.push(node("gate.conv", OpKind::Conv2d(Conv2dParams::square(1, 1, c, c)), &[tap]).tagged(ZERO_BIAS_TAG));
        nodes.push(node("gate.bn", OpKind::BatchNorm, &[&id("gate.conv")]));
        nodes.push(node("gate.act", OpKind::act(Activation::Sigmoid), &[&id("gate.bn")]));
    }
    if matches!(ablation, RedAblation::Full | RedAblation::NoResidualEncoder) {
        nodes.push(node("mul", OpKind::Mul, &[tap, &id("gate.act")]));
    }
    if ablation.has_encoder() {
        let src = if ablation == RedAblation::NoShortcut { id("gate.act") } else { tap.to_string() };
        nodes.push(node("re.conv", OpKind::Conv2d(Conv2dParams::square(ks, 1, c, c)), &[&src]));
        nodes.push(node("re.bn", OpKind::BatchNorm, &[&id("re.conv")]));
        nodes.push(node("re.act", OpKind::act(Activation::Relu6), &[&id("re.bn")]));
    }
    let output = match ablation {
        RedAblation::Full => {
            nodes.push(node("out", OpKind::Add, &[&id("re.act"), &id("mul")]));
            id("out")
        }
        RedAblation::NoLogit => {
            nodes.push(node("out", OpKind::Add, &[&id("re.act"), tap]));
            id("out")
        }
        RedAblation::NoResidualEncoder => id("mul"),
        RedAblation::NoShortcut => id("re.act"),
        RedAblation::NoRedBlock => tap.to_string(),
    };
    (nodes, output)
}
