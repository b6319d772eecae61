//! Forward/backward execution of a [`NetworkGraph`] with trainable
//! parameters.
//!
//! Every intermediate output is kept for the backward pass, which is fine
//! at the scale of the bundled experiments. Backward accepts gradient seeds
//! at arbitrary nodes, which is how feature-level losses enter.

use std::collections::BTreeMap;
use std::collections::HashMap;

use rand::Rng;

use super::ops::{self, BnCache, BnState, ConvGeom, PoolGeom};
use super::{KernelError, Tensor};
use crate::ir::{infer_shapes, NetworkGraph, OpKind};

/// Tag on RED gate convs; their bias starts at zero so the gate opens at 0.5.
pub const ZERO_BIAS_TAG: &str = "zero-bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics.
    Train,
    /// Running statistics.
    Eval,
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn push(&mut self, name: String, t: Tensor) -> usize {
        let i = self.tensors.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(t);
        i
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Element count of tensors whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Slots {
    None,
    Conv { w: usize, b: usize, geom: ConvGeom },
    Bn { gamma: usize, beta: usize },
    Fc { w: usize, b: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// A graph with parameters and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Model {
    graph: NetworkGraph,
    params: ParamStore,
    slots: Vec<Slots>,
    running: BTreeMap<usize, RunningStats>,
    bn_eps: f64,
    bn_momentum: f64,
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    Argmax(Vec<usize>),
    Bn(BnCache, Option<(Vec<f64>, Vec<f64>)>),
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    outputs: Vec<Tensor>,
    caches: Vec<Cache>,
}

impl ForwardPass {
    pub fn output(&self, node: usize) -> &Tensor {
        &self.outputs[node]
    }

    pub fn into_outputs(self) -> Vec<Tensor> {
        self.outputs
    }
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

fn vec_of(t: &Tensor) -> &[f64] {
    t.data()
}

impl Model {
    /// Fan-in scaled uniform initialization; BN starts as identity.
    pub fn new<R: Rng + ?Sized>(graph: NetworkGraph, rng: &mut R) -> Result<Self, KernelError> {
        let shapes = infer_shapes(&graph).map_err(|e| KernelError::Unsupported(e.to_string()))?;
        let mut params = ParamStore::default();
        let mut slots = Vec::with_capacity(graph.len());
        let mut running = BTreeMap::new();
        for (i, node) in graph.nodes().iter().enumerate() {
            let slot = match node.kind {
                OpKind::Conv2d(p) => {
                    let [o, cg, kh, kw] = p.weight_dims().map(|d| d as usize);
                    let bound = 1.0 / ((cg * kh * kw) as f64).sqrt();
                    let w = params.push(format!("{}.weight", node.id), Tensor::uniform([o, cg, kh, kw], bound, rng));
                    let bias = if node.has_tag(ZERO_BIAS_TAG) { Tensor::zeros([1, o, 1, 1]) } else { Tensor::uniform([1, o, 1, 1], bound, rng) };
                    let b = params.push(format!("{}.bias", node.id), bias);
                    let geom = ConvGeom { stride: p.stride as usize, pad: p.padding as usize, groups: p.groups as usize };
                    Slots::Conv { w, b, geom }
                }
                OpKind::BatchNorm => {
                    let c = shapes.at(i).c as usize;
                    let gamma = params.push(format!("{}.gamma", node.id), Tensor::full([1, c, 1, 1], 1.0));
                    let beta = params.push(format!("{}.beta", node.id), Tensor::zeros([1, c, 1, 1]));
                    running.insert(i, RunningStats { mean: vec![0.0; c], var: vec![1.0; c] });
                    Slots::Bn { gamma, beta }
                }
                OpKind::FullyConnected(p) => {
                    let (o, inp) = (p.out_features as usize, p.in_features as usize);
                    let bound = 1.0 / (inp as f64).sqrt();
                    let w = params.push(format!("{}.weight", node.id), Tensor::uniform([o, inp, 1, 1], bound, rng));
                    let b = params.push(format!("{}.bias", node.id), Tensor::uniform([1, o, 1, 1], bound, rng));
                    Slots::Fc { w, b }
                }
                _ => Slots::None,
            };
            slots.push(slot);
        }
        Ok(Self { graph, params, slots, running, bn_eps: 1e-5, bn_momentum: 0.1 })
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn bn_state(&self, node: usize) -> BnState {
        let Slots::Bn { gamma, beta } = self.slots[node] else { unreachable!("batchnorm slot") };
        let r = &self.running[&node];
        BnState {
            gamma: self.params.tensors[gamma].data().to_vec(),
            beta: self.params.tensors[beta].data().to_vec(),
            running_mean: r.mean.clone(),
            running_var: r.var.clone(),
            eps: self.bn_eps,
            momentum: self.bn_momentum,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<ForwardPass, KernelError> {
        let g = &self.graph;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(g.len());
        let mut caches = Vec::with_capacity(g.len());
        for (i, node) in g.nodes().iter().enumerate() {
            let ins: Vec<&Tensor> = g.preds(i).iter().map(|&p| &outputs[p]).collect();
            let (y, cache) = match (node.kind, self.slots[i]) {
                (OpKind::Input, _) => (x.clone(), Cache::None),
                (OpKind::Output, _) => (ins[0].clone(), Cache::None),
                (OpKind::Conv2d(_), Slots::Conv { w, b, geom }) => {
                    let y = ops::conv2d(ins[0], &self.params.tensors[w], Some(vec_of(&self.params.tensors[b])), geom)?;
                    (y, Cache::None)
                }
                (OpKind::MaxPool(p), _) => {
                    let (y, arg) = ops::maxpool(ins[0], pool_geom(p))?;
                    (y, Cache::Argmax(arg))
                }
                (OpKind::AvgPool(p), _) => (ops::avgpool(ins[0], pool_geom(p))?, Cache::None),
                (OpKind::GlobalAvgPool, _) => (ops::global_avgpool(ins[0]), Cache::None),
                (OpKind::BatchNorm, _) => {
                    let (y, c, stats) = ops::batchnorm(ins[0], &self.bn_state(i), mode == BnMode::Train)?;
                    (y, Cache::Bn(c, stats))
                }
                (OpKind::Activation(a), _) => (ops::activate(a.function, ins[0]), Cache::None),
                (OpKind::Add, _) => (ins[1..].iter().try_fold(ins[0].clone(), |acc, t| ops::add(&acc, t))?, Cache::None),
                (OpKind::Mul, _) => (ops::mul(ins[0], ins[1])?, Cache::None),
                (OpKind::Concat, _) => (ops::concat(&ins)?, Cache::None),
                (OpKind::Upsample(p), _) => (ops::upsample_nearest(ins[0], p.factor as usize), Cache::None),
                (OpKind::FullyConnected(_), Slots::Fc { w, b }) => {
                    (ops::fully_connected(ins[0], &self.params.tensors[w], vec_of(&self.params.tensors[b]))?, Cache::None)
                }
                (kind, _) => return Err(KernelError::Unsupported(format!("{} at `{}`", kind.name(), node.id))),
            };
            outputs.push(y);
            caches.push(cache);
        }
        Ok(ForwardPass { outputs, caches })
    }

    /// Network output (the tensor reaching the Output node).
    pub fn predict(&self, x: &Tensor, mode: BnMode) -> Result<Tensor, KernelError> {
        let mut pass = self.forward(x, mode)?;
        Ok(pass.outputs.swap_remove(self.graph.output_index()))
    }

    /// Folds the batch statistics of a train-mode pass into the running stats.
    pub fn update_running_stats(&mut self, pass: &ForwardPass, batch: usize) {
        for (i, cache) in pass.caches.iter().enumerate() {
            if let Cache::Bn(c, Some((mean, var))) = cache {
                let mut st = self.bn_state(i);
                let count = batch * c.xhat.h() * c.xhat.w();
                ops::update_running_stats(&mut st, mean, var, count);
                self.running.insert(i, RunningStats { mean: st.running_mean, var: st.running_var });
            }
        }
    }

    /// Backpropagates gradient `seeds` given as `(node index, dL/d output)`.
    pub fn backward(&self, pass: &ForwardPass, seeds: Vec<(usize, Tensor)>) -> Result<ParamGrads, KernelError> {
        let g = &self.graph;
        let mut grads: Vec<Option<Tensor>> = vec![None; g.len()];
        for (i, t) in seeds {
            accumulate(&mut grads[i], t)?;
        }
        let mut pgrads: Vec<Tensor> = self.params.tensors.iter().map(|t| Tensor::zeros(t.dims())).collect();
        for i in (0..g.len()).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let preds = g.preds(i).to_vec();
            let x = |k: usize| &pass.outputs[preds[k]];
            let node = &g.nodes()[i];
            let input_grads: Vec<Tensor> = match (node.kind, self.slots[i]) {
                (OpKind::Input, _) => {
                    grads[i] = Some(dy);
                    continue;
                }
                (OpKind::Output, _) => vec![dy],
                (OpKind::Conv2d(_), Slots::Conv { w, b, geom }) => {
                    let cg = ops::conv2d_backward(x(0), &self.params.tensors[w], &dy, geom)?;
                    pgrads[w].add_assign(&cg.dw)?;
                    pgrads[b].data_mut().iter_mut().zip(&cg.db).for_each(|(a, v)| *a += v);
                    vec![cg.dx]
                }
                (OpKind::MaxPool(_), _) => {
                    let Cache::Argmax(arg) = &pass.caches[i] else { unreachable!() };
                    vec![ops::maxpool_backward(x(0).dims(), arg, &dy)]
                }
                (OpKind::AvgPool(p), _) => vec![ops::avgpool_backward(x(0).dims(), pool_geom(p), &dy)],
                (OpKind::GlobalAvgPool, _) => vec![ops::global_avgpool_backward(x(0).dims(), &dy)],
                (OpKind::BatchNorm, Slots::Bn { gamma, beta }) => {
                    let Cache::Bn(c, _) = &pass.caches[i] else { unreachable!() };
                    let bg = ops::batchnorm_backward(&dy, c, self.params.tensors[gamma].data());
                    pgrads[gamma].data_mut().iter_mut().zip(&bg.dgamma).for_each(|(a, v)| *a += v);
                    pgrads[beta].data_mut().iter_mut().zip(&bg.dbeta).for_each(|(a, v)| *a += v);
                    vec![bg.dx]
                }
                (OpKind::Activation(a), _) => vec![ops::activate_backward(a.function, x(0), &dy)],
                (OpKind::Add, _) => vec![dy; preds.len()],
                (OpKind::Mul, _) => vec![ops::mul(&dy, x(1))?, ops::mul(&dy, x(0))?],
                (OpKind::Concat, _) => {
                    let chans: Vec<usize> = (0..preds.len()).map(|k| x(k).c()).collect();
                    ops::concat_backward(&dy, &chans)
                }
                (OpKind::Upsample(p), _) => vec![ops::upsample_nearest_backward(x(0).dims(), p.factor as usize, &dy)],
                (OpKind::FullyConnected(_), Slots::Fc { w, b }) => {
                    let (dx, dw, db) = ops::fully_connected_backward(x(0), &self.params.tensors[w], &dy);
                    pgrads[w].add_assign(&dw)?;
                    pgrads[b].data_mut().iter_mut().zip(&db).for_each(|(a, v)| *a += v);
                    vec![dx]
                }
                (kind, _) => return Err(KernelError::Unsupported(format!("{} at `{}`", kind.name(), node.id))),
            };
            for (&p, dg) in preds.iter().zip(input_grads) {
                accumulate(&mut grads[p], dg)?;
            }
        }
        let input = grads[g.input_index()]
            .take()
            .unwrap_or_else(|| Tensor::zeros(pass.outputs[g.input_index()].dims()));
        Ok(ParamGrads { params: pgrads, input })
    }

    /// Parameters and running statistics as named tensors.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.names.iter().cloned().zip(self.params.tensors.iter().cloned()).collect();
        for (&i, r) in &self.running {
            let id = &self.graph.node(i).id;
            let c = r.mean.len();
            out.push((format!("{id}.running_mean"), Tensor::from_vec([1, c, 1, 1], r.mean.clone()).expect("channel vector")));
            out.push((format!("{id}.running_var"), Tensor::from_vec([1, c, 1, 1], r.var.clone()).expect("channel vector")));
        }
        out
    }

    /// Copies every parameter and running statistic whose name and shape
    /// also exist in `other`. Returns the number of tensors copied.
    pub fn copy_matching(&mut self, other: &Model) -> usize {
        let theirs: HashMap<String, Tensor> = other.state().into_iter().collect();
        let mut copied = 0;
        for (name, t) in self.params.names.iter().zip(self.params.tensors.iter_mut()) {
            if let Some(src) = theirs.get(name).filter(|s| s.dims() == t.dims()) {
                *t = src.clone();
                copied += 1;
            }
        }
        for (&i, r) in self.running.iter_mut() {
            let id = &self.graph.node(i).id;
            for (suffix, dst) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                if let Some(src) = theirs.get(&format!("{id}.{suffix}")).filter(|s| s.len() == dst.len()) {
                    dst.copy_from_slice(src.data());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Restores tensors produced by [`Model::state`]; every name must match.
    pub fn load_state(&mut self, entries: &[(String, Tensor)]) -> Result<(), KernelError> {
        let by_name: HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, t) in self.params.names.iter().zip(self.params.tensors.iter_mut()) {
            let src = by_name.get(name.as_str()).ok_or_else(|| KernelError::Checkpoint(format!("missing `{name}`")))?;
            src.expect_dims(t.dims(), name)?;
            *t = (*src).clone();
        }
        for (&i, r) in self.running.iter_mut() {
            let id = &self.graph.node(i).id;
            for (suffix, dst) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                let name = format!("{id}.{suffix}");
                let src = by_name.get(name.as_str()).ok_or_else(|| KernelError::Checkpoint(format!("missing `{name}`")))?;
                if src.len() != dst.len() {
                    return Err(KernelError::Checkpoint(format!("`{name}` has {} values, expected {}", src.len(), dst.len())));
                }
                dst.copy_from_slice(src.data());
            }
        }
        Ok(())
    }
}

fn pool_geom(p: crate::ir::PoolParams) -> PoolGeom {
    PoolGeom { kernel: p.kernel as usize, stride: p.stride as usize, pad: p.padding as usize }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) -> Result<(), KernelError> {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => {
            *slot = Some(t);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{model_zoo, ZooConfig, ZooModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Model {
        let mut cfg = ZooConfig::new(32);
        cfg.in_channels = 1;
        cfg.num_classes = 4;
        let g = model_zoo(ZooModel::ToyCnn, &cfg).unwrap();
        Model::new(g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn toy_forward_shapes() {
        let m = toy();
        let x = Tensor::randn([3, 1, 32, 32], &mut ChaCha8Rng::seed_from_u64(1));
        let y = m.predict(&x, BnMode::Train).unwrap();
        assert_eq!(y.dims(), [3, 4, 1, 1]);
    }

    #[test]
    fn state_round_trip() {
        let m = toy();
        let mut other = Model::new(m.graph().clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_ne!(other.params(), m.params());
        other.load_state(&m.state()).unwrap();
        assert_eq!(other.params(), m.params());
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([2, 1, 32, 32], &mut rng);
        let r = Tensor::randn([2, 4, 1, 1], &mut rng);
        let out = m.graph().output_index();
        let pass = m.forward(&x, BnMode::Eval).unwrap();
        let g = m.backward(&pass, vec![(out, r.clone())]).unwrap();
        let f = |x: &Tensor| m.predict(x, BnMode::Eval).unwrap().dot(&r);
        for &k in &[0usize, 100, 517, 2047] {
            let h = 1e-5;
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let ana = g.input.data()[k];
            assert!((num - ana).abs() <= 1e-6 * num.abs().max(1e-3), "{k}: {num} vs {ana}");
        }
    }
}
