//! Oracles shared by several integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use redistill::ir::{
    build_graph, downsampling_layers, infer_shapes, Activation, Conv2dParams, NetworkGraph, OpKind, OpNode, PoolParams, TensorShape,
};
use redistill::memory::{trace, weight_shapes};
use redistill::rewrite::{main_path_stride, verify_resolution};

/// Random valid DAG with at most `max_nodes` nodes including input and output.
pub fn random_dag(rng: &mut ChaCha8Rng, max_nodes: usize) -> NetworkGraph {
    let res = [8u64, 12, 16][rng.random_range(0..3)];
    let input = TensorShape::new(1, rng.random_range(1..4), res, res);
    let mut nodes = vec![OpNode::new("in", OpKind::Input, &[])];
    let mut shapes = vec![input];
    let body = rng.random_range(1..=max_nodes - 2);
    for k in 0..body {
        let id = format!("n{k}");
        let a = rng.random_range(0..shapes.len());
        let s = shapes[a];
        let src = nodes[a].id.clone();
        let pick = rng.random_range(0..10);
        let (kind, inputs, out) = match pick {
            0..=2 => {
                let stride = if s.h % 2 == 0 && rng.random_bool(0.3) { 2 } else { 1 };
                let out_c = rng.random_range(1..9);
                let grouped = s.c > 1 && s.c == out_c && rng.random_bool(0.3);
                let mut p = Conv2dParams::square(3, stride, s.c, out_c);
                if grouped {
                    p = p.grouped(s.c);
                }
                (OpKind::Conv2d(p), vec![src], TensorShape::new(1, out_c, s.h / stride, s.w / stride))
            }
            3 => (OpKind::BatchNorm, vec![src], s),
            4 => (OpKind::act(Activation::Relu), vec![src], s),
            5 if s.h % 2 == 0 => (OpKind::MaxPool(PoolParams { kernel: 2, stride: 2, padding: 0 }), vec![src], TensorShape::new(1, s.c, s.h / 2, s.w / 2)),
            6..=7 => {
                // Binary op with any earlier node of the same shape, possibly itself.
                let same: Vec<usize> = (0..shapes.len()).filter(|&j| shapes[j] == s).collect();
                let b = same[rng.random_range(0..same.len())];
                let kind = if pick == 6 { OpKind::Add } else { OpKind::Mul };
                (kind, vec![src, nodes[b].id.clone()], s)
            }
            8 => {
                let same: Vec<usize> = (0..shapes.len()).filter(|&j| shapes[j].h == s.h).collect();
                let b = same[rng.random_range(0..same.len())];
                (OpKind::Concat, vec![src, nodes[b].id.clone()], TensorShape::new(1, s.c + shapes[b].c, s.h, s.w))
            }
            _ => (OpKind::act(Activation::Sigmoid), vec![src], s),
        };
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        nodes.push(OpNode::new(id, kind, &refs));
        shapes.push(out);
    }
    let last = nodes.last().unwrap().id.clone();
    nodes.push(OpNode::new("out", OpKind::Output, &[&last]));
    build_graph(nodes, input).expect("generator emits valid graphs")
}

/// Executes the graph against an explicit allocator. Every op allocates its
/// output unless it writes in place into a fused conv buffer; grouped convs
/// also allocate one kernel buffer. A tensor is freed once no later op reads
/// it. Returns the largest footprint seen during any op.
pub fn simulate(graph: &NetworkGraph, fuse: bool) -> u64 {
    let shapes = infer_shapes(graph).unwrap();
    let nodes = graph.nodes();
    let pos: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let readers = |id: &str| nodes.iter().filter(|n| n.inputs.iter().any(|i| i == id)).count();

    // Buffer each node's value lives in.
    let mut home: Vec<usize> = (0..nodes.len()).collect();
    if fuse {
        for (i, n) in nodes.iter().enumerate() {
            if matches!(n.kind, OpKind::BatchNorm | OpKind::Activation(_)) {
                let p = pos[n.inputs[0].as_str()];
                if matches!(nodes[home[p]].kind, OpKind::Conv2d(_)) && readers(&nodes[p].id) == 1 {
                    home[i] = home[p];
                }
            }
        }
    }
    let buffer_bytes = |i: usize| shapes.get(&nodes[i].id).unwrap().bytes();
    let still_needed = |buf: usize, after: usize| {
        (after + 1..nodes.len()).any(|j| home[j] == j && nodes[j].inputs.iter().any(|inp| home[pos[inp.as_str()]] == buf))
    };

    let mut allocated: BTreeMap<usize, u64> = BTreeMap::new();
    let mut peak = 0;
    for (i, n) in nodes.iter().enumerate() {
        if home[i] != i {
            continue;
        }
        let out = if n.kind == OpKind::Output { 0 } else { buffer_bytes(i) };
        let scratch = match n.kind {
            OpKind::Conv2d(p) if p.groups > 1 => p.kernel_h * p.kernel_w * (p.in_c / p.groups) * 4,
            _ => 0,
        };
        let in_use: u64 = allocated.values().sum();
        peak = peak.max(in_use + out + scratch);
        allocated.insert(i, out);
        allocated.retain(|&buf, _| still_needed(buf, i));
    }
    peak
}

fn sorted_weights(g: &NetworkGraph) -> Vec<Vec<u64>> {
    let mut w = weight_shapes(g, &infer_shapes(g).unwrap());
    w.sort();
    w
}

pub fn strides(g: &NetworkGraph) -> Vec<u64> {
    let s = infer_shapes(g).unwrap();
    downsampling_layers(g, &s).iter().map(|id| g.get(id).unwrap().kind.stride().unwrap()).collect()
}

/// Every invariant a student must satisfy against its teacher; returns the broken ones.
pub fn pair_violations(teacher: &NetworkGraph, student: &NetworkGraph, multiplier: u64) -> Vec<&'static str> {
    let mut bad = Vec::new();
    if main_path_stride(student).unwrap() != main_path_stride(teacher).unwrap() {
        bad.push("stride product");
    }
    if !verify_resolution(teacher, student) {
        bad.push("resolution");
    }
    if sorted_weights(student) != sorted_weights(teacher) {
        bad.push("weight shapes");
    }
    if trace(student).unwrap().peak_bytes > trace(teacher).unwrap().peak_bytes {
        bad.push("peak");
    }
    if student.topo_order() != teacher.topo_order() {
        bad.push("node order");
    }
    if strides(student).first() != strides(teacher).first().map(|s| s * multiplier).as_ref() {
        bad.push("first stride");
    }
    bad
}
