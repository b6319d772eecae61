use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use super::{IrError, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv2dParams {
    pub kernel_h: u64,
    pub kernel_w: u64,
    pub stride: u64,
    pub padding: u64,
    pub in_c: u64,
    pub out_c: u64,
    #[serde(default = "one")]
    pub groups: u64,
}

fn one() -> u64 {
    1
}

impl Conv2dParams {
    /// Square kernel with "same"-style padding `k/2`.
    pub fn square(kernel: u64, stride: u64, in_c: u64, out_c: u64) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding: kernel / 2,
            in_c,
            out_c,
            groups: 1,
        }
    }

    pub fn grouped(self, groups: u64) -> Self {
        Self { groups, ..self }
    }

    pub fn is_grouped(&self) -> bool {
        self.groups > 1
    }

    /// Weight tensor dims `[out_c, in_c/groups, kh, kw]`.
    pub fn weight_dims(&self) -> [u64; 4] {
        [self.out_c, self.in_c / self.groups, self.kernel_h, self.kernel_w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolParams {
    pub kernel: u64,
    pub stride: u64,
    #[serde(default)]
    pub padding: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Relu6,
    Sigmoid,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationParams {
    pub function: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsampleParams {
    pub factor: u64,
    #[serde(default)]
    pub mode: UpsampleMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcParams {
    pub in_features: u64,
    pub out_features: u64,
}

/// Operator vocabulary. `Mul` is the elementwise product used by gated adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum OpKind {
    Input,
    Output,
    Conv2d(Conv2dParams),
    MaxPool(PoolParams),
    AvgPool(PoolParams),
    GlobalAvgPool,
    BatchNorm,
    Activation(ActivationParams),
    Add,
    Mul,
    Concat,
    Upsample(UpsampleParams),
    FullyConnected(FcParams),
}

impl OpKind {
    pub fn act(function: Activation) -> Self {
        OpKind::Activation(ActivationParams { function })
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Output => "output",
            OpKind::Conv2d(_) => "conv2d",
            OpKind::MaxPool(_) => "max_pool",
            OpKind::AvgPool(_) => "avg_pool",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Activation(_) => "activation",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::Upsample(_) => "upsample",
            OpKind::FullyConnected(_) => "fully_connected",
        }
    }

    /// Spatial stride of windowed ops, `None` for everything else.
    pub fn stride(&self) -> Option<u64> {
        match self {
            OpKind::Conv2d(p) => Some(p.stride),
            OpKind::MaxPool(p) | OpKind::AvgPool(p) => Some(p.stride),
            _ => None,
        }
    }

    /// Copy of this op with a new stride; non-windowed ops are returned unchanged.
    pub fn with_stride(&self, stride: u64) -> OpKind {
        match *self {
            OpKind::Conv2d(p) => OpKind::Conv2d(Conv2dParams { stride, ..p }),
            OpKind::MaxPool(p) => OpKind::MaxPool(PoolParams { stride, ..p }),
            OpKind::AvgPool(p) => OpKind::AvgPool(PoolParams { stride, ..p }),
            other => other,
        }
    }

    pub fn upsample_factor(&self) -> Option<u64> {
        match self {
            OpKind::Upsample(p) => Some(p.factor),
            _ => None,
        }
    }

    fn arity_ok(&self, n: usize) -> (bool, &'static str) {
        match self {
            OpKind::Input => (n == 0, "0"),
            OpKind::Add | OpKind::Mul => (n == 2, "2"),
            OpKind::Concat => (n >= 2, ">= 2"),
            _ => (n == 1, "1"),
        }
    }

    /// Elementwise ops a deployment runtime folds into the preceding convolution.
    pub fn is_fusable_epilogue(&self) -> bool {
        matches!(self, OpKind::BatchNorm | OpKind::Activation(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpNode {
    pub id: String,
    pub kind: OpKind,
    pub inputs: Vec<String>,
    pub tags: BTreeSet<String>,
}

impl OpNode {
    pub fn new(id: impl Into<String>, kind: OpKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            tags: BTreeSet::new(),
        }
    }

    pub fn tagged(mut self, tag: impl Into<String>) -> Self {
        self.tags.insert(tag.into());
        self
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }
}

/// Validated, immutable DAG of operator nodes stored in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    input_shape: TensorShape,
    nodes: Vec<OpNode>,
    index: HashMap<String, usize>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    input: usize,
    output: usize,
}

/// Validates `nodes` and orders them topologically.
///
/// Among ready nodes the one listed first wins, so an already sorted list
/// keeps its order.
pub fn build_graph(nodes: Vec<OpNode>, input_shape: TensorShape) -> Result<NetworkGraph, IrError> {
    if nodes.is_empty() {
        return Err(IrError::EmptyGraph);
    }
    if !input_shape.is_valid() {
        return Err(IrError::NonPositiveDim {
            node: "<input_shape>".into(),
            detail: format!("invalid input shape {input_shape}"),
        });
    }

    let mut index = HashMap::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        if index.insert(node.id.clone(), i).is_some() {
            return Err(IrError::DuplicateId(node.id.clone()));
        }
    }

    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut preds = vec![Vec::new(); nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        let (ok, expected) = node.kind.arity_ok(node.inputs.len());
        if !ok {
            return Err(IrError::ArityMismatch {
                node: node.id.clone(),
                expected,
                got: node.inputs.len(),
            });
        }
        if let OpKind::Conv2d(p) = node.kind {
            if p.groups == 0 || p.in_c % p.groups != 0 || p.out_c % p.groups != 0 {
                return Err(IrError::ArityMismatch {
                    node: node.id.clone(),
                    expected: "in_c and out_c divisible by groups",
                    got: p.groups as usize,
                });
            }
        }
        match node.kind {
            OpKind::Input => inputs.push(i),
            OpKind::Output => outputs.push(i),
            _ => {}
        }
        for inp in &node.inputs {
            let &j = index.get(inp).ok_or_else(|| IrError::DanglingInput {
                node: node.id.clone(),
                input: inp.clone(),
            })?;
            preds[i].push(j);
        }
    }
    let input = match inputs.as_slice() {
        [i] => *i,
        _ => return Err(IrError::InputCount(inputs.len())),
    };
    let output = match outputs.as_slice() {
        [o] => *o,
        _ => return Err(IrError::OutputCount(outputs.len())),
    };
    if nodes.iter().any(|n| n.inputs.iter().any(|i| *i == nodes[output].id)) {
        return Err(IrError::ArityMismatch {
            node: nodes[output].id.clone(),
            expected: "no consumers of the output node",
            got: 1,
        });
    }

    // Kahn's algorithm keyed by original position.
    let mut indegree: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut succs_orig = vec![Vec::new(); nodes.len()];
    for (i, ps) in preds.iter().enumerate() {
        for &p in ps {
            succs_orig[p].push(i);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = indegree
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| Reverse(i))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &s in &succs_orig[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).find(|&i| indegree[i] > 0).unwrap();
        return Err(IrError::CycleDetected(nodes[stuck].id.clone()));
    }

    let mut position = vec![0usize; nodes.len()];
    for (pos, &orig) in order.iter().enumerate() {
        position[orig] = pos;
    }
    let mut slots: Vec<Option<OpNode>> = nodes.into_iter().map(Some).collect();
    let sorted: Vec<OpNode> = order.iter().map(|&o| slots[o].take().unwrap()).collect();
    let preds: Vec<Vec<usize>> = order
        .iter()
        .map(|&o| preds[o].iter().map(|&p| position[p]).collect())
        .collect();
    let mut succs = vec![Vec::new(); sorted.len()];
    for (i, ps) in preds.iter().enumerate() {
        for &p in ps {
            if !succs[p].contains(&i) {
                succs[p].push(i);
            }
        }
    }
    let index = sorted.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
    let graph = NetworkGraph {
        input_shape,
        nodes: sorted,
        index,
        preds,
        succs,
        input: position[input],
        output: position[output],
    };

    // Reachability from the single Input node.
    let mut reached = vec![false; graph.len()];
    reached[graph.input] = true;
    for i in 0..graph.len() {
        if reached[i] {
            for &s in &graph.succs[i] {
                reached[s] = true;
            }
        }
    }
    if let Some(i) = reached.iter().position(|r| !r) {
        return Err(IrError::Unreachable(graph.nodes[i].id.clone()));
    }
    Ok(graph)
}

impl NetworkGraph {
    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    /// Nodes in execution (topological) order.
    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, idx: usize) -> &OpNode {
        &self.nodes[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&OpNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    /// Predecessor positions in input order (duplicates preserved).
    pub fn preds(&self, idx: usize) -> &[usize] {
        &self.preds[idx]
    }

    /// Distinct consumer positions.
    pub fn succs(&self, idx: usize) -> &[usize] {
        &self.succs[idx]
    }

    pub fn input_index(&self) -> usize {
        self.input
    }

    pub fn output_index(&self) -> usize {
        self.output
    }

    pub fn topo_order(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.id.as_str()).collect()
    }

    pub fn into_nodes(self) -> Vec<OpNode> {
        self.nodes
    }

    /// Rebuilds the graph with the same structure and new op kinds.
    pub fn map_kinds(&self, mut f: impl FnMut(usize, &OpNode) -> OpKind) -> Result<NetworkGraph, IrError> {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OpNode { kind: f(i, n), ..n.clone() })
            .collect();
        build_graph(nodes, self.input_shape)
    }

    pub fn with_input_shape(&self, input_shape: TensorShape) -> Result<NetworkGraph, IrError> {
        build_graph(self.nodes.clone(), input_shape)
    }
}
