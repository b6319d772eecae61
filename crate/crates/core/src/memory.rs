//! Theoretical peak activation memory.
//!
//! Every executed op holds its input tensors, its output tensor and, for
//! grouped convolutions, one group's single-channel kernel as a working
//! buffer. Tensors produced earlier that still have pending consumers
//! (residual and skip branches) stay resident and are charged to every op
//! executed in between. Weights are not counted.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{infer_shapes, IrError, NetworkGraph, OpKind, OpNode, ShapeTable, TensorShape};

pub const MIB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("no shape recorded for `{0}`")]
    MissingShape(String),
    #[error("unsupported report format `{0}` (expected csv or json)")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccountingOptions {
    /// Fold BatchNorm/activation chains into the convolution that feeds
    /// them, the way deployment runtimes execute them.
    pub fuse_bn_act: bool,
}

impl Default for AccountingOptions {
    fn default() -> Self {
        Self { fuse_bn_act: true }
    }
}

impl AccountingOptions {
    pub fn separate() -> Self {
        Self { fuse_bn_act: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpMemory {
    pub input_bytes: u64,
    pub output_bytes: u64,
    pub buffer_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub node_id: String,
    pub kind: String,
    pub input_bytes: u64,
    pub output_bytes: u64,
    pub buffer_bytes: u64,
    pub live_residual_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryTrace {
    pub records: Vec<MemoryRecord>,
    pub peak_bytes: u64,
    pub peak_node_id: String,
}

fn group_buffer(kind: &OpKind, dtype_bytes: u64) -> u64 {
    match kind {
        OpKind::Conv2d(p) if p.is_grouped() => p.kernel_h * p.kernel_w * (p.in_c / p.groups) * dtype_bytes,
        _ => 0,
    }
}

/// Bytes an op touches in isolation. Inputs are summed once per distinct
/// producer; `Input` has no inputs and `Output` allocates nothing.
pub fn op_memory(node: &OpNode, shapes: &ShapeTable) -> Result<OpMemory, MemoryError> {
    let shape = |id: &str| shapes.get(id).ok_or_else(|| MemoryError::MissingShape(id.to_string()));
    let out = shape(&node.id)?;
    let distinct: BTreeSet<&str> = node.inputs.iter().map(String::as_str).collect();
    let mut input_bytes = 0;
    for id in distinct {
        input_bytes += shape(id)?.bytes();
    }
    let output_bytes = match node.kind {
        OpKind::Output => 0,
        _ => out.bytes(),
    };
    Ok(OpMemory { input_bytes, output_bytes, buffer_bytes: group_buffer(&node.kind, out.dtype_bytes) })
}

/// Position of the node whose buffer each node's output lives in.
fn fusion_roots(graph: &NetworkGraph, options: &AccountingOptions) -> Vec<usize> {
    let mut root: Vec<usize> = (0..graph.len()).collect();
    if !options.fuse_bn_act {
        return root;
    }
    for i in 0..graph.len() {
        if !graph.node(i).kind.is_fusable_epilogue() {
            continue;
        }
        let p = graph.preds(i)[0];
        let producer_is_conv = matches!(graph.node(root[p]).kind, OpKind::Conv2d(_));
        if producer_is_conv && graph.succs(p).len() == 1 {
            root[i] = root[p];
        }
    }
    root
}

pub fn trace(graph: &NetworkGraph) -> Result<MemoryTrace, MemoryError> {
    trace_with(graph, &AccountingOptions::default())
}

pub fn trace_with(graph: &NetworkGraph, options: &AccountingOptions) -> Result<MemoryTrace, MemoryError> {
    let shapes = infer_shapes(graph)?;
    trace_shapes(graph, &shapes, options)
}

pub fn trace_shapes(graph: &NetworkGraph, shapes: &ShapeTable, options: &AccountingOptions) -> Result<MemoryTrace, MemoryError> {
    let root = fusion_roots(graph, options);
    let executed: Vec<usize> = (0..graph.len()).filter(|&i| root[i] == i).collect();
    let tensor_inputs = |i: usize| -> Vec<usize> {
        let set: BTreeSet<usize> = graph.preds(i).iter().map(|&p| root[p]).collect();
        set.into_iter().collect()
    };

    let mut pending = vec![0usize; graph.len()];
    for &i in &executed {
        for t in tensor_inputs(i) {
            pending[t] += 1;
        }
    }

    let bytes: Vec<u64> = (0..graph.len()).map(|i| shapes.at(i).bytes()).collect();
    let mut live = vec![false; graph.len()];
    let mut live_bytes = 0u64;
    let mut records = Vec::with_capacity(executed.len());
    let mut peak: Option<(u64, usize)> = None;

    for &i in &executed {
        let node = graph.node(i);
        let inputs = tensor_inputs(i);
        let input_bytes: u64 = inputs.iter().map(|&t| bytes[t]).sum();
        let output_bytes = if node.kind == OpKind::Output { 0 } else { bytes[i] };
        let buffer_bytes = group_buffer(&node.kind, shapes.at(i).dtype_bytes);
        let live_residual_bytes = live_bytes - input_bytes;
        let total_bytes = input_bytes + output_bytes + buffer_bytes + live_residual_bytes;
        if peak.is_none_or(|(b, _)| total_bytes > b) {
            peak = Some((total_bytes, records.len()));
        }
        records.push(MemoryRecord {
            node_id: node.id.clone(),
            kind: node.kind.name().to_string(),
            input_bytes,
            output_bytes,
            buffer_bytes,
            live_residual_bytes,
            total_bytes,
        });

        for t in inputs {
            pending[t] -= 1;
            if pending[t] == 0 {
                live[t] = false;
                live_bytes -= bytes[t];
            }
        }
        if pending[i] > 0 {
            live[i] = true;
            live_bytes += bytes[i];
        }
    }

    let (peak_bytes, at) = peak.expect("graphs have at least an input and an output");
    Ok(MemoryTrace { peak_node_id: records[at].node_id.clone(), peak_bytes, records })
}

impl MemoryTrace {
    pub fn peak_mb(&self) -> f64 {
        self.peak_bytes as f64 / MIB
    }

    pub fn record(&self, node_id: &str) -> Option<&MemoryRecord> {
        self.records.iter().find(|r| r.node_id == node_id)
    }
}

/// Peak memory summary. `MB` means 2^20 bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub model: String,
    pub input_shape: TensorShape,
    pub dtype_bytes: u64,
    pub peak_bytes: u64,
    pub peak_mb: f64,
    pub peak_node_id: String,
}

impl PeakReport {
    pub fn new(model: impl Into<String>, input_shape: TensorShape, trace: &MemoryTrace) -> Self {
        Self {
            model: model.into(),
            input_shape,
            dtype_bytes: input_shape.dtype_bytes,
            peak_bytes: trace.peak_bytes,
            peak_mb: trace.peak_mb(),
            peak_node_id: trace.peak_node_id.clone(),
        }
    }

    /// `peak_mb` rounded to two decimals.
    pub fn peak_mb_rounded(&self) -> f64 {
        (self.peak_mb * 100.0).round() / 100.0
    }
}

impl fmt::Display for PeakReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} MB", self.peak_mb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = MemoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(MemoryError::UnsupportedFormat(other.to_string())),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "node_id",
    "kind",
    "input_bytes",
    "output_bytes",
    "buffer_bytes",
    "live_residual_bytes",
    "total_bytes",
];

/// Per-layer footprint, one row per executed node.
pub fn export_report(trace: &MemoryTrace, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&trace.records).expect("records serialize");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(REPORT_COLUMNS).expect("in-memory csv");
            for r in &trace.records {
                w.write_record([
                    r.node_id.clone(),
                    r.kind.clone(),
                    r.input_bytes.to_string(),
                    r.output_bytes.to_string(),
                    r.buffer_bytes.to_string(),
                    r.live_residual_bytes.to_string(),
                    r.total_bytes.to_string(),
                ])
                .expect("in-memory csv");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
        }
    }
}

/// Shapes of every learnable tensor in execution order.
pub fn weight_shapes(graph: &NetworkGraph, shapes: &ShapeTable) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        match node.kind {
            OpKind::Conv2d(p) => {
                out.push(p.weight_dims().to_vec());
                out.push(vec![p.out_c]);
            }
            OpKind::BatchNorm => {
                let c = shapes.at(i).c;
                out.push(vec![c]);
                out.push(vec![c]);
            }
            OpKind::FullyConnected(p) => {
                out.push(vec![p.out_features, p.in_features]);
                out.push(vec![p.out_features]);
            }
            _ => {}
        }
    }
    out
}

pub fn parameter_count(graph: &NetworkGraph, shapes: &ShapeTable) -> u64 {
    weight_shapes(graph, shapes).iter().map(|s| s.iter().product::<u64>()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_graph, Activation, Conv2dParams, OpNode};

    fn single_op(kind: OpKind, input: TensorShape) -> (NetworkGraph, ShapeTable) {
        let g = build_graph(
            vec![
                OpNode::new("in", OpKind::Input, &[]),
                OpNode::new("op", kind, &["in"]),
                OpNode::new("out", OpKind::Output, &["op"]),
            ],
            input,
        )
        .unwrap();
        let s = infer_shapes(&g).unwrap();
        (g, s)
    }

    #[test]
    fn conv_stem_bytes() {
        let (g, s) = single_op(OpKind::Conv2d(Conv2dParams::square(7, 2, 3, 64)), TensorShape::new(1, 3, 224, 224));
        let m = op_memory(g.get("op").unwrap(), &s).unwrap();
        assert_eq!(m, OpMemory { input_bytes: 602_112, output_bytes: 3_211_264, buffer_bytes: 0 });
    }

    #[test]
    fn depthwise_buffer() {
        let (g, s) = single_op(
            OpKind::Conv2d(Conv2dParams::square(3, 1, 96, 96).grouped(96)),
            TensorShape::new(1, 96, 14, 14),
        );
        assert_eq!(op_memory(g.get("op").unwrap(), &s).unwrap().buffer_bytes, 36);
    }

    #[test]
    fn unit_activation_chain() {
        let (g, s) = single_op(OpKind::act(Activation::Relu), TensorShape::new(1, 1, 1, 1));
        assert_eq!(
            op_memory(g.get("op").unwrap(), &s).unwrap(),
            OpMemory { input_bytes: 4, output_bytes: 4, buffer_bytes: 0 }
        );
        let t = trace(&g).unwrap();
        assert_eq!(t.peak_bytes, 8);
        assert_eq!(t.peak_node_id, "op");
        assert_eq!(t.records.len(), 3);
    }

    #[test]
    fn missing_shape() {
        let (g, _) = single_op(OpKind::act(Activation::Relu), TensorShape::new(1, 1, 1, 1));
        let other = single_op(OpKind::BatchNorm, TensorShape::new(1, 1, 1, 1)).0;
        let s = infer_shapes(&other).unwrap();
        let mut node = g.get("op").unwrap().clone();
        node.id = "ghost".into();
        assert_eq!(op_memory(&node, &s), Err(MemoryError::MissingShape("ghost".into())));
    }

    #[test]
    fn residual_stays_live_until_add() {
        let c = || OpKind::Conv2d(Conv2dParams::square(3, 1, 1, 1));
        let g = build_graph(
            vec![
                OpNode::new("in", OpKind::Input, &[]),
                OpNode::new("a", c(), &["in"]),
                OpNode::new("b", c(), &["a"]),
                OpNode::new("c", c(), &["b"]),
                OpNode::new("add", OpKind::Add, &["c", "a"]),
                OpNode::new("out", OpKind::Output, &["add"]),
            ],
            TensorShape::new(1, 1, 2, 2),
        )
        .unwrap();
        let t = trace(&g).unwrap();
        assert_eq!(t.record("b").unwrap().live_residual_bytes, 0);
        assert_eq!(t.record("c").unwrap().live_residual_bytes, 16);
        assert_eq!(t.record("add").unwrap().total_bytes, 48);
        assert_eq!(t.peak_node_id, "c");
    }

    #[test]
    fn fusion_folds_bn_act_into_conv() {
        let g = build_graph(
            vec![
                OpNode::new("in", OpKind::Input, &[]),
                OpNode::new("conv", OpKind::Conv2d(Conv2dParams::square(1, 1, 1, 2)), &["in"]),
                OpNode::new("bn", OpKind::BatchNorm, &["conv"]),
                OpNode::new("act", OpKind::act(Activation::Relu), &["bn"]),
                OpNode::new("out", OpKind::Output, &["act"]),
            ],
            TensorShape::new(1, 1, 2, 2),
        )
        .unwrap();
        let fused = trace(&g).unwrap();
        assert_eq!(fused.records.iter().map(|r| r.node_id.as_str()).collect::<Vec<_>>(), ["in", "conv", "out"]);
        assert_eq!(fused.peak_bytes, 48);
        let separate = trace_with(&g, &AccountingOptions::separate()).unwrap();
        assert_eq!(separate.records.len(), 5);
        assert_eq!(separate.peak_bytes, 64);
    }

    #[test]
    fn report_formats() {
        let (g, _) = single_op(OpKind::act(Activation::Relu), TensorShape::new(1, 1, 1, 1));
        let t = trace(&g).unwrap();
        let csv = export_report(&t, ReportFormat::Csv);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_COLUMNS.join(","));
        assert_eq!(lines.len(), 1 + t.records.len());
        assert_eq!(lines[2], "op,activation,4,4,0,0,8");
        let json: Vec<MemoryRecord> = serde_json::from_str(&export_report(&t, ReportFormat::Json)).unwrap();
        assert_eq!(json.len(), t.records.len());
        assert!(matches!("xml".parse::<ReportFormat>(), Err(MemoryError::UnsupportedFormat(_))));
    }
}
