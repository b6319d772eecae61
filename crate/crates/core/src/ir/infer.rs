use std::collections::BTreeMap;

use super::shape::window_out;
use super::{IrError, NetworkGraph, OpKind, TensorShape};

/// Output shape of every node, addressable by position or id.
#[derive(Debug, Clone)]
pub struct ShapeTable {
    by_position: Vec<TensorShape>,
    by_id: BTreeMap<String, TensorShape>,
}

impl PartialEq for ShapeTable {
    fn eq(&self, other: &Self) -> bool {
        self.by_id == other.by_id
    }
}

impl ShapeTable {
    pub fn at(&self, position: usize) -> TensorShape {
        self.by_position[position]
    }

    pub fn get(&self, id: &str) -> Option<TensorShape> {
        self.by_id.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.by_position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_position.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorShape)> {
        self.by_id.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn windowed(id: &str, input: TensorShape, kernel: (u64, u64), stride: u64, padding: u64) -> Result<TensorShape, IrError> {
    let h = window_out(input.h, kernel.0, stride, padding);
    let w = window_out(input.w, kernel.1, stride, padding);
    match (h, w) {
        (Some(h), Some(w)) => Ok(input.with_spatial(h, w)),
        _ => Err(IrError::NonPositiveDim {
            node: id.to_string(),
            detail: format!(
                "kernel {}x{} stride {} padding {} does not fit input {}",
                kernel.0, kernel.1, stride, padding, input
            ),
        }),
    }
}

fn mismatch(id: &str, detail: String) -> IrError {
    IrError::ShapeMismatch { node: id.to_string(), detail }
}

/// Output shape of one op given its input shapes.
pub fn op_output_shape(id: &str, kind: &OpKind, inputs: &[TensorShape], graph_input: TensorShape) -> Result<TensorShape, IrError> {
    let first = inputs.first().copied();
    let shape = match kind {
        OpKind::Input => graph_input,
        OpKind::Output | OpKind::BatchNorm | OpKind::Activation(_) => first.unwrap(),
        OpKind::Conv2d(p) => {
            let x = first.unwrap();
            if x.c != p.in_c {
                return Err(mismatch(id, format!("conv expects {} input channels, got {}", p.in_c, x.c)));
            }
            windowed(id, x, (p.kernel_h, p.kernel_w), p.stride, p.padding)?.with_channels(p.out_c)
        }
        OpKind::MaxPool(p) | OpKind::AvgPool(p) => windowed(id, first.unwrap(), (p.kernel, p.kernel), p.stride, p.padding)?,
        OpKind::GlobalAvgPool => first.unwrap().with_spatial(1, 1),
        OpKind::Add | OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a != b {
                return Err(mismatch(id, format!("elementwise inputs differ: {a} vs {b}")));
            }
            a
        }
        OpKind::Concat => {
            let x = first.unwrap();
            let mut c = 0;
            for s in inputs {
                if (s.n, s.h, s.w, s.dtype_bytes) != (x.n, x.h, x.w, x.dtype_bytes) {
                    return Err(mismatch(id, format!("concat inputs differ outside channels: {x} vs {s}")));
                }
                c += s.c;
            }
            x.with_channels(c)
        }
        OpKind::Upsample(p) => {
            if p.factor == 0 {
                return Err(IrError::NonPositiveDim { node: id.to_string(), detail: "upsample factor 0".into() });
            }
            let x = first.unwrap();
            x.with_spatial(x.h * p.factor, x.w * p.factor)
        }
        OpKind::FullyConnected(p) => {
            let x = first.unwrap();
            if x.c * x.h * x.w != p.in_features {
                return Err(mismatch(
                    id,
                    format!("fully connected expects {} features, got {}", p.in_features, x.c * x.h * x.w),
                ));
            }
            x.with_channels(p.out_features).with_spatial(1, 1)
        }
    };
    if !shape.is_valid() {
        return Err(IrError::NonPositiveDim { node: id.to_string(), detail: format!("invalid shape {shape}") });
    }
    Ok(shape)
}

pub fn infer_shapes(graph: &NetworkGraph) -> Result<ShapeTable, IrError> {
    let mut by_position = Vec::with_capacity(graph.len());
    for (i, node) in graph.nodes().iter().enumerate() {
        let inputs: Vec<TensorShape> = graph.preds(i).iter().map(|&p| by_position[p]).collect();
        by_position.push(op_output_shape(&node.id, &node.kind, &inputs, graph.input_shape())?);
    }
    let by_id = graph
        .nodes()
        .iter()
        .zip(&by_position)
        .map(|(n, s)| (n.id.clone(), *s))
        .collect();
    Ok(ShapeTable { by_position, by_id })
}

/// Longest Input→Output path by node count; ties go to the earlier-listed input.
///
/// Residual shortcuts and U-Net skips are shorter than the branch they
/// bypass, so this is the backbone the downsampling analysis walks.
pub fn main_path(graph: &NetworkGraph) -> Vec<usize> {
    let mut depth = vec![0usize; graph.len()];
    let mut back = vec![usize::MAX; graph.len()];
    for i in 0..graph.len() {
        for &p in graph.preds(i) {
            if back[i] == usize::MAX || depth[p] + 1 > depth[i] {
                depth[i] = depth[p] + 1;
                back[i] = p;
            }
        }
    }
    let mut path = vec![graph.output_index()];
    let mut cur = graph.output_index();
    while back[cur] != usize::MAX {
        cur = back[cur];
        path.push(cur);
    }
    path.reverse();
    path
}

/// Main-path conv/pool nodes with stride > 1 that shrink the spatial extent, in execution order.
pub fn downsampling_layers(graph: &NetworkGraph, shapes: &ShapeTable) -> Vec<String> {
    downsampling_positions(graph, shapes)
        .into_iter()
        .map(|i| graph.node(i).id.clone())
        .collect()
}

pub(crate) fn downsampling_positions(graph: &NetworkGraph, shapes: &ShapeTable) -> Vec<usize> {
    main_path(graph)
        .into_iter()
        .filter(|&i| is_downsampling(graph, shapes, i))
        .collect()
}

pub(crate) fn is_downsampling(graph: &NetworkGraph, shapes: &ShapeTable, i: usize) -> bool {
    let node = graph.node(i);
    match node.kind.stride() {
        Some(s) if s > 1 => {
            let input = shapes.at(graph.preds(i)[0]);
            let out = shapes.at(i);
            out.h < input.h || out.w < input.w
        }
        _ => false,
    }
}

/// Main-path upsample nodes with factor > 1, in execution order.
pub fn upsampling_layers(graph: &NetworkGraph) -> Vec<String> {
    upsampling_positions(graph)
        .into_iter()
        .map(|i| graph.node(i).id.clone())
        .collect()
}

pub(crate) fn upsampling_positions(graph: &NetworkGraph) -> Vec<usize> {
    main_path(graph)
        .into_iter()
        .filter(|&i| matches!(graph.node(i).kind.upsample_factor(), Some(f) if f > 1))
        .collect()
}

/// Spatial dims entering the classifier head: the input of the first
/// global average pool, or the Output's shape when there is none.
pub fn head_resolution(graph: &NetworkGraph, shapes: &ShapeTable) -> (u64, u64) {
    graph
        .nodes()
        .iter()
        .position(|n| n.kind == OpKind::GlobalAvgPool)
        .map(|gap| shapes.at(graph.preds(gap)[0]).spatial())
        .unwrap_or_else(|| shapes.at(graph.output_index()).spatial())
}

#[cfg(test)]
mod tests {
    use super::super::{build_graph, Conv2dParams, OpNode, PoolParams};
    use super::*;

    fn chain(kinds: Vec<OpKind>, input: TensorShape) -> NetworkGraph {
        let mut nodes = vec![OpNode::new("in", OpKind::Input, &[])];
        let mut prev = "in".to_string();
        for (i, k) in kinds.into_iter().enumerate() {
            let id = format!("n{i}");
            nodes.push(OpNode::new(id.clone(), k, &[prev.as_str()]));
            prev = id;
        }
        nodes.push(OpNode::new("out", OpKind::Output, &[prev.as_str()]));
        build_graph(nodes, input).unwrap()
    }

    #[test]
    fn conv_and_pool() {
        let conv = OpKind::Conv2d(Conv2dParams::square(7, 2, 3, 64));
        let pool = OpKind::MaxPool(PoolParams { kernel: 3, stride: 2, padding: 1 });
        let g = chain(vec![conv, pool], TensorShape::new(1, 3, 224, 224));
        let s = infer_shapes(&g).unwrap();
        assert_eq!(s.get("n0"), Some(TensorShape::new(1, 64, 112, 112)));
        assert_eq!(s.get("n1"), Some(TensorShape::new(1, 64, 56, 56)));
        assert_eq!(downsampling_layers(&g, &s), vec!["n0", "n1"]);
    }

    #[test]
    fn huge_stride_on_tiny_input_floors_to_one() {
        let conv = OpKind::Conv2d(Conv2dParams { stride: 8, ..Conv2dParams::square(7, 1, 3, 5) });
        let g = chain(vec![conv], TensorShape::new(1, 3, 4, 4));
        assert_eq!(infer_shapes(&g).unwrap().get("n0"), Some(TensorShape::new(1, 5, 1, 1)));
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        let conv = OpKind::Conv2d(Conv2dParams { padding: 0, ..Conv2dParams::square(7, 1, 3, 5) });
        let g = chain(vec![conv], TensorShape::new(1, 3, 4, 4));
        assert!(matches!(infer_shapes(&g), Err(IrError::NonPositiveDim { ref node, .. }) if node == "n0"));
    }

    #[test]
    fn add_mismatch() {
        let g = build_graph(
            vec![
                OpNode::new("in", OpKind::Input, &[]),
                OpNode::new("c", OpKind::Conv2d(Conv2dParams::square(3, 2, 2, 2)), &["in"]),
                OpNode::new("a", OpKind::Add, &["in", "c"]),
                OpNode::new("out", OpKind::Output, &["a"]),
            ],
            TensorShape::new(1, 2, 8, 8),
        )
        .unwrap();
        assert!(matches!(infer_shapes(&g), Err(IrError::ShapeMismatch { ref node, .. }) if node == "a"));
    }

    #[test]
    fn stride_one_chain_has_no_downsampling() {
        let conv = OpKind::Conv2d(Conv2dParams::square(3, 1, 3, 3));
        let g = chain(vec![conv, OpKind::GlobalAvgPool], TensorShape::new(1, 3, 8, 8));
        let s = infer_shapes(&g).unwrap();
        assert!(downsampling_layers(&g, &s).is_empty());
        assert_eq!(head_resolution(&g, &s), (8, 8));
    }
}
