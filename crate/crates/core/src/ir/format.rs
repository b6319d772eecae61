//! JSON document form of a graph.
//!
//! ```json
//! {
//!   "ir_version": 1,
//!   "input_shape": {"n": 1, "c": 3, "h": 224, "w": 224, "dtype_bytes": 4},
//!   "nodes": [
//!     {"id": "input", "kind": "input", "inputs": []},
//!     {"id": "conv1", "kind": "conv2d",
//!      "params": {"kernel_h": 7, "kernel_w": 7, "stride": 2, "padding": 3,
//!                 "in_c": 3, "out_c": 64, "groups": 1},
//!      "inputs": ["input"], "tags": ["downsample"]},
//!     {"id": "output", "kind": "output", "inputs": ["conv1"]}
//!   ]
//! }
//! ```
//!
//! Unknown fields are rejected at every level. Kinds without parameters
//! (`input`, `output`, `global_avg_pool`, `batch_norm`, `add`, `mul`,
//! `concat`) omit `params`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{build_graph, IrError, NetworkGraph, OpKind, OpNode, TensorShape};

pub const IR_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    ir_version: u32,
    input_shape: TensorShape,
    nodes: Vec<NodeDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<Value>,
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tags: Vec<String>,
}

impl NodeDoc {
    fn from_node(node: &OpNode) -> Self {
        let mut v = serde_json::to_value(node.kind).expect("op kinds always serialize");
        let obj = v.as_object_mut().expect("adjacently tagged enum");
        let kind = obj["kind"].as_str().unwrap().to_string();
        Self {
            id: node.id.clone(),
            kind,
            params: obj.remove("params"),
            inputs: node.inputs.clone(),
            tags: node.tags.iter().cloned().collect(),
        }
    }

    fn into_node(self) -> Result<OpNode, IrError> {
        let tagged = match self.params {
            Some(p) => json!({ "kind": self.kind, "params": p }),
            None => json!({ "kind": self.kind }),
        };
        let kind: OpKind = serde_json::from_value(tagged).map_err(|e| IrError::InvalidNode {
            node: self.id.clone(),
            detail: e.to_string(),
        })?;
        Ok(OpNode { id: self.id, kind, inputs: self.inputs, tags: self.tags.into_iter().collect() })
    }
}

pub fn to_json(graph: &NetworkGraph) -> String {
    let doc = GraphDoc {
        ir_version: IR_VERSION,
        input_shape: graph.input_shape(),
        nodes: graph.nodes().iter().map(NodeDoc::from_node).collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("graph documents always serialize");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<NetworkGraph, IrError> {
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| IrError::Parse(e.to_string()))?;
    if doc.ir_version != IR_VERSION {
        return Err(IrError::UnsupportedVersion(doc.ir_version));
    }
    let nodes = doc
        .nodes
        .into_iter()
        .map(NodeDoc::into_node)
        .collect::<Result<Vec<_>, _>>()?;
    build_graph(nodes, doc.input_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "ir_version": 1,
        "input_shape": {"n": 1, "c": 3, "h": 8, "w": 8},
        "nodes": [
            {"id": "in", "kind": "input", "inputs": []},
            {"id": "c", "kind": "conv2d", "params": {"kernel_h": 3, "kernel_w": 3, "stride": 2,
             "padding": 1, "in_c": 3, "out_c": 4}, "inputs": ["in"], "tags": ["downsample"]},
            {"id": "r", "kind": "activation", "params": {"function": "relu6"}, "inputs": ["c"]},
            {"id": "out", "kind": "output", "inputs": ["r"]}
        ]
    }"#;

    #[test]
    fn parses_minimal_document() {
        let g = from_json(MINIMAL).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.get("c").unwrap().has_tag("downsample"));
        let again = from_json(&to_json(&g)).unwrap();
        assert_eq!(again, g);
    }

    #[test]
    fn rejects_unknown_fields_and_versions() {
        let extra = MINIMAL.replace(r#""ir_version": 1,"#, r#""ir_version": 1, "bogus": 0,"#);
        assert!(matches!(from_json(&extra), Err(IrError::Parse(_))));
        let v2 = MINIMAL.replace(r#""ir_version": 1"#, r#""ir_version": 2"#);
        assert!(matches!(from_json(&v2), Err(IrError::UnsupportedVersion(2))));
        let bad_param = MINIMAL.replace(r#""padding": 1,"#, r#""padding": 1, "dilation": 2,"#);
        assert!(matches!(from_json(&bad_param), Err(IrError::InvalidNode { ref node, .. }) if node == "c"));
        let bad_kind = MINIMAL.replace(r#""kind": "activation""#, r#""kind": "dropout""#);
        assert!(matches!(from_json(&bad_kind), Err(IrError::InvalidNode { ref node, .. }) if node == "r"));
    }
}
