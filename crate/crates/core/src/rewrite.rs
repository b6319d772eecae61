//! Aggressive-pooling rewrite: the first main-path downsampling layer gets
//! its stride multiplied, and later downsampling layers are set to stride 1
//! until the overall main-path stride matches the teacher again.
//!
//! Neutralization order for `multiplier = ρ^c`:
//! * `c = 1`: the last downsampling layer.
//! * `c ≥ 2`: the layer right after the first one, then the `c − 1` last
//!   layers walking from the tail.
//!
//! For ResNet18 this yields strides `[4,2,2,2,1]`, `[8,1,2,2,1]` and
//! `[16,1,2,1,1]` for multipliers 2, 4 and 8. Strided shortcut convs that
//! bypass a changed segment receive the same stride change, and U-Net
//! upsample factors mirror their encoder counterparts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{
    downsampling_positions, head_resolution, infer_shapes, main_path, upsampling_positions, IrError, NetworkGraph, OpKind, OpNode,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewriteError {
    #[error("multiplier {multiplier} is not a power of the base stride {base}")]
    InvalidMultiplier { multiplier: u64, base: u64 },
    #[error("need {needed} downsampling layers on the main path to compensate, found {available}")]
    TooFewDownsamples { needed: usize, available: usize },
    #[error("downsampling layer `{node}` has stride {stride}, expected {expected}")]
    NonUniformStride { node: String, stride: u64, expected: u64 },
    #[error("shortcut `{node}` cannot follow a stride change of {old_product} -> {new_product}")]
    ShortcutMismatch { node: String, old_product: u64, new_product: u64 },
    #[error("{downsamples} downsampling layers but {upsamples} upsampling layers")]
    UnbalancedUpsampling { downsamples: usize, upsamples: usize },
    #[error("rewritten graph changes the head resolution")]
    ResolutionNotPreserved,
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationPolicy {
    #[default]
    LastFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteConfig {
    pub multiplier: u64,
    /// Stride of the teacher's downsampling layers.
    pub base_stride: u64,
    pub compensation_policy: CompensationPolicy,
}

impl RewriteConfig {
    pub fn new(multiplier: u64) -> Self {
        Self { multiplier, base_stride: 2, compensation_policy: CompensationPolicy::LastFirst }
    }

    /// `c` such that `multiplier = base^c`.
    fn exponent(&self) -> Result<u32, RewriteError> {
        let invalid = RewriteError::InvalidMultiplier { multiplier: self.multiplier, base: self.base_stride };
        if self.multiplier == 0 || self.base_stride < 2 {
            return Err(invalid);
        }
        let mut m = self.multiplier;
        let mut c = 0;
        while m > 1 {
            if m % self.base_stride != 0 {
                return Err(invalid);
            }
            m /= self.base_stride;
            c += 1;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeRole {
    Downsample,
    Shortcut,
    Upsample,
}

/// One stride (or, for upsample layers, factor) change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrideChange {
    pub node_id: String,
    pub old_stride: u64,
    pub new_stride: u64,
    pub role: ChangeRole,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteLog {
    pub changes: Vec<StrideChange>,
}

impl RewriteLog {
    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }
}

fn neutralized_indices(downsamples: usize, c: usize) -> Vec<usize> {
    match c {
        0 => vec![],
        1 => vec![downsamples - 1],
        _ => std::iter::once(1).chain((0..c - 1).map(|k| downsamples - 1 - k)).collect(),
    }
}

pub fn rewrite_aggressive(teacher: &NetworkGraph, config: &RewriteConfig) -> Result<(NetworkGraph, RewriteLog), RewriteError> {
    let c = config.exponent()? as usize;
    if c == 0 {
        return Ok((teacher.clone(), RewriteLog::default()));
    }
    let shapes = infer_shapes(teacher)?;
    let downs = downsampling_positions(teacher, &shapes);
    if downs.len() < c + 1 {
        return Err(RewriteError::TooFewDownsamples { needed: c + 1, available: downs.len() });
    }

    let old_stride = |i: usize| teacher.node(i).kind.stride().unwrap_or(1);
    let mut new_stride: Vec<Option<u64>> = vec![None; teacher.len()];
    let mut changes = Vec::new();

    let first = downs[0];
    new_stride[first] = Some(old_stride(first) * config.multiplier);
    let mut neutralize: Vec<usize> = neutralized_indices(downs.len(), c).into_iter().map(|k| downs[k]).collect();
    neutralize.sort_unstable();
    for &i in &neutralize {
        if old_stride(i) != config.base_stride {
            return Err(RewriteError::NonUniformStride {
                node: teacher.node(i).id.clone(),
                stride: old_stride(i),
                expected: config.base_stride,
            });
        }
        new_stride[i] = Some(1);
    }
    for &i in std::iter::once(&first).chain(&neutralize) {
        changes.push(StrideChange {
            node_id: teacher.node(i).id.clone(),
            old_stride: old_stride(i),
            new_stride: new_stride[i].unwrap(),
            role: ChangeRole::Downsample,
        });
    }

    // Strided ops on branches that bypass part of the main path.
    let path = main_path(teacher);
    let mut path_pos = vec![usize::MAX; teacher.len()];
    for (k, &i) in path.iter().enumerate() {
        path_pos[i] = k;
    }
    for s in 0..teacher.len() {
        if path_pos[s] != usize::MAX || old_stride(s) <= 1 {
            continue;
        }
        let mut fork = s;
        while path_pos[fork] == usize::MAX {
            fork = teacher.preds(fork)[0];
        }
        let mut join = s;
        while path_pos[join] == usize::MAX {
            match teacher.succs(join).first() {
                Some(&n) => join = n,
                None => break,
            }
        }
        if path_pos[join] == usize::MAX {
            continue;
        }
        let segment = &path[path_pos[fork] + 1..path_pos[join]];
        let old_product: u64 = segment.iter().map(|&i| old_stride(i)).product();
        let new_product: u64 = segment.iter().map(|&i| new_stride[i].unwrap_or(old_stride(i))).product();
        if old_product == new_product {
            continue;
        }
        let scaled = old_stride(s) * new_product;
        if scaled % old_product != 0 {
            return Err(RewriteError::ShortcutMismatch { node: teacher.node(s).id.clone(), old_product, new_product });
        }
        new_stride[s] = Some(scaled / old_product);
        changes.push(StrideChange {
            node_id: teacher.node(s).id.clone(),
            old_stride: old_stride(s),
            new_stride: scaled / old_product,
            role: ChangeRole::Shortcut,
        });
    }

    // Decoder upsample factors mirror the encoder strides.
    let ups = upsampling_positions(teacher);
    let mut new_factor: Vec<Option<u64>> = vec![None; teacher.len()];
    if !ups.is_empty() {
        if ups.len() != downs.len() {
            return Err(RewriteError::UnbalancedUpsampling { downsamples: downs.len(), upsamples: ups.len() });
        }
        for (j, &u) in ups.iter().enumerate() {
            let d = downs[downs.len() - 1 - j];
            if let Some(ns) = new_stride[d] {
                let old = teacher.node(u).kind.upsample_factor().unwrap();
                let factor = old * ns / old_stride(d);
                new_factor[u] = Some(factor);
                changes.push(StrideChange {
                    node_id: teacher.node(u).id.clone(),
                    old_stride: old,
                    new_stride: factor,
                    role: ChangeRole::Upsample,
                });
            }
        }
    }

    let nodes: Vec<OpNode> = teacher
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut node = n.clone();
            if let Some(s) = new_stride[i] {
                node.kind = n.kind.with_stride(s);
                retag(&mut node, "downsample", s > 1);
            }
            if let (Some(f), OpKind::Upsample(p)) = (new_factor[i], n.kind) {
                node.kind = OpKind::Upsample(crate::ir::UpsampleParams { factor: f, ..p });
                retag(&mut node, "upsample", f > 1);
            }
            node
        })
        .collect();
    let student = crate::ir::build_graph(nodes, teacher.input_shape())?;
    infer_shapes(&student)?;
    if !verify_resolution(teacher, &student) {
        return Err(RewriteError::ResolutionNotPreserved);
    }
    Ok((student, RewriteLog { changes }))
}

fn retag(node: &mut OpNode, tag: &str, present: bool) {
    if present {
        node.tags.insert(tag.to_string());
    } else {
        node.tags.remove(tag);
    }
}

/// True iff both graphs share an input shape and the spatial dims entering
/// the head (global pool input, or the output for U-Nets) are equal.
pub fn verify_resolution(teacher: &NetworkGraph, student: &NetworkGraph) -> bool {
    if teacher.input_shape() != student.input_shape() {
        return false;
    }
    match (infer_shapes(teacher), infer_shapes(student)) {
        (Ok(ts), Ok(ss)) => head_resolution(teacher, &ts) == head_resolution(student, &ss),
        _ => false,
    }
}

/// Product of main-path downsampling strides.
pub fn main_path_stride(graph: &NetworkGraph) -> Result<u64, IrError> {
    let shapes = infer_shapes(graph)?;
    Ok(downsampling_positions(graph, &shapes)
        .into_iter()
        .map(|i| graph.node(i).kind.stride().unwrap())
        .product())
}
