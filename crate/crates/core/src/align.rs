//! Pooling-aligned teacher/student feature pairing.
//!
//! After an aggressive-pooling rewrite the student reaches each resolution
//! earlier than the teacher, so pairs are formed by spatial size rather than
//! by stage index: a student downsampling output at `/8` is matched with the
//! teacher's last downsampling output at `/8`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{downsampling_positions, infer_shapes, upsampling_positions, IrError, NetworkGraph, ShapeTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("student node `{node}` at {h}x{w} has no teacher downsampling output of equal resolution")]
    NoMatch { node: String, h: u64, w: u64 },
    #[error("`{0}` graph is not U-shaped (downsample and upsample counts differ or are zero)")]
    NotUNet(&'static str),
    #[error("teacher and student input shapes differ")]
    InputMismatch,
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPosition {
    AfterDownsample,
    BeforeUpsample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    #[default]
    PoolingAlign,
    StageAlign,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPair {
    /// Downsampling node (after_downsample) or upsample node (before_upsample).
    pub student_node_id: String,
    pub teacher_node_id: String,
    /// Nodes whose outputs are actually compared. For downsampling nodes this
    /// is the end of the trailing BN/activation chain; for upsample nodes it
    /// is the producer of the upsample input.
    pub student_tap: String,
    pub teacher_tap: String,
    /// Student feature resolution.
    pub spatial: (u64, u64),
    pub teacher_spatial: (u64, u64),
    pub student_channels: u64,
    pub teacher_channels: u64,
    pub position: PairPosition,
    pub resolution_mismatch: bool,
    /// Teacher-to-student downscale applied to the teacher map when the
    /// resolutions differ (1 when aligned).
    pub resample_factor: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub mode: AlignmentMode,
    pub pairs: Vec<AlignmentPair>,
}

impl AlignmentPlan {
    /// Number of RED blocks.
    pub fn count(&self) -> usize {
        self.pairs.len()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Last node of the single-consumer BN/activation chain following `idx`.
pub fn feature_tap(graph: &NetworkGraph, idx: usize) -> usize {
    let mut cur = idx;
    loop {
        match graph.succs(cur) {
            [next] if graph.node(*next).kind.is_fusable_epilogue() && graph.preds(*next).len() == 1 => cur = *next,
            _ => return cur,
        }
    }
}

struct Side<'a> {
    graph: &'a NetworkGraph,
    shapes: ShapeTable,
    downs: Vec<usize>,
    ups: Vec<usize>,
}

impl<'a> Side<'a> {
    fn new(graph: &'a NetworkGraph) -> Result<Self, AlignError> {
        let shapes = infer_shapes(graph)?;
        let downs = downsampling_positions(graph, &shapes);
        let ups = upsampling_positions(graph);
        Ok(Self { graph, shapes, downs, ups })
    }

    fn is_unet(&self) -> bool {
        !self.ups.is_empty() && self.ups.len() == self.downs.len()
    }

    fn up_input(&self, u: usize) -> usize {
        self.graph.preds(u)[0]
    }
}

fn make_pair(student: &Side, s_node: usize, s_tap: usize, teacher: &Side, t_node: usize, t_tap: usize, position: PairPosition) -> AlignmentPair {
    let s_shape = student.shapes.at(s_tap);
    let t_shape = teacher.shapes.at(t_tap);
    let mismatch = s_shape.spatial() != t_shape.spatial();
    AlignmentPair {
        student_node_id: student.graph.node(s_node).id.clone(),
        teacher_node_id: teacher.graph.node(t_node).id.clone(),
        student_tap: student.graph.node(s_tap).id.clone(),
        teacher_tap: teacher.graph.node(t_tap).id.clone(),
        spatial: s_shape.spatial(),
        teacher_spatial: t_shape.spatial(),
        student_channels: s_shape.c,
        teacher_channels: t_shape.c,
        position,
        resolution_mismatch: mismatch,
        resample_factor: if mismatch { (t_shape.h / s_shape.h.max(1)).max(1) } else { 1 },
    }
}

fn encoder_pairs(teacher: &Side, student: &Side) -> Result<Vec<AlignmentPair>, AlignError> {
    let mut pairs = Vec::new();
    for &s in &student.downs {
        let s_tap = feature_tap(student.graph, s);
        let (h, w) = student.shapes.at(s_tap).spatial();
        let t = teacher
            .downs
            .iter()
            .rev()
            .copied()
            .find(|&t| teacher.shapes.at(feature_tap(teacher.graph, t)).spatial() == (h, w))
            .ok_or_else(|| AlignError::NoMatch { node: student.graph.node(s).id.clone(), h, w })?;
        pairs.push(make_pair(student, s, s_tap, teacher, t, feature_tap(teacher.graph, t), PairPosition::AfterDownsample));
    }
    Ok(pairs)
}

fn check_inputs(teacher: &NetworkGraph, student: &NetworkGraph) -> Result<(), AlignError> {
    if teacher.input_shape() != student.input_shape() {
        return Err(AlignError::InputMismatch);
    }
    Ok(())
}

/// Pairs every stride>1 student downsampling output with the latest teacher
/// downsampling output of the same resolution.
pub fn plan(teacher: &NetworkGraph, student: &NetworkGraph) -> Result<AlignmentPlan, AlignError> {
    check_inputs(teacher, student)?;
    let t = Side::new(teacher)?;
    let s = Side::new(student)?;
    Ok(AlignmentPlan { mode: AlignmentMode::PoolingAlign, pairs: encoder_pairs(&t, &s)? })
}

/// Encoder pairs as in [`plan`], plus one pair per student upsample matching
/// its input with the teacher upsample input of equal resolution.
pub fn plan_unet(teacher: &NetworkGraph, student: &NetworkGraph) -> Result<AlignmentPlan, AlignError> {
    check_inputs(teacher, student)?;
    let t = Side::new(teacher)?;
    let s = Side::new(student)?;
    if !t.is_unet() {
        return Err(AlignError::NotUNet("teacher"));
    }
    if !s.is_unet() {
        return Err(AlignError::NotUNet("student"));
    }
    let mut pairs = encoder_pairs(&t, &s)?;
    for &su in &s.ups {
        let s_in = s.up_input(su);
        let (h, w) = s.shapes.at(s_in).spatial();
        let tu = t
            .ups
            .iter()
            .rev()
            .copied()
            .find(|&tu| t.shapes.at(t.up_input(tu)).spatial() == (h, w))
            .ok_or_else(|| AlignError::NoMatch { node: student.node(su).id.clone(), h, w })?;
        pairs.push(make_pair(&s, su, s_in, &t, tu, t.up_input(tu), PairPosition::BeforeUpsample));
    }
    Ok(AlignmentPlan { mode: AlignmentMode::PoolingAlign, pairs })
}

/// Conventional same-stage pairing used as an ablation baseline.
///
/// Each stride>1 student downsampling node is paired with the teacher node
/// of the same id (the rewrite keeps ids), falling back to the same position
/// in the teacher's downsampling list. Pairs at different resolutions carry
/// the factor by which the teacher map must be average-pooled.
pub fn stage_align(teacher: &NetworkGraph, student: &NetworkGraph) -> Result<AlignmentPlan, AlignError> {
    check_inputs(teacher, student)?;
    let t = Side::new(teacher)?;
    let s = Side::new(student)?;
    let mut pairs = Vec::new();
    for (k, &sn) in s.downs.iter().enumerate() {
        let id = &student.node(sn).id;
        let tn = t
            .downs
            .iter()
            .copied()
            .find(|&tn| &teacher.node(tn).id == id)
            .or_else(|| t.downs.get(k).copied())
            .ok_or_else(|| {
                let (h, w) = s.shapes.at(sn).spatial();
                AlignError::NoMatch { node: id.clone(), h, w }
            })?;
        pairs.push(make_pair(&s, sn, feature_tap(student, sn), &t, tn, feature_tap(teacher, tn), PairPosition::AfterDownsample));
    }
    Ok(AlignmentPlan { mode: AlignmentMode::StageAlign, pairs })
}

pub fn plan_with_mode(teacher: &NetworkGraph, student: &NetworkGraph, mode: AlignmentMode) -> Result<AlignmentPlan, AlignError> {
    match mode {
        AlignmentMode::PoolingAlign => plan(teacher, student),
        AlignmentMode::StageAlign => stage_align(teacher, student),
    }
}
