//! Graph builders for the architectures analyzed by the toolkit.
//!
//! Topologies follow the torchvision reference definitions with every
//! conv/bn/activation as its own node and residual shortcuts as explicit
//! edges into `add` nodes. MobileNet inverted-residual blocks are expanded
//! into expand / depthwise / project primitives.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use super::{build_graph, Activation, Conv2dParams, FcParams, IrError, NetworkGraph, OpKind, OpNode, PoolParams, TensorShape, UpsampleMode, UpsampleParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ZooModel {
    Resnet18,
    Resnet50,
    MobilenetV2,
    MobilenetV3Small,
    Resnext18,
    UnetDdpm,
    /// Three stride-2 convs with two residual blocks; the desk-scale teacher.
    ToyCnn,
}

impl ZooModel {
    pub const ALL: [ZooModel; 7] = [
        ZooModel::Resnet18,
        ZooModel::Resnet50,
        ZooModel::MobilenetV2,
        ZooModel::MobilenetV3Small,
        ZooModel::Resnext18,
        ZooModel::UnetDdpm,
        ZooModel::ToyCnn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ZooModel::Resnet18 => "resnet18",
            ZooModel::Resnet50 => "resnet50",
            ZooModel::MobilenetV2 => "mobilenet_v2",
            ZooModel::MobilenetV3Small => "mobilenet_v3_small",
            ZooModel::Resnext18 => "resnext18",
            ZooModel::UnetDdpm => "unet_ddpm",
            ZooModel::ToyCnn => "toy_cnn",
        }
    }

    /// Default configuration at the resolution the model is usually analyzed at.
    pub fn default_config(&self) -> ZooConfig {
        let resolution = match self {
            ZooModel::Resnet18 | ZooModel::Resnet50 => 224,
            ZooModel::MobilenetV2 | ZooModel::MobilenetV3Small | ZooModel::Resnext18 => 128,
            ZooModel::UnetDdpm => 32,
            ZooModel::ToyCnn => 32,
        };
        let mut cfg = ZooConfig::new(resolution);
        match self {
            ZooModel::ToyCnn => {
                cfg.in_channels = 1;
                cfg.num_classes = 4;
            }
            ZooModel::MobilenetV2 | ZooModel::MobilenetV3Small | ZooModel::Resnext18 => cfg.num_classes = 10,
            _ => {}
        }
        cfg
    }
}

impl fmt::Display for ZooModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ZooModel {
    type Err = IrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ZooModel::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| IrError::UnknownModel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZooConfig {
    pub resolution: u64,
    pub batch: u64,
    pub in_channels: u64,
    pub dtype_bytes: u64,
    pub num_classes: u64,
    /// Base channel width; `None` keeps each architecture's own default.
    pub width: Option<u64>,
    /// Downsampling levels of the U-Net.
    pub levels: u32,
    /// Output channels of the U-Net (defaults to `in_channels`).
    pub out_channels: Option<u64>,
}

impl ZooConfig {
    pub fn new(resolution: u64) -> Self {
        Self {
            resolution,
            batch: 1,
            in_channels: 3,
            dtype_bytes: 4,
            num_classes: 1000,
            width: None,
            levels: 2,
            out_channels: None,
        }
    }

    pub fn input_shape(&self) -> TensorShape {
        TensorShape::new(self.batch, self.in_channels, self.resolution, self.resolution).with_dtype(self.dtype_bytes)
    }
}

pub fn model_zoo(model: ZooModel, config: &ZooConfig) -> Result<NetworkGraph, IrError> {
    let total_stride = match model {
        ZooModel::UnetDdpm => 1u64 << config.levels,
        ZooModel::ToyCnn => 8,
        _ => 32,
    };
    if config.resolution == 0 || config.resolution % total_stride != 0 {
        return Err(IrError::IncompatibleResolution {
            model: model.name().to_string(),
            resolution: config.resolution,
            total_stride,
        });
    }
    let mut b = Builder::new(config.in_channels);
    match model {
        ZooModel::Resnet18 => resnet(&mut b, config, ResnetBlock::Basic, &[2, 2, 2, 2], 1),
        ZooModel::Resnet50 => resnet(&mut b, config, ResnetBlock::Bottleneck, &[3, 4, 6, 3], 1),
        ZooModel::Resnext18 => resnet(&mut b, config, ResnetBlock::Bottleneck, &[2, 2, 2, 2], 32),
        ZooModel::MobilenetV2 => mobilenet_v2(&mut b, config),
        ZooModel::MobilenetV3Small => mobilenet_v3_small(&mut b, config),
        ZooModel::UnetDdpm => {
            if config.levels == 0 {
                return Err(IrError::IncompatibleResolution {
                    model: model.name().into(),
                    resolution: config.resolution,
                    total_stride,
                });
            }
            unet(&mut b, config)
        }
        ZooModel::ToyCnn => toy_cnn(&mut b, config),
    }
    build_graph(b.nodes, config.input_shape())
}

struct Builder {
    nodes: Vec<OpNode>,
    channels: HashMap<String, u64>,
    stage: Option<String>,
}

impl Builder {
    fn new(in_channels: u64) -> Self {
        let mut b = Self { nodes: Vec::new(), channels: HashMap::new(), stage: None };
        b.push("input", OpKind::Input, &[], in_channels, &[]);
        b
    }

    fn push(&mut self, id: &str, kind: OpKind, inputs: &[&str], channels: u64, tags: &[&str]) -> String {
        let mut node = OpNode::new(id, kind, inputs);
        for t in tags {
            node = node.tagged(*t);
        }
        if let Some(stage) = &self.stage {
            node = node.tagged(stage.clone());
        }
        self.channels.insert(id.to_string(), channels);
        self.nodes.push(node);
        id.to_string()
    }

    fn ch(&self, id: &str) -> u64 {
        self.channels[id]
    }

    fn conv(&mut self, id: &str, x: &str, params: Conv2dParams, tags: &[&str]) -> String {
        let mut tags = tags.to_vec();
        if params.stride > 1 {
            tags.push("downsample");
        }
        self.push(id, OpKind::Conv2d(params), &[x], params.out_c, &tags)
    }

    fn unary(&mut self, id: &str, kind: OpKind, x: &str, tags: &[&str]) -> String {
        let c = self.ch(x);
        self.push(id, kind, &[x], c, tags)
    }

    /// conv → bn → optional activation; returns the last node id.
    fn conv_bn(&mut self, prefix: &str, x: &str, params: Conv2dParams, act: Option<Activation>, tags: &[&str]) -> String {
        let c = self.conv(&format!("{prefix}.conv"), x, params, tags);
        let bn = self.unary(&format!("{prefix}.bn"), OpKind::BatchNorm, &c, tags);
        match act {
            Some(a) => self.unary(&format!("{prefix}.act"), OpKind::act(a), &bn, tags),
            None => bn,
        }
    }

    fn binary(&mut self, id: &str, kind: OpKind, a: &str, b: &str) -> String {
        let c = match kind {
            OpKind::Concat => self.ch(a) + self.ch(b),
            _ => self.ch(a),
        };
        self.push(id, kind, &[a, b], c, &[])
    }

    fn head(&mut self, x: &str, num_classes: u64) {
        let gap = self.unary("avgpool", OpKind::GlobalAvgPool, x, &[]);
        let c = self.ch(&gap);
        let fc = self.push(
            "fc",
            OpKind::FullyConnected(FcParams { in_features: c, out_features: num_classes }),
            &[&gap],
            num_classes,
            &[],
        );
        self.push("output", OpKind::Output, &[&fc], num_classes, &[]);
    }
}

#[derive(Clone, Copy)]
enum ResnetBlock {
    Basic,
    Bottleneck,
}

fn resnet(b: &mut Builder, cfg: &ZooConfig, block: ResnetBlock, layers: &[usize], groups: u64) {
    let base = cfg.width.unwrap_or(64);
    b.stage = Some("stage:0".into());
    let mut x = b.conv_bn("conv1", "input", Conv2dParams::square(7, 2, cfg.in_channels, base), Some(Activation::Relu), &[]);
    x = b.unary("maxpool", OpKind::MaxPool(PoolParams { kernel: 3, stride: 2, padding: 1 }), &x, &["downsample"]);
    let expansion = match block {
        ResnetBlock::Basic => 1,
        ResnetBlock::Bottleneck => 4,
    };
    for (stage, &blocks) in layers.iter().enumerate() {
        b.stage = Some(format!("stage:{}", stage + 1));
        let planes = base << stage;
        for blk in 0..blocks {
            let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
            let p = format!("layer{}.{}", stage + 1, blk);
            let in_c = b.ch(&x);
            let out_c = planes * expansion;
            let branch = match block {
                ResnetBlock::Basic => {
                    let h = b.conv_bn(&format!("{p}.1"), &x, Conv2dParams::square(3, stride, in_c, planes), Some(Activation::Relu), &[]);
                    b.conv_bn(&format!("{p}.2"), &h, Conv2dParams::square(3, 1, planes, planes), None, &[])
                }
                ResnetBlock::Bottleneck => {
                    // torchvision places the stride on the 3x3 conv; grouped for ResNeXt.
                    let width = if groups > 1 { planes * 4 * groups / 64 } else { planes };
                    let h = b.conv_bn(&format!("{p}.1"), &x, Conv2dParams::square(1, 1, in_c, width), Some(Activation::Relu), &[]);
                    let h = b.conv_bn(
                        &format!("{p}.2"),
                        &h,
                        Conv2dParams::square(3, stride, width, width).grouped(groups),
                        Some(Activation::Relu),
                        &[],
                    );
                    b.conv_bn(&format!("{p}.3"), &h, Conv2dParams::square(1, 1, width, out_c), None, &[])
                }
            };
            let shortcut = if stride != 1 || in_c != out_c {
                b.conv_bn(&format!("{p}.shortcut"), &x, Conv2dParams::square(1, stride, in_c, out_c), None, &["shortcut"])
            } else {
                x.clone()
            };
            let sum = b.binary(&format!("{p}.add"), OpKind::Add, &branch, &shortcut);
            x = b.unary(&format!("{p}.relu"), OpKind::act(Activation::Relu), &sum, &[]);
        }
    }
    b.stage = None;
    b.head(&x, cfg.num_classes);
}

fn scaled(c: u64, width: Option<u64>, default: u64) -> u64 {
    match width {
        Some(w) => (c * w / default).max(1),
        None => c,
    }
}

/// Expand (1x1) → depthwise (kxk, strided) → project (1x1) with optional identity residual.
#[allow(clippy::too_many_arguments)]
fn inverted_residual(b: &mut Builder, p: &str, x: &str, kernel: u64, expanded: u64, out_c: u64, stride: u64, act: Activation) -> String {
    let in_c = b.ch(x);
    let mut h = x.to_string();
    if expanded != in_c {
        h = b.conv_bn(&format!("{p}.expand"), &h, Conv2dParams::square(1, 1, in_c, expanded), Some(act), &[]);
    }
    h = b.conv_bn(
        &format!("{p}.dw"),
        &h,
        Conv2dParams::square(kernel, stride, expanded, expanded).grouped(expanded),
        Some(act),
        &[],
    );
    h = b.conv_bn(&format!("{p}.project"), &h, Conv2dParams::square(1, 1, expanded, out_c), None, &[]);
    if stride == 1 && in_c == out_c {
        h = b.binary(&format!("{p}.add"), OpKind::Add, &h, x);
    }
    h
}

fn mobilenet_v2(b: &mut Builder, cfg: &ZooConfig) {
    let w = |c| scaled(c, cfg.width, 32);
    let mut x = b.conv_bn("stem", "input", Conv2dParams::square(3, 2, cfg.in_channels, w(32)), Some(Activation::Relu6), &[]);
    // (expansion t, channels c, repeats n, stride s)
    let settings = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)];
    let mut idx = 0;
    for (t, c, n, s) in settings {
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let expanded = b.ch(&x) * t;
            x = inverted_residual(b, &format!("features.{idx}"), &x, 3, expanded, w(c), stride, Activation::Relu6);
            idx += 1;
        }
    }
    x = b.conv_bn("last", &x, Conv2dParams::square(1, 1, b.ch(&x), w(1280).max(1280)), Some(Activation::Relu6), &[]);
    b.head(&x, cfg.num_classes);
}

/// MobileNetV3-Small without squeeze-excitation branches; hard-swish is
/// represented by SiLU (identical activation footprint).
fn mobilenet_v3_small(b: &mut Builder, cfg: &ZooConfig) {
    let w = |c| scaled(c, cfg.width, 16);
    let (re, hs) = (Activation::Relu, Activation::Silu);
    let mut x = b.conv_bn("stem", "input", Conv2dParams::square(3, 2, cfg.in_channels, w(16)), Some(hs), &[]);
    // (kernel, expanded, out, activation, stride)
    let settings = [
        (3, 16, 16, re, 2),
        (3, 72, 24, re, 2),
        (3, 88, 24, re, 1),
        (5, 96, 40, hs, 2),
        (5, 240, 40, hs, 1),
        (5, 240, 40, hs, 1),
        (5, 120, 48, hs, 1),
        (5, 144, 48, hs, 1),
        (5, 288, 96, hs, 2),
        (5, 576, 96, hs, 1),
        (5, 576, 96, hs, 1),
    ];
    for (i, (k, e, o, a, s)) in settings.into_iter().enumerate() {
        x = inverted_residual(b, &format!("features.{}", i + 1), &x, k, w(e), w(o), s, a);
    }
    x = b.conv_bn("last", &x, Conv2dParams::square(1, 1, b.ch(&x), w(576)), Some(hs), &[]);
    let gap = b.unary("avgpool", OpKind::GlobalAvgPool, &x, &[]);
    let c = b.ch(&gap);
    let fc1 = b.push("fc1", OpKind::FullyConnected(FcParams { in_features: c, out_features: 1024 }), &[&gap], 1024, &[]);
    let act = b.unary("fc1.act", OpKind::act(hs), &fc1, &[]);
    let fc = b.push(
        "fc",
        OpKind::FullyConnected(FcParams { in_features: 1024, out_features: cfg.num_classes }),
        &[&act],
        cfg.num_classes,
        &[],
    );
    b.push("output", OpKind::Output, &[&fc], cfg.num_classes, &[]);
}

/// Encoder: strided conv per level, a conv block whose output feeds the
/// skip at that level. Decoder: upsample, concat with the skip of the level
/// it lands on, conv. Full resolution only sees a thin head (two channels
/// upsampled and concatenated with the input), so the widest maps live at
/// half resolution and below.
fn unet(b: &mut Builder, cfg: &ZooConfig) {
    let base = cfg.width.unwrap_or(64);
    let levels = cfg.levels as usize;
    let out_c = cfg.out_channels.unwrap_or(cfg.in_channels);
    let head = 2;
    let silu = Activation::Silu;
    let ch = |level: usize| base << (level - 1);

    let mut skips = vec!["input".to_string()];
    let mut x = "input".to_string();
    for level in 1..=levels {
        b.stage = Some(format!("stage:{level}"));
        let in_c = b.ch(&x);
        let d = b.conv(&format!("down{level}"), &x, Conv2dParams::square(3, 2, in_c, ch(level)), &[]);
        x = b.unary(&format!("down{level}.act"), OpKind::act(silu), &d, &[]);
        if level < levels {
            let c = b.conv(&format!("enc{level}"), &x, Conv2dParams::square(3, 1, ch(level), ch(level)), &[]);
            x = b.unary(&format!("enc{level}.act"), OpKind::act(silu), &c, &["unet-skip-source"]);
            skips.push(x.clone());
        }
    }
    b.stage = Some("mid".into());
    let c = b.conv("mid", &x, Conv2dParams::square(3, 1, ch(levels), ch(levels)), &[]);
    x = b.unary("mid.act", OpKind::act(silu), &c, &[]);

    for level in (1..=levels).rev() {
        b.stage = Some(format!("stage:{level}"));
        if level == 1 {
            let c = b.conv("to_head", &x, Conv2dParams::square(3, 1, b.ch(&x), head), &[]);
            x = b.unary("to_head.act", OpKind::act(silu), &c, &[]);
        }
        let up = OpKind::Upsample(UpsampleParams { factor: 2, mode: UpsampleMode::Nearest });
        let u = b.unary(&format!("up{level}"), up, &x, &["upsample"]);
        let skip = skips[level - 1].clone();
        let cat = b.binary(&format!("cat{level}"), OpKind::Concat, &u, &skip);
        let cat_c = b.ch(&cat);
        if level > 1 {
            let c = b.conv(&format!("dec{level}"), &cat, Conv2dParams::square(3, 1, cat_c, ch(level - 1)), &[]);
            x = b.unary(&format!("dec{level}.act"), OpKind::act(silu), &c, &[]);
        } else {
            x = b.conv("out", &cat, Conv2dParams::square(3, 1, cat_c, out_c), &[]);
        }
    }
    b.stage = None;
    b.push("output", OpKind::Output, &[&x], out_c, &[]);
}

fn toy_cnn(b: &mut Builder, cfg: &ZooConfig) {
    let base = cfg.width.unwrap_or(8);
    let relu = Some(Activation::Relu);
    let mut x = "input".to_string();
    for stage in 1..=3u64 {
        b.stage = Some(format!("stage:{stage}"));
        let c = base << (stage - 1);
        x = b.conv_bn(&format!("conv{stage}"), &x, Conv2dParams::square(3, 2, b.ch(&x), c), relu, &[]);
        if stage < 3 {
            let p = format!("res{stage}");
            let h = b.conv_bn(&format!("{p}.1"), &x, Conv2dParams::square(3, 1, c, c), relu, &[]);
            let h = b.conv_bn(&format!("{p}.2"), &h, Conv2dParams::square(3, 1, c, c), None, &[]);
            let s = b.binary(&format!("{p}.add"), OpKind::Add, &h, &x);
            x = b.unary(&format!("{p}.relu"), OpKind::act(Activation::Relu), &s, &[]);
        }
    }
    b.stage = None;
    b.head(&x, cfg.num_classes);
}
