//! Architecture graph: stem, staged residual blocks, classifier head.
//!
//! The block list is the unit of coarse compression; channel extents inside
//! blocks are the unit of fine compression. Every edit goes through
//! [`reconstruct`] or the slicing module and is re-validated against the
//! residual-safety invariants before it is accepted.

mod builders;
mod forward;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use trimnet_tensor::{Element, Tensor};

use crate::{Error, Result};

pub use builders::{mobilenet_v2, resnet18, resnet34, tiny_resnet};
pub use forward::{EvalOutput, ParamBinding, TapedForward};

/// Convolution followed by its batch norm. `weight` is `[out, in/groups, kh, kw]`;
/// the four norm vectors all have `out` elements.
#[derive(Debug, Clone)]
pub struct ConvBn<E: Element> {
    pub weight: Tensor<E>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
}

impl<E: Element> ConvBn<E> {
    /// Zero weights, identity norm. Shape container for checkpoint loading.
    pub fn zeros(out: usize, in_per_group: usize, kh: usize, kw: usize, stride: usize, padding: usize, groups: usize) -> Self {
        ConvBn {
            weight: Tensor::zeros(vec![out, in_per_group, kh, kw]),
            stride,
            padding,
            groups,
            gamma: Tensor::full(vec![out], E::one()),
            beta: Tensor::zeros(vec![out]),
            running_mean: Tensor::zeros(vec![out]),
            running_var: Tensor::full(vec![out], E::one()),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dims()[2], self.weight.dims()[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    BasicResidual,
    InvertedResidual,
}

#[derive(Debug, Clone)]
pub enum BlockBody<E: Element> {
    /// 3x3 -> 3x3 with an identity or 1x1-projected skip.
    Basic {
        conv1: ConvBn<E>,
        conv2: ConvBn<E>,
        downsample: Option<ConvBn<E>>,
    },
    /// 1x1 expand -> depthwise 3x3 -> 1x1 project; skip only when the block
    /// keeps shape. Structural member of the zoo; no training path.
    Inverted {
        expand: Option<ConvBn<E>>,
        depthwise: ConvBn<E>,
        project: ConvBn<E>,
    },
}

#[derive(Debug, Clone)]
pub struct BlockSpec<E: Element> {
    pub name: String,
    pub stride: usize,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub body: BlockBody<E>,
}

impl<E: Element> BlockSpec<E> {
    pub fn kind(&self) -> BlockKind {
        match self.body {
            BlockBody::Basic { .. } => BlockKind::BasicResidual,
            BlockBody::Inverted { .. } => BlockKind::InvertedResidual,
        }
    }

    pub fn has_downsample(&self) -> bool {
        matches!(&self.body, BlockBody::Basic { downsample: Some(_), .. })
    }

    /// Whether the skip connection exists at all.
    pub fn uses_residual(&self) -> bool {
        match self.body {
            BlockBody::Basic { .. } => true,
            BlockBody::Inverted { .. } => self.stride == 1 && self.in_channels == self.out_channels,
        }
    }
}

/// A block may never be removed when doing so would break the channel or
/// stride interface of its stage: basic blocks that project their skip, and
/// inverted blocks that change shape.
pub fn protection_rule<E: Element>(block: &BlockSpec<E>, _position_in_stage: usize) -> bool {
    match block.kind() {
        BlockKind::BasicResidual => block.has_downsample(),
        BlockKind::InvertedResidual => {
            block.stride != 1 || block.in_channels != block.out_channels
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage<E: Element> {
    pub name: String,
    pub blocks: Vec<BlockSpec<E>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolArgs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct Stem<E: Element> {
    pub conv: ConvBn<E>,
    pub max_pool: Option<PoolArgs>,
}

#[derive(Debug, Clone)]
pub struct Head<E: Element> {
    /// Optional 1x1 expansion applied before pooling (inverted-residual nets).
    pub pre_conv: Option<ConvBn<E>>,
    pub fc_weight: Tensor<E>,
    pub fc_bias: Tensor<E>,
}

impl<E: Element> Head<E> {
    /// Channel count entering the head (before any pre-conv).
    pub fn in_channels(&self) -> usize {
        match &self.pre_conv {
            Some(pc) => pc.in_channels(),
            None => self.fc_weight.dims()[1],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArchGraph<E: Element> {
    /// Family tag carried into checkpoints ("tiny_resnet", "resnet18", ...).
    pub family: String,
    pub input_channels: usize,
    pub num_classes: usize,
    pub stem: Stem<E>,
    pub stages: Vec<Stage<E>>,
    pub head: Head<E>,
}

/// Stable coordinate of a block inside a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRef {
    pub stage: usize,
    pub block: usize,
    pub name: String,
}

impl<E: Element> ArchGraph<E> {
    /// All blocks in forward order. The order is the scoring, pruning, and
    /// naming order throughout the pipeline.
    pub fn enumerate_blocks(&self) -> Vec<BlockRef> {
        let mut out = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.blocks.iter().enumerate() {
                out.push(BlockRef { stage: si, block: bi, name: block.name.clone() });
            }
        }
        out
    }

    pub fn block(&self, r: &BlockRef) -> &BlockSpec<E> {
        &self.stages[r.stage].blocks[r.block]
    }

    pub fn block_by_name(&self, name: &str) -> Option<&BlockSpec<E>> {
        self.stages
            .iter()
            .flat_map(|s| s.blocks.iter())
            .find(|b| b.name == name)
    }

    pub fn stage_by_name(&self, name: &str) -> Option<(usize, &Stage<E>)> {
        self.stages.iter().enumerate().find(|(_, s)| s.name == name)
    }

    /// Trainable parameters in fixed order (conv weights, norm scale/shift,
    /// classifier). Running statistics are buffers, not parameters.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.walk(&mut |conv_name, bn_name, cb| {
            f(&format!("{conv_name}.weight"), &cb.weight);
            f(&format!("{bn_name}.gamma"), &cb.gamma);
            f(&format!("{bn_name}.beta"), &cb.beta);
        });
        f("head.fc.weight", &self.head.fc_weight);
        f("head.fc.bias", &self.head.fc_bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.walk_mut(&mut |conv_name, bn_name, cb| {
            f(&format!("{conv_name}.weight"), &mut cb.weight);
            f(&format!("{bn_name}.gamma"), &mut cb.gamma);
            f(&format!("{bn_name}.beta"), &mut cb.beta);
        });
        f("head.fc.weight", &mut self.head.fc_weight);
        f("head.fc.bias", &mut self.head.fc_bias);
    }

    /// Batch-norm running statistics, in the same traversal order as
    /// [`Self::visit_params`].
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.walk(&mut |_, bn_name, cb| {
            f(&format!("{bn_name}.running_mean"), &cb.running_mean);
            f(&format!("{bn_name}.running_var"), &cb.running_var);
        });
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.walk_mut(&mut |_, bn_name, cb| {
            f(&format!("{bn_name}.running_mean"), &mut cb.running_mean);
            f(&format!("{bn_name}.running_var"), &mut cb.running_var);
        });
    }

    pub fn num_params(&self) -> u64 {
        let mut total = 0u64;
        self.visit_params(&mut |_, t| total += t.numel() as u64);
        total
    }

    /// Visits every conv+bn pair as (conv name, bn name, pair).
    fn walk(&self, f: &mut dyn FnMut(&str, &str, &ConvBn<E>)) {
        f("stem.conv", "stem.bn", &self.stem.conv);
        for stage in &self.stages {
            for b in &stage.blocks {
                let n = &b.name;
                match &b.body {
                    BlockBody::Basic { conv1, conv2, downsample } => {
                        f(&format!("{n}.conv1"), &format!("{n}.bn1"), conv1);
                        f(&format!("{n}.conv2"), &format!("{n}.bn2"), conv2);
                        if let Some(ds) = downsample {
                            f(&format!("{n}.downsample.conv"), &format!("{n}.downsample.bn"), ds);
                        }
                    }
                    BlockBody::Inverted { expand, depthwise, project } => {
                        if let Some(e) = expand {
                            f(&format!("{n}.expand"), &format!("{n}.expand_bn"), e);
                        }
                        f(&format!("{n}.depthwise"), &format!("{n}.depthwise_bn"), depthwise);
                        f(&format!("{n}.project"), &format!("{n}.project_bn"), project);
                    }
                }
            }
        }
        if let Some(pc) = &self.head.pre_conv {
            f("head.conv", "head.bn", pc);
        }
    }

    fn walk_mut(&mut self, f: &mut dyn FnMut(&str, &str, &mut ConvBn<E>)) {
        f("stem.conv", "stem.bn", &mut self.stem.conv);
        for stage in &mut self.stages {
            for b in &mut stage.blocks {
                let n = b.name.clone();
                match &mut b.body {
                    BlockBody::Basic { conv1, conv2, downsample } => {
                        f(&format!("{n}.conv1"), &format!("{n}.bn1"), conv1);
                        f(&format!("{n}.conv2"), &format!("{n}.bn2"), conv2);
                        if let Some(ds) = downsample {
                            f(&format!("{n}.downsample.conv"), &format!("{n}.downsample.bn"), ds);
                        }
                    }
                    BlockBody::Inverted { expand, depthwise, project } => {
                        if let Some(e) = expand {
                            f(&format!("{n}.expand"), &format!("{n}.expand_bn"), e);
                        }
                        f(&format!("{n}.depthwise"), &format!("{n}.depthwise_bn"), depthwise);
                        f(&format!("{n}.project"), &format!("{n}.project_bn"), project);
                    }
                }
            }
        }
        if let Some(pc) = &mut self.head.pre_conv {
            f("head.conv", "head.bn", pc);
        }
    }
}

/// Per-stage lists of block indices (into the source graph) that survive a
/// block-pruning edit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeepConfig {
    pub stages: BTreeMap<String, Vec<usize>>,
}

impl KeepConfig {
    pub fn identity<E: Element>(graph: &ArchGraph<E>) -> Self {
        let stages = graph
            .stages
            .iter()
            .map(|s| (s.name.clone(), (0..s.blocks.len()).collect()))
            .collect();
        KeepConfig { stages }
    }

    /// Every stage present, indices in range, strictly increasing, non-empty.
    pub fn validate<E: Element>(&self, graph: &ArchGraph<E>) -> Result<()> {
        for stage in &graph.stages {
            let kept = self.stages.get(&stage.name).ok_or_else(|| {
                Error::graph(format!("keep config is missing stage `{}`", stage.name))
            })?;
            if kept.is_empty() {
                return Err(Error::graph(format!(
                    "keep config empties stage `{}`; every stage must keep at least one block",
                    stage.name
                )));
            }
            let mut prev: Option<usize> = None;
            for &idx in kept {
                if idx >= stage.blocks.len() {
                    return Err(Error::graph(format!(
                        "keep config references block {idx} of stage `{}`, which has {} blocks",
                        stage.name,
                        stage.blocks.len()
                    )));
                }
                if let Some(p) = prev {
                    if idx <= p {
                        return Err(Error::graph(format!(
                            "keep config for stage `{}` must be strictly increasing, saw {p} then {idx}",
                            stage.name
                        )));
                    }
                }
                prev = Some(idx);
            }
        }
        for name in self.stages.keys() {
            if graph.stage_by_name(name).is_none() {
                return Err(Error::graph(format!("keep config names unknown stage `{name}`")));
            }
        }
        Ok(())
    }
}

/// One broken invariant; `location` names the block or boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

fn check_conv_bn<E: Element>(
    out: &mut Vec<Violation>,
    location: &str,
    cb: &ConvBn<E>,
    expect_in: usize,
    expect_out: usize,
    expect_stride: usize,
) {
    if cb.in_channels() != expect_in {
        out.push(Violation {
            location: location.to_string(),
            message: format!("expects {} input channels, receives {expect_in}", cb.in_channels()),
        });
    }
    if cb.out_channels() != expect_out {
        out.push(Violation {
            location: location.to_string(),
            message: format!("produces {} output channels, expected {expect_out}", cb.out_channels()),
        });
    }
    if cb.stride != expect_stride {
        out.push(Violation {
            location: location.to_string(),
            message: format!("stride {} where the block requires {expect_stride}", cb.stride),
        });
    }
    for (what, len) in [
        ("gamma", cb.gamma.numel()),
        ("beta", cb.beta.numel()),
        ("running_mean", cb.running_mean.numel()),
        ("running_var", cb.running_var.numel()),
    ] {
        if len != cb.out_channels() {
            out.push(Violation {
                location: location.to_string(),
                message: format!("{what} has {len} channels, conv produces {}", cb.out_channels()),
            });
        }
    }
}

/// Validates every residual-safety invariant; an empty list means the graph
/// is structurally sound.
pub fn check_residual_invariants<E: Element>(graph: &ArchGraph<E>) -> Vec<Violation> {
    let mut v = Vec::new();
    check_conv_bn(
        &mut v,
        "stem",
        &graph.stem.conv,
        graph.input_channels,
        graph.stem.conv.out_channels(),
        graph.stem.conv.stride,
    );

    let mut carried = graph.stem.conv.out_channels();
    for stage in &graph.stages {
        for block in &stage.blocks {
            let loc = block.name.as_str();
            if block.in_channels != carried {
                v.push(Violation {
                    location: loc.to_string(),
                    message: format!(
                        "declares {} input channels but the previous layer carries {carried}",
                        block.in_channels
                    ),
                });
            }
            match &block.body {
                BlockBody::Basic { conv1, conv2, downsample } => {
                    check_conv_bn(&mut v, &format!("{loc}.conv1"), conv1, block.in_channels, block.mid_channels, block.stride);
                    check_conv_bn(&mut v, &format!("{loc}.conv2"), conv2, block.mid_channels, block.out_channels, 1);
                    match downsample {
                        Some(ds) => {
                            check_conv_bn(&mut v, &format!("{loc}.downsample"), ds, block.in_channels, block.out_channels, block.stride);
                            if ds.kernel() != (1, 1) {
                                v.push(Violation {
                                    location: format!("{loc}.downsample"),
                                    message: format!("projection kernel must be 1x1, found {:?}", ds.kernel()),
                                });
                            }
                        }
                        None => {
                            // The identity skip forces output = input exactly.
                            if block.out_channels != block.in_channels {
                                v.push(Violation {
                                    location: loc.to_string(),
                                    message: format!(
                                        "identity skip with {} in / {} out channels",
                                        block.in_channels, block.out_channels
                                    ),
                                });
                            }
                            if block.stride != 1 {
                                v.push(Violation {
                                    location: loc.to_string(),
                                    message: format!("identity skip with stride {}", block.stride),
                                });
                            }
                        }
                    }
                }
                BlockBody::Inverted { expand, depthwise, project } => {
                    match expand {
                        Some(e) => check_conv_bn(&mut v, &format!("{loc}.expand"), e, block.in_channels, block.mid_channels, 1),
                        None => {
                            if block.mid_channels != block.in_channels {
                                v.push(Violation {
                                    location: loc.to_string(),
                                    message: format!(
                                        "no expansion conv but mid {} differs from in {}",
                                        block.mid_channels, block.in_channels
                                    ),
                                });
                            }
                        }
                    }
                    check_conv_bn(&mut v, &format!("{loc}.depthwise"), depthwise, block.mid_channels, block.mid_channels, block.stride);
                    if depthwise.groups != block.mid_channels {
                        v.push(Violation {
                            location: format!("{loc}.depthwise"),
                            message: format!(
                                "groups {} must equal mid channels {}",
                                depthwise.groups, block.mid_channels
                            ),
                        });
                    }
                    check_conv_bn(&mut v, &format!("{loc}.project"), project, block.mid_channels, block.out_channels, 1);
                }
            }
            carried = block.out_channels;
        }
    }

    let head_in = graph.head.in_channels();
    if head_in != carried {
        v.push(Violation {
            location: "head".to_string(),
            message: format!("expects {head_in} channels, the last stage produces {carried}"),
        });
    }
    if let Some(pc) = &graph.head.pre_conv {
        check_conv_bn(&mut v, "head.conv", pc, carried, pc.out_channels(), 1);
        carried = pc.out_channels();
    }
    if graph.head.fc_weight.dims()[1] != carried {
        v.push(Violation {
            location: "head.fc".to_string(),
            message: format!(
                "weight takes {} features, pooling provides {carried}",
                graph.head.fc_weight.dims()[1]
            ),
        });
    }
    if graph.head.fc_weight.dims()[0] != graph.num_classes
        || graph.head.fc_bias.numel() != graph.num_classes
    {
        v.push(Violation {
            location: "head.fc".to_string(),
            message: format!(
                "classifier rows {} / bias {} vs {} classes",
                graph.head.fc_weight.dims()[0],
                graph.head.fc_bias.numel(),
                graph.num_classes
            ),
        });
    }
    v
}

pub(crate) fn invariants_ok<E: Element>(graph: &ArchGraph<E>) -> Result<()> {
    let violations = check_residual_invariants(graph);
    if violations.is_empty() {
        Ok(())
    } else {
        let joined = violations.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n");
        Err(Error::Invariants(joined))
    }
}

/// Builds the spliced network that keeps exactly the blocks listed in `keep`,
/// re-indexing survivors as `{stage}.{0..}`. Fails if the splice would break
/// a channel or stride interface.
pub fn reconstruct<E: Element>(graph: &ArchGraph<E>, keep: &KeepConfig) -> Result<ArchGraph<E>> {
    keep.validate(graph)?;
    let mut out = graph.clone();
    for stage in &mut out.stages {
        let kept = &keep.stages[&stage.name];
        let blocks = std::mem::take(&mut stage.blocks);
        stage.blocks = blocks
            .into_iter()
            .enumerate()
            .filter(|(i, _)| kept.contains(i))
            .map(|(_, b)| b)
            .collect();
        for (j, b) in stage.blocks.iter_mut().enumerate() {
            b.name = format!("{}.{j}", stage.name);
        }
    }
    invariants_ok(&out)?;
    Ok(out)
}
