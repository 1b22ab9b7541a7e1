//! Constructors for the supported architecture families.
//!
//! All weights come from one seeded stream in traversal order, so a given
//! (family, shape, seed) triple always produces the same network.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use trimnet_tensor::{Element, Tensor};

use crate::{Error, Result};

use super::{ArchGraph, BlockBody, BlockSpec, ConvBn, Head, PoolArgs, Stage, Stem};

/// He-style fan-in init for a conv weight.
fn conv_init<E: Element>(
    rng: &mut impl Rng,
    out: usize,
    in_per_group: usize,
    kh: usize,
    kw: usize,
) -> Tensor<E> {
    let fan_in = (in_per_group * kh * kw) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    let data: Vec<E> = (0..out * in_per_group * kh * kw)
        .map(|_| E::from_f64(normal.sample(rng)))
        .collect();
    Tensor::new(vec![out, in_per_group, kh, kw], data).expect("init shape")
}

fn conv_bn<E: Element>(
    rng: &mut impl Rng,
    out: usize,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
) -> ConvBn<E> {
    let in_per_group = in_channels / groups;
    ConvBn {
        weight: conv_init(rng, out, in_per_group, kernel, kernel),
        stride,
        padding,
        groups,
        gamma: Tensor::full(vec![out], E::one()),
        beta: Tensor::zeros(vec![out]),
        running_mean: Tensor::zeros(vec![out]),
        running_var: Tensor::full(vec![out], E::one()),
    }
}

fn fc_init<E: Element>(rng: &mut impl Rng, classes: usize, features: usize) -> (Tensor<E>, Tensor<E>) {
    let normal = Normal::new(0.0, 1.0 / (features as f64).sqrt()).expect("finite std");
    let w: Vec<E> = (0..classes * features)
        .map(|_| E::from_f64(normal.sample(rng)))
        .collect();
    (
        Tensor::new(vec![classes, features], w).expect("init shape"),
        Tensor::zeros(vec![classes]),
    )
}

fn basic_block<E: Element>(
    rng: &mut impl Rng,
    name: String,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
) -> BlockSpec<E> {
    let downsample = if stride != 1 || in_channels != out_channels {
        Some(conv_bn(rng, out_channels, in_channels, 1, stride, 0, 1))
    } else {
        None
    };
    BlockSpec {
        name,
        stride,
        in_channels,
        mid_channels: out_channels,
        out_channels,
        body: BlockBody::Basic {
            conv1: conv_bn(rng, out_channels, in_channels, 3, stride, 1, 1),
            conv2: conv_bn(rng, out_channels, out_channels, 3, 1, 1, 1),
            downsample,
        },
    }
}

fn basic_stages<E: Element>(
    rng: &mut impl Rng,
    widths: &[usize],
    depths: &[usize],
    mut carried: usize,
    first_stage_stride: usize,
) -> Vec<Stage<E>> {
    let mut stages = Vec::with_capacity(widths.len());
    for (si, (&w, &d)) in widths.iter().zip(depths.iter()).enumerate() {
        let name = format!("layer{}", si + 1);
        let mut blocks = Vec::with_capacity(d);
        for bi in 0..d {
            let stride = if bi == 0 {
                if si == 0 { first_stage_stride } else { 2 }
            } else {
                1
            };
            blocks.push(basic_block(rng, format!("{name}.{bi}"), carried, w, stride));
            carried = w;
        }
        stages.push(Stage { name, blocks });
    }
    stages
}

/// Compact residual net for 32x32 inputs: 3x3 stride-1 stem, no pooling,
/// one width per stage. `widths` and `depths` must have the same length.
pub fn tiny_resnet<E: Element>(
    widths: &[usize],
    depths: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<ArchGraph<E>> {
    if widths.is_empty() || widths.len() != depths.len() {
        return Err(Error::graph(format!(
            "widths ({}) and depths ({}) must be non-empty and equal length",
            widths.len(),
            depths.len()
        )));
    }
    if depths.iter().any(|&d| d == 0) {
        return Err(Error::graph("every stage needs at least one block".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = Stem {
        conv: conv_bn(&mut rng, widths[0], 3, 3, 1, 1, 1),
        max_pool: None,
    };
    let stages = basic_stages(&mut rng, widths, depths, widths[0], 1);
    let (fc_weight, fc_bias) = fc_init(&mut rng, num_classes, *widths.last().unwrap());
    let graph = ArchGraph {
        family: "tiny_resnet".to_string(),
        input_channels: 3,
        num_classes,
        stem,
        stages,
        head: Head { pre_conv: None, fc_weight, fc_bias },
    };
    super::invariants_ok(&graph)?;
    Ok(graph)
}

fn big_resnet<E: Element>(family: &str, depths: &[usize], num_classes: usize, seed: u64) -> Result<ArchGraph<E>> {
    let widths = [64usize, 128, 256, 512];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = Stem {
        conv: conv_bn(&mut rng, 64, 3, 7, 2, 3, 1),
        max_pool: Some(PoolArgs { kernel: 3, stride: 2, padding: 1 }),
    };
    let stages = basic_stages(&mut rng, &widths, depths, 64, 1);
    let (fc_weight, fc_bias) = fc_init(&mut rng, num_classes, 512);
    let graph = ArchGraph {
        family: family.to_string(),
        input_channels: 3,
        num_classes,
        stem,
        stages,
        head: Head { pre_conv: None, fc_weight, fc_bias },
    };
    super::invariants_ok(&graph)?;
    Ok(graph)
}

/// Standard 18-layer residual net with the 7x7 stem and 3x3 max pool.
pub fn resnet18<E: Element>(num_classes: usize, seed: u64) -> Result<ArchGraph<E>> {
    big_resnet("resnet18", &[2, 2, 2, 2], num_classes, seed)
}

/// Standard 34-layer residual net.
pub fn resnet34<E: Element>(num_classes: usize, seed: u64) -> Result<ArchGraph<E>> {
    big_resnet("resnet34", &[3, 4, 6, 3], num_classes, seed)
}

fn inverted_block<E: Element>(
    rng: &mut impl Rng,
    name: String,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    expand_ratio: usize,
) -> BlockSpec<E> {
    let mid = in_channels * expand_ratio;
    let expand = if expand_ratio != 1 {
        Some(conv_bn(rng, mid, in_channels, 1, 1, 0, 1))
    } else {
        None
    };
    BlockSpec {
        name,
        stride,
        in_channels,
        mid_channels: mid,
        out_channels,
        body: BlockBody::Inverted {
            expand,
            depthwise: conv_bn(rng, mid, mid, 3, stride, 1, mid),
            project: conv_bn(rng, out_channels, mid, 1, 1, 0, 1),
        },
    }
}

/// Width-1.0 inverted-residual net. Present for structural work (profiling,
/// pruning-plan validation); the training path covers basic blocks only.
pub fn mobilenet_v2<E: Element>(num_classes: usize, seed: u64) -> Result<ArchGraph<E>> {
    // (expand ratio, output channels, repeats, first stride)
    let cfg: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = Stem {
        conv: conv_bn(&mut rng, 32, 3, 3, 2, 1, 1),
        max_pool: None,
    };
    let mut carried = 32usize;
    let mut stages = Vec::with_capacity(cfg.len());
    for (si, &(t, c, n, s)) in cfg.iter().enumerate() {
        let name = format!("bottleneck{}", si + 1);
        let mut blocks = Vec::with_capacity(n);
        for bi in 0..n {
            let stride = if bi == 0 { s } else { 1 };
            blocks.push(inverted_block(&mut rng, format!("{name}.{bi}"), carried, c, stride, t));
            carried = c;
        }
        stages.push(Stage { name, blocks });
    }
    let pre_conv = conv_bn(&mut rng, 1280, carried, 1, 1, 0, 1);
    let (fc_weight, fc_bias) = fc_init(&mut rng, num_classes, 1280);
    let graph = ArchGraph {
        family: "mobilenet_v2".to_string(),
        input_channels: 3,
        num_classes,
        stem,
        stages,
        head: Head { pre_conv: Some(pre_conv), fc_weight, fc_bias },
    };
    super::invariants_ok(&graph)?;
    Ok(graph)
}

impl<E: Element> fmt::Display for ArchGraph<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ({} -> {} classes)", self.family, self.input_channels, self.num_classes)?;
        let sc = &self.stem.conv;
        write!(
            f,
            "  stem: conv {}x{} s{} {} -> {}",
            sc.kernel().0,
            sc.kernel().1,
            sc.stride,
            sc.in_channels(),
            sc.out_channels()
        )?;
        if let Some(p) = &self.stem.max_pool {
            write!(f, ", maxpool {}x{} s{}", p.kernel, p.kernel, p.stride)?;
        }
        writeln!(f)?;
        for stage in &self.stages {
            writeln!(f, "  {}:", stage.name)?;
            for b in &stage.blocks {
                let kind = match b.kind() {
                    super::BlockKind::BasicResidual => {
                        if b.has_downsample() { "basic+proj" } else { "basic" }
                    }
                    super::BlockKind::InvertedResidual => {
                        if b.uses_residual() { "inverted+skip" } else { "inverted" }
                    }
                };
                writeln!(
                    f,
                    "    {:<14} {:<14} s{}  {} -> {} -> {}",
                    b.name, kind, b.stride, b.in_channels, b.mid_channels, b.out_channels
                )?;
            }
        }
        match &self.head.pre_conv {
            Some(pc) => writeln!(
                f,
                "  head: conv 1x1 {} -> {}, pool, fc {} -> {}",
                pc.in_channels(),
                pc.out_channels(),
                self.head.fc_weight.dims()[1],
                self.num_classes
            ),
            None => writeln!(
                f,
                "  head: pool, fc {} -> {}",
                self.head.fc_weight.dims()[1],
                self.num_classes
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::check_residual_invariants;

    #[test]
    fn builders_are_seed_deterministic() {
        let a = tiny_resnet::<f32>(&[16, 32, 64], &[2, 2, 2], 5, 7).unwrap();
        let b = tiny_resnet::<f32>(&[16, 32, 64], &[2, 2, 2], 5, 7).unwrap();
        let c = tiny_resnet::<f32>(&[16, 32, 64], &[2, 2, 2], 5, 8).unwrap();
        let mut same = true;
        let mut differs = false;
        a.visit_params(&mut |name, t| {
            let tb = param_by_name(&b, name);
            let tc = param_by_name(&c, name);
            same &= t.bit_eq(&tb);
            differs |= !t.bit_eq(&tc);
        });
        assert!(same, "same seed must reproduce weights bit for bit");
        assert!(differs, "different seeds must produce different weights");
    }

    fn param_by_name(g: &crate::graph::ArchGraph<f32>, want: &str) -> trimnet_tensor::Tensor<f32> {
        let mut found = None;
        g.visit_params(&mut |n, t| {
            if n == want {
                found = Some(t.clone());
            }
        });
        found.unwrap_or_else(|| panic!("missing param {want}"))
    }

    #[test]
    fn zoo_members_pass_invariants() {
        assert!(check_residual_invariants(&resnet18::<f32>(100, 1).unwrap()).is_empty());
        assert!(check_residual_invariants(&resnet34::<f32>(100, 1).unwrap()).is_empty());
        assert!(check_residual_invariants(&mobilenet_v2::<f32>(1000, 1).unwrap()).is_empty());
    }

    #[test]
    fn mobilenet_first_block_has_no_expand() {
        let g = mobilenet_v2::<f32>(10, 1).unwrap();
        let b = &g.stages[0].blocks[0];
        match &b.body {
            crate::graph::BlockBody::Inverted { expand, .. } => assert!(expand.is_none()),
            _ => panic!("expected inverted block"),
        }
        assert_eq!(b.mid_channels, 32);
        assert_eq!(b.out_channels, 16);
    }

    #[test]
    fn arch_dump_mentions_every_block() {
        let g = tiny_resnet::<f32>(&[16, 32, 64], &[2, 2, 2], 5, 42).unwrap();
        let dump = g.to_string();
        for r in g.enumerate_blocks() {
            assert!(dump.contains(&r.name), "dump missing {}", r.name);
        }
        assert!(dump.contains("basic+proj"));
    }
}
