//! Exact parameter and multiply-accumulate accounting.
//!
//! Counts follow the conv-MAC convention: a convolution contributes
//! `Cout * (Cin/groups) * kh * kw * H' * W'` multiply-accumulates, a linear
//! layer `in * out`, and normalization/activation/pooling contribute zero.
//! Parameter counts cover every stored weight, bias, and norm scale/shift;
//! running statistics are buffers and are excluded.

use std::fmt;

use serde::{Deserialize, Serialize};
use trimnet_tensor::ops::conv_out_extent;
use trimnet_tensor::Element;

use crate::graph::{ArchGraph, BlockBody, ConvBn};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeProfile {
    /// `[1, C, H, W]` shape the MAC figures refer to.
    pub input_shape: Vec<usize>,
    pub total_params: u64,
    pub total_macs: u64,
    pub layers: Vec<LayerProfile>,
}

struct Walker {
    layers: Vec<LayerProfile>,
    h: usize,
    w: usize,
}

impl Walker {
    fn push(&mut self, name: &str, params: u64, macs: u64, shape: Vec<usize>) {
        self.layers.push(LayerProfile { name: name.to_string(), params, macs, output_shape: shape });
    }

    /// Conv + its norm as two rows; advances the spatial extents.
    fn conv_bn<E: Element>(&mut self, conv_name: &str, bn_name: &str, cb: &ConvBn<E>) -> Result<()> {
        let (kh, kw) = cb.kernel();
        let oh = conv_out_extent(self.h, kh, cb.stride, cb.padding)
            .map_err(|e| Error::graph(format!("{conv_name}: {e}")))?;
        let ow = conv_out_extent(self.w, kw, cb.stride, cb.padding)
            .map_err(|e| Error::graph(format!("{conv_name}: {e}")))?;
        let cout = cb.out_channels() as u64;
        let per_pos = cout * (cb.in_channels() / cb.groups) as u64 * (kh * kw) as u64;
        self.push(
            conv_name,
            cb.weight.numel() as u64,
            per_pos * (oh * ow) as u64,
            vec![1, cb.out_channels(), oh, ow],
        );
        self.push(bn_name, 2 * cout, 0, vec![1, cb.out_channels(), oh, ow]);
        self.h = oh;
        self.w = ow;
        Ok(())
    }
}

/// Walks the graph at `height x width` input resolution and returns the
/// per-layer breakdown with exact totals.
pub fn profile<E: Element>(graph: &ArchGraph<E>, height: usize, width: usize) -> Result<ComputeProfile> {
    let mut wk = Walker { layers: Vec::new(), h: height, w: width };
    wk.conv_bn("stem.conv", "stem.bn", &graph.stem.conv)?;
    if let Some(p) = &graph.stem.max_pool {
        let oh = conv_out_extent(wk.h, p.kernel, p.stride, p.padding)
            .map_err(|e| Error::graph(format!("stem.pool: {e}")))?;
        let ow = conv_out_extent(wk.w, p.kernel, p.stride, p.padding)
            .map_err(|e| Error::graph(format!("stem.pool: {e}")))?;
        let c = graph.stem.conv.out_channels();
        wk.push("stem.pool", 0, 0, vec![1, c, oh, ow]);
        wk.h = oh;
        wk.w = ow;
    }

    for stage in &graph.stages {
        for b in &stage.blocks {
            let n = &b.name;
            match &b.body {
                BlockBody::Basic { conv1, conv2, downsample } => {
                    // The skip branch sees the block input resolution.
                    let (in_h, in_w) = (wk.h, wk.w);
                    wk.conv_bn(&format!("{n}.conv1"), &format!("{n}.bn1"), conv1)?;
                    wk.conv_bn(&format!("{n}.conv2"), &format!("{n}.bn2"), conv2)?;
                    if let Some(ds) = downsample {
                        let (out_h, out_w) = (wk.h, wk.w);
                        wk.h = in_h;
                        wk.w = in_w;
                        wk.conv_bn(&format!("{n}.downsample.conv"), &format!("{n}.downsample.bn"), ds)?;
                        if (wk.h, wk.w) != (out_h, out_w) {
                            return Err(Error::graph(format!(
                                "{n}: skip branch resolution {}x{} disagrees with main branch {out_h}x{out_w}",
                                wk.h, wk.w
                            )));
                        }
                    }
                }
                BlockBody::Inverted { expand, depthwise, project } => {
                    if let Some(e) = expand {
                        wk.conv_bn(&format!("{n}.expand"), &format!("{n}.expand_bn"), e)?;
                    }
                    wk.conv_bn(&format!("{n}.depthwise"), &format!("{n}.depthwise_bn"), depthwise)?;
                    wk.conv_bn(&format!("{n}.project"), &format!("{n}.project_bn"), project)?;
                }
            }
        }
    }

    if let Some(pc) = &graph.head.pre_conv {
        wk.conv_bn("head.conv", "head.bn", pc)?;
    }
    let feat = graph.head.fc_weight.dims()[1];
    wk.push("head.pool", 0, 0, vec![1, feat]);
    let classes = graph.num_classes as u64;
    wk.push(
        "head.fc",
        graph.head.fc_weight.numel() as u64 + graph.head.fc_bias.numel() as u64,
        feat as u64 * classes,
        vec![1, graph.num_classes],
    );

    let total_params = wk.layers.iter().map(|l| l.params).sum();
    let total_macs = wk.layers.iter().map(|l| l.macs).sum();
    Ok(ComputeProfile {
        input_shape: vec![1, graph.input_channels, height, width],
        total_params,
        total_macs,
        layers: wk.layers,
    })
}

/// Side-by-side reduction between two profiles taken at the same input shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileDiff {
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    /// Signed change in percent; pruning yields negative values.
    pub params_change_pct: f64,
    pub macs_change_pct: f64,
}

pub fn change_pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        return 0.0;
    }
    (after as f64 - before as f64) / before as f64 * 100.0
}

/// One-decimal signed percent, with exact zero rendered without a sign.
pub fn format_pct(pct: f64) -> String {
    if pct == 0.0 {
        "0.0%".to_string()
    } else {
        format!("{pct:+.1}%")
    }
}

pub fn profile_diff(before: &ComputeProfile, after: &ComputeProfile) -> Result<ProfileDiff> {
    if before.input_shape != after.input_shape {
        return Err(Error::graph(format!(
            "profiles taken at different input shapes: {:?} vs {:?}",
            before.input_shape, after.input_shape
        )));
    }
    Ok(ProfileDiff {
        params_before: before.total_params,
        params_after: after.total_params,
        macs_before: before.total_macs,
        macs_after: after.total_macs,
        params_change_pct: change_pct(before.total_params, after.total_params),
        macs_change_pct: change_pct(before.total_macs, after.total_macs),
    })
}

impl fmt::Display for ComputeProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_w = self
            .layers
            .iter()
            .map(|l| l.name.len())
            .chain(["layer".len(), "total".len()].into_iter())
            .max()
            .unwrap_or(5);
        writeln!(f, "input {:?}", self.input_shape)?;
        writeln!(f, "{:<name_w$}  {:>12}  {:>14}  output", "layer", "params", "macs")?;
        for l in &self.layers {
            let shape = l
                .output_shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            writeln!(f, "{:<name_w$}  {:>12}  {:>14}  {shape}", l.name, l.params, l.macs)?;
        }
        write!(f, "{:<name_w$}  {:>12}  {:>14}", "total", self.total_params, self.total_macs)
    }
}

impl fmt::Display for ProfileDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "params: {} -> {} ({})",
            self.params_before,
            self.params_after,
            format_pct(self.params_change_pct)
        )?;
        write!(
            f,
            "macs:   {} -> {} ({})",
            self.macs_before,
            self.macs_after,
            format_pct(self.macs_change_pct)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{mobilenet_v2, resnet18, resnet34, tiny_resnet};

    #[test]
    fn single_conv_hand_arithmetic() {
        // One 3x3 conv, 1 -> 1 channels, 8x8 input, stride 1, pad 1:
        // 9 weight params, 9 macs at each of the 64 output positions.
        use crate::graph::{ArchGraph, ConvBn, Head, Stem};
        use trimnet_tensor::Tensor;
        let g = ArchGraph::<f32> {
            family: "probe".to_string(),
            input_channels: 1,
            num_classes: 2,
            stem: Stem { conv: ConvBn::zeros(1, 1, 3, 3, 1, 1, 1), max_pool: None },
            stages: vec![],
            head: Head {
                pre_conv: None,
                fc_weight: Tensor::zeros(vec![2, 1]),
                fc_bias: Tensor::zeros(vec![2]),
            },
        };
        let p = profile(&g, 8, 8).unwrap();
        let stem = &p.layers[0];
        assert_eq!(stem.name, "stem.conv");
        assert_eq!(stem.params, 9);
        assert_eq!(stem.macs, 576);
        assert_eq!(stem.output_shape, vec![1, 1, 8, 8]);
    }

    #[test]
    fn totals_equal_breakdown_sums_and_param_visitor() {
        let g = tiny_resnet::<f32>(&[16, 32, 64], &[2, 2, 2], 5, 1).unwrap();
        let p = profile(&g, 32, 32).unwrap();
        assert_eq!(p.total_params, p.layers.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(p.total_macs, p.layers.iter().map(|l| l.macs).sum::<u64>());
        assert_eq!(p.total_params, g.num_params());
    }

    #[test]
    fn tiny_resnet_matches_closed_form_count() {
        let (widths, depths, classes) = (&[16usize, 32, 64], &[2usize, 2, 2], 5usize);
        let g = tiny_resnet::<f32>(widths, depths, classes, 3).unwrap();
        let p = profile(&g, 32, 32).unwrap();

        // Independent layer-by-layer count, no walker involved.
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k;
        let bn = |c: usize| 2 * c;
        let mut params = conv(16, 3, 3) + bn(16);
        let mut prev = 16usize;
        for (si, (&w, &d)) in widths.iter().zip(depths).enumerate() {
            for bi in 0..d {
                let transition = bi == 0 && si > 0;
                params += conv(w, prev, 3) + bn(w) + conv(w, w, 3) + bn(w);
                if transition {
                    params += conv(w, prev, 1) + bn(w);
                }
                prev = w;
            }
        }
        params += 64 * classes + classes;
        assert_eq!(p.total_params, params as u64);

        // MACs the same way: resolution halves at each transition stage.
        let cmac = |cout: usize, cin: usize, k: usize, hw: usize| (cout * cin * k * k * hw) as u64;
        let mut macs = cmac(16, 3, 3, 32 * 32);
        let mut hw = 32 * 32;
        prev = 16;
        for (si, (&w, &d)) in widths.iter().zip(depths).enumerate() {
            for bi in 0..d {
                let transition = bi == 0 && si > 0;
                if transition {
                    hw /= 4;
                }
                macs += cmac(w, prev, 3, hw) + cmac(w, w, 3, hw);
                if transition {
                    macs += cmac(w, prev, 1, hw);
                }
                prev = w;
            }
        }
        macs += (64 * classes) as u64;
        assert_eq!(p.total_macs, macs);
    }

    #[test]
    fn resnet18_param_count_near_published_value() {
        let g = resnet18::<f32>(100, 0).unwrap();
        let p = profile(&g, 224, 224).unwrap();
        let anchor = 11.18e6;
        let rel = (p.total_params as f64 - anchor).abs() / anchor;
        assert!(rel < 0.01, "resnet18 params {} vs anchor {anchor}", p.total_params);
        assert_eq!(p.total_params, 11_227_812);
    }

    #[test]
    fn resnet34_param_count_near_published_value() {
        let g = resnet34::<f32>(100, 0).unwrap();
        let p = profile(&g, 224, 224).unwrap();
        let anchor = 21.29e6;
        let rel = (p.total_params as f64 - anchor).abs() / anchor;
        assert!(rel < 0.01, "resnet34 params {} vs anchor {anchor}", p.total_params);
        assert_eq!(p.total_params, 21_335_972);
    }

    #[test]
    fn mobilenet_v2_matches_reference_total() {
        let g = mobilenet_v2::<f32>(1000, 0).unwrap();
        let p = profile(&g, 224, 224).unwrap();
        assert_eq!(p.total_params, 3_504_872);
    }

    #[test]
    fn shapes_agree_with_a_real_forward_pass() {
        let g = tiny_resnet::<f32>(&[8, 16, 24], &[2, 2, 2], 4, 7).unwrap();
        let p = profile(&g, 32, 32).unwrap();
        let x = trimnet_tensor::Tensor::<f32>::zeros(vec![1, 3, 32, 32]);
        let out = g.forward_eval(&x, false).unwrap();
        let trace: std::collections::BTreeMap<_, _> = out.shape_trace.into_iter().collect();
        for r in g.enumerate_blocks() {
            let row = p
                .layers
                .iter()
                .find(|l| l.name == format!("{}.bn2", r.name))
                .unwrap();
            assert_eq!(row.output_shape, trace[&r.name], "{}", r.name);
        }
        let fc = p.layers.last().unwrap();
        assert_eq!(fc.output_shape, trace["logits"]);
    }

    #[test]
    fn diff_reproduces_published_reduction() {
        let mk = |params: u64| ComputeProfile {
            input_shape: vec![1, 3, 224, 224],
            total_params: params,
            total_macs: 100,
            layers: vec![],
        };
        let d = profile_diff(&mk(11_180_000), &mk(3_090_000)).unwrap();
        assert_eq!(format_pct(d.params_change_pct), "-72.4%");

        let same = profile_diff(&mk(500), &mk(500)).unwrap();
        assert_eq!(format_pct(same.params_change_pct), "0.0%");
        assert_eq!(format_pct(same.macs_change_pct), "0.0%");

        let mut other = mk(1);
        other.input_shape = vec![1, 3, 32, 32];
        assert!(profile_diff(&mk(1), &other).is_err());
    }

    #[test]
    fn diff_matches_scalar_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let b: u64 = rng.gen_range(1..10_000_000);
            let a: u64 = rng.gen_range(1..10_000_000);
            let mk = |p: u64| ComputeProfile {
                input_shape: vec![1, 3, 8, 8],
                total_params: p,
                total_macs: p / 2 + 1,
                layers: vec![],
            };
            let d = profile_diff(&mk(b), &mk(a)).unwrap();
            let expect = (a as f64 - b as f64) / b as f64 * 100.0;
            assert_eq!(d.params_change_pct, expect);
        }
    }

    #[test]
    fn table_lists_every_layer_once() {
        let g = tiny_resnet::<f32>(&[8, 16], &[1, 1], 3, 0).unwrap();
        let p = profile(&g, 16, 16).unwrap();
        let text = p.to_string();
        assert!(text.contains("layer2.0.downsample.conv"));
        assert!(text.lines().last().unwrap().starts_with("total"));
    }
}
