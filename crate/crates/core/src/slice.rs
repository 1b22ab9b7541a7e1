//! Fine-scale channel surgery: stage-plane co-slicing and block mid-channel
//! slicing.
//!
//! Both edits restrict tensors to a kept index set in original order, so
//! norm statistics stay aligned with their channels. Every op re-verifies
//! the residual invariants and refuses to return an illegal graph; in
//! particular, plane slicing a stage whose first block has an identity skip
//! fails rather than silently breaking the skip.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use trimnet_tensor::{Element, Tensor};

use crate::graph::{ArchGraph, BlockBody, ConvBn};
use crate::mi::{proxy_mid_scores, proxy_plane_scores};
use crate::{Error, Result};

/// Kept-channel plan: plane sets keyed by stage, mid sets keyed by block.
/// Absent keys mean "keep everything".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub planes: BTreeMap<String, Vec<usize>>,
    pub mids: BTreeMap<String, Vec<usize>>,
}

impl SliceSpec {
    /// True when applying the spec would change nothing.
    pub fn is_identity<E: Element>(&self, graph: &ArchGraph<E>) -> bool {
        let planes_full = self.planes.iter().all(|(stage, kept)| {
            graph
                .stage_by_name(stage)
                .map(|(_, s)| kept.len() == s.blocks[0].out_channels)
                .unwrap_or(false)
        });
        let mids_full = self.mids.iter().all(|(block, kept)| {
            graph
                .block_by_name(block)
                .map(|b| kept.len() == b.mid_channels)
                .unwrap_or(false)
        });
        planes_full && mids_full
    }
}

fn check_kept(kept: &[usize], width: usize, what: &str) -> Result<()> {
    if kept.is_empty() || kept.len() > width {
        return Err(Error::graph(format!(
            "{what}: kept set has {} of {width} channels; need between 1 and {width}",
            kept.len()
        )));
    }
    for pair in kept.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::graph(format!(
                "{what}: kept indices must be strictly increasing, saw {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if *kept.last().unwrap() >= width {
        return Err(Error::graph(format!(
            "{what}: kept index {} out of range for width {width}",
            kept.last().unwrap()
        )));
    }
    Ok(())
}

/// Indices of the `k` largest scores, ties broken toward the lower index,
/// returned in ascending order.
pub fn select_planes(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::graph(format!(
            "cannot keep {k} of {} channels",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::graph("non-finite saliency score".to_string()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Rows of a conv weight `[O, I, kh, kw]` restricted to `kept` output filters.
fn take_rows<E: Element>(t: &Tensor<E>, kept: &[usize]) -> Tensor<E> {
    let d = t.dims();
    let row = d[1] * d[2] * d[3];
    let mut data = Vec::with_capacity(kept.len() * row);
    for &r in kept {
        data.extend_from_slice(&t.data()[r * row..(r + 1) * row]);
    }
    Tensor::new(vec![kept.len(), d[1], d[2], d[3]], data).expect("row slice shape")
}

/// Input channels of a dense conv weight restricted to `kept`.
fn take_in_channels<E: Element>(t: &Tensor<E>, kept: &[usize]) -> Tensor<E> {
    let d = t.dims();
    let plane = d[2] * d[3];
    let mut data = Vec::with_capacity(d[0] * kept.len() * plane);
    for o in 0..d[0] {
        for &c in kept {
            let base = (o * d[1] + c) * plane;
            data.extend_from_slice(&t.data()[base..base + plane]);
        }
    }
    Tensor::new(vec![d[0], kept.len(), d[2], d[3]], data).expect("in-channel slice shape")
}

fn take_vec<E: Element>(t: &Tensor<E>, kept: &[usize]) -> Tensor<E> {
    let data: Vec<E> = kept.iter().map(|&i| t.data()[i]).collect();
    Tensor::new(vec![kept.len()], data).expect("vector slice shape")
}

fn take_fc_in<E: Element>(t: &Tensor<E>, kept: &[usize]) -> Tensor<E> {
    let d = t.dims();
    let mut data = Vec::with_capacity(d[0] * kept.len());
    for o in 0..d[0] {
        for &c in kept {
            data.push(t.data()[o * d[1] + c]);
        }
    }
    Tensor::new(vec![d[0], kept.len()], data).expect("fc slice shape")
}

fn slice_out<E: Element>(cb: &mut ConvBn<E>, kept: &[usize]) {
    cb.weight = take_rows(&cb.weight, kept);
    cb.gamma = take_vec(&cb.gamma, kept);
    cb.beta = take_vec(&cb.beta, kept);
    cb.running_mean = take_vec(&cb.running_mean, kept);
    cb.running_var = take_vec(&cb.running_var, kept);
}

fn slice_in<E: Element>(cb: &mut ConvBn<E>, kept: &[usize], context: &str) -> Result<()> {
    if cb.groups != 1 {
        return Err(Error::unsupported(format!(
            "{context}: input slicing of grouped convolutions is not supported"
        )));
    }
    cb.weight = take_in_channels(&cb.weight, kept);
    Ok(())
}

/// Narrows the residual stream of one stage to `kept` planes: every block's
/// second conv and norm lose output channels, the transition projection
/// loses the same outputs, in-stage successors lose the matching inputs, and
/// the consumer downstream (next stage or the head) loses them too.
pub fn co_slice_planes<E: Element>(
    graph: &ArchGraph<E>,
    stage_name: &str,
    kept: &[usize],
) -> Result<ArchGraph<E>> {
    let (si, stage) = graph
        .stage_by_name(stage_name)
        .ok_or_else(|| Error::graph(format!("no stage named `{stage_name}`")))?;
    let width = stage.blocks[0].out_channels;
    check_kept(kept, width, &format!("planes of `{stage_name}`"))?;

    let mut out = graph.clone();
    for (j, block) in out.stages[si].blocks.iter_mut().enumerate() {
        let name = block.name.clone();
        match &mut block.body {
            BlockBody::Basic { conv1, conv2, downsample } => {
                slice_out(conv2, kept);
                if j > 0 {
                    slice_in(conv1, kept, &format!("{name}.conv1"))?;
                }
                if let Some(ds) = downsample {
                    slice_out(ds, kept);
                    if j > 0 {
                        slice_in(ds, kept, &format!("{name}.downsample"))?;
                    }
                }
            }
            BlockBody::Inverted { .. } => {
                return Err(Error::unsupported(format!(
                    "block `{name}`: plane slicing is defined for basic residual blocks only"
                )));
            }
        }
        block.out_channels = kept.len();
        if j > 0 {
            block.in_channels = kept.len();
        }
    }

    if si + 1 < out.stages.len() {
        let next = &mut out.stages[si + 1].blocks[0];
        let name = next.name.clone();
        match &mut next.body {
            BlockBody::Basic { conv1, downsample, .. } => {
                slice_in(conv1, kept, &format!("{name}.conv1"))?;
                if let Some(ds) = downsample {
                    slice_in(ds, kept, &format!("{name}.downsample"))?;
                }
            }
            BlockBody::Inverted { .. } => {
                return Err(Error::unsupported(format!(
                    "block `{name}`: plane slicing is defined for basic residual blocks only"
                )));
            }
        }
        next.in_channels = kept.len();
    } else {
        match &mut out.head.pre_conv {
            Some(pc) => slice_in(pc, kept, "head.conv")?,
            None => out.head.fc_weight = take_fc_in(&out.head.fc_weight, kept),
        }
    }

    crate::graph::invariants_ok(&out)?;
    Ok(out)
}

/// Narrows one block's inner width to `kept` mid channels: first conv and
/// norm lose outputs, second conv loses the matching inputs. The residual
/// wiring is untouched.
pub fn mid_slice<E: Element>(
    graph: &ArchGraph<E>,
    block_name: &str,
    kept: &[usize],
) -> Result<ArchGraph<E>> {
    let mut out = graph.clone();
    let mut found = false;
    for stage in &mut out.stages {
        for block in &mut stage.blocks {
            if block.name != block_name {
                continue;
            }
            found = true;
            check_kept(kept, block.mid_channels, &format!("mids of `{block_name}`"))?;
            match &mut block.body {
                BlockBody::Basic { conv1, conv2, .. } => {
                    slice_out(conv1, kept);
                    slice_in(conv2, kept, &format!("{block_name}.conv2"))?;
                }
                BlockBody::Inverted { .. } => {
                    return Err(Error::unsupported(format!(
                        "block `{block_name}`: mid slicing is defined for basic residual blocks only"
                    )));
                }
            }
            block.mid_channels = kept.len();
        }
    }
    if !found {
        return Err(Error::graph(format!("no block named `{block_name}`")));
    }
    crate::graph::invariants_ok(&out)?;
    Ok(out)
}

/// Proxy-score-driven spec with one keep fraction for planes and one for
/// mids. Plane slicing only targets stages whose first block projects its
/// skip (elsewhere the stage width is pinned by the identity skip); other
/// stages keep their full width.
pub fn build_uniform_slicespec<E: Element>(
    graph: &ArchGraph<E>,
    plane_fraction: f64,
    mid_fraction: f64,
) -> Result<SliceSpec> {
    for (what, f) in [("plane_fraction", plane_fraction), ("mid_fraction", mid_fraction)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config(what, format!("{f} outside (0, 1]")));
        }
    }
    let mut spec = SliceSpec::default();
    for stage in &graph.stages {
        let first = &stage.blocks[0];
        if !matches!(first.body, BlockBody::Basic { .. }) {
            continue;
        }
        if first.has_downsample() {
            let width = first.out_channels;
            let k = ((plane_fraction * width as f64).round() as usize).max(1);
            let scores = proxy_plane_scores(graph, &stage.name)?;
            spec.planes.insert(stage.name.clone(), select_planes(&scores, k)?);
        }
        for block in &stage.blocks {
            let k = ((mid_fraction * block.mid_channels as f64).round() as usize).max(1);
            let scores = proxy_mid_scores(graph, &block.name)?;
            spec.mids.insert(block.name.clone(), select_planes(&scores, k)?);
        }
    }
    Ok(spec)
}

/// Applies every plane set (in stage order), then every mid set. Each step
/// re-verifies the invariants, so a bad spec fails before any output exists.
pub fn apply_slicespec<E: Element>(graph: &ArchGraph<E>, spec: &SliceSpec) -> Result<ArchGraph<E>> {
    let mut out = graph.clone();
    let stage_order: Vec<String> = out.stages.iter().map(|s| s.name.clone()).collect();
    for stage in &stage_order {
        if let Some(kept) = spec.planes.get(stage) {
            out = co_slice_planes(&out, stage, kept)?;
        }
    }
    for name in spec.planes.keys() {
        if !stage_order.contains(name) {
            return Err(Error::graph(format!("slice spec names unknown stage `{name}`")));
        }
    }
    for (block, kept) in &spec.mids {
        out = mid_slice(&out, block, kept)?;
    }
    Ok(out)
}
