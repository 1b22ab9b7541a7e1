//! Block saliency scoring: pooled activations, quantile binning, plug-in
//! mutual information against labels, and the cheap weight-based proxy
//! scores used for channel selection.
//!
//! All information quantities are in nats. Per-channel computations run in
//! parallel but the channel mean is a fixed-order reduction, so scores do
//! not depend on thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trimnet_tensor::ops::global_avg_pool;
use trimnet_tensor::{Element, Tensor};

use crate::data::{shuffled_indices, Dataset};
use crate::graph::{ArchGraph, BlockBody};
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_PROBE_BATCH: usize = 64;
pub const DEFAULT_PROBE_MAX: usize = 5000;

/// Fixed, seeded subset of the training split used for every scoring pass
/// in one pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSet {
    pub indices: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl ProbeSet {
    pub fn draw(dataset_len: usize, batch_size: usize, max_samples: usize, seed: u64) -> Result<Self> {
        if dataset_len == 0 {
            return Err(Error::config("probe", "dataset is empty"));
        }
        if batch_size == 0 || max_samples < batch_size {
            return Err(Error::config(
                "probe",
                format!("need max_samples >= batch_size >= 1, got {max_samples} / {batch_size}"),
            ));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut indices = shuffled_indices(dataset_len, &mut rng);
        indices.truncate(max_samples);
        Ok(ProbeSet { indices, batch_size, seed })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Saliency snapshot for one graph: block scores (channel-mean MI), the
/// ascending pruning order, and per-stage plane proxy scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreTable {
    pub block_scores: BTreeMap<String, f64>,
    pub per_plane_scores: BTreeMap<String, Vec<f64>>,
    pub ranking_ascending: Vec<String>,
    pub bins: usize,
    pub probe_seed: u64,
    pub estimator: String,
}

/// Spatial mean per sample and channel, `[N,C,H,W] -> [N,C]`.
pub fn pool_activations<E: Element>(
    taps: &[(String, Tensor<E>)],
) -> Result<Vec<(String, Tensor<E>)>> {
    taps.iter()
        .map(|(name, t)| Ok((name.clone(), global_avg_pool(t)?)))
        .collect()
}

/// Quantile bin ids with edges at the empirical k/bins quantiles. Values
/// strictly below an edge fall in the lower bin, so heavy ties merge bins.
/// Constant columns collapse to id 0.
pub fn quantile_bin(column: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return Err(Error::config("bins", format!("need at least 2 bins, got {bins}")));
    }
    let n = column.len();
    if n < bins {
        return Err(Error::config(
            "bins",
            format!("column has {n} values, cannot support {bins} quantile bins"),
        ));
    }
    if column.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("column", "non-finite value in pooled activations"));
    }
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[n - 1] {
        return Ok(vec![0; n]);
    }
    let edges: Vec<f64> = (1..bins).map(|k| sorted[n * k / bins]).collect();
    Ok(column
        .iter()
        .map(|&v| edges.partition_point(|&e| e <= v))
        .collect())
}

fn neumaier(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Plug-in mutual information over the joint empirical histogram of two
/// discrete sequences, in nats. Nonnegative up to rounding (clamped at 0).
pub fn mutual_information(bin_ids: &[usize], labels: &[usize]) -> Result<f64> {
    if bin_ids.is_empty() || bin_ids.len() != labels.len() {
        return Err(Error::config(
            "mutual_information",
            format!("{} bin ids vs {} labels", bin_ids.len(), labels.len()),
        ));
    }
    let n = bin_ids.len();
    let zc = bin_ids.iter().max().unwrap() + 1;
    let yc = labels.iter().max().unwrap() + 1;
    let mut joint = vec![0u64; zc * yc];
    let mut pz = vec![0u64; zc];
    let mut py = vec![0u64; yc];
    for (&z, &y) in bin_ids.iter().zip(labels) {
        joint[z * yc + y] += 1;
        pz[z] += 1;
        py[y] += 1;
    }
    let nf = n as f64;
    // Each product is split exactly with fma and both streams are summed
    // compensated, so one rounding remains at the end. A uniform table with
    // bin == label then lands on ln(classes) bitwise.
    let mut hi = 0.0f64;
    let mut comp = 0.0f64;
    let mut lo = 0.0f64;
    for (idx, &c) in joint.iter().enumerate().filter(|(_, &c)| c > 0) {
        let (z, y) = (idx / yc, idx % yc);
        let p = c as f64 / nf;
        let l = ((c as f64 * nf) / (pz[z] as f64 * py[y] as f64)).ln();
        let prod = p * l;
        lo += p.mul_add(l, -prod);
        let t = hi + prod;
        comp += if hi.abs() >= prod.abs() { (hi - t) + prod } else { (prod - t) + hi };
        hi = t;
    }
    Ok((hi + (comp + lo)).max(0.0))
}

/// Channel-mean MI of pooled activations `[N, C]` against labels: bins each
/// channel, measures its MI, then averages over channels in index order.
pub fn channel_mean_mi<E: Element>(pooled: &Tensor<E>, labels: &[usize], bins: usize) -> Result<f64> {
    let dims = pooled.dims();
    if dims.len() != 2 || dims[0] != labels.len() {
        return Err(Error::config(
            "pooled",
            format!("expected [{}, C] pooled activations, got {dims:?}", labels.len()),
        ));
    }
    let (n, c) = (dims[0], dims[1]);
    let data = pooled.data();
    let per_channel: Vec<Result<f64>> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let column: Vec<f64> = (0..n).map(|i| data[i * c + ch].as_f64()).collect();
            mutual_information(&quantile_bin(&column, bins)?, labels)
        })
        .collect();
    let mut scores = Vec::with_capacity(c);
    for r in per_channel {
        scores.push(r?);
    }
    Ok(neumaier(scores.iter().copied()) / c as f64)
}

/// Ranks every block by the channel-mean MI of its pooled output on the
/// probe set (eval-mode statistics, no augmentation). Also fills in the
/// plane proxy scores for each stage.
pub fn score_blocks<E: Element>(
    graph: &ArchGraph<E>,
    dataset: &Dataset<E>,
    probe: &ProbeSet,
    bins: usize,
) -> Result<ScoreTable> {
    if probe.is_empty() {
        return Err(Error::config("probe", "probe set is empty"));
    }
    let refs = graph.enumerate_blocks();
    let mut pooled_rows: BTreeMap<String, Vec<E>> = refs
        .iter()
        .map(|r| (r.name.clone(), Vec::new()))
        .collect();
    let mut labels = Vec::with_capacity(probe.len());

    for chunk in probe.indices.chunks(probe.batch_size) {
        let (images, batch_labels) = dataset.batch(chunk, None)?;
        let out = graph.forward_eval(&images, true)?;
        for (name, pooled) in pool_activations(&out.taps)? {
            pooled_rows
                .get_mut(&name)
                .expect("tap name matches enumeration")
                .extend_from_slice(pooled.data());
        }
        labels.extend(batch_labels);
    }

    let mut block_scores = BTreeMap::new();
    for r in &refs {
        let rows = pooled_rows.remove(&r.name).unwrap();
        let channels = rows.len() / labels.len();
        let pooled = Tensor::new(vec![labels.len(), channels], rows)?;
        let s = channel_mean_mi(&pooled, &labels, bins)?;
        if !s.is_finite() || s < 0.0 {
            return Err(Error::graph(format!("block `{}` scored non-finite or negative MI {s}", r.name)));
        }
        block_scores.insert(r.name.clone(), s);
    }

    // Ascending by score; ties keep enumeration order.
    let mut order: Vec<usize> = (0..refs.len()).collect();
    order.sort_by(|&a, &b| {
        block_scores[&refs[a].name]
            .total_cmp(&block_scores[&refs[b].name])
            .then(a.cmp(&b))
    });
    let ranking_ascending = order.into_iter().map(|i| refs[i].name.clone()).collect();

    let mut per_plane_scores = BTreeMap::new();
    for stage in &graph.stages {
        per_plane_scores.insert(stage.name.clone(), proxy_plane_scores(graph, &stage.name)?);
    }

    Ok(ScoreTable {
        block_scores,
        per_plane_scores,
        ranking_ascending,
        bins,
        probe_seed: probe.seed,
        estimator: "quantile_mi".to_string(),
    })
}

/// Min-max to [0, 1]; a constant vector maps to all zeros.
fn minmax(v: &[f64]) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in v {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if hi == lo {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

fn basic_parts<E: Element>(
    graph: &ArchGraph<E>,
    block_name: &str,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>, Tensor<E>)> {
    let block = graph
        .block_by_name(block_name)
        .ok_or_else(|| Error::graph(format!("no block named `{block_name}`")))?;
    match &block.body {
        BlockBody::Basic { conv1, conv2, .. } => Ok((
            conv1.gamma.clone(),
            conv1.weight.clone(),
            conv2.gamma.clone(),
            conv2.weight.clone(),
        )),
        BlockBody::Inverted { .. } => Err(Error::unsupported(format!(
            "block `{block_name}`: proxy scores are defined for basic residual blocks only"
        ))),
    }
}

fn row_l1<E: Element>(weight: &Tensor<E>) -> Vec<f64> {
    let dims = weight.dims();
    let row = dims[1] * dims[2] * dims[3];
    weight
        .data()
        .chunks_exact(row)
        .map(|r| neumaier(r.iter().map(|v| v.as_f64().abs())))
        .collect()
}

/// Per-plane saliency for one stage: for every block, min-max-normalized
/// norm-scale magnitudes plus min-max-normalized second-conv filter norms,
/// summed across the stage's blocks.
pub fn proxy_plane_scores<E: Element>(graph: &ArchGraph<E>, stage_name: &str) -> Result<Vec<f64>> {
    let (_, stage) = graph
        .stage_by_name(stage_name)
        .ok_or_else(|| Error::graph(format!("no stage named `{stage_name}`")))?;
    let width = stage.blocks[0].out_channels;
    let mut scores = vec![0.0f64; width];
    for block in &stage.blocks {
        let (_, _, gamma2, conv2) = basic_parts(graph, &block.name)?;
        let g: Vec<f64> = gamma2.data().iter().map(|v| v.as_f64().abs()).collect();
        let l1 = row_l1(&conv2);
        if g.len() != width || l1.len() != width {
            return Err(Error::graph(format!(
                "block `{}` produces {} planes, stage is {width} wide",
                block.name,
                g.len()
            )));
        }
        for (s, (gn, ln)) in scores.iter_mut().zip(minmax(&g).into_iter().zip(minmax(&l1))) {
            *s += gn + ln;
        }
    }
    Ok(scores)
}

/// Per-mid-channel saliency for one block: min-max-normalized first-norm
/// scale magnitudes plus min-max-normalized first-conv filter norms.
pub fn proxy_mid_scores<E: Element>(graph: &ArchGraph<E>, block_name: &str) -> Result<Vec<f64>> {
    let (gamma1, conv1, _, _) = basic_parts(graph, block_name)?;
    let g: Vec<f64> = gamma1.data().iter().map(|v| v.as_f64().abs()).collect();
    let l1 = row_l1(&conv1);
    Ok(minmax(&g)
        .into_iter()
        .zip(minmax(&l1))
        .map(|(a, b)| a + b)
        .collect())
}
