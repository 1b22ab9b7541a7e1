//! Constrained greedy block pruning: walk blocks in ascending saliency,
//! mark them for removal while honoring protection and stage survival, and
//! emit the keep configuration for the splice.

use serde::{Deserialize, Serialize};
use trimnet_tensor::Element;

use crate::graph::{protection_rule, ArchGraph, KeepConfig};
use crate::mi::ScoreTable;
use crate::{Error, Result};

/// Outcome of planning: what gets pruned, what survives, and why candidates
/// were passed over. `exhausted` flags a walk that ran out of legal
/// candidates before meeting the budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrunePlan {
    pub ratio: f64,
    pub budget: usize,
    pub pruned: Vec<String>,
    pub keep: KeepConfig,
    pub skipped_protected: Vec<String>,
    pub skipped_stage_survival: Vec<String>,
    pub exhausted: bool,
}

/// Greedy ascending-score walk. The budget is `floor(r * |free blocks|)`;
/// protected blocks and stage-emptying removals are skipped without being
/// counted against it.
pub fn plan_block_prune<E: Element>(
    graph: &ArchGraph<E>,
    scores: &ScoreTable,
    ratio: f64,
) -> Result<PrunePlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config("ratio", format!("{ratio} outside [0, 1)")));
    }
    let refs = graph.enumerate_blocks();
    for r in &refs {
        if !scores.block_scores.contains_key(&r.name) {
            return Err(Error::graph(format!("score table is missing block `{}`", r.name)));
        }
    }
    if scores.ranking_ascending.len() != refs.len() {
        return Err(Error::graph(format!(
            "ranking covers {} blocks, graph has {}",
            scores.ranking_ascending.len(),
            refs.len()
        )));
    }

    let free: usize = refs
        .iter()
        .filter(|r| !protection_rule(graph.block(r), r.block))
        .count();
    let budget = (ratio * free as f64).floor() as usize;

    let mut pruned: Vec<String> = Vec::with_capacity(budget);
    let mut skipped_protected = Vec::new();
    let mut skipped_stage_survival = Vec::new();
    for name in &scores.ranking_ascending {
        if pruned.len() == budget {
            break;
        }
        let r = refs
            .iter()
            .find(|r| &r.name == name)
            .ok_or_else(|| Error::graph(format!("ranking names unknown block `{name}`")))?;
        if protection_rule(graph.block(r), r.block) {
            skipped_protected.push(name.clone());
            continue;
        }
        let stage = &graph.stages[r.stage];
        let survivors = stage
            .blocks
            .iter()
            .filter(|b| b.name != *name && !pruned.contains(&b.name))
            .count();
        if survivors == 0 {
            skipped_stage_survival.push(name.clone());
            continue;
        }
        pruned.push(name.clone());
    }
    let exhausted = pruned.len() < budget;

    let mut keep = KeepConfig { stages: Default::default() };
    for stage in &graph.stages {
        let kept: Vec<usize> = stage
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| !pruned.contains(&b.name))
            .map(|(i, _)| i)
            .collect();
        keep.stages.insert(stage.name.clone(), kept);
    }
    keep.validate(graph)?;

    Ok(PrunePlan {
        ratio,
        budget,
        pruned,
        keep,
        skipped_protected,
        skipped_stage_survival,
        exhausted,
    })
}

/// Splices the planned student out of `graph`. Fails on a stale plan (block
/// sets out of sync) or any structural violation in the result.
pub fn apply_plan<E: Element>(graph: &ArchGraph<E>, plan: &PrunePlan) -> Result<ArchGraph<E>> {
    let refs = graph.enumerate_blocks();
    for name in &plan.pruned {
        if !refs.iter().any(|r| &r.name == name) {
            return Err(Error::graph(format!("plan prunes `{name}`, which this graph does not have")));
        }
    }
    let kept_total: usize = plan.keep.stages.values().map(|v| v.len()).sum();
    if kept_total + plan.pruned.len() != refs.len() {
        return Err(Error::graph(format!(
            "plan accounts for {} blocks, graph has {}",
            kept_total + plan.pruned.len(),
            refs.len()
        )));
    }
    crate::graph::reconstruct(graph, &plan.keep)
}
