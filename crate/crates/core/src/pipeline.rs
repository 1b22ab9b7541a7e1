//! One full compression run for one seed: fit a teacher, score blocks on
//! probe data, prune, repair, slice stage planes, repair, slice block mids,
//! repair, then summarize the three model states side by side.
//!
//! Every stage persists its artifact before the next starts, and a rerun
//! over the same output directory picks up completed artifacts instead of
//! recomputing them. A corrupt artifact is silently recomputed. The summary
//! carries no paths or timestamps, so two runs of one config produce
//! byte-identical summaries wherever they execute.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, file_sha256};
use crate::config::{read_json, write_json, RunConfig, RunManifest};
use crate::data::Dataset;
use crate::graph::ArchGraph;
use crate::mi::{score_blocks, ProbeSet, ScoreTable};
use crate::profile::{change_pct, profile};
use crate::prune::{apply_plan, plan_block_prune, PrunePlan};
use crate::report::{write_kd_csv, write_teacher_csv};
use crate::slice::{apply_slicespec, build_uniform_slicespec, SliceSpec};
use crate::train::{bn_recalibrate, evaluate, kd_phase, train_teacher, EvalMetrics, Unfreeze};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub params: u64,
    pub macs: u64,
    pub accuracy: f64,
    pub cross_entropy: f64,
    pub params_change_pct: f64,
    pub macs_change_pct: f64,
}

/// What one structural edit cost and how the repair recovered it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDetail {
    pub post_surgery_accuracy: f64,
    pub post_surgery_ce: f64,
    pub recal_ce_after: f64,
    pub kd_epoch1_accuracy: f64,
    pub final_accuracy: f64,
    pub final_ce: f64,
}

/// Per-run result; edits that were no-ops (nothing pruned, fraction 1.0)
/// stay `None` and their column carries the previous model forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub teacher: ColumnSummary,
    pub block_kd: ColumnSummary,
    pub sliced_kd: ColumnSummary,
    pub block_prune: Option<EditDetail>,
    pub plane_slice: Option<EditDetail>,
    pub mid_slice: Option<EditDetail>,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub summary: PipelineSummary,
    pub manifest: RunManifest,
}

struct Runner<'a> {
    config: &'a RunConfig,
    seeds: BTreeMap<String, u64>,
    train: Dataset<f32>,
    eval: Dataset<f32>,
    manifest: RunManifest,
}

impl Runner<'_> {
    fn path(&self, file: &str) -> PathBuf {
        self.config.out_dir.join(file)
    }

    fn seed(&self, label: &str) -> u64 {
        self.seeds[label]
    }

    fn record(&mut self, key: &str, file: &str) -> Result<()> {
        self.manifest.artifacts.insert(key.to_string(), file.to_string());
        if file.ends_with(".ckpt") {
            let sha = file_sha256(&self.path(file))?;
            self.manifest.checkpoint_sha256.insert(key.to_string(), sha);
        }
        self.manifest.save(&self.path("manifest.json"))
    }

    fn metrics(&self, graph: &ArchGraph<f32>) -> Result<EvalMetrics> {
        evaluate(graph, &self.eval, self.config.pipeline.kd.eval_batch_size)
    }

    fn teacher(&mut self) -> Result<ArchGraph<f32>> {
        let file = "teacher.ckpt";
        let graph = match checkpoint::load::<f32>(&self.path(file)) {
            Ok(g) => g,
            Err(_) => {
                let mut g = self.config.model.build::<f32>(self.seed("init"))?;
                let mut tc = self.config.pipeline.teacher;
                tc.seed = self.seed("teacher");
                let log = train_teacher(&mut g, &self.train, &self.eval, &tc, Unfreeze::All)?;
                write_teacher_csv(&self.path("teacher_log.csv"), &log)?;
                checkpoint::save(&g, &self.path(file))?;
                self.record("teacher_log", "teacher_log.csv")?;
                g
            }
        };
        self.record("teacher", file)?;
        Ok(graph)
    }

    fn scores(&mut self, teacher: &ArchGraph<f32>) -> Result<ScoreTable> {
        let file = "scores.json";
        let table = match read_json::<ScoreTable>(&self.path(file)) {
            Ok(t) => t,
            Err(_) => {
                let p = &self.config.pipeline;
                let probe =
                    ProbeSet::draw(self.train.len(), p.probe_batch, p.probe_max, self.seed("probe"))?;
                let table = score_blocks(teacher, &self.train, &probe, p.mi_bins)?;
                write_json(&self.path(file), &table)?;
                table
            }
        };
        self.record("scores", file)?;
        Ok(table)
    }

    fn plan(&mut self, teacher: &ArchGraph<f32>, table: &ScoreTable) -> Result<PrunePlan> {
        let file = "plan.json";
        let plan = match read_json::<PrunePlan>(&self.path(file)) {
            Ok(p) => p,
            Err(_) => {
                let plan = plan_block_prune(teacher, table, self.config.pipeline.prune_ratio)?;
                write_json(&self.path(file), &plan)?;
                plan
            }
        };
        self.record("plan", file)?;
        Ok(plan)
    }

    /// Recalibrate, distill against the teacher, persist checkpoint, log,
    /// and detail. `name` keys the artifacts and the kd sub-seed.
    /// `feature_map` carries the surviving teacher feature coordinates when
    /// the student's feature space was narrowed by plane slicing.
    fn repair(
        &mut self,
        name: &str,
        mut graph: ArchGraph<f32>,
        teacher: &ArchGraph<f32>,
        feature_map: Option<&[usize]>,
    ) -> Result<(ArchGraph<f32>, EditDetail)> {
        let ckpt = format!("kd_{name}.ckpt");
        let detail_file = format!("detail_{name}.json");
        if let (Ok(g), Ok(detail)) = (
            checkpoint::load::<f32>(&self.path(&ckpt)),
            read_json::<EditDetail>(&self.path(&detail_file)),
        ) {
            self.record(&format!("kd_{name}"), &ckpt)?;
            return Ok((g, detail));
        }

        let p = self.config.pipeline.clone();
        let post = self.metrics(&graph)?;
        bn_recalibrate(&mut graph, &self.train, p.kd.bn_recal_batches, p.kd.batch_size)?;
        let recal = self.metrics(&graph)?;
        let mut kc = p.kd;
        kc.seed = self.seed(&format!("kd-{name}"));
        let log =
            kd_phase(&mut graph, teacher, &self.train, &self.eval, &p.schedule, &kc, feature_map)?;
        let last = log.last().expect("schedule has at least one epoch");
        let detail = EditDetail {
            post_surgery_accuracy: post.accuracy,
            post_surgery_ce: post.cross_entropy,
            recal_ce_after: recal.cross_entropy,
            kd_epoch1_accuracy: log[0].eval_accuracy,
            final_accuracy: last.eval_accuracy,
            final_ce: last.eval_ce,
        };
        write_kd_csv(&self.path(&format!("kd_{name}_log.csv")), &log)?;
        checkpoint::save(&graph, &self.path(&ckpt))?;
        write_json(&self.path(&detail_file), &detail)?;
        self.record(&format!("kd_{name}_log"), &format!("kd_{name}_log.csv"))?;
        self.record(&format!("detail_{name}"), &detail_file)?;
        self.record(&format!("kd_{name}"), &ckpt)?;
        Ok((graph, detail))
    }

    fn block_stage(
        &mut self,
        teacher: &ArchGraph<f32>,
        plan: &PrunePlan,
    ) -> Result<(ArchGraph<f32>, Option<EditDetail>)> {
        if plan.pruned.is_empty() {
            return Ok((teacher.clone(), None));
        }
        let file = "pruned.ckpt";
        let student = match checkpoint::load::<f32>(&self.path(file)) {
            Ok(g) => g,
            Err(_) => {
                let g = apply_plan(teacher, plan)?;
                checkpoint::save(&g, &self.path(file))?;
                g
            }
        };
        self.record("pruned", file)?;
        let (repaired, detail) = self.repair("block", student, teacher, None)?;
        Ok((repaired, Some(detail)))
    }

    fn load_or_build_spec(
        &mut self,
        name: &str,
        build: impl FnOnce() -> Result<SliceSpec>,
    ) -> Result<SliceSpec> {
        let file = format!("slice_{name}.json");
        let spec = match read_json::<SliceSpec>(&self.path(&file)) {
            Ok(s) => s,
            Err(_) => {
                let spec = build()?;
                write_json(&self.path(&file), &spec)?;
                spec
            }
        };
        self.record(&format!("slice_{name}"), &file)?;
        Ok(spec)
    }

    /// Slicing stage: skip identity specs, otherwise slice, persist, and
    /// repair.
    fn slice_stage(
        &mut self,
        name: &str,
        current: ArchGraph<f32>,
        teacher: &ArchGraph<f32>,
        spec: &SliceSpec,
        feature_map: Option<&[usize]>,
    ) -> Result<(ArchGraph<f32>, Option<EditDetail>)> {
        if spec.is_identity(&current) {
            return Ok((current, None));
        }
        let ckpt = format!("sliced_{name}.ckpt");
        let sliced = match checkpoint::load::<f32>(&self.path(&ckpt)) {
            Ok(g) => g,
            Err(_) => {
                let g = apply_slicespec(&current, spec)?;
                checkpoint::save(&g, &self.path(&ckpt))?;
                g
            }
        };
        self.record(&format!("sliced_{name}"), &ckpt)?;
        let (repaired, detail) = self.repair(name, sliced, teacher, feature_map)?;
        Ok((repaired, Some(detail)))
    }

    fn column(
        &self,
        graph: &ArchGraph<f32>,
        base: &ArchGraph<f32>,
    ) -> Result<ColumnSummary> {
        let (h, w) = (self.eval.height, self.eval.width);
        let prof = profile(graph, h, w)?;
        let base_prof = profile(base, h, w)?;
        let m = self.metrics(graph)?;
        Ok(ColumnSummary {
            params: prof.total_params,
            macs: prof.total_macs,
            accuracy: m.accuracy,
            cross_entropy: m.cross_entropy,
            params_change_pct: change_pct(base_prof.total_params, prof.total_params),
            macs_change_pct: change_pct(base_prof.total_macs, prof.total_macs),
        })
    }
}

/// Runs (or resumes) the whole chain in `config.out_dir` and writes
/// `summary.json` plus `manifest.json`.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutput> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let manifest_path = config.out_dir.join("manifest.json");
    if manifest_path.exists() {
        let existing = RunManifest::load(&manifest_path)?;
        if existing.config != *config {
            return Err(Error::config(
                "out_dir",
                format!("{} holds artifacts from a different run", config.out_dir.display()),
            ));
        }
    }

    let seeds = config.sub_seeds();
    let (train, eval) = config.dataset.build::<f32>(seeds["data"])?;
    let mut runner = Runner { config, seeds, train, eval, manifest: RunManifest::new(config) };
    runner.manifest.save(&manifest_path)?;

    let teacher = runner.teacher()?;
    let table = runner.scores(&teacher)?;
    let plan = runner.plan(&teacher, &table)?;
    let (block_graph, block_prune) = runner.block_stage(&teacher, &plan)?;

    let planes_spec = runner.load_or_build_spec("planes", || {
        let built = build_uniform_slicespec(&block_graph, config.pipeline.plane_fraction, 1.0)?;
        Ok(SliceSpec { planes: built.planes, mids: BTreeMap::new() })
    })?;
    // Without a head pre-conv, slicing the last stage narrows the pooled
    // feature space; the repair phases then align against the teacher
    // coordinates that survived.
    let last_stage = &teacher.stages.last().expect("graphs have stages").name;
    let feature_width = teacher.head.fc_weight.dims()[1];
    let feature_map: Option<Vec<usize>> = match teacher.head.pre_conv {
        Some(_) => None,
        None => planes_spec
            .planes
            .get(last_stage)
            .filter(|kept| kept.len() < feature_width)
            .cloned(),
    };
    let (planes_graph, plane_slice) = runner.slice_stage(
        "planes",
        block_graph.clone(),
        &teacher,
        &planes_spec,
        feature_map.as_deref(),
    )?;

    let mid_spec = runner.load_or_build_spec("mid", || {
        let built = build_uniform_slicespec(&planes_graph, 1.0, config.pipeline.mid_fraction)?;
        Ok(SliceSpec { planes: BTreeMap::new(), mids: built.mids })
    })?;
    let (final_graph, mid_slice) = runner.slice_stage(
        "mid",
        planes_graph.clone(),
        &teacher,
        &mid_spec,
        feature_map.as_deref(),
    )?;

    let summary = PipelineSummary {
        seed: config.seed,
        teacher: runner.column(&teacher, &teacher)?,
        block_kd: runner.column(&block_graph, &teacher)?,
        sliced_kd: runner.column(&final_graph, &teacher)?,
        block_prune,
        plane_slice,
        mid_slice,
    };
    write_json(&config.out_dir.join("summary.json"), &summary)?;
    runner.record("summary", "summary.json")?;
    Ok(PipelineOutput { summary, manifest: runner.manifest })
}

/// Loads the summary a finished run wrote.
pub fn load_summary(out_dir: &Path) -> Result<PipelineSummary> {
    read_json(&out_dir.join("summary.json"))
}
