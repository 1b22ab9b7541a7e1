//! Command-line front end for the trimnet compression pipeline.
//!
//! Every subcommand reads the same JSON run configuration and works inside
//! one output directory, so a run can be driven either by the single
//! `pipeline` command or step by step with the individual tools. Artifact
//! file names are shared between the two styles; a step-by-step run leaves
//! behind exactly what `pipeline` would.
//!
//! Set `RAYON_NUM_THREADS` to cap the worker pool.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trimnet_core::checkpoint;
use trimnet_core::config::{read_json, sub_seed, write_json, RunConfig};
use trimnet_core::data::Dataset;
use trimnet_core::graph::ArchGraph;
use trimnet_core::mi::{score_blocks, ProbeSet, ScoreTable};
use trimnet_core::pipeline::{run_pipeline, PipelineSummary};
use trimnet_core::profile::profile;
use trimnet_core::prune::{apply_plan, plan_block_prune, PrunePlan};
use trimnet_core::report::{
    aggregate, collect_summaries, render_table, write_kd_csv, write_report, write_teacher_csv,
};
use trimnet_core::slice::{apply_slicespec, build_uniform_slicespec, SliceSpec};
use trimnet_core::train::{bn_recalibrate, evaluate, kd_phase, train_teacher, Unfreeze};

#[derive(Parser)]
#[command(name = "trimnet", version)]
#[command(about = "Compress small CNNs: score blocks, prune, slice channels, recalibrate, distill")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every config-driven subcommand.
#[derive(Args)]
struct Common {
    /// Run configuration (JSON)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Override the global seed from the config
    #[arg(long)]
    seed: Option<u64>,

    /// Override the output directory from the config
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<Ctx> {
        let mut config = RunConfig::load(&self.config)
            .with_context(|| format!("reading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        Ok(Ctx { config })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher from scratch and save teacher.ckpt
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Override the teacher epoch count
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score every residual block against the labels and save scores.json
    ScoreMi {
        #[command(flatten)]
        common: Common,
    },
    /// Turn scores.json into a block removal plan (plan.json)
    PlanPrune {
        #[command(flatten)]
        common: Common,
        /// Override the prune ratio from the config
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Apply plan.json to teacher.ckpt and save pruned.ckpt
    ApplyPrune {
        #[command(flatten)]
        common: Common,
    },
    /// Slice residual planes stage-wide and save the spec + checkpoint
    SlicePlanes {
        #[command(flatten)]
        common: Common,
        /// Keep fraction, either one value or PLANES,MID (MID ignored here)
        #[arg(long)]
        fractions: Option<String>,
        /// Checkpoint to slice [default: kd_block.ckpt]
        #[arg(long)]
        input: Option<String>,
        /// Checkpoint to write [default: sliced_planes.ckpt]
        #[arg(long)]
        output: Option<String>,
    },
    /// Slice block-internal mid channels and save the spec + checkpoint
    SliceMid {
        #[command(flatten)]
        common: Common,
        /// Keep fraction, either one value or PLANES,MID (PLANES ignored here)
        #[arg(long)]
        fractions: Option<String>,
        /// Checkpoint to slice [default: kd_planes.ckpt]
        #[arg(long)]
        input: Option<String>,
        /// Checkpoint to write [default: sliced_mid.ckpt]
        #[arg(long)]
        output: Option<String>,
    },
    /// Refresh BN running statistics with forward passes over training data
    BnRecal {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to recalibrate
        #[arg(long)]
        input: String,
        /// Where to write the result [default: overwrite --input]
        #[arg(long)]
        output: Option<String>,
        /// Override the batch count from the config
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Distill teacher.ckpt into a student over the ramped schedule
    Kd {
        #[command(flatten)]
        common: Common,
        /// Phase label; picks the sub-seed and output names (block, planes, mid)
        #[arg(long)]
        label: String,
        /// Student checkpoint [default: derived from --label]
        #[arg(long)]
        input: Option<String>,
        /// Override the schedule length
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the architecture and a per-layer compute breakdown
    Profile {
        #[command(flatten)]
        common: Common,
        /// Profile a checkpoint instead of the freshly built model
        #[arg(long)]
        input: Option<String>,
        /// Also write the profile as JSON
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
    },
    /// Run the whole compression pipeline and write summary.json
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Override the prune ratio from the config
        #[arg(long)]
        ratio: Option<f64>,
        /// Override keep fractions, either one value or PLANES,MID
        #[arg(long)]
        fractions: Option<String>,
        /// Override the distillation schedule length
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Aggregate summary.json across run directories into mean +/- std rows
    Report {
        /// Directory for report.json and report.csv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Run directories, one per seed
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

/// A resolved config plus the handful of path and seed helpers the
/// subcommands share.
struct Ctx {
    config: RunConfig,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn seed(&self, label: &str) -> u64 {
        sub_seed(self.config.seed, label)
    }

    fn datasets(&self) -> Result<(Dataset<f32>, Dataset<f32>)> {
        Ok(self.config.dataset.build::<f32>(self.seed("data"))?)
    }

    fn load(&self, name: &str) -> Result<ArchGraph<f32>> {
        checkpoint::load(&self.path(name))
            .with_context(|| format!("loading {}", self.path(name).display()))
    }

    fn save(&self, graph: &ArchGraph<f32>, name: &str) -> Result<()> {
        fs::create_dir_all(&self.config.out_dir)
            .with_context(|| format!("creating {}", self.config.out_dir.display()))?;
        checkpoint::save(graph, &self.path(name))?;
        println!("wrote {}", self.path(name).display());
        Ok(())
    }
}

/// "0.5" applies one fraction to both scales; "0.5,0.7" is planes,mid.
fn parse_fractions(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse = |p: &str| {
        p.trim()
            .parse::<f64>()
            .with_context(|| format!("`{p}` is not a fraction"))
    };
    match parts.as_slice() {
        [one] => {
            let f = parse(one)?;
            Ok((f, f))
        }
        [planes, mid] => Ok((parse(planes)?, parse(mid)?)),
        _ => bail!("--fractions takes FRAC or PLANES,MID, got `{s}`"),
    }
}

fn cmd_train_teacher(common: &Common, epochs: Option<usize>) -> Result<()> {
    let ctx = common.resolve()?;
    let (train, eval) = ctx.datasets()?;
    let mut graph = ctx.config.model.build::<f32>(ctx.seed("init"))?;
    let mut tc = ctx.config.pipeline.teacher;
    tc.seed = ctx.seed("teacher");
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    let log = train_teacher(&mut graph, &train, &eval, &tc, Unfreeze::All)?;
    ctx.save(&graph, "teacher.ckpt")?;
    write_teacher_csv(&ctx.path("teacher_log.csv"), &log)?;
    if let Some(last) = log.last() {
        println!(
            "teacher after {} epochs: eval accuracy {:.4}, eval ce {:.4}",
            log.len(),
            last.eval_accuracy,
            last.eval_ce
        );
    }
    Ok(())
}

fn cmd_score_mi(common: &Common) -> Result<()> {
    let ctx = common.resolve()?;
    let graph = ctx.load("teacher.ckpt")?;
    let (train, _) = ctx.datasets()?;
    let p = &ctx.config.pipeline;
    let probe = ProbeSet::draw(train.len(), p.probe_batch, p.probe_max, ctx.seed("probe"))?;
    let scores = score_blocks(&graph, &train, &probe, p.mi_bins)?;
    write_json(&ctx.path("scores.json"), &scores)?;
    println!("block scores (ascending, {} probe samples):", probe.len());
    for name in &scores.ranking_ascending {
        println!("  {name}  {:.6}", scores.block_scores[name]);
    }
    println!("wrote {}", ctx.path("scores.json").display());
    Ok(())
}

fn cmd_plan_prune(common: &Common, ratio: Option<f64>) -> Result<()> {
    let ctx = common.resolve()?;
    let graph = ctx.load("teacher.ckpt")?;
    let scores: ScoreTable = read_json(&ctx.path("scores.json"))?;
    let ratio = ratio.unwrap_or(ctx.config.pipeline.prune_ratio);
    let plan = plan_block_prune(&graph, &scores, ratio)?;
    write_json(&ctx.path("plan.json"), &plan)?;
    if plan.pruned.is_empty() {
        println!("budget {} at ratio {ratio}: nothing to prune", plan.budget);
    } else {
        println!(
            "budget {} at ratio {ratio}: pruning {}",
            plan.budget,
            plan.pruned.join(", ")
        );
    }
    println!("wrote {}", ctx.path("plan.json").display());
    Ok(())
}

fn cmd_apply_prune(common: &Common) -> Result<()> {
    let ctx = common.resolve()?;
    let graph = ctx.load("teacher.ckpt")?;
    let plan: PrunePlan = read_json(&ctx.path("plan.json"))?;
    let pruned = apply_plan(&graph, &plan)?;
    println!(
        "params {} -> {} ({} blocks removed)",
        graph.num_params(),
        pruned.num_params(),
        plan.pruned.len()
    );
    ctx.save(&pruned, "pruned.ckpt")
}

fn slice_files(kind: &str) -> (String, String, String) {
    let default_input = match kind {
        "planes" => "kd_block.ckpt",
        _ => "kd_planes.ckpt",
    };
    (
        default_input.to_string(),
        format!("slice_{kind}.json"),
        format!("sliced_{kind}.ckpt"),
    )
}

fn cmd_slice(
    common: &Common,
    kind: &str,
    fractions: Option<&str>,
    input: Option<&str>,
    output: Option<&str>,
) -> Result<()> {
    let ctx = common.resolve()?;
    let (default_input, spec_file, default_output) = slice_files(kind);
    let input = input.unwrap_or(&default_input);
    let output = output.unwrap_or(&default_output);
    let graph = ctx.load(input)?;

    let p = &ctx.config.pipeline;
    let (mut plane_fraction, mut mid_fraction) = match fractions {
        Some(s) => parse_fractions(s)?,
        None => (p.plane_fraction, p.mid_fraction),
    };
    // Each command touches one scale; the other keeps everything.
    if kind == "planes" {
        mid_fraction = 1.0;
    } else {
        plane_fraction = 1.0;
    }
    let mut spec = build_uniform_slicespec(&graph, plane_fraction, mid_fraction)?;
    if kind == "planes" {
        spec.mids.clear();
    } else {
        spec.planes.clear();
    }
    write_json(&ctx.path(&spec_file), &spec)?;

    let sliced = apply_slicespec(&graph, &spec)?;
    println!("params {} -> {}", graph.num_params(), sliced.num_params());
    ctx.save(&sliced, output)
}

fn cmd_bn_recal(
    common: &Common,
    input: &str,
    output: Option<&str>,
    batches: Option<usize>,
) -> Result<()> {
    let ctx = common.resolve()?;
    let mut graph = ctx.load(input)?;
    let (train, eval) = ctx.datasets()?;
    let kd = &ctx.config.pipeline.kd;
    let batches = batches.unwrap_or(kd.bn_recal_batches);
    let before = evaluate(&graph, &eval, kd.eval_batch_size)?;
    let used = bn_recalibrate(&mut graph, &train, batches, kd.batch_size)?;
    let after = evaluate(&graph, &eval, kd.eval_batch_size)?;
    println!(
        "recalibrated over {used} batches: eval ce {:.4} -> {:.4}",
        before.cross_entropy, after.cross_entropy
    );
    ctx.save(&graph, output.unwrap_or(input))
}

/// When the student's pooled features are narrower than the teacher's, the
/// plane spec from `slice-planes` names the surviving coordinates; the
/// distillation loss then compares features only at those positions.
fn feature_map(
    ctx: &Ctx,
    student: &ArchGraph<f32>,
    teacher: &ArchGraph<f32>,
) -> Result<Option<Vec<usize>>> {
    let s = student.head.fc_weight.dims()[1];
    let t = teacher.head.fc_weight.dims()[1];
    if s == t {
        return Ok(None);
    }
    if student.head.pre_conv.is_some() || teacher.head.pre_conv.is_some() {
        bail!(
            "feature widths differ ({t} vs {s}) and a head projection hides which \
             channels survived"
        );
    }
    let spec: SliceSpec = read_json(&ctx.path("slice_planes.json")).context(
        "feature widths differ; slice_planes.json is needed to map student \
         features onto teacher channels",
    )?;
    let last = match teacher.stages.last() {
        Some(stage) => stage.name.clone(),
        None => bail!("teacher has no stages"),
    };
    match spec.planes.get(&last) {
        Some(kept) if kept.len() == s => Ok(Some(kept.clone())),
        _ => bail!("slice_planes.json does not explain a student width of {s}"),
    }
}

fn cmd_kd(common: &Common, label: &str, input: Option<&str>, epochs: Option<usize>) -> Result<()> {
    let ctx = common.resolve()?;
    let teacher = ctx.load("teacher.ckpt")?;
    let default_input = match label {
        "block" => "pruned.ckpt".to_string(),
        other => format!("sliced_{other}.ckpt"),
    };
    let input = input.unwrap_or(&default_input);
    let mut student = ctx.load(input)?;
    let (train, eval) = ctx.datasets()?;

    let p = &ctx.config.pipeline;
    let mut schedule = p.schedule;
    if let Some(e) = epochs {
        schedule.epochs = e;
    }
    let mut kc = p.kd;
    kc.seed = ctx.seed(&format!("kd-{label}"));
    let map = feature_map(&ctx, &student, &teacher)?;
    let log = kd_phase(&mut student, &teacher, &train, &eval, &schedule, &kc, map.as_deref())?;
    write_kd_csv(&ctx.path(&format!("kd_{label}_log.csv")), &log)?;
    ctx.save(&student, &format!("kd_{label}.ckpt"))?;
    if let Some(last) = log.last() {
        println!(
            "kd-{label} after {} epochs: eval accuracy {:.4}, eval ce {:.4}",
            log.len(),
            last.eval_accuracy,
            last.eval_ce
        );
    }
    Ok(())
}

fn cmd_profile(common: &Common, input: Option<&str>, json: Option<&Path>) -> Result<()> {
    let ctx = common.resolve()?;
    let graph = match input {
        Some(name) => ctx.load(name)?,
        None => ctx.config.model.build::<f32>(ctx.seed("init"))?,
    };
    // Both dataset kinds feed 32x32 images.
    let prof = profile(&graph, 32, 32)?;
    println!("{graph}");
    println!("{prof}");
    if let Some(path) = json {
        write_json(path, &prof)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_summary(summary: &PipelineSummary) {
    println!(
        "{:<17} {:>9} {:>11} {:>9} {:>8} {:>9} {:>9}",
        "column", "params", "macs", "accuracy", "ce", "d-params", "d-macs"
    );
    let rows = [
        ("teacher", &summary.teacher),
        ("block-pruned+kd", &summary.block_kd),
        ("inner-sliced+kd", &summary.sliced_kd),
    ];
    for (label, c) in rows {
        println!(
            "{:<17} {:>9} {:>11} {:>9.4} {:>8.4} {:>8.1}% {:>8.1}%",
            label,
            c.params,
            c.macs,
            c.accuracy,
            c.cross_entropy,
            c.params_change_pct,
            c.macs_change_pct
        );
    }
}

fn cmd_pipeline(
    common: &Common,
    ratio: Option<f64>,
    fractions: Option<&str>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut ctx = common.resolve()?;
    if let Some(r) = ratio {
        ctx.config.pipeline.prune_ratio = r;
    }
    if let Some(s) = fractions {
        let (planes, mid) = parse_fractions(s)?;
        ctx.config.pipeline.plane_fraction = planes;
        ctx.config.pipeline.mid_fraction = mid;
    }
    if let Some(e) = epochs {
        ctx.config.pipeline.schedule.epochs = e;
    }
    let out = run_pipeline(&ctx.config)?;
    print_summary(&out.summary);
    println!("artifacts in {}", ctx.config.out_dir.display());
    Ok(())
}

fn cmd_report(out: &Path, dirs: &[PathBuf]) -> Result<()> {
    let dirs: Vec<&Path> = dirs.iter().map(|p| p.as_path()).collect();
    let summaries = collect_summaries(&dirs)?;
    let report = aggregate(&summaries)?;
    print!("{}", render_table(&report));
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_report(out, &report)?;
    println!("wrote {}", out.join("report.json").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::TrainTeacher { common, epochs } => cmd_train_teacher(common, *epochs),
        Command::ScoreMi { common } => cmd_score_mi(common),
        Command::PlanPrune { common, ratio } => cmd_plan_prune(common, *ratio),
        Command::ApplyPrune { common } => cmd_apply_prune(common),
        Command::SlicePlanes { common, fractions, input, output } => cmd_slice(
            common,
            "planes",
            fractions.as_deref(),
            input.as_deref(),
            output.as_deref(),
        ),
        Command::SliceMid { common, fractions, input, output } => cmd_slice(
            common,
            "mid",
            fractions.as_deref(),
            input.as_deref(),
            output.as_deref(),
        ),
        Command::BnRecal { common, input, output, batches } => {
            cmd_bn_recal(common, input, output.as_deref(), *batches)
        }
        Command::Kd { common, label, input, epochs } => {
            cmd_kd(common, label, input.as_deref(), *epochs)
        }
        Command::Profile { common, input, json } => {
            cmd_profile(common, input.as_deref(), json.as_deref())
        }
        Command::Pipeline { common, ratio, fractions, epochs } => {
            cmd_pipeline(common, *ratio, fractions.as_deref(), *epochs)
        }
        Command::Report { out, dirs } => cmd_report(out, dirs),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
