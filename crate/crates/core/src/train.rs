//! Training loops: teacher fitting, norm-statistics recalibration, and the
//! staged distillation repair.
//!
//! All loops are single-seed deterministic: shuffles and flip masks come
//! from one stream per call, batches walk the data in permutation order,
//! and the optimizer updates parameters in graph-visit order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trimnet_tensor::optim::{clip_scale, global_grad_norm, OptimizerState};
use trimnet_tensor::ops::{self, BnMode};
use trimnet_tensor::{Element, Gradients, Tape, Tensor, VarId};

use crate::data::{shuffled_indices, Dataset};
use crate::graph::{ArchGraph, ParamBinding};
use crate::{Error, Result};

/// Distillation coefficient ramp. Epoch 1 is always pure cross-entropy;
/// the final epoch reaches the starred targets; epochs in between are
/// linear in the epoch index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdSchedule {
    pub epochs: usize,
    pub alpha_star: f64,
    pub beta_star: f64,
}

impl Default for KdSchedule {
    fn default() -> Self {
        KdSchedule { epochs: 5, alpha_star: 0.1, beta_star: 0.1 }
    }
}

impl KdSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        for (field, v) in [("alpha_star", self.alpha_star), ("beta_star", self.beta_star)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("{v} is not a non-negative scalar")));
            }
        }
        Ok(())
    }

    /// (alpha, beta) for a 1-based epoch index.
    pub fn coefficients(&self, epoch: usize) -> (f64, f64) {
        assert!(
            epoch >= 1 && epoch <= self.epochs,
            "epoch {epoch} outside schedule of length {}",
            self.epochs
        );
        if self.epochs == 1 {
            return (0.0, 0.0);
        }
        let f = (epoch - 1) as f64 / (self.epochs - 1) as f64;
        (self.alpha_star * f, self.beta_star * f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    fn state<E: Element>(self, lr: f64) -> OptimizerState<E> {
        match self {
            OptimizerKind::Sgd => OptimizerState::sgd(lr),
            OptimizerKind::Adam => OptimizerState::adam(lr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub clip_norm: f64,
    pub epochs: usize,
    pub flip_augment: bool,
    pub bn_recal_batches: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// From-scratch or fine-tune fitting defaults.
    pub fn teacher(seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 128,
            eval_batch_size: 256,
            clip_norm: 1.0,
            epochs: 5,
            flip_augment: true,
            bn_recal_batches: 50,
            seed,
        }
    }

    /// Repair-phase defaults; `epochs` here is unused because the schedule
    /// owns the epoch count.
    pub fn kd(seed: u64) -> Self {
        TrainConfig { learning_rate: 1e-4, ..TrainConfig::teacher(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("learning_rate", self.learning_rate), ("clip_norm", self.clip_norm)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("{v} must be positive")));
            }
        }
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Which parameters a fitting pass may move. `FinalThird` keeps the early
/// backbone frozen: only the last third of the stages (by stage count,
/// rounded down) and the head train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Unfreeze {
    All,
    FinalThird,
}

fn unfrozen_prefixes<E: Element>(graph: &ArchGraph<E>, unfreeze: Unfreeze) -> Vec<String> {
    match unfreeze {
        Unfreeze::All => vec![String::new()],
        Unfreeze::FinalThird => {
            let cut = 2 * graph.stages.len() / 3;
            let mut prefixes: Vec<String> =
                graph.stages[cut..].iter().map(|s| format!("{}.", s.name)).collect();
            prefixes.push("head.".to_string());
            prefixes
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub cross_entropy: f64,
}

fn argmax_row<E: Element>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if v.as_f64() > row[best].as_f64() {
            best = i;
        }
    }
    best
}

fn count_correct<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> usize {
    let k = logits.dims()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax_row(row) == y)
        .count()
}

/// Accuracy and mean cross-entropy over the whole set, batched, eval mode.
pub fn evaluate<E: Element>(
    graph: &ArchGraph<E>,
    data: &Dataset<E>,
    batch_size: usize,
) -> Result<EvalMetrics> {
    if batch_size == 0 {
        return Err(Error::config("eval_batch_size", "must be positive"));
    }
    if data.is_empty() {
        return Err(Error::config("dataset", "evaluation set is empty"));
    }
    let mut correct = 0usize;
    let mut ce_sum = 0.0f64;
    for chunk in data.chunks(batch_size) {
        let (images, labels) = data.batch(&chunk, None)?;
        let out = graph.forward_eval(&images, false)?;
        let (ce, _) = ops::cross_entropy(&out.logits, &labels)?;
        ce_sum += ce.data()[0].as_f64() * labels.len() as f64;
        correct += count_correct(&out.logits, &labels);
    }
    let n = data.len() as f64;
    Ok(EvalMetrics { accuracy: correct as f64 / n, cross_entropy: ce_sum / n })
}

/// Nodes of the composite repair loss. `loss` is
/// `ce + alpha * mean(1 - cos(logit rows)) + beta * mean(1 - cos(features))`;
/// at `alpha = beta = 0` its value is bitwise the cross-entropy.
pub struct KdLossParts {
    pub loss: VarId,
    pub ce: VarId,
    pub logit_alignment: VarId,
    pub feature_alignment: VarId,
}

pub fn kd_loss<E: Element>(
    tape: &mut Tape<E>,
    student_logits: VarId,
    teacher_logits: VarId,
    student_features: VarId,
    teacher_features: VarId,
    labels: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<KdLossParts> {
    let ce = tape.cross_entropy(student_logits, labels)?;
    let neg = E::from_f64(-1.0);
    let cos_l = tape.cosine_rows(student_logits, teacher_logits)?;
    let gap_l = tape.affine(cos_l, neg, E::one());
    let logit_alignment = tape.mean_all(gap_l);
    let cos_f = tape.cosine_rows(student_features, teacher_features)?;
    let gap_f = tape.affine(cos_f, neg, E::one());
    let feature_alignment = tape.mean_all(gap_f);
    let scaled_l = tape.affine(logit_alignment, E::from_f64(alpha), E::zero());
    let scaled_f = tape.affine(feature_alignment, E::from_f64(beta), E::zero());
    let partial = tape.add(ce, scaled_l)?;
    let loss = tape.add(partial, scaled_f)?;
    Ok(KdLossParts { loss, ce, logit_alignment, feature_alignment })
}

/// Clipped optimizer step: global norm over the trainable gradients, one
/// shared scale, updates applied in graph-visit order.
fn apply_updates<E: Element>(
    graph: &mut ArchGraph<E>,
    binding: &ParamBinding,
    grads: &Gradients<E>,
    opt: &mut OptimizerState<E>,
    clip_norm: f64,
) -> Result<f64> {
    let norm = global_grad_norm(
        binding.trainable().filter_map(|(name, id)| grads.get(id).map(|g| (name, g))),
    )?;
    let (scale, _) = clip_scale(norm, Some(clip_norm));
    opt.begin_step();
    let mut failed = None;
    graph.visit_params_mut(&mut |name, t| {
        if failed.is_some() || !binding.is_trainable(name) {
            return;
        }
        match binding.var(name) {
            Ok(id) => {
                if let Some(g) = grads.get(id) {
                    if let Err(e) = opt.update(name, t.data_mut(), g, scale) {
                        failed = Some(e.into());
                    }
                }
            }
            Err(e) => failed = Some(e),
        }
    });
    match failed {
        Some(e) => Err(e),
        None => Ok(norm),
    }
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("loss {loss} at epoch {epoch}, step {step}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub train_ce: f64,
    pub train_accuracy: f64,
    pub eval_ce: f64,
    pub eval_accuracy: f64,
}

/// Supervised fitting with optional partial freezing. Frozen parameters are
/// bit-identical afterwards; norm running statistics move everywhere
/// because batches flow through the whole network.
pub fn train_teacher<E: Element>(
    graph: &mut ArchGraph<E>,
    train: &Dataset<E>,
    eval: &Dataset<E>,
    config: &TrainConfig,
    unfreeze: Unfreeze,
) -> Result<Vec<TeacherEpoch>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::config("dataset", "training set is empty"));
    }
    let prefixes = unfrozen_prefixes(graph, unfreeze);
    let trainable = move |name: &str| prefixes.iter().any(|p| name.starts_with(p.as_str()));
    let mut opt = config.optimizer.state::<E>(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let order = shuffled_indices(train.len(), &mut rng);
        let mut ce_sum = 0.0f64;
        let mut correct = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let flips: Option<Vec<bool>> = config
                .flip_augment
                .then(|| chunk.iter().map(|_| rng.gen_bool(0.5)).collect());
            let (images, labels) = train.batch(chunk, flips.as_deref())?;

            let mut tape = Tape::new();
            let binding = graph.bind_params(&mut tape, &trainable);
            let fwd = graph.forward_taped(&mut tape, &binding, &images, BnMode::Train)?;
            let loss = tape.cross_entropy(fwd.logits, &labels)?;
            let loss_v = tape.scalar(loss)?.as_f64();
            check_finite(loss_v, epoch, step)?;
            correct += count_correct(tape.value(fwd.logits), &labels);
            ce_sum += loss_v * labels.len() as f64;

            let grads = tape.backward(loss)?;
            apply_updates(graph, &binding, &grads, &mut opt, config.clip_norm)?;
        }
        let ev = evaluate(graph, eval, config.eval_batch_size)?;
        log.push(TeacherEpoch {
            epoch,
            train_ce: ce_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            eval_ce: ev.cross_entropy,
            eval_accuracy: ev.accuracy,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdEpoch {
    pub epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub ce: f64,
    pub logit_alignment: f64,
    pub feature_alignment: f64,
    pub eval_ce: f64,
    pub eval_accuracy: f64,
}

/// Columns of a `[N, C]` matrix, for aligning a sliced feature space with
/// its surviving teacher coordinates.
fn take_feature_columns<E: Element>(t: &Tensor<E>, idx: &[usize]) -> Result<Tensor<E>> {
    let d = t.dims();
    if let Some(&bad) = idx.iter().find(|&&i| i >= d[1]) {
        return Err(Error::config(
            "feature_map",
            format!("index {bad} outside the {}-wide teacher feature space", d[1]),
        ));
    }
    let mut data = Vec::with_capacity(d[0] * idx.len());
    for n in 0..d[0] {
        for &c in idx {
            data.push(t.data()[n * d[1] + c]);
        }
    }
    Ok(Tensor::new(vec![d[0], idx.len()], data)?)
}

/// Staged repair: the student trains against labels plus the frozen
/// teacher's logit and feature directions, with the schedule's per-epoch
/// coefficients. The teacher runs in eval mode and never changes.
///
/// When surgery narrowed the student's feature space, `feature_map` names
/// the teacher feature coordinates the student's channels descend from, and
/// alignment runs on that common subspace.
pub fn kd_phase<E: Element>(
    student: &mut ArchGraph<E>,
    teacher: &ArchGraph<E>,
    train: &Dataset<E>,
    eval: &Dataset<E>,
    schedule: &KdSchedule,
    config: &TrainConfig,
    feature_map: Option<&[usize]>,
) -> Result<Vec<KdEpoch>> {
    config.validate()?;
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::config("dataset", "training set is empty"));
    }
    let trainable = |_: &str| true;
    let mut opt = config.optimizer.state::<E>(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(schedule.epochs);

    for epoch in 1..=schedule.epochs {
        let (alpha, beta) = schedule.coefficients(epoch);
        let order = shuffled_indices(train.len(), &mut rng);
        let mut sums = [0.0f64; 3];
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let flips: Option<Vec<bool>> = config
                .flip_augment
                .then(|| chunk.iter().map(|_| rng.gen_bool(0.5)).collect());
            let (images, labels) = train.batch(chunk, flips.as_deref())?;
            let guide = teacher.forward_eval(&images, false)?;
            let guide_features = match feature_map {
                Some(idx) => take_feature_columns(&guide.features, idx)?,
                None => guide.features,
            };

            let mut tape = Tape::new();
            let binding = student.bind_params(&mut tape, &trainable);
            let fwd = student.forward_taped(&mut tape, &binding, &images, BnMode::Train)?;
            let t_logits = tape.constant(&guide.logits);
            let t_features = tape.constant(&guide_features);
            let parts = kd_loss(
                &mut tape,
                fwd.logits,
                t_logits,
                fwd.features,
                t_features,
                &labels,
                alpha,
                beta,
            )?;
            let loss_v = tape.scalar(parts.loss)?.as_f64();
            check_finite(loss_v, epoch, step)?;
            let w = labels.len() as f64;
            sums[0] += tape.scalar(parts.ce)?.as_f64() * w;
            sums[1] += tape.scalar(parts.logit_alignment)?.as_f64() * w;
            sums[2] += tape.scalar(parts.feature_alignment)?.as_f64() * w;

            let grads = tape.backward(parts.loss)?;
            apply_updates(student, &binding, &grads, &mut opt, config.clip_norm)?;
        }
        let n = train.len() as f64;
        let ev = evaluate(student, eval, config.eval_batch_size)?;
        log.push(KdEpoch {
            epoch,
            alpha,
            beta,
            ce: sums[0] / n,
            logit_alignment: sums[1] / n,
            feature_alignment: sums[2] / n,
            eval_ce: ev.cross_entropy,
            eval_accuracy: ev.accuracy,
        });
    }
    Ok(log)
}

/// Forward-only refresh of norm running statistics over up to `num_batches`
/// sequential batches. Returns how many batches were consumed; a short
/// loader is consumed fully with a warning, zero requested batches is a
/// bit-exact no-op.
pub fn bn_recalibrate<E: Element>(
    graph: &mut ArchGraph<E>,
    data: &Dataset<E>,
    num_batches: usize,
    batch_size: usize,
) -> Result<usize> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if num_batches == 0 {
        return Ok(0);
    }
    if data.is_empty() {
        return Err(Error::config("dataset", "recalibration set is empty"));
    }
    let mut used = 0usize;
    for chunk in data.chunks(batch_size) {
        if used == num_batches {
            break;
        }
        let (images, _) = data.batch(&chunk, None)?;
        graph.forward_recalibrate(&images)?;
        used += 1;
    }
    if used < num_batches {
        eprintln!("warning: recalibration asked for {num_batches} batches, loader yielded {used}");
    }
    Ok(used)
}
