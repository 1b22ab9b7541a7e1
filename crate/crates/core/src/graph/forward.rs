//! Execution paths over the graph: functional inference, forward-only
//! statistic refresh, and the taped path used for training.

use std::collections::BTreeMap;

use trimnet_tensor::ops::{self, BnMode, Conv2dArgs};
use trimnet_tensor::{Element, Tape, Tensor, VarId};

use crate::{Error, Result};

use super::{ArchGraph, BlockBody, ConvBn};

/// Inference products. `features` is the pooled vector entering the
/// classifier; `taps` holds each block's post-activation output when asked.
#[derive(Debug)]
pub struct EvalOutput<E: Element> {
    pub logits: Tensor<E>,
    pub features: Tensor<E>,
    pub taps: Vec<(String, Tensor<E>)>,
    pub shape_trace: Vec<(String, Vec<usize>)>,
}

fn conv_args<E: Element>(cb: &ConvBn<E>) -> Conv2dArgs {
    Conv2dArgs { stride: cb.stride, padding: cb.padding, groups: cb.groups }
}

/// Conv, eval-mode norm, optional relu. Running statistics are copied so the
/// shared signature never mutates them here.
fn eval_conv_bn<E: Element>(cb: &ConvBn<E>, x: &Tensor<E>, act: bool) -> Result<Tensor<E>> {
    let y = ops::conv2d(x, &cb.weight, conv_args(cb))?;
    let mut rm = cb.running_mean.data().to_vec();
    let mut rv = cb.running_var.data().to_vec();
    let (y, _) = ops::batchnorm2d(
        &y,
        cb.gamma.data(),
        cb.beta.data(),
        &mut rm,
        &mut rv,
        BnMode::Eval,
        false,
    )?;
    Ok(if act { ops::relu(&y) } else { y })
}

/// Conv, recalibrate-mode norm (updates running statistics in place),
/// optional relu. No normalization context is kept.
fn recal_conv_bn<E: Element>(cb: &mut ConvBn<E>, x: &Tensor<E>, act: bool) -> Result<Tensor<E>> {
    let y = ops::conv2d(x, &cb.weight, conv_args(cb))?;
    let (y, _) = ops::batchnorm2d(
        &y,
        cb.gamma.data(),
        cb.beta.data(),
        cb.running_mean.data_mut(),
        cb.running_var.data_mut(),
        BnMode::Recalibrate,
        false,
    )?;
    Ok(if act { ops::relu(&y) } else { y })
}

impl<E: Element> ArchGraph<E> {
    /// Full inference pass with frozen statistics. Set `want_taps` to collect
    /// every block's output activation (the probe points for scoring).
    pub fn forward_eval(&self, images: &Tensor<E>, want_taps: bool) -> Result<EvalOutput<E>> {
        let mut trace = vec![("input".to_string(), images.dims().to_vec())];
        let mut x = eval_conv_bn(&self.stem.conv, images, true)?;
        if let Some(p) = &self.stem.max_pool {
            x = ops::max_pool2d(&x, p.kernel, p.stride, p.padding)?;
        }
        trace.push(("stem".to_string(), x.dims().to_vec()));

        let mut taps = Vec::new();
        for stage in &self.stages {
            for block in &stage.blocks {
                let out = match &block.body {
                    BlockBody::Basic { conv1, conv2, downsample } => {
                        let h = eval_conv_bn(conv1, &x, true)?;
                        let h = eval_conv_bn(conv2, &h, false)?;
                        let skip = match downsample {
                            Some(ds) => eval_conv_bn(ds, &x, false)?,
                            None => x.clone(),
                        };
                        ops::relu(&ops::add(&h, &skip)?)
                    }
                    BlockBody::Inverted { .. } => {
                        return Err(Error::unsupported(format!(
                            "block `{}`: inverted-residual execution is not implemented; \
                             this family is structural only",
                            block.name
                        )));
                    }
                };
                trace.push((block.name.clone(), out.dims().to_vec()));
                if want_taps {
                    taps.push((block.name.clone(), out.clone()));
                }
                x = out;
            }
        }

        if let Some(pc) = &self.head.pre_conv {
            x = eval_conv_bn(pc, &x, true)?;
        }
        let features = ops::global_avg_pool(&x)?;
        trace.push(("features".to_string(), features.dims().to_vec()));
        let logits = ops::linear(&features, &self.head.fc_weight, &self.head.fc_bias)?;
        trace.push(("logits".to_string(), logits.dims().to_vec()));
        Ok(EvalOutput { logits, features, taps, shape_trace: trace })
    }

    /// One forward-only pass that refreshes every norm layer's running
    /// statistics. Weights are untouched; nothing is returned but the walk
    /// fails on structural errors.
    pub fn forward_recalibrate(&mut self, images: &Tensor<E>) -> Result<()> {
        let mut x = recal_conv_bn(&mut self.stem.conv, images, true)?;
        if let Some(p) = &self.stem.max_pool {
            x = ops::max_pool2d(&x, p.kernel, p.stride, p.padding)?;
        }
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                x = match &mut block.body {
                    BlockBody::Basic { conv1, conv2, downsample } => {
                        let h = recal_conv_bn(conv1, &x, true)?;
                        let h = recal_conv_bn(conv2, &h, false)?;
                        let skip = match downsample {
                            Some(ds) => recal_conv_bn(ds, &x, false)?,
                            None => x.clone(),
                        };
                        ops::relu(&ops::add(&h, &skip)?)
                    }
                    BlockBody::Inverted { .. } => {
                        return Err(Error::unsupported(format!(
                            "block `{}`: inverted-residual execution is not implemented",
                            block.name
                        )));
                    }
                };
            }
        }
        if let Some(pc) = &mut self.head.pre_conv {
            x = recal_conv_bn(pc, &x, true)?;
        }
        let _ = ops::global_avg_pool(&x)?;
        Ok(())
    }
}

/// Name -> tape variable for every parameter, with a trainability flag that
/// decides which entries receive gradients.
#[derive(Debug)]
pub struct ParamBinding {
    entries: BTreeMap<String, (VarId, bool)>,
}

impl ParamBinding {
    pub fn var(&self, name: &str) -> Result<VarId> {
        self.entries
            .get(name)
            .map(|&(v, _)| v)
            .ok_or_else(|| Error::graph(format!("no bound parameter named `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|&(_, t)| t).unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, VarId, bool)> {
        self.entries.iter().map(|(n, &(v, t))| (n.as_str(), v, t))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.entries
            .iter()
            .filter(|(_, &(_, t))| t)
            .map(|(n, &(v, _))| (n.as_str(), v))
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|&&(_, t)| t).count()
    }
}

/// Tape handles for the differentiable outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapedForward {
    pub logits: VarId,
    pub features: VarId,
}

fn taped_conv_bn<E: Element>(
    tape: &mut Tape<E>,
    binding: &ParamBinding,
    cb: &mut ConvBn<E>,
    conv_name: &str,
    bn_name: &str,
    x: VarId,
    mode: BnMode,
    act: bool,
) -> Result<VarId> {
    let w = binding.var(&format!("{conv_name}.weight"))?;
    let g = binding.var(&format!("{bn_name}.gamma"))?;
    let b = binding.var(&format!("{bn_name}.beta"))?;
    let args = Conv2dArgs { stride: cb.stride, padding: cb.padding, groups: cb.groups };
    let y = tape.conv2d(x, w, args)?;
    let y = tape.batchnorm2d(
        y,
        g,
        b,
        cb.running_mean.data_mut(),
        cb.running_var.data_mut(),
        mode,
    )?;
    Ok(if act { tape.relu(y) } else { y })
}

impl<E: Element> ArchGraph<E> {
    /// Places every parameter on the tape, marking those the predicate
    /// accepts as gradient targets. Binding order is the visitor order.
    pub fn bind_params(&self, tape: &mut Tape<E>, trainable: &dyn Fn(&str) -> bool) -> ParamBinding {
        let mut entries = BTreeMap::new();
        self.visit_params(&mut |name, t| {
            let wants = trainable(name);
            let mut v = t.clone();
            v.set_requires_grad(wants);
            entries.insert(name.to_string(), (tape.leaf(&v), wants));
        });
        ParamBinding { entries }
    }

    /// Differentiable forward pass. `BnMode::Train` normalizes with batch
    /// statistics and advances the running ones in place; `BnMode::Eval`
    /// freezes them (the reference-network path inside a distillation step).
    pub fn forward_taped(
        &mut self,
        tape: &mut Tape<E>,
        binding: &ParamBinding,
        images: &Tensor<E>,
        mode: BnMode,
    ) -> Result<TapedForward> {
        if self.stem.max_pool.is_some() {
            return Err(Error::unsupported(
                "stems with max pooling have no differentiable path".to_string(),
            ));
        }
        let x0 = tape.constant(images);
        let mut x = taped_conv_bn(tape, binding, &mut self.stem.conv, "stem.conv", "stem.bn", x0, mode, true)?;
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                let n = block.name.clone();
                x = match &mut block.body {
                    BlockBody::Basic { conv1, conv2, downsample } => {
                        let h = taped_conv_bn(tape, binding, conv1, &format!("{n}.conv1"), &format!("{n}.bn1"), x, mode, true)?;
                        let h = taped_conv_bn(tape, binding, conv2, &format!("{n}.conv2"), &format!("{n}.bn2"), h, mode, false)?;
                        let skip = match downsample {
                            Some(ds) => taped_conv_bn(
                                tape,
                                binding,
                                ds,
                                &format!("{n}.downsample.conv"),
                                &format!("{n}.downsample.bn"),
                                x,
                                mode,
                                false,
                            )?,
                            None => x,
                        };
                        let joined = tape.add(h, skip)?;
                        tape.relu(joined)
                    }
                    BlockBody::Inverted { .. } => {
                        return Err(Error::unsupported(format!(
                            "block `{n}`: inverted-residual execution is not implemented",
                        )));
                    }
                };
            }
        }
        if let Some(pc) = &mut self.head.pre_conv {
            x = taped_conv_bn(tape, binding, pc, "head.conv", "head.bn", x, mode, true)?;
        }
        let features = tape.global_avg_pool(x)?;
        let w = binding.var("head.fc.weight")?;
        let b = binding.var("head.fc.bias")?;
        let logits = tape.linear(features, w, b)?;
        Ok(TapedForward { logits, features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tiny_resnet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, c, h, w], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn eval_trace_matches_expected_shapes() {
        let g = tiny_resnet::<f32>(&[16, 32, 64], &[2, 2, 2], 5, 3).unwrap();
        let out = g.forward_eval(&batch(2, 3, 32, 32, 0), true).unwrap();
        assert_eq!(out.logits.dims(), &[2, 5]);
        assert_eq!(out.features.dims(), &[2, 64]);
        assert_eq!(out.taps.len(), 6);
        let by_name: std::collections::BTreeMap<_, _> =
            out.shape_trace.iter().cloned().collect();
        assert_eq!(by_name["stem"], vec![2, 16, 32, 32]);
        assert_eq!(by_name["layer1.1"], vec![2, 16, 32, 32]);
        assert_eq!(by_name["layer2.0"], vec![2, 32, 16, 16]);
        assert_eq!(by_name["layer3.1"], vec![2, 64, 8, 8]);
        assert_eq!(by_name["logits"], vec![2, 5]);
    }

    #[test]
    fn taps_only_on_request() {
        let g = tiny_resnet::<f32>(&[8, 16], &[1, 1], 4, 3).unwrap();
        let out = g.forward_eval(&batch(1, 3, 16, 16, 0), false).unwrap();
        assert!(out.taps.is_empty());
    }

    #[test]
    fn taped_eval_matches_functional_eval_bitwise() {
        let mut g = tiny_resnet::<f32>(&[8, 16], &[2, 2], 4, 11).unwrap();
        let x = batch(3, 3, 16, 16, 5);
        let reference = g.forward_eval(&x, false).unwrap();

        let mut tape = Tape::new();
        let binding = g.bind_params(&mut tape, &|_| false);
        let fwd = g.forward_taped(&mut tape, &binding, &x, BnMode::Eval).unwrap();
        assert!(tape.value(fwd.logits).bit_eq(&reference.logits));
        assert!(tape.value(fwd.features).bit_eq(&reference.features));
    }

    #[test]
    fn train_mode_advances_running_stats_eval_does_not() {
        let mut g = tiny_resnet::<f32>(&[8, 16], &[1, 1], 4, 2).unwrap();
        let x = batch(4, 3, 16, 16, 9);
        let before = g.stem.conv.running_mean.data().to_vec();

        let mut tape = Tape::new();
        let binding = g.bind_params(&mut tape, &|_| false);
        g.forward_taped(&mut tape, &binding, &x, BnMode::Eval).unwrap();
        assert_eq!(g.stem.conv.running_mean.data(), before.as_slice());

        let mut tape = Tape::new();
        let binding = g.bind_params(&mut tape, &|_| true);
        g.forward_taped(&mut tape, &binding, &x, BnMode::Train).unwrap();
        assert_ne!(g.stem.conv.running_mean.data(), before.as_slice());
    }

    #[test]
    fn backward_reaches_every_trainable_param_and_skips_frozen() {
        let mut g = tiny_resnet::<f32>(&[8, 16], &[2, 2], 4, 13).unwrap();
        let x = batch(4, 3, 16, 16, 1);
        let labels = [0usize, 1, 2, 3];

        let frozen = |name: &str| !name.starts_with("layer1");
        let mut tape = Tape::new();
        let binding = g.bind_params(&mut tape, &frozen);
        let fwd = g.forward_taped(&mut tape, &binding, &x, BnMode::Train).unwrap();
        let loss = tape.cross_entropy(fwd.logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();

        for (name, var, trainable) in binding.iter() {
            if trainable {
                let gr = grads.get(var).unwrap_or_else(|| panic!("missing grad for {name}"));
                assert!(gr.iter().any(|v| *v != 0.0) || name.ends_with("beta"), "all-zero grad for {name}");
            } else {
                assert!(grads.get(var).is_none(), "unexpected grad for frozen {name}");
            }
        }
    }

    #[test]
    fn recalibrate_updates_stats_without_touching_weights() {
        let mut g = tiny_resnet::<f32>(&[8, 16], &[1, 1], 4, 21).unwrap();
        let w_before = g.stem.conv.weight.data().to_vec();
        let rm_before = g.stages[1].blocks[0].name.clone();
        assert_eq!(rm_before, "layer2.0");
        let stats_before: Vec<f32> = {
            let mut v = Vec::new();
            g.visit_buffers(&mut |_, t| v.extend_from_slice(t.data()));
            v
        };
        g.forward_recalibrate(&batch(4, 3, 16, 16, 3)).unwrap();
        assert_eq!(g.stem.conv.weight.data(), w_before.as_slice());
        let stats_after: Vec<f32> = {
            let mut v = Vec::new();
            g.visit_buffers(&mut |_, t| v.extend_from_slice(t.data()));
            v
        };
        assert_ne!(stats_before, stats_after);
    }

    #[test]
    fn inverted_blocks_refuse_execution() {
        let g = crate::graph::mobilenet_v2::<f32>(10, 1).unwrap();
        let err = g.forward_eval(&batch(1, 3, 32, 32, 0), false).unwrap_err();
        assert!(err.to_string().contains("structural only"), "{err}");
    }
}
