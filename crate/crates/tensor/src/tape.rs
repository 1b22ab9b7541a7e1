//! Eager reverse-mode autodiff over the kernels in [`crate::ops`].
//!
//! Every operation executes immediately and appends one node to a flat tape.
//! `backward` walks the tape once in reverse; because node indices are
//! topologically ordered by construction, a single descending pass propagates
//! all gradients. Nodes reached by no grad-requiring leaf are skipped.

use crate::ops::{self, BnCtx, BnMode, Conv2dArgs, CosineCtx, CrossEntropyCtx};
use crate::{Element, Result, Tensor, TensorError};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum OpRecord<E: Element> {
    Leaf,
    Conv2d { x: VarId, w: VarId, args: Conv2dArgs },
    BatchNorm { x: VarId, gamma: VarId, beta: VarId, ctx: BnCtx<E> },
    Relu { x: VarId },
    GlobalAvgPool { x: VarId },
    Linear { x: VarId, w: VarId, b: VarId },
    Add { a: VarId, b: VarId },
    Affine { x: VarId, mul: E },
    CrossEntropy { logits: VarId, labels: Vec<usize>, ctx: CrossEntropyCtx<E> },
    CosineRows { u: VarId, v: VarId, ctx: CosineCtx<E> },
    MeanAll { x: VarId },
    WeightedSum { x: VarId, w: Vec<E> },
}

struct Node<E: Element> {
    value: Tensor<E>,
    /// True when any ancestor leaf requires a gradient.
    needs_grad: bool,
    op: OpRecord<E>,
}

/// Gradients produced by one backward pass, indexed by [`VarId`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: VarId) -> Option<&[E]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Vec<E>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    zero_norm_events: u64,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), zero_norm_events: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cosine rows whose norm product fell below the floor since construction.
    pub fn zero_norm_events(&self) -> u64 {
        self.zero_norm_events
    }

    pub fn value(&self, id: VarId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    /// Scalar extraction; the node must hold exactly one element.
    pub fn scalar(&self, id: VarId) -> Result<E> {
        let v = &self.nodes[id.0].value;
        if v.numel() != 1 {
            return Err(TensorError::shape(
                "Tape::scalar",
                format!("node holds {} elements", v.numel()),
            ));
        }
        Ok(v.data()[0])
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: OpRecord<E>) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, needs_grad, op });
        id
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Copies a tensor onto the tape; its `requires_grad` flag decides whether
    /// gradients flow back to it.
    pub fn leaf(&mut self, value: &Tensor<E>) -> VarId {
        self.push(value.clone(), value.requires_grad(), OpRecord::Leaf)
    }

    /// Leaf that never receives a gradient (inputs, frozen references).
    pub fn constant(&mut self, value: &Tensor<E>) -> VarId {
        let mut v = value.clone();
        v.set_requires_grad(false);
        self.push(v, false, OpRecord::Leaf)
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, args: Conv2dArgs) -> Result<VarId> {
        let y = ops::conv2d(self.value(x), self.value(w), args)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(y, needs, OpRecord::Conv2d { x, w, args }))
    }

    /// Train- or eval-mode batch norm. Running statistics are read (and in
    /// train mode written) through the borrowed slices; recalibrate mode is
    /// forward-only and lives outside the tape.
    pub fn batchnorm2d(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &mut [E],
        running_var: &mut [E],
        mode: BnMode,
    ) -> Result<VarId> {
        if mode == BnMode::Recalibrate {
            return Err(TensorError::invalid(
                "Tape::batchnorm2d",
                "recalibrate mode computes no gradients; use the functional op",
            ));
        }
        let (y, ctx) = ops::batchnorm2d(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            mode,
            true,
        )?;
        let ctx = ctx.expect("context requested");
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(y, needs, OpRecord::BatchNorm { x, gamma, beta, ctx }))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let y = ops::relu(self.value(x));
        let needs = self.needs(x);
        self.push(y, needs, OpRecord::Relu { x })
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let y = ops::global_avg_pool(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(y, needs, OpRecord::GlobalAvgPool { x }))
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, needs, OpRecord::Linear { x, w, b }))
    }

    /// Elementwise sum of two same-shape values (the residual join).
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let y = ops::add(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, needs, OpRecord::Add { a, b }))
    }

    pub fn affine(&mut self, x: VarId, mul: E, add: E) -> VarId {
        let y = ops::affine(self.value(x), mul, add);
        let needs = self.needs(x);
        self.push(y, needs, OpRecord::Affine { x, mul })
    }

    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let (y, ctx) = ops::cross_entropy(self.value(logits), labels)?;
        let needs = self.needs(logits);
        Ok(self.push(y, needs, OpRecord::CrossEntropy { logits, labels: labels.to_vec(), ctx }))
    }

    pub fn cosine_rows(&mut self, u: VarId, v: VarId) -> Result<VarId> {
        let (y, ctx) = ops::cosine_rows(self.value(u), self.value(v))?;
        self.zero_norm_events += ctx.degenerate.iter().filter(|&&d| d).count() as u64;
        let needs = self.needs(u) || self.needs(v);
        Ok(self.push(y, needs, OpRecord::CosineRows { u, v, ctx }))
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let y = ops::mean_all(self.value(x));
        let needs = self.needs(x);
        self.push(y, needs, OpRecord::MeanAll { x })
    }

    /// Scalar projection against fixed weights (gradient-check scalarizer).
    pub fn weighted_sum(&mut self, x: VarId, w: &[E]) -> Result<VarId> {
        let y = ops::weighted_sum(self.value(x), w)?;
        let needs = self.needs(x);
        Ok(self.push(y, needs, OpRecord::WeightedSum { x, w: w.to_vec() }))
    }

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// needed one; leaves created with `requires_grad` keep theirs accessible
    /// through the returned map.
    pub fn backward(&mut self, root: VarId) -> Result<Gradients<E>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::invalid(
                "Tape::backward",
                format!("root must be scalar, has {} elements", self.nodes[root.0].value.numel()),
            ));
        }
        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![E::one()]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let mut sends: Vec<(usize, Vec<E>)> = Vec::new();
            {
                let node = &self.nodes[idx];
                match &node.op {
                    OpRecord::Leaf => {
                        grads[idx] = Some(dy);
                        continue;
                    }
                    OpRecord::Conv2d { x, w, args } => {
                        let need_dx = self.needs(*x);
                        let need_dw = self.needs(*w);
                        let (dx, dw) = ops::conv2d_backward(
                            &self.nodes[x.0].value,
                            &self.nodes[w.0].value,
                            &dy,
                            *args,
                            need_dx,
                            need_dw,
                        )?;
                        if let Some(dx) = dx {
                            sends.push((x.0, dx));
                        }
                        if let Some(dw) = dw {
                            sends.push((w.0, dw));
                        }
                    }
                    OpRecord::BatchNorm { x, gamma, beta, ctx } => {
                        let (dx, dgamma, dbeta) = ops::batchnorm2d_backward(
                            &dy,
                            self.nodes[x.0].value.dims(),
                            self.nodes[gamma.0].value.data(),
                            ctx,
                        );
                        if self.needs(*x) {
                            sends.push((x.0, dx));
                        }
                        if self.needs(*gamma) {
                            sends.push((gamma.0, dgamma));
                        }
                        if self.needs(*beta) {
                            sends.push((beta.0, dbeta));
                        }
                    }
                    OpRecord::Relu { x } => {
                        if self.needs(*x) {
                            let dx = ops::relu_backward(self.nodes[x.0].value.data(), &dy);
                            sends.push((x.0, dx));
                        }
                    }
                    OpRecord::GlobalAvgPool { x } => {
                        if self.needs(*x) {
                            let dx = ops::global_avg_pool_backward(&dy, self.nodes[x.0].value.dims());
                            sends.push((x.0, dx));
                        }
                    }
                    OpRecord::Linear { x, w, b } => {
                        let (dx, dw, db) = ops::linear_backward(
                            &self.nodes[x.0].value,
                            &self.nodes[w.0].value,
                            &dy,
                        );
                        if self.needs(*x) {
                            sends.push((x.0, dx));
                        }
                        if self.needs(*w) {
                            sends.push((w.0, dw));
                        }
                        if self.needs(*b) {
                            sends.push((b.0, db));
                        }
                    }
                    OpRecord::Add { a, b } => {
                        if self.needs(*a) {
                            sends.push((a.0, dy.clone()));
                        }
                        if self.needs(*b) {
                            sends.push((b.0, dy.clone()));
                        }
                    }
                    OpRecord::Affine { x, mul } => {
                        if self.needs(*x) {
                            let dx = dy.iter().map(|&g| *mul * g).collect();
                            sends.push((x.0, dx));
                        }
                    }
                    OpRecord::CrossEntropy { logits, labels, ctx } => {
                        if self.needs(*logits) {
                            let dz = ops::cross_entropy_backward(dy[0], ctx, labels);
                            sends.push((logits.0, dz));
                        }
                    }
                    OpRecord::CosineRows { u, v, ctx } => {
                        let (du, dv) = ops::cosine_rows_backward(
                            &self.nodes[u.0].value,
                            &self.nodes[v.0].value,
                            &dy,
                            ctx,
                        );
                        if self.needs(*u) {
                            sends.push((u.0, du));
                        }
                        if self.needs(*v) {
                            sends.push((v.0, dv));
                        }
                    }
                    OpRecord::MeanAll { x } => {
                        if self.needs(*x) {
                            let dx = ops::mean_all_backward(dy[0], self.nodes[x.0].value.numel());
                            sends.push((x.0, dx));
                        }
                    }
                    OpRecord::WeightedSum { x, w } => {
                        if self.needs(*x) {
                            let dx = ops::weighted_sum_backward(dy[0], w);
                            sends.push((x.0, dx));
                        }
                    }
                }
            }
            for (target, delta) in sends {
                match grads[target].as_mut() {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += *d;
                        }
                    }
                    None => grads[target] = Some(delta),
                }
            }
        }
        Ok(Gradients { grads })
    }
}
