//! Reverse sweep. Vector-Jacobian products are emitted as ordinary tape
//! entries, so the returned gradients are nodes that can be differentiated
//! again (double backprop).

use std::collections::HashMap;

use crate::diffcore::tape::{NodeId, Op, Tape};
use crate::diffcore::{DiffError, Tensor};

/// Gradient of a scalar root with respect to tape nodes. Nodes the root
/// does not depend on are absent (gradient zero).
#[derive(Debug, Default)]
pub struct Gradients {
    adjoints: HashMap<NodeId, NodeId>,
}

impl Gradients {
    /// Tape node holding `d root / d id`, usable for further composition.
    pub fn node(&self, id: NodeId) -> Option<NodeId> {
        self.adjoints.get(&id).copied()
    }

    pub fn tensor<'t>(&self, tape: &'t Tape, id: NodeId) -> Option<&'t Tensor> {
        self.node(id).map(|n| tape.value(n))
    }

    /// Gradient values, filling in zeros when the root does not depend on
    /// the node.
    pub fn tensor_or_zeros(&self, tape: &Tape, id: NodeId) -> Tensor {
        match self.tensor(tape, id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.value(id).shape().to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
    }
}

impl Tape {
    /// Reverse-mode gradient of a numel-1 root with respect to every node
    /// it depends on.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients, DiffError> {
        if !self.contains(root) {
            return Err(DiffError::UnknownNode(root.index()));
        }
        if self.value(root).numel() != 1 {
            return Err(DiffError::RootNotScalar(self.value(root).shape().to_vec()));
        }

        let mut adj: HashMap<NodeId, NodeId> = HashMap::new();
        if self.requires_grad(root) {
            let seed_shape = self.value(root).shape().to_vec();
            let numel: usize = seed_shape.iter().product();
            let seed = self.constant(Tensor::new(seed_shape, vec![1.0; numel]));
            adj.insert(root, seed);
        }

        for i in (0..=root.index()).rev() {
            let node = NodeId(i);
            let Some(&g) = adj.get(&node) else { continue };
            if !self.requires_grad(node) {
                continue;
            }
            let (op, inputs) = {
                let e = &self.entries[i];
                (e.op.clone(), e.inputs.clone())
            };
            self.emit_vjp(&op, &inputs, node, g, &mut adj)?;
        }

        Ok(Gradients { adjoints: adj })
    }

    /// Add `contribution` into the adjoint slot of `target`.
    fn accumulate(
        &mut self,
        adj: &mut HashMap<NodeId, NodeId>,
        target: NodeId,
        contribution: NodeId,
    ) -> Result<(), DiffError> {
        match adj.get(&target) {
            Some(&prev) => {
                let total = self.add(prev, contribution)?;
                adj.insert(target, total);
            }
            None => {
                adj.insert(target, contribution);
            }
        }
        Ok(())
    }

    /// Reshape/reduce an adjoint so its shape matches the primal it flows
    /// into. Needed where forward broadcasting widened a numel-1 operand.
    fn fit_adjoint(&mut self, g: NodeId, target_shape: &[usize]) -> Result<NodeId, DiffError> {
        if self.value(g).shape() == target_shape {
            return Ok(g);
        }
        let s = self.sum(g)?;
        if target_shape.is_empty() {
            Ok(s)
        } else {
            self.reshape(s, target_shape.to_vec())
        }
    }

    fn emit_vjp(
        &mut self,
        op: &Op,
        inputs: &[NodeId],
        out: NodeId,
        g: NodeId,
        adj: &mut HashMap<NodeId, NodeId>,
    ) -> Result<(), DiffError> {
        match *op {
            Op::Var | Op::Const => {}
            Op::Add => {
                for &inp in inputs {
                    if self.requires_grad(inp) {
                        let shape = self.value(inp).shape().to_vec();
                        let c = self.fit_adjoint(g, &shape)?;
                        self.accumulate(adj, inp, c)?;
                    }
                }
            }
            Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.requires_grad(a) {
                    let shape = self.value(a).shape().to_vec();
                    let c = self.fit_adjoint(g, &shape)?;
                    self.accumulate(adj, a, c)?;
                }
                if self.requires_grad(b) {
                    let n = self.neg(g)?;
                    let shape = self.value(b).shape().to_vec();
                    let c = self.fit_adjoint(n, &shape)?;
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.requires_grad(a) {
                    let p = self.mul(g, b)?;
                    let shape = self.value(a).shape().to_vec();
                    let c = self.fit_adjoint(p, &shape)?;
                    self.accumulate(adj, a, c)?;
                }
                if self.requires_grad(b) {
                    let p = self.mul(g, a)?;
                    let shape = self.value(b).shape().to_vec();
                    let c = self.fit_adjoint(p, &shape)?;
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::ScalarMul(c) => {
                let a = inputs[0];
                if self.requires_grad(a) {
                    let contrib = self.scalar_mul(c, g)?;
                    self.accumulate(adj, a, contrib)?;
                }
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.requires_grad(a) {
                    let bt = self.transpose(b)?;
                    let c = self.matmul(g, bt)?;
                    self.accumulate(adj, a, c)?;
                }
                if self.requires_grad(b) {
                    let at = self.transpose(a)?;
                    let c = self.matmul(at, g)?;
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::MatVec => {
                let (a, x) = (inputs[0], inputs[1]);
                if self.requires_grad(a) {
                    let c = self.outer(g, x)?;
                    self.accumulate(adj, a, c)?;
                }
                if self.requires_grad(x) {
                    let at = self.transpose(a)?;
                    let c = self.matvec(at, g)?;
                    self.accumulate(adj, x, c)?;
                }
            }
            Op::Outer => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.requires_grad(a) {
                    let c = self.matvec(g, b)?;
                    self.accumulate(adj, a, c)?;
                }
                if self.requires_grad(b) {
                    let gt = self.transpose(g)?;
                    let c = self.matvec(gt, a)?;
                    self.accumulate(adj, b, c)?;
                }
            }
            Op::Transpose => {
                let c = self.transpose(g)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::Sigmoid => {
                let y2 = self.square(out)?;
                let d = self.sub(out, y2)?;
                let c = self.mul(g, d)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::Tanh => {
                let one = self.scalar_const(1.0);
                let y2 = self.square(out)?;
                let d = self.sub(one, y2)?;
                let c = self.mul(g, d)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::Exp => {
                let c = self.mul(g, out)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::Log => {
                let r = self.recip(inputs[0])?;
                let c = self.mul(g, r)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::Softplus => {
                let s = self.sigmoid(inputs[0])?;
                let c = self.mul(g, s)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::Square => {
                let p = self.mul(g, inputs[0])?;
                let c = self.scalar_mul(2.0, p)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::Sqrt => {
                let r = self.recip(out)?;
                let h = self.scalar_mul(0.5, r)?;
                let c = self.mul(g, h)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::Recip => {
                let y2 = self.square(out)?;
                let p = self.mul(g, y2)?;
                let c = self.neg(p)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::Softmax => {
                let (_, cols) = self.value(out).rows_cols()?;
                let t = self.mul(g, out)?;
                let s = self.sum_last(t)?;
                let sb = self.broadcast_last(s, cols)?;
                let d = self.sub(g, sb)?;
                let c = self.mul(out, d)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::LogSumExp => {
                let (_, cols) = self.value(inputs[0]).rows_cols()?;
                let sm = self.softmax(inputs[0])?;
                let gb = self.broadcast_last(g, cols)?;
                let c = self.mul(gb, sm)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::Sum => {
                let shape = self.value(inputs[0]).shape().to_vec();
                let c = self.fill(g, shape)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::SumLast => {
                let (_, cols) = self.value(inputs[0]).rows_cols()?;
                let c = self.broadcast_last(g, cols)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::BroadcastLast(_) => {
                let s = self.sum_last(g)?;
                let shape = self.value(inputs[0]).shape().to_vec();
                let c = self.fit_adjoint(s, &shape)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::Fill(_) => {
                let shape = self.value(inputs[0]).shape().to_vec();
                let c = self.fit_adjoint(g, &shape)?;
                self.accumulate(adj, inputs[0], c)?;
            }
            Op::MinScalar => {
                let (a, b) = (inputs[0], inputs[1]);
                let picked = if self.value(a).item() <= self.value(b).item() {
                    a
                } else {
                    b
                };
                if self.requires_grad(picked) {
                    self.accumulate(adj, picked, g)?;
                }
            }
            Op::Clamp { lo, hi } => {
                let a = inputs[0];
                let mask: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .map(|&x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 })
                    .collect();
                let shape = self.value(a).shape().to_vec();
                let m = self.constant(Tensor::new(shape, mask));
                let c = self.mul(g, m)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Concat => {
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.value(inp).numel();
                    if self.requires_grad(inp) {
                        let c = self.slice(g, offset, len)?;
                        self.accumulate(adj, inp, c)?;
                    }
                    offset += len;
                }
            }
            Op::Slice { start, len } => {
                let a = inputs[0];
                let total = self.value(a).numel();
                let mut parts = Vec::new();
                if start > 0 {
                    parts.push(self.constant(Tensor::vector(vec![0.0; start])));
                }
                parts.push(g);
                if start + len < total {
                    parts.push(self.constant(Tensor::vector(vec![0.0; total - start - len])));
                }
                let c = self.concat(&parts)?;
                self.accumulate(adj, a, c)?;
            }
            Op::Reshape(_) => {
                let shape = self.value(inputs[0]).shape().to_vec();
                let c = self.reshape(g, shape)?;
                self.accumulate(adj, inputs[0], c)?;
            }
        }
        Ok(())
    }
}
