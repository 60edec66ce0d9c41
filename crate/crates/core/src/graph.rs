//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with
//! its output value. [`Graph::backward`] replays the record in reverse and
//! may be called exactly once; a new forward pass needs a new graph.


use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::activation::{relu, relu_backward, softmax_backward, softmax_channels};
use crate::ops::conv::{
    conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_forward,
    ConvGeometry,
};
use crate::ops::loss::{cross_entropy_backward, cross_entropy_per_sample};
use crate::ops::norm::{batch_norm_backward, batch_norm_forward, BatchNormState, BnMode, BnUpdate};
use crate::ops::pool::{
    concat_channels, max_pool2, max_pool2_backward, split_channels, upsample2, upsample2_backward,
};
use crate::tensor::{Shape, Tensor4};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor4,
        inv_std: Vec<f64>,
        batch_dependent: bool,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    Concat(Var, Var),
    Softmax(Var),
    CrossEntropy {
        prob: Var,
        target: Tensor4,
        mask: Tensor4,
    },
    WeightedSum(Vec<(Var, Vec<f64>)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Recording,
    Consumed,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor4>>,
    state: State,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            state: State::Recording,
        }
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Result<Var> {
        if self.state != State::Recording {
            return Err(Error::Graph("graph already consumed by backward"));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    /// Gradient of the loss passed to [`Graph::backward`] with respect to `v`,
    /// if one reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor4) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that collects a gradient when `trainable`.
    pub fn param(&mut self, value: &Tensor4, trainable: bool) -> Result<Var> {
        self.push(value.clone(), Op::Leaf, trainable)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        )
    }

    /// Batch normalization. Statistics changes are returned, not applied.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        mode: BnMode,
    ) -> Result<(Var, Option<BnUpdate>)> {
        let fwd = batch_norm_forward(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
            mode,
        )?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            fwd.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized: fwd.normalized,
                inv_std: fwd.inv_std,
                batch_dependent: fwd.batch_dependent,
            },
            rg,
        )?;
        Ok((v, fwd.update))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = relu(self.value(input));
        let rg = self.rg(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = max_pool2(self.value(input))?;
        let rg = self.rg(input);
        self.push(out, Op::MaxPool { input, argmax }, rg)
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let out = upsample2(self.value(input));
        let rg = self.rg(input);
        self.push(out, Op::Upsample(input), rg)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Concat(a, b), rg)
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let out = softmax_channels(self.value(logits))?;
        let rg = self.rg(logits);
        self.push(out, Op::Softmax(logits), rg)
    }

    /// Per-sample masked cross-entropy, shape `(n, 1, 1, 1)`. Target and mask
    /// are constants.
    pub fn cross_entropy(&mut self, prob: Var, target: Tensor4, mask: Tensor4) -> Result<Var> {
        let losses = cross_entropy_per_sample(self.value(prob), &target, &mask)?;
        let n = losses.len();
        let out = Tensor4::from_vec(Shape::new(n, 1, 1, 1), losses)?;
        let rg = self.rg(prob);
        self.push(out, Op::CrossEntropy { prob, target, mask }, rg)
    }

    /// Scalar `Σ_i Σ_k weights_i[k] · x_i[k]` with constant weights.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, Vec<f64>)>) -> Result<Var> {
        let mut total = 0.0;
        let mut rg = false;
        for (v, w) in &terms {
            let x = self.value(*v);
            if x.len() != w.len() {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    left: x.shape(),
                    right: Shape::new(w.len(), 1, 1, 1),
                });
            }
            total += x.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            rg |= self.rg(*v);
        }
        self.push(Tensor4::scalar(total), Op::WeightedSum(terms), rg)
    }

    fn accumulate(&mut self, v: Var, g: Tensor4) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar `loss`. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        match self.state {
            State::Consumed => return Err(Error::Graph("backward called twice on one forward trace")),
            State::Recording if self.nodes.is_empty() => {
                return Err(Error::Graph("backward without a recorded forward pass"))
            }
            State::Recording => {}
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph("loss is not part of this graph"));
        }
        if self.nodes[loss.0].value.shape() != Shape::scalar() {
            return Err(Error::Graph("backward needs a scalar loss"));
        }
        self.state = State::Consumed;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor4::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_op(&op, i, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_op(&mut self, op: &Op, index: usize, g: &Tensor4) {
        match op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.rg(*input) {
                    let gi = conv2d_backward_input(
                        g,
                        self.value(*weight),
                        self.value(*input).shape(),
                        *geom,
                    );
                    self.accumulate(*input, gi);
                }
                if self.rg(*weight) {
                    let gw = conv2d_backward_weight(
                        g,
                        self.value(*input),
                        self.value(*weight).shape(),
                        *geom,
                    );
                    self.accumulate(*weight, gw);
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let gb = conv2d_backward_bias(g, self.value(*b).shape());
                        self.accumulate(*b, gb);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_dependent,
            } => {
                let (dx, dgamma, dbeta) = batch_norm_backward(
                    g,
                    normalized,
                    inv_std,
                    self.value(*gamma).data(),
                    *batch_dependent,
                );
                self.accumulate(*input, dx);
                let gs = self.value(*gamma).shape();
                self.accumulate(*gamma, Tensor4::from_vec(gs, dgamma).expect("gamma grad"));
                let bs = self.value(*beta).shape();
                self.accumulate(*beta, Tensor4::from_vec(bs, dbeta).expect("beta grad"));
            }
            Op::Relu(input) => {
                let gi = relu_backward(g, self.value(*input));
                self.accumulate(*input, gi);
            }
            Op::MaxPool { input, argmax } => {
                let gi = max_pool2_backward(g, argmax, self.value(*input).shape());
                self.accumulate(*input, gi);
            }
            Op::Upsample(input) => {
                let gi = upsample2_backward(g);
                self.accumulate(*input, gi);
            }
            Op::Concat(a, b) => {
                let (ga, gb) = split_channels(g, self.value(*a).shape().c);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Softmax(logits) => {
                let gi = softmax_backward(g, &self.nodes[index].value);
                self.accumulate(*logits, gi);
            }
            Op::CrossEntropy { prob, target, mask } => {
                let gp = cross_entropy_backward(self.value(*prob), target, mask, g.data());
                self.accumulate(*prob, gp);
            }
            Op::WeightedSum(terms) => {
                let scale = g.data()[0];
                for (v, w) in terms {
                    let shape = self.value(*v).shape();
                    let gv = Tensor4::from_vec(shape, w.iter().map(|x| x * scale).collect())
                        .expect("weighted sum grad");
                    self.accumulate(*v, gv);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linear_gradient_is_the_input() {
        let mut g = Graph::new();
        let x = Tensor4::from_vec(Shape::new(1, 3, 1, 1), vec![0.5, -1.5, 2.0]).unwrap();
        let w = g.param(&Tensor4::from_vec(Shape::new(1, 3, 1, 1), vec![1.0, 2.0, 3.0]).unwrap(), true).unwrap();
        // loss = Σ w·x expressed as a weighted sum with the input as weights.
        let loss = g.weighted_sum(vec![(w, x.data().to_vec())]).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), x.data());
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let w = g.param(&Tensor4::scalar(2.0), true).unwrap();
        let loss = g.weighted_sum(vec![(w, vec![3.0])]).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Graph(_))));
        assert!(g.relu(w).is_err());
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(Error::Graph(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param(&Tensor4::zeros(Shape::new(1, 2, 1, 1)), true).unwrap();
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(&Tensor4::scalar(2.0), false).unwrap();
        let b = g.param(&Tensor4::scalar(5.0), true).unwrap();
        let loss = g.weighted_sum(vec![(a, vec![1.0]), (b, vec![4.0])]).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[4.0]);
    }
}
