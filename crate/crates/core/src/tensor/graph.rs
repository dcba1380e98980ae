use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeometry};
use super::{Mode, Padding, Tensor};
use crate::error::{Error, Result};

/// Log arguments are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f32 = 1e-7;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geo: ConvGeometry,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Dropout {
        input: Var,
        multiplier: Vec<f32>,
    },
    Reshape {
        input: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Bce {
        pred: Var,
        targets: Vec<f32>,
    },
    Mse {
        pred: Var,
        target: Vec<f32>,
    },
    WeightedSum {
        input: Var,
        weights: Option<Vec<f32>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, grad: Vec<f32>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
        None => *slot = Some(grad),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(input).shape(), self.value(kernel).shape(), stride, padding)?;
        if self.value(bias).numel() != geo.out_c {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} values for {} filters", self.value(bias).numel(), geo.out_c),
            ));
        }
        let out = kernels::conv2d_forward(
            &geo,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(geo.output_shape(), out)?;
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geo,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        x.nhwc("maxpool2d")?;
        let (shape, out, argmax) = kernels::maxpool2_forward(x.shape(), x.data());
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn upsample2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        x.nhwc("upsample2d")?;
        let (shape, out) = kernels::upsample2_forward(x.shape(), x.data());
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample2 { input }, rg))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weights), self.value(bias));
        let [batch, features] = *x.shape() else {
            return Err(Error::shape("dense", format!("input must be B×F, got {:?}", x.shape())));
        };
        let [wf, units] = *w.shape() else {
            return Err(Error::shape("dense", format!("weights must be F×U, got {:?}", w.shape())));
        };
        if wf != features {
            return Err(Error::shape(
                "dense",
                format!("weights axis 0 ({wf}) != input axis 1 ({features})"),
            ));
        }
        if b.numel() != units {
            return Err(Error::shape(
                "dense",
                format!("bias has {} values for {units} units", b.numel()),
            ));
        }
        let out = kernels::dense_forward(x.data(), w.data(), b.data(), batch, features);
        let rg = self.needs(&[input, weights, bias]);
        Ok(self.push(
            Tensor::new(vec![batch, units], out)?,
            Op::Dense {
                input,
                weights,
                bias,
            },
            rg,
        ))
    }

    fn map(&mut self, input: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let rg = self.needs(&[input]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.map(input, |v| v.max(0.0), Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.map(input, kernels::sigmoid, Op::Sigmoid { input })
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        self.map(input, |v| v * factor, Op::Scale { input, factor })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let cols = *x.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let out = kernels::softmax_rows(x.data(), cols);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Per-channel batch normalization of an NHWC tensor.
    ///
    /// In [`Mode::Train`] the batch moments are used and returned so the
    /// caller can fold them into its running estimates. In [`Mode::Infer`]
    /// `running` supplies the moments.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: (&[f32], &[f32]),
        eps: f32,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let x = self.value(input);
        let (n, _, _, c) = x.nhwc("batchnorm2d")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!("gamma/beta must have {c} values (input axis 3)"),
            ));
        }
        let (mean, var, moments) = match mode {
            Mode::Train => {
                if n == 0 {
                    return Err(Error::contract("batchnorm2d needs a non-empty batch in train mode"));
                }
                let (m, v) = kernels::channel_moments(x.data(), c);
                (m.clone(), v.clone(), Some(BatchMoments { mean: m, var: v }))
            }
            Mode::Infer => {
                if running.0.len() != c || running.1.len() != c {
                    return Err(Error::shape(
                        "batchnorm2d",
                        format!("running moments must have {c} values"),
                    ));
                }
                (running.0.to_vec(), running.1.to_vec(), None)
            }
        };
        let norm = kernels::normalize_channels(
            x.data(),
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new(x.shape().to_vec(), norm.out)?;
        let rg = self.needs(&[input, gamma, beta]);
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized: norm.normalized,
                inv_std: norm.inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        );
        Ok((var_out, moments))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` in train
    /// mode, inference is the identity. `rate == 1` zeroes everything.
    pub fn dropout(&mut self, input: Var, rate: f32, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1]")));
        }
        let x = self.value(input);
        let multiplier: Vec<f32> = match mode {
            Mode::Infer => vec![1.0; x.numel()],
            Mode::Train if rate >= 1.0 => vec![0.0; x.numel()],
            Mode::Train => {
                let keep = 1.0 / (1.0 - rate);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..x.numel())
                    .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
                    .collect()
            }
        };
        let out = x.data().iter().zip(&multiplier).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Dropout { input, multiplier }, rg))
    }

    /// Mean sparse categorical cross-entropy over a batch of logits,
    /// computed with log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let [batch, classes] = *x.shape() else {
            return Err(Error::shape("sparse_cce", format!("logits must be B×K, got {:?}", x.shape())));
        };
        if labels.len() != batch {
            return Err(Error::shape(
                "sparse_cce",
                format!("{} labels for a batch of {batch}", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
        }
        let probs = kernels::softmax_rows(x.data(), classes);
        let mut total = 0.0f64;
        for (row, &label) in x.data().chunks_exact(classes).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[label] as f64;
        }
        let loss = (total / batch.max(1) as f64) as f32;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn bce(&mut self, pred: Var, targets: &[f32]) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != targets.len() {
            return Err(Error::shape(
                "bce",
                format!("{} predictions for {} targets", p.numel(), targets.len()),
            ));
        }
        let loss = binary_cross_entropy(p.data(), targets);
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: &[f32]) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.len() {
            return Err(Error::shape(
                "mse",
                format!("prediction has {} values, target {}", p.numel(), target.len()),
            ));
        }
        let loss = mean_squared_error(p.data(), target);
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let rg = self.needs(&[input]);
        self.push(
            Tensor::scalar(total as f32),
            Op::WeightedSum { input, weights: None },
            rg,
        )
    }

    /// `Σ wᵢ xᵢ`, accumulated in f64.
    pub fn weighted_sum(&mut self, input: Var, weights: &[f32]) -> Result<Var> {
        let x = self.value(input);
        if x.numel() != weights.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), x.numel()),
            ));
        }
        let total: f64 = x.data().iter().zip(weights).map(|(&v, &w)| v as f64 * w as f64).sum();
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::WeightedSum {
                input,
                weights: Some(weights.to_vec()),
            },
            rg,
        ))
    }

    /// Propagates gradients from a scalar `loss` back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("loss is not a node of this graph"))?;
        if loss_node.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Vec<f32>>], var: Var, grad: Vec<f32>) {
        if self.wants(var) {
            accumulate(&mut grads[var.0], grad);
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geo,
            } => {
                let cg = kernels::conv2d_backward(
                    geo,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    self.wants(*input),
                );
                if let Some(d) = cg.input {
                    self.send(grads, *input, d);
                }
                self.send(grads, *kernel, cg.kernel);
                self.send(grads, *bias, cg.bias);
            }
            Op::MaxPool2 { input, argmax } => {
                let d = kernels::maxpool2_backward(self.value(*input).numel(), argmax, g);
                self.send(grads, *input, d);
            }
            Op::Upsample2 { input } => {
                let d = kernels::upsample2_backward(self.value(*input).shape(), g);
                self.send(grads, *input, d);
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let x = self.value(*input);
                let (batch, features) = (x.shape()[0], x.shape()[1]);
                let dg = kernels::dense_backward(
                    x.data(),
                    self.value(*weights).data(),
                    g,
                    batch,
                    features,
                    self.wants(*input),
                );
                if let Some(d) = dg.input {
                    self.send(grads, *input, d);
                }
                self.send(grads, *weights, dg.weights);
                self.send(grads, *bias, dg.bias);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let d = g.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                self.send(grads, *input, d);
            }
            Op::Sigmoid { input } => {
                let d = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.send(grads, *input, d);
            }
            Op::Scale { input, factor } => {
                self.send(grads, *input, g.iter().map(|v| v * factor).collect());
            }
            Op::Softmax { input } => {
                let cols = *out.shape().last().expect("softmax output has an axis");
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(out.data().chunks_exact(cols)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.send(grads, *input, d);
            }
            Op::Reshape { input } => {
                self.send(grads, *input, g.to_vec());
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let ng = kernels::normalize_channels_backward(
                    g,
                    normalized,
                    inv_std,
                    self.value(*gamma).data(),
                    *batch_stats,
                );
                self.send(grads, *input, ng.input);
                self.send(grads, *gamma, ng.gamma);
                self.send(grads, *beta, ng.beta);
            }
            Op::Dropout { input, multiplier } => {
                self.send(grads, *input, g.iter().zip(multiplier).map(|(g, m)| g * m).collect());
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let classes = self.value(*logits).shape()[1];
                let scale = g[0] / labels.len().max(1) as f32;
                let mut d = probs.clone();
                for (row, &label) in d.chunks_exact_mut(classes).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.send(grads, *logits, d);
            }
            Op::Bce { pred, targets } => {
                let p = self.value(*pred).data();
                let scale = g[0] / targets.len().max(1) as f32;
                let d = p
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        if p < PROB_FLOOR || p > 1.0 - PROB_FLOOR {
                            // Clamped region: the loss is flat in p.
                            0.0
                        } else {
                            scale * (-(t / p) + (1.0 - t) / (1.0 - p))
                        }
                    })
                    .collect();
                self.send(grads, *pred, d);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let scale = 2.0 * g[0] / target.len().max(1) as f32;
                let d = p.iter().zip(target).map(|(p, t)| scale * (p - t)).collect();
                self.send(grads, *pred, d);
            }
            Op::WeightedSum { input, weights } => {
                let d = match weights {
                    Some(w) => w.iter().map(|w| w * g[0]).collect(),
                    None => vec![g[0]; self.value(*input).numel()],
                };
                self.send(grads, *input, d);
            }
        }
    }
}

/// Mean of `−[t·ln p + (1−t)·ln(1−p)]` with `p` clamped away from 0 and 1.
pub fn binary_cross_entropy(pred: &[f32], targets: &[f32]) -> f32 {
    let total: f64 = pred
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR) as f64;
            let t = t as f64;
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    (total / pred.len().max(1) as f64) as f32
}

pub fn mean_squared_error(pred: &[f32], target: &[f32]) -> f32 {
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    (total / pred.len().max(1) as f64) as f32
}
