use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{ArraySpec, Layer, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::{BatchMoments, Graph, Mode, Tensor, Var};

/// The last weight layer starts at this fraction of the usual He range so
/// an untrained network's outputs sit near the middle of their range.
pub const OUTPUT_INIT_SCALE: f32 = 0.1;

/// What produced a set of weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: Option<f32>,
}

/// A spec together with its weights and batch-norm running moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    param_specs: Vec<ArraySpec>,
    buffer_specs: Vec<ArraySpec>,
    pub params: Vec<Tensor>,
    pub buffers: Vec<Tensor>,
    pub meta: TrainMeta,
}

/// Graph handles of an executed forward pass.
#[derive(Debug)]
pub struct Forward {
    pub output: Var,
    /// Input of a trailing softmax, or the output when there is none.
    pub logits: Var,
    /// Batch moments seen by each batch-norm layer in train mode.
    pub moments: Vec<(usize, BatchMoments)>,
}

impl Network {
    /// He-uniform fan-in weights (`U(±sqrt(6 / fan_in))`), zero biases, unit
    /// gamma, zero beta; running mean 0 and variance 1.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let param_specs = spec.param_specs()?;
        let buffer_specs = spec.buffer_specs()?;
        let last_weight = param_specs
            .iter()
            .rposition(|a| a.name.ends_with(".kernel") || a.name.ends_with(".weights"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let n = a.numel();
                let data = if a.name.ends_with(".kernel") || a.name.ends_with(".weights") {
                    let fan_in: usize = a.shape[..a.shape.len() - 1].iter().product();
                    let mut limit = (6.0 / fan_in.max(1) as f32).sqrt();
                    if Some(i) == last_weight {
                        limit *= OUTPUT_INIT_SCALE;
                    }
                    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
                } else if a.name.ends_with(".gamma") {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                };
                Tensor::new(a.shape.clone(), data)
            })
            .collect::<Result<_>>()?;
        let buffers = buffer_specs
            .iter()
            .map(|a| {
                let fill = if a.name.ends_with(".running_var") { 1.0 } else { 0.0 };
                Tensor::full(a.shape.clone(), fill)
            })
            .collect();
        Ok(Self {
            spec,
            param_specs,
            buffer_specs,
            params,
            buffers,
            meta: TrainMeta::default(),
        })
    }

    /// Reassembles a network from stored arrays, checking every shape.
    pub fn from_parts(spec: ModelSpec, params: Vec<Tensor>, buffers: Vec<Tensor>, meta: TrainMeta) -> Result<Self> {
        let param_specs = spec.param_specs()?;
        let buffer_specs = spec.buffer_specs()?;
        for (specs, arrays) in [(&param_specs, &params), (&buffer_specs, &buffers)] {
            if specs.len() != arrays.len() {
                return Err(Error::contract(format!("expected {} arrays, got {}", specs.len(), arrays.len())));
            }
            for (s, t) in specs.iter().zip(arrays) {
                if s.shape != t.shape() {
                    return Err(Error::shape(
                        "network",
                        format!("{} should be {:?}, got {:?}", s.name, s.shape, t.shape()),
                    ));
                }
            }
        }
        Ok(Self {
            spec,
            param_specs,
            buffer_specs,
            params,
            buffers,
            meta,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_specs(&self) -> &[ArraySpec] {
        &self.param_specs
    }

    pub fn buffer_specs(&self) -> &[ArraySpec] {
        &self.buffer_specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    /// Puts every parameter on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    /// Runs the layers on a batch `x` of shape `[N, ...input_shape]`.
    /// Dropout masks derive from `seed` and the layer index.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var, mode: Mode, seed: u64) -> Result<Forward> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::shape(
                "forward",
                format!("batch shape {shape:?} does not match model input {:?}", self.spec.input_shape),
            ));
        }
        let batch = shape[0];
        let mut cur = x;
        let mut logits = None;
        let mut moments = Vec::new();
        let mut p = 0;
        let mut b = 0;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            cur = match layer {
                Layer::Rescale { factor } => {
                    if *factor == 1.0 {
                        cur
                    } else {
                        g.scale(cur, *factor)
                    }
                }
                Layer::Conv2d { stride, padding, .. } => {
                    p += 2;
                    g.conv2d(cur, params[p - 2], params[p - 1], *stride, *padding)?
                }
                Layer::Relu => g.relu(cur),
                Layer::Sigmoid => g.sigmoid(cur),
                Layer::Softmax => {
                    logits = Some(cur);
                    g.softmax(cur)?
                }
                Layer::MaxPool2d => g.maxpool2d(cur)?,
                Layer::Upsample2d => g.upsample2d(cur)?,
                Layer::BatchNorm2d { eps, .. } => {
                    p += 2;
                    b += 2;
                    let running = (self.buffers[b - 2].data(), self.buffers[b - 1].data());
                    let (out, m) = g.batchnorm2d(cur, params[p - 2], params[p - 1], mode, running, *eps)?;
                    if let Some(m) = m {
                        moments.push((i, m));
                    }
                    out
                }
                Layer::Dropout { rate } => {
                    let layer_seed = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    g.dropout(cur, *rate, mode, layer_seed)?
                }
                Layer::Flatten => {
                    let n: usize = g.value(cur).shape()[1..].iter().product();
                    g.reshape(cur, vec![batch, n])?
                }
                Layer::Dense { .. } => {
                    p += 2;
                    g.dense(cur, params[p - 2], params[p - 1])?
                }
                Layer::Reshape { shape } => {
                    let mut full = vec![batch];
                    full.extend(shape);
                    g.reshape(cur, full)?
                }
            };
        }
        Ok(Forward {
            output: cur,
            logits: logits.unwrap_or(cur),
            moments,
        })
    }

    /// Folds train-mode batch moments into the running estimates:
    /// `running = momentum · running + (1 - momentum) · batch`.
    pub fn absorb_moments(&mut self, moments: &[(usize, BatchMoments)]) {
        for (layer, m) in moments {
            let Layer::BatchNorm2d { momentum, .. } = self.spec.layers[*layer] else {
                continue;
            };
            let Some(k) = self.buffer_specs.iter().position(|a| a.layer == *layer) else {
                continue;
            };
            for (buf, batch) in [(k, &m.mean), (k + 1, &m.var)] {
                for (r, v) in self.buffers[buf].data_mut().iter_mut().zip(batch) {
                    *r = momentum * *r + (1.0 - momentum) * v;
                }
            }
        }
    }

    /// Inference-mode forward pass over `inputs` (`[N, ...input_shape]`,
    /// flattened), in chunks of `batch_size`.
    pub fn infer(&self, inputs: &[f32], batch_size: usize) -> Result<Vec<f32>> {
        let per: usize = self.spec.input_shape.iter().product();
        if per == 0 || inputs.len() % per != 0 {
            return Err(Error::shape("infer", format!("{} values is not a whole number of inputs", inputs.len())));
        }
        let n = inputs.len() / per;
        let mut out = Vec::new();
        for start in (0..n).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(n);
            let mut shape = vec![end - start];
            shape.extend(&self.spec.input_shape);
            let mut g = Graph::new();
            let params = self.bind(&mut g, false);
            let x = g.constant(Tensor::new(shape, inputs[start * per..end * per].to_vec())?);
            let f = self.forward(&mut g, &params, x, Mode::Infer, 0)?;
            out.extend_from_slice(g.value(f.output).data());
        }
        Ok(out)
    }

    /// Activation after layer `layer` for one inference batch.
    pub fn activation(&self, inputs: Tensor, layer: usize) -> Result<Tensor> {
        let truncated = ModelSpec {
            layers: self.spec.layers[..=layer].to_vec(),
            ..self.spec.clone()
        };
        let keep = truncated.param_specs()?.len();
        let keep_buf = truncated.buffer_specs()?.len();
        let net = Network::from_parts(
            truncated,
            self.params[..keep].to_vec(),
            self.buffers[..keep_buf].to_vec(),
            self.meta.clone(),
        )?;
        let mut g = Graph::new();
        let params = net.bind(&mut g, false);
        let x = g.constant(inputs);
        let f = net.forward(&mut g, &params, x, Mode::Infer, 0)?;
        Ok(g.value(f.output).clone())
    }
}
