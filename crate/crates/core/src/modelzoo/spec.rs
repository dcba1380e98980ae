use serde::{Deserialize, Serialize};

use crate::dataset::LabelSet;
use crate::error::{Error, Result};
use crate::kv::{KvFile, KvWriter};
use crate::tensor::kernels::ConvGeometry;
use crate::tensor::Padding;

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Multiplies inputs by `factor`; `1/255` for 8-bit inputs, `1` for [0, 1].
    Rescale { factor: f32 },
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    Sigmoid,
    Softmax,
    MaxPool2d,
    Upsample2d,
    BatchNorm2d { eps: f32, momentum: f32 },
    Dropout { rate: f32 },
    Flatten,
    Dense { units: usize },
    /// Per-sample target shape.
    Reshape { shape: Vec<usize> },
}

/// Default batch-norm settings.
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.99;

impl Layer {
    pub fn conv(filters: usize) -> Self {
        Layer::Conv2d {
            filters,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn batchnorm() -> Self {
        Layer::BatchNorm2d {
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

/// Architecture descriptor: per-sample input shape plus an ordered layer
/// list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `cnn`, `dae`, `generator` or `discriminator`.
    pub kind: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    /// Classes behind the output units of a classifier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_set: Option<LabelSet>,
}

/// Name and shape of one stored array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArraySpec {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(op, format!("expects an HxWxC activation, got {shape:?}"))),
    }
}

impl ModelSpec {
    /// Per-sample output shape of every layer, checking that shapes chain.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            cur = match layer {
                Layer::Rescale { .. } | Layer::Relu | Layer::Sigmoid | Layer::Dropout { .. } => cur,
                Layer::Softmax => {
                    if cur.len() != 1 {
                        return Err(Error::shape("softmax", format!("expects a flat activation, got {cur:?}")));
                    }
                    cur
                }
                Layer::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (h, w, c) = spatial("conv2d", &cur)?;
                    let geo = ConvGeometry::new(&[1, h, w, c], &[*kernel, *kernel, c, *filters], *stride, *padding)?;
                    geo.output_shape()[1..].to_vec()
                }
                Layer::MaxPool2d => {
                    let (h, w, c) = spatial("maxpool2d", &cur)?;
                    if h < 2 || w < 2 {
                        return Err(Error::shape("maxpool2d", format!("{h}x{w} is too small to pool")));
                    }
                    vec![h / 2, w / 2, c]
                }
                Layer::Upsample2d => {
                    let (h, w, c) = spatial("upsample2d", &cur)?;
                    vec![2 * h, 2 * w, c]
                }
                Layer::BatchNorm2d { .. } => {
                    spatial("batchnorm2d", &cur)?;
                    cur
                }
                Layer::Flatten => vec![cur.iter().product()],
                Layer::Dense { .. } if cur.len() != 1 => {
                    return Err(Error::shape("dense", format!("expects a flat activation, got {cur:?}")));
                }
                Layer::Dense { units } => vec![*units],
                Layer::Reshape { shape } => {
                    if shape.iter().product::<usize>() != cur.iter().product::<usize>() {
                        return Err(Error::shape("reshape", format!("cannot view {cur:?} as {shape:?}")));
                    }
                    shape.clone()
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    /// Trainable arrays in storage order.
    pub fn param_specs(&self) -> Result<Vec<ArraySpec>> {
        self.arrays(false)
    }

    /// Non-trainable state (batch-norm running moments).
    pub fn buffer_specs(&self) -> Result<Vec<ArraySpec>> {
        self.arrays(true)
    }

    fn arrays(&self, buffers: bool) -> Result<Vec<ArraySpec>> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        let mut add = |layer: usize, name: &str, shape: Vec<usize>| {
            out.push(ArraySpec {
                layer,
                name: format!("l{layer}.{name}"),
                shape,
            })
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { &self.input_shape } else { &shapes[i - 1] };
            match (layer, buffers) {
                (Layer::Conv2d { filters, kernel, .. }, false) => {
                    add(i, "kernel", vec![*kernel, *kernel, input[2], *filters]);
                    add(i, "bias", vec![*filters]);
                }
                (Layer::Dense { units }, false) => {
                    add(i, "weights", vec![input[0], *units]);
                    add(i, "bias", vec![*units]);
                }
                (Layer::BatchNorm2d { .. }, false) => {
                    add(i, "gamma", vec![input[2]]);
                    add(i, "beta", vec![input[2]]);
                }
                (Layer::BatchNorm2d { .. }, true) => {
                    add(i, "running_mean", vec![input[2]]);
                    add(i, "running_var", vec![input[2]]);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_specs()?.iter().map(ArraySpec::numel).sum())
    }
}

/// Filter counts and regularization of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnConfig {
    pub filters: [usize; 3],
    pub dropout: f32,
    pub hidden: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            filters: [16, 32, 64],
            dropout: 0.5,
            hidden: 128,
        }
    }
}

impl CnnConfig {
    pub const KEYS: [&str; 3] = ["filters", "hidden", "dropout"];

    /// Overrides fields named in `kv` (`filters` as `a,b,c`).
    pub fn apply_kv(mut self, kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(|k| Self::KEYS.contains(&k))?;
        kv.set_array("filters", &mut self.filters)?;
        kv.set("hidden", &mut self.hidden)?;
        kv.set("dropout", &mut self.dropout)?;
        Ok(self)
    }

    pub fn to_kv(&self) -> String {
        let [a, b, c] = self.filters;
        KvWriter::new()
            .pair("filters", format!("{a},{b},{c}"))
            .pair("hidden", self.hidden)
            .pair("dropout", self.dropout)
            .finish()
    }
}

/// Classifier: rescale, three conv+relu+maxpool blocks, dropout, a hidden
/// dense+relu layer and a softmax output over `label_set`.
pub fn build_cnn(input_shape: [usize; 3], label_set: LabelSet) -> Result<ModelSpec> {
    build_cnn_with(input_shape, label_set, &CnnConfig::default())
}

pub fn build_cnn_with(input_shape: [usize; 3], label_set: LabelSet, cfg: &CnnConfig) -> Result<ModelSpec> {
    let [h, w, _] = input_shape;
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "build_cnn",
            format!("input {h}x{w} must be a positive multiple of 8 on both axes"),
        ));
    }
    let mut layers = vec![Layer::Rescale { factor: 1.0 }];
    for f in cfg.filters {
        layers.extend([Layer::conv(f), Layer::Relu, Layer::MaxPool2d]);
    }
    layers.extend([
        Layer::Flatten,
        Layer::Dropout { rate: cfg.dropout },
        Layer::Dense { units: cfg.hidden },
        Layer::Relu,
        Layer::Dense { units: label_set.len() },
        Layer::Softmax,
    ]);
    let spec = ModelSpec {
        kind: "cnn".into(),
        input_shape: input_shape.to_vec(),
        layers,
        label_set: Some(label_set),
    };
    spec.shapes()?;
    Ok(spec)
}

/// Index of the DAE layer whose output is the encoding.
pub const DAE_BOTTLENECK: usize = 5;

/// Denoising autoencoder: two conv32+relu+maxpool stages, two
/// conv32+relu+upsample stages, and a 3-filter sigmoid conv.
pub fn build_dae(input_shape: [usize; 3]) -> Result<ModelSpec> {
    let [h, w, c] = input_shape;
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "build_dae",
            format!("input {h}x{w} must be a positive multiple of 4 on both axes"),
        ));
    }
    let layers = vec![
        Layer::conv(32),
        Layer::Relu,
        Layer::MaxPool2d,
        Layer::conv(32),
        Layer::Relu,
        Layer::MaxPool2d,
        Layer::conv(32),
        Layer::Relu,
        Layer::Upsample2d,
        Layer::conv(32),
        Layer::Relu,
        Layer::Upsample2d,
        Layer::conv(c),
        Layer::Sigmoid,
    ];
    let spec = ModelSpec {
        kind: "dae".into(),
        input_shape: input_shape.to_vec(),
        layers,
        label_set: None,
    };
    spec.shapes()?;
    Ok(spec)
}

/// Layer widths of the adversarial pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GanShape {
    pub latent_dim: usize,
    /// Channels of the `(H/4)×(W/4)` seed map the dense layer produces.
    pub seed_channels: usize,
    /// Filters of the two hidden generator convs.
    pub generator_filters: [usize; 2],
    /// Filters of the three stride-2 discriminator convs.
    pub discriminator_filters: [usize; 3],
    pub discriminator_dropout: f32,
}

impl Default for GanShape {
    fn default() -> Self {
        Self {
            latent_dim: 100,
            seed_channels: 64,
            generator_filters: [32, 16],
            discriminator_filters: [16, 32, 64],
            discriminator_dropout: 0.3,
        }
    }
}

/// Generator: dense to a `(H/4)×(W/4)×64` map, then two conv stages that
/// each upsample ×2, and a sigmoid output conv. The dense layer and both
/// hidden convs are followed by relu and batch norm.
///
/// Discriminator: three stride-2 conv+relu+dropout blocks and a dense
/// sigmoid unit.
pub fn build_gan(image_shape: [usize; 3], shape: &GanShape) -> Result<(ModelSpec, ModelSpec)> {
    let [h, w, c] = image_shape;
    if shape.latent_dim == 0 {
        return Err(Error::contract("latent_dim must be at least 1"));
    }
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "build_gan",
            format!("image {h}x{w} must be a positive multiple of 4 on both axes"),
        ));
    }
    let seed_map = vec![h / 4, w / 4, shape.seed_channels];
    let [g1, g2] = shape.generator_filters;
    let generator = ModelSpec {
        kind: "generator".into(),
        input_shape: vec![shape.latent_dim],
        layers: vec![
            Layer::Dense {
                units: seed_map.iter().product(),
            },
            Layer::Reshape { shape: seed_map },
            Layer::Relu,
            Layer::batchnorm(),
            Layer::conv(g1),
            Layer::Relu,
            Layer::batchnorm(),
            Layer::Upsample2d,
            Layer::conv(g2),
            Layer::Relu,
            Layer::batchnorm(),
            Layer::Upsample2d,
            Layer::conv(c),
            Layer::Sigmoid,
        ],
        label_set: None,
    };
    let mut layers = Vec::new();
    for f in shape.discriminator_filters {
        layers.extend([
            Layer::Conv2d {
                filters: f,
                kernel: 3,
                stride: 2,
                padding: Padding::Same,
            },
            Layer::Relu,
            Layer::Dropout {
                rate: shape.discriminator_dropout,
            },
        ]);
    }
    layers.extend([Layer::Flatten, Layer::Dense { units: 1 }, Layer::Sigmoid]);
    let discriminator = ModelSpec {
        kind: "discriminator".into(),
        input_shape: image_shape.to_vec(),
        layers,
        label_set: None,
    };
    generator.shapes()?;
    discriminator.shapes()?;
    Ok((generator, discriminator))
}
