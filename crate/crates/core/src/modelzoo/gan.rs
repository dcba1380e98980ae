//! Adversarial training of a per-class generator.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::spec::{build_gan, GanShape};
use super::stack_tiles;
use crate::dataset::{ClassLabel, ImageTile};
use crate::error::{Error, Result};
use crate::kv::{KvFile, KvWriter};
use crate::synthdata::ClassGenerator;
use crate::tensor::{Graph, Mode, Tensor};
use crate::training::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq)]
pub struct GanConfig {
    pub shape: GanShape,
    pub batch_size: usize,
    /// Discriminator/generator step pairs.
    pub iterations: usize,
    /// Shared by both networks; `beta1` defaults to 0.5.
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            shape: GanShape::default(),
            batch_size: 16,
            iterations: 300,
            adam: AdamConfig {
                beta1: 0.5,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl GanConfig {
    pub const KEYS: [&str; 9] = [
        "iterations",
        "batch_size",
        "latent_dim",
        "seed_channels",
        "generator_filters",
        "discriminator_filters",
        "discriminator_dropout",
        "lr",
        "beta1",
    ];

    /// Overrides fields named in `kv` (`generator_filters` as `a,b`,
    /// `discriminator_filters` as `a,b,c`).
    pub fn apply_kv(mut self, kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(|k| Self::KEYS.contains(&k))?;
        kv.set("iterations", &mut self.iterations)?;
        kv.set("batch_size", &mut self.batch_size)?;
        kv.set("latent_dim", &mut self.shape.latent_dim)?;
        kv.set("seed_channels", &mut self.shape.seed_channels)?;
        kv.set_array("generator_filters", &mut self.shape.generator_filters)?;
        kv.set_array("discriminator_filters", &mut self.shape.discriminator_filters)?;
        kv.set("discriminator_dropout", &mut self.shape.discriminator_dropout)?;
        kv.set("lr", &mut self.adam.lr)?;
        kv.set("beta1", &mut self.adam.beta1)?;
        Ok(self)
    }

    pub fn to_kv(&self) -> String {
        let [a, b] = self.shape.generator_filters;
        let [d1, d2, d3] = self.shape.discriminator_filters;
        KvWriter::new()
            .pair("iterations", self.iterations)
            .pair("batch_size", self.batch_size)
            .pair("latent_dim", self.shape.latent_dim)
            .pair("seed_channels", self.shape.seed_channels)
            .pair("generator_filters", format!("{a},{b}"))
            .pair("discriminator_filters", format!("{d1},{d2},{d3}"))
            .pair("discriminator_dropout", self.shape.discriminator_dropout)
            .pair("lr", self.adam.lr)
            .pair("beta1", self.adam.beta1)
            .finish()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GanHistory {
    pub discriminator_loss: Vec<f32>,
    pub generator_loss: Vec<f32>,
}

/// A trained pair plus the class it imitates.
#[derive(Debug, Clone)]
pub struct GanModel {
    pub generator: Network,
    pub discriminator: Network,
    pub class: ClassLabel,
    pub history: GanHistory,
}

/// Standard-normal latent batch.
pub fn latent_batch(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![n, dim], data).expect("latent shape")
}

fn step_seed(seed: u64, iteration: usize, lane: u64) -> u64 {
    seed.wrapping_add((iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .rotate_left(23)
        ^ lane.wrapping_mul(0xD6E8_FEB8_6659_FD93)
}

/// One discriminator step on `real` against fresh fakes. Only the
/// discriminator's parameters change.
pub fn discriminator_step(
    gen: &Network,
    disc: &mut Network,
    state: &mut AdamState,
    real: &Tensor,
    adam: &AdamConfig,
    seed: u64,
) -> Result<f32> {
    let n = real.shape()[0];
    let latent = gen.input_shape()[0];
    let mut g = Graph::new();
    let gp = gen.bind(&mut g, false);
    let z = g.constant(latent_batch(n, latent, seed));
    let fake = gen.forward(&mut g, &gp, z, Mode::Train, seed ^ 1)?.output;
    let mut batch = real.data().to_vec();
    batch.extend_from_slice(g.value(fake).data());
    let mut shape = real.shape().to_vec();
    shape[0] = 2 * n;

    let mut g = Graph::new();
    let dp = disc.bind(&mut g, true);
    let x = g.constant(Tensor::new(shape, batch)?);
    let out = disc.forward(&mut g, &dp, x, Mode::Train, seed ^ 2)?.output;
    let mut targets = vec![1.0; n];
    targets.resize(2 * n, 0.0);
    let loss = g.bce(out, &targets)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let grads: Vec<Vec<f32>> = dp.iter().zip(&disc.params).map(|(v, p)| grads.take(*v).unwrap_or_else(|| vec![0.0; p.numel()])).collect();
    adam_step(&mut disc.params, &grads, state, adam)?;
    Ok(value)
}

/// One generator step: fakes are scored against the "real" label. Only
/// the generator's parameters and running moments change.
pub fn generator_step(
    gen: &mut Network,
    disc: &Network,
    state: &mut AdamState,
    n: usize,
    adam: &AdamConfig,
    seed: u64,
) -> Result<f32> {
    let latent = gen.input_shape()[0];
    let mut g = Graph::new();
    let gp = gen.bind(&mut g, true);
    let dp = disc.bind(&mut g, false);
    let z = g.constant(latent_batch(n, latent, seed));
    let f = gen.forward(&mut g, &gp, z, Mode::Train, seed ^ 1)?;
    let out = disc.forward(&mut g, &dp, f.output, Mode::Train, seed ^ 2)?.output;
    let loss = g.bce(out, &vec![1.0; n])?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let grads: Vec<Vec<f32>> = gp.iter().zip(&gen.params).map(|(v, p)| grads.take(*v).unwrap_or_else(|| vec![0.0; p.numel()])).collect();
    adam_step(&mut gen.params, &grads, state, adam)?;
    gen.absorb_moments(&f.moments);
    Ok(value)
}

/// Trains a generator/discriminator pair on the tiles of one class with
/// alternating 1:1 Adam steps. Real batches are drawn with replacement.
pub fn train_gan(real: &[ImageTile], cfg: &GanConfig) -> Result<GanModel> {
    if cfg.batch_size == 0 {
        return Err(Error::contract("GAN batch_size must be at least 1"));
    }
    if real.len() < cfg.batch_size {
        return Err(Error::contract(format!(
            "GAN training needs at least {} real tiles, got {}",
            cfg.batch_size,
            real.len()
        )));
    }
    let class = real[0].class;
    if let Some(t) = real.iter().find(|t| t.class != class) {
        return Err(Error::contract(format!("GAN tiles mix classes {class} and {}", t.class)));
    }
    let shape = real[0].shape();
    let (gspec, dspec) = build_gan(shape, &cfg.shape)?;
    let mut gen = Network::init(gspec, cfg.seed)?;
    let mut disc = Network::init(dspec, cfg.seed.wrapping_add(1))?;
    let mut gs = AdamState::new(&gen.params);
    let mut ds = AdamState::new(&disc.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6A09_E667_F3BC_C908);
    let mut history = GanHistory::default();
    for it in 0..cfg.iterations {
        let batch: Vec<&ImageTile> = (0..cfg.batch_size).map(|_| real.choose(&mut rng).expect("non-empty")).collect();
        let real_batch = stack_tiles(batch.into_iter(), shape)?;
        let d = discriminator_step(&gen, &mut disc, &mut ds, &real_batch, &cfg.adam, step_seed(cfg.seed, it, 0))?;
        let g = generator_step(&mut gen, &disc, &mut gs, cfg.batch_size, &cfg.adam, step_seed(cfg.seed, it, 1))?;
        history.discriminator_loss.push(d);
        history.generator_loss.push(g);
    }
    gen.meta.seed = cfg.seed;
    gen.meta.epochs = cfg.iterations;
    gen.meta.final_loss = history.generator_loss.last().copied();
    disc.meta.seed = cfg.seed;
    disc.meta.epochs = cfg.iterations;
    disc.meta.final_loss = history.discriminator_loss.last().copied();
    Ok(GanModel {
        generator: gen,
        discriminator: disc,
        class,
        history,
    })
}

/// `n` generated tiles labelled `class`, using running batch-norm moments.
pub fn gan_sample(generator: &Network, class: ClassLabel, n: usize, seed: u64) -> Result<Vec<ImageTile>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let out_shape = generator.spec().output_shape()?;
    let [h, w, c] = out_shape[..] else {
        return Err(Error::shape("gan_sample", format!("generator output {out_shape:?} is not an image")));
    };
    let z = latent_batch(n, generator.input_shape()[0], seed);
    let pixels = generator.infer(z.data(), 32)?;
    pixels
        .chunks_exact(h * w * c)
        .enumerate()
        .map(|(i, px)| ImageTile::new(h, w, c, px.to_vec(), format!("gan:{class}:{seed}:{i}"), class))
        .collect()
}

/// Probability the discriminator assigns to "real" for each tile.
pub fn discriminate(disc: &Network, tiles: &[ImageTile]) -> Result<Vec<f32>> {
    let shape = disc.input_shape();
    let [h, w, c] = shape[..] else {
        return Err(Error::shape("discriminate", "discriminator input is not an image"));
    };
    let x = stack_tiles(tiles.iter(), [h, w, c])?;
    disc.infer(x.data(), 32)
}

/// A trained generator bound to its class, for balancing.
#[derive(Debug, Clone)]
pub struct GanGenerator {
    pub network: Network,
    pub class: ClassLabel,
}

impl ClassGenerator for GanGenerator {
    fn class(&self) -> ClassLabel {
        self.class
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Vec<ImageTile>> {
        gan_sample(&self.network, self.class, n, seed)
    }
}

impl From<GanModel> for GanGenerator {
    fn from(m: GanModel) -> Self {
        Self {
            network: m.generator,
            class: m.class,
        }
    }
}
