//! The classifier, denoising autoencoder and GAN pair, plus inference
//! helpers and `.fgs` persistence.

mod checkpoint;
mod gan;
mod network;
mod spec;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, EXTENSION, MAGIC, VERSION};
pub use gan::{
    discriminate, discriminator_step, gan_sample, generator_step, latent_batch, train_gan, GanConfig, GanGenerator,
    GanHistory, GanModel,
};
pub use network::{Forward, Network, TrainMeta, OUTPUT_INIT_SCALE};
pub use spec::{
    build_cnn, build_cnn_with, build_dae, build_gan, ArraySpec, CnnConfig, GanShape, Layer, ModelSpec, BN_EPS,
    BN_MOMENTUM, DAE_BOTTLENECK,
};

use crate::dataset::{ClassLabel, ImageTile};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::argmax;

/// Inference chunk size.
pub const PREDICT_BATCH: usize = 32;

/// Stacks tiles into an `[N, H, W, C]` batch, rejecting any tile of
/// another shape by its index and source.
pub fn stack_tiles<'a>(tiles: impl Iterator<Item = &'a ImageTile>, shape: [usize; 3]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for (i, t) in tiles.enumerate() {
        if t.shape() != shape {
            return Err(Error::shape(
                "stack_tiles",
                format!("tile {i} ({}) is {:?}, model expects {shape:?}", t.source_id, t.shape()),
            ));
        }
        data.extend_from_slice(t.pixels());
        n += 1;
    }
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)
}

fn image_input(net: &Network, op: &'static str) -> Result<[usize; 3]> {
    match net.input_shape() {
        &[h, w, c] => Ok([h, w, c]),
        other => Err(Error::shape(op, format!("model input {other:?} is not an image"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f32>,
    pub index: usize,
    pub label: Option<ClassLabel>,
}

/// Class probabilities and argmax for each tile, in input order.
pub fn predict(cnn: &Network, tiles: &[ImageTile]) -> Result<Vec<Prediction>> {
    let shape = image_input(cnn, "predict")?;
    let x = stack_tiles(tiles.iter(), shape)?;
    let probs = cnn.infer(x.data(), PREDICT_BATCH)?;
    let k = probs.len().checked_div(tiles.len()).unwrap_or(0);
    Ok(probs
        .chunks_exact(k.max(1))
        .take(tiles.len())
        .map(|row| {
            let index = argmax(row);
            Prediction {
                probs: row.to_vec(),
                index,
                label: cnn.spec().label_set.and_then(|s| s.class_at(index)),
            }
        })
        .collect())
}

/// Runs the autoencoder over each tile; labels and sources carry over.
pub fn denoise(dae: &Network, tiles: &[ImageTile]) -> Result<Vec<ImageTile>> {
    let shape = image_input(dae, "denoise")?;
    let x = stack_tiles(tiles.iter(), shape)?;
    let out = dae.infer(x.data(), PREDICT_BATCH)?;
    let per = shape.iter().product::<usize>();
    tiles
        .iter()
        .zip(out.chunks_exact(per))
        .map(|(t, px)| t.clone().with_pixels(px.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabelSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tiles(n: usize, hw: usize, seed: u64) -> Vec<ImageTile> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let px = (0..hw * hw * 3).map(|_| rng.random::<f32>()).collect();
                ImageTile::new(hw, hw, 3, px, format!("t{i}"), ClassLabel::NoDefect).unwrap()
            })
            .collect()
    }

    #[test]
    fn predictions_are_distributions_and_batch_invariant() {
        let net = Network::init(build_cnn([16, 16, 3], LabelSet::Hr1).unwrap(), 4).unwrap();
        let tiles = random_tiles(40, 16, 1);
        let all = predict(&net, &tiles).unwrap();
        assert_eq!(all.len(), 40);
        for p in &all {
            assert_eq!(p.probs.len(), 4);
            assert!((p.probs.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert_eq!(p.label, LabelSet::Hr1.class_at(p.index));
        }
        for i in [0, 17, 39] {
            let one = predict(&net, &tiles[i..=i]).unwrap();
            for (a, b) in one[0].probs.iter().zip(&all[i].probs) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn untrained_classifier_is_near_uniform() {
        let net = Network::init(build_cnn([16, 16, 3], LabelSet::Hr1).unwrap(), 9).unwrap();
        let preds = predict(&net, &random_tiles(64, 16, 2)).unwrap();
        for k in 0..4 {
            let mean = preds.iter().map(|p| p.probs[k]).sum::<f32>() / preds.len() as f32;
            assert!((mean - 0.25).abs() < 0.05, "class {k}: {mean}");
        }
    }

    #[test]
    fn wrong_shape_names_the_tile() {
        let net = Network::init(build_cnn([16, 16, 3], LabelSet::Hr1).unwrap(), 4).unwrap();
        let mut tiles = random_tiles(3, 16, 1);
        tiles.push(random_tiles(1, 8, 2).remove(0).with_source("odd-one"));
        let err = predict(&net, &tiles).unwrap_err().to_string();
        assert!(err.contains("tile 3") && err.contains("odd-one"), "{err}");
    }

    #[test]
    fn denoise_preserves_shape_and_range() {
        let dae = Network::init(build_dae([8, 8, 3]).unwrap(), 2).unwrap();
        let tiles = random_tiles(5, 8, 3);
        let out = denoise(&dae, &tiles).unwrap();
        assert_eq!(out.len(), 5);
        for (a, b) in out.iter().zip(&tiles) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.source_id, b.source_id);
            assert!(a.pixels().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn empty_batches_are_fine() {
        let net = Network::init(build_cnn([8, 8, 3], LabelSet::Jbk75).unwrap(), 4).unwrap();
        assert!(predict(&net, &[]).unwrap().is_empty());
    }
}
