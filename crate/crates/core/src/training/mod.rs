//! Losses, Adam, early stopping, augmentation, and the mini-batch loop.

mod augment;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{KvFile, KvWriter};
use crate::modelzoo::Network;
use crate::tensor::{self, Graph, Mode, Tensor, PROB_FLOOR};

pub use augment::{augment, apply_transform, transform_pixels, AugmentConfig, Transform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopConfig {
    pub min_delta: f32,
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            min_delta: 0.002,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub early_stop: EarlyStopConfig,
    pub seed: u64,
    /// Random rotation/zoom/shift of classifier inputs each epoch.
    pub augment: bool,
    pub augment_ranges: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 50,
            adam: AdamConfig::default(),
            early_stop: EarlyStopConfig::default(),
            seed: 0,
            augment: true,
            augment_ranges: AugmentConfig::default(),
        }
    }
}

const TRAIN_KEYS: [&str; 13] = [
    "batch_size",
    "max_epochs",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "min_delta",
    "patience",
    "seed",
    "augment",
    "rotation_max_deg",
    "zoom_max_frac",
    "shift_max_frac",
];

/// Early-stop threshold for reconstruction training, where the per-pixel
/// MSE itself is of order 1e-3.
pub const DENOISER_MIN_DELTA: f32 = 1e-5;

impl TrainConfig {
    /// Defaults for autoencoder training: no input augmentation and an
    /// improvement threshold on the scale of a pixel MSE.
    pub fn denoiser() -> Self {
        Self {
            augment: false,
            early_stop: EarlyStopConfig {
                min_delta: DENOISER_MIN_DELTA,
                ..EarlyStopConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("train config: {m}")));
        let a = &self.adam;
        let r = &self.augment_ranges;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(a.lr > 0.0 && a.eps > 0.0) {
            return bad("lr and eps must be positive");
        }
        if self.early_stop.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.early_stop.min_delta >= 0.0) {
            return bad("min_delta must be non-negative");
        }
        if !(r.rotation_max_deg >= 0.0 && r.zoom_max_frac >= 0.0 && r.zoom_max_frac < 1.0 && r.shift_max_frac >= 0.0) {
            return bad("augmentation ranges must be non-negative, zoom below 1");
        }
        Ok(())
    }

    /// Applies any keys present in `kv` on top of `self`.
    pub fn apply_kv(mut self, kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(|k| TRAIN_KEYS.contains(&k))?;
        kv.set("batch_size", &mut self.batch_size)?;
        kv.set("max_epochs", &mut self.max_epochs)?;
        kv.set("lr", &mut self.adam.lr)?;
        kv.set("beta1", &mut self.adam.beta1)?;
        kv.set("beta2", &mut self.adam.beta2)?;
        kv.set("eps", &mut self.adam.eps)?;
        kv.set("min_delta", &mut self.early_stop.min_delta)?;
        kv.set("patience", &mut self.early_stop.patience)?;
        kv.set("seed", &mut self.seed)?;
        kv.set("augment", &mut self.augment)?;
        kv.set("rotation_max_deg", &mut self.augment_ranges.rotation_max_deg)?;
        kv.set("zoom_max_frac", &mut self.augment_ranges.zoom_max_frac)?;
        kv.set("shift_max_frac", &mut self.augment_ranges.shift_max_frac)?;
        self.validate()?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::default().apply_kv(&KvFile::load(path)?)
    }

    pub fn to_kv(&self) -> String {
        KvWriter::new()
            .pair("batch_size", self.batch_size)
            .pair("max_epochs", self.max_epochs)
            .pair("lr", self.adam.lr)
            .pair("beta1", self.adam.beta1)
            .pair("beta2", self.adam.beta2)
            .pair("eps", self.adam.eps)
            .pair("min_delta", self.early_stop.min_delta)
            .pair("patience", self.early_stop.patience)
            .pair("seed", self.seed)
            .pair("augment", self.augment)
            .pair("rotation_max_deg", self.augment_ranges.rotation_max_deg)
            .pair("zoom_max_frac", self.augment_ranges.zoom_max_frac)
            .pair("shift_max_frac", self.augment_ranges.shift_max_frac)
            .finish()
    }
}

/// Mean `-ln p[true]` over a batch of probability rows (`k` columns), with
/// probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn sparse_cce(probs: &[f32], k: usize, labels: &[usize]) -> Result<f32> {
    if k == 0 || probs.len() != labels.len() * k || labels.is_empty() {
        return Err(Error::shape("sparse_cce", format!("{} probabilities for {} labels of {k} classes", probs.len(), labels.len())));
    }
    let mut total = 0.0f64;
    for (row, &y) in probs.chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(Error::contract(format!("label {y} out of range for {k} classes")));
        }
        total -= (row[y].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR) as f64).ln();
    }
    Ok((total / labels.len() as f64) as f32)
}

/// Mean binary cross-entropy with clamped logs.
pub fn bce(pred: &[f32], targets: &[f32]) -> Result<f32> {
    if pred.len() != targets.len() || pred.is_empty() {
        return Err(Error::shape("bce", format!("{} predictions for {} targets", pred.len(), targets.len())));
    }
    Ok(tensor::binary_cross_entropy(pred, targets))
}

pub fn mse(pred: &[f32], target: &[f32]) -> Result<f32> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("mse", format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    Ok(tensor::mean_squared_error(pred, target))
}

/// First and second moment estimates for every parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; `t` is incremented first.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f32>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract("adam_step: params, grads and state disagree in count"));
    }
    state.t += 1;
    let c1 = 1.0 - (cfg.beta1 as f64).powi(state.t as i32);
    let c2 = 1.0 - (cfg.beta2 as f64).powi(state.t as i32);
    let (c1, c2) = (c1 as f32, c2 as f32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::shape("adam_step", format!("array {i}: {} params, {} grads", p.numel(), g.len())));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Whether a loss drop from `best` to `current` counts as an improvement.
/// Drops of at least `min_delta` count, allowing for f32 rounding of the
/// losses themselves.
fn improved(best: f32, current: f32, min_delta: f32) -> bool {
    let tol = 4.0 * f32::EPSILON * best.abs().max(current.abs());
    best - current >= min_delta - tol
}

/// Stop once `patience` consecutive epochs have passed without an
/// improvement over the best loss so far.
pub fn early_stop_check(losses: &[f32], min_delta: f32, patience: usize) -> Result<StopDecision> {
    let (&first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::contract("early_stop_check needs at least one loss"))?;
    let mut best = first;
    let mut wait = 0;
    for &l in rest {
        if improved(best, l, min_delta) {
            best = l;
            wait = 0;
        } else {
            wait += 1;
        }
    }
    Ok(if wait >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    })
}

/// Training inputs: `n` samples of `sample_shape`, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub sample_shape: Vec<usize>,
    pub inputs: Vec<f32>,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class indices, trained with sparse categorical cross-entropy.
    Classes(Vec<usize>),
    /// Target images of the input shape, trained with mean squared error.
    Images(Vec<f32>),
}

impl Samples {
    pub fn len(&self) -> usize {
        let per: usize = self.sample_shape.iter().product();
        if per == 0 {
            0
        } else {
            self.inputs.len() / per
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let per: usize = self.sample_shape.iter().product();
        let n = self.len();
        if per == 0 || n * per != self.inputs.len() {
            return Err(Error::shape("fit", "inputs are not a whole number of samples"));
        }
        let ok = match &self.targets {
            Targets::Classes(c) => c.len() == n,
            Targets::Images(t) => t.len() == self.inputs.len(),
        };
        if !ok {
            return Err(Error::shape("fit", "targets do not match the number of samples"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub loss: f32,
    /// Training accuracy, for class targets.
    pub accuracy: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub steps: usize,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f32> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

fn mix(seed: u64, a: u64) -> u64 {
    (seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)).rotate_left(17).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// [`fit_with`] without a progress callback.
pub fn fit(net: &mut Network, data: &Samples, cfg: &TrainConfig) -> Result<TrainHistory> {
    fit_with(net, data, cfg, |_, _| {})
}

/// Mini-batch training with seeded shuffling. Each epoch runs
/// `ceil(n / batch_size)` Adam steps; training stops early per
/// [`early_stop_check`] on the epoch losses, and the parameters of the
/// lowest-loss epoch are kept.
pub fn fit_with(
    net: &mut Network,
    data: &Samples,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("cannot fit on an empty dataset"));
    }
    data.validate()?;
    if data.sample_shape != net.input_shape() {
        return Err(Error::shape(
            "fit",
            format!("samples are {:?}, model expects {:?}", data.sample_shape, net.input_shape()),
        ));
    }
    let n = data.len();
    let per: usize = data.sample_shape.iter().product();
    let augment = cfg.augment && !cfg.augment_ranges.is_identity() && matches!(data.targets, Targets::Classes(_)) && data.sample_shape.len() == 3;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut state = AdamState::new(&net.params);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        stop: StopReason::Completed,
        best_epoch: None,
        steps: 0,
    };
    let mut best: Option<(f32, Vec<Tensor>, Vec<Tensor>)> = None;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let step = history.steps as u64;
            let mut x = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                let src = &data.inputs[i * per..(i + 1) * per];
                if augment {
                    let [h, w, c] = data.sample_shape[..] else { unreachable!() };
                    let mut trng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, step << 20 | i as u64));
                    let t = Transform::sample(&cfg.augment_ranges, &mut trng);
                    x.extend(transform_pixels(h, w, c, src, &t));
                } else {
                    x.extend_from_slice(src);
                }
            }
            let mut shape = vec![chunk.len()];
            shape.extend(&data.sample_shape);
            let mut g = Graph::new();
            let vars = net.bind(&mut g, true);
            let xv = g.constant(Tensor::new(shape, x)?);
            let f = net.forward(&mut g, &vars, xv, Mode::Train, mix(cfg.seed, !step))?;
            let loss = match &data.targets {
                Targets::Classes(labels) => {
                    let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    let logits = g.value(f.logits);
                    let k = *logits.shape().last().unwrap_or(&1);
                    for (row, &y) in logits.data().chunks_exact(k).zip(&batch_labels) {
                        if argmax(row) == y {
                            correct += 1;
                        }
                    }
                    g.softmax_cross_entropy(f.logits, &batch_labels)?
                }
                Targets::Images(targets) => {
                    let t: Vec<f32> = chunk
                        .iter()
                        .flat_map(|&i| targets[i * per..(i + 1) * per].iter().copied())
                        .collect();
                    g.mse(f.output, &t)?
                }
            };
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::contract(format!("loss became {loss_value} at step {step}")));
            }
            loss_sum += loss_value as f64 * chunk.len() as f64;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .zip(&net.params)
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect();
            adam_step(&mut net.params, &grads, &mut state, &cfg.adam)?;
            net.absorb_moments(&f.moments);
            history.steps += 1;
        }
        let record = EpochRecord {
            loss: (loss_sum / n as f64) as f32,
            accuracy: matches!(data.targets, Targets::Classes(_)).then(|| correct as f32 / n as f32),
        };
        on_epoch(epoch, &record);
        if best.as_ref().is_none_or(|b| record.loss < b.0) {
            best = Some((record.loss, net.params.clone(), net.buffers.clone()));
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(record);
        if early_stop_check(&history.losses(), cfg.early_stop.min_delta, cfg.early_stop.patience)? == StopDecision::Stop {
            history.stop = StopReason::EarlyStopped;
            break;
        }
    }
    if let Some((loss, params, buffers)) = best {
        net.params = params;
        net.buffers = buffers;
        net.meta.final_loss = Some(loss);
    }
    net.meta.seed = cfg.seed;
    net.meta.epochs = history.epochs.len();
    Ok(history)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabelSet;
    use crate::modelzoo::{Layer, ModelSpec};

    #[test]
    fn denoiser_defaults_differ_only_in_augment_and_threshold() {
        let d = TrainConfig::denoiser();
        assert!(!d.augment);
        assert_eq!(d.early_stop.min_delta, DENOISER_MIN_DELTA);
        let back = TrainConfig {
            augment: true,
            early_stop: EarlyStopConfig::default(),
            ..d
        };
        assert_eq!(back, TrainConfig::default());
        d.validate().unwrap();
    }

    #[test]
    fn cce_closed_forms() {
        assert_eq!(sparse_cce(&[0.0, 1.0, 0.0, 0.0], 4, &[1]).unwrap(), -((1.0f32 - 1e-7) as f64).ln() as f32);
        assert!(sparse_cce(&[0.0, 1.0, 0.0, 0.0], 4, &[1]).unwrap() < 1e-6);
        let uniform = sparse_cce(&[0.25; 4], 4, &[2]).unwrap();
        assert!((uniform - 4f32.ln()).abs() < 1e-6);
        let pair = sparse_cce(&[0.5, 0.5, 0.9, 0.1], 2, &[0, 0]).unwrap();
        let want = (-(0.5f64.ln()) - 0.9f64.ln()) / 2.0;
        assert!((pair as f64 - want).abs() < 1e-6);
        assert!(sparse_cce(&[0.5, 0.5], 2, &[2]).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce(&[0.5; 6], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap() - 2f32.ln()).abs() < 1e-6);
        assert!(bce(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= 1e-6);
        for p in [0.1f32, 0.3, 0.77] {
            assert!((bce(&[p], &[1.0]).unwrap() - bce(&[1.0 - p], &[0.0]).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert!((mse(&[0.6, 0.2, 0.35], &[0.5, 0.1, 0.25]).unwrap() - 0.01).abs() < 1e-7);
        assert!(mse(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut p = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.5]], &mut s, &AdamConfig::default()).unwrap();
        // m̂ = 0.5, v̂ = 0.25: step = 1e-3 · 0.5 / (0.5 + 1e-7)
        let want = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-7);
        assert!((p[0].data()[0] - want).abs() < 1e-7);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut p = vec![Tensor::new(vec![3], vec![0.1, -2.0, 7.0]).unwrap()];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[vec![0.0; 3]], &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn early_stopping_rules() {
        let improving: Vec<f32> = (0..30).map(|i| 1.0 - 0.01 * i as f32).collect();
        assert_eq!(early_stop_check(&improving, 0.002, 10).unwrap(), StopDecision::Continue);
        let mut flat = vec![1.0];
        flat.extend([0.999; 9]);
        assert_eq!(early_stop_check(&flat, 0.002, 10).unwrap(), StopDecision::Continue);
        flat.push(0.9995);
        assert_eq!(early_stop_check(&flat, 0.002, 10).unwrap(), StopDecision::Stop);
        let mut boundary = vec![1.0];
        boundary.extend([1.0; 9]);
        boundary.push(0.998);
        assert_eq!(early_stop_check(&boundary, 0.002, 10).unwrap(), StopDecision::Continue);
        assert!(early_stop_check(&[], 0.002, 10).is_err());
    }

    #[test]
    fn train_config_kv_round_trip_and_validation() {
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            seed: 99,
            augment: false,
            ..TrainConfig::default()
        };
        let kv = KvFile::parse(&cfg.to_kv(), Path::new("t")).unwrap();
        assert_eq!(TrainConfig::default().apply_kv(&kv).unwrap(), cfg);
        let bad = KvFile::parse("beta1 = 1.0\n", Path::new("t")).unwrap();
        assert!(TrainConfig::default().apply_kv(&bad).is_err());
        let bad = KvFile::parse("patience = 0\n", Path::new("t")).unwrap();
        assert!(TrainConfig::default().apply_kv(&bad).is_err());
    }

    fn tiny_classifier() -> Network {
        let spec = ModelSpec {
            kind: "cnn".into(),
            input_shape: vec![2],
            layers: vec![Layer::Dense { units: 8 }, Layer::Relu, Layer::Dense { units: 2 }, Layer::Softmax],
            label_set: Some(LabelSet::Hr1),
        };
        Network::init(spec, 1).unwrap()
    }

    fn separable(n: usize) -> Samples {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let x = (i as f32 * 0.37).sin();
            let y = (i as f32 * 0.71).cos();
            inputs.extend([x, y]);
            labels.push(usize::from(x + 0.5 * y > 0.1));
        }
        // Push each point away from the boundary.
        for (p, &l) in inputs.chunks_mut(2).zip(&labels) {
            let s = if l == 1 { 0.6 } else { -0.6 };
            p[0] += s;
        }
        Samples {
            sample_shape: vec![2],
            inputs,
            targets: Targets::Classes(labels),
        }
    }

    #[test]
    fn one_epoch_takes_ceil_n_over_batch_steps() {
        let mut net = tiny_classifier();
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let h = fit(&mut net, &separable(70), &cfg).unwrap();
        assert_eq!(h.steps, 3);
        assert_eq!(h.epochs.len(), 1);
    }

    #[test]
    fn fit_separates_a_toy_set_and_is_reproducible() {
        let data = separable(64);
        let cfg = TrainConfig {
            max_epochs: 50,
            batch_size: 8,
            adam: AdamConfig {
                lr: 0.02,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut a = tiny_classifier();
        let ha = fit(&mut a, &data, &cfg).unwrap();
        assert!(ha.epochs.iter().map(|e| e.loss).fold(f32::MAX, f32::min) < 0.05, "{:?}", ha.losses());
        let mut b = tiny_classifier();
        let hb = fit(&mut b, &data, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn empty_and_zero_epoch_fits() {
        let mut net = tiny_classifier();
        let empty = Samples {
            sample_shape: vec![2],
            inputs: vec![],
            targets: Targets::Classes(vec![]),
        };
        assert!(fit(&mut net, &empty, &TrainConfig::default()).is_err());
        let before = net.params.clone();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let h = fit(&mut net, &separable(10), &cfg).unwrap();
        assert!(h.epochs.is_empty());
        assert_eq!(net.params, before);
    }
}
