//! Repeated split → balance → train → evaluate runs, and the noisy-input
//! denoising study.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{add_noise, split, ClassLabel, DatasetManifest, ImageTile, LabelSet, Split};
use crate::error::{Error, Result};
use crate::evaluation::{ssim_pairs, EvalReport, SsimReport};
use crate::kv::{KvFile, KvWriter};
use crate::modelzoo::{build_cnn_with, build_dae, denoise, predict, train_gan, CnnConfig, GanConfig, GanGenerator, Network};
use crate::synthdata::{balance, ClassGenerator, Resources, Strategy};
use crate::training::{fit, fit_with, AugmentConfig, EpochRecord, Samples, Targets, TrainConfig, TrainHistory};

/// Default noise level for the denoising study.
pub const DEFAULT_NOISE_SIGMA: f32 = 0.3;

/// Training data treatment compared in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Original,
    Cds,
    Rds,
    Sam,
    Gan,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Original, Method::Cds, Method::Rds, Method::Sam, Method::Gan];

    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Method::Original => None,
            Method::Cds => Some(Strategy::Cds),
            Method::Rds => Some(Strategy::Rds),
            Method::Sam => Some(Strategy::Sam),
            Method::Gan => Some(Strategy::Gan),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Cds => "cds",
            Method::Rds => "rds",
            Method::Sam => "sam",
            Method::Gan => "gan",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(Method::Original),
            other => other
                .parse::<Strategy>()
                .map(|s| match s {
                    Strategy::Cds => Method::Cds,
                    Strategy::Rds => Method::Rds,
                    Strategy::Sam => Method::Sam,
                    Strategy::Gan => Method::Gan,
                })
                .map_err(|_| format!("unknown strategy {s:?} (expected original, cds, rds, sam or gan)")),
        }
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, T::Err> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
}

/// Everything one experiment needs besides the data on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub dataset: PathBuf,
    pub methods: Vec<Method>,
    pub repetitions: usize,
    /// Run `i` uses seed `master_seed + i` for its split, balancing and
    /// training.
    pub master_seed: u64,
    /// Train-split count every defect class is raised to when balancing.
    pub target: usize,
    pub stratified: bool,
    pub train: TrainConfig,
    pub cnn: CnnConfig,
    pub gan: GanConfig,
}

impl Protocol {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            methods: Method::ALL.to_vec(),
            repetitions: 20,
            master_seed: 0,
            target: 500,
            stratified: true,
            train: TrainConfig::default(),
            cnn: CnnConfig::default(),
            gan: GanConfig::default(),
        }
    }

    /// Reads a protocol file. Keys: `dataset` (relative to the file),
    /// `methods`, `repetitions`, `seed`, `target`, `stratified`, training
    /// keys under `train.`, classifier keys under `cnn.` and generator keys
    /// under `gan.`.
    pub fn load(path: &Path) -> Result<Self> {
        let kv = KvFile::load(path)?;
        Self::from_kv(&kv, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_kv(kv: &KvFile, base: &Path) -> Result<Self> {
        const TOP: [&str; 6] = ["dataset", "methods", "repetitions", "seed", "target", "stratified"];
        kv.reject_unknown(|k| TOP.contains(&k) || ["train.", "cnn.", "gan."].iter().any(|p| k.starts_with(p)))?;
        let dataset: String = kv
            .get("dataset")?
            .ok_or_else(|| Error::contract("protocol needs a `dataset` manifest path"))?;
        let mut p = Protocol::new(base.join(dataset));
        if let Some(raw) = kv.raw("methods") {
            p.methods = parse_list(raw).map_err(|e| Error::Parse {
                path: "methods".into(),
                line: 0,
                message: e,
            })?;
            if p.methods.is_empty() {
                return Err(Error::contract("protocol lists no methods"));
            }
        }
        kv.set("repetitions", &mut p.repetitions)?;
        kv.set("seed", &mut p.master_seed)?;
        kv.set("target", &mut p.target)?;
        kv.set("stratified", &mut p.stratified)?;
        p.train = TrainConfig::default().apply_kv(&kv.section("train"))?;
        p.cnn = CnnConfig::default().apply_kv(&kv.section("cnn"))?;
        p.gan = GanConfig::default().apply_kv(&kv.section("gan"))?;
        if p.repetitions == 0 {
            return Err(Error::contract("repetitions must be at least 1"));
        }
        Ok(p)
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        w.pair("dataset", self.dataset.display())
            .pair("methods", self.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","))
            .pair("repetitions", self.repetitions)
            .pair("seed", self.master_seed)
            .pair("target", self.target)
            .pair("stratified", self.stratified);
        let mut out = w.finish();
        for (prefix, body) in [("train", self.train.to_kv()), ("cnn", self.cnn.to_kv()), ("gan", self.gan.to_kv())] {
            for line in body.lines() {
                out.push_str(&format!("{prefix}.{line}\n"));
            }
        }
        out
    }
}

/// Loads every tile of `manifest` with its label index.
pub fn load_tiles(manifest: &DatasetManifest) -> Result<(Vec<ImageTile>, Vec<usize>)> {
    let mut tiles = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    for e in manifest.entries() {
        let idx = manifest
            .label_set
            .index_of(e.class)
            .ok_or_else(|| Error::contract(format!("{} is not in label set {}", e.class, manifest.label_set)))?;
        tiles.push(e.load()?);
        labels.push(idx);
    }
    Ok((tiles, labels))
}

fn common_shape(tiles: &[ImageTile]) -> Result<[usize; 3]> {
    let first = tiles.first().ok_or_else(|| Error::contract("no tiles"))?.shape();
    if let Some(t) = tiles.iter().find(|t| t.shape() != first) {
        return Err(Error::shape(
            "dataset",
            format!("{} is {:?}, others are {first:?}", t.source_id, t.shape()),
        ));
    }
    Ok(first)
}

pub fn class_samples(tiles: &[ImageTile], labels: &[usize]) -> Result<Samples> {
    let shape = common_shape(tiles)?;
    Ok(Samples {
        sample_shape: shape.to_vec(),
        inputs: tiles.iter().flat_map(|t| t.pixels().iter().copied()).collect(),
        targets: Targets::Classes(labels.to_vec()),
    })
}

/// Builds and trains a classifier on `manifest`'s tiles.
pub fn train_classifier(
    manifest: &DatasetManifest,
    cnn: &CnnConfig,
    train: &TrainConfig,
    on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<(Network, TrainHistory)> {
    let (tiles, labels) = load_tiles(manifest)?;
    let data = class_samples(&tiles, &labels)?;
    let [h, w, c] = common_shape(&tiles)?;
    let mut net = Network::init(build_cnn_with([h, w, c], manifest.label_set, cnn)?, train.seed)?;
    let history = fit_with(&mut net, &data, train, on_epoch)?;
    Ok((net, history))
}

/// Trains one generator per class in `classes` on that class's tiles of
/// `train`. The batch shrinks to the class size when the class is small.
pub fn train_generators(
    train: &DatasetManifest,
    classes: &[ClassLabel],
    cfg: &GanConfig,
) -> Result<BTreeMap<ClassLabel, GanGenerator>> {
    let mut out = BTreeMap::new();
    for (k, &class) in classes.iter().enumerate() {
        let tiles = train
            .entries()
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.load())
            .collect::<Result<Vec<_>>>()?;
        if tiles.is_empty() {
            return Err(Error::MissingResource {
                resource: "images to train a generator on",
                class: class.to_string(),
            });
        }
        let cfg = GanConfig {
            batch_size: cfg.batch_size.min(tiles.len()),
            seed: cfg.seed.wrapping_add(k as u64 * 1000),
            ..cfg.clone()
        };
        out.insert(class, train_gan(&tiles, &cfg)?.into());
    }
    Ok(out)
}

/// Defect classes present in `train`, with the count each should reach.
pub fn balance_targets(train: &DatasetManifest, target: usize) -> Vec<(ClassLabel, usize)> {
    train
        .label_set
        .classes()
        .iter()
        .filter(|c| c.is_defect())
        .map(|&c| (c, train.count(c)))
        .filter(|&(_, n)| n > 0)
        .map(|(c, n)| (c, n.max(target)))
        .collect()
}

/// The training manifest for `method`: the original split, or the split
/// raised to `target` per defect class. Synthetic tiles go under `work`.
pub fn augmented_train_set(
    train: &DatasetManifest,
    method: Method,
    target: usize,
    seed: u64,
    gan: &GanConfig,
    work: &Path,
) -> Result<DatasetManifest> {
    let Some(strategy) = method.strategy() else {
        return Ok(train.clone());
    };
    let targets = balance_targets(train, target);
    let generators;
    let resources = match strategy {
        Strategy::Cds | Strategy::Rds => Resources::from_manifest(train)?,
        Strategy::Sam => Resources::default(),
        Strategy::Gan => {
            let classes: Vec<ClassLabel> = targets.iter().filter(|(c, t)| train.count(*c) < *t).map(|(c, _)| *c).collect();
            generators = train_generators(
                train,
                &classes,
                &GanConfig {
                    seed,
                    ..gan.clone()
                },
            )?;
            Resources {
                generators: generators.iter().map(|(c, g)| (*c, g as &dyn ClassGenerator)).collect(),
                ..Resources::default()
            }
        }
    };
    balance(train, strategy, &targets, seed, &resources, work)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub method: Method,
    pub train_size: usize,
    pub epochs: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub minority_recall_mean: Option<f64>,
    pub minority_recall_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub label_set: LabelSet,
    pub master_seed: u64,
    pub repetitions: usize,
    pub summary: Vec<MethodSummary>,
    pub runs: Vec<RunRecord>,
}

/// Mean and sample standard deviation (`n - 1`; 0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

impl ExperimentReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

impl fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} | {:<14} | {:>18} | {:>22}",
            "Data", "Training Images", "Testing Accuracy (%)", "Minority Recall (%)"
        )?;
        for (i, s) in self.summary.iter().enumerate() {
            let data = if i == 0 { self.label_set.id() } else { "" };
            let recall = match (s.minority_recall_mean, s.minority_recall_std) {
                (Some(m), Some(sd)) => format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd),
                _ => "-".into(),
            };
            writeln!(
                f,
                "{:<10} | {:<14} | {:>20} | {:>22}",
                data,
                s.method.name().to_uppercase(),
                format!("{:.1} ± {:.1}", 100.0 * s.accuracy_mean, 100.0 * s.accuracy_std),
                recall
            )?;
        }
        writeln!(f, "\nruns: {} per method, seeds {}..{}", self.repetitions, self.master_seed, self.master_seed + self.repetitions as u64 - 1)?;
        for r in &self.runs {
            writeln!(
                f,
                "  run {:>2}  seed {:>6}  {:<8}  train {:>5}  epochs {:>3}  accuracy {}  minority recall {}",
                r.run,
                r.seed,
                r.method.name(),
                r.train_size,
                r.epochs,
                r.report.accuracy_percent(),
                r.report.minority_recall.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
            )?;
        }
        Ok(())
    }
}

/// Fails before any training if a requested method cannot run on this
/// dataset.
pub fn check_resources(manifest: &DatasetManifest, methods: &[Method]) -> Result<()> {
    if manifest.is_empty() {
        return Err(Error::contract("dataset manifest is empty"));
    }
    for e in manifest.entries() {
        if !e.path.is_file() {
            return Err(Error::io(&e.path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    let minority: Vec<ClassLabel> = manifest
        .label_set
        .classes()
        .iter()
        .copied()
        .filter(|c| c.is_defect() && manifest.count(*c) > 0)
        .collect();
    if methods.iter().any(|m| matches!(m, Method::Cds | Method::Rds)) {
        if manifest.count(ClassLabel::NoDefect) == 0 {
            return Err(Error::MissingResource {
                resource: "defect-free base images",
                class: ClassLabel::NoDefect.to_string(),
            });
        }
        let res = Resources::from_manifest(manifest)?;
        if let Some(c) = minority.iter().find(|c| res.masks.get(c).is_none_or(|m| m.is_empty())) {
            return Err(Error::MissingResource {
                resource: "defect masks",
                class: c.to_string(),
            });
        }
    }
    Ok(())
}

/// Runs every method `repetitions` times. Within run `i` all methods share
/// the seed `master_seed + i`, hence the same split.
pub fn run_experiment(protocol: &Protocol, work: &Path, mut on_run: impl FnMut(&RunRecord)) -> Result<ExperimentReport> {
    let full = DatasetManifest::load(&protocol.dataset)?;
    check_resources(&full, &protocol.methods)?;
    let mut runs = Vec::new();
    for run in 0..protocol.repetitions {
        let seed = protocol.master_seed.wrapping_add(run as u64);
        let parts = split(&full, seed, protocol.stratified)?;
        let train = parts.subset(Split::Train);
        let test = parts.subset(Split::Test);
        let (test_tiles, test_labels) = load_tiles(&test)?;
        for &method in &protocol.methods {
            let dir = work.join(format!("run_{run:02}")).join(method.name());
            let set = augmented_train_set(&train, method, protocol.target, seed, &protocol.gan, &dir)?;
            let cfg = TrainConfig {
                seed,
                ..protocol.train.clone()
            };
            let (net, history) = train_classifier(&set, &protocol.cnn, &cfg, |_, _| {})?;
            let preds: Vec<usize> = predict(&net, &test_tiles)?.into_iter().map(|p| p.index).collect();
            let record = RunRecord {
                run,
                seed,
                method,
                train_size: set.len(),
                epochs: history.epochs.len(),
                report: EvalReport::new(&preds, &test_labels, full.label_set)?,
            };
            on_run(&record);
            runs.push(record);
        }
    }
    let summary = protocol
        .methods
        .iter()
        .map(|&method| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.method == method).collect();
            let acc: Vec<f64> = mine.iter().map(|r| r.report.accuracy).collect();
            let rec: Vec<f64> = mine.iter().filter_map(|r| r.report.minority_recall).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc).unwrap_or((0.0, 0.0));
            let recall = mean_std(&rec);
            MethodSummary {
                method,
                runs: mine.len(),
                accuracy_mean,
                accuracy_std,
                minority_recall_mean: recall.map(|r| r.0),
                minority_recall_std: recall.map(|r| r.1),
            }
        })
        .collect();
    Ok(ExperimentReport {
        dataset: protocol.dataset.display().to_string(),
        label_set: full.label_set,
        master_seed: protocol.master_seed,
        repetitions: protocol.repetitions,
        summary,
        runs,
    })
}

/// Pairs for autoencoder training: noisy inputs, clean targets.
pub fn denoising_samples(clean: &[ImageTile], sigma: f32, seed: u64) -> Result<Samples> {
    let shape = common_shape(clean)?;
    let mut inputs = Vec::with_capacity(clean.len() * shape.iter().product::<usize>());
    let mut targets = Vec::with_capacity(inputs.capacity());
    for (i, t) in clean.iter().enumerate() {
        inputs.extend_from_slice(add_noise(t, sigma, seed.wrapping_add(i as u64))?.pixels());
        targets.extend_from_slice(t.pixels());
    }
    Ok(Samples {
        sample_shape: shape.to_vec(),
        inputs,
        targets: Targets::Images(targets),
    })
}

/// Trains a DAE mapping `sigma`-noisy versions of `clean` back to `clean`.
pub fn train_denoiser(clean: &[ImageTile], sigma: f32, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    let data = denoising_samples(clean, sigma, cfg.seed)?;
    let [h, w, c] = common_shape(clean)?;
    let mut net = Network::init(build_dae([h, w, c])?, cfg.seed)?;
    let cfg = TrainConfig {
        augment: false,
        augment_ranges: AugmentConfig::NONE,
        ..cfg.clone()
    };
    let history = fit(&mut net, &data, &cfg)?;
    Ok((net, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub sigma: f32,
    pub ssim_noisy: SsimReport,
    pub ssim_reconstructed: SsimReport,
    pub accuracy_clean: f64,
    pub accuracy_noisy: f64,
    pub accuracy_reconstructed: f64,
}

impl DenoiseReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

impl fmt::Display for DenoiseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "noise sigma {}", self.sigma)?;
        writeln!(f, "{:<28} | {:>6}", "Testing SSIM", "mean")?;
        writeln!(f, "{:<28} | {:>6.3}", "original vs. noisy", self.ssim_noisy.mean)?;
        writeln!(f, "{:<28} | {:>6.3}", "original vs. reconstructed", self.ssim_reconstructed.mean)?;
        writeln!(f, "{:<28} | {:>6}", "Testing Accuracy (%)", "")?;
        writeln!(f, "{:<28} | {:>6.1}", "clean", 100.0 * self.accuracy_clean)?;
        writeln!(f, "{:<28} | {:>6.1}", "noisy", 100.0 * self.accuracy_noisy)?;
        writeln!(f, "{:<28} | {:>6.1}", "reconstructed", 100.0 * self.accuracy_reconstructed)
    }
}

/// Adds noise to `test`, reconstructs it with `dae`, and scores both
/// versions against the clean tiles with SSIM and with `cnn`.
pub fn evaluate_denoising(
    cnn: &Network,
    dae: &Network,
    test: &[ImageTile],
    labels: &[usize],
    sigma: f32,
    seed: u64,
) -> Result<DenoiseReport> {
    let noisy = test
        .iter()
        .enumerate()
        .map(|(i, t)| add_noise(t, sigma, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let recon = denoise(dae, &noisy)?;
    let acc = |tiles: &[ImageTile]| -> Result<f64> {
        let preds: Vec<usize> = predict(cnn, tiles)?.into_iter().map(|p| p.index).collect();
        crate::evaluation::accuracy(&preds, labels)
    };
    let none = || Error::contract("denoising study needs at least one test tile");
    Ok(DenoiseReport {
        sigma,
        ssim_noisy: ssim_pairs(test, &noisy)?.ok_or_else(none)?,
        ssim_reconstructed: ssim_pairs(test, &recon)?.ok_or_else(none)?,
        accuracy_clean: acc(test)?,
        accuracy_noisy: acc(&noisy)?,
        accuracy_reconstructed: acc(&recon)?,
    })
}
