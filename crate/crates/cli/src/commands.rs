//! One function per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fgs_core::dataset::{
    class_stats, load_png, save_png, split, surrogate_generate, tile_layer, ClassLabel, CropBox, DatasetManifest,
    ImageTile, LabelSet, ManifestEntry, Split, SurrogateConfig,
};
use fgs_core::evaluation::{ssim_pairs, EvalReport};
use fgs_core::kv::{KvFile, KvWriter};
use fgs_core::modelzoo::{
    denoise, gan_sample, load_checkpoint, predict, save_checkpoint, train_gan, CnnConfig, GanConfig, GanGenerator,
    Network,
};
use fgs_core::pipeline::{
    balance_targets, evaluate_denoising, load_tiles, run_experiment, train_classifier, train_denoiser, Protocol,
};
use fgs_core::synthdata::{balance, working_split, ClassGenerator, Resources, Strategy};
use fgs_core::training::{EpochRecord, TrainConfig};

use crate::{parse_box, usage, CliError, CliResult, Command, Context, Subset, TrainFlags};

pub fn execute(cmd: &Command, ctx: &Context) -> CliResult<()> {
    let verb = cmd.verb();
    let seed = ctx.seed.unwrap_or(0);
    let no_config = || match &ctx.config {
        Some(_) => Err(usage(format!("{verb} takes no --config"))),
        None => Ok(()),
    };
    match cmd {
        Command::Surrogate {
            tile_size,
            counts,
            label_set,
        } => {
            let cfg = surrogate_config(ctx, *tile_size, counts, *label_set)?;
            ctx.record(verb, cfg.seed)?;
            let out = surrogate_generate(&cfg, &ctx.out)?;
            ctx.write("surrogate.kv", cfg.to_kv())?;
            println!("{}", class_stats(&out.manifest));
            Ok(())
        }
        Command::Tile {
            layer,
            boxes,
            boxes_file,
            class,
            label_set,
        } => {
            no_config()?;
            ctx.record(verb, seed)?;
            tile(ctx, layer, boxes, boxes_file.as_deref(), *class, *label_set)
        }
        Command::Stats { manifest, split } => {
            no_config()?;
            ctx.record(verb, seed)?;
            let m = subset(&DatasetManifest::load(manifest)?, split.split());
            let stats = class_stats(&m);
            ctx.write("stats.txt", format!("{stats}\n"))?;
            ctx.write("stats.json", to_json(&stats)?)?;
            println!("{stats}");
            Ok(())
        }
        Command::Split { manifest, stratified } => {
            no_config()?;
            ctx.record(verb, seed)?;
            let tagged = split(&DatasetManifest::load(manifest)?, seed, *stratified)?;
            tagged.save(&ctx.path("manifest.tsv"))?;
            for part in [Split::Train, Split::Test] {
                println!("{part}: {} tiles", tagged.subset(part).len());
            }
            Ok(())
        }
        Command::Balance {
            manifest,
            strategy,
            classes,
            target,
            generators,
        } => {
            no_config()?;
            ctx.record(verb, seed)?;
            balance_cmd(ctx, manifest, *strategy, classes, *target, generators, seed)
        }
        Command::TrainCnn {
            manifest,
            split,
            train,
            filters,
            hidden,
            dropout,
        } => {
            let kv = config_kv(ctx, &["train.", "cnn."])?;
            let mut cnn = CnnConfig::default().apply_kv(&kv.section("cnn")).map_err(usage)?;
            if let Some(f) = filters {
                cnn.filters = *f;
            }
            if let Some(h) = hidden {
                cnn.hidden = *h;
            }
            if let Some(d) = dropout {
                cnn.dropout = *d;
            }
            let cfg = train_config(TrainConfig::default(), &kv, train, seed)?;
            ctx.record(verb, seed)?;
            let m = DatasetManifest::load(manifest)?;
            let set = subset(&m, split.map_or_else(|| default_train_split(&m), Subset::split));
            let (net, history) = train_classifier(&set, &cnn, &cfg, log_epoch)?;
            save_checkpoint(&net, &ctx.path("cnn.fgs"))?;
            ctx.write("history.json", to_json(&history)?)?;
            ctx.write("train.kv", prefixed(&[("train", cfg.to_kv()), ("cnn", cnn.to_kv())]))?;
            Ok(())
        }
        Command::TrainDae {
            manifest,
            split,
            sigma,
            train,
        } => {
            let kv = config_kv(ctx, &["train."])?;
            let cfg = train_config(TrainConfig::denoiser(), &kv, train, seed)?;
            if !(*sigma >= 0.0) {
                return Err(usage("--sigma must be non-negative"));
            }
            ctx.record(verb, seed)?;
            let m = DatasetManifest::load(manifest)?;
            let set = subset(&m, split.map_or_else(|| default_train_split(&m), Subset::split));
            let (tiles, _) = load_tiles(&set)?;
            let (net, history) = train_denoiser(&tiles, *sigma, &cfg)?;
            save_checkpoint(&net, &ctx.path("dae.fgs"))?;
            ctx.write("history.json", to_json(&history)?)?;
            ctx.write("train.kv", prefixed(&[("train", cfg.to_kv())]))?;
            Ok(())
        }
        Command::TrainGan {
            manifest,
            class,
            split,
            iterations,
            batch_size,
            lr,
            samples,
        } => {
            let kv = config_kv(ctx, &["gan."])?;
            let mut cfg = GanConfig::default().apply_kv(&kv.section("gan")).map_err(usage)?;
            if let Some(n) = iterations {
                cfg.iterations = *n;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = *b;
            }
            if let Some(lr) = lr {
                cfg.adam.lr = *lr;
            }
            cfg.seed = seed;
            ctx.record(verb, seed)?;
            let m = DatasetManifest::load(manifest)?;
            let set = subset(&m, split.map_or_else(|| default_train_split(&m), Subset::split));
            let tiles = set
                .entries()
                .iter()
                .filter(|e| e.class == *class)
                .map(ManifestEntry::load)
                .collect::<fgs_core::Result<Vec<_>>>()?;
            let model = train_gan(&tiles, &cfg)?;
            save_checkpoint(&model.generator, &ctx.path("generator.fgs"))?;
            save_checkpoint(&model.discriminator, &ctx.path("discriminator.fgs"))?;
            ctx.write("history.json", to_json(&model.history)?)?;
            ctx.write("gan.kv", prefixed(&[("gan", cfg.to_kv())]))?;
            for (i, t) in gan_sample(&model.generator, *class, *samples, seed)?.iter().enumerate() {
                save_png(t, &ctx.path(format!("samples/{class}_{i:03}.png")))?;
            }
            Ok(())
        }
        Command::Denoise {
            dae,
            manifest,
            split,
            noise,
            cnn,
        } => {
            no_config()?;
            if cnn.is_some() && noise.is_none() {
                return Err(usage("--cnn needs --noise"));
            }
            ctx.record(verb, seed)?;
            denoise_cmd(ctx, dae, manifest, *split, *noise, cnn.as_deref(), seed)
        }
        Command::Eval {
            model,
            manifest,
            split,
            predictions,
        } => {
            no_config()?;
            ctx.record(verb, seed)?;
            let report = match (model, predictions) {
                (Some(model), None) => {
                    let manifest = manifest.as_ref().ok_or_else(|| usage("eval --model needs --manifest"))?;
                    let cnn = load_checkpoint(model)?;
                    let m = DatasetManifest::load(manifest)?;
                    let set = subset(&m, split.map_or_else(|| default_eval_split(&m), Subset::split));
                    let rows = predict_rows(&cnn, &set, None)?;
                    ctx.write("predictions.tsv", rows_to_tsv(set.label_set, &rows))?;
                    let (p, t): (Vec<usize>, Vec<usize>) =
                        rows.iter().map(|r| (r.predicted, r.truth.expect("manifest rows carry truth"))).unzip();
                    EvalReport::new(&p, &t, set.label_set)?
                }
                (None, Some(path)) => {
                    let (label_set, p, t) = read_predictions(path)?;
                    EvalReport::new(&p, &t, label_set)?
                }
                _ => return Err(usage("eval needs exactly one of --model or --predictions")),
            };
            ctx.write("report.json", report.to_json())?;
            ctx.write("report.txt", report.to_string())?;
            println!("{report}");
            Ok(())
        }
        Command::Predict {
            model,
            dae,
            manifest,
            images,
        } => {
            no_config()?;
            ctx.record(verb, seed)?;
            let cnn = load_checkpoint(model)?;
            let label_set = cnn
                .spec()
                .label_set
                .ok_or_else(|| CliError::Runtime("checkpoint is not a classifier".into()))?;
            let dae = dae.as_deref().map(load_checkpoint).transpose()?;
            let mut set = match manifest {
                Some(p) => DatasetManifest::load(p)?,
                None => DatasetManifest::new(label_set),
            };
            for img in images {
                set.push(ManifestEntry::new(img, ClassLabel::NoDefect, Split::Unsplit))?;
            }
            let mut rows = predict_rows(&cnn, &set, dae.as_ref())?;
            let from_manifest = set.len() - images.len();
            for r in rows.iter_mut().skip(from_manifest) {
                r.truth = None;
            }
            let tsv = rows_to_tsv(label_set, &rows);
            ctx.write("predictions.tsv", &tsv)?;
            print!("{tsv}");
            Ok(())
        }
        Command::Serve {
            model,
            dae,
            bind,
            max_batch,
        } => {
            no_config()?;
            if *max_batch == 0 {
                return Err(usage("--max-batch must be at least 1"));
            }
            ctx.record(verb, seed)?;
            let models = fgs_service::ModelBundle::load(model, dae.as_deref())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).try_init();
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            rt.block_on(fgs_service::serve(fgs_service::AppState::new(models, *max_batch), *bind))
                .map_err(|e| CliError::Runtime(format!("{bind}: {e}")))
        }
        Command::Experiment {
            protocol,
            dataset,
            repetitions,
        } => {
            no_config()?;
            let mut p = Protocol::load(protocol).map_err(usage)?;
            if let Some(d) = dataset {
                p.dataset = d.clone();
            }
            if let Some(s) = ctx.seed {
                p.master_seed = s;
            }
            if let Some(r) = repetitions {
                if *r == 0 {
                    return Err(usage("--repetitions must be at least 1"));
                }
                p.repetitions = *r;
            }
            ctx.record(verb, p.master_seed)?;
            ctx.write("protocol.kv", p.to_kv())?;
            let report = run_experiment(&p, &ctx.path("work"), |r| {
                eprintln!(
                    "run {} {:<8} accuracy {:.4} minority recall {}",
                    r.run,
                    r.method,
                    r.report.accuracy,
                    r.report.minority_recall.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
                )
            })?;
            ctx.write("experiment.json", report.to_json())?;
            ctx.write("experiment.txt", report.to_string())?;
            println!("{report}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Runtime(e.to_string()))
}

/// `prefix.key = value` lines for each section.
fn prefixed(sections: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (prefix, body) in sections {
        for line in body.lines() {
            out.push_str(&format!("{prefix}.{line}\n"));
        }
    }
    out
}

fn log_epoch(i: usize, r: &EpochRecord) {
    match r.accuracy {
        Some(a) => eprintln!("epoch {:>3}  loss {:.5}  accuracy {a:.4}", i + 1, r.loss),
        None => eprintln!("epoch {:>3}  loss {:.5}", i + 1, r.loss),
    }
}

/// The `--config` file, restricted to keys under `prefixes`; empty when
/// none was given.
fn config_kv(ctx: &Context, prefixes: &[&str]) -> CliResult<KvFile> {
    let Some(path) = &ctx.config else {
        return Ok(KvFile::default());
    };
    let kv = KvFile::load(path).map_err(usage)?;
    kv.reject_unknown(|k| prefixes.iter().any(|p| k.starts_with(p)))
        .map_err(usage)?;
    Ok(kv)
}

fn train_config(base: TrainConfig, kv: &KvFile, flags: &TrainFlags, seed: u64) -> CliResult<TrainConfig> {
    let mut cfg = base.apply_kv(&kv.section("train")).map_err(usage)?;
    if let Some(v) = flags.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = flags.patience {
        cfg.early_stop.patience = v;
    }
    if let Some(v) = flags.min_delta {
        cfg.early_stop.min_delta = v;
    }
    if let Some(v) = flags.augment {
        cfg.augment = v;
    }
    cfg.seed = seed;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn surrogate_config(
    ctx: &Context,
    tile_size: Option<usize>,
    counts: &[(ClassLabel, usize)],
    label_set: Option<LabelSet>,
) -> CliResult<SurrogateConfig> {
    let mut cfg = match &ctx.config {
        Some(p) => SurrogateConfig::from_kv(&KvFile::load(p).map_err(usage)?).map_err(usage)?,
        None => SurrogateConfig::default(),
    };
    if let Some(t) = tile_size {
        cfg.tile_size = t;
    }
    if !counts.is_empty() {
        cfg.counts = counts.iter().copied().collect();
        cfg.label_set = label_set.unwrap_or_else(|| smallest_label_set(counts.iter().map(|c| c.0)));
    } else if let Some(ls) = label_set {
        cfg.label_set = ls;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn smallest_label_set(classes: impl Iterator<Item = ClassLabel> + Clone) -> LabelSet {
    [LabelSet::Hr1, LabelSet::Jbk75]
        .into_iter()
        .find(|s| classes.clone().all(|c| s.contains(c)))
        .unwrap_or(LabelSet::Combined)
}

fn tile(
    ctx: &Context,
    layer: &Path,
    boxes: &[[usize; 4]],
    boxes_file: Option<&Path>,
    class: ClassLabel,
    label_set: Option<LabelSet>,
) -> CliResult<()> {
    let mut all = boxes.to_vec();
    if let Some(path) = boxes_file {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                all.push(parse_box(line).map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1)))?);
            }
        }
    }
    if all.is_empty() {
        return Err(usage("tile needs at least one --box or a --boxes-file"));
    }
    let label_set = label_set.unwrap_or_else(|| smallest_label_set(std::iter::once(class)));
    if !label_set.contains(class) {
        return Err(usage(format!("class {class} is not part of label set {label_set}")));
    }
    let boxes: Vec<CropBox> = all
        .iter()
        .map(|&[x, y, width, height]| CropBox { x, y, width, height })
        .collect();
    let image = load_png(layer)?;
    let stem = layer.file_stem().map_or_else(|| "layer".into(), |s| s.to_string_lossy().into_owned());
    let mut manifest = DatasetManifest::new(label_set);
    for (i, t) in tile_layer(&image, &boxes)?.into_iter().enumerate() {
        let path = ctx.path(format!("{class}/{stem}_{i:03}.png"));
        save_png(&t, &path)?;
        manifest.push(ManifestEntry::new(path, class, Split::Unsplit))?;
    }
    manifest.save(&ctx.path("manifest.tsv"))?;
    println!("{} tiles", manifest.len());
    Ok(())
}

fn subset(m: &DatasetManifest, split: Option<Split>) -> DatasetManifest {
    match split {
        Some(s) => m.subset(s),
        None => m.clone(),
    }
}

fn has(m: &DatasetManifest, split: Split) -> bool {
    m.entries().iter().any(|e| e.split == split)
}

fn default_train_split(m: &DatasetManifest) -> Option<Split> {
    has(m, Split::Train).then_some(Split::Train)
}

fn default_eval_split(m: &DatasetManifest) -> Option<Split> {
    has(m, Split::Test).then_some(Split::Test)
}

fn balance_cmd(
    ctx: &Context,
    manifest: &Path,
    strategy: Strategy,
    classes: &[ClassLabel],
    target: usize,
    generators: &[(ClassLabel, PathBuf)],
    seed: u64,
) -> CliResult<()> {
    let m = DatasetManifest::load(manifest)?;
    let work = m.subset(working_split(&m));
    let targets: Vec<(ClassLabel, usize)> = if classes.is_empty() {
        balance_targets(&work, target)
    } else {
        classes.iter().map(|&c| (c, target)).collect()
    };
    if let Some((c, _)) = targets.iter().find(|(c, _)| !m.label_set.contains(*c)) {
        return Err(usage(format!("class {c} is not part of label set {}", m.label_set)));
    }
    let mut loaded: BTreeMap<ClassLabel, GanGenerator> = BTreeMap::new();
    for (class, path) in generators {
        let network: Network = load_checkpoint(path)?;
        if network.spec().kind != "generator" {
            return Err(CliError::Runtime(format!("{} is not a generator checkpoint", path.display())));
        }
        loaded.insert(*class, GanGenerator { network, class: *class });
    }
    let resources = match strategy {
        Strategy::Cds | Strategy::Rds => Resources::from_manifest(&m)?,
        Strategy::Sam => Resources::default(),
        Strategy::Gan => Resources {
            generators: loaded.iter().map(|(c, g)| (*c, g as &dyn ClassGenerator)).collect(),
            ..Resources::default()
        },
    };
    let balanced = balance(&m, strategy, &targets, seed, &resources, &ctx.out)?;
    balanced.save(&ctx.path("manifest.tsv"))?;
    println!("{}", class_stats(&balanced.subset(working_split(&balanced))));
    Ok(())
}

/// One classified tile.
struct Row {
    path: PathBuf,
    truth: Option<usize>,
    predicted: usize,
    probs: Vec<f32>,
}

/// Loads, fits to the model's input size, optionally denoises, and
/// classifies every entry of `set`.
fn predict_rows(cnn: &Network, set: &DatasetManifest, dae: Option<&Network>) -> CliResult<Vec<Row>> {
    let label_set = cnn
        .spec()
        .label_set
        .ok_or_else(|| CliError::Runtime("checkpoint is not a classifier".into()))?;
    if set.label_set != label_set {
        return Err(CliError::Runtime(format!(
            "model predicts label set {label_set} but the data uses {}",
            set.label_set
        )));
    }
    let [h, w, _]: [usize; 3] = cnn
        .input_shape()
        .try_into()
        .map_err(|_| CliError::Runtime("classifier input is not an image".into()))?;
    let tiles: Vec<ImageTile> = set
        .entries()
        .iter()
        .map(|e| {
            let t = e.load()?;
            Ok(if t.height() != h || t.width() != w { t.resized(h, w) } else { t })
        })
        .collect::<fgs_core::Result<_>>()?;
    let tiles = match dae {
        Some(d) => denoise(d, &tiles)?,
        None => tiles,
    };
    Ok(set
        .entries()
        .iter()
        .zip(predict(cnn, &tiles)?)
        .map(|(e, p)| Row {
            path: e.path.clone(),
            truth: label_set.index_of(e.class),
            predicted: p.index,
            probs: p.probs,
        })
        .collect())
}

fn rows_to_tsv(label_set: LabelSet, rows: &[Row]) -> String {
    let name = |i: usize| label_set.class_at(i).map_or("?", |c| c.name());
    let mut out = format!("# label_set={label_set}\n# path\ttruth\tpredicted\tprobabilities\n");
    for r in rows {
        let probs: Vec<String> = r.probs.iter().map(|p| format!("{p:.6}")).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.path.display(),
            r.truth.map_or("-", name),
            name(r.predicted),
            probs.join(",")
        ));
    }
    out
}

/// Reads a `predict`-style table; every row needs a known truth.
fn read_predictions(path: &Path) -> CliResult<(LabelSet, Vec<usize>, Vec<usize>)> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let bad = |line: usize, m: String| usage(format!("{}:{line}: {m}", path.display()));
    let mut label_set = None;
    let (mut preds, mut truth) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        if let Some(h) = line.strip_prefix('#') {
            if let Some(v) = h.trim().strip_prefix("label_set=") {
                label_set = Some(v.trim().parse::<LabelSet>().map_err(|e| bad(i + 1, e))?);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let ls = label_set.ok_or_else(|| bad(i + 1, "missing `# label_set=` header".into()))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(bad(i + 1, "expected path, truth and predicted columns".into()));
        }
        let index = |s: &str| -> CliResult<usize> {
            let c: ClassLabel = s.parse().map_err(|e| bad(i + 1, e))?;
            ls.index_of(c).ok_or_else(|| bad(i + 1, format!("{c} is not part of label set {ls}")))
        };
        if fields[1] == "-" {
            return Err(bad(i + 1, "row has no true label".into()));
        }
        truth.push(index(fields[1])?);
        preds.push(index(fields[2])?);
    }
    let ls = label_set.ok_or_else(|| usage(format!("{}: no predictions", path.display())))?;
    if preds.is_empty() {
        return Err(usage(format!("{}: no predictions", path.display())));
    }
    Ok((ls, preds, truth))
}

fn denoise_cmd(
    ctx: &Context,
    dae: &Path,
    manifest: &Path,
    split: Option<Subset>,
    noise: Option<f32>,
    cnn: Option<&Path>,
    seed: u64,
) -> CliResult<()> {
    let dae = load_checkpoint(dae)?;
    let m = DatasetManifest::load(manifest)?;
    let set = subset(&m, split.map_or_else(|| default_eval_split(&m), Subset::split));
    let (clean, labels) = load_tiles(&set)?;
    let input = match noise {
        Some(sigma) => clean
            .iter()
            .enumerate()
            .map(|(i, t)| fgs_core::dataset::add_noise(t, sigma, seed.wrapping_add(i as u64)))
            .collect::<fgs_core::Result<Vec<_>>>()?,
        None => clean.clone(),
    };
    let recon = denoise(&dae, &input)?;
    let mut out = DatasetManifest::new(set.label_set);
    for (e, t) in set.entries().iter().zip(&recon) {
        let stem = e.path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let path = ctx.path(format!("{}/{stem}.png", e.class));
        save_png(t, &path)?;
        out.push(ManifestEntry::new(path, e.class, Split::Unsplit))?;
    }
    out.save(&ctx.path("manifest.tsv"))?;
    if let Some(sigma) = noise {
        let noisy = ssim_pairs(&clean, &input)?;
        let rebuilt = ssim_pairs(&clean, &recon)?;
        let mut w = KvWriter::new();
        w.pair("sigma", sigma);
        if let (Some(a), Some(b)) = (&noisy, &rebuilt) {
            w.pair("ssim_noisy_mean", a.mean).pair("ssim_reconstructed_mean", b.mean);
            println!("SSIM clean vs noisy {:.4}, clean vs reconstructed {:.4}", a.mean, b.mean);
        }
        ctx.write("ssim.kv", w.finish())?;
        if let Some(cnn) = cnn {
            let cnn = load_checkpoint(cnn)?;
            let report = evaluate_denoising(&cnn, &dae, &clean, &labels, sigma, seed)?;
            ctx.write("denoise_report.json", report.to_json())?;
            ctx.write("denoise_report.txt", report.to_string())?;
            println!("{report}");
        }
    }
    Ok(())
}
