use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fgs_core::dataset::{ClassLabel, DatasetManifest, Split};
use fgs_core::evaluation::EvalReport;
use fgs_core::kv::KvFile;
use fgs_core::modelzoo::load_checkpoint;

fn fgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgs")).args(args).output().expect("binary runs")
}

#[track_caller]
fn ok(args: &[&str]) -> String {
    let out = fgs(args);
    assert!(
        out.status.success(),
        "fgs {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> Option<i32> {
    fgs(args).status.code()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small 16×16 surrogate corpus: 60 clean tiles and 8 of each seeded class.
fn corpus(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "surrogate",
        "--tile-size",
        "16",
        "--count",
        "no-defect=60",
        "--count",
        "seeded_1=8",
        "--count",
        "seeded_2=8",
        "--count",
        "seeded_3=8",
        "--seed",
        "5",
        "--out",
        s(&out),
    ]);
    out.join("manifest.tsv")
}

#[test]
fn surrogate_writes_manifest_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let m = DatasetManifest::load(&manifest).unwrap();
    assert_eq!(m.len(), 84);
    assert_eq!(m.count(ClassLabel::Seeded3), 8);
    let meta = KvFile::load(&dir.path().join("data/run.meta")).unwrap();
    assert_eq!(meta.raw("command"), Some("surrogate"));
    assert_eq!(meta.get::<u64>("seed").unwrap(), Some(5));
    assert!(meta.raw("args").unwrap().contains("--tile-size 16"));
    assert!(dir.path().join("data/surrogate.kv").is_file());
}

#[test]
fn split_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let split_dir = dir.path().join("split");
    ok(&["split", "--manifest", s(&manifest), "--seed", "1", "--out", s(&split_dir)]);
    let m = DatasetManifest::load(&split_dir.join("manifest.tsv")).unwrap();
    assert_eq!(m.subset(Split::Train).len(), 63);
    assert_eq!(m.subset(Split::Test).len(), 21);
    let text = ok(&[
        "stats",
        "--manifest",
        s(&split_dir.join("manifest.tsv")),
        "--split",
        "test",
        "--out",
        s(&dir.path().join("st")),
    ]);
    assert!(text.contains("total") && text.contains("21"), "{text}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("st/stats.json")).unwrap()).unwrap();
    assert_eq!(json["total"], 21);
}

#[test]
fn sam_balance_reaches_target() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let bal = dir.path().join("bal");
    ok(&[
        "balance",
        "--manifest",
        s(&manifest),
        "--strategy",
        "sam",
        "--class",
        "seeded_2",
        "--target",
        "500",
        "--out",
        s(&bal),
    ]);
    let st = dir.path().join("st");
    let text = ok(&["stats", "--manifest", s(&bal.join("manifest.tsv")), "--out", s(&st)]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(st.join("stats.json")).unwrap()).unwrap();
    let seeded2 = json["classes"].as_array().unwrap().iter().find(|c| c["class"] == "seeded_2").unwrap();
    assert_eq!(seeded2["count"], 500, "{text}");
    let before = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(before.lines().count(), 84 + 2, "input manifest untouched");
}

#[test]
fn cds_and_rds_balance_every_defect_class_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    for strategy in ["cds", "rds"] {
        let out = dir.path().join(strategy);
        ok(&["balance", "--manifest", s(&manifest), "--strategy", strategy, "--target", "20", "--out", s(&out)]);
        let m = DatasetManifest::load(&out.join("manifest.tsv")).unwrap();
        for c in [ClassLabel::Seeded1, ClassLabel::Seeded2, ClassLabel::Seeded3] {
            assert_eq!(m.count(c), 20, "{strategy} {c}");
        }
        assert_eq!(m.count(ClassLabel::NoDefect), 60);
    }
}

#[test]
fn untrained_checkpoint_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let model = dir.path().join("model");
    ok(&["train-cnn", "--manifest", s(&manifest), "--max-epochs", "0", "--out", s(&model)]);
    let net = load_checkpoint(&model.join("cnn.fgs")).unwrap();
    assert_eq!(net.meta.epochs, 0);
    let eval = dir.path().join("eval");
    ok(&["eval", "--model", s(&model.join("cnn.fgs")), "--manifest", s(&manifest), "--out", s(&eval)]);
    let report = EvalReport::from_json(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.samples, 84);

    let pred = dir.path().join("pred");
    let tile = dir.path().join("data/seeded_1/seeded_1_00000.png");
    let text = ok(&["predict", "--model", s(&model.join("cnn.fgs")), s(&tile), "--out", s(&pred)]);
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1);
    let probs: f32 = rows[0].split('\t').nth(3).unwrap().split(',').map(|p| p.parse::<f32>().unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-4);
}

#[test]
fn eval_of_perfect_predictions_is_100_percent() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("p.tsv");
    let mut text = String::from("# label_set=hr1\n");
    for (i, c) in ["no-defect", "seeded_1", "seeded_2", "seeded_3", "no-defect"].iter().enumerate() {
        text.push_str(&format!("t{i}.png\t{c}\t{c}\t\n"));
    }
    std::fs::write(&file, text).unwrap();
    let out = dir.path().join("eval");
    let stdout = ok(&["eval", "--predictions", s(&file), "--out", s(&out)]);
    assert!(stdout.contains("100.0"), "{stdout}");
    let report = EvalReport::from_json(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.accuracy_percent(), "100.0");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["stats", "--manifest", "m.tsv", "--bogus"]), Some(2));
    assert_eq!(code(&["balance", "--manifest", "m", "--strategy", "smote", "--target", "5"]), Some(2));
    assert_eq!(code(&["stats", "--manifest", s(&dir.path().join("missing.tsv")), "--out", s(&out)]), Some(1));
    assert_eq!(code(&["stats", "--manifest", "m.tsv", "--config", "c.kv", "--out", s(&out)]), Some(2));

    let protocol = dir.path().join("p.kv");
    std::fs::write(&protocol, "dataset = m.tsv\nmethods = original,smote\n").unwrap();
    let o = fgs(&["experiment", "--protocol", s(&protocol), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("smote"), "{err}");

    let cfg = dir.path().join("t.kv");
    std::fs::write(&cfg, "train.batch_size = 0\n").unwrap();
    assert_eq!(code(&["train-cnn", "--manifest", "m.tsv", "--config", s(&cfg), "--out", s(&out)]), Some(2));
}

#[test]
fn experiment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let protocol = dir.path().join("protocol.kv");
    std::fs::write(
        &protocol,
        format!(
            "dataset = elsewhere.tsv\nmethods = original,sam\nrepetitions = 2\nseed = 3\ntarget = 20\ntrain.max_epochs = 2\ncnn.filters = 4,4,4\ncnn.hidden = 8\n",
        ),
    )
    .unwrap();
    let out = dir.path().join("missing");
    assert_eq!(code(&["experiment", "--protocol", s(&protocol), "--out", s(&out)]), Some(1));
    let runs: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let table =
                ok(&["experiment", "--protocol", s(&protocol), "--dataset", s(&manifest), "--out", s(&out)]);
            assert!(table.contains("original") && table.contains("sam"), "{table}");
            std::fs::read_to_string(out.join("experiment.json")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let json: serde_json::Value = serde_json::from_str(&runs[0]).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 4);
}

#[test]
fn gan_generator_feeds_balance() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let cfg = dir.path().join("gan.kv");
    std::fs::write(&cfg, "gan.latent_dim = 8\ngan.seed_channels = 4\ngan.generator_filters = 4,4\n").unwrap();
    let gan = dir.path().join("gan");
    ok(&[
        "train-gan",
        "--manifest",
        s(&manifest),
        "--class",
        "seeded_1",
        "--iterations",
        "2",
        "--batch-size",
        "4",
        "--samples",
        "3",
        "--config",
        s(&cfg),
        "--out",
        s(&gan),
    ]);
    assert!(gan.join("samples/seeded_1_002.png").is_file());
    let bal = dir.path().join("bal");
    let generator = format!("seeded_1={}", gan.join("generator.fgs").display());
    ok(&[
        "balance",
        "--manifest",
        s(&manifest),
        "--strategy",
        "gan",
        "--class",
        "seeded_1",
        "--target",
        "12",
        "--generator",
        &generator,
        "--out",
        s(&bal),
    ]);
    assert_eq!(DatasetManifest::load(&bal.join("manifest.tsv")).unwrap().count(ClassLabel::Seeded1), 12);
    let missing = fgs(&[
        "balance",
        "--manifest",
        s(&manifest),
        "--strategy",
        "gan",
        "--class",
        "seeded_2",
        "--target",
        "12",
        "--out",
        s(&dir.path().join("bal2")),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("generator"));
}

#[test]
fn denoiser_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let model = dir.path().join("m");
    ok(&["train-dae", "--manifest", s(&manifest), "--max-epochs", "1", "--out", s(&model)]);
    ok(&["train-cnn", "--manifest", s(&manifest), "--max-epochs", "0", "--out", s(&model)]);
    let out = dir.path().join("d");
    let text = ok(&[
        "denoise",
        "--dae",
        s(&model.join("dae.fgs")),
        "--manifest",
        s(&manifest),
        "--noise",
        "0.3",
        "--cnn",
        s(&model.join("cnn.fgs")),
        "--out",
        s(&out),
    ]);
    assert!(text.contains("reconstructed"), "{text}");
    let m = DatasetManifest::load(&out.join("manifest.tsv")).unwrap();
    assert_eq!(m.len(), 84);
    assert!(out.join("denoise_report.json").is_file());
}

#[test]
fn tile_cuts_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let layer = DatasetManifest::load(&manifest).unwrap().entries()[0].path.clone();
    let boxes = dir.path().join("boxes.txt");
    std::fs::write(&boxes, "# x,y,w,h\n0,0,8,8\n8,8,8,8\n").unwrap();
    let out = dir.path().join("tiles");
    ok(&[
        "tile",
        "--layer",
        s(&layer),
        "--box",
        "4,4,4,4",
        "--boxes-file",
        s(&boxes),
        "--class",
        "short-feed",
        "--out",
        s(&out),
    ]);
    let m = DatasetManifest::load(&out.join("manifest.tsv")).unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m.count(ClassLabel::ShortFeed), 3);
    assert_eq!(m.label_set.id(), "jbk75");
    assert_eq!(
        code(&["tile", "--layer", s(&layer), "--box", "10,10,8,8", "--class", "short-feed", "--out", s(&out)]),
        Some(1)
    );
}
