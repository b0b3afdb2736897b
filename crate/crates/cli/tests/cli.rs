use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use biastune::config::RunConfig;
use biastune::data::io::read_mask;
use biastune::data::{load_dataset, load_images, Split};
use biastune::eval::evaluate;
use biastune::tuning::partition_parameters;
use biastune::{DeltaCheckpoint, ModelConfig, ModelF32};

fn biastune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biastune"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY: &str = r#"
[model]
image_size = 64
patch_size = 8
embed_dim = 64
depth = 2
num_heads = 4
mlp_ratio = 4.0
text_dim = 64
prompt_dim = 32
decoder_depth = 2
decoder_heads = 4
decoder_mlp_dim = 128
class_vocab = ["disk", "square", "triangle", "blob"]

[train]
batch_size = 8
learning_rate = 1e-3
max_steps = 250
augment = false

[data]
root = "data"
n_images = 8

[run]
seed = 11
"#;

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("toy.toml");
    fs::write(&path, TOY).unwrap();
    path
}

#[test]
fn synth_without_out_is_a_usage_error() {
    let out = biastune(&["synth", "-n", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_with_zero_images_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = biastune(&["synth", "--out", s(dir.path()), "-n", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for root in [&a, &b] {
        let out = biastune(&["synth", "--out", s(root), "-n", "6", "--seed", "7"]);
        assert!(out.status.success());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(a.join("train/images")).unwrap() {
        files.push(PathBuf::from("images").join(entry.unwrap().file_name()));
    }
    files.push(PathBuf::from("manifest.json"));
    assert_eq!(files.len(), 7);
    for f in files {
        let fa = fs::read(a.join("train").join(&f)).unwrap();
        let fb = fs::read(b.join("train").join(&f)).unwrap();
        if f.ends_with("manifest.json") {
            // manifests record their own root
            assert_eq!(
                String::from_utf8(fa).unwrap().replace(s(&a), ""),
                String::from_utf8(fb).unwrap().replace(s(&b), "")
            );
        } else {
            assert_eq!(fa, fb, "{}", f.display());
        }
    }
}

#[test]
fn budget_toy_matches_library_partition() {
    let out = biastune(&["budget", "--preset", "toy"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let model = ModelF32::new(
        ModelConfig::toy(vec![
            "disk".into(),
            "square".into(),
            "triangle".into(),
            "blob".into(),
        ]),
        0,
    )
    .unwrap();
    let partition = partition_parameters(&model).unwrap();
    for (cat, total) in partition.totals() {
        let line = stdout
            .lines()
            .find(|l| l.split_whitespace().next() == Some(cat.as_str()))
            .unwrap();
        assert_eq!(
            line.split_whitespace().nth(1),
            Some(total.count.to_string().as_str())
        );
    }
    assert!(stdout.contains(&format!(
        "trainable_ratio {:.6}",
        partition.trainable_ratio()
    )));
}

#[test]
fn budget_with_malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[model]\nimage_size = \"large\"\n").unwrap();
    let out = biastune(&["budget", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_with_missing_image_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let ckpt = dir.path().join("delta.bin");
    let cfg = RunConfig::load(&config).unwrap();
    let model: ModelF32 = cfg.build_model().unwrap();
    DeltaCheckpoint::capture(&model)
        .unwrap()
        .save(&ckpt)
        .unwrap();
    let out = biastune(&[
        "predict",
        "--config",
        s(&config),
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&dir.path().join("nope.png")),
        "--prompt",
        "disk",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = write_config(root);
    assert!(biastune(&[
        "synth",
        "--config",
        s(&config),
        "--out",
        s(&root.join("data"))
    ])
    .status
    .success());

    let run = root.join("run");
    let out = biastune(&["train", "--config", s(&config), "--out", s(&run)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["checkpoint.bin", "loss.csv", "partition.json", "report.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss\n1,"));
    assert_eq!(loss.lines().count(), 251);
    let partition: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("partition.json")).unwrap()).unwrap();
    assert_eq!(partition["frozen-backbone"]["trainable"], false);
    assert_eq!(partition["decoder"]["trainable"], true);

    // eval reproduces the end-of-training report exactly
    let eval_dir = root.join("eval");
    let out = biastune(&[
        "eval",
        "--config",
        s(&config),
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--out",
        s(&eval_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert_eq!(report, fs::read_to_string(run.join("report.csv")).unwrap());
    for line in report.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        for v in &cols[1..] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    // and equals a library-level evaluation of the restored model
    let cfg = RunConfig::load(&config).unwrap();
    let mut model: ModelF32 = cfg.build_model().unwrap();
    DeltaCheckpoint::load(&run.join("checkpoint.bin"))
        .unwrap()
        .apply(&mut model)
        .unwrap();
    let manifest = load_dataset(&cfg.data.root, Split::Train, &cfg.model.class_vocab).unwrap();
    let images = load_images(&manifest).unwrap();
    let library = evaluate(&model, &images, &cfg.model.class_vocab).unwrap();
    assert_eq!(library.to_csv(), report);

    // a different base seed changes the frozen fingerprint
    let out = biastune(&[
        "eval",
        "--config",
        s(&config),
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--seed",
        "12",
        "--out",
        s(&eval_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));

    // absent-class prompt yields a near-blank mask
    let item = images
        .iter()
        .find(|i| i.masks.len() < cfg.model.class_vocab.len())
        .expect("some image lacks a class");
    let absent = cfg
        .model
        .class_vocab
        .iter()
        .find(|l| !item.masks.contains_key(*l))
        .unwrap();
    let image_path = manifest.split_dir().join(
        &manifest
            .entries
            .iter()
            .find(|e| e.id == item.id)
            .unwrap()
            .image,
    );
    let pred = root.join("pred");
    let out = biastune(&[
        "predict",
        "--config",
        s(&config),
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
        "--image",
        s(&image_path),
        "--prompt",
        absent,
        "--out",
        s(&pred),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(pred.join("overlay.png").is_file());
    let mask = read_mask(&pred.join("mask.png")).unwrap();
    assert!(
        mask.foreground_fraction() < 0.05,
        "{}",
        mask.foreground_fraction()
    );
}
