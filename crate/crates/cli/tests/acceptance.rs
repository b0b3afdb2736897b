//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) before asserting.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use biastune::data::{expand_blank_labels, generate, VocabSpec};
use biastune::eval::{dsc, evaluate, iou};
use biastune::tuning::{
    categorize, fit, focal_loss, focal_loss_grad, partition_parameters, Category, FocalLossConfig,
    TrainConfig,
};
use biastune::{
    BinaryMask, DeltaCheckpoint, Error, Image, MaskLogits, ModelConfig, ModelF32, ModelF64,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let line = format!("[acceptance] criterion {id:>2} {name:<28} {verdict}  {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn shape_vocab() -> Vec<String> {
    VocabSpec::shapes(64).labels()
}

fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        max_steps: 500,
        seed,
        augment: false,
        ..TrainConfig::default()
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn biastune() -> Command {
    Command::new(env!("CARGO_BIN_EXE_biastune"))
}

/// Parameter count of every category, derived from the architecture
/// description alone.
fn counting_oracle(c: &ModelConfig) -> BTreeMap<&'static str, usize> {
    let e = c.embed_dim;
    let m = (e as f64 * c.mlp_ratio).round() as usize;
    let p = c.prompt_dim;
    let t = c.text_dim;
    let d = c.depth;
    let patch = c.patch_size * c.patch_size * 3;
    let tokens = (c.image_size / c.patch_size).pow(2);
    let linear = |i: usize, o: usize| i * o + o;

    let frozen = linear(patch, e)
        + d * (linear(e, 3 * e) + linear(e, e) + linear(e, m) + linear(m, e))
        + linear(e, p)
        + linear(p, p)
        + p;
    let shifts = e + d * (3 * e + e + m + e) + p;
    let norms = d * 4 * e + 2 * p;
    let tal = linear(t, p) + 2 * p;

    let inner = p / c.attention_downsample;
    let self_attn = 4 * linear(p, p);
    let cross = 3 * linear(p, inner) + linear(inner, p);
    let block = self_attn
        + 2 * cross
        + 4 * 2 * p
        + linear(p, c.decoder_mlp_dim)
        + linear(c.decoder_mlp_dim, p);
    let stages = c.patch_size.trailing_zeros() as usize;
    let mut upscale = 0;
    let mut cin = p;
    for i in 0..stages {
        let cout = (p >> (i + 1)).max(8);
        upscale += linear(cin, 4 * cout);
        cin = cout;
    }
    let decoder = p
        + c.decoder_depth * block
        + cross
        + 2 * p
        + upscale
        + linear(3, cin)
        + 2 * linear(p, p)
        + linear(p, cin);

    BTreeMap::from([
        ("frozen-backbone", frozen),
        ("shift-bias", shifts),
        ("layer-norm", norms),
        ("positional-embedding", tokens * e),
        ("tal", tal),
        ("decoder", decoder),
    ])
}

/// `category -> count` rows and the ratio from the `budget` table.
fn parse_budget(stdout: &str) -> (BTreeMap<String, usize>, f64) {
    let mut counts = BTreeMap::new();
    let mut ratio = f64::NAN;
    for line in stdout.lines() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        match cols.as_slice() {
            ["trainable_ratio", r] => ratio = r.parse().unwrap(),
            [name, n, "true" | "false"] => {
                counts.insert(name.to_string(), n.parse().unwrap());
            }
            _ => {}
        }
    }
    (counts, ratio)
}

#[test]
fn criterion_01_parameter_budget() {
    let start = Instant::now();
    let out = biastune()
        .args(["budget", "--config"])
        .arg(repo_root().join("configs/vit_base_like.toml"))
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (counts, ratio) = parse_budget(&String::from_utf8(out.stdout).unwrap());

    let cfg = ModelConfig::vit_base_like(shape_vocab());
    let oracle = counting_oracle(&cfg);
    let total: usize = oracle.values().sum();
    let trainable = total - oracle["frozen-backbone"];
    let oracle_ratio = trainable as f64 / total as f64;
    let counts_match = oracle.iter().all(|(k, v)| counts.get(*k) == Some(v));
    let ok = counts_match
        && (ratio - oracle_ratio).abs() < 1e-6
        && ratio < 0.02
        && elapsed < Duration::from_secs(10);
    report(
        1,
        "parameter budget",
        ok,
        &format!(
            "ratio {ratio:.6} (need < 0.02), trainable {trainable} of {total}, oracle counts match: {counts_match}, {:.1?}",
            elapsed
        ),
    );
    assert!(
        counts_match,
        "budget {counts:?} vs counting oracle {oracle:?}"
    );
    assert!((ratio - oracle_ratio).abs() < 1e-6);
    assert!(elapsed < Duration::from_secs(10));
    assert!(ratio < 0.02, "trainable ratio {ratio} is not below 0.02");
}

#[test]
fn criterion_02_zero_shift_equivalence() {
    let start = Instant::now();
    let model = ModelF32::new(ModelConfig::toy(shape_vocab()), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let data = (0..64 * 64 * 3).map(|_| rng.random::<f32>()).collect();
        let image = Image::new(64, 64, data).unwrap();
        let with = model.encode_image(&image).unwrap();
        let without = model.encode_image_without_shifts(&image).unwrap();
        let scale = without
            .features
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs() as f64));
        let diff = with
            .features
            .iter()
            .zip(&without.features)
            .fold(0.0f64, |a, (&x, &y)| a.max((x - y).abs() as f64));
        worst = worst.max(diff / scale.max(f64::MIN_POSITIVE));
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-6 && elapsed < Duration::from_secs(60);
    report(
        2,
        "zero-shift equivalence",
        ok,
        &format!("max rel err {worst:.2e}, {elapsed:.1?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_03_freeze_invariance() {
    let start = Instant::now();
    let vocab = shape_vocab();
    let data = generate(3, 8, &VocabSpec::shapes(64)).unwrap();
    let mut model = ModelF32::new(ModelConfig::toy(vocab), 5).unwrap();
    let before: Vec<(String, Vec<f32>)> = model
        .params()
        .into_iter()
        .map(|p| (p.name, p.data.to_vec()))
        .collect();
    let cfg = TrainConfig {
        max_steps: 50,
        ..overfit_config(4)
    };
    fit(&cfg, &data, &mut model).unwrap();

    let mut frozen_intact = true;
    let mut changed: BTreeMap<Category, bool> = BTreeMap::new();
    for (p, (name, old)) in model.params().into_iter().zip(&before) {
        assert_eq!(&p.name, name);
        let category = categorize(name).unwrap();
        let same = p
            .data
            .iter()
            .zip(old)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if category.trainable() {
            *changed.entry(category).or_default() |= !same;
        } else {
            frozen_intact &= same;
        }
    }
    let all_moved = Category::ALL
        .iter()
        .filter(|c| c.trainable())
        .all(|c| changed.get(c) == Some(&true));
    let elapsed = start.elapsed();
    let ok = frozen_intact && all_moved && elapsed < Duration::from_secs(300);
    report(
        3,
        "freeze invariance",
        ok,
        &format!("frozen bitwise unchanged: {frozen_intact}, changed per category: {changed:?}, {elapsed:.1?}"),
    );
    assert!(ok);
}

fn random_masks(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<BinaryMask> {
    (0..n)
        .map(|_| {
            let data = (0..h * w).map(|_| rng.random_bool(0.3) as u8).collect();
            BinaryMask::from_values(h, w, data).unwrap()
        })
        .collect()
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<MaskLogits<f64>> {
    (0..n)
        .map(|_| MaskLogits {
            height: h,
            width: w,
            data: (0..h * w).map(|_| rng.random_range(-4.0..4.0)).collect(),
        })
        .collect()
}

#[test]
fn criterion_04_focal_loss() {
    let start = Instant::now();
    // (a) p = 0.5, y = 1
    let cfg = FocalLossConfig::new(0.75, 3.0);
    let logit = vec![MaskLogits {
        height: 1,
        width: 1,
        data: vec![0.0f64],
    }];
    let one = vec![BinaryMask::ones(1, 1)];
    let single = focal_loss(&logit, &one, &cfg).unwrap();
    let a_ok = (single - 0.064983).abs() <= 1e-5;

    // (b) gamma 0, alpha 0.5 against half the binary cross-entropy
    let half = FocalLossConfig::new(0.5, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut b_worst = 0.0f64;
    for _ in 0..100 {
        let logits = random_logits(&mut rng, 3, 4, 4);
        let masks = random_masks(&mut rng, 3, 4, 4);
        let mut bce = 0.0;
        for (l, m) in logits.iter().zip(&masks) {
            for (&z, &y) in l.data.iter().zip(&m.data) {
                let p = 1.0 / (1.0 + (-z).exp());
                bce -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
            }
        }
        bce /= logits.len() as f64;
        let focal = focal_loss(&logits, &masks, &half).unwrap();
        b_worst = b_worst.max((focal - 0.5 * bce).abs() / (0.5 * bce));
    }
    let b_ok = b_worst <= 1e-6;

    // (c) analytic gradient against central differences, one pixel at a time
    // so the difference quotient is not swamped by the rest of the sum
    let mut c_worst = 0.0f64;
    for cfg in [
        FocalLossConfig::new(0.75, 3.0),
        FocalLossConfig::new(0.25, 2.0),
    ] {
        let logits = random_logits(&mut rng, 2, 3, 3);
        let masks = random_masks(&mut rng, 2, 3, 3);
        let grad = focal_loss_grad(&logits, &masks, &cfg).unwrap();
        let batch = logits.len() as f64;
        let h = 1e-5;
        for (s, sample_grad) in grad.iter().enumerate() {
            for (i, &analytic) in sample_grad.iter().enumerate() {
                let at = |z: f64| {
                    let l = [MaskLogits {
                        height: 1,
                        width: 1,
                        data: vec![z],
                    }];
                    let m = [BinaryMask::from_values(1, 1, vec![masks[s].data[i]]).unwrap()];
                    focal_loss(&l, &m, &cfg).unwrap()
                };
                let z = logits[s].data[i];
                let numeric = (at(z + h) - at(z - h)) / (2.0 * h) / batch;
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
                c_worst = c_worst.max(err);
            }
        }
    }
    let c_ok = c_worst <= 1e-4;
    let elapsed = start.elapsed();
    let ok = a_ok && b_ok && c_ok && elapsed < Duration::from_secs(60);
    report(
        4,
        "focal loss",
        ok,
        &format!(
            "(a) {single:.6}, (b) max rel {b_worst:.1e}, (c) max rel {c_worst:.1e}, {elapsed:.1?}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_metric_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut ordering_ok = true;
    for k in 0..1000 {
        let density = match k % 10 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        };
        let other = if k % 20 == 0 {
            0.0
        } else {
            rng.random_range(0.0..1.0)
        };
        let mut a = BinaryMask::zeros(8, 8);
        let mut b = BinaryMask::zeros(8, 8);
        let mut sa = HashSet::new();
        let mut sb = HashSet::new();
        for y in 0..8 {
            for x in 0..8 {
                if rng.random_bool(density) {
                    a.set(y, x, true);
                    sa.insert((y, x));
                }
                if rng.random_bool(other) {
                    b.set(y, x, true);
                    sb.insert((y, x));
                }
            }
        }
        let inter = sa.intersection(&sb).count();
        let union = sa.union(&sb).count();
        let want_dsc = if sa.len() + sb.len() == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (sa.len() + sb.len()) as f64
        };
        let want_iou = if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        let (d, i) = (dsc(&a, &b).unwrap(), iou(&a, &b).unwrap());
        if d != want_dsc || i != want_iou {
            mismatches += 1;
        }
        ordering_ok &= i <= d;
    }
    let elapsed = start.elapsed();
    let ok = mismatches == 0 && ordering_ok && elapsed < Duration::from_secs(30);
    report(
        5,
        "metric oracle equivalence",
        ok,
        &format!("{mismatches} mismatches of 1000, iou <= dsc: {ordering_ok}, {elapsed:.1?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_06_blank_label_expansion() {
    let start = Instant::now();
    let spec = VocabSpec::shapes(64);
    let vocab = spec.labels();
    let mut ok = true;
    let mut pairs = 0;
    for item in generate(6, 64, &spec).unwrap() {
        let samples =
            expand_blank_labels(Arc::new(item.image.clone()), &item.masks, &vocab).unwrap();
        ok &= samples.len() == vocab.len();
        for s in &samples {
            match item.masks.get(&s.label) {
                Some(m) => ok &= &s.mask == m && !s.is_blank(),
                None => ok &= s.mask.data.iter().all(|&v| v == 0),
            }
        }
        pairs += samples.len();
    }
    let elapsed = start.elapsed();
    let ok = ok && elapsed < Duration::from_secs(10);
    report(
        6,
        "blank-label expansion",
        ok,
        &format!("{pairs} pairs from 64 images, {elapsed:.1?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_07_overfit() {
    let start = Instant::now();
    let spec = VocabSpec::shapes(64);
    let data = generate(7, 16, &spec).unwrap();
    let mut model = ModelF32::new(ModelConfig::toy(spec.labels()), 7).unwrap();
    let cfg = overfit_config(7);
    fit(&cfg, &data, &mut model).unwrap();
    let r = evaluate(&model, &data, &spec.labels()).unwrap();
    let present = r.present_dsc().unwrap();
    let blank = r.max_blank_fraction().unwrap();
    let elapsed = start.elapsed();
    let ok = cfg.max_steps <= 500
        && cfg.batch_size >= 4
        && present >= 0.9
        && blank < 0.05
        && elapsed < Duration::from_secs(15 * 60);
    report(
        7,
        "overfit",
        ok,
        &format!("present-class DSC {present:.4}, worst blank fg {blank:.4}, {elapsed:.1?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_08_location_learning() {
    let start = Instant::now();
    let spec = VocabSpec::spatial_disks(64);
    let data = generate(8, 16, &spec).unwrap();
    let mut model = ModelF32::new(ModelConfig::toy(spec.labels()), 8).unwrap();
    fit(&overfit_config(8), &data, &mut model).unwrap();
    let r = evaluate(&model, &data, &spec.labels()).unwrap();
    let present = r.present_dsc().unwrap();
    let blank = r.max_blank_fraction().unwrap();
    let elapsed = start.elapsed();
    let ok = present >= 0.8 && blank < 0.05 && elapsed < Duration::from_secs(15 * 60);
    report(
        8,
        "location learning",
        ok,
        &format!("correct-side DSC {present:.4}, worst empty-side fg {blank:.4}, {elapsed:.1?}"),
    );
    assert!(ok);
}

#[test]
fn criterion_09_checkpoint_round_trip() {
    let start = Instant::now();
    let spec = VocabSpec::shapes(64);
    let vocab = spec.labels();
    let data = generate(9, 8, &spec).unwrap();
    let config = ModelConfig::toy(vocab.clone());
    let mut model = ModelF32::new(config.clone(), 9).unwrap();
    let cfg = TrainConfig {
        max_steps: 40,
        ..overfit_config(9)
    };
    fit(&cfg, &data, &mut model).unwrap();
    let before = evaluate(&model, &data, &vocab).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("delta.bin");
    DeltaCheckpoint::capture(&model)
        .unwrap()
        .save(&path)
        .unwrap();
    let loaded = DeltaCheckpoint::load(&path).unwrap();
    let mut restored = ModelF32::new(config.clone(), 9).unwrap();
    loaded.apply(&mut restored).unwrap();
    let after = evaluate(&restored, &data, &vocab).unwrap();
    let logits_equal = data.iter().all(|item| {
        let a = model.forward(&item.image, &vocab[0]).unwrap();
        let b = restored.forward(&item.image, &vocab[0]).unwrap();
        a.data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let metrics_equal = before == after;

    let mut other = ModelF32::new(config, 10).unwrap();
    let refused = matches!(
        loaded.apply(&mut other),
        Err(Error::FingerprintMismatch { .. })
    );
    let elapsed = start.elapsed();
    let ok = metrics_equal && logits_equal && refused && elapsed < Duration::from_secs(60);
    report(
        9,
        "checkpoint round trip",
        ok,
        &format!(
            "metrics bitwise equal: {metrics_equal}, logits bitwise equal: {logits_equal}, mismatched base refused: {refused}, {elapsed:.1?}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_10_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let toml = std::fs::read_to_string(repo_root().join("configs/toy.toml"))
        .unwrap()
        .replace("root = \"../data/shapes\"", "root = \"data\"");
    let config = root.join("toy.toml");
    std::fs::write(&config, toml).unwrap();
    let status = biastune()
        .args(["synth", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(root.join("data"))
        .status()
        .unwrap();
    assert!(status.success());

    let run = |name: &str| {
        let out = root.join(name);
        let status = biastune()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        (
            std::fs::read(out.join("checkpoint.bin")).unwrap(),
            std::fs::read(out.join("loss.csv")).unwrap(),
        )
    };
    let (ckpt_a, loss_a) = run("a");
    let (ckpt_b, loss_b) = run("b");
    let elapsed = start.elapsed();
    let ok = ckpt_a == ckpt_b && loss_a == loss_b && elapsed < Duration::from_secs(30 * 60);
    report(
        10,
        "determinism",
        ok,
        &format!(
            "checkpoints identical: {}, loss histories identical: {}, {elapsed:.1?}",
            ckpt_a == ckpt_b,
            loss_a == loss_b
        ),
    );
    assert!(ok);
}

#[test]
fn counting_oracle_matches_toy_partition() {
    let cfg = ModelConfig::toy(shape_vocab());
    let model = ModelF64::new(cfg.clone(), 0).unwrap();
    let totals = partition_parameters(&model).unwrap().totals();
    for (name, count) in counting_oracle(&cfg) {
        let cat = totals.iter().find(|(c, _)| c.as_str() == name).unwrap().1;
        assert_eq!(cat.count, count, "{name}");
    }
}
