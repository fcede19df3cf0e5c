//! Runs the `t2seg` binary end to end on a small generated corpus.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use t2seg::data::synth::synth_splits;
use t2seg::data::{load_image, resize_image, MaskImage, Sample, PALETTE};

const CONFIG: &str = r#"
[model]
num_classes = 6
[train]
epochs = 1
lr = 0.001
seed = 3
[data]
synth = true
synth_seed = 2
synth_train = 8
synth_val = 4
"#;

fn t2seg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_t2seg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = t2seg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, CONFIG).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains once into `dir/out` and returns `(config, out_dir)`.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir);
    let out = dir.join("out");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    (cfg, out)
}

#[test]
fn train_writes_log_checkpoints_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path());
    let log = fs::read(out.join("train.log")).unwrap();
    assert_eq!(String::from_utf8(log.clone()).unwrap().lines().count(), 1);
    assert!(out.join("checkpoints/final.t2sg").is_file());
    assert!(out.join("checkpoints/epoch_001.t2sg").is_file());
    assert!(out.join("config.toml").is_file());

    let again = dir.path().join("again");
    ok(&["train", "--config", s(&cfg), "--out", s(&again)]);
    assert_eq!(fs::read(again.join("train.log")).unwrap(), log);
    let sequential = dir.path().join("sequential");
    ok(&["train", "--config", s(&cfg), "--out", s(&sequential), "--sequential"]);
    assert_eq!(fs::read(sequential.join("train.log")).unwrap(), log);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[train]\nepochz = 3\n[data]\nsynth = true\n").unwrap();
    let out = t2seg(&["train", "--config", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn eval_writes_one_row_per_class_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path());
    let ckpt = out.join("checkpoints/final.t2sg");
    ok(&["eval", "--config", s(&cfg), "--out", s(&out), "--checkpoint", s(&ckpt)]);
    let first = fs::read_to_string(out.join("eval_val.csv")).unwrap();
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "class,iou,included");
    assert_eq!(lines.len(), 1 + 6 + 2);
    assert!(lines[7].starts_with("ACC,") && lines[8].starts_with("mIoU,"));
    ok(&["eval", "--config", s(&cfg), "--out", s(&out), "--checkpoint", s(&ckpt)]);
    assert_eq!(fs::read_to_string(out.join("eval_val.csv")).unwrap(), first);
}

#[test]
fn infer_writes_a_palette_mask_at_the_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path());
    let ckpt = out.join("checkpoints/final.t2sg");
    let (train_set, _) = synth_splits(9, 1, 0, 64, 6).unwrap();
    let odd = Sample::new(resize_image(&train_set[0].image, 100, 72), MaskImage::filled(100, 72, 0), "odd").unwrap();
    odd.save(dir.path()).unwrap();
    let image = dir.path().join("images/odd.png");

    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for target in [&a, &b] {
        ok(&["infer", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--image", s(&image), "--output", s(target)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let colors = load_image(&a).unwrap();
    assert_eq!(colors.shape(), &[3, 72, 100]);
    let plane = 72 * 100;
    let d = colors.data();
    for p in 0..plane {
        let rgb = [0, 1, 2].map(|c| (d[c * plane + p] * 255.0).round() as u8);
        assert!(PALETTE[..6].contains(&rgb), "pixel {p} has color {rgb:?}");
    }

    let missing = t2seg(&["infer", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--image", "nope.png", "--output", s(&a)]);
    assert_eq!(missing.status.code(), Some(3));
}

fn flood_components(mask: &MaskImage, class: u8) -> usize {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let mut seen = vec![false; mask.labels().len()];
    let mut count = 0;
    for start in 0..seen.len() {
        if seen[start] || mask.labels()[start] != class {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i as isize) % w, (i as isize) / w);
            for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if !seen[j] && mask.labels()[j] == class {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    count
}

#[test]
fn stats_are_repeatable_and_match_flood_fill() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    ok(&["stats", "--config", s(&cfg), "--out", s(&out)]);
    let first = fs::read_to_string(out.join("stats_train.csv")).unwrap();
    ok(&["stats", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(out.join("stats_train.csv")).unwrap(), first);

    let rows: Vec<Vec<&str>> = first.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let (total, body) = rows.split_last().unwrap();
    assert_eq!(total[0], "total");
    assert_eq!(body.len(), 5);
    let ratio_sum: f64 = body.iter().map(|r| r[4].parse::<f64>().unwrap()).sum();
    assert!((ratio_sum - 1.0).abs() <= 1e-4 * body.len() as f64, "{ratio_sum}");
    assert!((total[4].parse::<f64>().unwrap() - 1.0).abs() <= 1e-4);

    let (train_set, _) = synth_splits(2, 8, 4, 64, 6).unwrap();
    for row in body {
        let class: u8 = row[0].parse().unwrap();
        let with: Vec<&MaskImage> = train_set.iter().map(|s| &s.mask).filter(|m| m.labels().contains(&class)).collect();
        assert_eq!(row[2], with.len().to_string());
        if with.is_empty() {
            assert_eq!(row[3], "");
            continue;
        }
        let comps: usize = with.iter().map(|m| flood_components(m, class)).sum();
        assert_eq!(row[3], format!("{:.4}", comps as f64 / with.len() as f64), "class {class}");
    }
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("0 above"), "{text}");
    assert!(!text.contains("FAIL"));
}

fn flops_total(dir: &Path, scale: &str) -> (u64, u64) {
    let out = dir.join(scale);
    ok(&["flops", "--scale", scale, "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("flops.csv")).unwrap();
    let total: Vec<u64> = csv.lines().last().unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    (total[0], total[1])
}

#[test]
fn flops_grow_with_scale() {
    let dir = tempfile::tempdir().unwrap();
    let costs: Vec<(u64, u64)> = ["small", "medium", "large"].iter().map(|sc| flops_total(dir.path(), sc)).collect();
    assert!(costs[0].0 < costs[1].0 && costs[1].0 < costs[2].0, "{costs:?}");
    assert!(costs[0].1 < costs[1].1 && costs[1].1 < costs[2].1, "{costs:?}");
    let bad = t2seg(&["flops", "--scale", "huge", "--out", s(dir.path())]);
    assert_eq!(bad.status.code(), Some(2));
}
