//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2seg::data::{MaskImage, IGNORE};
use t2seg::model::transformer::{decoder_forward, multi_head_attention};
use t2seg::model::{DecoderStyle, ModelConfig, SegModel};
use t2seg::{Tape, Tensor};

/// Row-major `[p, q] x [q, r]`.
pub fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            for k in 0..q {
                out[i * r + j] += a[i * q + k] * b[k * r + j];
            }
        }
    }
    out
}

/// `a · bᵀ` for `a[p, q]`, `b[r, q]`.
pub fn matmul_nt(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            out[i * r + j] = (0..q).map(|k| a[i * q + k] * b[j * q + k]).sum();
        }
    }
    out
}

pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Prototype updates `E <- softmax(E Fᵀ) F` repeated `layers` times, then
/// the map `E Fᵀ`, as plain matrix products. Returns `[N, T]`.
pub fn literal_decoder(e0: &[f64], f: &[f64], n: usize, t: usize, c: usize, layers: usize) -> Vec<f64> {
    let mut e = e0.to_vec();
    for _ in 0..layers {
        let mut s = matmul_nt(&e, f, n, c, t);
        softmax_rows(&mut s, t);
        e = matmul(&s, f, n, t, c);
    }
    matmul_nt(&e, f, n, c, t)
}

/// One random single-head, projection-free decoder instance compared with
/// [`literal_decoder`]. Returns the max absolute difference.
pub fn literal_decoder_instance(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = [8, 16, 32][rng.random_range(0..3)];
    let n = rng.random_range(2..8);
    let layers = rng.random_range(1..4);
    let input = 16 * rng.random_range(1..4);
    let mut cfg = ModelConfig::new(c, layers, 1, 2, n, input);
    cfg.decoder_style = DecoderStyle::Literal;
    let t = cfg.tokens();
    let mut model = SegModel::<f64>::new(cfg.clone(), seed).expect("valid config");
    let e0 = Tensor::<f64>::randn(&[n, c], 0.5, &mut rng);
    *model.params.get_mut("decoder.prototypes").expect("prototypes") = e0.clone();
    let f = Tensor::<f64>::randn(&[t, c], 0.5, &mut rng);

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let fe = tape.constant(&f);
    let attn = decoder_forward(&mut tape, &vars.scope("decoder"), fe, &cfg).expect("decoder runs");
    assert_eq!(tape.shape(attn), &[n, 1, t]);
    max_abs_diff(tape.value(attn), &literal_decoder(e0.data(), f.data(), n, t, c, layers))
}

/// Attention weights for a random shape; returns the largest row-sum error.
pub fn attention_row_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..5);
    let c = heads * 4 * rng.random_range(1..5);
    let (tq, tk) = (rng.random_range(1..20), rng.random_range(1..40));
    let model = SegModel::<f64>::new(ModelConfig::new(c, 1, heads, 2, 2, 16), seed).expect("valid config");
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let scale = rng.random_range(0.1..20.0);
    let q = tape.constant(&Tensor::randn(&[tq, c], scale, &mut rng));
    let kv = tape.constant(&Tensor::randn(&[tk, c], scale, &mut rng));
    let (_, w) = multi_head_attention(&mut tape, &vars.scope("encoder.layer0.attn"), q, kv, heads).unwrap();
    assert_eq!(tape.shape(w), &[heads, tq, tk]);
    tape.value(w).chunks(tk).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

/// Scores counted pixel by pixel: `(acc, per-class IoU, mIoU)`.
pub struct BruteScores {
    pub acc: f64,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn brute_scores(pred: &[u8], truth: &[u8], n: usize) -> BruteScores {
    let scored: Vec<(u8, u8)> = pred.iter().zip(truth).filter(|(_, &t)| t != IGNORE).map(|(&p, &t)| (p, t)).collect();
    let correct = scored.iter().filter(|(p, t)| p == t).count();
    let iou: Vec<Option<f64>> = (0..n as u8)
        .map(|c| {
            let inter = scored.iter().filter(|&&(p, t)| p == c && t == c).count();
            let union = scored.iter().filter(|&&(p, t)| p == c || t == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    BruteScores {
        acc: correct as f64 / scored.len() as f64,
        miou: present.iter().sum::<f64>() / present.len() as f64,
        iou,
    }
}

/// Random `size x size` mask pair over `n` classes with some ignore pixels in
/// the truth.
pub fn random_mask_pair(rng: &mut ChaCha8Rng, size: usize, n: usize) -> (MaskImage, MaskImage) {
    let truth: Vec<u8> =
        (0..size * size).map(|_| if rng.random_bool(0.05) { IGNORE } else { rng.random_range(0..n) as u8 }).collect();
    let pred: Vec<u8> = (0..size * size).map(|_| rng.random_range(0..n) as u8).collect();
    (MaskImage::new(size, size, pred).unwrap(), MaskImage::new(size, size, truth).unwrap())
}

/// Mask with a few random discs and random-walk strokes of classes `1..n`.
pub fn blob_mask(rng: &mut ChaCha8Rng, size: usize, n: usize) -> MaskImage {
    let mut m = MaskImage::filled(size, size, 0);
    for _ in 0..rng.random_range(1..7) {
        let class = rng.random_range(1..n) as u8;
        let (cx, cy) = (rng.random_range(0..size) as isize, rng.random_range(0..size) as isize);
        if rng.random_bool(0.5) {
            let r = rng.random_range(1i32..5) as isize;
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    if (x - cx).pow(2) + (y - cy).pow(2) <= r * r && in_bounds(x, y, size) {
                        m.set(x as usize, y as usize, class);
                    }
                }
            }
        } else {
            let (mut x, mut y) = (cx, cy);
            for _ in 0..rng.random_range(3..30) {
                if in_bounds(x, y, size) {
                    m.set(x as usize, y as usize, class);
                }
                x += rng.random_range(-1i32..=1) as isize;
                y += rng.random_range(-1i32..=1) as isize;
            }
        }
    }
    m
}

fn in_bounds(x: isize, y: isize, size: usize) -> bool {
    x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components of `class` by union-find over neighbor pairs.
pub fn union_find_components(mask: &MaskImage, class: u8) -> usize {
    let (w, h) = (mask.width(), mask.height());
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) != class {
                continue;
            }
            for (dx, dy) in [(1isize, 0isize), (0, 1), (1, 1), (-1, 1)] {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                let inside = nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h;
                if inside && mask.get(nx as usize, ny as usize) == class {
                    let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, ny as usize * w + nx as usize));
                    parent[a] = b;
                }
            }
        }
    }
    (0..w * h).filter(|&i| mask.labels()[i] == class && find(&mut parent, i) == i).count()
}

/// CMCC from the union-find component count.
pub fn oracle_cmcc(masks: &[MaskImage], class: u8) -> Option<f64> {
    let images = masks.iter().filter(|m| m.labels().contains(&class)).count();
    let comps: usize = masks.iter().map(|m| union_find_components(m, class)).sum();
    (images > 0).then(|| comps as f64 / images as f64)
}
