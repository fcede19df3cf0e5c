//! Seeded synthetic corpus of "transparent" shapes over textured backgrounds.
//!
//! Each category has a fixed shape family. Objects are composited as a weak
//! tint over a refracted (shifted) copy of the background with a darker
//! outline, so most of an object's appearance is its surroundings.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MaskImage, Sample};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::Tensor;

/// Shape family names, indexed by `(class - 1) % 11`.
pub const SHAPE_FAMILIES: [&str; 11] =
    ["disk", "square", "triangle", "ring", "cross", "diamond", "ellipse", "hexagon", "frame", "crescent", "star"];

/// Blend weight of the object tint over the refracted background.
pub const OBJECT_ALPHA: f64 = 0.45;

/// Brightness factor of the one-pixel outline where light bends at the edge.
pub const RIM_SHADE: f64 = 0.55;

/// Display name of a synthetic class id.
pub fn class_name(class: usize) -> &'static str {
    if class == 0 {
        "background"
    } else {
        SHAPE_FAMILIES[(class - 1) % SHAPE_FAMILIES.len()]
    }
}

/// Lens factor of a class: the interior shows the background scaled by this
/// factor about the object center.
fn magnification(class: usize) -> f64 {
    [0.55, 1.6, 0.8, 1.25, 0.65, 1.4][(class - 1) % 6]
}

/// Tint of a class, spread around the hue circle.
fn tint(class: usize, num_classes: usize) -> [f64; 3] {
    let hue = (class - 1) as f64 / (num_classes - 1).max(1) as f64;
    let c = |shift: f64| 0.5 + 0.5 * (2.0 * PI * (hue + shift)).cos();
    [c(0.0), c(1.0 / 3.0), c(2.0 / 3.0)]
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.angle.sin_cos();
        // Coordinates in the shape frame, scaled to unit radius.
        let u = (dx * c + dy * s) / self.radius;
        let v = (-dx * s + dy * c) / self.radius;
        let d = (u * u + v * v).sqrt();
        match (self.class - 1) % SHAPE_FAMILIES.len() {
            0 => d < 1.0,
            1 => u.abs() < 0.8 && v.abs() < 0.8,
            2 => {
                // Equilateral triangle with circumradius 1.
                v < 0.5 && v > -1.0 + 3f64.sqrt() * u.abs()
            }
            3 => d < 1.0 && d > 0.55,
            4 => (u.abs() < 0.3 && v.abs() < 1.0) || (v.abs() < 0.3 && u.abs() < 1.0),
            5 => u.abs() + v.abs() < 1.0,
            6 => u * u + (v / 0.5) * (v / 0.5) < 1.0,
            7 => (u.abs() * 3f64.sqrt() / 2.0 + v.abs() / 2.0).max(v.abs()) < 0.9,
            8 => u.abs().max(v.abs()) < 0.85 && u.abs().max(v.abs()) > 0.45,
            9 => d < 1.0 && ((u - 0.45).powi(2) + v * v).sqrt() > 0.75,
            _ => {
                let theta = v.atan2(u);
                d < 0.55 + 0.45 * (5.0 * theta).cos()
            }
        }
    }
}

/// Smooth textured background: a near-gray base, a few colored gratings and
/// mild noise.
fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<[f64; 3]> {
    let gray = rng.random_range(0.3..0.7);
    let base: [f64; 3] = std::array::from_fn(|_| gray + rng.random_range(-0.05..0.05));
    let gratings: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let freq = rng.random_range(1.0..4.0) * 2.0 * PI / size as f64;
            let dir = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let luma = rng.random_range(-0.12..0.12);
            let amp = std::array::from_fn(|_| luma + rng.random_range(-0.03..0.03));
            (freq * dir.cos(), freq * dir.sin(), phase, amp)
        })
        .collect();
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            let mut px = base;
            for (fx, fy, phase, amp) in &gratings {
                let s = (fx * x + fy * y + phase).sin();
                for c in 0..3 {
                    px[c] += amp[c] * s;
                }
            }
            for v in px.iter_mut() {
                *v += rng.random_range(-0.03..0.03);
            }
            px
        })
        .collect()
}

fn render(seed: u64, index: usize, size: usize, num_classes: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let bg = background(&mut rng, size);
    let categories = num_classes - 1;
    let s = size as f64;

    let count = rng.random_range(1..=3);
    let shapes: Vec<Shape> = (0..count)
        .map(|k| {
            // The topmost object cycles through every category.
            let class = if k + 1 == count {
                1 + (index + seed as usize % categories) % categories
            } else {
                rng.random_range(1..num_classes)
            };
            let radius = rng.random_range(0.18..0.3) * s;
            Shape {
                class,
                cx: rng.random_range(radius * 0.8..s - radius * 0.8),
                cy: rng.random_range(radius * 0.8..s - radius * 0.8),
                radius,
                angle: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();
    let shift: Vec<(isize, isize)> = shapes
        .iter()
        .map(|_| (rng.random_range(-3..=3i32) as isize, rng.random_range(-3..=3i32) as isize))
        .collect();

    let mut mask = MaskImage::filled(size, size, 0);
    let mut pixels = bg.clone();
    for (shape, &(sx, sy)) in shapes.iter().zip(&shift) {
        let color = tint(shape.class, num_classes);
        let inside: Vec<bool> =
            (0..size * size).map(|i| shape.contains((i % size) as f64 + 0.5, (i / size) as f64 + 0.5)).collect();
        for y in 0..size {
            for x in 0..size {
                if !inside[y * size + x] {
                    continue;
                }
                let k = magnification(shape.class);
                let lx = shape.cx + (x as f64 + 0.5 - shape.cx) / k;
                let ly = shape.cy + (y as f64 + 0.5 - shape.cy) / k;
                let rx = (lx.floor() as isize + sx).clamp(0, size as isize - 1) as usize;
                let ry = (ly.floor() as isize + sy).clamp(0, size as isize - 1) as usize;
                let seen = bg[ry * size + rx];
                let rim = [(0, 1), (2, 1), (1, 0), (1, 2)].iter().any(|&(dx, dy)| {
                    let (nx, ny) = ((x + dx).wrapping_sub(1), (y + dy).wrapping_sub(1));
                    nx >= size || ny >= size || !inside[ny * size + nx]
                });
                let shade = if rim { RIM_SHADE } else { 1.0 };
                let px = &mut pixels[y * size + x];
                for c in 0..3 {
                    px[c] = shade * ((1.0 - OBJECT_ALPHA) * seen[c] + OBJECT_ALPHA * color[c]);
                }
                mask.set(x, y, shape.class as u8);
            }
        }
    }

    let plane = size * size;
    let image = Tensor::from_fn(&[3, size, size], |i| pixels[i % plane][i / plane].clamp(0.0, 1.0) as f32);
    Sample { image, mask, scene: Some("synthetic".into()), stem: format!("synth_{index:05}") }
}

/// `count` samples of `size x size`, bit-identical for equal arguments.
pub fn synth_dataset(seed: u64, count: usize, size: usize, num_classes: usize) -> Result<Vec<Sample>> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::dim(format!("synthetic image size {size} is not a positive multiple of 16")));
    }
    if !(2..=255).contains(&num_classes) {
        return Err(Error::Config(format!("synthetic corpus needs 2..=255 classes, got {num_classes}")));
    }
    Ok(Exec::default().map_range(count, |i| render(seed, i, size, num_classes)))
}

/// One generated corpus of `train + val` samples split in index order.
pub fn synth_splits(
    seed: u64,
    train: usize,
    val: usize,
    size: usize,
    num_classes: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut all = synth_dataset(seed, train + val, size, num_classes)?;
    let val_set = all.split_off(train);
    Ok((all, val_set))
}
