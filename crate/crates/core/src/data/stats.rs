//! Per-category corpus statistics: image counts, mean connected components
//! per image containing the category (CMCC), and share of foreground pixels.

use std::collections::VecDeque;

use super::{MaskImage, IGNORE};
use crate::error::{Error, Result};

/// Number of 8-connected regions of `class` in `mask`.
pub fn connected_components(mask: &MaskImage, class: u8) -> usize {
    let (w, h) = (mask.width(), mask.height());
    let labels = mask.labels();
    let mut seen = vec![false; labels.len()];
    let mut queue = VecDeque::new();
    let mut count = 0;
    for start in 0..labels.len() {
        if seen[start] || labels[start] != class {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && labels[j] == class {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    count
}

/// Masks containing at least one pixel of `class`.
pub fn image_count(masks: &[MaskImage], class: u8) -> usize {
    masks.iter().filter(|m| m.labels().contains(&class)).count()
}

/// Total components of `class` divided by the number of masks containing it.
pub fn cmcc(masks: &[MaskImage], class: u8) -> Result<f64> {
    if masks.is_empty() {
        return Err(Error::Undefined("CMCC of an empty corpus".into()));
    }
    let images = image_count(masks, class);
    if images == 0 {
        return Err(Error::Undefined(format!("class {class} does not occur in the corpus")));
    }
    let components: usize = masks.iter().map(|m| connected_components(m, class)).sum();
    Ok(components as f64 / images as f64)
}

fn foreground_pixels(masks: &[MaskImage]) -> u64 {
    masks.iter().flat_map(|m| m.labels()).filter(|&&v| v != 0 && v != IGNORE).count() as u64
}

/// Pixels of `class` over all non-background, non-ignore pixels.
pub fn pixel_ratio(masks: &[MaskImage], class: u8) -> Result<f64> {
    let foreground = foreground_pixels(masks);
    if foreground == 0 {
        return Err(Error::Undefined("pixel ratio of a corpus without foreground pixels".into()));
    }
    let hits = masks.iter().flat_map(|m| m.labels()).filter(|&&v| v == class).count() as u64;
    Ok(hits as f64 / foreground as f64)
}

/// One category row of a corpus statistics table.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub class: u8,
    pub images: usize,
    /// `None` when the class never occurs.
    pub cmcc: Option<f64>,
    pub pixel_ratio: f64,
}

/// Rows for classes `1..num_classes`.
pub fn corpus_stats(masks: &[MaskImage], num_classes: usize) -> Result<Vec<ClassStats>> {
    if foreground_pixels(masks) == 0 {
        return Err(Error::Undefined("corpus has no foreground pixels".into()));
    }
    (1..num_classes)
        .map(|c| {
            let class = c as u8;
            Ok(ClassStats {
                class,
                images: image_count(masks, class),
                cmcc: cmcc(masks, class).ok(),
                pixel_ratio: pixel_ratio(masks, class)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(w: usize, h: usize) -> MaskImage {
        MaskImage::filled(w, h, 0)
    }

    fn square(m: &mut MaskImage, x0: usize, y0: usize, side: usize, class: u8) {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, class);
            }
        }
    }

    #[test]
    fn one_solid_square() {
        let mut m = blank(10, 10);
        square(&mut m, 2, 2, 4, 3);
        assert_eq!(cmcc(&[m], 3).unwrap(), 1.0);
    }

    #[test]
    fn averages_over_images_containing_the_class() {
        let mut a = blank(12, 12);
        square(&mut a, 0, 0, 2, 1);
        square(&mut a, 5, 5, 2, 1);
        square(&mut a, 9, 0, 2, 1);
        let mut b = blank(12, 12);
        square(&mut b, 4, 4, 3, 1);
        assert_eq!(cmcc(&[a.clone(), b.clone()], 1).unwrap(), 2.0);
        // An image without the class does not change the divisor.
        assert_eq!(cmcc(&[a, blank(12, 12), b], 1).unwrap(), 2.0);
    }

    #[test]
    fn diagonal_neighbours_join() {
        let m = MaskImage::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(connected_components(&m, 1), 1);
        assert_eq!(connected_components(&m, 0), 1);
    }

    #[test]
    fn absent_class_is_undefined() {
        assert!(matches!(cmcc(&[blank(3, 3)], 1), Err(Error::Undefined(_))));
        assert!(matches!(pixel_ratio(&[blank(3, 3)], 1), Err(Error::Undefined(_))));
    }

    #[test]
    fn pixel_ratio_split() {
        let mut labels = vec![0u8; 120];
        labels[..30].fill(1);
        labels[30..100].fill(2);
        labels[100..105].fill(IGNORE);
        let m = MaskImage::new(12, 10, labels).unwrap();
        assert!((pixel_ratio(std::slice::from_ref(&m), 1).unwrap() - 0.3).abs() < 1e-12);
        assert!((pixel_ratio(std::slice::from_ref(&m), 2).unwrap() - 0.7).abs() < 1e-12);

        let mut single = blank(4, 4);
        square(&mut single, 0, 0, 2, 5);
        assert_eq!(pixel_ratio(&[single], 5).unwrap(), 1.0);
    }
}
