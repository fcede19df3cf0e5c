//! Pixel accuracy, per-category IoU and mean IoU from a confusion matrix.

use super::{MaskImage, IGNORE};
use crate::error::{Error, Result};

/// `counts[t * n + p]` = pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { n: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::dim(format!("{} counts for {num_classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { n: num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose truth is not [`IGNORE`].
    pub fn accumulate(&mut self, pred: &MaskImage, truth: &MaskImage) -> Result<()> {
        if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
            return Err(Error::dim(format!(
                "prediction {}x{} and truth {}x{} differ",
                pred.width(),
                pred.height(),
                truth.width(),
                truth.height()
            )));
        }
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if t == IGNORE {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.n || p >= self.n {
                return Err(Error::Data(format!("label {} outside 0..{}", t.max(p), self.n)));
            }
            self.counts[t * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::dim(format!("merging {}-class and {}-class matrices", self.n, other.n)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Correct pixels over scored pixels.
    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Undefined("pixel accuracy of an empty confusion matrix".into()));
        }
        let correct: u64 = (0..self.n).map(|c| self.get(c, c)).sum();
        Ok(correct as f64 / total as f64)
    }

    /// `tp / (tp + fp + fn)` per class; `None` when the class has zero union.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.n).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with non-zero union (background included).
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::Undefined("mIoU of an empty confusion matrix".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    /// Classes left out of [`ConfusionMatrix::miou`].
    pub fn excluded_classes(&self) -> Vec<usize> {
        self.iou_per_class().iter().enumerate().filter(|(_, v)| v.is_none()).map(|(c, _)| c).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, labels: &[u8]) -> MaskImage {
        MaskImage::new(w, labels.len() / w, labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let m = mask(2, &[0, 1, 1, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&m, &m).unwrap();
        assert_eq!((cm.get(0, 1), cm.get(1, 0)), (0, 0));
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
        assert_eq!(cm.iou_per_class(), vec![Some(1.0), Some(1.0)]);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_two_class_matrix() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 2, 0, 0]).unwrap();
        assert_eq!(cm.pixel_accuracy().unwrap(), 0.5);
        assert_eq!(cm.iou_per_class(), vec![Some(0.5), Some(0.0)]);
        assert_eq!(cm.miou().unwrap(), 0.25);
    }

    #[test]
    fn constant_prediction_on_balanced_truth() {
        let truth = mask(2, &[0, 1, 0, 1]);
        let pred = mask(2, &[0, 0, 0, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.pixel_accuracy().unwrap(), 0.5);
    }

    #[test]
    fn ignored_truth_is_skipped() {
        let truth = mask(2, &[IGNORE; 4]);
        let pred = mask(2, &[1; 4]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert!(matches!(cm.pixel_accuracy(), Err(Error::Undefined(_))));
        assert!(matches!(cm.miou(), Err(Error::Undefined(_))));
    }

    #[test]
    fn zero_union_classes_are_excluded() {
        let truth = mask(2, &[0, 0, 1, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &truth).unwrap();
        assert_eq!(cm.excluded_classes(), vec![2]);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&mask(2, &[0, 0]), &mask(1, &[0, 0])).is_err());
    }
}
