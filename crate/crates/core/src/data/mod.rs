//! Samples, masks, dataset I/O, the synthetic corpus, metrics and corpus
//! statistics.

pub mod metrics;
pub mod stats;
pub mod synth;

use std::fs;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use metrics::ConfusionMatrix;
pub use synth::synth_dataset;

/// Mask value for pixels excluded from training and scoring.
pub const IGNORE: u8 = 255;

/// Display colors indexed by class id; class 0 is background.
pub const PALETTE: [[u8; 3]; 12] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
];

/// Category names of the transparent-object taxonomy, ids 1..=11.
pub const TRANSPARENT_CATEGORIES: [&str; 11] =
    ["shelf", "door", "wall", "box", "freezer", "window", "cup", "bottle", "jar", "bowl", "eyeglass"];

/// A per-pixel class-id map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::dim(format!("{width}x{height} mask given {} labels", labels.len())));
        }
        Ok(MaskImage { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        MaskImage { width, height, labels: vec![class; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.labels[y * self.width + x] = class;
    }

    /// Errors if any non-ignore label is `>= num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
            Some(v) => Err(Error::Data(format!("mask value {v} outside 0..{num_classes}"))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour subsampling by an integer factor, taking the pixel
    /// at offset `factor / 2` inside each block.
    pub fn downsample(&self, factor: usize) -> Result<MaskImage> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::dim(format!(
                "{}x{} mask cannot be downsampled by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let off = factor / 2;
        let labels = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| self.get(x * factor + off, y * factor + off))
            .collect();
        MaskImage::new(w, h, labels)
    }

    /// Nearest-neighbour resize with half-pixel centers.
    pub fn resize_nearest(&self, width: usize, height: usize) -> MaskImage {
        let img = self.to_gray();
        let out = imageops::resize(&img, width as u32, height as u32, FilterType::Nearest);
        MaskImage { width, height, labels: out.into_raw() }
    }

    /// Labels as training targets.
    pub fn targets(&self) -> Vec<usize> {
        self.labels.iter().map(|&v| v as usize).collect()
    }

    fn to_gray(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("mask buffer matches its dims")
    }

    /// Lossless 8-bit grayscale PNG bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_gray()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("encoding mask: {e}")))?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<MaskImage> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("decoding mask: {e}")))?;
        Self::from_dynamic(img, Path::new("<memory>"))
    }

    fn from_dynamic(img: image::DynamicImage, path: &Path) -> Result<MaskImage> {
        match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Ok(MaskImage { width: w as usize, height: h as usize, labels: g.into_raw() })
            }
            other => Err(Error::Data(format!(
                "{}: masks must be 8-bit single-channel PNGs, got {:?}",
                path.display(),
                other.color()
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<MaskImage> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        Self::from_dynamic(img, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Color-coded RGB rendering through [`PALETTE`].
    /// Writes the [`MaskImage::colorize`] rendering as an RGB PNG.
    pub fn save_color(&self, path: &Path) -> Result<()> {
        self.colorize()?.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn colorize(&self) -> Result<RgbImage> {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (px, &v) in out.pixels_mut().zip(&self.labels) {
            let color = PALETTE
                .get(v as usize)
                .ok_or_else(|| Error::Data(format!("class {v} has no palette color")))?;
            *px = Rgb(*color);
        }
        Ok(out)
    }
}

/// An RGB image in `[0, 1]` with its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`.
    pub image: Tensor<f32>,
    pub mask: MaskImage,
    pub scene: Option<String>,
    pub stem: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: MaskImage, stem: impl Into<String>) -> Result<Self> {
        match image.shape() {
            &[3, h, w] if h == mask.height() && w == mask.width() => {}
            s => {
                return Err(Error::Data(format!(
                    "image {s:?} and {}x{} mask differ in size",
                    mask.width(),
                    mask.height()
                )))
            }
        }
        Ok(Sample { image, mask, scene: None, stem: stem.into() })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.width(), self.mask.height())
    }

    /// Bilinear image / nearest mask resize to a square side.
    pub fn resized(&self, side: usize) -> Sample {
        if self.size() == (side, side) {
            return self.clone();
        }
        Sample {
            image: resize_image(&self.image, side, side),
            mask: self.mask.resize_nearest(side, side),
            scene: self.scene.clone(),
            stem: self.stem.clone(),
        }
    }

    /// Writes `images/<stem>.png` and `masks/<stem>.png` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let img_path = dir.join("images").join(format!("{}.png", self.stem));
        tensor_to_rgb(&self.image).save(&img_path).map_err(|source| Error::Image { path: img_path, source })?;
        self.mask.save(&dir.join("masks").join(format!("{}.png", self.stem)))
    }
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let px = |c: usize| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Bilinear (triangle filter) resize of a `[3, H, W]` image.
pub fn resize_image(image: &Tensor<f32>, width: usize, height: usize) -> Tensor<f32> {
    let rgb = imageops::resize(&tensor_to_rgb(image), width as u32, height as u32, FilterType::Triangle);
    rgb_to_tensor(&rgb)
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads `dir/images/*.png` with matching `dir/masks/*.png`, sorted by stem.
///
/// A directory without `images/` yields no samples.
pub fn load_split(dir: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let images = dir.join("images");
    if !images.is_dir() {
        return Ok(Vec::new());
    }
    let masks = dir.join("masks");
    png_stems(&images)?
        .into_iter()
        .map(|stem| {
            let mask_path = masks.join(format!("{stem}.png"));
            if !mask_path.is_file() {
                return Err(Error::Data(format!("no mask for image `{stem}` (expected {})", mask_path.display())));
            }
            let image = load_image(&images.join(format!("{stem}.png")))?;
            let mask = MaskImage::load(&mask_path)?;
            mask.validate(num_classes).map_err(|e| Error::Data(format!("`{stem}`: {e}")))?;
            Sample::new(image, mask, stem.clone()).map_err(|e| Error::Data(format!("`{stem}`: {e}")))
        })
        .collect()
}

/// Loads one split (`train`, `val` or `test`) of a dataset root.
pub fn load_dataset(root: &Path, split: &str, num_classes: usize) -> Result<Vec<Sample>> {
    load_split(&root.join(split), num_classes)
}

/// Writes samples in the on-disk layout read by [`load_split`].
pub fn save_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    samples.iter().try_for_each(|s| s.save(dir))
}
