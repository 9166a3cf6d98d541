//! Dataset layout, preprocessing, raster I/O and the procedural toy set.
//!
//! Directory convention (per category):
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/good/*.png
//! <root>/<category>/test/<defect>/*.png
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::compose;
use crate::error::{ensure_domain, Error, Result};
use crate::evaluation::EvalSet;
use crate::noise::perlin_noise_with_cells;
use crate::raster::{AnomalyMask, ImageTensor};
use crate::rng::{derive_seed, rng_for};
use crate::synthesis::{resize_bilinear, sample_anomaly_mask, ColorJitter, SynthesisConfig, TexturePool};

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestItem {
    pub image: PathBuf,
    /// `None` for `test/good`.
    pub defect: Option<String>,
    pub mask: Option<PathBuf>,
}

impl TestItem {
    pub fn is_anomalous(&self) -> bool {
        self.defect.is_some()
    }

    /// `<defect or good>/<file stem>`, unique within a category.
    pub fn id(&self) -> String {
        let stem = self.image.file_stem().unwrap_or_default().to_string_lossy();
        format!("{}/{stem}", self.defect.as_deref().unwrap_or("good"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub category: String,
    pub train: Vec<PathBuf>,
    pub test: Vec<TestItem>,
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_image(&p) {
            out.push(p);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// Walks and validates one category. Orderings are lexicographic by path
/// relative to the category directory.
pub fn load_dataset(root: &Path, category: &str) -> Result<DatasetLayout> {
    let base = root.join(category);
    if !base.is_dir() {
        return Err(Error::Validation(format!("category directory {} does not exist", base.display())));
    }
    let good = base.join("train").join("good");
    if !good.is_dir() {
        return Err(Error::Validation(format!("missing {}", good.display())));
    }
    let train = list_images(&good)?;
    if train.is_empty() {
        return Err(Error::Validation(format!("no training images in {}", good.display())));
    }
    let mut test = Vec::new();
    let mut missing = Vec::new();
    let test_dir = base.join("test");
    if test_dir.is_dir() {
        for dir in sorted_subdirs(&test_dir)? {
            let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for image in list_images(&dir)? {
                if name == "good" {
                    test.push(TestItem {
                        image,
                        defect: None,
                        mask: None,
                    });
                    continue;
                }
                let stem = image.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let gt_dir = base.join("ground_truth").join(&name);
                let mask = IMAGE_EXTENSIONS
                    .iter()
                    .map(|ext| gt_dir.join(format!("{stem}_mask.{ext}")))
                    .find(|p| p.is_file());
                if mask.is_none() {
                    missing.push(image.strip_prefix(&base).unwrap_or(&image).display().to_string());
                }
                test.push(TestItem {
                    image,
                    defect: Some(name.clone()),
                    mask,
                });
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "anomalous test images without a ground-truth mask: {}",
            missing.join(", ")
        )));
    }
    Ok(DatasetLayout {
        root: root.to_path_buf(),
        category: category.to_string(),
        train,
        test,
    })
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preprocessor {
    pub resize: u32,
    pub crop: u32,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self { resize: 256, crop: 224 }
    }
}

impl Preprocessor {
    pub fn new(resize: u32, crop: u32) -> Result<Self> {
        if crop == 0 || crop > resize {
            return Err(Error::Config(format!("crop {crop} must be in 1..={resize}")));
        }
        Ok(Self { resize, crop })
    }

    pub fn crop_offset(&self) -> u32 {
        (self.resize - self.crop) / 2
    }

    fn geometry<P: image::Pixel + 'static>(
        &self,
        img: &ImageBuffer<P, Vec<P::Subpixel>>,
        filter: FilterType,
    ) -> ImageBuffer<P, Vec<P::Subpixel>> {
        if img.width() == self.crop && img.height() == self.crop {
            return img.clone();
        }
        let resized = imageops::resize(img, self.resize, self.resize, filter);
        let o = self.crop_offset();
        imageops::crop_imm(&resized, o, o, self.crop, self.crop).to_image()
    }

    /// Bilinear resize, centre crop, `[0, 255] -> [-1, 1]`. Grayscale input
    /// is replicated to three channels; inputs already at crop size pass
    /// through untouched.
    pub fn image(&self, img: &DynamicImage) -> ImageTensor {
        let rgb = self.geometry(&img.to_rgb8(), FilterType::Triangle);
        rgb_to_tensor(&rgb)
    }

    /// Nearest-neighbour geometry; any nonzero pixel is anomalous.
    pub fn mask(&self, img: &DynamicImage) -> AnomalyMask {
        let g = self.geometry(&img.to_luma16(), FilterType::Nearest);
        AnomalyMask::from_fn(g.height() as usize, g.width() as usize, |y, x| {
            f64::from(g.get_pixel(x as u32, y as u32)[0] > 0)
        })
    }

    pub fn image_bytes(&self, bytes: &[u8]) -> Result<ImageTensor> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Image {
            path: PathBuf::from("<memory>"),
            source: e,
        })?;
        Ok(self.image(&img))
    }

    pub fn load_image(&self, path: &Path) -> Result<ImageTensor> {
        Ok(self.image(&open(path)?))
    }

    pub fn load_mask(&self, path: &Path) -> Result<AnomalyMask> {
        Ok(self.mask(&open(path)?))
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> ImageTensor {
    ImageTensor::from_fn(3, rgb.height() as usize, rgb.width() as usize, |c, y, x| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0
    })
}

fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// `[-1, 1]` image to 8-bit RGB (first channel repeated for grayscale).
pub fn tensor_to_rgb(img: &ImageTensor) -> RgbImage {
    let c = img.channels();
    RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let px = |k: usize| to_u8(img.get(k.min(c - 1), y, x));
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn save_dynamic(img: DynamicImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn save_image_png(img: &ImageTensor, path: &Path) -> Result<()> {
    save_dynamic(DynamicImage::ImageRgb8(tensor_to_rgb(img)), path)
}

/// 16-bit grayscale, `[0, 1] -> [0, 65535]`.
pub fn save_mask_png16(mask: &AnomalyMask, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([(mask.get(y as usize, x as usize).clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    save_dynamic(DynamicImage::ImageLuma16(buf), path)
}

pub fn save_mask_png8(mask: &AnomalyMask, path: &Path) -> Result<()> {
    let buf = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([(mask.get(y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    save_dynamic(DynamicImage::ImageLuma8(buf), path)
}

/// Reads a predicted map at any bit depth into `[0, 1]` without resizing.
pub fn load_score_map(path: &Path) -> Result<AnomalyMask> {
    let g = open(path)?.to_luma16();
    Ok(AnomalyMask::from_fn(g.height() as usize, g.width() as usize, |y, x| {
        g.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0
    }))
}

/// Loads every image of a directory tree as textures, resized to `size`.
pub fn load_texture_pool(dir: &Path, size: usize) -> Result<TexturePool> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if is_image(&p) {
                files.push(p);
            }
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!("no texture images under {}", dir.display())));
    }
    let textures = files
        .iter()
        .map(|f| Ok(resize_bilinear(&rgb_to_tensor(&open(f)?.to_rgb8()), size, size)))
        .collect::<Result<Vec<_>>>()?;
    TexturePool::new(textures)
}

// ---------------------------------------------------------------------------
// Procedural toy category
// ---------------------------------------------------------------------------

/// A woven-fabric texture: two crossing sinusoids over a base colour plus
/// faint low-frequency noise. Phase and shading vary per seed.
pub fn toy_normal(size: usize, seed: u64) -> Result<ImageTensor> {
    ensure_domain!(size >= 4, "toy images need size >= 4");
    let mut rng = rng_for(&[seed, 0xFAB]);
    let base = [0.15, -0.1, -0.45];
    let shade: f64 = rng.random_range(-0.08..0.08);
    let (py, px) = (rng.random_range(0.0..8.0), rng.random_range(0.0..8.0));
    let noise = perlin_noise_with_cells(size, size, rng.random(), 2, 2)?;
    let period = 8.0;
    Ok(ImageTensor::from_fn(3, size, size, |c, y, x| {
        let warp = ((x as f64 + px) / period * std::f64::consts::TAU).sin();
        let weft = ((y as f64 + py) / period * std::f64::consts::TAU).sin();
        let v = base[c] + shade + 0.25 * warp * weft + 0.08 * noise.get(y, x);
        v.clamp(-1.0, 1.0)
    }))
}

pub fn toy_train_set(count: usize, size: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    (0..count).map(|i| toy_normal(size, derive_seed(&[seed, i as u64]))).collect()
}

/// Held-out normals plus fully opaque synthetic defects whose appearance
/// comes from a texture pool disjoint from any training pool.
pub fn toy_test_set(n_normal: usize, n_anomalous: usize, size: usize, seed: u64) -> Result<EvalSet> {
    let pool = TexturePool::procedural(16, size, size, derive_seed(&[seed, 0x7E57]))?;
    let synth = SynthesisConfig {
        min_area: 0.03,
        max_area: 0.25,
        ..SynthesisConfig::default()
    };
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut gts = Vec::new();
    for i in 0..n_normal {
        ids.push(format!("good/{i:03}"));
        images.push(toy_normal(size, derive_seed(&[seed, 1, i as u64]))?);
        gts.push(None);
    }
    for i in 0..n_anomalous {
        let mut rng = rng_for(&[seed, 2, i as u64]);
        let normal = toy_normal(size, derive_seed(&[seed, 3, i as u64]))?;
        let (_, draw) = sample_anomaly_mask(size, size, &synth, &mut rng)?;
        let tex = &pool.textures()[rng.random_range(0..pool.len())];
        let appearance = ColorJitter::random_visible(&mut rng).apply(tex);
        ids.push(format!("defect/{i:03}"));
        images.push(compose(&normal, &appearance, &draw.mask, 1.0)?);
        gts.push(Some(draw.mask));
    }
    Ok(EvalSet { ids, images, gts })
}

/// Writes a toy category in the on-disk layout.
pub fn write_toy_dataset(
    root: &Path,
    category: &str,
    n_train: usize,
    n_test_normal: usize,
    n_test_anomalous: usize,
    size: usize,
    seed: u64,
) -> Result<()> {
    let base = root.join(category);
    for (i, img) in toy_train_set(n_train, size, seed)?.iter().enumerate() {
        save_image_png(img, &base.join("train/good").join(format!("{i:03}.png")))?;
    }
    let set = toy_test_set(n_test_normal, n_test_anomalous, size, derive_seed(&[seed, 0x7E5]))?;
    for ((id, img), gt) in set.ids.iter().zip(&set.images).zip(&set.gts) {
        save_image_png(img, &base.join("test").join(format!("{id}.png")))?;
        if let Some(m) = gt {
            let (defect, stem) = id.split_once('/').unwrap_or(("defect", id));
            save_mask_png8(m, &base.join("ground_truth").join(defect).join(format!("{stem}_mask.png")))?;
        }
    }
    Ok(())
}

/// Loads the test split into memory.
pub fn load_eval_set(layout: &DatasetLayout, pre: &Preprocessor) -> Result<EvalSet> {
    let mut set = EvalSet {
        ids: Vec::new(),
        images: Vec::new(),
        gts: Vec::new(),
    };
    for item in &layout.test {
        set.ids.push(item.id());
        set.images.push(pre.load_image(&item.image)?);
        set.gts.push(match &item.mask {
            Some(m) => Some(pre.load_mask(m)?),
            None => None,
        });
    }
    Ok(set)
}

pub fn load_train_images(layout: &DatasetLayout, pre: &Preprocessor) -> Result<Vec<ImageTensor>> {
    layout.train.iter().map(|p| pre.load_image(p)).collect()
}
