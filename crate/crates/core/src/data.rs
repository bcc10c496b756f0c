//! Dataset manifests for MVTec-AD- and VisA-style trees, sample loading,
//! batching and the 2×2 mosaic augmentation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{resize_and_crop, ImageTensor};
use crate::error::{precondition, shape, Error, Result};
use crate::resample;
use crate::Mask;

pub mod synthetic;

/// The fifteen MVTec AD categories.
pub const MVTEC_CATEGORIES: [&str; 15] = [
    "carpet",
    "grid",
    "leather",
    "tile",
    "wood",
    "bottle",
    "cable",
    "capsule",
    "hazelnut",
    "metal_nut",
    "pill",
    "screw",
    "toothbrush",
    "transistor",
    "zipper",
];

/// The twelve VisA categories.
pub const VISA_CATEGORIES: [&str; 12] = [
    "candle",
    "capsules",
    "cashew",
    "chewinggum",
    "fryum",
    "macaroni1",
    "macaroni2",
    "pcb1",
    "pcb2",
    "pcb3",
    "pcb4",
    "pipe_fryum",
];

/// Mask pixels at or above this 8-bit value are anomalous.
pub const MASK_THRESHOLD: u8 = 128;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Mvtec,
    Visa,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mvtec" => Ok(Self::Mvtec),
            "visa" => Ok(Self::Visa),
            other => Err(precondition(format!(
                "unknown dataset layout {other:?} (mvtec|visa)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub category: String,
    pub split: Split,
    /// `"good"` for normal samples.
    pub defect_type: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub label: u8,
}

impl SampleRecord {
    pub fn is_normal(&self) -> bool {
        self.label == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub layout: Layout,
    pub categories: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn select(&self, category: Option<&str>, split: Split) -> Vec<SampleRecord> {
        self.samples
            .iter()
            .filter(|s| s.split == split && category.is_none_or(|c| s.category == c))
            .cloned()
            .collect()
    }
}

/// Probes `root` for a VisA split CSV, falling back to the MVTec tree layout.
pub fn detect_layout(root: &Path) -> Layout {
    if visa_csv(root).is_file() {
        Layout::Visa
    } else {
        Layout::Mvtec
    }
}

fn visa_csv(root: &Path) -> PathBuf {
    root.join("split_csv").join("1cls.csv")
}

/// Scans a dataset tree into a manifest ordered by category, split, defect
/// type and file name.
pub fn scan_dataset(root: &Path, layout: Option<Layout>) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Manifest {
            message: "dataset root is not a directory".into(),
            paths: vec![root.to_path_buf()],
        });
    }
    let layout = layout.unwrap_or_else(|| detect_layout(root));
    let mut samples = match layout {
        Layout::Mvtec => scan_mvtec(root)?,
        Layout::Visa => scan_visa(root)?,
    };
    samples.sort_by(|a, b| {
        (&a.category, a.split, &a.defect_type, &a.image_path).cmp(&(
            &b.category,
            b.split,
            &b.defect_type,
            &b.image_path,
        ))
    });

    let missing_images: Vec<PathBuf> = samples
        .iter()
        .filter(|s| !s.image_path.is_file())
        .map(|s| s.image_path.clone())
        .collect();
    if !missing_images.is_empty() {
        return Err(Error::Manifest {
            message: "image files do not exist".into(),
            paths: missing_images,
        });
    }
    let missing_masks: Vec<PathBuf> = samples
        .iter()
        .filter(|s| s.label == 1 && !s.mask_path.as_deref().is_some_and(Path::is_file))
        .map(|s| s.mask_path.clone().unwrap_or_else(|| s.image_path.clone()))
        .collect();
    if !missing_masks.is_empty() {
        return Err(Error::Manifest {
            message: "anomalous samples without a ground-truth mask".into(),
            paths: missing_masks,
        });
    }

    let categories: BTreeSet<String> = samples.iter().map(|s| s.category.clone()).collect();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        layout,
        categories: categories.into_iter().collect(),
        samples,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn scan_mvtec(root: &Path) -> Result<Vec<SampleRecord>> {
    let mut samples = Vec::new();
    for cat_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let category = file_name(&cat_dir);
        for (split, split_name) in [(Split::Train, "train"), (Split::Test, "test")] {
            let split_dir = cat_dir.join(split_name);
            if !split_dir.is_dir() {
                continue;
            }
            for defect_dir in sorted_entries(&split_dir)?
                .into_iter()
                .filter(|p| p.is_dir())
            {
                let defect_type = file_name(&defect_dir);
                let label = u8::from(defect_type != "good");
                for image_path in sorted_entries(&defect_dir)?
                    .into_iter()
                    .filter(|p| is_image(p))
                {
                    let mask_path = (label == 1).then(|| {
                        let stem = image_path.file_stem().unwrap_or_default().to_string_lossy();
                        cat_dir
                            .join("ground_truth")
                            .join(&defect_type)
                            .join(format!("{stem}_mask.png"))
                    });
                    samples.push(SampleRecord {
                        category: category.clone(),
                        split,
                        defect_type: defect_type.clone(),
                        image_path,
                        mask_path,
                        label,
                    });
                }
            }
        }
    }
    Ok(samples)
}

#[derive(Debug, Deserialize)]
struct VisaRow {
    object: String,
    split: String,
    label: String,
    image: String,
    #[serde(default)]
    mask: Option<String>,
}

fn scan_visa(root: &Path) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::Reader::from_path(visa_csv(root))?;
    let mut samples = Vec::new();
    for row in reader.deserialize::<VisaRow>() {
        let row = row?;
        let split = match row.split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(precondition(format!("unknown VisA split {other:?}"))),
        };
        let label = match row.label.as_str() {
            "normal" => 0,
            "anomaly" => 1,
            other => return Err(precondition(format!("unknown VisA label {other:?}"))),
        };
        samples.push(SampleRecord {
            category: row.object,
            split,
            defect_type: if label == 0 {
                "good".into()
            } else {
                "bad".into()
            },
            image_path: root.join(&row.image),
            mask_path: row
                .mask
                .filter(|m| !m.is_empty() && label == 1)
                .map(|m| root.join(m)),
            label,
        });
    }
    Ok(samples)
}

pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| f32::from(v) / 255.0)
        .collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb8 buffer size"))
}

/// Loads a grayscale mask, binarized at [`MASK_THRESHOLD`].
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| u8::from(v >= MASK_THRESHOLD))
        .collect();
    Ok(Mask::from_shape_vec((h as usize, w as usize), data).expect("luma8 buffer size"))
}

/// Same geometry as [`resize_and_crop`], nearest-neighbour so the mask stays binary.
pub fn resize_and_crop_mask(mask: &Mask, side: usize) -> Mask {
    let (h, w) = mask.dim();
    let (rh, rw) = if h <= w {
        (
            side,
            ((w * side) as f64 / h as f64).round().max(side as f64) as usize,
        )
    } else {
        (
            ((h * side) as f64 / w as f64).round().max(side as f64) as usize,
            side,
        )
    };
    let resized = resample::nearest(mask.view(), rh, rw);
    let top = (rh - side) / 2;
    let left = (rw - side) / 2;
    resized
        .slice(s![top..top + side, left..left + side])
        .to_owned()
}

/// An image preprocessed to the model side with its aligned mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub mask: Mask,
    pub label: u8,
}

impl Sample {
    pub fn load(record: &SampleRecord, side: usize) -> Result<Self> {
        let pixels = load_image(&record.image_path)?;
        let (h, w, _) = pixels.dim();
        let mask = match (&record.mask_path, record.label) {
            (Some(p), 1) => {
                let m = load_mask(p)?;
                let m = if m.dim() == (h, w) {
                    m
                } else {
                    resample::nearest(m.view(), h, w)
                };
                resize_and_crop_mask(&m, side)
            }
            _ => Mask::zeros((side, side)),
        };
        Ok(Self {
            image: ImageTensor::new(
                resize_and_crop(pixels.view(), side),
                record.category.clone(),
            )?,
            mask,
            label: record.label,
        })
    }
}

/// Random-access sample provider for training and batching.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn category(&self, index: usize) -> &str;

    /// Sample `index` preprocessed to `side × side`.
    fn load(&self, index: usize, side: usize) -> Result<Sample>;
}

#[derive(Debug, Clone, Default)]
pub struct InMemorySamples(Vec<Sample>);

impl InMemorySamples {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self(samples)
    }
}

impl SampleSource for InMemorySamples {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn category(&self, index: usize) -> &str {
        &self.0[index].image.category
    }

    fn load(&self, index: usize, side: usize) -> Result<Sample> {
        let s = &self.0[index];
        if s.image.height() == side && s.image.width() == side && s.mask.dim() == (side, side) {
            return Ok(s.clone());
        }
        Ok(Sample {
            image: s.image.preprocess(side),
            mask: resize_and_crop_mask(&s.mask, side),
            label: s.label,
        })
    }
}

/// Samples read from disk on demand.
#[derive(Debug, Clone)]
pub struct RecordSource(pub Vec<SampleRecord>);

impl SampleSource for RecordSource {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn category(&self, index: usize) -> &str {
        &self.0[index].category
    }

    fn load(&self, index: usize, side: usize) -> Result<Sample> {
        Sample::load(&self.0[index], side)
    }
}

/// Tiles four equally sized samples 2×2 in reading order: 0 top-left,
/// 1 top-right, 2 bottom-left, 3 bottom-right. No resizing.
pub fn tile_2x2(four: &[Sample]) -> Result<(Array3<f32>, Mask)> {
    if four.len() != 4 {
        return Err(precondition(format!(
            "mosaic needs 4 samples, got {}",
            four.len()
        )));
    }
    let category = &four[0].image.category;
    if four.iter().any(|s| &s.image.category != category) {
        return Err(precondition("mosaic samples must share one category"));
    }
    let (h, w, _) = four[0].image.pixels.dim();
    if four
        .iter()
        .any(|s| s.image.pixels.dim() != (h, w, 3) || s.mask.dim() != (h, w))
    {
        return Err(shape("mosaic samples must share one image and mask size"));
    }
    let mut pixels = Array3::<f32>::zeros((2 * h, 2 * w, 3));
    let mut mask = Mask::zeros((2 * h, 2 * w));
    for (k, sample) in four.iter().enumerate() {
        let (r0, c0) = ((k / 2) * h, (k % 2) * w);
        pixels
            .slice_mut(s![r0..r0 + h, c0..c0 + w, ..])
            .assign(&sample.image.pixels);
        mask.slice_mut(s![r0..r0 + h, c0..c0 + w])
            .assign(&sample.mask);
    }
    Ok((pixels, mask))
}

/// 2×2 composite resized back to `side` (bilinear image, nearest mask).
pub fn mosaic_tile(four: &[Sample], side: usize) -> Result<(Array3<f32>, Mask)> {
    let (pixels, mask) = tile_2x2(four)?;
    let pixels = resample::resize_image(pixels.view(), side, side).mapv(|v| v.clamp(0.0, 1.0));
    let mask = resample::nearest(mask.view(), side, side);
    Ok((pixels, mask))
}

/// With probability `p` returns the resized 2×2 mosaic of the four samples
/// (label = any anomalous); otherwise the first sample unchanged.
pub fn mosaic_augment(four: &[Sample], p: f64, rng: &mut impl Rng) -> Result<Sample> {
    if !(0.0..=1.0).contains(&p) {
        return Err(precondition(format!(
            "mosaic probability {p} not in [0, 1]"
        )));
    }
    let (first_image, side) = match four.first() {
        Some(s) => (s, s.image.height()),
        None => return Err(precondition("mosaic needs 4 samples, got 0")),
    };
    // validate eagerly so a disabled draw still rejects mixed categories
    tile_2x2(four)?;
    if p == 0.0 || rng.random::<f64>() >= p {
        return Ok(first_image.clone());
    }
    let (pixels, mask) = mosaic_tile(four, side)?;
    Ok(Sample {
        image: ImageTensor::new(pixels, first_image.image.category.clone())?,
        mask,
        label: four.iter().any(|s| s.label != 0) as u8,
    })
}

/// Batch index lists for one pass, shuffled by `seed`; the last batch may be short.
pub fn batch_order(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(precondition("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<ImageTensor>,
    pub masks: Vec<Mask>,
    pub categories: Vec<String>,
}

/// Streams seeded-shuffled batches, loading samples lazily.
pub fn iterate_batches<'a>(
    source: &'a dyn SampleSource,
    batch_size: usize,
    shuffle_seed: u64,
    side: usize,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let order = batch_order(source.len(), batch_size, shuffle_seed)?;
    Ok(order.into_iter().map(move |indices| {
        let mut batch = Batch {
            images: Vec::with_capacity(indices.len()),
            masks: Vec::with_capacity(indices.len()),
            categories: Vec::with_capacity(indices.len()),
        };
        for i in indices {
            let s = source.load(i, side)?;
            batch.categories.push(s.image.category.clone());
            batch.images.push(s.image);
            batch.masks.push(s.mask);
        }
        Ok(batch)
    }))
}

/// Converts a binary mask to a displayable 0/255 grayscale plane.
pub fn mask_to_gray(mask: &Mask) -> Array2<u8> {
    mask.mapv(|v| if v != 0 { 255 } else { 0 })
}
