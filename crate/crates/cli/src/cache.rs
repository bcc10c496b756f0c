//! On-disk feature cache keyed by backbone fingerprint and preprocessed
//! pixels, enabled by the `ADKIT_CACHE` directory variable.

use std::path::PathBuf;

use adkit_core::backbone::{Backbone, ClassEmbedding, Features, ImageTensor, PatchFeatureGrid};
use adkit_core::container::Container;
use adkit_core::Result;
use ndarray::{Array1, Array3};
use sha2::{Digest, Sha256};

pub const CACHE_ENV: &str = "ADKIT_CACHE";

#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    dir: Option<PathBuf>,
}

impl FeatureCache {
    pub fn from_env() -> Self {
        Self {
            dir: std::env::var_os(CACHE_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from),
        }
    }

    pub fn disabled() -> Self {
        Self { dir: None }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
        }
    }

    /// Cached features when present and readable, otherwise extracts and
    /// stores them. Cached values are bit-identical to fresh ones.
    pub fn extract(&self, backbone: &dyn Backbone, image: &ImageTensor) -> Result<Features> {
        let Some(dir) = &self.dir else {
            return backbone.extract(image);
        };
        let path = dir.join(format!("{}.adkh", key(backbone, image)));
        if let Ok(features) = Container::read(&path).and_then(|c| decode(&c)) {
            return Ok(features);
        }
        let features = backbone.extract(image)?;
        std::fs::create_dir_all(dir)?;
        encode(&features)?.write(&path)?;
        Ok(features)
    }
}

fn key(backbone: &dyn Backbone, image: &ImageTensor) -> String {
    let mut h = Sha256::new();
    h.update(backbone.fingerprint().as_bytes());
    h.update([0]);
    for d in image.pixels.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in image.pixels.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(f: &Features) -> Result<Container> {
    let mut c = Container::new().with_metadata("kind", "features");
    let class = f.class_embedding.as_array();
    c.push("class", vec![class.len()], class.to_vec())?;
    for g in &f.stages {
        let (h, w, ch) = g.grid.dim();
        c.push(
            format!("stage{}", g.stage),
            vec![h, w, ch],
            g.grid.iter().copied().collect(),
        )?;
    }
    Ok(c)
}

fn decode(c: &Container) -> Result<Features> {
    let class = ClassEmbedding::from_unit(Array1::from(c.require("class")?.data.clone()))?;
    let mut stages = Vec::new();
    for t in c.tensors().iter().filter(|t| t.name.starts_with("stage")) {
        let stage: usize = t.name["stage".len()..]
            .parse()
            .map_err(|_| adkit_core::Error::Shape(format!("bad tensor name {}", t.name)))?;
        let grid = Array3::from_shape_vec((t.shape[0], t.shape[1], t.shape[2]), t.data.clone())
            .map_err(|e| adkit_core::Error::Shape(e.to_string()))?;
        stages.push(PatchFeatureGrid::new(stage, grid)?);
    }
    stages.sort_by_key(|g| g.stage);
    Ok(Features {
        class_embedding: class,
        stages,
    })
}
