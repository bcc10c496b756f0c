//! The train, eval and predict pipelines. `eval` and `predict` share
//! [`Scorer::score`], so a predicted score equals the evaluated one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use adkit_clip::{ClipBackbone, ClipTextEncoder};
use adkit_core::backbone::{resize_and_crop, Backbone, ImageTensor, SyntheticBackbone};
use adkit_core::data::{
    load_image, scan_dataset, DatasetManifest, RecordSource, Sample, SampleRecord, Split,
};
use adkit_core::fewshot::{
    build_memory_banks, few_shot_result, load_banks, save_banks, MemoryBank,
};
use adkit_core::metrics::{
    aggregate_seeds, classification_metrics, segmentation_metrics, summarize, LabeledScores,
    MetricReport, SeedAggregate,
};
use adkit_core::prompts::{
    text_features_for, PromptEnsemble, SyntheticTextEncoder, TextEncoder, TextFeatureMatrix,
    DEFAULT_ABNORMAL_STATES, DEFAULT_NORMAL_STATES, DEFAULT_TEMPLATES,
};
use adkit_core::zeroshot::{
    classify_zero_shot, compute_anomaly_map, load_heads, save_heads, train_heads, AnomalyMap,
    ProjectionHead, TrainReport,
};
use adkit_core::Mask;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cache::FeatureCache;
use crate::config::{Mode, RunConfig};
use crate::error::{CliError, Context, ErrorKind};
use crate::render;

pub struct Models {
    pub backbone: Box<dyn Backbone>,
    pub text: Box<dyn TextEncoder>,
}

pub fn load_models(cfg: &RunConfig) -> Result<Models, CliError> {
    let spec = cfg.backbone.resolved_spec();
    match cfg.backbone.name.as_str() {
        "synthetic" => Ok(Models {
            text: Box::new(SyntheticTextEncoder::new(
                spec.joint_width,
                cfg.backbone.seed,
            )),
            backbone: Box::new(SyntheticBackbone::new(spec, cfg.backbone.seed)?),
        }),
        _ => {
            let dir = cfg.backbone.weights.as_deref().ok_or_else(|| {
                CliError::config("backbone.weights must point at the CLIP weights directory")
            })?;
            Ok(Models {
                backbone: Box::new(ClipBackbone::load(dir, spec)?),
                text: Box::new(ClipTextEncoder::load(dir)?),
            })
        }
    }
}

pub fn ensemble_for(cfg: &RunConfig, category: &str) -> Result<PromptEnsemble, CliError> {
    let read = |path: &Option<PathBuf>, fallback: &str| -> Result<Vec<String>, CliError> {
        match path {
            Some(p) => fs::read_to_string(p)
                .map(|t| adkit_core::prompts::parse_lines(&t))
                .or_kind(ErrorKind::Config),
            None => Ok(adkit_core::prompts::parse_lines(fallback)),
        }
    };
    let ensemble = PromptEnsemble {
        normal_states: read(&cfg.prompts.normal_states, DEFAULT_NORMAL_STATES)?,
        abnormal_states: read(&cfg.prompts.abnormal_states, DEFAULT_ABNORMAL_STATES)?,
        templates: read(&cfg.prompts.templates, DEFAULT_TEMPLATES)?,
        object_name: PromptEnsemble::object_for_category(category),
    };
    ensemble.validate().or_kind(ErrorKind::Config)?;
    Ok(ensemble)
}

pub fn text_features(
    cfg: &RunConfig,
    categories: &[String],
    encoder: &dyn TextEncoder,
) -> Result<BTreeMap<String, TextFeatureMatrix>, CliError> {
    categories
        .iter()
        .map(|c| {
            Ok((
                c.clone(),
                text_features_for(&ensemble_for(cfg, c)?, encoder)?,
            ))
        })
        .collect()
}

fn scan(root: Option<&Path>, cfg: &RunConfig, what: &str) -> Result<DatasetManifest, CliError> {
    let root = root.ok_or_else(|| CliError::config(format!("data.{what} is not set")))?;
    if !root.is_dir() {
        return Err(CliError::data(format!(
            "dataset {} does not exist",
            root.display()
        )));
    }
    scan_dataset(root, cfg.data.layout).or_kind(ErrorKind::Data)
}

/// `<output_dir>/run-<timestamp>`, suffixed when that name is taken.
pub fn create_run_dir(output_dir: &Path) -> Result<PathBuf, CliError> {
    let stamp = chrono::Local::now().format("run-%Y%m%d-%H%M%S").to_string();
    fs::create_dir_all(output_dir)?;
    let mut dir = output_dir.join(&stamp);
    let mut n = 1;
    while dir.exists() {
        dir = output_dir.join(format!("{stamp}-{n}"));
        n += 1;
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).or_kind(ErrorKind::Runtime)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub report: TrainReport,
}

/// Fits the heads on the annotated test split of `data.train` and writes
/// `heads.adkh`, `train_log.jsonl` and the resolved `config.json`.
pub fn train(cfg: &RunConfig, run_dir: &Path) -> Result<TrainOutcome, CliError> {
    let manifest = scan(cfg.data.train.as_deref(), cfg, "train")?;
    let records = manifest.select(None, Split::Test);
    if records.is_empty() {
        return Err(CliError::data(format!(
            "{} has no test images to train on",
            manifest.root.display()
        )));
    }
    let models = load_models(cfg)?;
    let text = text_features(cfg, &manifest.categories, models.text.as_ref())?;
    let report = train_heads(
        &RecordSource(records),
        models.backbone.as_ref(),
        &text,
        &cfg.train,
    )?;

    write_json(&run_dir.join("config.json"), cfg)?;
    let log = run_dir.join("train_log.jsonl");
    let mut f = fs::File::create(&log)?;
    for e in &report.epochs {
        writeln!(
            f,
            "{}",
            serde_json::to_string(e).or_kind(ErrorKind::Runtime)?
        )?;
    }
    let checkpoint = run_dir.join("heads.adkh");
    save_heads(&checkpoint, &report.heads)?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        report,
    })
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Vec<ProjectionHead>, CliError> {
    let path = cfg.checkpoint.as_deref().ok_or_else(|| {
        CliError::checkpoint("no checkpoint configured (set checkpoint=<heads.adkh>)")
    })?;
    if !path.is_file() {
        return Err(CliError::checkpoint(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    load_heads(path, &cfg.backbone.resolved_spec()).or_kind(ErrorKind::Checkpoint)
}

/// Scores one image of one category.
pub struct Scorer<'a> {
    pub cfg: &'a RunConfig,
    pub backbone: &'a dyn Backbone,
    pub heads: &'a [ProjectionHead],
    pub text: &'a TextFeatureMatrix,
    pub banks: Option<&'a [MemoryBank]>,
    pub cache: &'a FeatureCache,
}

#[derive(Debug, Clone)]
pub struct ImageScore {
    pub text_score: f64,
    /// The map used for segmentation: M in zero-shot mode, M + M_f in
    /// few-shot mode.
    pub map: AnomalyMap,
    pub image_score: f64,
}

impl Scorer<'_> {
    pub fn score(&self, image: &ImageTensor) -> Result<ImageScore, CliError> {
        let features = self.cache.extract(self.backbone, image)?;
        let tau = self.cfg.train.temperature;
        let text_score =
            classify_zero_shot(&features.class_embedding, self.text, tau)?.anomaly_score();
        let zero = compute_anomaly_map(
            &features.stages,
            self.heads,
            self.text,
            tau,
            self.cfg.metric_side(),
        )?;
        Ok(match self.banks {
            None => ImageScore {
                text_score,
                map: zero,
                image_score: text_score,
            },
            Some(banks) => {
                let few = few_shot_result(
                    &features.stages,
                    banks,
                    &zero,
                    text_score,
                    self.cfg.fusion.normalize,
                    self.cfg.fusion.image_score_map,
                )?;
                ImageScore {
                    text_score,
                    map: few.fused_map,
                    image_score: few.image_score,
                }
            }
        })
    }
}

/// Preprocesses an image file exactly as evaluation does.
pub fn load_for_scoring(
    path: &Path,
    category: &str,
    side: usize,
) -> Result<(ImageTensor, ndarray::Array3<f32>), CliError> {
    let pixels = load_image(path).or_kind(ErrorKind::Data)?;
    let image = ImageTensor::new(resize_and_crop(pixels.view(), side), category)
        .or_kind(ErrorKind::Data)?;
    Ok((image, pixels))
}

fn category_seed(seed: u64, category: &str) -> u64 {
    let digest = Sha256::digest(category.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// `k` normal training images of `category`, drawn without replacement.
pub fn sample_references(
    manifest: &DatasetManifest,
    category: &str,
    k: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>, CliError> {
    let pool: Vec<SampleRecord> = manifest
        .select(Some(category), Split::Train)
        .into_iter()
        .filter(|r| r.is_normal())
        .collect();
    if pool.len() < k {
        return Err(CliError::data(format!(
            "category {category} has {} normal training images, fewer than k = {k}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(category_seed(seed, category));
    let picks = rand::seq::index::sample(&mut rng, pool.len(), k);
    Ok(picks.into_iter().map(|i| pool[i].clone()).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageRow {
    pub category: String,
    pub image: String,
    pub label: u8,
    pub text_score: f64,
    pub map_max: f64,
    pub image_score: f64,
}

pub struct EvalOutcome {
    pub reports: Vec<MetricReport>,
    pub aggregate: SeedAggregate,
}

/// Evaluates every category of `data.eval` once per seed and writes
/// `report_seed<s>.{json,csv}`, `scores_seed<s>.csv` and
/// `report_mean_std.{json,csv}`. Few-shot banks go to `banks/`.
pub fn eval(cfg: &RunConfig, run_dir: &Path) -> Result<EvalOutcome, CliError> {
    let heads = load_checkpoint(cfg)?;
    let manifest = scan(cfg.data.eval.as_deref(), cfg, "eval")?;
    let models = load_models(cfg)?;
    let text = text_features(cfg, &manifest.categories, models.text.as_ref())?;
    let cache = FeatureCache::from_env();
    write_json(&run_dir.join("config.json"), cfg)?;

    let mut reports = Vec::new();
    let mut first: Option<(MetricReport, Vec<ImageRow>)> = None;
    for &seed in &cfg.seeds {
        // zero-shot scoring does not depend on the seed
        let (report, rows) = match (&first, cfg.mode) {
            (Some(done), Mode::Zero) => done.clone(),
            _ => {
                let mut cls = BTreeMap::new();
                let mut seg = BTreeMap::new();
                let mut rows = Vec::new();
                for category in &manifest.categories {
                    let banks = match cfg.mode {
                        Mode::Zero => None,
                        Mode::Few => {
                            let banks = category_banks(
                                cfg,
                                &manifest,
                                category,
                                seed,
                                models.backbone.as_ref(),
                            )?;
                            fs::create_dir_all(run_dir.join("banks"))?;
                            save_banks(
                                &run_dir.join(format!("banks/{category}_seed{seed}.adkh")),
                                &banks,
                            )?;
                            Some(banks)
                        }
                    };
                    let scorer = Scorer {
                        cfg,
                        backbone: models.backbone.as_ref(),
                        heads: &heads,
                        text: &text[category],
                        banks: banks.as_deref(),
                        cache: &cache,
                    };
                    let (c, s, r) = evaluate_category(&scorer, &manifest, category)?;
                    cls.insert(category.clone(), c);
                    seg.insert(category.clone(), s);
                    rows.extend(r);
                }
                (summarize(&cls, &seg)?, rows)
            }
        };
        report.write(
            &run_dir.join(format!("report_seed{seed}.json")),
            &run_dir.join(format!("report_seed{seed}.csv")),
        )?;
        write_rows(&run_dir.join(format!("scores_seed{seed}.csv")), &rows)?;
        if first.is_none() {
            first = Some((report.clone(), rows));
        }
        reports.push(report);
    }
    let aggregate = aggregate_seeds(&cfg.seeds, &reports)?;
    fs::write(
        run_dir.join("report_mean_std.json"),
        aggregate.to_json()? + "\n",
    )?;
    fs::write(run_dir.join("report_mean_std.csv"), aggregate.to_csv()?)?;
    Ok(EvalOutcome { reports, aggregate })
}

fn category_banks(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    category: &str,
    seed: u64,
    backbone: &dyn Backbone,
) -> Result<Vec<MemoryBank>, CliError> {
    let side = cfg.train.image_side;
    let refs = sample_references(manifest, category, cfg.k, seed)?
        .iter()
        .map(|r| Sample::load(r, side).map(|s| s.image))
        .collect::<Result<Vec<_>, _>>()
        .or_kind(ErrorKind::Data)?;
    Ok(build_memory_banks(&refs, backbone)?)
}

type CategoryResult = (
    adkit_core::metrics::ClassificationMetrics,
    adkit_core::metrics::SegmentationMetrics,
    Vec<ImageRow>,
);

fn evaluate_category(
    scorer: &Scorer<'_>,
    manifest: &DatasetManifest,
    category: &str,
) -> Result<CategoryResult, CliError> {
    let records = manifest.select(Some(category), Split::Test);
    if records.is_empty() {
        return Err(CliError::data(format!(
            "category {category} has no test images"
        )));
    }
    let side = scorer.cfg.train.image_side;
    let metric_side = scorer.cfg.metric_side();
    let scored: Vec<(ImageScore, Mask, u8)> = records
        .par_iter()
        .map(|r| {
            let sample = Sample::load(r, side).or_kind(ErrorKind::Data)?;
            let mask = if metric_side == side {
                sample.mask.clone()
            } else {
                Sample::load(r, metric_side).or_kind(ErrorKind::Data)?.mask
            };
            Ok((scorer.score(&sample.image)?, mask, sample.label))
        })
        .collect::<Result<_, CliError>>()?;

    let labels: Vec<u8> = scored.iter().map(|s| s.2).collect();
    let cls_scores =
        LabeledScores::from_binary(scored.iter().map(|s| s.0.image_score).collect(), &labels)?;
    let cls = classification_metrics(&cls_scores)
        .map_err(|e| CliError::data(format!("category {category}: {e}")))?;
    let maps: Vec<AnomalyMap> = scored.iter().map(|s| s.0.map.clone()).collect();
    let masks: Vec<Mask> = scored.iter().map(|s| s.1.clone()).collect();
    let seg = segmentation_metrics(&maps, &masks, scorer.cfg.metrics.fpr_limit)
        .map_err(|e| CliError::data(format!("category {category}: {e}")))?;
    let rows = records
        .iter()
        .zip(&scored)
        .map(|(r, (s, _, label))| ImageRow {
            category: category.to_string(),
            image: r
                .image_path
                .strip_prefix(&manifest.root)
                .unwrap_or(&r.image_path)
                .display()
                .to_string(),
            label: *label,
            text_score: s.text_score,
            map_max: s.map.max(),
            image_score: s.image_score,
        })
        .collect();
    Ok((cls, seg, rows))
}

fn write_rows(path: &Path, rows: &[ImageRow]) -> Result<(), CliError> {
    let mut out = String::from("category,image,label,text_score,map_max,image_score\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.category, r.image, r.label, r.text_score, r.map_max, r.image_score
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Prediction {
    pub category: String,
    pub mode: Mode,
    pub image_score: f64,
    pub text_score: f64,
    pub map_max: f64,
}

/// Scores one image and writes `heatmap.png`, `overlay.png` (original
/// size) and `score.json`.
pub fn predict(
    cfg: &RunConfig,
    image_path: &Path,
    category: &str,
    run_dir: &Path,
) -> Result<Prediction, CliError> {
    let heads = load_checkpoint(cfg)?;
    let banks = match cfg.mode {
        Mode::Zero => None,
        Mode::Few => {
            let path = cfg
                .banks
                .as_deref()
                .ok_or_else(|| CliError::checkpoint("few-shot predict needs banks=<banks.adkh>"))?;
            if !path.is_file() {
                return Err(CliError::checkpoint(format!(
                    "memory banks {} not found",
                    path.display()
                )));
            }
            Some(load_banks(path).or_kind(ErrorKind::Checkpoint)?)
        }
    };
    let (image, original) = load_for_scoring(image_path, category, cfg.train.image_side)?;
    let models = load_models(cfg)?;
    let text = text_features_for(&ensemble_for(cfg, category)?, models.text.as_ref())?;
    let cache = FeatureCache::from_env();
    let scorer = Scorer {
        cfg,
        backbone: models.backbone.as_ref(),
        heads: &heads,
        text: &text,
        banks: banks.as_deref(),
        cache: &cache,
    };
    let scored = scorer.score(&image)?;
    let prediction = Prediction {
        category: category.to_string(),
        mode: cfg.mode,
        image_score: scored.image_score,
        text_score: scored.text_score,
        map_max: scored.map.max(),
    };
    let save =
        |img: image::RgbImage, name: &str| img.save(run_dir.join(name)).or_kind(ErrorKind::Runtime);
    save(render::heatmap(&scored.map), "heatmap.png")?;
    save(render::overlay(&original, &scored.map, 0.5), "overlay.png")?;
    write_json(&run_dir.join("score.json"), &prediction)?;
    Ok(prediction)
}
