use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{auroc, average_precision, f1_max, pro, LabeledScores};
use crate::error::{precondition, shape, Result};
use crate::zeroshot::AnomalyMap;
use crate::Mask;

/// Report column order for CSV emission.
pub const CSV_COLUMNS: [&str; 9] = [
    "category",
    "auroc_segm",
    "f1max_segm",
    "ap_segm",
    "pro_segm",
    "auroc_cls",
    "f1max_cls",
    "ap_cls",
    "harmonic",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub auroc: f64,
    pub f1max: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub auroc: f64,
    pub f1max: f64,
    pub ap: f64,
    pub pro: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub auroc_segm: f64,
    pub f1max_segm: f64,
    pub ap_segm: f64,
    pub pro_segm: f64,
    pub auroc_cls: f64,
    pub f1max_cls: f64,
    pub ap_cls: f64,
    pub harmonic: f64,
}

impl CategoryMetrics {
    fn values(&self) -> [f64; 8] {
        [
            self.auroc_segm,
            self.f1max_segm,
            self.ap_segm,
            self.pro_segm,
            self.auroc_cls,
            self.f1max_cls,
            self.ap_cls,
            self.harmonic,
        ]
    }

    fn from_values(v: [f64; 8]) -> Self {
        Self {
            auroc_segm: v[0],
            f1max_segm: v[1],
            ap_segm: v[2],
            pro_segm: v[3],
            auroc_cls: v[4],
            f1max_cls: v[5],
            ap_cls: v[6],
            harmonic: v[7],
        }
    }
}

/// Per-category metrics plus their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub categories: BTreeMap<String, CategoryMetrics>,
    pub mean: CategoryMetrics,
}

/// `2ab/(a+b)`, or 0 when either side is 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub fn classification_metrics(data: &LabeledScores) -> Result<ClassificationMetrics> {
    Ok(ClassificationMetrics {
        auroc: auroc(data)?,
        f1max: f1_max(data)?.0,
        ap: average_precision(data)?,
    })
}

/// Pixel metrics with every pixel of every map pooled into one population.
pub fn segmentation_metrics(
    maps: &[AnomalyMap],
    masks: &[Mask],
    fpr_limit: f64,
) -> Result<SegmentationMetrics> {
    if maps.len() != masks.len() {
        return Err(shape(format!(
            "{} maps and {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.dim() != mask.dim() {
            return Err(shape(format!(
                "map {:?} vs mask {:?}",
                map.dim(),
                mask.dim()
            )));
        }
        scores.extend(map.grid.iter().copied());
        labels.extend(mask.iter().map(|m| *m != 0));
    }
    let pooled = LabeledScores::new(scores, labels)?;
    Ok(SegmentationMetrics {
        auroc: auroc(&pooled)?,
        f1max: f1_max(&pooled)?.0,
        ap: average_precision(&pooled)?,
        pro: pro(maps, masks, fpr_limit)?,
    })
}

/// Joins per-category image and pixel metrics and averages across categories.
pub fn summarize(
    cls: &BTreeMap<String, ClassificationMetrics>,
    seg: &BTreeMap<String, SegmentationMetrics>,
) -> Result<MetricReport> {
    if cls.is_empty() {
        return Err(precondition("no categories to summarize"));
    }
    if !cls.keys().eq(seg.keys()) {
        return Err(precondition(format!(
            "category mismatch: classification {:?} vs segmentation {:?}",
            cls.keys().collect::<Vec<_>>(),
            seg.keys().collect::<Vec<_>>()
        )));
    }
    let categories: BTreeMap<String, CategoryMetrics> = cls
        .iter()
        .map(|(name, c)| {
            let s = &seg[name];
            let m = CategoryMetrics {
                auroc_segm: s.auroc,
                f1max_segm: s.f1max,
                ap_segm: s.ap,
                pro_segm: s.pro,
                auroc_cls: c.auroc,
                f1max_cls: c.f1max,
                ap_cls: c.ap,
                harmonic: harmonic_mean(c.f1max, s.f1max),
            };
            (name.clone(), m)
        })
        .collect();
    Ok(MetricReport {
        mean: mean_of(categories.values()),
        categories,
    })
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a CategoryMetrics>) -> CategoryMetrics {
    let mut sum = [0.0; 8];
    let mut n = 0usize;
    for row in rows {
        for (s, v) in sum.iter_mut().zip(row.values()) {
            *s += v;
        }
        n += 1;
    }
    CategoryMetrics::from_values(sum.map(|s| s / n.max(1) as f64))
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per category in name order, then `MEAN`.
    pub fn to_csv(&self) -> Result<String> {
        write_rows(
            self.categories
                .iter()
                .map(|(n, m)| (n.as_str(), m))
                .chain(std::iter::once(("MEAN", &self.mean))),
        )
    }

    pub fn write(&self, json: &Path, csv: &Path) -> Result<()> {
        std::fs::write(json, self.to_json()?)?;
        std::fs::write(csv, self.to_csv()?)?;
        Ok(())
    }
}

fn write_rows<'a>(rows: impl Iterator<Item = (&'a str, &'a CategoryMetrics)>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for (name, m) in rows {
        let mut record = vec![name.to_string()];
        record.extend(m.values().iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Mean and population standard deviation of each cell across seed reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub seeds: Vec<u64>,
    pub mean: MetricReport,
    pub std: MetricReport,
}

pub fn aggregate_seeds(seeds: &[u64], reports: &[MetricReport]) -> Result<SeedAggregate> {
    let first = reports
        .first()
        .ok_or_else(|| precondition("no seed reports to aggregate"))?;
    if seeds.len() != reports.len() {
        return Err(precondition(format!(
            "{} seeds but {} reports",
            seeds.len(),
            reports.len()
        )));
    }
    if reports
        .iter()
        .any(|r| !r.categories.keys().eq(first.categories.keys()))
    {
        return Err(precondition("seed reports cover different categories"));
    }
    let stats = |pick: &dyn Fn(&MetricReport) -> CategoryMetrics| {
        let cells: Vec<Array1<f64>> = reports
            .iter()
            .map(|r| Array1::from(pick(r).values().to_vec()))
            .collect();
        let views: Vec<_> = cells.iter().map(|c| c.view()).collect();
        let stacked = ndarray::stack(ndarray::Axis(0), &views).expect("equal widths");
        let mean = stacked.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let std = stacked.std_axis(ndarray::Axis(0), 0.0);
        let arr = |a: Array1<f64>| {
            CategoryMetrics::from_values(a.to_vec().try_into().expect("8 metrics"))
        };
        (arr(mean), arr(std))
    };
    let mut mean_cats = BTreeMap::new();
    let mut std_cats = BTreeMap::new();
    for name in first.categories.keys() {
        let (m, s) = stats(&|r| r.categories[name]);
        mean_cats.insert(name.clone(), m);
        std_cats.insert(name.clone(), s);
    }
    let (mean_row, std_row) = stats(&|r| r.mean);
    Ok(SeedAggregate {
        seeds: seeds.to_vec(),
        mean: MetricReport {
            categories: mean_cats,
            mean: mean_row,
        },
        std: MetricReport {
            categories: std_cats,
            mean: std_row,
        },
    })
}

impl SeedAggregate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Mean table with a `_std` column after each metric.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![CSV_COLUMNS[0].to_string()];
        for c in &CSV_COLUMNS[1..] {
            header.push(c.to_string());
            header.push(format!("{c}_std"));
        }
        w.write_record(&header)?;
        let rows = self
            .mean
            .categories
            .iter()
            .map(|(n, m)| (n.as_str(), m, &self.std.categories[n]))
            .chain(std::iter::once(("MEAN", &self.mean.mean, &self.std.mean)));
        for (name, m, s) in rows {
            let mut record = vec![name.to_string()];
            for (a, b) in m.values().iter().zip(s.values()) {
                record.push(a.to_string());
                record.push(b.to_string());
            }
            w.write_record(&record)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
