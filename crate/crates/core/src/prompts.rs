//! State × template prompt ensembles and their reduction to a two-row text
//! feature matrix (row 0 normal, row 1 abnormal).
//!
//! Templates carry one adjacent `{} {}` slot pair: the first slot takes the
//! state word, the second the object name. A state entry that itself contains
//! `{}` is post-nominal (`"{} with flaw"`) and wraps the object instead of
//! preceding it.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{precondition, shape, Error, Result};

const SLOT_PAIR: &str = "{} {}";

pub const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.txt");
pub const DEFAULT_NORMAL_STATES: &str = include_str!("../assets/states_normal.txt");
pub const DEFAULT_ABNORMAL_STATES: &str = include_str!("../assets/states_abnormal.txt");

/// Parses a one-entry-per-line asset; blank lines and `#` comments are skipped.
pub fn parse_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

/// The shipped template subset of the CLIP ImageNet prompts, with entries
/// unsuited to defect inspection removed.
pub fn default_template_set() -> Vec<String> {
    parse_lines(DEFAULT_TEMPLATES)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEnsemble {
    pub normal_states: Vec<String>,
    pub abnormal_states: Vec<String>,
    pub templates: Vec<String>,
    pub object_name: String,
}

impl PromptEnsemble {
    pub fn with_defaults(object_name: impl Into<String>) -> Self {
        Self {
            normal_states: parse_lines(DEFAULT_NORMAL_STATES),
            abnormal_states: parse_lines(DEFAULT_ABNORMAL_STATES),
            templates: default_template_set(),
            object_name: object_name.into(),
        }
    }

    pub fn from_files(
        templates: &Path,
        normal_states: &Path,
        abnormal_states: &Path,
        object_name: impl Into<String>,
    ) -> Result<Self> {
        let ensemble = Self {
            normal_states: parse_lines(&fs::read_to_string(normal_states)?),
            abnormal_states: parse_lines(&fs::read_to_string(abnormal_states)?),
            templates: parse_lines(&fs::read_to_string(templates)?),
            object_name: object_name.into(),
        };
        ensemble.validate()?;
        Ok(ensemble)
    }

    /// Object phrase for a dataset category directory name (`pipe_fryum` →
    /// `pipe fryum`).
    pub fn object_for_category(category: &str) -> String {
        category.replace('_', " ")
    }

    pub fn validate(&self) -> Result<()> {
        for (what, list) in [
            ("normal states", &self.normal_states),
            ("abnormal states", &self.abnormal_states),
            ("templates", &self.templates),
        ] {
            if list.is_empty() {
                return Err(precondition(format!("prompt ensemble has no {what}")));
            }
        }
        for t in &self.templates {
            if t.matches("{}").count() != 2 || !t.contains(SLOT_PAIR) {
                return Err(precondition(format!(
                    "template {t:?} must contain exactly one adjacent state/object slot pair \"{{}} {{}}\""
                )));
            }
        }
        for s in self.normal_states.iter().chain(&self.abnormal_states) {
            if s.matches("{}").count() > 1 {
                return Err(precondition(format!(
                    "state {s:?} has more than one object slot"
                )));
            }
        }
        if self.object_name.trim().is_empty() {
            return Err(precondition("object name is empty"));
        }
        Ok(())
    }

    fn phrase(&self, state: &str) -> String {
        if state.contains("{}") {
            state.replace("{}", &self.object_name)
        } else {
            format!("{state} {}", self.object_name)
        }
    }

    fn render_class(&self, states: &[String]) -> Vec<String> {
        states
            .iter()
            .flat_map(|state| {
                let phrase = self.phrase(state);
                self.templates
                    .iter()
                    .map(move |t| t.replacen(SLOT_PAIR, &phrase, 1))
            })
            .collect()
    }
}

/// Renders all sentences, state-major: `(normal, abnormal)`.
pub fn render_prompts(ensemble: &PromptEnsemble) -> Result<(Vec<String>, Vec<String>)> {
    ensemble.validate()?;
    Ok((
        ensemble.render_class(&ensemble.normal_states),
        ensemble.render_class(&ensemble.abnormal_states),
    ))
}

pub trait TextEncoder: Send + Sync {
    fn joint_width(&self) -> usize;

    /// One embedding (not necessarily normalized) per sentence.
    fn encode(&self, sentences: &[String]) -> Result<Vec<Array1<f32>>>;
}

/// Normal/abnormal text directions, `2 × C`, each row unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureMatrix(Array2<f32>);

impl TextFeatureMatrix {
    pub fn from_rows(normal: ArrayView1<'_, f64>, abnormal: ArrayView1<'_, f64>) -> Result<Self> {
        if normal.len() != abnormal.len() {
            return Err(shape(format!(
                "text rows differ in width: {} vs {}",
                normal.len(),
                abnormal.len()
            )));
        }
        let n = unit(normal.to_owned())?;
        let a = unit(abnormal.to_owned())?;
        let mut m = Array2::<f32>::zeros((2, n.len()));
        m.row_mut(0).assign(&n.mapv(|v| v as f32));
        m.row_mut(1).assign(&a.mapv(|v| v as f32));
        Ok(Self(m))
    }

    pub fn as_array(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn normal(&self) -> ArrayView1<'_, f32> {
        self.0.row(0)
    }

    pub fn abnormal(&self) -> ArrayView1<'_, f32> {
        self.0.row(1)
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.0.mapv(f64::from)
    }
}

fn unit(v: Array1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::Encoder(
            "embedding has zero or non-finite norm".into(),
        ));
    }
    Ok(v / norm)
}

fn class_mean(encoder: &dyn TextEncoder, sentences: &[String]) -> Result<Array1<f64>> {
    let embeddings = encoder.encode(sentences)?;
    if embeddings.len() != sentences.len() {
        return Err(Error::Encoder(format!(
            "encoder returned {} embeddings for {} sentences",
            embeddings.len(),
            sentences.len()
        )));
    }
    let mut sum = Array1::<f64>::zeros(encoder.joint_width());
    for e in embeddings {
        if e.len() != sum.len() {
            return Err(shape(format!(
                "text embedding width {} != encoder joint width {}",
                e.len(),
                sum.len()
            )));
        }
        sum += &unit(e.mapv(f64::from))?;
    }
    Ok(sum / sentences.len() as f64)
}

/// Encodes both sentence lists and reduces each class to the re-normalized
/// mean of its normalized sentence embeddings.
pub fn encode_text_features(
    normal: &[String],
    abnormal: &[String],
    encoder: &dyn TextEncoder,
) -> Result<TextFeatureMatrix> {
    if normal.is_empty() || abnormal.is_empty() {
        return Err(precondition("both sentence lists must be non-empty"));
    }
    let n = class_mean(encoder, normal)?;
    let a = class_mean(encoder, abnormal)?;
    TextFeatureMatrix::from_rows(n.view(), a.view())
}

pub fn text_features_for(
    ensemble: &PromptEnsemble,
    encoder: &dyn TextEncoder,
) -> Result<TextFeatureMatrix> {
    let (normal, abnormal) = render_prompts(ensemble)?;
    encode_text_features(&normal, &abnormal, encoder)
}

/// Bag-of-words stand-in for a text encoder: each lower-cased word hashes to
/// a seeded Gaussian vector and a sentence embeds as the sum of its words.
#[derive(Debug, Clone)]
pub struct SyntheticTextEncoder {
    width: usize,
    seed: u64,
}

impl SyntheticTextEncoder {
    pub fn new(width: usize, seed: u64) -> Self {
        Self { width, seed }
    }

    fn word_vector(&self, word: &str) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ self.seed);
        Array1::from_shape_fn(self.width, |_| StandardNormal.sample(&mut rng))
    }
}

impl TextEncoder for SyntheticTextEncoder {
    fn joint_width(&self) -> usize {
        self.width
    }

    fn encode(&self, sentences: &[String]) -> Result<Vec<Array1<f32>>> {
        sentences
            .iter()
            .map(|s| {
                let mut acc = Array1::<f64>::zeros(self.width);
                let words = s
                    .split(|c: char| !c.is_alphanumeric() && c != '-')
                    .filter(|w| !w.is_empty());
                for w in words {
                    acc += &self.word_vector(&w.to_lowercase());
                }
                if acc.iter().all(|v| *v == 0.0) {
                    return Err(Error::Encoder(format!("sentence {s:?} has no words")));
                }
                Ok(acc.mapv(|v| v as f32))
            })
            .collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
