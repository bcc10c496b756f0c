use std::path::PathBuf;

use adkit_clip::{bicubic, ClipBackbone, ClipTextEncoder};
use adkit_core::backbone::{Backbone, BackboneSpec, ImageTensor, CLIP_MEAN, CLIP_STD};
use adkit_core::prompts::TextEncoder;
use adkit_core::Error;
use ndarray::Array3;
use serde_json::Value;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn expected() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join("expected.json")).unwrap())
        .unwrap()
}

fn floats(v: &Value) -> Vec<f32> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap() as f32)
        .collect()
}

fn tiny_spec() -> BackboneSpec {
    BackboneSpec {
        name: "tiny-clip".into(),
        num_layers: 4,
        stage_boundaries: vec![1, 2, 3, 4],
        patch_size: 8,
        internal_width: 32,
        joint_width: 16,
        input_side: 48,
        image_mean: CLIP_MEAN,
        image_std: CLIP_STD,
    }
}

fn assert_close(got: &[f32], want: &[f32], tol: f32) {
    assert_eq!(got.len(), want.len());
    let worst = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    assert!(worst < tol, "max abs diff {worst}");
}

#[test]
fn position_table_resampling_matches_reference() {
    let exp = expected();
    let st = safetensors_positions();
    assert_close(
        &bicubic(&st, 4, 4, 32, 6, 6),
        &floats(&exp["pos_interpolated"]),
        1e-5,
    );
}

fn safetensors_positions() -> Vec<f32> {
    // rows 1..17 of the 17 × 32 table, read straight from the file
    let bytes = std::fs::read(fixtures().join("model.safetensors")).unwrap();
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header: Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
    let entry = &header["vision_model.embeddings.position_embedding.weight"];
    let start = 8 + header_len + entry["data_offsets"][0].as_u64().unwrap() as usize;
    bytes[start..start + 17 * 32 * 4]
        .chunks_exact(4)
        .skip(32)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[test]
fn vision_tower_matches_reference() {
    let exp = expected();
    let backbone = ClipBackbone::load(&fixtures(), tiny_spec()).unwrap();
    let pixels = Array3::from_shape_vec((48, 48, 3), floats(&exp["image"])).unwrap();
    let features = backbone
        .extract(&ImageTensor::new(pixels, "bottle").unwrap())
        .unwrap();
    assert_eq!(features.stages.len(), 4);
    for (stage, want) in features
        .stages
        .iter()
        .zip(exp["stages"].as_array().unwrap())
    {
        assert_eq!(stage.grid.dim(), (6, 6, 32));
        assert_close(stage.grid.as_slice().unwrap(), &floats(want), 1e-4);
    }
    assert_close(
        features.class_embedding.as_array().as_slice().unwrap(),
        &floats(&exp["class_embedding"]),
        1e-5,
    );
}

#[test]
fn text_tower_matches_reference() {
    let exp = expected();
    let encoder = ClipTextEncoder::load(&fixtures()).unwrap();
    assert_eq!(encoder.joint_width(), 16);
    let sentences: Vec<String> = exp["sentences"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_str().unwrap().to_string())
        .collect();
    let got = encoder.encode(&sentences).unwrap();
    for (g, w) in got.iter().zip(exp["text"].as_array().unwrap()) {
        assert_close(g.as_slice().unwrap(), &floats(w), 1e-5);
    }
}

#[test]
fn geometry_mismatch_and_missing_weights_fail_to_load() {
    let mut spec = tiny_spec();
    spec.internal_width = 64;
    assert!(matches!(
        ClipBackbone::load(&fixtures(), spec),
        Err(Error::Load(_))
    ));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        ClipBackbone::load(empty.path(), tiny_spec()),
        Err(Error::Load(_))
    ));
    assert!(matches!(
        ClipTextEncoder::load(empty.path()),
        Err(Error::Load(_))
    ));
}
