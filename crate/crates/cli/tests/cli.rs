use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adkit_core::backbone::BackboneSpec;
use adkit_core::zeroshot::{init_heads, load_heads, TrainConfig};
use tempfile::TempDir;

fn adkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adkit"))
        .args(args)
        .env_remove("ADKIT_CACHE")
        .output()
        .expect("binary runs")
}

fn stdout_path(out: &Output) -> PathBuf {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

struct Workspace {
    tmp: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            tmp: tempfile::tempdir().unwrap(),
        };
        let data = ws.path("data");
        stdout_path(&adkit(&["synth", "--out", data.to_str().unwrap()]));
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn sets(&self, extra: &[&str]) -> Vec<String> {
        let data = self.path("data");
        let mut sets = vec![
            "backbone.name=synthetic".to_string(),
            "train.image_side=64".to_string(),
            format!("data.train={}", data.display()),
            format!("data.eval={}", data.display()),
            format!("output_dir={}", self.path("runs").display()),
        ];
        sets.extend(extra.iter().map(|s| s.to_string()));
        sets
    }

    fn run(&self, command: &str, extra: &[&str], sets: &[&str]) -> Output {
        let mut args = vec![command.to_string()];
        args.extend(extra.iter().map(|s| s.to_string()));
        for s in self.sets(sets) {
            args.push("--set".into());
            args.push(s);
        }
        adkit(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }

    fn train(&self, sets: &[&str]) -> PathBuf {
        stdout_path(&self.run("train", &[], sets))
    }

    fn run_dirs(&self) -> usize {
        std::fs::read_dir(self.path("runs"))
            .map(|d| d.count())
            .unwrap_or(0)
    }
}

fn checkpoint_set(path: &Path) -> String {
    format!("checkpoint={}", path.display())
}

#[test]
fn zero_epochs_writes_initial_heads() {
    let ws = Workspace::new();
    let ckpt = ws.train(&["train.epochs=0"]);
    let spec = BackboneSpec::synthetic();
    let cfg = TrainConfig::default();
    assert_eq!(
        load_heads(&ckpt, &spec).unwrap(),
        init_heads(&spec, cfg.init_std, cfg.seed)
    );
}

#[test]
fn eval_report_ends_with_mean_row() {
    let ws = Workspace::new();
    let ckpt = ws.train(&["train.epochs=1"]);
    let run = stdout_path(&ws.run("eval", &["--mode", "zero"], &[&checkpoint_set(&ckpt)]));
    let csv = std::fs::read_to_string(run.join("report_seed0.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert!(lines[0].starts_with("category,auroc_segm"));
    assert!(lines.iter().any(|l| l.starts_with("gadget,")));
    assert!(lines.last().unwrap().starts_with("MEAN,"));
}

#[test]
fn few_shot_eval_writes_one_report_per_seed_and_predict_agrees() {
    let ws = Workspace::new();
    let ckpt = ws.train(&["train.epochs=1"]);
    let ck = checkpoint_set(&ckpt);
    let run = stdout_path(&ws.run(
        "eval",
        &["--mode", "few"],
        &[&ck, "k=2", "seeds=[0,1,2,3,4]"],
    ));
    for s in 0..5 {
        assert!(run.join(format!("report_seed{s}.json")).is_file());
        assert!(run.join(format!("report_seed{s}.csv")).is_file());
        assert!(run.join(format!("banks/gadget_seed{s}.adkh")).is_file());
    }
    let agg = std::fs::read_to_string(run.join("report_mean_std.csv")).unwrap();
    assert!(agg.lines().next().unwrap().contains("auroc_segm_std"));

    // seed 3's row for one defect image, rescored through `predict`
    let scores = std::fs::read_to_string(run.join("scores_seed3.csv")).unwrap();
    let row: Vec<_> = scores.lines().nth(1).unwrap().split(',').collect();
    let image = ws.path("data").join(row[1]);
    let out = ws.run(
        "predict",
        &[
            "--mode",
            "few",
            "--image",
            image.to_str().unwrap(),
            "--category",
            row[0],
        ],
        &[
            &ck,
            "k=2",
            &format!(
                "banks={}",
                run.join(format!("banks/{}_seed3.adkh", row[0])).display()
            ),
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let p: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(
        p["image_score"].as_f64().unwrap(),
        row[5].parse::<f64>().unwrap()
    );
}

#[test]
fn predict_writes_images_at_original_size() {
    let ws = Workspace::new();
    let ckpt = ws.train(&["train.epochs=0"]);
    let image = ws.path("data/widget/test/good/000.png");
    let out = ws.run(
        "predict",
        &["--image", image.to_str().unwrap()],
        &[&checkpoint_set(&ckpt)],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = std::fs::read_dir(ws.path("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.join("overlay.png").is_file())
        .unwrap();
    let original = image::image_dimensions(&image).unwrap();
    assert_eq!(
        image::image_dimensions(dir.join("overlay.png")).unwrap(),
        original
    );
    assert!(dir.join("heatmap.png").is_file() && dir.join("score.json").is_file());
}

#[test]
fn missing_dataset_exits_3_without_leaving_a_run() {
    let ws = Workspace::new();
    let out = ws.run("train", &[], &["data.train=/nonexistent/adkit-data"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(ws.run_dirs(), 0);
}

#[test]
fn missing_checkpoint_exits_4() {
    let ws = Workspace::new();
    let out = ws.run("eval", &[], &["checkpoint=/nonexistent/heads.adkh"]);
    assert_eq!(out.status.code(), Some(4));
    let out = ws.run("eval", &[], &[]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(ws.run_dirs(), 0);
}

#[test]
fn bad_config_exits_2() {
    let ws = Workspace::new();
    assert_eq!(
        ws.run("train", &[], &["no_such_key=1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        ws.run("train", &[], &["train.image_side=32"]).status.code(),
        Some(2)
    );
    let cfg = ws.path("broken.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(
        ws.run("train", &["--config", cfg.to_str().unwrap()], &[])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn unreadable_image_exits_3() {
    let ws = Workspace::new();
    let ckpt = ws.train(&["train.epochs=0"]);
    let bogus = ws.path("bogus.png");
    std::fs::write(&bogus, b"not a png").unwrap();
    let out = ws.run(
        "predict",
        &["--image", bogus.to_str().unwrap()],
        &[&checkpoint_set(&ckpt)],
    );
    assert_eq!(out.status.code(), Some(3));
}
