//! End-to-end checks of the `fsmc-pose` binary: exit codes, artifacts and oracles.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fsmc_core::config::ModelConfig;
use fsmc_core::data::Image;
use fsmc_core::model::PoseModel;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsmc-pose"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("FSMC_THREADS")
        .output()
        .expect("spawn fsmc-pose")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

/// Writes a small synthetic dataset and returns its annotation file.
fn synth(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let out = dir.join("synth");
    ok(&out, &["--seed", &seed.to_string(), "synth", "--count", &count.to_string()]);
    out.join("annotations.json")
}

#[test]
fn exit_code_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let ann = synth(t, 4, 1);
    let ann = ann.to_str().unwrap();

    let bad_arity = t.join("bad_arity.json");
    let mut doc = json(Path::new(ann));
    doc["annotations"][0]["keypoints"].as_array_mut().unwrap().pop();
    std::fs::write(&bad_arity, doc.to_string()).unwrap();
    let short_preds = t.join("short_preds.json");
    std::fs::write(&short_preds, r#"[{"image_id":1,"keypoints":[1,2,1],"score":0.5}]"#).unwrap();
    let bad_config = t.join("bad.toml");
    std::fs::write(&bad_config, "input_width = 250\n").unwrap();
    let empty_dir = t.join("no_images");
    std::fs::create_dir_all(&empty_dir).unwrap();

    let cases: Vec<(&str, Vec<&str>, i32)> = vec![
        ("profile", vec!["profile"], 0),
        ("stats", vec!["stats", "--annotations", ann], 0),
        ("help", vec!["--help"], 0),
        ("unknown subcommand", vec!["frobnicate"], 1),
        ("bad flag value", vec!["--threads", "many", "profile"], 1),
        ("zero threads", vec!["--threads", "0", "profile"], 1),
        ("unknown toggle", vec!["--toggle", "no-head", "profile"], 1),
        ("resolution off stride", vec!["profile", "--resolution", "250x190"], 1),
        ("malformed resolution", vec!["profile", "--resolution", "big"], 1),
        ("missing annotation file", vec!["stats", "--annotations", "/nonexistent/a.json"], 1),
        ("keypoint arity", vec!["stats", "--annotations", bad_arity.to_str().unwrap()], 1),
        ("no data source", vec!["train", "--iters", "0"], 1),
        ("invalid config", vec!["--config", bad_config.to_str().unwrap(), "profile"], 1),
        ("missing config", vec!["--config", "/nonexistent.toml", "profile"], 1),
        ("prediction arity", vec!["eval", "--annotations", ann, "--predictions", short_preds.to_str().unwrap()], 1),
        ("missing checkpoint", vec!["eval", "--annotations", ann, "--checkpoint", "/nonexistent.ckpt"], 1),
        ("all viz images missing", vec!["viz", "--annotations", ann, "--images", empty_dir.to_str().unwrap()], 1),
        ("bench below minimum", vec!["bench", "--iters", "3"], 1),
        ("diverging training", vec!["train", "--synthetic", "8", "--iters", "3", "--lr", "1e30", "--holdout", "2"], 2),
    ];
    for (i, (name, args, expected)) in cases.iter().enumerate() {
        let out = t.join(format!("case{i}"));
        let o = run(&out, args);
        assert_eq!(o.status.code(), Some(*expected), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
    // The aborted run leaves a diagnostic dump naming the batch seed.
    let dump = json(&t.join("case18/nonfinite_dump.json"));
    assert!(dump["error"].as_str().unwrap().contains("batch seed"), "{dump}");
    assert!(t.join("case18/manifest.json").exists());
}

#[test]
fn manifests_list_existing_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = synth(tmp.path(), 3, 2);
    for (name, args) in [
        ("profile", vec!["profile"]),
        ("stats", vec!["stats", "--annotations", ann.to_str().unwrap()]),
        ("viz", vec!["viz", "--annotations", ann.to_str().unwrap()]),
    ] {
        let out = tmp.path().join(name);
        ok(&out, &args);
        let m = json(&out.join("manifest.json"));
        assert_eq!(m["command"], name);
        assert!(m["version"].as_str().unwrap().starts_with("fsmc-pose 0.1.0"));
        assert_eq!(m["config_hash"].as_str().unwrap(), ModelConfig::desk().hash());
        let outputs = m["outputs"].as_array().unwrap();
        assert!(!outputs.is_empty());
        for o in outputs {
            assert!(out.join(o.as_str().unwrap()).exists(), "{name}: {o}");
        }
        let files = std::fs::read_dir(&out).unwrap().count();
        assert_eq!(files, outputs.len() + 1, "{name}: exactly one manifest besides the outputs");
    }
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    ok(&out, &["--seed", "5", "train", "--synthetic", "8", "--iters", "0", "--holdout", "2"]);
    let init = tmp.path().join("init.ckpt");
    PoseModel::new(&ModelConfig::desk(), 5).unwrap().save(&init).unwrap();
    assert_eq!(std::fs::read(out.join("model.ckpt")).unwrap(), std::fs::read(&init).unwrap());
    assert_eq!(std::fs::read_to_string(out.join("loss.csv")).unwrap(), "iter,lr,loss,batch_seed\n");
    let report = json(&out.join("train_report.json"));
    assert_eq!(report["initial_loss"], report["final_loss"]);
    assert_eq!(report["pck_initial"], report["pck_final"]);
}

#[test]
fn short_training_lowers_loss_and_logs_each_step() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    ok(&out, &["--seed", "3", "train", "--synthetic", "16", "--iters", "6", "--holdout", "2"]);
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let lrs: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    // Warmup covers ceil(0.1 × 6) = 1 step, then the rate stays at 1e-3.
    assert!(lrs.iter().all(|&lr| (lr - 1e-3).abs() < 1e-12), "{lrs:?}");
    let report = json(&out.join("train_report.json"));
    assert!(report["final_loss"].as_f64().unwrap() < report["initial_loss"].as_f64().unwrap());
    let cfg = ModelConfig::from_toml(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(cfg, ModelConfig::desk());
}

/// Ground truth rewritten as a COCO results file with score 1.
fn gt_as_results(ann: &Path) -> String {
    let doc = json(ann);
    let entries: Vec<Value> = doc["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| serde_json::json!({"image_id": a["image_id"], "category_id": 1, "keypoints": a["keypoints"], "score": 1.0}))
        .collect();
    Value::Array(entries).to_string()
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = synth(tmp.path(), 6, 4);
    let preds = tmp.path().join("gt_results.json");
    std::fs::write(&preds, gt_as_results(&ann)).unwrap();
    let out = tmp.path().join("e");
    ok(&out, &["eval", "--annotations", ann.to_str().unwrap(), "--predictions", preds.to_str().unwrap()]);
    let m = json(&out.join("metrics.json"));
    for key in ["AP", "AP50", "AP75", "AR", "AR50", "AR75"] {
        assert_eq!(m[key].as_f64(), Some(1.0), "{key}: {m}");
    }
    assert!(std::fs::read_to_string(out.join("metrics.txt")).unwrap().contains("AP    1.0000"));
}

#[test]
fn empty_predictions_have_zero_recall() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = synth(tmp.path(), 4, 5);
    let preds = tmp.path().join("none.json");
    std::fs::write(&preds, "[]").unwrap();
    let out = tmp.path().join("e");
    ok(&out, &["eval", "--annotations", ann.to_str().unwrap(), "--predictions", preds.to_str().unwrap()]);
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["AR"].as_f64(), Some(0.0));
    assert_eq!(m["AP"].as_f64(), Some(0.0));
    assert_eq!(m["num_detections"], 0);
}

#[test]
fn model_eval_writes_results_for_every_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("e");
    ok(&out, &["eval", "--synthetic", "4"]);
    let results = json(&out.join("results.json"));
    let m = json(&out.join("metrics.json"));
    assert_eq!(results.as_array().unwrap().len(), m["num_ground_truth"].as_u64().unwrap() as usize);
    for r in results.as_array().unwrap() {
        assert_eq!(r["keypoints"].as_array().unwrap().len(), 48);
    }
}

#[test]
fn eval_rejects_a_non_cattle_skeleton() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::desk();
    cfg.head.keypoints = 17;
    let path = tmp.path().join("k17.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let o = run(&tmp.path().join("e"), &["--config", path.to_str().unwrap(), "eval", "--synthetic", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("17 keypoints"));
}

fn profile_totals(dir: &Path, args: &[&str]) -> Value {
    ok(dir, args);
    json(&dir.join("profile.json"))
}

#[test]
fn profile_toggles_and_resolution() {
    let tmp = tempfile::tempdir().unwrap();
    let base = profile_totals(&tmp.path().join("a"), &["profile"]);
    let no_sfe = profile_totals(&tmp.path().join("b"), &["--toggle", "no-sfe", "profile"]);
    let sfe_params = 4 * 32 * 9 + (32 * 32 + 32) + (9 * 32 * 32 + 32);
    assert_eq!(
        base["totals"]["params"].as_u64().unwrap() - no_sfe["totals"]["params"].as_u64().unwrap(),
        sfe_params
    );
    let big = profile_totals(&tmp.path().join("c"), &["profile", "--resolution", "512x384"]);
    let convs = |r: &Value| -> BTreeMap<String, u64> {
        r["rows"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|row| row["kind"] == "conv")
            .map(|row| (row["name"].as_str().unwrap().to_string(), row["macs"].as_u64().unwrap()))
            .collect()
    };
    let (small, large) = (convs(&base), convs(&big));
    assert!(!small.is_empty());
    for (name, macs) in &small {
        assert_eq!(large[name], 4 * macs, "{name}");
    }
}

/// Independent tally of the fixture: visibility counts per split, straight from the raw JSON.
fn count_fixture() -> BTreeMap<String, [u64; 3]> {
    let split_of: BTreeMap<u64, String> = std::fs::read_to_string(fixture("stats_fixture_split.tsv"))
        .unwrap()
        .lines()
        .map(|l| {
            let (id, s) = l.split_once('\t').unwrap();
            (id.parse().unwrap(), s.to_string())
        })
        .collect();
    let doc = json(&fixture("stats_fixture.json"));
    let mut counts = BTreeMap::new();
    for a in doc["annotations"].as_array().unwrap() {
        let split = split_of[&a["image_id"].as_u64().unwrap()].clone();
        let row: &mut [u64; 3] = counts.entry(split).or_default();
        for v in a["keypoints"].as_array().unwrap().iter().skip(2).step_by(3) {
            row[v.as_f64().unwrap() as usize] += 1;
        }
    }
    counts
}

#[test]
fn stats_fixture_matches_independent_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    let o = ok(
        &out,
        &[
            "stats",
            "--annotations",
            fixture("stats_fixture.json").to_str().unwrap(),
            "--split-file",
            fixture("stats_fixture_split.tsv").to_str().unwrap(),
        ],
    );
    let expected = count_fixture();
    let stats = json(&out.join("stats.json"));
    let rows = stats["rows"].as_array().unwrap();
    assert_eq!(rows.len(), expected.len());
    for row in rows {
        let counts: Vec<u64> = row["counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        assert_eq!(counts, expected[row["split"].as_str().unwrap()], "{row}");
    }
    // Authored totals: 13 unlabeled, 29 occluded, 118 visible.
    let total = expected.values().fold([0; 3], |acc, r| [acc[0] + r[0], acc[1] + r[1], acc[2] + r[2]]);
    assert_eq!(total, [13, 29, 118]);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("6 (7.50%)") && table.contains("58 (72.50%)"), "{table}");
}

#[test]
fn stats_without_split_file_has_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    ok(&out, &["stats", "--annotations", fixture("stats_fixture.json").to_str().unwrap()]);
    let stats = json(&out.join("stats.json"));
    let rows = stats["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["split"], "all");
    assert_eq!(rows[0]["counts"], serde_json::json!([13, 29, 118]));
}

const VISIBLE: [u8; 3] = [0, 255, 0];
const PARTIAL: [u8; 3] = [255, 255, 0];

fn rgb(img: &Image, x: i64, y: i64) -> Option<[u8; 3]> {
    if x < 0 || y < 0 || x >= img.width as i64 || y >= img.height as i64 {
        return None;
    }
    let (x, y) = (x as usize, y as usize);
    Some([img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)])
}

#[test]
fn viz_overlay_marks_every_labeled_keypoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = synth(tmp.path(), 8, 6);
    let out = tmp.path().join("v");
    ok(&out, &["viz", "--annotations", ann.to_str().unwrap()]);
    let doc = json(&ann);
    let mut probed = 0;
    for image in doc["images"].as_array().unwrap() {
        let id = image["id"].as_u64().unwrap();
        let img = Image::load(&out.join(format!("viz_{id}.ppm"))).unwrap();
        let kps: Vec<(f64, f64, u64)> = doc["annotations"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|a| a["image_id"] == id)
            .flat_map(|a| {
                let k = a["keypoints"].as_array().unwrap();
                k.chunks(3).map(|c| (c[0].as_f64().unwrap(), c[1].as_f64().unwrap(), c[2].as_f64().unwrap() as u64)).collect::<Vec<_>>()
            })
            .filter(|k| k.2 > 0)
            .collect();
        for &(x, y, v) in &kps {
            let want = if v == 2 { VISIBLE } else { PARTIAL };
            let (cx, cy) = (x.round() as i64, y.round() as i64);
            let hit = (-1..=1).any(|dy| (-1..=1).any(|dx| rgb(&img, cx + dx, cy + dy) == Some(want)));
            // A marker may be painted over only by another keypoint's marker nearby.
            let covered = kps.iter().any(|&(ox, oy, ov)| ov != v && (ox - x).abs() <= 4.0 && (oy - y).abs() <= 4.0);
            assert!(hit || covered, "image {id}: keypoint ({x}, {y}, v={v}) not marked");
            probed += 1;
        }
    }
    assert!(probed > 50);
}

#[test]
fn viz_skips_missing_images_and_renders_heat_strips() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = synth(tmp.path(), 4, 7);
    let doc = json(&ann);
    let first = doc["images"][0]["file_name"].as_str().unwrap();
    std::fs::remove_file(ann.parent().unwrap().join(first)).unwrap();
    let ckpt_dir = tmp.path().join("init");
    ok(&ckpt_dir, &["train", "--synthetic", "2", "--iters", "0", "--holdout", "1"]);
    let out = tmp.path().join("v");
    let o = ok(
        &out,
        &["viz", "--annotations", ann.to_str().unwrap(), "--checkpoint", ckpt_dir.join("model.ckpt").to_str().unwrap()],
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipping image"));
    let names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    let id0 = doc["images"][0]["id"].as_u64().unwrap();
    assert!(!names.contains(&format!("viz_{id0}.ppm")));
    assert!(names.iter().any(|n| n.starts_with("viz_")));
    let strip = names.iter().find(|n| n.starts_with("heat_") && n.ends_with("_x.ppm")).expect("heat strip");
    let img = Image::load(&out.join(strip)).unwrap();
    // 512 x-bins wide, 16 keypoints × 4 px tall.
    assert_eq!((img.width, img.height, img.channels), (512, 64, 3));
}

#[test]
fn bench_report_round_trips_for_one_and_two_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::desk().with_resolution(128, 96);
    cfg.head.split_ratio = 1.0;
    let path = tmp.path().join("small.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    for threads in ["1", "2"] {
        let out = tmp.path().join(format!("b{threads}"));
        let o = Command::new(env!("CARGO_BIN_EXE_fsmc-pose"))
            .args(["--out", out.to_str().unwrap(), "--config", path.to_str().unwrap(), "bench", "--batch", "2"])
            .env("FSMC_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(out.join("bench.json")).unwrap();
        let report: fsmc_core::profiler::BenchReport = serde_json::from_str(&text).unwrap();
        assert_eq!(report.environment.threads.to_string(), threads);
        assert_eq!(report.samples_ms.len(), 10);
        assert!(report.fps_mean > 0.0 && report.fps_p50 > 0.0 && report.fps_p95 > 0.0);
        assert_eq!(serde_json::to_string_pretty(&report).unwrap(), text);
    }
}
