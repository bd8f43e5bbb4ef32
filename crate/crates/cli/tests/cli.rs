use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adwpf::augment::{mask_indicator, normalize_minmax, upsample_linear};
use adwpf::trace_io::load_dataset;
use serde_json::Value;

const TINY: &str = "\
seed = 4
synth.classes = 6
synth.samples = 80
synth.seq_len = 500
synth.site_size = 3
synth.tabs_dist = 3,2,1
model.filters = 4,8,8,16
model.pool_kernels = 9,9,9,3
model.pool_strides = 5,5,2,1
model.attn_map_count = 4
model.encoder_layers = 1
model.heads = 2
model.ffn_multiplier = 2
df.filters = 4,8
df.dense = 16
train.epochs = 1
train.batch_size = 16
train.learning_rate = 0.001
augment.crop_dilation = 50
";

fn adwpf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adwpf"))
        .args(args)
        .current_dir(dir)
        .env_remove("ADWPF_RUN_DIR")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = adwpf(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with_one_line(dir: &Path, args: &[&str]) -> String {
    let out = adwpf(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic: {err:?}");
    err
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let root = dir.path().to_path_buf();
    ok(&root, &["synth", "--config", "tiny.cfg", "--out", "data.jsonl"]);
    (dir, root)
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

#[test]
fn synth_writes_dataset_and_sidecar_and_refuses_overwrite() {
    let (_d, root) = setup();
    let ds = load_dataset(root.join("data.jsonl")).unwrap();
    assert_eq!((ds.len(), ds.class_count(), ds.seq_len()), (80, 6, 500));
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(root.join("data.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 4);

    let err = fails_with_one_line(&root, &["synth", "--config", "tiny.cfg", "--out", "data.jsonl"]);
    assert!(err.contains("--force"));
    ok(&root, &["synth", "--config", "tiny.cfg", "--out", "data.jsonl", "--classes", "7", "--force"]);
    assert_eq!(load_dataset(root.join("data.jsonl")).unwrap().class_count(), 7);
    assert!(listing(&root).iter().all(|n| !n.contains(".tmp-")));
}

#[test]
fn flags_override_config_and_run_dir_env_sets_default_root() {
    let (_d, root) = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_adwpf"))
        .args(["synth", "--config", "tiny.cfg", "--samples", "30", "--tabs-dist", "1", "--seed", "9"])
        .current_dir(&root)
        .env("ADWPF_RUN_DIR", root.join("env-root"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ds = load_dataset(root.join("env-root/synth.jsonl")).unwrap();
    assert_eq!(ds.len(), 30);
    assert!(ds.samples().iter().all(|s| s.tab_count == 1));
}

#[test]
fn split_writes_three_parts() {
    let (_d, root) = setup();
    ok(&root, &["split", "--data", "data.jsonl", "--seed", "2", "--out", "parts"]);
    let sizes: Vec<usize> = ["train", "val", "test"]
        .iter()
        .map(|p| load_dataset(root.join(format!("parts/{p}.jsonl"))).unwrap().len())
        .collect();
    assert_eq!(sizes, vec![64, 8, 8]);
}

#[test]
fn train_then_eval_pipeline() {
    let (_d, root) = setup();
    ok(&root, &["train", "--config", "tiny.cfg", "--data", "data.jsonl", "--out", "run"]);
    assert_eq!(
        listing(&root.join("run")),
        vec!["best.ckpt", "config.cfg", "history.jsonl", "report.json", "report.txt", "test.jsonl"]
    );
    let history = std::fs::read_to_string(root.join("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
    let record: Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert_eq!(record["epoch"], 1);

    ok(&root, &["eval", "--ckpt", "run/best", "--data", "run/test.jsonl"]);
    let dir = root.join("run/eval-test");
    assert_eq!(listing(&dir), vec!["report.json", "report.txt", "scores.jsonl"]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let trained: Value = serde_json::from_str(&std::fs::read_to_string(root.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report, trained["test"], "evaluating the saved checkpoint reproduces the in-process report");

    // The snapshot alone reproduces the run.
    ok(&root, &["train", "--config", "run/config.cfg", "--out", "rerun"]);
    assert_eq!(
        std::fs::read_to_string(root.join("rerun/history.jsonl")).unwrap().lines().map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("seconds");
            v
        }).collect::<Vec<_>>(),
        history.lines().map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("seconds");
            v
        }).collect::<Vec<_>>()
    );

    fails_with_one_line(&root, &["eval", "--ckpt", "run/missing", "--data", "run/test.jsonl"]);
    fails_with_one_line(&root, &["eval", "--ckpt", "run/best", "--data", "nope.jsonl"]);
}

#[test]
fn df_baseline_trains_from_config() {
    let (_d, root) = setup();
    let mut cfg = TINY.to_string();
    cfg.push_str("model.kind = df\n");
    std::fs::write(root.join("df.cfg"), cfg).unwrap();
    ok(&root, &["train", "--config", "df.cfg", "--data", "data.jsonl", "--out", "df"]);
    ok(&root, &["eval", "--ckpt", "df", "--data", "df/test.jsonl", "--out", "df-eval"]);
    fails_with_one_line(&root, &["augment-dump", "--ckpt", "df", "--data", "data.jsonl"]);
}

#[test]
fn ablate_merges_grid_runs() {
    let (_d, root) = setup();
    let stdout = ok(&root, &["ablate", "--config", "tiny.cfg", "--data", "data.jsonl", "--grid", "ra,ac+am", "--out", "abl"]);
    assert_eq!(listing(&root.join("abl")), vec!["ac+am", "comparison.json", "comparison.txt", "config.cfg", "ra"]);
    let table = std::fs::read_to_string(root.join("abl/comparison.txt")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('-')).collect();
    assert_eq!(rows.len(), 3, "{table}");
    assert!(rows[1].starts_with("ra"));
    assert!(stdout.contains("ac+am"));
    let sub = std::fs::read_to_string(root.join("abl/ra/config.cfg")).unwrap();
    assert!(sub.contains("ablation.use_random_aug = true"));
    fails_with_one_line(&root, &["ablate", "--config", "tiny.cfg", "--data", "data.jsonl", "--grid", "ra+am", "--out", "bad"]);
    assert!(!root.join("bad").exists());
}

#[test]
fn augment_dump_writes_triples_consistent_with_indicators() {
    let (_d, root) = setup();
    ok(&root, &["augment-dump", "--config", "tiny.cfg", "--untrained", "--data", "data.jsonl", "-n", "2", "--out", "dump"]);
    let names = listing(&root.join("dump"));
    assert_eq!(names.iter().filter(|n| n.ends_with(".json") && n.starts_with("sample")).count(), 6);
    assert_eq!(names.iter().filter(|n| n.ends_with(".png")).count(), 6);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(root.join("dump/manifest.json")).unwrap()).unwrap();
    for (i, entry) in manifest.as_array().unwrap().iter().enumerate() {
        let load = |kind: &str| -> Vec<i8> {
            let v: Value = serde_json::from_str(&std::fs::read_to_string(root.join(format!("dump/sample{i}_{kind}.json"))).unwrap()).unwrap();
            v["values"].as_array().unwrap().iter().map(|x| x.as_i64().unwrap() as i8).collect()
        };
        let (orig, crop, mask) = (load("original"), load("cropped"), load("masked"));
        let ds = load_dataset(root.join("data.jsonl")).unwrap();
        assert_eq!(orig, ds.samples()[i].trace.values());

        if let Some(span) = entry["crop_span"].as_array() {
            let (lo, hi) = (span[0].as_u64().unwrap() as usize, span[1].as_u64().unwrap() as usize);
            for (j, (c, o)) in crop.iter().zip(&orig).enumerate() {
                assert_eq!(*c, if (lo..=hi).contains(&j) { *o } else { 0 });
            }
        }

        let map: Vec<f64> = entry["map"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let phi = entry["mask_threshold"].as_f64().unwrap();
        let s_m = mask_indicator(&normalize_minmax(&upsample_linear(&map, orig.len()).unwrap()), phi);
        for ((m, o), b) in mask.iter().zip(&orig).zip(s_m.bits()) {
            assert_eq!(*m, o * *b as i8);
        }
        let img = image::open(root.join(format!("dump/sample{i}_masked.png"))).unwrap();
        assert_eq!(img.width(), 500);
    }
    fails_with_one_line(&root, &["augment-dump", "--data", "data.jsonl", "--out", "dump2"]);
}

#[test]
fn bad_invocations_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    fails_with_one_line(dir.path(), &["frobnicate"]);
    fails_with_one_line(dir.path(), &["train", "--bogus"]);
    fails_with_one_line(dir.path(), &["train", "--data", "missing.jsonl"]);
    std::fs::write(dir.path().join("bad.cfg"), "model.filterz = 3\n").unwrap();
    let err = fails_with_one_line(dir.path(), &["synth", "--config", "bad.cfg"]);
    assert!(err.contains("model.filterz"));
}
