use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capgen::corpus::Dataset;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic50.jsonl")
}

fn capgen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capgen"))
        .args(args)
        .arg("--dataset")
        .arg(fixture())
        .arg("--model-dir")
        .arg(dir.join("models"))
        .arg("--report-dir")
        .arg(dir.join("reports"))
        .env_remove("CAPGEN_DATASET")
        .env_remove("CAPGEN_MODEL_DIR")
        .env_remove("CAPGEN_REPORT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = capgen(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
}

#[test]
fn caption_writes_one_line_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let fast = ["--seed", "3", "--beam-width", "20", "--m-best", "20", "--dmsm-epochs", "2"];
    for stage in ["prepare", "train-mil", "detect", "train-lm", "train-dmsm", "decode", "mert"] {
        ok(dir.path(), &[&[stage][..], &fast].concat());
    }
    ok(dir.path(), &[&["caption", "--caption-split", "all"][..], &fast].concat());
    let text = std::fs::read_to_string(dir.path().join("reports/captions.tsv")).unwrap();
    let ids: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
    let ds = Dataset::load(&fixture()).unwrap();
    assert_eq!(ids.len(), 50);
    assert_eq!(ids, ds.entries.iter().map(|e| e.image_id.as_str()).collect::<Vec<_>>());
}

#[test]
fn evaluate_scores_reference_captions_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::load(&fixture()).unwrap();
    std::fs::create_dir_all(dir.path().join("reports")).unwrap();
    let tsv: String = ds.entries.iter().map(|e| format!("{}\t{}\n", e.image_id, e.captions[0].raw)).collect();
    std::fs::write(dir.path().join("reports/captions.tsv"), tsv).unwrap();
    // all five references, so each hypothesis is one of them
    let o = capgen(dir.path(), &["evaluate", "--seed", "1", "--references", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("reports/report.txt")).unwrap();
    let get = |k: &str| -> f64 { report.lines().find_map(|l| l.strip_prefix(&format!("{k}\t"))).unwrap().parse().unwrap() };
    for k in ["bleu_1", "bleu_2", "bleu_3", "bleu_4"] {
        assert!((get(k) - 1.0).abs() < 1e-12, "{k} = {}", get(k));
    }
    assert_eq!(get("images"), 50.0);
}

#[test]
fn decode_without_language_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["prepare", "train-mil", "detect"] {
        ok(dir.path(), &[stage, "--seed", "1"]);
    }
    let o = capgen(dir.path(), &["decode", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("lm.json"), "{}", stderr(&o));
}

#[test]
fn bad_config_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = capgen(dir.path(), &["prepare", "--seed", "1", "--beam-width", "wide"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("beam_width"), "{}", stderr(&o));

    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "seed = 1\nno_such_key = 2\n").unwrap();
    let o = capgen(dir.path(), &["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
}

#[test]
fn missing_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = capgen(dir.path(), &["prepare"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# shared settings\nseed = 4\nsplit_ratios = 0.6,0.2,0.2\n").unwrap();
    let o = capgen(dir.path(), &["prepare", "--config", cfg.to_str().unwrap(), "--split-ratios", "0.8,0.1,0.1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let split = std::fs::read_to_string(dir.path().join("models/split.json")).unwrap();
    // seed from the file, ratios from the flag
    assert!(split.contains("\"seed\":4"), "{split}");
    assert!(split.contains("\"ratios\":[0.8,0.1,0.1]"), "{split}");
}
