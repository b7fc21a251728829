use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const EXE: &str = env!("CARGO_BIN_EXE_mixpretrain");

const TINY_CONFIG: &str = r#"seed = 1

[corpus]
source = "synthetic"
seed = 3
n_images = 40
image_size = 16

[data]
examples_per_task = 40
eval_examples_per_task = 8
eval_tasks = ["oa_exists", "oa_which"]

[mixture]
tasks = ["caption", "oa_exists", "oa_which"]

[schedule]
total_steps = 12
batch_size = 4

[model]
d_model = 16
n_heads = 2
n_encoder_layers = 1
n_decoder_layers = 1
d_ff = 32
patch_size = 4
image_size = 16
max_prompt_len = 24
max_target_len = 12

[train]
checkpoint_every = 5
eval_batch_size = 8
log_every = 5
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(EXE)
        .args(args)
        .current_dir(dir)
        .env_remove("MIXPRETRAIN_DATA")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn write_annotations(dir: &Path) {
    fs::write(dir.join("classes.csv"), "/m/dog,Dog\n/m/cat,Cat\n/m/car,Car\n").unwrap();
    fs::write(
        dir.join("labels.csv"),
        "ImageID,Source,LabelName,Confidence\n\
         img1,verification,/m/dog,1\n\
         img1,verification,/m/cat,0\n\
         img2,verification,/m/car,1\n",
    )
    .unwrap();
    fs::write(
        dir.join("captions.jsonl"),
        "{\"image_id\":\"img1\",\"caption\":\"a dog on grass\"}\n\
         {\"image_id\":\"img2\",\"caption\":\"a red car\"}\n",
    )
    .unwrap();
}

#[test]
fn ingest_valid_files_reports_counts() {
    let tmp = tempfile::tempdir().unwrap();
    write_annotations(tmp.path());
    let o = run(
        tmp.path(),
        &[
            "ingest",
            "--classes",
            "classes.csv",
            "--labels",
            "labels.csv",
            "--captions",
            "captions.jsonl",
            "--out",
            "corpus",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("corpus/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["counts"]["classes"], 3);
    assert_eq!(manifest["counts"]["labels"], 3);
    assert_eq!(manifest["counts"]["captions"], 2);
    assert_eq!(manifest["counts"]["images"], 2);
}

#[test]
fn ingest_malformed_csv_cites_line() {
    let tmp = tempfile::tempdir().unwrap();
    write_annotations(tmp.path());
    fs::write(
        tmp.path().join("labels.csv"),
        "ImageID,Source,LabelName,Confidence\nimg1,verification,/m/dog,1\nimg2,verification,/m/car,maybe\n",
    )
    .unwrap();
    let o = run(tmp.path(), &["ingest", "--classes", "classes.csv", "--labels", "labels.csv", "--out", "corpus"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("labels.csv") && err.contains("line 3"), "{err}");
}

#[test]
fn ingest_missing_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    write_annotations(tmp.path());
    let o = run(tmp.path(), &["ingest", "--classes", "classes.csv", "--labels", "absent.csv", "--out", "corpus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.csv"));
}

#[test]
fn synth_writes_eight_files_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), TINY_CONFIG).unwrap();
    let o = run(tmp.path(), &["ingest", "--synthetic", "--config", "run.toml", "--out", "corpus"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tasks = "caption,completion,itm,mlm,oa_list,oa_exists,oa_andor,oa_which";
    for out in ["a", "b"] {
        let o = run(
            tmp.path(),
            &["synth", "--corpus", "corpus", "--tasks", tasks, "--count", "30", "--seed", "5", "--out", out],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut names: Vec<String> =
        fs::read_dir(tmp.path().join("a")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let jsonl: Vec<_> = names.iter().filter(|n| n.ends_with(".jsonl")).collect();
    assert_eq!(jsonl.len(), 8);
    assert!(names.contains(&"synth_manifest.json".to_owned()));
    for n in &names {
        if n.ends_with(".jsonl") {
            assert_eq!(digest(&tmp.path().join("a").join(n)), digest(&tmp.path().join("b").join(n)), "{n}");
        }
    }
}

#[test]
fn synth_without_captions_names_caption() {
    let tmp = tempfile::tempdir().unwrap();
    write_annotations(tmp.path());
    let o = run(tmp.path(), &["ingest", "--classes", "classes.csv", "--labels", "labels.csv", "--out", "corpus"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(
        tmp.path(),
        &["synth", "--corpus", "corpus", "--tasks", "caption,oa_exists", "--count", "4", "--out", "tasks"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("caption"), "{}", stderr(&o));
}

#[test]
fn train_copies_config_and_resumes_identically() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), TINY_CONFIG).unwrap();
    let o = run(tmp.path(), &["train", "--config", "run.toml", "--out", "full"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(tmp.path().join("full/config.toml")).unwrap(), TINY_CONFIG.as_bytes());
    assert!(tmp.path().join("full/eval.json").exists());

    let o = run(tmp.path(), &["train", "--config", "run.toml", "--out", "split", "--stop-at", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!tmp.path().join("split/run.json").exists());
    let o = run(tmp.path(), &["train", "--config", "run.toml", "--out", "split", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.bin", "metrics.jsonl", "eval.json"] {
        assert_eq!(digest(&tmp.path().join("full").join(f)), digest(&tmp.path().join("split").join(f)), "{f}");
    }

    let o = run(tmp.path(), &["eval", "--run", "full", "--out", "re-eval"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(digest(&tmp.path().join("full/eval.json")), digest(&tmp.path().join("re-eval/eval.json")));
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), "[schedule]\ntotal_steps = \"many\"\n").unwrap();
    let o = run(tmp.path(), &["train", "--config", "run.toml", "--out", "r"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn score_offline_files() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("gt.jsonl"),
        "{\"id\":\"a\",\"kind\":\"oa_exists\",\"image_id\":\"i\",\"ground_truths\":[\"yes\"]}\n\
         {\"id\":\"b\",\"kind\":\"oa_exists\",\"image_id\":\"i\",\"ground_truths\":[\"no\"]}\n",
    )
    .unwrap();
    fs::write(
        tmp.path().join("pred.jsonl"),
        "{\"id\":\"a\",\"prediction\":\"Yes.\"}\n{\"id\":\"b\",\"prediction\":\"yes\"}\n",
    )
    .unwrap();
    let o = run(tmp.path(), &["score", "--predictions", "pred.jsonl", "--ground-truth", "gt.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["tasks"]["oa_exists"]["mean"], 0.5);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["gradcheck", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("model"));
}

#[test]
fn ablate_custom_grid_and_reaggregate() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), TINY_CONFIG).unwrap();
    fs::write(
        tmp.path().join("grid.toml"),
        "name = \"tiny\"\n\n[[variants]]\nname = \"Caption only\"\ntasks = [\"caption\"]\n\n\
         [[variants]]\nname = \"OA mix\"\ntasks = [\"oa_exists\", \"oa_which\"]\n",
    )
    .unwrap();
    let args =
        ["ablate", "--config", "run.toml", "--grid", "grid.toml", "--seeds", "1,2", "--jobs", "2", "--out", "abl"];
    let o = run(tmp.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let runs: Vec<_> = ["caption-only", "oa-mix"]
        .iter()
        .flat_map(|v| [1, 2].map(|s| tmp.path().join(format!("abl/runs/{v}/seed-{s}/run.json"))))
        .collect();
    assert_eq!(runs.len(), 4);
    assert!(runs.iter().all(|p| p.exists()));
    let table: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("abl/tiny.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
    let csv = fs::read(tmp.path().join("abl/tiny.csv")).unwrap();
    let stamp = fs::metadata(&runs[0]).unwrap().modified().unwrap();

    let o = run(tmp.path(), &[&args[..], &["--aggregate-only"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(tmp.path().join("abl/tiny.csv")).unwrap(), csv);
    let o = run(tmp.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::metadata(&runs[0]).unwrap().modified().unwrap(), stamp);
    assert_eq!(fs::read(tmp.path().join("abl/tiny.csv")).unwrap(), csv);
}

#[test]
fn paper_table1_has_nine_rows() {
    let grid = mixpretrain_cli::ablate::load_grid("paper-table1").unwrap();
    let names: Vec<_> = grid.variants.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "Caption-only",
            "MLM-only",
            "CM-mix",
            "CM-mix+Hard",
            "CM-mix+OA1",
            "OA-2-3-4",
            "CM-mix+OA-2-3-4",
            "CM-mix+OA-mix",
            "CM-mix+Hard+OA-mix"
        ]
    );
    let t2 = mixpretrain_cli::ablate::load_grid("paper-table2").unwrap();
    assert_eq!(t2.variants.len(), 2);
}
