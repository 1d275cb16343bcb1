use std::path::Path;
use std::process::Command;

fn damsdan(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_damsdan")).args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        r#"out_dir = "out"

[data.synth]
num_domains = 3
classes = 3
feature_dim = 6
class_separation = 4.0
domain_shift = 0.5
samples_per_class_per_domain = 12
noise_sigma = 0.5
seed = 4

[train]
epochs = 3
batch_size = 16
{extra}
[analysis]
checkpoint = "out/checkpoint_fold0.json"
channels = 3
bands = 2
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_run_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");

    let data_dir = dir.path().join("data");
    let out = damsdan(&["synth", "--config", &cfg, "--out", data_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data_dir.join("manifest.json").exists());
    assert!(data_dir.join("domain_s3_1.csv").exists());

    let out = damsdan(&["run", "--config", &cfg, "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("out");
    for f in [
        "metrics.json",
        "confusion.csv",
        "weights_fold0.csv",
        "pseudo_labels_fold0.csv",
        "checkpoint_fold0.json",
    ] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["run"]["train"]["seed"], 2);
    assert_eq!(metrics["run"]["data"]["protocol"], "holdout");
    assert_eq!(metrics["metrics"]["folds"].as_array().unwrap().len(), 1);
    let acc = metrics["metrics"]["mean_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let out = damsdan(&["analyze", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mi = std::fs::read_to_string(run_dir.join("mi_topography.csv")).unwrap();
    assert_eq!(mi.lines().count(), 1 + 3 * 6);
    let emb = std::fs::read_to_string(run_dir.join("embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + 3 * 36);
}

#[test]
fn ablation_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = damsdan(&["run", "--config", &cfg, "--ablate", "ada,cda"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("out/metrics.json")).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&text).unwrap();
    let ablation = &metrics["run"]["train"]["ablation"];
    assert_eq!(ablation["ada"], false);
    assert_eq!(ablation["cda"], false);
    assert_eq!(ablation["dasw"], true);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();

    let cfg = write_config(dir.path(), "bogus_key = 1\n");
    assert_eq!(damsdan(&["run", "--config", &cfg]).status.code(), Some(2));

    let cfg = write_config(dir.path(), "");
    assert_eq!(damsdan(&["run", "--config", &cfg, "--ablate", "nothing"]).status.code(), Some(2));

    let missing = dir.path().join("absent.toml");
    assert_eq!(damsdan(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(5));

    let manifest_cfg = dir.path().join("manifest.toml");
    std::fs::write(&manifest_cfg, "[data]\nmanifest = \"nowhere/manifest.json\"\n").unwrap();
    let out = damsdan(&["run", "--config", manifest_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));

    // A malformed domain file is a data error.
    let data = dir.path().join("bad");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::write(
        data.join("manifest.json"),
        r#"{"classes": 2, "feature_dim": 2, "domains": [{"subject": 1, "session": 1, "path": "a.csv"}]}"#,
    )
    .unwrap();
    std::fs::write(data.join("a.csv"), "label,f0,f1\n0,1.0\n").unwrap();
    std::fs::write(&manifest_cfg, "[data]\nmanifest = \"bad/manifest.json\"\n").unwrap();
    let out = damsdan(&["run", "--config", manifest_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("a.csv"));
}
