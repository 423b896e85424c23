use std::path::Path;
use std::process::Command;

use promptseg3d::{nifti, DatasetManifest};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_promptseg3d"));
    c.arg("--log-level").arg("warn");
    c
}

fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn full_pipeline_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        &d.join("synth.json"),
        r#"{"count": 3, "dims": [32, 32, 32], "spacing_mm": 1.0, "size_range_mm": [17, 26]}"#,
    );
    ok(bin()
        .args(["synth", "--seed", "4", "--config"])
        .arg(d.join("synth.json"))
        .arg("--out-dir")
        .arg(d.join("raw")));
    let raw = DatasetManifest::load(&d.join("raw/manifest.json")).unwrap();
    assert_eq!(raw.len(), 3);

    let out = ok(bin()
        .args(["curate", "--connectivity", "26", "--symmetric-classes", "kidney"])
        .arg("--manifest")
        .arg(d.join("raw/manifest.json"))
        .arg("--out-dir")
        .arg(d.join("cur")));
    assert!(out.contains("3 of 3 cases curated"), "{out}");
    assert!(d.join("cur/curation_report.jsonl").exists());

    write(
        &d.join("train.json"),
        r#"{"epochs": 1, "clicks_per_sample": 2, "seed": 1, "optimizer": {"warmup_steps": 1}}"#,
    );
    ok(bin()
        .args(["train", "--stage", "pretrain", "--net", "test"])
        .arg("--manifest")
        .arg(d.join("cur/manifest.json"))
        .arg("--config")
        .arg(d.join("train.json"))
        .arg("--out")
        .arg(d.join("s1")));
    let metrics = std::fs::read_to_string(d.join("s1/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["step"].is_u64() && v["loss"].is_f64() && v["dice"].is_f64(), "{line}");
    }

    // Fine-tuning refuses to run without a curation report.
    let out = bin()
        .args(["train", "--stage", "finetune"])
        .arg("--init")
        .arg(d.join("s1/final.psg"))
        .arg("--manifest")
        .arg(d.join("cur/manifest.json"))
        .arg("--config")
        .arg(d.join("train.json"))
        .arg("--out")
        .arg(d.join("s2"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    ok(bin()
        .args(["train", "--stage", "finetune"])
        .arg("--init")
        .arg(d.join("s1/final.psg"))
        .arg("--curation-report")
        .arg(d.join("cur/curation_report.jsonl"))
        .arg("--manifest")
        .arg(d.join("cur/manifest.json"))
        .arg("--config")
        .arg(d.join("train.json"))
        .arg("--out")
        .arg(d.join("s2")));
    let ckpt = d.join("s2/final.psg");

    let image = &raw.entries[0].image_path;
    ok(bin()
        .args(["infer", "--click", "16,16,16,+", "--click", "0,0,0,-"])
        .arg("--volume")
        .arg(image)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(d.join("mask.nii.gz")));
    let mask = nifti::read_volume(&d.join("mask.nii.gz")).unwrap();
    assert_eq!(mask.dims, nifti::read_volume(image).unwrap().dims);

    let out = bin()
        .args(["infer", "--click", "16,16,16,-"])
        .arg("--volume")
        .arg(image)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(d.join("bad.nii.gz"))
        .output()
        .unwrap();
    assert!(!out.status.success());

    ok(bin()
        .args(["eval", "--budgets", "1,3", "--seed", "7"])
        .arg("--manifest")
        .arg(d.join("cur/manifest.json"))
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--report")
        .arg(d.join("report")));
    for f in ["records.jsonl", "summary.jsonl", "timings.jsonl", "report.txt"] {
        assert!(d.join("report").join(f).exists(), "{f}");
    }
    let records = std::fs::read_to_string(d.join("report/records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 3);

    ok(bin()
        .arg("export-encoder")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(d.join("enc.psg")));
    let enc: promptseg3d::net3d::EncoderState<f32> = promptseg3d::net3d::import_encoder(&d.join("enc.psg")).unwrap();
    drop(enc);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = bin()
        .args([
            "curate",
            "--manifest",
            "/nonexistent.json",
            "--out-dir",
            "/tmp/x",
            "--connectivity",
            "8",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("connectivity"));
    let out = bin()
        .args([
            "infer",
            "--volume",
            "v",
            "--checkpoint",
            "c",
            "--out",
            "o",
            "--click",
            "1,2,+",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
