use std::path::Path;
use std::process::{Command, Output};

fn maskflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn maskflow")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = maskflow(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stderr),
        String::from_utf8_lossy(&o.stdout)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    maskflow(dir, args).status.code().unwrap()
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// Byte equality, except that JSON reports are compared without their
/// run-specific paths.
fn same_artifact(a: &Path, b: &Path) -> bool {
    if a.extension().is_some_and(|e| e == "json") {
        let strip = |p: &Path| {
            let mut v: serde_json::Value = serde_json::from_slice(&bytes(p)).unwrap();
            if let Some(c) = v.get_mut("config").and_then(|c| c.as_object_mut()) {
                c.remove("paths");
            }
            v
        };
        return strip(a) == strip(b);
    }
    bytes(a) == bytes(b)
}

fn zero_pgm(path: &Path, side: usize) {
    let mut b = format!("P5\n{side} {side}\n255\n").into_bytes();
    b.resize(b.len() + side * side, 0);
    std::fs::write(path, b).unwrap();
}

fn ppm_pixels(p: &Path) -> (usize, Vec<u8>) {
    let b = bytes(p);
    let text = String::from_utf8_lossy(&b[..20]).to_string();
    let side: usize = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    (side, b[b.len() - 3 * side * side..].to_vec())
}

#[test]
fn complexity_table_has_the_module_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["complexity", "--mode", "paper", "--out", "c"]);
    assert!(out.contains("6,270,592"), "{out}");
    assert!(out.contains("1,312,256"), "{out}");
    let json: serde_json::Value = serde_json::from_slice(&bytes(tmp.path().join("c/complexity.json"))).unwrap();
    assert_eq!(json["command"], "complexity");
    assert!(json["config"]["pasl"].is_object());
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["edit", "--prompt-tgt", "x", "--out", "e"]), 2);
    assert_eq!(code(d, &["complexity", "--mode", "bogus"]), 2);
    assert_eq!(code(d, &["no-such-command"]), 2);
    assert_eq!(code(d, &["edit", "--image", "a.bmp", "--mask", "m.pgm", "--prompt-tgt", "x", "--out", "e"]), 2);
    std::fs::write(d.join("bad.jsonl"), "{bad\n").unwrap();
    assert_eq!(code(d, &["metrics", "--records", "bad.jsonl"]), 3);
    assert_eq!(code(d, &["eval-pasl", "--data", "missing", "--checkpoint", "missing"]), 3);
    std::fs::write(d.join("cfg.json"), r#"{"seed": 1, "bogus": true}"#).unwrap();
    assert_eq!(code(d, &["complexity", "--config", "cfg.json"]), 3);
}

#[test]
fn full_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for run in ["a", "b"] {
        let data = format!("{run}/data");
        let ck = format!("{run}/ck");
        ok(d, &["dataset", "--n", "12", "--size", "64", "--seed", "3", "--out", &data]);
        ok(d, &["train-pasl", "--data", &data, "--epochs", "1", "--seed", "3", "--out", &ck]);
        let eval = ok(d, &["eval-pasl", "--data", &data, "--checkpoint", &ck, "--out", &format!("{run}/eval")]);
        assert!(eval.contains("mean IoU"), "{eval}");
        let image = format!("{data}/images/p00000.ppm");
        ok(
            d,
            &[
                "edit", "--image", &image, "--pasl", &ck, "--prompt-tgt", "a portrait with blond hair",
                "--mask-prompt", "the hair", "--N", "6", "--seed", "3", "--out", &format!("{run}/edit"),
            ],
        );
        ok(d, &["invert", "--image", &image, "--N", "6", "--out", &format!("{run}/inv")]);
        ok(d, &["denoise", "--latent", &format!("{run}/inv/latent.fstn"), "--N", "6", "--out", &format!("{run}/den")]);
        ok(d, &["rf-demo2d", "--steps", "50", "--out", &format!("{run}/demo")]);
        ok(
            d,
            &[
                "sweep", "--images", "1", "--N", "4", "--T", "1,2", "--strategies", "latent_only,s2d", "--noise", "0",
                "--out", &format!("{run}/sweep"),
            ],
        );
    }
    for f in [
        "data/manifest.jsonl",
        "data/images/p00000.fstn",
        "data/masks/p00000_hair.pgm",
        "ck/proj.fc2.w.fstn",
        "ck/train_report.json",
        "eval/eval_report.json",
        "edit/edited.fstn",
        "edit/edited.ppm",
        "edit/mask.pgm",
        "edit/edit_report.json",
        "inv/latent.fstn",
        "den/image.ppm",
        "demo/demo2d.json",
        "sweep/sweep.json",
        "sweep/sweep.txt",
    ] {
        assert!(same_artifact(&d.join("a").join(f), &d.join("b").join(f)), "{f} differs between runs");
    }
    let table = std::fs::read_to_string(d.join("a/sweep/sweep.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("latent_only") || l.starts_with("s2d")).count(), 4);

    let other = ok(d, &["dataset", "--n", "12", "--size", "64", "--seed", "4", "--out", "c"]);
    assert!(other.contains("samples"));
    assert!(bytes(d.join("a/data/images/p00000.fstn")) != bytes(d.join("c/images/p00000.fstn")));

    let records = format!(
        "{}\n",
        serde_json::json!({
            "id": "p0",
            "target_attribute": "hair_blond",
            "target_score": 0.9,
            "preserve": {"beard": {"score": 0.8, "label": true}},
            "source_path": "a/data/images/p00000.ppm",
            "edited_path": "a/edit/edited.ppm",
            "mask_path": "a/edit/mask.pgm"
        })
    );
    std::fs::write(d.join("rec.jsonl"), records).unwrap();
    let m = ok(d, &["metrics", "--records", "rec.jsonl", "--out", "m"]);
    assert!(m.contains("AttrEdit") && m.contains("PSNR"), "{m}");
}

#[test]
fn zero_mask_value_edit_reconstructs_the_source() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["dataset", "--n", "1", "--size", "64", "--val-frac", "0", "--out", "data"]);
    zero_pgm(&d.join("zero.pgm"), 64);
    let out = ok(
        d,
        &[
            "edit", "--image", "data/images/p00000.ppm", "--mask", "zero.pgm",
            "--prompt-tgt", "a portrait photo of a person", "--T", "0", "--N", "10", "--out", "e",
        ],
    );
    assert!(out.contains("value_only"), "{out}");
    let (side, src) = ppm_pixels(&d.join("data/images/p00000.ppm"));
    let (_, ed) = ppm_pixels(&d.join("e/edited.ppm"));
    assert_eq!(side, 64);
    let max = src.iter().zip(&ed).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
    assert!(max <= 1, "max 8-bit difference {max}");
    let report: serde_json::Value = serde_json::from_slice(&bytes(d.join("e/edit_report.json"))).unwrap();
    assert!(report["result"]["metrics"]["psnr"].as_f64().unwrap() > 40.0);
    assert_eq!(report["result"]["mask"]["coverage"].as_f64().unwrap(), 0.0);
}
