use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sfanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfanet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sfanet(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "\
[synth]
images = 4
width = 32
height = 32
min_heads = 2
max_heads = 6

[augment]
crop = [32, 32]

[train]
batch_size = 2
max_steps = 2
eval_every = 1
";

#[test]
fn synth_gt_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let common = ["--preset", "desk", "--config", s(&cfg)];

    let data = root.join("data");
    ok(&[&["synth"], &common[..], &["--out", s(&data)]].concat());
    let manifest = data.join("manifest.json");
    assert!(manifest.exists());

    let gt = root.join("gt");
    let stdout = ok(&[&["gen-gt", "--manifest", s(&manifest), "--half"], &common[..], &["--out", s(&gt)]].concat());
    assert_eq!(stdout.lines().count(), 4);
    for suffix in ["_density.sfdm", "_density.pgm", "_attention.pgm", "_density_half.sfdm"] {
        assert!(gt.join(format!("synth_000{suffix}")).exists(), "{suffix}");
    }

    let gt_eval = root.join("gt_eval");
    ok(&[&["eval", "--manifest", s(&manifest), "--pred-dir", s(&gt)], &common[..], &["--out", s(&gt_eval)]].concat());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(gt_eval.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 4);
    assert!(report["mae"].as_f64().unwrap() < 1e-5);

    let run = root.join("run");
    ok(&[&["train", "--train-manifest", s(&manifest), "--val-manifest", s(&manifest)], &common[..], &["--out", s(&run)]].concat());
    for f in ["last.sfac", "best.sfac", "config.toml", "report.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = run.join("last.sfac");

    let e1 = root.join("e1");
    let e2 = root.join("e2");
    for e in [&e1, &e2] {
        ok(&["eval", "--manifest", s(&manifest), "--checkpoint", s(&ck), "--out", s(e)]);
    }
    let j1 = fs::read(e1.join("eval.json")).unwrap();
    assert_eq!(j1, fs::read(e2.join("eval.json")).unwrap());
    let csv = fs::read_to_string(e1.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let maps = root.join("maps");
    let stdout = ok(&["infer", "--checkpoint", s(&ck), "--image", s(&data.join("synth_001.png")), "--out", s(&maps)]);
    assert!(stdout.contains("count"));
    assert!(maps.join("synth_001_maps.png").exists());
    assert!(maps.join("synth_001_density.sfdm").exists());
}

#[test]
fn missing_config_names_the_path() {
    let out = sfanet(&["--config", "/no/such/run.toml", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/run.toml"));
}

#[test]
fn unknown_subcommand_and_flag_are_rejected() {
    for args in [&["frobnicate"][..], &["synth", "--bogus"][..], &["--preset", "nope", "synth"][..]] {
        let out = sfanet(args);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn grad_check_passes() {
    let out = sfanet(&["grad-check"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("all checks passed"));
}
