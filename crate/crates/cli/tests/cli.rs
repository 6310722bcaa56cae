use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segcn_core::imaging::ColorImage;
use serde_json::Value;

const TINY: &str = r#"{
  "data": {"synth": {"n_images": 6, "size": 32, "seed": 3}},
  "model": {"generator": {"widths": [4, 8]}, "discriminator": {"widths": [4, 8]}, "semantic": {"widths": [4, 8]}},
  "training": {"epochs": 1, "batch_size": 2, "patch_size": 32, "semantic_pretraining": {"epochs": 2}}
}"#;

fn segcn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segcn"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run segcn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A temp dir holding `tiny.json` and the synthetic dataset under `data/`.
fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), config).unwrap();
    let out = segcn(
        &["synth-data", "--config", "tiny.json", "--out", "data"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = walkdir::WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            (
                e.path().strip_prefix(root).unwrap().to_path_buf(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn synth_data_populates_and_repeats_exactly() {
    let dir = workspace(TINY);
    let first = tree(&dir.path().join("data"));
    assert_eq!(first.len(), 4 * 6);
    assert!(first
        .iter()
        .any(|(p, _)| p == Path::new("domain_b/masks/0005.png")));
    let out = segcn(
        &["synth-data", "--config", "tiny.json", "--out", "data"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    assert_eq!(tree(&dir.path().join("data")), first);
    assert!(String::from_utf8_lossy(&out.stdout).contains("domain_a: 6 images"));
}

#[test]
fn missing_out_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&segcn(&["synth-data"], dir.path())), 2);
}

#[test]
fn schema_violation_lists_every_offending_key() {
    let dir = workspace(TINY);
    fs::write(
        dir.path().join("bad.json"),
        r#"{"trainig": {}, "model": {"generator": {"depth": 2}}}"#,
    )
    .unwrap();
    let out = segcn(
        &[
            "train", "--config", "bad.json", "--data", "data", "--out", "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(
        err.contains("trainig") && err.contains("model.generator.depth"),
        "{err}"
    );
    assert!(
        !dir.path().join("run").exists(),
        "no work before validation"
    );
}

#[test]
fn train_then_resume_continues_the_step_column() {
    let dir = workspace(TINY);
    let p = dir.path();
    let out = segcn(
        &[
            "train",
            "--config",
            "tiny.json",
            "--data",
            "data",
            "--out",
            "run",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(p.join("run/checkpoint/manifest.json").exists());
    // 6 patches at batch 2: 3 steps per epoch.
    let steps = |run: &str| -> Vec<u64> {
        fs::read_to_string(p.join(run).join("losses.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect()
    };
    assert_eq!(steps("run"), [1, 2, 3]);

    let two = TINY.replace("\"epochs\": 1", "\"epochs\": 2");
    fs::write(p.join("two.json"), &two).unwrap();
    let out = segcn(
        &[
            "train", "--config", "two.json", "--data", "data", "--out", "run", "--resume",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(steps("run"), [1, 2, 3, 4, 5, 6]);

    let out = segcn(
        &[
            "train", "--config", "two.json", "--data", "data", "--out", "straight",
        ],
        p,
    );
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read_to_string(p.join("run/losses.csv")).unwrap(),
        fs::read_to_string(p.join("straight/losses.csv")).unwrap()
    );

    let other = two.replace("\"batch_size\": 2", "\"batch_size\": 3");
    fs::write(p.join("other.json"), other).unwrap();
    let out = segcn(
        &[
            "train",
            "--config",
            "other.json",
            "--data",
            "data",
            "--out",
            "run",
            "--resume",
        ],
        p,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn non_finite_loss_exits_one_naming_the_component() {
    let dir = workspace(&TINY.replace(
        "\"batch_size\": 2",
        "\"batch_size\": 2, \"lambda_cyc\": 1e308",
    ));
    let out = segcn(
        &[
            "train",
            "--config",
            "tiny.json",
            "--data",
            "data",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("non-finite value in `g_"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn normalize_argument_errors_are_usage_errors() {
    let dir = workspace(TINY);
    let p = dir.path();
    let base = [
        "normalize",
        "--input",
        "data/domain_a/images",
        "--output",
        "out",
    ];
    for method in ["segcn", "cyclegan", "reinhard", "macenko", "foo"] {
        let mut args = base.to_vec();
        args.extend(["--method", method]);
        assert_eq!(code(&segcn(&args, p)), 2, "{method}");
    }
    assert!(!p.join("out").exists());
}

#[test]
fn reinhard_self_target_roundtrips_and_mirrors_tree() {
    let dir = workspace(TINY);
    let p = dir.path();
    let out = segcn(
        &[
            "normalize",
            "--method",
            "reinhard",
            "--input",
            "data",
            "--output",
            "out",
            "--target",
            "data/domain_a/images/0002.png",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (src, dst) = (tree(&p.join("data")), tree(&p.join("out")));
    assert_eq!(src.len(), dst.len());
    assert!(src.iter().zip(&dst).all(|(a, b)| a.0 == b.0));
    let a = ColorImage::load(&p.join("data/domain_a/images/0002.png")).unwrap();
    let b = ColorImage::load(&p.join("out/domain_a/images/0002.png")).unwrap();
    assert!(a.max_abs_diff(&b) <= 2.0, "{}", a.max_abs_diff(&b));
}

#[test]
fn every_method_normalizes_and_evaluate_reports() {
    let dir = workspace(TINY);
    let p = dir.path();
    let out = segcn(
        &[
            "train",
            "--config",
            "tiny.json",
            "--data",
            "data",
            "--out",
            "run",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for method in ["segcn", "cyclegan", "reinhard", "macenko"] {
        let out = segcn(
            &[
                "normalize",
                "--method",
                method,
                "--input",
                "data/domain_a/images",
                "--output",
                method,
                "--checkpoint",
                "run",
                "--target",
                "data/domain_b/images/0000.png",
                "--config",
                "tiny.json",
            ],
            p,
        );
        assert_eq!(code(&out), 0, "{method}: {}", stderr(&out));
        assert_eq!(tree(&p.join(method)).len(), 6);
    }
    let first = tree(&p.join("segcn"));
    segcn(
        &[
            "normalize",
            "--method",
            "segcn",
            "--input",
            "data/domain_a/images",
            "--output",
            "segcn",
            "--checkpoint",
            "run",
        ],
        p,
    );
    assert_eq!(tree(&p.join("segcn")), first, "rerun is byte-identical");

    let out = segcn(
        &[
            "evaluate",
            "--original",
            "data/domain_a/images",
            "--normalized",
            "segcn",
            "--masks",
            "data/domain_a/masks",
            "--checkpoint",
            "run",
            "--report",
            "reports/segcn.json",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(p.join("reports/segcn.json")).unwrap()).unwrap();
    for key in ["nmi", "cwssim", "ssim", "dice"] {
        let agg = &report["aggregates"][key];
        for field in ["mean", "sd", "cv"] {
            assert!(agg[field].is_f64(), "{key}.{field}");
        }
    }
    assert_eq!(report["per_image"].as_array().unwrap().len(), 6);
    let csv = fs::read_to_string(p.join("reports/segcn.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("name,nmi,cwssim,ssim,dice"));
    assert_eq!(csv.lines().count(), 1 + 6 + 3);

    let out = segcn(
        &[
            "evaluate",
            "--original",
            "data/domain_a/images",
            "--normalized",
            "segcn",
            "--masks",
            "data/domain_a/masks",
            "--report",
            "r.json",
        ],
        p,
    );
    assert_eq!(code(&out), 2, "masks without a checkpoint");
}

#[test]
fn evaluate_identity_and_identical_sets() {
    let dir = workspace(TINY);
    let p = dir.path();
    let out = segcn(
        &[
            "evaluate",
            "--original",
            "data/domain_a/images",
            "--normalized",
            "data/domain_a/images",
            "--report",
            "self.json",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(p.join("self.json")).unwrap()).unwrap();
    assert!((report["aggregates"]["cwssim"]["mean"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!(report["aggregates"].get("dice").is_none());

    let same = p.join("same");
    fs::create_dir_all(&same).unwrap();
    for i in 0..4 {
        fs::copy(
            p.join("data/domain_a/images/0001.png"),
            same.join(format!("{i}.png")),
        )
        .unwrap();
    }
    let out = segcn(
        &[
            "evaluate",
            "--original",
            "same",
            "--normalized",
            "same",
            "--report",
            "same.json",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(p.join("same.json")).unwrap()).unwrap();
    assert_eq!(report["aggregates"]["nmi"]["sd"].as_f64(), Some(0.0));
    assert_eq!(report["aggregates"]["nmi"]["cv"].as_f64(), Some(0.0));
}
