use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 5,
  "train": { "pool_size": 40, "backbone_epochs": 3, "expert_epochs": 2 },
  "experiment": { "corpus": { "in_dist": 12, "ood_remap": 12, "ood_unseen_token": 12 } },
  "ablation": { "step_prompts": 2 },
  "gp": { "n_values": [2, 4, 8], "seeds": 2 }
}"#;

fn emoe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emoe"))
        .current_dir(dir)
        .arg("--config")
        .arg(dir.join("run.json"))
        .args(args)
        .output()
        .unwrap()
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), TINY).unwrap();
    dir
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn train_then_score() {
    let dir = workdir();
    let out = emoe(dir.path(), &["--out-dir", "out", "train"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("out/checkpoints");
    let names: Vec<_> = files(&ckpt).into_iter().map(|(p, _)| p).collect();
    assert_eq!(names.len(), 5);
    assert!(ckpt.join("backbone.emoe").exists());
    assert!(ckpt.join("expert_3.emoe").exists());

    let out = emoe(dir.path(), &["--out-dir", "out", "score", "a red circle"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["reported"].as_f64().unwrap() > 0.0);
    assert_eq!(v["space"], "mid_post");

    let out = emoe(dir.path(), &["--out-dir", "out", "score", "a red circle", "--fast", "--threshold", "0"]);
    assert_eq!(code(&out), 3);
    assert!(!files(&dir.path().join("out")).iter().any(|(p, _)| p.to_string_lossy().starts_with("image_")));

    let out = emoe(dir.path(), &["--out-dir", "out", "score", "a red circle", "--fast"]);
    assert_eq!(code(&out), 0);
    assert!(files(&dir.path().join("out")).iter().any(|(p, _)| p.to_string_lossy().starts_with("image_")));

    let out = emoe(dir.path(), &["--out-dir", "out", "score", "a red circle", "--space", "z_next", "--lang", "xx-remap"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let out = emoe(dir.path(), &["--out-dir", "out", "generate", "a blue ring"]);
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("out/generate.json").exists());
}

#[test]
fn failures_exit_with_code_two() {
    let dir = workdir();
    let out = emoe(dir.path(), &["--out-dir", "nothing", "score", "a red dot"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    fs::write(dir.path().join("run.json"), r#"{"sed": 1}"#).unwrap();
    assert_eq!(code(&emoe(dir.path(), &["train"])), 2);

    fs::write(dir.path().join("run.json"), r#"{"train": {"top_n": 9}}"#).unwrap();
    assert_eq!(code(&emoe(dir.path(), &["train"])), 2);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = workdir();
    assert_eq!(code(&emoe(dir.path(), &["--out-dir", "out", "train"])), 0);
    let path = dir.path().join("out/checkpoints/expert_1.emoe");
    let mut bytes = fs::read(&path).unwrap();
    let i = bytes.len() / 2;
    bytes[i] = bytes[i].wrapping_add(1);
    fs::write(&path, bytes).unwrap();
    let out = emoe(dir.path(), &["--out-dir", "out", "score", "a red dot"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("CRC"));
}

#[test]
fn runs_are_byte_identical() {
    let a = workdir();
    let b = workdir();
    for dir in [&a, &b] {
        for cmd in [&["train"][..], &["experiment"], &["gp-probe"]] {
            let mut args = vec!["--out-dir", "out"];
            args.extend_from_slice(cmd);
            let out = emoe(dir.path(), &args);
            assert_eq!(code(&out), 0, "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
        }
    }
    let fa = files(&a.path().join("out"));
    let fb = files(&b.path().join("out"));
    assert!(fa.iter().any(|(p, _)| p.ends_with("report.json")));
    assert!(fa.iter().any(|(p, _)| p.ends_with("ablation.json")));
    assert_eq!(fa.len(), fb.len());
    for ((pa, da), (pb, db)) in fa.iter().zip(&fb) {
        assert_eq!(pa, pb);
        assert!(da == db, "{} differs", pa.display());
    }
}

#[test]
fn seed_flag_changes_the_checkpoints() {
    let dir = workdir();
    assert_eq!(code(&emoe(dir.path(), &["--out-dir", "a", "train"])), 0);
    assert_eq!(code(&emoe(dir.path(), &["--out-dir", "b", "--seed", "6", "train"])), 0);
    let a = fs::read(dir.path().join("a/checkpoints/backbone.emoe")).unwrap();
    let b = fs::read(dir.path().join("b/checkpoints/backbone.emoe")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn shipped_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["default.json", "smoke.json", "quartile.json"] {
        let cfg = emoe_core::cli::RunConfig::load(&root.join(name)).unwrap();
        cfg.validate().unwrap();
    }
    let default = emoe_core::cli::RunConfig::load(&root.join("default.json")).unwrap();
    assert_eq!(default, emoe_core::cli::RunConfig::default());
}
