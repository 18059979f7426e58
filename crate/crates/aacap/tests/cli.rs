use std::path::Path;
use std::process::{Command, Output};

fn aacap(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aacap")).arg("--out").arg(out).args(args).output().unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

const TINY: &str = r#"
[train]
batch_size = 4
peak_lr = 3e-3
total_updates = 20
warmup = 2
schedule = "linear"
validate_every = 10
seed = 0

[train_clap]
batch_size = 4
peak_lr = 2e-3
total_updates = 20
warmup = 2
schedule = "cosine"
validate_every = 10
seed = 0

[decoding]
beam_sizes = [1, 2, 3]
max_len = 8
"#;

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(aacap(out, &["prepare", "--synthetic", "0"]).status.code(), Some(1));
    assert_eq!(aacap(out, &["--preset", "giant", "train"]).status.code(), Some(1));
    let bad = out.join("bad.toml");
    std::fs::write(&bad, "[decoding]\nbeam_sizes = []\n").unwrap();
    assert_eq!(aacap(out, &["--config", bad.to_str().unwrap(), "train"]).status.code(), Some(1));
    // Missing manifest and corrupt manifest lines are data errors.
    assert_eq!(aacap(out, &["train"]).status.code(), Some(2));
    std::fs::write(out.join("manifest.jsonl"), "{\"id\": 3}\n").unwrap();
    let r = aacap(out, &["train"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 1"));
}

#[test]
fn pipeline_is_idempotent_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let runs = [dir.path().join("a"), dir.path().join("b")];
    for out in &runs {
        for step in [
            &["prepare", "--synthetic", "6", "--valid", "2", "--eval", "2"][..],
            &["augment"],
            &["train", "--manifest", out.join("manifest.augmented.jsonl").to_str().unwrap()],
            &["train-clap"],
            &["infer", "--strategy", "clap-refine"],
            &["evaluate"],
            &["report"],
        ] {
            let manifest_before = std::fs::read(out.join("manifest.jsonl")).ok();
            let mut args = vec!["--config", cfg, "--seed", "3"];
            args.extend_from_slice(step);
            let r = aacap(out, &args);
            assert!(r.status.success(), "{step:?}: {}", String::from_utf8_lossy(&r.stderr));
            if let Some(before) = manifest_before {
                assert_eq!(std::fs::read(out.join("manifest.jsonl")).unwrap(), before, "{step:?} touched the manifest");
            }
        }
    }
    assert_eq!(read_dir_bytes(&runs[0]), read_dir_bytes(&runs[1]));

    let report = std::fs::read_to_string(runs[0].join("report.txt")).unwrap();
    // Only three beams are configured, so ranks above 3 are omitted.
    assert!(report.contains("CLAP-Refine rank 3") && !report.contains("rank 5"));
    assert!(report.contains("Oracle (FENSE)*"));
}

#[test]
fn clap_refine_without_clap_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("run");
    for step in [&["prepare", "--synthetic", "4", "--valid", "2", "--eval", "2"][..], &["train"]] {
        let mut args = vec!["--config", cfg];
        args.extend_from_slice(step);
        assert!(aacap(&out, &args).status.success());
    }
    assert_eq!(aacap(&out, &["--config", cfg, "infer", "--strategy", "clap-refine"]).status.code(), Some(1));
    assert!(aacap(&out, &["--config", cfg, "infer", "--strategy", "beam"]).status.success());
    // Without a CLAP checkpoint FENSE is reported as degraded.
    assert!(aacap(&out, &["--config", cfg, "evaluate"]).status.success());
    let eval = std::fs::read_to_string(out.join("evaluation.json")).unwrap();
    assert!(eval.contains("fense_without_embedder"));
}
