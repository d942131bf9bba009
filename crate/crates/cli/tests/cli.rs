//! Argument handling and failure messages of the `triadic` binary.

use std::path::Path;
use std::process::{Command, Output};

fn triadic(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triadic"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = triadic(dir.path(), &["simulate", "--agent", "oracle", "--dimension", "kind"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("run gen-triplets first"), "{}", stderr(&o));

    assert!(triadic(dir.path(), &["gen-triplets", "--count", "400"]).status.success());
    let o = triadic(dir.path(), &["fit"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("run simulate first"), "{}", stderr(&o));

    let o = triadic(dir.path(), &["report"]);
    assert!(!o.status.success());
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(triadic(dir.path(), &["gen-triplets", "--count", "400"]).status.success());
    for args in [
        &["simulate", "--agent", "gpt"][..],
        &["simulate", "--method", "steer"],
        &["simulate", "--dimension", "colour"],
        &["simulate", "--matrix", "--method", "sae"],
        &["align", "--x", "a.json"],
    ] {
        assert!(!triadic(dir.path(), args).status.success(), "{args:?}");
    }
    let o = triadic(dir.path(), &["simulate", "--agent", "oracle", "--dimension", "neutral"]);
    assert!(stderr(&o).contains("--dimension kind or size"), "{}", stderr(&o));
    let o = triadic(dir.path(), &["simulate", "--agent", "toy"]);
    assert!(stderr(&o).contains("--method"), "{}", stderr(&o));
    let o = triadic(dir.path(), &["simulate", "--agent", "replay", "--method", "prompt_zero"]);
    assert!(stderr(&o).contains("--traces"), "{}", stderr(&o));
}

#[test]
fn single_condition_and_pairwise_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(triadic(out, &["--seed", "3", "gen-triplets", "--count", "600"]).status.success());
    for d in ["kind", "size"] {
        let o = triadic(out, &["--seed", "3", "simulate", "--agent", "oracle", "--dimension", d, "--noise", "0.1"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = triadic(out, &["--seed", "3", "simulate", "--agent", "toy", "--method", "task_vector", "--dimension", "size"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("conditions/toy-task_vector-size.json")).unwrap()).unwrap();
    assert_eq!(sidecar["layer"], 3);
    assert_eq!(sidecar["apply_mode"], "patch_replace");

    assert!(triadic(out, &["--seed", "3", "fit"]).status.success());
    let o = triadic(
        out,
        &[
            "align",
            "--x",
            out.join("embeddings/oracle-size.json").to_str().unwrap(),
            "--y",
            out.join("embeddings/toy-task_vector-size.json").to_str().unwrap(),
            "--permutations",
            "99",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["r2"].as_f64().unwrap() > 0.8, "{report}");
    assert_eq!(report["p_value"], 0.01);
}
