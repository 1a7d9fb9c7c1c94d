//! Command-line contract tests: exit codes and diagnostics.

use std::process::{Command, Output};

fn neurocell(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurocell")).args(args).output().unwrap()
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = neurocell(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.to_lowercase().contains("usage"), "stderr was: {text}");
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = neurocell(&[
        "segment",
        "--data-dir",
        data.to_str().unwrap(),
        "--model-dir",
        tmp.path().join("models").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("segmenter.ncw"), "stderr was: {text}");
}

#[test]
fn invalid_config_value_exits_2_naming_the_field() {
    let out = neurocell(&["synth", "--tau", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("tau"), "stderr was: {text}");
}

#[test]
fn config_file_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.json");
    let data = tmp.path().join("data");
    std::fs::write(
        &cfg_path,
        format!(
            r#"{{"n_scenes": 2, "n_cells": 3, "scene_height": 64, "scene_width": 64,
                "radius_min": 3, "radius_max": 5, "patch_size": 17, "target_size": 17,
                "data_dir": "{}"}}"#,
            data.display()
        ),
    )
    .unwrap();
    // File says 2 scenes; the flag wins with 3.
    let out = neurocell(&["synth", "--config", cfg_path.to_str().unwrap(), "--n-scenes", "3"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let scenes = std::fs::read_dir(data.join("scenes")).unwrap().count();
    assert_eq!(scenes, 6); // two channels per scene
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"not_a_field": 1}"#).unwrap();
    let out = neurocell(&["synth", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_every_op_and_exits_0() {
    let out = neurocell(&["gradcheck", "--seed", "5"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for op in ["conv2d", "conv_transpose2d", "batchnorm2d", "softmax", "dense"] {
        assert!(text.contains(op), "missing {op} in:\n{text}");
    }
    assert!(text.contains("ok"));
}

#[test]
fn infeasible_scene_spec_exits_2() {
    // 300 cells cannot be packed into a 64x64 scene; generation must fail
    // with a diagnostic rather than loop forever.
    let tmp = tempfile::tempdir().unwrap();
    let out = neurocell(&[
        "synth",
        "--data-dir",
        tmp.path().join("data").to_str().unwrap(),
        "--scene-height",
        "64",
        "--scene-width",
        "64",
        "--n-cells",
        "300",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("reduce"), "stderr was: {text}");
}
