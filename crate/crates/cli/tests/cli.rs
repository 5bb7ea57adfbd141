//! End-to-end runs of the `egt` binary: the full subcommand surface,
//! artifact layout, and the 0/1/2 exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn egt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// One shared temp workspace: generate data once, then drive every
/// subcommand against it.
#[test]
fn full_pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(
        root.join("small.conf"),
        "subjects=2\nclasses=3\nsequences_per=10\nchannels=8\nsamples=64\n\
         embed_dim=16\nn_heads=2\nn_layers=1\npe_dim=4\nhead_dim=8\nsnapshots=2\n\
         epochs=3\nbatch_size=8\nalign_dim=8\nnoise_sigma=1.0\n",
    )
    .unwrap();

    let out = egt(&["--config", "small.conf", "--out", "work", "gen-data"], root);
    assert_success(&out, "gen-data");
    assert!(root.join("work/dataset.eegd").exists());
    assert!(root.join("work/layout.csv").exists());

    let out = egt(
        &[
            "--config", "small.conf", "--out", "work", "build-graph",
            "--data", "work/dataset.eegd", "--layout", "work/layout.csv",
        ],
        root,
    );
    assert_success(&out, "build-graph");
    assert!(root.join("work/adjacency.csv").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("8 nodes"), "{stdout}");

    let out = egt(
        &["--config", "small.conf", "--out", "run", "train", "--data", "work/dataset.eegd"],
        root,
    );
    assert_success(&out, "train");
    for artifact in ["loss.csv", "epochs.csv", "model.ckpt", "state.ckpt"] {
        assert!(root.join("run").join(artifact).exists(), "{artifact} missing");
    }
    let loss = std::fs::read_to_string(root.join("run/loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss_total,loss_align,loss_gac_seq,loss_gac_ch,loss_ce\n"));

    let out = egt(
        &[
            "--config", "small.conf", "--out", "run", "eval",
            "--data", "work/dataset.eegd", "--model", "run/model.ckpt",
        ],
        root,
    );
    assert_success(&out, "eval");
    assert!(root.join("run/metrics.csv").exists());

    let out = egt(
        &[
            "--config", "small.conf", "--out", "run", "rsa",
            "--data", "work/dataset.eegd", "--model", "run/model.ckpt",
        ],
        root,
    );
    assert_success(&out, "rsa");
    assert!(root.join("run/rsa.csv").exists());

    let out = egt(
        &[
            "--config", "small.conf", "--out", "run", "export-features",
            "--data", "work/dataset.eegd", "--model", "run/model.ckpt", "--which", "test",
        ],
        root,
    );
    assert_success(&out, "export-features");
    let features = std::fs::read_to_string(root.join("run/features.csv")).unwrap();
    assert!(features.starts_with("subject,label,S_0"));

    let out = egt(
        &[
            "--config", "small.conf", "--out", "resumed", "train",
            "--data", "work/dataset.eegd", "--resume", "run/state.ckpt",
        ],
        root,
    );
    assert_success(&out, "train --resume");

    let out = egt(&["gradcheck"], root);
    assert_success(&out, "gradcheck");
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck PASS"));

    // Exit code 1: validation failures.
    std::fs::write(root.join("garbage.eegd"), b"XXXXnot a dataset").unwrap();
    let out = egt(&["--out", "x", "build-graph", "--data", "garbage.eegd"], root);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));

    let out = egt(
        &["--config", "missing.conf", "--out", "x", "gen-data"],
        root,
    );
    assert_eq!(out.status.code(), Some(1), "missing config file is a validation error");

    std::fs::write(root.join("typo.conf"), "epohcs=3\n").unwrap();
    let out = egt(&["--config", "typo.conf", "--out", "x", "gen-data"], root);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    // Exit code 2: numerical failure (divergence), last good state retained.
    std::fs::write(
        root.join("diverge.conf"),
        "subjects=2\nclasses=3\nsequences_per=6\nchannels=8\nsamples=64\n\
         embed_dim=16\nn_heads=2\nn_layers=1\npe_dim=4\nhead_dim=8\nsnapshots=2\n\
         epochs=2\nbatch_size=8\nalign_dim=8\nlearning_rate=1e18\n",
    )
    .unwrap();
    let out = egt(
        &["--config", "diverge.conf", "--out", "div", "train", "--data", "work/dataset.eegd"],
        root,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(root.join("div/diverged_state.ckpt").exists());
    assert!(root.join("div/loss.csv").exists(), "partial loss curve retained");

    // Ablation on the small problem: table plus CSV.
    let out = egt(
        &["--config", "small.conf", "--out", "ab", "ablate", "--data", "work/dataset.eegd"],
        root,
    );
    assert_success(&out, "ablate");
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in ["baseline", "NC", "EGT_NC", "EGT_GAC"] {
        assert!(stdout.contains(name), "{stdout}");
    }
    let csv = std::fs::read_to_string(root.join("ab/ablation.csv")).unwrap();
    assert!(csv.starts_with("config,subject,map,rank1\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 2, "4 configs x (all + 1 subject) + header");
}

/// Determinism across invocations: identical seed and config produce
/// byte-identical loss curves through the CLI as well.
#[test]
fn cli_train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(
        root.join("small.conf"),
        "subjects=1\nclasses=3\nsequences_per=6\nchannels=8\nsamples=64\n\
         embed_dim=16\nn_heads=2\nn_layers=1\npe_dim=4\nhead_dim=8\nsnapshots=2\n\
         epochs=2\nbatch_size=8\nalign_dim=8\nnoise_sigma=1.0\n",
    )
    .unwrap();
    let out = egt(&["--config", "small.conf", "--out", "w", "gen-data"], root);
    assert_success(&out, "gen-data");
    for run in ["a", "b"] {
        let out = egt(
            &["--config", "small.conf", "--out", run, "--seed", "9", "train", "--data", "w/dataset.eegd"],
            root,
        );
        assert_success(&out, "train");
    }
    let a = std::fs::read(root.join("a/loss.csv")).unwrap();
    let b = std::fs::read(root.join("b/loss.csv")).unwrap();
    assert_eq!(a, b);
    let am = std::fs::read(root.join("a/model.ckpt")).unwrap();
    let bm = std::fs::read(root.join("b/model.ckpt")).unwrap();
    assert_eq!(am, bm);
}
