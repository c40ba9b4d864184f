use std::path::Path;
use std::process::{Command, Output};

use dpml_core::data::{synthetic_blobs, Dataset};
use dpml_core::nn::{self, MlpParams};

fn dpml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpml"))
        .args(args)
        .env_remove("DP_TOOLKIT_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Data rows of a CSV (manifest and header dropped).
fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip_while(|l| l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn accountant_curve_reports_the_ten_thousand_step_value() {
    let out = stdout(&dpml(&["accountant-curve", "--q", "0.01", "--sigma", "4", "--delta", "1e-5", "--epochs", "100"]));
    let first = out.lines().next().unwrap();
    assert!(first.starts_with("# manifest: dpml "), "{first}");
    assert_eq!(out.lines().nth(1).unwrap(), "epoch,T,epsilon_moments");
    let r = rows(&out);
    assert_eq!(r.len(), 100);
    assert_eq!(r[99][1], "10000");
    let eps: f64 = r[99][2].parse().unwrap();
    assert!((eps - 1.26).abs() <= 0.05, "{eps}");
}

#[test]
fn zero_epochs_give_a_header_only_csv() {
    let out = stdout(&dpml(&["accountant-curve", "--epochs", "0"]));
    assert_eq!(out.lines().count(), 2);
    assert!(rows(&out).is_empty());
}

#[test]
fn doubling_epochs_increases_the_last_epsilon() {
    let last = |e: &str| -> f64 {
        let out = stdout(&dpml(&["accountant-curve", "--epochs", e]));
        rows(&out).last().unwrap()[2].parse().unwrap()
    };
    assert!(last("20") > last("10"));
}

#[test]
fn large_sigma_keeps_both_curves_small_and_ordered_at_one_hundred_epochs() {
    let out = stdout(&dpml(&["compare-composition", "--sigma", "64", "--epochs", "100"]));
    let last = rows(&out).pop().unwrap();
    let (strong, moments): (f64, f64) = (last[1].parse().unwrap(), last[2].parse().unwrap());
    assert!(moments < strong && strong < 0.5, "{last:?}");
    // With orders capped at 32 the accountant cannot report less than
    // ln(1/δ)/32, which early rows at this noise level sit on.
    let first: f64 = rows(&out)[0][2].parse().unwrap();
    assert!(first >= (1e5f64).ln() / 32.0);
}

#[test]
fn errors_are_single_line_with_nonzero_exit() {
    for args in [
        vec!["accountant-curve", "--sigma", "-1"],
        vec!["accountant-curve", "--delta", "2"],
        vec!["budget", "--p", "0"],
        vec!["train"],
        vec!["train", "--blobs", "--pca-dim", "500"],
        vec!["no-such-command"],
        vec!["train", "--mnist", "/definitely/missing"],
    ] {
        let o = dpml(&args);
        assert!(!o.status.success(), "{args:?}");
        let err = String::from_utf8(o.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error: "), "{err}");
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn infeasible_targets_are_rejected_before_training() {
    let o = dpml(&["train", "--blobs", "--no-pca", "--hidden", "4", "--lot", "800", "--sigma", "0.7", "--target-eps", "0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible"));
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# curve settings\nsigma = 8\nepochs = 3\nq=0.02\n").unwrap();
    let cfg = cfg.to_str().unwrap();

    let from_file = stdout(&dpml(&["accountant-curve", "--config", cfg]));
    let explicit = stdout(&dpml(&["accountant-curve", "--sigma", "8", "--epochs", "3", "--q", "0.02"]));
    assert_eq!(rows(&from_file), rows(&explicit));
    assert!(from_file.lines().next().unwrap().contains("sigma=8"));

    let overridden = stdout(&dpml(&["--config", cfg, "accountant-curve", "--epochs", "5"]));
    assert_eq!(rows(&overridden).len(), 5);
    assert!(overridden.lines().next().unwrap().contains("sigma=8"));

    std::fs::write(dir.path().join("bad.conf"), "bogus=1\n").unwrap();
    let o = dpml(&["accountant-curve", "--config", dir.path().join("bad.conf").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn out_file_gets_a_timestamped_manifest_alongside() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = dpml(&["budget", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    let csv = std::fs::read_to_string(&out).unwrap();
    let side = std::fs::read_to_string(dir.path().join("b.csv.manifest")).unwrap();
    assert_eq!(side.lines().next(), csv.lines().next());
    assert!(side.contains("started_unix=") && side.contains("finished_unix="));
    // output paths are not inputs
    assert!(!csv.lines().next().unwrap().contains("b.csv"));
}

#[test]
fn thread_count_does_not_change_results() {
    let args = [
        "train", "--blobs", "--pca-dim", "8", "--sigma-pca", "4", "--hidden", "16", "--lot", "200", "--sigma", "2",
        "--epochs", "4",
    ];
    let run = |threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_dpml"))
            .args(args)
            .env("DP_TOOLKIT_THREADS", threads)
            .output()
            .unwrap();
        stdout(&o)
    };
    assert_eq!(run("1"), run("4"));
    let o = Command::new(env!("CARGO_BIN_EXE_dpml"))
        .args(["budget"])
        .env("DP_TOOLKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

fn blob_train_split() -> Dataset {
    let all = synthetic_blobs(10, 200, 20, 6.0, 0).unwrap();
    let train: Vec<_> = all
        .examples()
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 5 != 4)
        .map(|(_, e)| e.clone())
        .collect();
    Dataset::new(train, 10, 20).unwrap()
}

fn load_checkpoint(path: &Path) -> MlpParams {
    MlpParams::load(&mut std::fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn degenerate_training_matches_plain_gradient_descent() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.bin");
    let o = dpml(&[
        "train", "--blobs", "--no-pca", "--sigma", "0", "--clip", "inf", "--hidden", "12", "--lot", "1600", "--lr",
        "0.1", "--lr-final", "0.1", "--epochs", "10", "--seed", "3", "--checkpoint", ckpt.to_str().unwrap(),
    ]);
    let csv = stdout(&o);
    assert!(rows(&csv).iter().all(|r| r[4] == "inf"));

    let data = blob_train_split();
    let dims = [20, 12, 10];
    let mut p = MlpParams::glorot(&dims, 3).unwrap();
    for _ in 0..10 {
        let g = nn::batch_mean_gradient(&p, data.examples()).unwrap();
        let flat: Vec<f64> = p.flatten().iter().zip(&g).map(|(w, d)| w - 0.1 * d).collect();
        p = MlpParams::from_flat(&dims, &flat).unwrap();
    }
    let got = load_checkpoint(&ckpt);
    assert_eq!(got.dims(), dims.to_vec());
    for (a, b) in got.flatten().iter().zip(p.flatten()) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

#[test]
fn projection_and_checkpoint_feed_the_clip_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.bin");
    let proj = dir.path().join("p.bin");
    stdout(&dpml(&[
        "train", "--blobs", "--pca-dim", "6", "--hidden", "8", "--lot", "160", "--epochs", "2", "--checkpoint",
        ckpt.to_str().unwrap(), "--projection-out", proj.to_str().unwrap(),
    ]));
    assert_eq!(load_checkpoint(&ckpt).input_dim(), 6);
    let out = stdout(&dpml(&[
        "clip-diagnostic", "--blobs", "--model", ckpt.to_str().unwrap(), "--projection", proj.to_str().unwrap(),
        "--sample-size", "50",
    ]));
    let r = rows(&out);
    assert_eq!(r.len(), 3);
    assert_eq!(r[0][0], "all");
    assert!(r.iter().all(|row| row[1].parse::<f64>().unwrap() > 0.0));

    // without the projection the model's input width does not match
    let o = dpml(&["clip-diagnostic", "--blobs", "--model", ckpt.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn pca_command_lists_descending_eigenvalues() {
    let out = stdout(&dpml(&["pca", "--blobs", "--pca-dim", "5", "--sigma-pca", "2", "--pca-fraction", "0.5"]));
    let vals: Vec<f64> = rows(&out).iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(vals.len(), 5);
    assert!(vals.windows(2).all(|w| w[0] >= w[1]));
}
