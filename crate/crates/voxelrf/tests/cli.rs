//! The `voxelrf` binary end to end, plus failure exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use voxelrf::checkpoint::load_checkpoint;
use voxelrf::dataset::Dataset;
use voxelrf::spectrum_io::{file_len, read_spectrum};

fn voxelrf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxelrf"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = voxelrf(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_train_infer_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("run.toml"),
        "[data]\nn_tx = 12\n[train]\ndims = [12, 12, 12]\ntotal_iters = 30\nbatch_rays = 32\nlog_interval = 10\n",
    )
    .unwrap();
    ok(dir, &["--config", "run.toml", "synth", "--out", "data", "--seed", "3"]);
    let data = Dataset::load(dir.join("data")).unwrap();
    assert_eq!(data.len(), 12);
    assert!(data.rssi_dbm.iter().all(Option::is_some));

    ok(dir, &["--config", "run.toml", "train", "--data", "data", "--out", "m.vxck"]);
    let (model, meta) = load_checkpoint(dir.join("m.vxck")).unwrap();
    assert_eq!(model.dims(), [12; 3]);
    assert_eq!(meta.iteration, 30);
    assert!(meta.rssi_calibration_db.is_some());
    let log = fs::read_to_string(dir.join("m.vxck.loss.csv")).unwrap();
    assert!(log.starts_with("iter,spectrum_loss,bg_loss,total,lr_grid,lr_mlp\n"));
    assert_eq!(log.lines().count(), 1 + 4);

    ok(dir, &["infer", "--checkpoint", "m.vxck", "--tx", "1.0,2.5,3.0", "--out", "s.vxrf"]);
    let spectrum = read_spectrum(dir.join("s.vxrf")).unwrap();
    assert_eq!(spectrum.resolution(), (36, 9));
    assert_eq!(fs::metadata(dir.join("s.vxrf")).unwrap().len() as usize, file_len(36, 9));

    ok(dir, &["eval", "--checkpoint", "m.vxck", "--data", "data", "--out", "metrics", "--rssi"]);
    let ssim = fs::read_to_string(dir.join("metrics/ssim.csv")).unwrap();
    assert_eq!(ssim.lines().next(), Some("tx_index,ssim"));
    assert_eq!(ssim.lines().count(), 1 + 2);
    let summary = fs::read_to_string(dir.join("metrics/summary.csv")).unwrap();
    assert!(summary.starts_with("metric,p25,median,p75\nssim,"));
    assert!(summary.contains("\nrssi_error_db,"));
    for name in ["ssim_cdf.csv", "rssi_error.csv", "rssi_error_cdf.csv", "rssi_predictions.csv"] {
        assert!(dir.join("metrics").join(name).is_file(), "{name}");
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let code = |args: &[&str]| voxelrf(dir, args).status.code();

    assert_eq!(code(&["train"]), Some(2));
    assert_eq!(code(&["train", "--data", "d", "--out", "m", "--train.bogus", "1"]), Some(2));
    assert_eq!(code(&["infer", "--checkpoint", "missing.vxck", "--tx", "1,1,1", "--out", "s"]), Some(3));
    fs::write(dir.join("junk.vxck"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["infer", "--checkpoint", "junk.vxck", "--tx", "1,1,1", "--out", "s"]), Some(4));
    let err = String::from_utf8(voxelrf(dir, &["infer", "--checkpoint", "junk.vxck", "--tx", "1,1,1", "--out", "s"]).stderr).unwrap();
    assert!(err.contains("junk.vxck") && err.contains("byte 0"), "{err}");
}
