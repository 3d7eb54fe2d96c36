use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mwdcnn::data::{load_image, save_image, synthetic_image};
use mwdcnn::model::save_checkpoint;
use mwdcnn::{ModelConfig, Mwdcnn};

fn mwdcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mwdcnn")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_images(dir: &Path, n: usize, size: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        save_image(dir.join(format!("img{i}.png")), &synthetic_image(size, size, 1, i as u64)).unwrap();
    }
}

const TOY: &str = "[model]\nin_channels = 1\nbase_channels = 4\n[train]\nbatch_size = 8\n[data]\npatches_per_image = 2\npatch_size = 16\n";

#[test]
fn train_one_epoch_writes_checkpoint_log_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    write_images(&images, 10, 24);
    let cfg = tmp.path().join("toy.toml");
    fs::write(&cfg, TOY).unwrap();
    let out = tmp.path().join("run");
    let o = mwdcnn(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&images),
        "--sigma",
        "25",
        "--epochs",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("checkpoints/epoch_001.ckpt").exists());
    assert!(out.join("model.ckpt").exists());
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("iter,epoch,lr,loss"));
    assert_eq!(log.lines().count(), 1 + 3); // 20 patches, batch 8
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert!(manifest["finished"].is_string());
    assert_eq!(manifest["config"]["train"]["noise"]["fixed"], 25.0);
    assert_eq!(manifest["config"]["train"]["epochs"], 1);
    assert!(!manifest["version"].as_str().unwrap().is_empty());
    let patches: serde_json::Value = serde_json::from_slice(&fs::read(out.join("patches.json")).unwrap()).unwrap();
    assert_eq!(patches["patches"].as_array().unwrap().len(), 20);

    // the saved config reproduces the run exactly
    let again = tmp.path().join("again");
    let o = mwdcnn(&["train", "--config", p(&out.join("config.toml")), "--out", p(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(out.join("train_log.csv")).unwrap(), fs::read(again.join("train_log.csv")).unwrap());
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());
}

#[test]
fn blind_flag_reaches_the_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    write_images(&images, 2, 16);
    let cfg = tmp.path().join("toy.toml");
    fs::write(&cfg, TOY).unwrap();
    let out = tmp.path().join("run");
    let o = mwdcnn(&["train", "--config", p(&cfg), "--data", p(&images), "--blind", "--epochs", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["noise"]["blind"]["max"], 55.0);
}

#[test]
fn missing_image_directory_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let o = mwdcnn(&["train", "--data", p(&missing), "--epochs", "1", "--out", p(&tmp.path().join("run"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));
}

#[test]
fn bad_configuration_is_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nbase_channels = 6\n").unwrap();
    let o = mwdcnn(&["train", "--config", p(&cfg), "--data", p(tmp.path()), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    fs::write(&cfg, "[model]\nwidth = 6\n").unwrap();
    assert_eq!(code(&mwdcnn(&["params", "--config", p(&cfg)])), 1);
}

#[test]
fn diverging_training_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    write_images(&images, 4, 16);
    let cfg = tmp.path().join("toy.toml");
    fs::write(&cfg, TOY).unwrap();
    let out = tmp.path().join("run");
    let o = mwdcnn(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&images),
        "--lr",
        "1e30",
        "--epochs",
        "20",
        "--batch",
        "2",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["status"].as_str().unwrap().contains("non-finite"), "{}", manifest["status"]);
}

fn identity_checkpoint(path: &Path, channels: usize) {
    let mut m = Mwdcnn::<f32>::new(ModelConfig { in_channels: channels, ..ModelConfig::toy(4) }).unwrap();
    m.zero_final_conv();
    save_checkpoint(path, &m, None).unwrap();
}

#[test]
fn identity_checkpoint_reproduces_odd_sized_input() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("id.ckpt");
    identity_checkpoint(&ckpt, 3);
    let input = tmp.path().join("in.ppm");
    let img = synthetic_image(47, 47, 3, 5);
    save_image(&input, &img).unwrap();
    let out = tmp.path().join("out/den.png");
    let o =
        mwdcnn(&["denoise", "--checkpoint", p(&ckpt), "--input", p(&input), "--out", p(&out), "--clean", p(&input)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_image(&out).unwrap(), img);
    assert!(stdout(&o).contains("PSNR 100.00"), "{}", stdout(&o));
}

#[test]
fn denoise_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("id.ckpt");
    identity_checkpoint(&ckpt, 1);
    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"XXXX0000").unwrap();
    let input = tmp.path().join("in.pgm");
    save_image(&input, &synthetic_image(16, 16, 1, 1)).unwrap();
    let out = tmp.path().join("o.png");
    let o = mwdcnn(&["denoise", "--checkpoint", p(&junk), "--input", p(&input), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
    let bad = tmp.path().join("bad.png");
    fs::write(&bad, b"not an image").unwrap();
    assert_eq!(code(&mwdcnn(&["denoise", "--checkpoint", p(&ckpt), "--input", p(&bad), "--out", p(&out)])), 2);
}

#[test]
fn eval_writes_one_report_per_sigma_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    write_images(&images, 3, 20);
    let ckpt = tmp.path().join("m.ckpt");
    save_checkpoint(&ckpt, &Mwdcnn::<f32>::new(ModelConfig::toy(4)).unwrap(), None).unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = mwdcnn(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&images),
            "--sigmas",
            "15,25",
            "--seed",
            "3",
            "--out",
            p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for sigma in ["15", "25"] {
        let file = format!("eval_sigma{sigma}.csv");
        let csv = fs::read_to_string(a.join(&file)).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 + 1, "{csv}");
        assert!(csv.lines().last().unwrap().starts_with("MEAN,"));
        assert_eq!(csv, fs::read_to_string(b.join(&file)).unwrap());
    }
}

#[test]
fn gradcheck_passes_and_catches_a_broken_backward_rule() {
    let o = mwdcnn(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("0 failed"));
    assert!(text.contains("max rel err"));
    let bad = mwdcnn(&["gradcheck", "--inject-fault", "--seeds", "1", "--base-channels", "4"]);
    assert_ne!(code(&bad), 0);
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn synth_and_params() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mwdcnn(&[
        "synth",
        "--out",
        p(tmp.path()),
        "--count",
        "2",
        "--width",
        "10",
        "--height",
        "6",
        "--channels",
        "3",
        "--format",
        "ppm",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(load_image(tmp.path().join("synth_001.ppm")).unwrap(), synthetic_image(10, 6, 3, 1));
    let o = mwdcnn(&["params"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("23 weight layers"), "{text}");
    assert!(text.contains("517464") && text.contains("221568"), "{text}");
}
