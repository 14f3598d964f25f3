#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

pub const ROIS: [&str; 5] = ["hair", "skin", "nose", "eyes", "lips_mouth"];

pub fn ssae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssae")).args(args).output().expect("ssae runs")
}

/// Runs `ssae` and panics with its stderr when it fails.
pub fn ssae_ok(args: &[&str]) -> String {
    let out = ssae(args);
    assert!(out.status.success(), "ssae {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small bundle trained for a handful of steps, plus the data it came from.
pub struct Fixture {
    pub dir: TempDir,
    pub config: PathBuf,
    pub data: PathBuf,
    pub bundle: PathBuf,
    pub image_size: usize,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// First held-out image.
    pub fn image(&self) -> PathBuf {
        let mut names: Vec<_> = std::fs::read_dir(self.data.join("images"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("synth_1_"))
            .collect();
        names.sort();
        names.remove(0)
    }
}

/// `preset` is `micro` (32 px) or `toy` (64 px). With `rb`, a hair
/// refinement block is trained and bundled too.
pub fn build_bundle(preset: &str, rb: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let size = if preset == "toy" { 64 } else { 32 };
    let config = dir.path().join("config.toml");
    std::fs::write(&config, format!("[data]\nimage_size = {size}\n\n[sae]\npreset = \"{preset}\"\n")).unwrap();
    let data = dir.path().join("data");
    let models = dir.path().join("models");
    let c = s(&config);
    ssae_ok(&["--config", c, "synth", "--out", s(&data), "--train", "8", "--test", "4"]);
    ssae_ok(&["--config", c, "train-sae", "--data", s(&data), "--out", s(&models), "--steps", "4"]);
    for roi in ROIS {
        ssae_ok(&["--config", c, "train-smpn", "--roi", roi, "--data", s(&data), "--out", s(&models), "--epochs", "1"]);
    }
    let sae = models.join("sae.json");
    if rb {
        ssae_ok(&["--config", c, "train-rb", "--roi", "hair", "--sae", s(&sae), "--data", s(&data), "--out", s(&models), "--steps", "3"]);
    }
    let bundle = models.join("bundle.json");
    ssae_ok(&["--config", c, "init-bundle", "--out", s(&bundle), "--sae", s(&sae), "--scan", s(&models)]);
    Fixture { dir, config, data, bundle, image_size: size }
}

/// Writes an all-zero grayscale mask PNG.
pub fn write_zero_mask(path: &Path, size: usize) {
    image::GrayImage::new(size as u32, size as u32).save(path).unwrap();
}
