//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use lcg_core::data::Tokenizer;
use lcg_core::model::ModelConfig;
use lcg_core::objectives::ObjectiveKind;
use lcg_core::train::{DataConfig, ExperimentConfig, Scenario};

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Outcome {
    #[track_caller]
    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stdout:\n{}\nstderr:\n{}", self.stdout, self.stderr);
        self
    }
}

/// Runs the `lcg` binary.
pub fn lcg<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_lcg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("LCG_THREADS", "1")
        .output()
        .expect("lcg runs");
    Outcome {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// A world small enough to train on in seconds.
pub const SMALL_WORLD: &str = r#"
n_words = 40
feature_dim = 8
n_clusters = 4
n_syn = 4
n_ant = 4
n_part = 4
grounded_words = 3000
val_grounded_words = 600
text_words = 6000
val_text_words = 1500
test_text_words = 1500
n_relatedness_pairs = 150
n_random_relations = 8
n_context_pairs = 40
voken_bank_size = 16
"#;

pub const SMALL_VOCAB: usize = 300;

/// `synth gen` of [`SMALL_WORLD`] into `dir/data`.
pub fn small_data(dir: &Path, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let world = dir.join("world.toml");
    std::fs::write(&world, SMALL_WORLD).unwrap();
    let data = dir.join("data");
    lcg(&[
        "synth",
        "gen",
        "--config",
        p(&world),
        "--out-dir",
        p(&data),
        "--seed",
        &seed.to_string(),
        "--vocab-size",
        &SMALL_VOCAB.to_string(),
    ])
    .ok();
    data
}

pub fn tiny_model(vocab_size: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size,
        max_seq_len: 128,
        narrow_window: Some(2),
        grounding_layer: 1,
    }
}

/// Fast experiment over `data`, written to `path`.
pub fn write_experiment(path: &Path, data: &Path, kind: ObjectiveKind, scenario: Scenario, n_layers: usize) -> ExperimentConfig {
    let vocab = Tokenizer::load(&data.join("tokenizer.json")).unwrap().vocab_size();
    let mut cfg = ExperimentConfig::preset(kind, tiny_model(vocab, n_layers), DataConfig::new(data, scenario), 0);
    cfg.train.epochs = 2;
    cfg.train.peak_lr = 3e-3;
    cfg.train.warmup_steps = Some(5);
    cfg.train.batch_size = Some(16);
    std::fs::write(path, cfg.to_toml()).unwrap();
    cfg
}

/// Every file directly inside `dir`, sorted, with its bytes.
pub fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

pub fn count_manifests(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == "manifest.json")
        .count()
}
