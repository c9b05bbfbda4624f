mod common;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use common::*;
use lcg_core::data::formats::{
    read_concreteness, read_context, read_features, read_norms, read_relatedness, read_relations,
};
use lcg_core::data::synth::files;
use lcg_core::data::{Tokenizer, World, MIN_VOCAB};
use lcg_core::eval::BenchmarkReport;
use lcg_core::objectives::ObjectiveKind;
use lcg_core::train::{DataConfig, ExperimentConfig, ExperimentData, Scenario};
use lcg_cli::manifest::{read_manifest, RunManifest};

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Generated data plus one trained grounded LCG model, shared by the
/// evaluation tests.
struct Trained {
    data: PathBuf,
    run: PathBuf,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let root = scratch("shared");
        let data = small_data(&root, 3);
        let cfg = root.join("lcg.toml");
        write_experiment(&cfg, &data, ObjectiveKind::Lcg, Scenario::Grounded, 2);
        let run = root.join("run");
        lcg(&["train", "--config", p(&cfg), "--out-dir", p(&run)]).ok();
        Trained { data, run }
    })
}

fn manifest(dir: &Path) -> RunManifest {
    read_manifest(dir).expect("manifest exists")
}

#[test]
fn tokenizer_train_writes_a_loadable_file() {
    let dir = scratch("tok_ok");
    let corpus = dir.join("corpus.txt");
    std::fs::write(&corpus, "the red ball rolls\nthe blue ball stops\n".repeat(50)).unwrap();
    let out = dir.join("tok").join("tokenizer.json");
    let run = lcg(&["tokenizer", "train", "--corpus", p(&corpus), "--vocab-size", "280", "--out", p(&out)]).ok();
    assert!(run.stdout.contains("tokenizer"));
    let tok = Tokenizer::load(&out).unwrap();
    assert!(tok.vocab_size() <= 280);
    let m = manifest(out.parent().unwrap());
    assert_eq!(m.steps.len(), 1);
    assert_eq!(m.steps[0].command, "tokenizer train");
    assert_eq!(m.steps[0].outputs, vec!["tokenizer.json".to_string()]);
    assert!(m.steps[0].inputs.contains_key(p(&corpus)));
}

#[test]
fn tokenizer_missing_corpus_exits_2() {
    let dir = scratch("tok_missing");
    let run = lcg(&["tokenizer", "train", "--corpus", p(&dir.join("nope.txt")), "--vocab-size", "300", "--out", p(&dir.join("t.json"))]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("corpus not found"), "{}", run.stderr);
}

#[test]
fn tokenizer_vocab_below_minimum_states_the_bound() {
    let dir = scratch("tok_small");
    let corpus = dir.join("corpus.txt");
    std::fs::write(&corpus, "a b c\n").unwrap();
    let run = lcg(&["tokenizer", "train", "--corpus", p(&corpus), "--vocab-size", "10", "--out", p(&dir.join("t.json"))]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains(&MIN_VOCAB.to_string()), "{}", run.stderr);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(lcg(&["train"]).code, 2);
    assert_eq!(lcg(&["frobnicate"]).code, 2);
    let dir = scratch("usage");
    let run = lcg(&[
        "eval", "--checkpoint", p(&dir.join("none.ckpt")), "--benchmark", "relatedness",
        "--data", p(&dir), "--out", p(&dir.join("out")),
    ]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("checkpoint not found"));
    let run = lcg(&[
        "eval", "--checkpoint", p(&dir.join("none.ckpt")), "--benchmark", "parsing",
        "--data", p(&dir), "--out", p(&dir.join("out")),
    ]);
    assert_eq!(run.code, 2);
}

#[test]
fn synth_is_deterministic_and_files_load() {
    let root = scratch("synth");
    let (a, b) = (small_data(&root.join("a"), 9), small_data(&root.join("b"), 9));
    let (fa, fb) = (dir_files(&a), dir_files(&b));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for f in [files::CAPTIONS, files::FEATURES, files::TEXT_TRAIN, files::RELATEDNESS, files::WORLD, "tokenizer.json"] {
        assert!(names.contains(&f), "{f} missing");
    }
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na != "manifest.json" {
            assert!(ba == bb, "{na} differs between identical runs");
        }
    }
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma.steps[0].config_hash, mb.steps[0].config_hash);
    assert_eq!(ma.steps[0].outputs, mb.steps[0].outputs);

    // every file passes its loader
    let tok = Tokenizer::load(&a.join("tokenizer.json")).unwrap();
    assert_eq!(tok.vocab_size(), SMALL_VOCAB);
    let data = ExperimentData::load(&DataConfig::new(&a, Scenario::Mixed), &tok).unwrap();
    assert!(data.grounded.num_tokens() > 0 && data.text.unwrap().num_tokens() > 0);
    assert!(data.val_grounded.is_some() && data.voken_bank.is_some());
    assert!(!read_relatedness(&a.join(files::RELATEDNESS)).unwrap().is_empty());
    assert!(!read_norms(&a.join(files::NORMS)).unwrap().is_empty());
    assert!(!read_relations(&a.join(files::RELATIONS_TRAIN)).unwrap().is_empty());
    assert!(!read_relations(&a.join(files::RELATIONS_TEST)).unwrap().is_empty());
    assert!(!read_context(&a.join(files::CONTEXT)).unwrap().is_empty());
    assert_eq!(read_concreteness(&a.join(files::CONCRETENESS)).unwrap().len(), 40);
    assert_eq!(read_features(&a.join(files::VOKEN_BANK)).unwrap().count, 16);
    let world = World::from_json(&std::fs::read_to_string(a.join(files::WORLD)).unwrap()).unwrap();
    assert_eq!(world.words.len(), 40);

    // a different seed gives a different world
    let c = small_data(&root.join("c"), 10);
    assert_ne!(std::fs::read(a.join(files::CAPTIONS)).unwrap(), std::fs::read(c.join(files::CAPTIONS)).unwrap());
}

#[test]
fn synth_refuses_non_empty_dir_without_force() {
    let root = scratch("synth_force");
    let world = root.join("world.toml");
    std::fs::write(&world, SMALL_WORLD).unwrap();
    let out = root.join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "x").unwrap();
    let args = ["synth", "gen", "--config", p(&world), "--out-dir", p(&out), "--seed", "1", "--vocab-size", "300"];
    let run = lcg(&args);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("--force"), "{}", run.stderr);
    let mut forced = args.to_vec();
    forced.push("--force");
    lcg(&forced).ok();
    assert_eq!(count_manifests(&out), 1);
}

#[test]
fn synth_rejects_bad_world_config() {
    let root = scratch("synth_bad");
    let world = root.join("world.toml");
    std::fs::write(&world, "n_words = 5\n").unwrap();
    let run = lcg(&["synth", "gen", "--config", p(&world), "--out-dir", p(&root.join("o")), "--seed", "1"]);
    assert_eq!(run.code, 2);
    std::fs::write(&world, "n_wrods = 50\n").unwrap();
    let run = lcg(&["synth", "gen", "--config", p(&world), "--out-dir", p(&root.join("o")), "--seed", "1"]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("n_wrods"));
}

const MINIMAL_CONFIG: &str = r#"
[model]
n_layers = 2
d_model = 16
n_heads = 2
d_ffn = 32
vocab_size = 300
max_seq_len = 128
grounding_layer = 1

[objective]
objective = "clip"

[train]
seed = 0
epochs = 1
peak_lr = 0.003
warmup_steps = 5
batch_size = 16

[data]
dir = "data"
scenario = "grounded"
"#;

#[test]
fn objective_flag_applies_the_lcg_defaults() {
    let root = scratch("objective");
    small_data(&root, 3);
    let cfg = root.join("exp.toml");
    std::fs::write(&cfg, MINIMAL_CONFIG).unwrap();
    let out = root.join("run");
    lcg(&["train", "--config", p(&cfg), "--out-dir", p(&out), "--objective", "lcg"]).ok();
    let resolved = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(resolved.objective.kind, ObjectiveKind::Lcg);
    assert_eq!(resolved.objective.lambda_c, 0.3);
    assert_eq!(resolved.model.narrow_window, Some(2));
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    let row: Vec<&str> = curve.lines().nth(1).unwrap().split(',').collect();
    // l_c is reported for LCG
    assert!(row[4].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn mid_grounding_ablation_sets_layer_3() {
    let root = scratch("ablation");
    let data = small_data(&root, 3);
    let cfg = root.join("exp.toml");
    write_experiment(&cfg, &data, ObjectiveKind::Lcg, Scenario::Grounded, 4);
    let out = root.join("run");
    lcg(&["train", "--config", p(&cfg), "--out-dir", p(&out), "--ablation", "mid_grounding", "--epochs", "1"]).ok();
    let resolved = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(resolved.model.grounding_layer, 3);
    assert_eq!(resolved.train.epochs, 1);
    let run = lcg(&["train", "--config", p(&cfg), "--out-dir", p(&root.join("x")), "--ablation", "deeper"]);
    assert_eq!(run.code, 2);
}

#[test]
fn resume_continues_the_step_counter_exactly() {
    let root = scratch("resume");
    let data = small_data(&root, 3);
    let cfg = root.join("exp.toml");
    write_experiment(&cfg, &data, ObjectiveKind::Lcg, Scenario::Grounded, 2);
    let (full, split) = (root.join("full"), root.join("split"));
    lcg(&["train", "--config", p(&cfg), "--out-dir", p(&full)]).ok();
    lcg(&["train", "--config", p(&cfg), "--out-dir", p(&split), "--stop-after-epoch", "1"]).ok();
    let half: serde_json::Value = serde_json::from_slice(&std::fs::read(split.join("summary.json")).unwrap()).unwrap();
    assert_eq!(half["epochs"], 1);
    lcg(&["train", "--config", p(&cfg), "--out-dir", p(&split), "--resume", p(&split.join("last.ckpt"))]).ok();
    for f in ["curve.csv", "epochs.csv", "model.ckpt", "last.ckpt", "summary.json", "config.toml"] {
        assert!(std::fs::read(full.join(f)).unwrap() == std::fs::read(split.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(count_manifests(&split), 1);
    assert_eq!(manifest(&split).steps.len(), 1);

    // a checkpoint from another configuration is refused
    let other = root.join("other.toml");
    write_experiment(&other, &data, ObjectiveKind::Clip, Scenario::Grounded, 2);
    let run = lcg(&["train", "--config", p(&other), "--out-dir", p(&root.join("o")), "--resume", p(&full.join("last.ckpt"))]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("different configuration"));
}

#[test]
fn divergence_exits_3_with_step_diagnostics() {
    let root = scratch("diverge");
    let data = small_data(&root, 3);
    let cfg_path = root.join("exp.toml");
    let mut cfg = write_experiment(&cfg_path, &data, ObjectiveKind::Lcg, Scenario::Grounded, 2);
    cfg.train.peak_lr = 1e300;
    cfg.train.warmup_steps = Some(1);
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let out = root.join("run");
    let run = lcg(&["train", "--config", p(&cfg_path), "--out-dir", p(&out)]);
    assert_eq!(run.code, 3, "{}", run.stderr);
    assert!(run.stderr.contains("diverged at step"), "{}", run.stderr);
    assert!(out.join("curve.csv").exists());
    assert_eq!(count_manifests(&out), 1);
}

#[test]
fn sweep_writes_table_selection_and_run_dirs() {
    let root = scratch("sweep");
    let data = small_data(&root, 3);
    let cfg = root.join("exp.toml");
    write_experiment(&cfg, &data, ObjectiveKind::Lcg, Scenario::Mixed, 1);
    let out = root.join("sweep");
    let run = lcg(&[
        "sweep", "--config", p(&cfg), "--out-dir", p(&out), "--lambda-u-grid", "0.5,2", "--seeds", "0,1", "--epochs", "1",
    ])
    .ok();
    assert!(run.stdout.contains("selected lambda_u"));
    let table = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    let sel: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("selection.json")).unwrap()).unwrap();
    assert_eq!(sel["schema_version"], 1);
    let chosen = sel["selected_lambda_u"].as_f64().unwrap();
    let means = sel["means"].as_array().unwrap();
    let best = means
        .iter()
        .map(|m| (m["lambda_u"].as_f64().unwrap(), m["mean_val_perplexity"].as_f64().unwrap()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert_eq!(chosen, best.0);
    for r in sel["selected_runs"].as_array().unwrap() {
        let d = out.join(r.as_str().unwrap());
        assert!(d.join("model.ckpt").exists());
        assert_eq!(count_manifests(&d), 1);
    }
    assert_eq!(count_manifests(&out), 1);

    // grounded configs have no text to select by
    let g = root.join("g.toml");
    write_experiment(&g, &data, ObjectiveKind::Lcg, Scenario::Grounded, 1);
    assert_eq!(lcg(&["sweep", "--config", p(&g), "--out-dir", p(&root.join("gs"))]).code, 2);
}

#[test]
fn perplexity_prints_one_positive_number() {
    let t = trained();
    let out = t.run.parent().unwrap().join("eval_ppl");
    let run = lcg(&[
        "eval", "--checkpoint", p(&t.run.join("model.ckpt")), "--benchmark", "perplexity", "--data", p(&t.data), "--out", p(&out),
    ])
    .ok();
    let v: f64 = run.stdout.trim().parse().expect("a single number");
    assert!(v.is_finite() && v > 1.0);
    assert!(out.join("perplexity.json").exists());
}

#[test]
fn relatedness_report_has_every_layer() {
    let t = trained();
    let out = t.run.parent().unwrap().join("eval_rel");
    let args = |b: &'static str| {
        vec![
            "eval".to_string(), "--checkpoint".into(), p(&t.run.join("model.ckpt")).into(), "--benchmark".into(), b.into(),
            "--data".into(), p(&t.data).into(), "--out".into(), p(&out).into(),
        ]
    };
    lcg(&args("relatedness")).ok();
    let report = BenchmarkReport::from_json(&std::fs::read_to_string(out.join("relatedness.json")).unwrap()).unwrap();
    assert_eq!(report.per_layer.len(), 3);
    assert_eq!(report.schema_version, 1);
    let csv = std::fs::read_to_string(out.join("relatedness_per_layer.csv")).unwrap();
    let layers: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(layers, ["0", "1", "2"]);

    // the other benchmarks share the directory and its single manifest
    for b in ["features", "relations", "context"] {
        lcg(&args(b)).ok();
    }
    lcg(&args("relatedness")).ok();
    assert_eq!(count_manifests(&out), 1);
    let cmds: Vec<String> = manifest(&out).steps.into_iter().map(|s| s.command).collect();
    assert_eq!(cmds.len(), 4, "{cmds:?}");
}

#[test]
fn vocabulary_mismatch_names_both_sizes() {
    let t = trained();
    let root = t.run.parent().unwrap().join("mismatch");
    std::fs::create_dir_all(&root).unwrap();
    let tok = root.join("tok280.json");
    lcg(&["tokenizer", "train", "--corpus", p(&t.data.join(files::TEXT_TRAIN)), "--vocab-size", "280", "--out", p(&tok)]).ok();
    let size = Tokenizer::load(&tok).unwrap().vocab_size();
    let run = lcg(&[
        "eval", "--checkpoint", p(&t.run.join("model.ckpt")), "--benchmark", "relatedness", "--data", p(&t.data),
        "--tokenizer", p(&tok), "--out", p(&root.join("o")),
    ]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains(&size.to_string()) && run.stderr.contains(&SMALL_VOCAB.to_string()), "{}", run.stderr);
}

#[test]
fn analyze_identical_models_gives_zero_differences() {
    let t = trained();
    let out = t.run.parent().unwrap().join("analyze");
    let ckpt = t.run.join("model.ckpt");
    lcg(&[
        "analyze", "--a", p(&ckpt), "--b", p(&ckpt), "--text", p(&t.data.join(files::TEXT_TEST)),
        "--concreteness", p(&t.data.join(files::CONCRETENESS)), "--relatedness", p(&t.data.join(files::RELATEDNESS)),
        "--out", p(&out),
    ])
    .ok();
    let table: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("quintiles.json")).unwrap()).unwrap();
    let words = table["words"].as_array().unwrap();
    assert!(!words.is_empty());
    assert!(words.iter().all(|w| w["mean_difference"].as_f64() == Some(0.0)));
    assert!(table["groups"].as_array().unwrap().iter().all(|g| g["summary"]["mean"].as_f64() == Some(0.0)));
    let hl: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("humanlikeness.json")).unwrap()).unwrap();
    assert_eq!(hl["a"], hl["b"]);
    for f in ["quintile_groups.csv", "word_differences.csv"] {
        assert!(out.join(f).exists());
    }
    assert_eq!(count_manifests(&out), 1);
}

#[test]
fn train_outputs_and_manifest() {
    let t = trained();
    let names: Vec<String> = dir_files(&t.run).into_iter().map(|(n, _)| n).collect();
    for f in ["config.toml", "curve.csv", "epochs.csv", "last.ckpt", "model.ckpt", "summary.json", "manifest.json"] {
        assert!(names.iter().any(|n| n == f), "{f} missing from {names:?}");
    }
    let m = manifest(&t.run);
    assert_eq!(m.schema_version, 1);
    let step = &m.steps[0];
    assert_eq!(step.command, "train");
    assert_eq!(step.seed, Some(0));
    let hash = ExperimentConfig::load(&t.run.join("config.toml")).unwrap().hash();
    assert_eq!(step.config_hash.as_deref(), Some(hash.as_str()));
    for (path, h) in &step.inputs {
        assert_eq!(&lcg_cli::manifest::file_hash(Path::new(path)).unwrap(), h);
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(t.run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert!(summary["final_loss"].as_f64().unwrap() < summary["initial_loss"].as_f64().unwrap());
}
