use std::path::{Path, PathBuf};

use lcg_core::data::Tokenizer;
use lcg_core::objectives::ObjectiveKind;
use lcg_core::train::{
    build_voken_table, curve_csv, epochs_csv, load_model, read_checkpoint, sweep_lambda_u, to_checkpoint,
    trainer_for, write_checkpoint, ExperimentConfig, ExperimentData, Scenario, Trainer, VokenTable, CURVE_HEADER,
    EPOCHS_HEADER,
};
use serde::{Deserialize, Serialize};

use crate::args::{SweepArgs, TrainArgs};
use crate::error::{CliError, Result};
use crate::manifest::{prepare_out_dir, StepBuilder};

pub const MODEL_FILE: &str = "model.ckpt";
pub const LAST_FILE: &str = "last.ckpt";
pub const CURVE_FILE: &str = "curve.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SELECTION_FILE: &str = "selection.json";
pub const SCHEMA_VERSION: u32 = 1;

/// Machine-readable result of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub objective: ObjectiveKind,
    pub scenario: Scenario,
    pub seed: u64,
    pub lambda_u: Option<f64>,
    pub steps: u64,
    pub epochs: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    /// `val_loss` (grounded scenario) or `val_perplexity` (mixed).
    pub val_metric: String,
    pub config_hash: String,
}

/// Loads the config and applies command-line overrides in order:
/// objective preset, ablation, then scalar settings.
pub fn resolve_config(args: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(k) = args.objective {
        cfg.set_objective(k);
    }
    if let Some(a) = args.ablation {
        a.apply(&mut cfg);
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if args.lambda_u.is_some() {
        cfg.train.lambda_u = args.lambda_u;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_tokenizer(path: &Path, model_vocab: usize) -> Result<Tokenizer> {
    let tok = Tokenizer::load(path)?;
    check_vocab(&tok, model_vocab)?;
    Ok(tok)
}

pub fn check_vocab(tok: &Tokenizer, model_vocab: usize) -> Result<()> {
    if tok.vocab_size() != model_vocab {
        return Err(CliError::usage(format!(
            "tokenizer vocabulary ({}) does not match the model vocabulary ({model_vocab})",
            tok.vocab_size()
        )));
    }
    Ok(())
}

/// Tokenizer and datasets for `cfg`, with their paths recorded as inputs.
fn load_data(cfg: &ExperimentConfig, step: &mut StepBuilder) -> Result<ExperimentData> {
    let tok_path = cfg.data.tokenizer_path();
    let tok = load_tokenizer(&tok_path, cfg.model.vocab_size)?;
    step.input(&tok_path)?;
    use lcg_core::data::synth::files;
    let mut used = vec![files::CAPTIONS, files::VAL_CAPTIONS, files::FEATURES];
    if cfg.objective.kind.uses_vokens() {
        used.push(files::VOKEN_BANK);
    }
    if cfg.data.scenario == Scenario::Mixed {
        used.extend([files::TEXT_TRAIN, files::TEXT_VAL]);
    }
    for f in used {
        let p = cfg.data.path(f);
        if p.exists() {
            step.input(&p)?;
        }
    }
    Ok(ExperimentData::load(&cfg.data, &tok)?)
}

fn vokens_for(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Option<VokenTable>> {
    if !cfg.objective.kind.uses_vokens() {
        return Ok(None);
    }
    log::info!("training the voken matcher for {} epoch(s)", cfg.train.matcher_epochs);
    Ok(Some(build_voken_table(cfg, data)?))
}

/// Rows of an existing CSV whose first column satisfies `keep`.
fn prior_rows(path: &Path, header: &str, keep: impl Fn(u64) -> bool) -> Result<Vec<String>> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(CliError::usage(format!("{}: unexpected header", path.display())));
    }
    Ok(lines
        .filter(|l| l.split(',').next().and_then(|f| f.parse().ok()).is_some_and(&keep))
        .map(str::to_string)
        .collect())
}

fn join_csv(header_csv: &str, prior: &[String]) -> String {
    let mut lines = header_csv.lines();
    let mut s = format!("{}\n", lines.next().unwrap_or_default());
    for l in prior.iter().map(String::as_str).chain(lines) {
        s.push_str(l);
        s.push('\n');
    }
    s
}

struct RunFiles<'a> {
    dir: &'a Path,
    hash: String,
    prior_curve: Vec<String>,
    prior_epochs: Vec<String>,
}

impl RunFiles<'_> {
    fn write_progress(&self, t: &Trainer<'_>, step: &mut StepBuilder) -> Result<()> {
        step.write(self.dir, CURVE_FILE, join_csv(&curve_csv(&t.curve), &self.prior_curve))?;
        step.write(self.dir, EPOCHS_FILE, join_csv(&epochs_csv(&t.epochs), &self.prior_epochs))?;
        Ok(())
    }

    fn write_checkpoints(&self, t: &Trainer<'_>, step: &mut StepBuilder) -> Result<()> {
        let last = to_checkpoint(&t.model, &t.model.lm.params, &self.hash, Some((t.state(), t.optimizer())));
        write_checkpoint(&self.dir.join(LAST_FILE), &last)?;
        step.output(LAST_FILE);
        let best = t.best_params().unwrap_or(&t.model.lm.params);
        write_checkpoint(&self.dir.join(MODEL_FILE), &to_checkpoint(&t.model, best, &self.hash, None))?;
        step.output(MODEL_FILE);
        Ok(())
    }

    fn initial_loss(&self, t: &Trainer<'_>) -> Option<f64> {
        match self.prior_curve.first() {
            Some(row) => row.split(',').nth(3).and_then(|v| v.parse().ok()),
            None => t.curve.first().map(|r| r.loss.total()),
        }
    }
}

/// Runs the epoch loop, checkpointing after every epoch.
fn drive(
    mut t: Trainer<'_>,
    cfg: &ExperimentConfig,
    files: &RunFiles<'_>,
    step: &mut StepBuilder,
    stop_after: Option<usize>,
) -> std::result::Result<TrainSummary, RunError> {
    let last_epoch = stop_after.map_or(cfg.train.epochs, |s| s.min(cfg.train.epochs));
    while t.epoch() < last_epoch {
        match t.run_epoch() {
            Ok(rec) => {
                log::info!(
                    "epoch {}: mean loss {:.4}{}",
                    rec.epoch,
                    rec.mean_loss,
                    rec.val_metric.map_or(String::new(), |v| format!(", validation {v:.4}"))
                );
                files.write_progress(&t, step)?;
                files.write_checkpoints(&t, step)?;
            }
            Err(e) => {
                files.write_progress(&t, step)?;
                return Err(RunError::Train(e));
            }
        }
    }
    let state = t.state();
    Ok(TrainSummary {
        schema_version: SCHEMA_VERSION,
        objective: cfg.objective.kind,
        scenario: cfg.data.scenario,
        seed: cfg.train.seed,
        lambda_u: (cfg.data.scenario == Scenario::Mixed).then_some(t.lambda_u),
        steps: t.step(),
        epochs: t.epoch(),
        initial_loss: files.initial_loss(&t),
        final_loss: t.curve.last().map(|r| r.loss.total()),
        best_epoch: state.best_epoch,
        best_metric: state.best_metric,
        val_metric: match cfg.data.scenario {
            Scenario::Grounded => "val_loss".into(),
            Scenario::Mixed => "val_perplexity".into(),
        },
        config_hash: files.hash.clone(),
    })
}

fn write_summary(dir: &Path, summary: &TrainSummary, step: &mut StepBuilder) -> Result<()> {
    let mut json = serde_json::to_string_pretty(summary).expect("summary serializes");
    json.push('\n');
    step.write(dir, SUMMARY_FILE, json)?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let dir = &args.out_dir;
    prepare_out_dir(dir, args.force || args.resume.is_some())?;
    let mut step = StepBuilder::new("train");
    step.input(&args.config)?;
    step.config(cfg.hash(), cfg.train.seed);
    let data = load_data(&cfg, &mut step)?;
    let vokens = vokens_for(&cfg, &data)?;
    let mut t = trainer_for(&cfg, &data, vokens.as_ref(), cfg.train.lambda_u)?;
    let mut files = RunFiles {
        dir,
        hash: cfg.hash(),
        prior_curve: Vec::new(),
        prior_epochs: Vec::new(),
    };
    if let Some(path) = &args.resume {
        step.input(path)?;
        let loaded = load_model(path)?;
        if loaded.meta.config_hash != files.hash {
            return Err(CliError::usage(format!(
                "{} was written by a different configuration ({} vs {})",
                path.display(),
                loaded.meta.config_hash,
                files.hash
            )));
        }
        let state = loaded
            .meta
            .train
            .clone()
            .ok_or_else(|| CliError::usage(format!("{} holds no training state", path.display())))?;
        let opt = loaded
            .optimizer
            .ok_or_else(|| CliError::usage(format!("{} holds no optimizer state", path.display())))?;
        let best = match state.best_epoch {
            Some(_) => {
                let best_path = path.with_file_name(MODEL_FILE);
                Some(read_checkpoint(&best_path)?.into_store())
            }
            None => None,
        };
        files.prior_curve = prior_rows(&dir.join(CURVE_FILE), CURVE_HEADER, |s| s <= state.step)?;
        files.prior_epochs = prior_rows(&dir.join(EPOCHS_FILE), EPOCHS_HEADER, |e| (e as usize) < state.epoch)?;
        log::info!("resuming at step {} (epoch {})", state.step, state.epoch);
        t.model = loaded.model;
        t.restore(state, opt, best)?;
    }
    step.write(dir, CONFIG_FILE, cfg.to_toml())?;
    log::info!(
        "training {} ({} parameters, {} steps per epoch)",
        cfg.objective.kind,
        t.model.lm.params.num_params(),
        t.steps_per_epoch()
    );
    let summary = match drive(t, &cfg, &files, &mut step, args.stop_after_epoch) {
        Ok(s) => s,
        Err(e) => {
            step.finish(dir, args.resume.is_none())?;
            return Err(e.into());
        }
    };
    write_summary(dir, &summary, &mut step)?;
    step.finish(dir, args.resume.is_none())?;
    println!(
        "trained {} for {} steps: loss {} -> {}{}",
        summary.objective,
        summary.steps,
        fmt_opt(summary.initial_loss),
        fmt_opt(summary.final_loss),
        summary
            .best_metric
            .map_or(String::new(), |m| format!(", best {} {m:.4} at epoch {}", summary.val_metric, summary.best_epoch.unwrap_or(0)))
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

/// Worker count from `LCG_THREADS`, else the available cores.
pub fn thread_budget() -> usize {
    std::env::var("LCG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run_dir_name(lambda_u: f64, seed: u64) -> String {
    format!("lambda_{lambda_u}_seed_{seed}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSelection {
    pub schema_version: u32,
    pub objective: ObjectiveKind,
    pub seeds: Vec<u64>,
    pub means: Vec<SweepMean>,
    pub selected_lambda_u: f64,
    /// Run directories of the selected candidate, one per seed.
    pub selected_runs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMean {
    pub lambda_u: f64,
    pub mean_val_perplexity: f64,
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(k) = args.objective {
        cfg.set_objective(k);
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if cfg.data.scenario != Scenario::Mixed {
        return Err(CliError::usage("the λ_u sweep needs data.scenario = \"mixed\""));
    }
    let grid = args.lambda_u_grid.clone().unwrap_or_else(|| cfg.train.lambda_u_grid.clone());
    if grid.is_empty() || args.seeds.is_empty() {
        return Err(CliError::usage("sweep needs at least one λ_u and one seed"));
    }
    cfg.train.lambda_u_grid = grid.clone();
    cfg.validate()?;
    let dir = &args.out_dir;
    prepare_out_dir(dir, args.force)?;
    let mut step = StepBuilder::new("sweep");
    step.input(&args.config)?;
    step.config(cfg.hash(), args.seeds[0]);
    let data = load_data(&cfg, &mut step)?;
    let threads = thread_budget();
    log::info!("sweeping λ_u over {grid:?} × seeds {:?} on {threads} worker(s)", args.seeds);
    let result = sweep_lambda_u(&grid, &args.seeds, threads, |lambda_u, seed| {
        let mut c = cfg.clone();
        c.train.seed = seed;
        c.train.lambda_u = Some(lambda_u);
        let run_dir: PathBuf = dir.join("runs").join(run_dir_name(lambda_u, seed));
        let summary = train_run(&c, &data, &run_dir).map_err(|e| match e {
            RunError::Train(t) => t,
            RunError::Cli(c) => lcg_core::train::TrainError::Config(c.to_string()),
        })?;
        summary
            .best_metric
            .ok_or_else(|| lcg_core::train::TrainError::Config("sweep runs need validation text".into()))
    })?;
    step.write(dir, SWEEP_FILE, result.to_csv())?;
    let selection = SweepSelection {
        schema_version: SCHEMA_VERSION,
        objective: cfg.objective.kind,
        seeds: args.seeds.clone(),
        means: result
            .means
            .iter()
            .map(|&(lambda_u, m)| SweepMean {
                lambda_u,
                mean_val_perplexity: m,
            })
            .collect(),
        selected_lambda_u: result.selected,
        selected_runs: args
            .seeds
            .iter()
            .map(|&s| format!("runs/{}", run_dir_name(result.selected, s)))
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&selection).expect("selection serializes");
    json.push('\n');
    step.write(dir, SELECTION_FILE, json)?;
    for &(l, m) in &result.means {
        step.output(format!("runs/{}", run_dir_name(l, args.seeds[0])));
        println!("lambda_u {l}: mean validation perplexity {m:.4}");
    }
    step.finish(dir, true)?;
    println!("selected lambda_u = {}", result.selected);
    Ok(())
}

enum RunError {
    Train(lcg_core::train::TrainError),
    Cli(CliError),
}

impl From<lcg_core::train::TrainError> for RunError {
    fn from(e: lcg_core::train::TrainError) -> Self {
        Self::Train(e)
    }
}

impl From<CliError> for RunError {
    fn from(e: CliError) -> Self {
        Self::Cli(e)
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Train(t) => t.into(),
            RunError::Cli(c) => c,
        }
    }
}

/// One sweep member in its own directory with its own manifest.
fn train_run(cfg: &ExperimentConfig, data: &ExperimentData, dir: &Path) -> std::result::Result<TrainSummary, RunError> {
    prepare_out_dir(dir, true)?;
    let mut step = StepBuilder::new("sweep run");
    step.config(cfg.hash(), cfg.train.seed);
    let vokens = if cfg.objective.kind.uses_vokens() {
        Some(build_voken_table(cfg, data)?)
    } else {
        None
    };
    let t = trainer_for(cfg, data, vokens.as_ref(), cfg.train.lambda_u)?;
    step.write(dir, CONFIG_FILE, cfg.to_toml())?;
    let files = RunFiles {
        dir,
        hash: cfg.hash(),
        prior_curve: Vec::new(),
        prior_epochs: Vec::new(),
    };
    let summary = match drive(t, cfg, &files, &mut step, None) {
        Ok(s) => s,
        Err(e) => {
            step.finish(dir, true)?;
            return Err(e);
        }
    };
    write_summary(dir, &summary, &mut step)?;
    step.finish(dir, true)?;
    log::info!(
        "λ_u={} seed={}: best validation perplexity {}",
        cfg.train.lambda_u.unwrap_or_default(),
        cfg.train.seed,
        fmt_opt(summary.best_metric)
    );
    Ok(summary)
}
