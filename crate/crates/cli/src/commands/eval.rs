use std::collections::HashMap;
use std::path::{Path, PathBuf};

use lcg_core::data::formats::{read_concreteness, read_context, read_norms, read_relatedness, read_relations};
use lcg_core::data::synth::files;
use lcg_core::data::{TextDataset, Tokenizer};
use lcg_core::eval::{
    context_benchmark, feature_benchmark, humanlikeness_rank_analysis, per_word_nll_difference, perplexity_report,
    relatedness_benchmark, relation_benchmark, Benchmark, BenchmarkReport, EvalConfig, OlsFit,
    REPORT_SCHEMA_VERSION,
};
use lcg_core::model::TransformerLM;
use lcg_core::train::{load_model, LoadedModel};
use serde::{Deserialize, Serialize};

use crate::args::{AnalyzeArgs, EvalArgs, TextSplit};
use crate::commands::data::TOKENIZER_FILE;
use crate::commands::train::check_vocab;
use crate::error::{CliError, Result};
use crate::manifest::{create_dir, StepBuilder};

fn load_checkpoint(path: &Path, step: &mut StepBuilder) -> Result<LoadedModel> {
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint not found: {}", path.display())));
    }
    step.input(path)?;
    Ok(load_model(path)?)
}

fn benchmark_input(data: &Path, b: Benchmark, split: TextSplit) -> Vec<PathBuf> {
    let names: &[&str] = match b {
        Benchmark::Relatedness => &[files::RELATEDNESS],
        Benchmark::Features => &[files::NORMS],
        Benchmark::Relations => &[files::RELATIONS_TRAIN, files::RELATIONS_TEST],
        Benchmark::Context => &[files::CONTEXT],
        Benchmark::Perplexity => match split {
            TextSplit::Val => &[files::TEXT_VAL],
            TextSplit::Test => &[files::TEXT_TEST],
        },
    };
    names.iter().map(|n| data.join(n)).collect()
}

/// Runs benchmark `b` on `lm`; `inputs` are the files named by
/// [`benchmark_input`].
pub fn run_benchmark(
    lm: &TransformerLM,
    tok: &Tokenizer,
    b: Benchmark,
    inputs: &[PathBuf],
    cfg: &EvalConfig,
) -> Result<BenchmarkReport> {
    Ok(match b {
        Benchmark::Relatedness => relatedness_benchmark(lm, tok, &read_relatedness(&inputs[0])?)?.report,
        Benchmark::Features => feature_benchmark(lm, tok, &read_norms(&inputs[0])?, cfg)?,
        Benchmark::Relations => {
            relation_benchmark(lm, tok, &read_relations(&inputs[0])?, &read_relations(&inputs[1])?, cfg)?
        }
        Benchmark::Context => context_benchmark(lm, tok, &read_context(&inputs[0])?)?,
        Benchmark::Perplexity => perplexity_report(lm, &TextDataset::load(&inputs[0], tok)?)?,
    })
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut step = StepBuilder::new(format!("eval {}", args.benchmark.name()));
    let loaded = load_checkpoint(&args.checkpoint, &mut step)?;
    let lm = &loaded.model.lm;
    let tok_path = args.tokenizer.clone().unwrap_or_else(|| args.data.join(TOKENIZER_FILE));
    let tok = Tokenizer::load(&tok_path)?;
    check_vocab(&tok, lm.config.vocab_size)?;
    step.input(&tok_path)?;
    let inputs = benchmark_input(&args.data, args.benchmark, args.split);
    for p in &inputs {
        step.input(p)?;
    }
    let cfg = EvalConfig {
        split_seed: args.split_seed,
        ..EvalConfig::default()
    };
    let report = run_benchmark(lm, &tok, args.benchmark, &inputs, &cfg)?;
    if !report.score.is_finite() {
        return Err(CliError::Numeric(format!("{} score is not finite", report.benchmark)));
    }
    create_dir(&args.out)?;
    let name = args.benchmark.name();
    step.write(&args.out, &format!("{name}.json"), report.to_json())?;
    if !report.per_layer.is_empty() {
        step.write(&args.out, &format!("{name}_per_layer.csv"), report.per_layer_csv())?;
    }
    step.finish(&args.out, false)?;
    match (args.benchmark, report.best_layer) {
        (Benchmark::Perplexity, _) => println!("{}", report.score),
        (_, Some(l)) => println!("{name}: {} (best layer {l})", report.score),
        (_, None) => println!("{name}: {}", report.score),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanlikenessModel {
    pub best_layer: Option<usize>,
    pub pairs: usize,
    pub fit: OlsFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanlikenessReport {
    pub schema_version: u32,
    pub a: HumanlikenessModel,
    pub b: HumanlikenessModel,
}

/// Rank-in-human-likeness regression for one model at its best
/// relatedness layer. Pairs lacking concreteness for either word are
/// dropped; pair concreteness is the mean of its two words.
pub fn humanlikeness(
    lm: &TransformerLM,
    tok: &Tokenizer,
    pairs: &[(String, String, f64)],
    concreteness: &HashMap<&str, f64>,
) -> Result<HumanlikenessModel> {
    let rel = relatedness_benchmark(lm, tok, pairs)?;
    let (mut model, mut human, mut conc) = (Vec::new(), Vec::new(), Vec::new());
    for (k, &i) in rel.kept.iter().enumerate() {
        let (a, b, score) = &pairs[i];
        if let (Some(ca), Some(cb)) = (concreteness.get(a.as_str()), concreteness.get(b.as_str())) {
            model.push(rel.best_cosines[k]);
            human.push(*score);
            conc.push((ca + cb) / 2.0);
        }
    }
    Ok(HumanlikenessModel {
        best_layer: rel.report.best_layer,
        pairs: model.len(),
        fit: humanlikeness_rank_analysis(&model, &human, &conc)?,
    })
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let mut step = StepBuilder::new("analyze");
    let a = load_checkpoint(&args.a, &mut step)?;
    let b = load_checkpoint(&args.b, &mut step)?;
    let tok_path = args.tokenizer.clone().unwrap_or_else(|| {
        args.text
            .parent()
            .map_or_else(|| PathBuf::from(TOKENIZER_FILE), |p| p.join(TOKENIZER_FILE))
    });
    let tok = Tokenizer::load(&tok_path)?;
    step.input(&tok_path)?;
    for m in [&a, &b] {
        check_vocab(&tok, m.model.lm.config.vocab_size)?;
    }
    step.input(&args.text)?;
    step.input(&args.concreteness)?;
    let text = TextDataset::load(&args.text, &tok)?;
    let conc = read_concreteness(&args.concreteness)?;
    let table = per_word_nll_difference(&a.model.lm, &b.model.lm, &tok, &text, &conc)?;
    create_dir(&args.out)?;
    let mut json = serde_json::to_string_pretty(&table).expect("table serializes");
    json.push('\n');
    step.write(&args.out, "quintiles.json", json)?;
    step.write(&args.out, "quintile_groups.csv", table.groups_csv())?;
    step.write(&args.out, "word_differences.csv", table.words_csv())?;
    println!(
        "{} words; top minus bottom concreteness quintile: {}",
        table.words.len(),
        table.top_minus_bottom()
    );
    if let Some(rel_path) = &args.relatedness {
        step.input(rel_path)?;
        let pairs = read_relatedness(rel_path)?;
        let cmap: HashMap<&str, f64> = conc.iter().map(|(w, c)| (w.as_str(), *c)).collect();
        let report = HumanlikenessReport {
            schema_version: REPORT_SCHEMA_VERSION,
            a: humanlikeness(&a.model.lm, &tok, &pairs, &cmap)?,
            b: humanlikeness(&b.model.lm, &tok, &pairs, &cmap)?,
        };
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        step.write(&args.out, "humanlikeness.json", json)?;
        println!(
            "human-likeness slope: a {:.4} (stderr {:.4}), b {:.4} (stderr {:.4})",
            report.a.fit.slope, report.a.fit.slope_stderr, report.b.fit.slope, report.b.fit.slope_stderr
        );
    }
    step.finish(&args.out, false)?;
    Ok(())
}
