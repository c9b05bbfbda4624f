use std::path::Path;

use lcg_core::data::{gen_synthetic, Tokenizer, WorldConfig};

use crate::args::{SynthArgs, TokenizerTrainArgs};
use crate::error::{CliError, Result};
use crate::manifest::{create_dir, prepare_out_dir, StepBuilder, MANIFEST_FILE};

pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const WORLD_CONFIG_FILE: &str = "world_config.toml";

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

pub fn tokenizer_train(args: &TokenizerTrainArgs) -> Result<()> {
    if !args.corpus.is_file() {
        return Err(CliError::usage(format!("corpus not found: {}", args.corpus.display())));
    }
    let mut step = StepBuilder::new("tokenizer train");
    step.input(&args.corpus)?;
    let text = std::fs::read_to_string(&args.corpus)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.corpus.display())))?;
    let tok = Tokenizer::train(&text, args.vocab_size)?;
    let dir = parent_dir(&args.out);
    create_dir(dir)?;
    tok.save(&args.out)?;
    step.output(args.out.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()));
    step.finish(dir, false)?;
    println!(
        "tokenizer: {} ids ({} merges) written to {}",
        tok.vocab_size(),
        tok.merges().len(),
        args.out.display()
    );
    Ok(())
}

pub fn synth_gen(args: &SynthArgs) -> Result<()> {
    let mut step = StepBuilder::new("synth gen");
    let world = match &args.config {
        Some(path) => {
            step.input(path)?;
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            toml::from_str::<WorldConfig>(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        }
        None => WorldConfig::default(),
    };
    world.validate()?;
    prepare_out_dir(&args.out_dir, args.force)?;
    let corpus = gen_synthetic(&world, args.seed)?;
    let tok = Tokenizer::train(&corpus.tokenizer_corpus(), args.vocab_size)?;
    corpus.write_to_dir(&args.out_dir)?;
    tok.save(&args.out_dir.join(TOKENIZER_FILE))?;
    step.write(&args.out_dir, WORLD_CONFIG_FILE, toml::to_string(&world).expect("world config serializes"))?;
    let mut names: Vec<String> = std::fs::read_dir(&args.out_dir)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.out_dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    names.sort();
    for n in names {
        step.output(n);
    }
    step.config(crate::hash_json(&world), args.seed);
    step.finish(&args.out_dir, true)?;
    println!(
        "world: {} words, {} captions, {} text words; tokenizer {} ids; written to {}",
        corpus.world.words.len(),
        corpus.captions.len(),
        corpus.text_train.split_whitespace().count(),
        tok.vocab_size(),
        args.out_dir.display()
    );
    Ok(())
}
