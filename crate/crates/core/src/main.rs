use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use accent_core::config::ExperimentConfig;
use accent_core::eval::{
    evaluate, render_report, run_expansion, run_experiment, write_experiment, ExperimentError, ReportFormat,
};
use accent_core::model::{build_model, read_checkpoint, write_checkpoint};
use accent_core::selftest;
use accent_core::synth::{read_dataset, write_dataset, Corpus, DatasetPartition, Recipe};
use accent_core::trainer::{train, write_step_log, Method, TrainerConfig};

#[derive(Parser)]
#[command(name = "accent-expand", version, about = "Accent domain expansion experiments")]
struct Cli {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format: table, csv or json.
    #[arg(long, global = true, default_value = "table")]
    format: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write one dataset file per recipe.
    Gen {
        /// Recipes to write (default: all four).
        #[arg(long)]
        recipe: Vec<String>,
    },
    /// Train one model.
    Train {
        /// FT, WCA, KLD, FMP, MAML, MAML_FMP, or `baseline` for a model trained from scratch.
        #[arg(long)]
        method: String,
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Recipe used when generating data (default: Accent for expansion methods, All for baseline).
        #[arg(long)]
        recipe: Option<String>,
        /// Starting checkpoint for expansion methods; overrides `init_checkpoint`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset's test sets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the full baseline and expansion grid and write the report.
    Compare,
    /// Run every oracle suite.
    Selftest,
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct InvariantFailure(String);

impl std::fmt::Display for InvariantFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvariantFailure {}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn load_partition(cfg: &ExperimentConfig, data: Option<&Path>, recipe: Recipe) -> Result<DatasetPartition> {
    match data {
        Some(p) => read_dataset(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(Corpus::generate(&cfg.data)?.partition(recipe, cfg.seed)?),
    }
}

fn cmd_gen(cfg: &ExperimentConfig, recipes: &[String]) -> Result<()> {
    let recipes: Vec<Recipe> = if recipes.is_empty() {
        vec![Recipe::Mandarin, Recipe::All, Recipe::Accent, Recipe::AccentPlus]
    } else {
        recipes.iter().map(|r| r.parse()).collect::<Result<_, _>>()?
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let corpus = Corpus::generate(&cfg.data)?;
    let meta = serde_json::json!({
        "seed": cfg.seed,
        "synth": cfg.data,
        "source": corpus.source,
        "accents": corpus.accents,
    });
    for r in recipes {
        let part = corpus.partition(r, cfg.seed)?;
        let path = cfg.out_dir.join(format!("{}.dataset", r.name().replace('+', "plus").to_lowercase()));
        write_dataset(&part, Some(&meta), &path)?;
        println!("{}: {} train, {} source test -> {}", r.name(), part.train.len(), part.test_source.len(), path.display());
    }
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn cmd_train(
    cfg: &ExperimentConfig,
    method: &str,
    data: Option<&Path>,
    recipe: Option<&str>,
    init: Option<&Path>,
) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let baseline = method.eq_ignore_ascii_case("baseline");
    let default_recipe = if baseline { Recipe::All } else { Recipe::Accent };
    let recipe = recipe.map(str::parse).transpose()?.unwrap_or(default_recipe);
    let part = load_partition(cfg, data, recipe)?;
    let (model, outcome) = if baseline {
        let mut model = build_model(&cfg.model, cfg.seed)?;
        let tcfg = TrainerConfig {
            method: Method::FT,
            rng_seed: cfg.seed,
            ..cfg.baseline.clone()
        };
        let outcome = train(&tcfg, &mut model, &cfg.loss, &part.train)?;
        (model, outcome)
    } else {
        let method: Method = method.parse()?;
        let path = init
            .map(Path::to_path_buf)
            .or_else(|| cfg.init_checkpoint.clone())
            .ok_or_else(|| ExperimentError::MissingBaseline {
                method,
                reason: "pass --init or set init_checkpoint".into(),
            })?;
        let start = read_checkpoint(&path).map_err(|e| ExperimentError::MissingBaseline {
            method,
            reason: format!("{}: {e}", path.display()),
        })?;
        run_expansion(cfg, &start, method, &part.train)?
    };
    write_checkpoint(&model, &cfg.out_dir.join("model.ckpt"))?;
    write_step_log(&outcome.records, &cfg.out_dir.join("steps.jsonl"))?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    let scores = evaluate(&model, &part, &cfg.decode)?;
    println!(
        "{} steps, CER_source {:.4}, CER_accent {:.4}, checkpoint {}",
        outcome.records.len(),
        scores.cer_source,
        scores.cer_accent,
        cfg.out_dir.join("model.ckpt").display()
    );
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let model = read_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let part = load_partition(cfg, data, Recipe::All)?;
    let scores = evaluate(&model, &part, &cfg.decode)?;
    println!("CER_source {:.4}", scores.cer_source);
    println!("CER_accent {:.4}", scores.cer_accent);
    for (d, c) in &scores.per_domain {
        println!("  {d} {c:.4}");
    }
    Ok(())
}

fn cmd_compare(cfg: &ExperimentConfig, format: ReportFormat) -> Result<()> {
    let run = run_experiment(cfg)?;
    write_experiment(cfg, &run, &cfg.out_dir)?;
    let report = if cfg.report_timing {
        run.report.clone()
    } else {
        run.report.without_timing()
    };
    print!("{}", render_report(&report, format));
    Ok(())
}

fn cmd_selftest(seed: u64) -> Result<()> {
    let checks = selftest::run_all(seed);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(InvariantFailure(format!("{failed} self-test check(s) failed")).into());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let format: ReportFormat = cli.format.parse().map_err(|e: String| anyhow!(e))?;
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen { recipe } => cmd_gen(&cfg, recipe),
        Command::Train {
            method,
            data,
            recipe,
            init,
        } => cmd_train(&cfg, method, data.as_deref(), recipe.as_deref(), init.as_deref()),
        Command::Eval { checkpoint, data } => cmd_eval(&cfg, checkpoint, data.as_deref()),
        Command::Compare => cmd_compare(&cfg, format),
        Command::Selftest => cmd_selftest(cli.seed.unwrap_or(cfg.seed)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InvariantFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
