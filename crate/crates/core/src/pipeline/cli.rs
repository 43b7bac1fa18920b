use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::{load_config, run_stage, PipelineError, RunConfig, Stage, EXIT_OK};

#[derive(Debug, Parser)]
#[command(
    name = "cbmkit",
    version,
    about = "Concept bottleneck models over precomputed embeddings"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration. Missing keys take their defaults.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set cbl.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Rerun stages even when their manifest is current.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Planted fixtures.
    Synth {
        #[command(subcommand)]
        action: SynthAction,
    },
    /// Filter detections, encode concept labels and write the dataset manifest.
    BuildDataset,
    /// Train the concept bottleneck layer.
    TrainCbl,
    /// Solve the elastic-net path and save one final layer per target NEC.
    TrainFinal {
        #[arg(long)]
        alpha_mix: Option<f64>,
        #[arg(long)]
        path_points: Option<usize>,
        #[arg(long)]
        min_ratio: Option<f64>,
        /// Repeatable; replaces the configured targets.
        #[arg(long = "target-nec")]
        target_nec: Vec<usize>,
    },
    /// Test accuracy at each NEC level.
    EvalAnec,
    /// Top concept contributions for every test sample.
    Explain {
        /// Model bundle with a final layer (default: the `eval.explain_nec` bundle).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Embedding file to explain (default: `paths.test_embeddings`).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Comma-separated subset of row ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
    /// Prediction change after cutting each class row to its top weights.
    AuditPrune,
    /// Monte-Carlo check of the random-bottleneck leakage bound.
    VerifyTheorem {
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Every pipeline stage from synth to audit-prune, in order.
    RunAll,
}

#[derive(Debug, Subcommand)]
pub enum SynthAction {
    /// Write embeddings, detections, vocabulary and crops to the configured paths.
    Generate,
}

fn stages_for(command: &Command) -> Vec<Stage> {
    match command {
        Command::Synth {
            action: SynthAction::Generate,
        } => vec![Stage::Synth],
        Command::BuildDataset => vec![Stage::BuildDataset],
        Command::TrainCbl => vec![Stage::TrainCbl],
        Command::TrainFinal { .. } => vec![Stage::TrainFinal],
        Command::EvalAnec => vec![Stage::EvalAnec],
        Command::Explain { .. } => vec![Stage::Explain],
        Command::AuditPrune => vec![Stage::AuditPrune],
        Command::VerifyTheorem { .. } => vec![Stage::VerifyTheorem],
        Command::RunAll => Stage::PIPELINE.to_vec(),
    }
}

/// Loads the config for `cli`, folding subcommand flags into overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut overrides = cli.global.overrides.clone();
    let quoted = |p: &std::path::Path| format!("{:?}", p.display().to_string());
    match &cli.command {
        Command::TrainFinal {
            alpha_mix,
            path_points,
            min_ratio,
            target_nec,
        } => {
            if let Some(a) = alpha_mix {
                overrides.push(format!("final.alpha_mix={a:?}"));
            }
            if let Some(p) = path_points {
                overrides.push(format!("final.path_points={p}"));
            }
            if let Some(r) = min_ratio {
                overrides.push(format!("final.min_ratio={r:?}"));
            }
            if !target_nec.is_empty() {
                overrides.push(format!("final.target_necs={target_nec:?}"));
            }
        }
        Command::Explain {
            model,
            embeddings,
            ids,
        } => {
            if let Some(m) = model {
                overrides.push(format!("eval.explain_model={}", quoted(m)));
            }
            if let Some(e) = embeddings {
                overrides.push(format!("paths.test_embeddings={}", quoted(e)));
            }
            if !ids.is_empty() {
                overrides.push(format!("eval.explain_ids={ids:?}"));
            }
        }
        _ => {}
    }
    if let Command::VerifyTheorem { d, trials } = &cli.command {
        if let Some(d) = d {
            overrides.push(format!("theorem.d={d}"));
            // keep the default grid meaningful for other dimensions
            overrides.push(format!(
                "theorem.k_grid=[{}]",
                default_k_grid(*d)
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            ));
        }
        if let Some(t) = trials {
            overrides.push(format!("theorem.trials={t}"));
        }
    }
    load_config(cli.global.config.as_deref(), &overrides)
}

/// `{1, d/8, d/4, d/2, 3d/4, d-1, d, 5d/4}`, deduplicated.
pub fn default_k_grid(d: usize) -> Vec<usize> {
    let mut grid = vec![
        1,
        d / 8,
        d / 4,
        d / 2,
        3 * d / 4,
        d.saturating_sub(1),
        d,
        d + d / 4,
    ];
    grid.retain(|&k| k >= 1);
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// Runs the parsed command and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    let cfg = match resolve_config(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    for stage in stages_for(&cli.command) {
        match run_stage(stage, &cfg, cli.global.force) {
            Ok(outcome) => {
                let verb = if outcome.skipped { "skipped" } else { "done" };
                println!("[{}] {verb}: {}", stage.name(), outcome.summary);
                if stage == Stage::VerifyTheorem {
                    println!("PASS");
                }
            }
            Err(e) => {
                if matches!(e, PipelineError::Acceptance(_)) {
                    println!("FAIL");
                }
                eprintln!("error in {}: {e}", stage.name());
                return e.exit_code();
            }
        }
    }
    EXIT_OK
}
