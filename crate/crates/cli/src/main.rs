use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use emotts_core::datasets::{
    generate_synthetic_corpus, load_manifest_with_warnings, write_corpus, PhonemeItem,
    ReferenceRule,
};
use emotts_core::evaluation::ProjectionMethod;
use emotts_core::pipeline::{
    comparison_markdown, evaluate, read_synthesized, run_ablation, select_split, synthesize_items,
    write_synthesized, AblationPlan, EvalOptions, Split,
};
use emotts_core::training::{load_model, run_training, Checkpoint, TrainConfig};
use emotts_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "emotts",
    version,
    about = "Emotional TTS with emotion/timbre disentanglement"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file. Without one the desk profile is used.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted override such as `lambdas.mi=0.2`. Repeatable; the last one wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    /// Run seed, replacing `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus: `manifest.jsonl` plus mel files.
    GenData,
    /// Train one stage and write metrics and checkpoints.
    Train {
        /// Stage to train, replacing `stage` in the configuration.
        #[arg(long)]
        stage: Option<u8>,
        /// Corpus manifest. Without one the corpus is generated from the configuration.
        #[arg(long, value_name = "MANIFEST")]
        corpus: Option<PathBuf>,
        /// Checkpoint to start from; stage 2 needs a stage-1 checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        init: Option<PathBuf>,
    },
    /// Synthesize mels for a manifest split.
    Synthesize {
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "MANIFEST")]
        manifest: PathBuf,
        /// all, train, val, test or heldout.
        #[arg(long, default_value = "heldout")]
        split: Split,
        /// diff_text or same_utterance. References come from the whole manifest.
        #[arg(long, default_value = "diff_text")]
        rule: ReferenceRule,
    },
    /// Score synthesized mels and style embeddings against their targets.
    Evaluate {
        #[arg(long, value_name = "MANIFEST")]
        manifest: PathBuf,
        /// all, train, val, test or heldout.
        #[arg(long, default_value = "heldout")]
        split: Split,
        /// `synth.jsonl` written by `synthesize`.
        #[arg(long, value_name = "SYNTH_JSONL")]
        synth: PathBuf,
        /// pca or tsne.
        #[arg(long, default_value = "tsne")]
        projection: ProjectionMethod,
    },
    /// Pretrain once, then train and compare the full method, w/o predictors and w/o MINE.
    Ablate {
        /// Stage-1 steps; defaults to `total_steps`.
        #[arg(long)]
        stage1_steps: Option<usize>,
        /// Stage-2 steps per variant; defaults to `total_steps`.
        #[arg(long)]
        stage2_steps: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Synthesize { .. } => "synthesize",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn resolve_config(common: &Common, command: &Command) -> Result<TrainConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::desk(),
    };
    config = config.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Command::Train {
        stage: Some(stage), ..
    } = command
    {
        config.stage = *stage;
    }
    config.validate()?;
    Ok(config)
}

fn write_snapshot(out: &Path, config: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("config.toml");
    std::fs::write(&path, config.to_toml()).map_err(|e| Error::io(&path, e))?;
    let argv: Vec<String> = std::env::args().collect();
    let path = out.join("command.txt");
    std::fs::write(&path, argv.join(" ") + "\n").map_err(|e| Error::io(&path, e))
}

fn load_corpus(manifest: &Path) -> Result<Vec<PhonemeItem>> {
    let (items, warnings) = load_manifest_with_warnings(manifest)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(items)
}

fn execute(command: &Command, config: &TrainConfig, out: &Path) -> Result<()> {
    match command {
        Command::GenData => {
            let corpus = generate_synthetic_corpus(&config.data.synthetic_spec())?;
            let manifest = write_corpus(out, &corpus)?;
            info!(
                "wrote {} utterances to {}",
                corpus.len(),
                manifest.display()
            );
        }
        Command::Train { corpus, init, .. } => {
            let items = match corpus {
                Some(m) => load_corpus(m)?,
                None => generate_synthetic_corpus(&config.data.synthetic_spec())?,
            };
            let init = init.as_deref().map(Checkpoint::load).transpose()?;
            let outcome = run_training(config.clone(), &items, init.as_ref(), Some(out))?;
            info!(
                "stage {} finished at step {}; validation recons {:?} -> {:?}",
                config.stage,
                outcome.checkpoint.step,
                outcome.initial_val_recons,
                outcome.final_val_recons
            );
        }
        Command::Synthesize {
            checkpoint,
            manifest,
            split,
            rule,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            if ckpt.stage != 2 {
                return Err(Error::Checkpoint(format!(
                    "{} is a stage-{} checkpoint; synthesis needs the style encoder from stage 2",
                    checkpoint.display(),
                    ckpt.stage
                )));
            }
            let (store, model) = load_model(&ckpt)?;
            let pool = load_corpus(manifest)?;
            let items = select_split(&pool, *split, &config.data)?;
            let synth = synthesize_items(&store, &model, &items, &pool, *rule, config.seed)?;
            let path = write_synthesized(out, &synth)?;
            info!(
                "synthesized {} utterances into {}",
                synth.len(),
                path.display()
            );
        }
        Command::Evaluate {
            manifest,
            split,
            synth,
            projection,
        } => {
            let targets = select_split(&load_corpus(manifest)?, *split, &config.data)?;
            let synthesized = read_synthesized(synth)?;
            let opts = EvalOptions {
                probe_seed: config.seed,
                projection: *projection,
                projection_seed: config.seed,
                plot_dir: Some(out.join("plots")),
            };
            let report = evaluate(&targets, &synthesized, &opts)?;
            report.save(&out.join("report.json"))?;
            info!(
                "MCD {:.3} dB, UAA {:.3}, speaker accuracy {:.3}, leakage {:.3}",
                report.mcd_mean, report.uaa, report.speaker_accuracy, report.speaker_leakage
            );
        }
        Command::Ablate {
            stage1_steps,
            stage2_steps,
        } => {
            let plan = AblationPlan {
                stage1_steps: stage1_steps.unwrap_or(config.total_steps),
                stage2_steps: stage2_steps.unwrap_or(config.total_steps),
                eval: EvalOptions {
                    probe_seed: config.seed,
                    projection: ProjectionMethod::Tsne,
                    projection_seed: config.seed,
                    plot_dir: Some(out.to_path_buf()),
                },
            };
            let outcome = run_ablation(config, &plan, Some(out))?;
            println!("{}", comparison_markdown(&outcome.rows()));
        }
    }
    Ok(())
}

fn record_failure(out: &Path, config: Option<&TrainConfig>, err: &Error) {
    let dir = out.join("failed");
    if std::fs::create_dir_all(&dir).is_err() {
        return;
    }
    let _ = std::fs::write(dir.join("error.txt"), format!("{err}\n"));
    if let Some(text) = config.map(TrainConfig::to_toml) {
        let _ = std::fs::write(dir.join("config.toml"), text);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let out = &cli.common.out;
    let config = match resolve_config(&cli.common, &cli.command) {
        Ok(c) => c,
        Err(e) => {
            record_failure(out, None, &e);
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let _ = std::fs::remove_dir_all(out.join("failed"));
    let result = write_snapshot(out, &config).and_then(|()| {
        info!("{} with config {}", cli.command.name(), config.hash());
        execute(&cli.command, &config, out)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            record_failure(out, Some(&config), &e);
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
