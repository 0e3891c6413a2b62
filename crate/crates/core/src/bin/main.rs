use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use isup_grading::grader::HeadKind;
use isup_grading::pipeline::{self, load_config, new_run_dir, PipelineConfig, Preset, RUN_ROOT_ENV};
use isup_grading::report::EvaluationReport;
use isup_grading::synth::LABELS_MANIFEST;
use isup_grading::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "isup-grading", version, about = "Weakly supervised ISUP grading of prostate biopsy slides")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk")]
    preset: PresetArg,
    /// Override any configuration key, e.g. `--set mil.epochs=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding timestamped run directories.
    #[arg(long, global = true, env = RUN_ROOT_ENV)]
    run_root: Option<PathBuf>,
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PresetArg {
    Desk,
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Ablation {
    NoOr,
    NoSsl,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic slide corpus with lesion masks.
    Synth {
        #[arg(long)]
        per_grade: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        slide_size: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Tile slides into patches, choose bags and write split manifests.
    Tile {
        /// Label manifest, or a directory containing `corpus.jsonl`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        bag_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the instance classifier from slide-level Gleason labels.
    TrainMil {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pseudo-label patches and select the class-balanced pre-training corpus.
    BuildSslDataset {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Slide manifest whose patches are labeled.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        min_confidence: Option<f64>,
    },
    /// Teacher-student pre-training on the pseudo-labeled corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the attention grader on slide-level ISUP grades.
    Finetune {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Teacher-student checkpoint providing the backbone.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// One-hot labels with a cross-entropy head.
        #[arg(long)]
        no_or: bool,
        #[arg(long)]
        freeze_backbone: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Grade slides and write predictions, metrics and explainability output.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        bag_size: Option<usize>,
        #[arg(long)]
        no_png: bool,
    },
    /// Recompute metrics from an existing predictions file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        no_png: bool,
    },
    /// Run every stage, resuming completed ones in an existing run directory.
    Run {
        /// Existing or new run directory; a timestamped one by default.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        #[arg(long)]
        seed: Option<u64>,
        /// Label manifest of real slides instead of the synthetic corpus.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Print the resolved configuration as TOML and exit.
        #[arg(long)]
        print_config: bool,
    },
}

fn config(global: &Global) -> Result<PipelineConfig> {
    let preset = match global.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Full => Preset::Full,
    };
    let mut c = load_config(preset, global.config.as_deref(), &global.overrides)?;
    if let Some(root) = &global.run_root {
        c.run.root = root.clone();
    }
    Ok(c.resolved())
}

fn output_dir(explicit: Option<PathBuf>, c: &PipelineConfig, stage: &str) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p),
        None => Ok(new_run_dir(&c.run.root, &c.run.name)?.join(stage)),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn print_report(name: &str, r: &EvaluationReport) {
    let g = &r.grading;
    let kappa = g.kappa.map_or("undefined".to_string(), |k| format!("{k:.4}"));
    println!(
        "{name}: slides {} kappa {kappa} accuracy {:.4} macro-F1 {:.4} MAE {:.4} severe {}",
        r.n_slides, g.accuracy, g.macro_f1, g.mean_abs_error, g.severe_errors
    );
    if let Some(d) = r.detection {
        println!("{name}: detection accuracy {:.4} F1 {:.4} AUC {:.4}", d.accuracy, d.f1, d.auc);
    }
    if let Some(rate) = r.explainability.hit_rate {
        println!(
            "{name}: top-attention patch on lesion in {}/{} cancerous slides ({:.1}%)",
            r.explainability.hits,
            r.explainability.with_mask,
            100.0 * rate
        );
    }
}

fn in_stage<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        e @ (Error::Stage { .. } | Error::Config(_)) => e,
        other => Error::Stage {
            stage: stage.to_string(),
            source: Box::new(other),
        },
    })
}

fn execute(cli: Cli) -> Result<()> {
    let mut c = config(&cli.global)?;
    match cli.command {
        Command::Synth {
            per_grade,
            seed,
            slide_size,
            output,
        } => {
            set(&mut c.synth.slides_per_grade, per_grade);
            set(&mut c.synth.seed, seed);
            set(&mut c.synth.slide_size, slide_size);
            c.synth.validate()?;
            let out = output_dir(output, &c, "synth")?;
            let manifest = in_stage("synth", || pipeline::run_synth(&c.synth, &out))?;
            println!("{}", manifest.display());
        }
        Command::Tile {
            input,
            output,
            patch_size,
            bag_size,
            seed,
        } => {
            set(&mut c.tiling.patch_size, patch_size);
            set(&mut c.tiling.bag_size, bag_size);
            let seed = seed.unwrap_or(c.run.seed);
            let labels = if input.is_dir() { input.join(LABELS_MANIFEST) } else { input };
            let out = output_dir(output, &c, "tile")?;
            let manifest = in_stage("tile", || pipeline::run_tile(&labels, &out, &c.tiling, &c.split, seed))?;
            println!("{}", manifest.display());
        }
        Command::TrainMil {
            train,
            val,
            output,
            epochs,
            k,
            batch,
            lr,
            seed,
        } => {
            set(&mut c.mil.epochs, epochs);
            set(&mut c.mil.k, k);
            set(&mut c.mil.batch_size, batch);
            set(&mut c.mil.lr, lr);
            set(&mut c.mil.seed, seed);
            c.mil.min_lr = c.mil.min_lr.min(c.mil.lr);
            c.mil.validate()?;
            let out = output_dir(output, &c, "train-mil")?;
            let ckpt = in_stage("train-mil", || pipeline::run_train_mil(&train, val.as_deref(), &c.mil, &out))?;
            println!("{}", ckpt.display());
        }
        Command::BuildSslDataset {
            checkpoint,
            manifest,
            output,
            per_class,
            min_confidence,
        } => {
            set(&mut c.dataset.per_class, per_class);
            set(&mut c.dataset.min_confidence, min_confidence);
            let out = output_dir(output, &c, "build-ssl-dataset")?;
            let corpus = in_stage("build-ssl-dataset", || {
                pipeline::run_build_ssl_dataset(&checkpoint, &manifest, &c.dataset, &out)
            })?;
            println!("{}", corpus.display());
        }
        Command::Pretrain {
            corpus,
            output,
            lambda,
            momentum,
            epochs,
            batch,
            lr,
            seed,
        } => {
            set(&mut c.ssl.lambda, lambda);
            set(&mut c.ssl.momentum, momentum);
            set(&mut c.ssl.epochs, epochs);
            set(&mut c.ssl.batch_size, batch);
            set(&mut c.ssl.lr, lr);
            set(&mut c.ssl.seed, seed);
            c.ssl.min_lr = c.ssl.min_lr.min(c.ssl.lr);
            c.ssl.validate()?;
            let out = output_dir(output, &c, "pretrain")?;
            let ckpt = in_stage("pretrain", || pipeline::run_pretrain(&corpus, &c.ssl, &out))?;
            println!("{}", ckpt.display());
        }
        Command::Finetune {
            train,
            val,
            backbone,
            output,
            no_or,
            freeze_backbone,
            epochs,
            batch,
            lr,
            seed,
        } => {
            if no_or {
                c.grader.model.head = HeadKind::Categorical;
            }
            c.grader.freeze_backbone |= freeze_backbone;
            set(&mut c.grader.epochs, epochs);
            set(&mut c.grader.batch_size, batch);
            set(&mut c.grader.lr, lr);
            set(&mut c.grader.seed, seed);
            c.grader.min_lr = c.grader.min_lr.min(c.grader.lr);
            c.grader.validate()?;
            let out = output_dir(output, &c, "finetune")?;
            let ckpt = in_stage("finetune", || {
                pipeline::run_finetune(&train, val.as_deref(), backbone.as_deref(), &c.grader, &out)
            })?;
            println!("{}", ckpt.display());
        }
        Command::Predict {
            checkpoint,
            manifest,
            report,
            bag_size,
            no_png,
        } => {
            let bag = bag_size.unwrap_or(c.tiling.bag_size);
            let r = in_stage("predict", || {
                pipeline::run_predict(&checkpoint, &manifest, &report, bag, c.run.render_png && !no_png)
            })?;
            print_report("predict", &r);
        }
        Command::Evaluate {
            predictions,
            manifest,
            report,
            no_png,
        } => {
            let r = in_stage("evaluate", || {
                pipeline::run_evaluate(&predictions, &manifest, &report, c.run.render_png && !no_png)
            })?;
            print_report("evaluate", &r);
        }
        Command::Run {
            run_dir,
            ablate,
            seed,
            input,
            print_config,
        } => {
            set(&mut c.run.seed, seed);
            if input.is_some() {
                c.run.input = input;
            }
            c.ablation.no_or |= ablate.contains(&Ablation::NoOr);
            c.ablation.no_ssl |= ablate.contains(&Ablation::NoSsl);
            if print_config {
                print!("{}", c.resolved().to_toml()?);
                return Ok(());
            }
            let outcome = pipeline::run_pipeline(&c, run_dir.as_deref())?;
            println!("run directory: {}", outcome.dir.display());
            if !outcome.skipped.is_empty() {
                println!("skipped (up to date): {}", outcome.skipped.join(", "));
            }
            for (name, r) in &outcome.reports {
                print_report(name, r);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.global.log)
        .format_timestamp_secs()
        .init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!("\n  caused by: {s}"));
                }
                source = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
