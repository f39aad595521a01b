use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use hst::commands::{self, PredictOptions};
use hst::config::RunConfig;
use hst::{camera, eval};
use hst_core::pose::FitOptions;
use hst_core::synth::SynthConfig;

#[derive(Parser)]
#[command(name = "hst", version, about = "Multi-agent human trajectory prediction")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic social-navigation scenes as a track file.
    Synth {
        #[arg(long, default_value_t = 50)]
        scenes: usize,
        /// Frames per scene.
        #[arg(long, default_value_t = 40)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        min_agents: usize,
        #[arg(long, default_value_t = 8)]
        max_agents: usize,
        #[arg(long, default_value_t = 3.0)]
        rate: f64,
        /// Probability that an agent carries keypoints.
        #[arg(long)]
        keypoint_probability: Option<f64>,
        /// Fraction of agents entering after the first frame.
        #[arg(long)]
        first_detection: Option<f64>,
        #[arg(long, default_value = "tracks.jsonl")]
        output: PathBuf,
    },
    /// Lift 2D keypoints (`kp2`) to 3D keypoints and head orientation.
    FitPose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long, default_value = "tracks.jsonl")]
        output: PathBuf,
    },
    /// Train a model on the configured data.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict the windows of a track file.
    Predict {
        /// Track file to predict.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene_id: Option<String>,
        /// Only the window starting at this frame.
        #[arg(long)]
        start: Option<i64>,
        /// Also write an SVG per window.
        #[arg(long)]
        plot: bool,
        /// Mask all keypoint observations before predicting.
        #[arg(long)]
        drop_keypoints: bool,
        #[arg(long, default_value = "prediction.json")]
        output: PathBuf,
    },
    /// Train and compare model variants.
    Ablate {
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn under(cfg: &RunConfig, p: &Path) -> PathBuf {
    cfg.output_path(p)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth {
            scenes,
            frames,
            min_agents,
            max_agents,
            rate,
            keypoint_probability,
            first_detection,
            output,
        } => {
            let mut s = SynthConfig {
                seed: cfg.train.seed,
                agents: (min_agents, max_agents),
                frames,
                rate_hz: rate,
                ..SynthConfig::default()
            };
            if let Some(p) = keypoint_probability {
                s.keypoint_probability = p;
            }
            if let Some(f) = first_detection {
                s.first_detection_fraction = f;
            }
            let path = under(&cfg, &output);
            let n = commands::cmd_synth(&s, scenes, &path)?;
            eprintln!("wrote {n} observations in {scenes} scenes to {}", path.display());
        }
        Command::FitPose { input, camera, output } => {
            let cam = camera::read_camera(&camera)?;
            let path = under(&cfg, &output);
            let s = commands::cmd_fit_pose(&input, &cam, &path, &FitOptions::default())?;
            eprintln!(
                "fitted {} poses, {} failed, {} records without 2D keypoints; wrote {}",
                s.fitted,
                s.failed,
                s.skipped,
                path.display()
            );
        }
        Command::Train => {
            let r = commands::cmd_train(&cfg, 50)?;
            eprintln!("wrote {}", r.checkpoint.display());
            println!("training set:\n{}", eval::report_json(&r.train_report));
        }
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            let e = commands::cmd_eval(&cfg, &ckpt)?;
            print!("{}", eval::report_table(&e));
        }
        Command::Predict {
            scene,
            checkpoint,
            scene_id,
            start,
            plot,
            drop_keypoints,
            output,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            let opts = PredictOptions {
                scene_id,
                start,
                plot,
                drop_keypoints,
                output: under(&cfg, &output),
            };
            let out = commands::cmd_predict(&cfg, &ckpt, &scene, &opts)?;
            eprintln!("wrote {} window prediction(s) to {}", out.len(), opts.output.display());
        }
        Command::Ablate { variants, seeds } => {
            let mut cfg = cfg;
            if let Some(v) = variants {
                cfg.ablate.variants = v;
            }
            if let Some(s) = seeds {
                cfg.ablate.seeds = s;
            }
            if cfg.ablate.variants.is_empty() {
                bail!("no variants given");
            }
            let results = commands::cmd_ablate(&cfg, 0)?;
            print!("{}", commands::ablation_table(&results));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
