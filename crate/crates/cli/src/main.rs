//! `dehaze`: haze synthesis, encoder and prompt training, dehazing training,
//! inference and analysis.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dehaze_core::{Error, Result};

use commands::{Manifest, PipelinePlan};
use settings::{
    resolve, ConfigFile, DensityFlags, DensitySettings, ModelFlags, ModelSettings, PipelineFlags, PretrainFlags,
    PromptFlags, SynthFlags, TrainFlags,
};

#[derive(Parser, Debug)]
#[command(name = "dehaze", version, about = "Prompt-guided dual-path image dehazing")]
struct Cli {
    /// JSON config with one section per subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step; overrides the config's top-level `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's top-level `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate hazy/clear/density triplets with the scattering model.
    Synth(SynthFlags),
    /// Train and freeze the tiny image-text encoder.
    PretrainEncoder(PretrainFlags),
    /// Learn the haze/clear prompt pair (stage 1 or 2).
    TrainPrompts(PromptFlags),
    /// Train the dehazing network.
    Train(TrainFlags),
    /// Dehaze an image or a directory of images.
    Infer(ModelFlags),
    /// PSNR, SSIM and entropy over a triplet directory.
    Eval(ModelFlags),
    /// Export density maps as PNG and raw f32.
    Density(DensityFlags),
    /// Attention weight versus token distance, as CSV.
    AnalyzeAttention(ModelFlags),
    /// synth, pretrain-encoder, both prompt stages, train and eval in one run.
    Pipeline(PipelineFlags),
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        return 3;
    }
    match e {
        Error::Numeric(_) => 4,
        Error::Format { .. } | Error::Image(_) => 5,
        Error::Io(_) | Error::NotFound(_) => 3,
        Error::Config(_)
        | Error::Json(_)
        | Error::Parameter(_)
        | Error::Contract(_)
        | Error::Shape { .. }
        | Error::Domain { .. } => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = ConfigFile::load(cli.config.as_deref())?;
    let seed = match cli.seed {
        Some(s) => s,
        None => config.global("seed")?.unwrap_or(0),
    };
    let out = match cli.out {
        Some(o) => o,
        None => config.global("out")?.unwrap_or_else(|| PathBuf::from("out")),
    };
    let manifest: Manifest = match &cli.command {
        Command::Synth(f) => commands::synth(&resolve(&config, "synth", f)?, &out, seed)?,
        Command::PretrainEncoder(f) => {
            commands::pretrain_encoder(&resolve(&config, "pretrain_encoder", f)?, &out, seed)?
        }
        Command::TrainPrompts(f) => {
            commands::train_prompts_cmd(&resolve(&config, "train_prompts", f)?, &out, seed)?
        }
        Command::Train(f) => commands::train(&resolve(&config, "train", f)?, &out, seed)?,
        Command::Infer(f) => commands::infer(&resolve::<ModelSettings, _>(&config, "infer", f)?, &out, seed)?,
        Command::Eval(f) => commands::eval(&resolve::<ModelSettings, _>(&config, "eval", f)?, &out, seed)?,
        Command::Density(f) => {
            commands::density(&resolve::<DensitySettings, _>(&config, "density", f)?, &out, seed)?
        }
        Command::AnalyzeAttention(f) => commands::analyze_attention(
            &resolve::<ModelSettings, _>(&config, "analyze_attention", f)?,
            &out,
            seed,
        )?,
        Command::Pipeline(f) => {
            let none = ();
            let plan = PipelinePlan {
                pipeline: resolve(&config, "pipeline", f)?,
                synth: resolve(&config, "synth", &none)?,
                pretrain: resolve(&config, "pretrain_encoder", &none)?,
                prompts: resolve(&config, "train_prompts", &none)?,
                train: resolve(&config, "train", &none)?,
            };
            commands::pipeline(&plan, &out, seed)?
        }
    };
    manifest.write(&out)?;
    println!("{}", out.join(commands::MANIFEST).display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
