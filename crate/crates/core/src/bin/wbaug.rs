use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wbaug::feature::HistogramParams;
use wbaug::mapping::WbSetting;
use wbaug::model::{build_model, load_model, save_model, BuildParams, DatasetManifest, Direction};
use wbaug::pipeline::{run_batch_with_model, AugmentationRequest, BatchMode};
use wbaug::synth::{generate_base, make_manifest, CameraEmulation};
use wbaug::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_MODEL: u8 = 3;

#[derive(Parser)]
#[command(name = "wbaug", version, about = "Emulate or correct white-balance errors in sRGB images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model from a paired dataset manifest.
    BuildModel {
        manifest: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        #[arg(long, default_value = "emulate")]
        direction: Direction,
        /// Histogram bins per log-chroma axis.
        #[arg(long = "bins", default_value_t = 60)]
        bins: usize,
    },
    /// Render every input under the model's white-balance settings.
    Augment {
        model: PathBuf,
        inputs: Vec<PathBuf>,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        /// Comma-separated subset, e.g. 2850K_AS,7500K_CS.
        #[arg(long, value_delimiter = ',')]
        settings: Option<Vec<WbSetting>>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        no_grayscale_screen: bool,
    },
    /// Remove white-balance casts with a correction model.
    Correct {
        model: PathBuf,
        inputs: Vec<PathBuf>,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Print a model's parameters.
    Info { model: PathBuf },
    /// Write a synthetic paired dataset and its manifest.
    Synth {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 60)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Gains and tone-curve config; defaults to the built-in table.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

struct Failure(u8, String);

impl Failure {
    fn data(e: impl std::fmt::Display) -> Self {
        Failure(EXIT_DATA, e.to_string())
    }
    fn model(e: impl std::fmt::Display) -> Self {
        Failure(EXIT_MODEL, e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::BuildModel {
            manifest,
            output,
            direction,
            bins,
        } => {
            let params = BuildParams {
                direction,
                histogram: HistogramParams::with_bins(bins),
                ..BuildParams::default()
            };
            params.histogram.validate().map_err(|e| Failure(EXIT_USAGE, e.to_string()))?;
            let manifest = DatasetManifest::load(&manifest).map_err(Failure::data)?;
            let (model, report) = build_model(&manifest, &params).map_err(Failure::data)?;
            save_model(&model, &output).map_err(Failure::data)?;
            print!("{report}");
            println!("model: {}", output.display());
            println!("checksum: {}", model.checksum_hex());
            Ok(())
        }
        Command::Augment {
            model,
            inputs,
            output,
            settings,
            k,
            sigma,
            no_grayscale_screen,
        } => batch(AugmentationRequest {
            model,
            inputs,
            output_dir: output,
            mode: BatchMode::Augment {
                settings,
                grayscale_screen: !no_grayscale_screen,
            },
            k,
            sigma,
        }),
        Command::Correct {
            model,
            inputs,
            output,
            k,
            sigma,
        } => batch(AugmentationRequest {
            model,
            inputs,
            output_dir: output,
            mode: BatchMode::Correct,
            k,
            sigma,
        }),
        Command::Info { model } => {
            let model = load_model(&model).map_err(Failure::model)?;
            print!("{}", model.info());
            Ok(())
        }
        Command::Synth {
            out_dir,
            count,
            seed,
            width,
            height,
            config,
        } => {
            if count == 0 || width == 0 || height == 0 {
                return Err(Failure(EXIT_USAGE, "count, width and height must be positive".into()));
            }
            let emulation = match config {
                Some(p) => std::fs::read_to_string(&p)
                    .map_err(|e| Failure::data(format!("{}: {e}", p.display())))?
                    .parse::<CameraEmulation>()
                    .map_err(Failure::data)?,
                None => CameraEmulation::default(),
            };
            let bases: Vec<(String, _)> = (0..count)
                .map(|i| (format!("base{i:04}"), generate_base(seed.wrapping_add(i as u64), width, height)))
                .collect();
            let ds = make_manifest(&bases, &emulation, &out_dir).map_err(Failure::data)?;
            println!("groups: {}", ds.manifest.groups.len());
            println!("files: {}", ds.files.len());
            for (name, reason) in &ds.excluded {
                println!("excluded {name}: {reason}");
            }
            println!("manifest: {}", out_dir.join("manifest.txt").display());
            println!(
                "correction manifest: {}",
                out_dir.join("manifest_correction.txt").display()
            );
            Ok(())
        }
    }
}

fn batch(request: AugmentationRequest) -> Result<(), Failure> {
    let model = load_model(&request.model).map_err(Failure::model)?;
    let manifest = run_batch_with_model(&model, &request).map_err(|e| match e {
        Error::InvalidInput(_) => Failure(EXIT_USAGE, e.to_string()),
        _ => Failure::data(e),
    })?;
    println!(
        "processed: {} skipped: {} manifest: {}",
        manifest.processed(),
        manifest.skipped(),
        request.output_dir.join(wbaug::pipeline::RunManifest::FILE_NAME).display()
    );
    Ok(())
}
