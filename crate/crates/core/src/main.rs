use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use cinerecon::config::load_train_config;
use cinerecon::container::{write_dataset, ContainerReader, DatasetInfo, DatasetReader};
use cinerecon::error::{Error, Result};
use cinerecon::eval::{evaluate_dataset, write_metrics_csv};
use cinerecon::export::{export_error_maps, export_frames, export_yt_profile};
use cinerecon::phantom::{generate_phantom, CineSample, PhantomSpec};
use cinerecon::sampling::{generate_mask, MaskSpec};
use cinerecon::train::{
    load_checkpoint, reconstruct, save_checkpoint, train_feature_extractor, train_reconstruction,
    write_epoch_csv, Checkpoint, TrainMode,
};

#[derive(Parser)]
#[command(
    name = "cinerecon",
    version,
    about = "Self-supervised dynamic MRI reconstruction on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset container
    GenPhantom(GenPhantom),
    /// Step 1: train the feature extractor
    TrainFe(TrainFe),
    /// Step 2: train the reconstruction network
    TrainRecon(TrainRecon),
    /// Reconstruct one subject at one acceleration and export images
    Reconstruct(Reconstruct),
    /// Score held-out subjects against ground truth
    Evaluate(Evaluate),
    /// Render the tensors in a container as PNGs
    ExportPng(ExportPng),
}

#[derive(Args)]
struct GenPhantom {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    /// How many leading subjects form the training split
    #[arg(long, default_value_t = 16)]
    train_subjects: usize,
    /// Square in-plane matrix size
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    coils: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    contraction: f64,
}

#[derive(Args)]
struct TrainFe {
    #[arg(long)]
    data: PathBuf,
    /// contrastive | vicreg
    #[arg(long)]
    mode: String,
    /// Optional TOML config overriding the defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional per-epoch loss CSV
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainRecon {
    #[arg(long)]
    data: PathBuf,
    /// Feature-extractor checkpoint from step 1
    #[arg(long, conflicts_with = "no_features")]
    fe: Option<PathBuf>,
    /// Train the ablation without feature injection
    #[arg(long)]
    no_features: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Reconstruct {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    fe: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    subject: usize,
    #[arg(long = "R")]
    r: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Column for the y–t profile (defaults to the image center)
    #[arg(long)]
    profile_column: Option<usize>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    fe: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated accelerations, e.g. 4,8,16
    #[arg(long = "R", value_delimiter = ',', default_value = "4,8,16")]
    r: Vec<f64>,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportPng {
    /// CINEv1 container whose tensors get rendered
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    profile_column: Option<usize>,
}

fn load_fe(path: Option<&PathBuf>) -> Result<Option<Checkpoint>> {
    path.map(|p| load_checkpoint(p)).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPhantom(a) => {
            if a.train_subjects > a.subjects {
                return Err(Error::Config(
                    "train split cannot exceed the subject count".into(),
                ));
            }
            let spec = PhantomSpec {
                nx: a.size,
                ny: a.size,
                frames: a.frames,
                n_coils: a.coils,
                seed: a.seed,
                contraction: a.contraction,
            };
            let samples: Vec<CineSample> = (0..a.subjects)
                .map(|i| generate_phantom(&spec, i))
                .collect::<Result<_>>()?;
            let info = DatasetInfo {
                spec,
                n_subjects: a.subjects,
                n_train: a.train_subjects,
            };
            write_dataset(&a.out, &info, &samples)?;
            println!(
                "wrote {} subjects ({} train) to {}",
                a.subjects,
                a.train_subjects,
                a.out.display()
            );
        }
        Command::TrainFe(a) => {
            let mode = TrainMode::parse(&a.mode)?;
            if !matches!(mode, TrainMode::Contrastive | TrainMode::Vicreg) {
                return Err(Error::Config(
                    "train-fe mode must be contrastive or vicreg".into(),
                ));
            }
            let cfg = load_train_config(mode, a.config.as_deref(), a.seed)?;
            let mut data = DatasetReader::open(&a.data)?;
            let (ckpt, log) = train_feature_extractor(&cfg, &mut data)?;
            save_checkpoint(&a.out, &ckpt)?;
            if let Some(p) = &a.log {
                write_epoch_csv(p, &log)?;
            }
            println!(
                "feature checkpoint {} (final epoch loss {:.6})",
                a.out.display(),
                log.last().map(|e| e.mean_loss).unwrap_or(f64::NAN)
            );
        }
        Command::TrainRecon(a) => {
            if a.fe.is_none() && !a.no_features {
                return Err(Error::Config(
                    "train-recon needs --fe or --no-features".into(),
                ));
            }
            let mode = if a.no_features {
                TrainMode::ReconAblation
            } else {
                TrainMode::Recon
            };
            let cfg = load_train_config(mode, a.config.as_deref(), a.seed)?;
            let fe = load_fe(a.fe.as_ref())?;
            let mut data = DatasetReader::open(&a.data)?;
            let (ckpt, log) = train_reconstruction(&cfg, &mut data, fe.as_ref())?;
            save_checkpoint(&a.out, &ckpt)?;
            if let Some(p) = &a.log {
                write_epoch_csv(p, &log)?;
            }
            println!(
                "reconstruction checkpoint {} (final epoch loss {:.6})",
                a.out.display(),
                log.last().map(|e| e.mean_loss).unwrap_or(f64::NAN)
            );
        }
        Command::Reconstruct(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let fe = load_fe(a.fe.as_ref())?;
            let mut data = DatasetReader::open(&a.data)?;
            if a.subject >= data.info.n_subjects {
                return Err(Error::Config(format!(
                    "subject {} out of range ({} subjects)",
                    a.subject, data.info.n_subjects
                )));
            }
            let sample = data.read_sample(a.subject)?;
            let mask = Arc::new(generate_mask(&MaskSpec::new(
                sample.ny(),
                sample.frames(),
                a.r,
                a.seed,
            ))?);
            let op = Arc::new(sample.operator(mask)?);
            let mut y = sample.kspace_full.clone();
            op.apply_mask(&mut y);
            let recon = reconstruct(&ckpt, fe.as_ref(), &y, &op)?;
            let zf = op.adjoint(&y)?;
            let truth = sample.ground_truth();
            let col = a.profile_column.unwrap_or(sample.nx() / 2);
            export_frames(&recon, &a.out, "recon")?;
            export_frames(&zf, &a.out, "zero_filled")?;
            export_frames(truth, &a.out, "reference")?;
            export_yt_profile(&recon, &a.out, "recon", col)?;
            export_yt_profile(truth, &a.out, "reference", col)?;
            export_error_maps(&recon, truth, &a.out, "recon")?;
            export_error_maps(&zf, truth, &a.out, "zero_filled")?;
            println!("subject {} at R={} -> {}", a.subject, a.r, a.out.display());
        }
        Command::Evaluate(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let fe = load_fe(a.fe.as_ref())?;
            let mut data = DatasetReader::open(&a.data)?;
            let records = evaluate_dataset(&ckpt, fe.as_ref(), &mut data, &a.r, a.seed)?;
            write_metrics_csv(&a.csv, &records)?;
            println!("{} rows -> {}", records.len(), a.csv.display());
        }
        Command::ExportPng(a) => {
            let mut reader = ContainerReader::open(&a.input)?;
            let names: Vec<String> = reader.tensor_names().map(str::to_string).collect();
            if names.is_empty() {
                return Err(Error::Format("container holds no tensors".into()));
            }
            let mut rendered = 0usize;
            for name in names {
                let t = reader.read_tensor(&name)?;
                if t.shape().len() != 3 {
                    continue;
                }
                let stem = name.replace('.', "_");
                export_frames(&t, &a.out, &stem)?;
                let col = a.profile_column.unwrap_or(t.shape()[1] / 2);
                export_yt_profile(&t, &a.out, &stem, col)?;
                rendered += 1;
            }
            if rendered == 0 {
                return Err(Error::Format("no [t,x,y] tensors found to render".into()));
            }
            println!("rendered {rendered} tensors -> {}", a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // keep clap's help/version on stdout with success status
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
