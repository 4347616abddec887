//! `synlungs` command-line front end.
//!
//! Exit status: 0 on success, 1 when a stage fails or a pipeline run loses
//! twins, 2 for invalid arguments or configuration.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use synlungs_core::Error;

#[derive(Debug, Parser)]
#[command(name = "synlungs", version, about = "Synthetic lung CT dataset generator")]
pub struct Cli {
    /// Global seed; every stage derives its own streams from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Pipeline config file (TOML). Also supplies defaults to single stages.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chest phantoms.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Nodule synthesis and embedding.
    #[command(subcommand)]
    Lesion(LesionCmd),
    /// CT acquisition and reconstruction.
    #[command(subcommand)]
    Ct(CtCmd),
    /// Malignancy labels for a feature table.
    Label(LabelArgs),
    /// Dataset tree and training patches.
    #[command(subcommand)]
    Export(ExportCmd),
    /// Quality checks.
    #[command(subcommand)]
    Qc(QcCmd),
    /// End-to-end generation.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCmd {
    /// Generate a procedural chest phantom (material labels).
    Gen(PhantomGenArgs),
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Grid size nx,ny,nz [default: config phantom_dims]
    #[arg(long, value_parser = stages::parse_usize3)]
    pub dims: Option<[usize; 3]>,
    /// Voxel size in mm, sx,sy,sz [default: config phantom_spacing]
    #[arg(long, value_parser = stages::parse_f64_3)]
    pub spacing: Option<[f64; 3]>,
}

#[derive(Debug, Subcommand)]
pub enum LesionCmd {
    /// Synthesise one nodule on the 0.1 mm lesion grid.
    Synth(LesionSynthArgs),
    /// Embed nodules into a phantom, writing attenuation, instance mask and features.
    Embed(LesionEmbedArgs),
}

#[derive(Debug, Args)]
pub struct LesionSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "L00")]
    pub id: String,
    /// Equivalent diameter in mm [default: drawn from the size model]
    #[arg(long)]
    pub diameter: Option<f64>,
    /// Surface irregularity in [0, 1].
    #[arg(long, default_value_t = 0.3)]
    pub irregularity: f64,
    /// smooth, lobulated or spiculated.
    #[arg(long, default_value = "smooth", value_parser = stages::parse_margin)]
    pub margin: synlungs_core::lesion::Margin,
}

#[derive(Debug, Args)]
pub struct LesionEmbedArgs {
    /// Phantom written by `phantom gen`.
    #[arg(long)]
    pub phantom: PathBuf,
    /// Lesion written by `lesion synth`; repeat for several.
    #[arg(long = "lesion", required = true)]
    pub lesions: Vec<PathBuf>,
    /// Centre in mm as x,y,z, one per lesion [default: random lung placement]
    #[arg(long = "center", value_parser = stages::parse_f64_3)]
    pub centers: Vec<[f64; 3]>,
    /// Attenuation volume to write; the mask and feature table go next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum CtCmd {
    /// Scan an attenuation volume or phantom and reconstruct it in HU.
    Simulate(CtSimulateArgs),
}

#[derive(Debug, Args)]
pub struct CtSimulateArgs {
    /// Attenuation volume, or a material-label phantom.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// W12 or W20.
    #[arg(long, default_value = "W12")]
    pub scanner: synlungs_core::ct::ScannerModel,
    /// Reconstruction kernel, hann:<cutoff as a fraction of Nyquist>.
    #[arg(long, default_value = "hann:0.6")]
    pub filter: synlungs_core::ct::ReconFilter,
    /// Unattenuated photons per detector element [default: config i0]
    #[arg(long)]
    pub i0: Option<f64>,
    /// Scatter-to-primary ratio [default: config spr]
    #[arg(long)]
    pub spr: Option<f64>,
    /// Projections per rotation [default: config n_views]
    #[arg(long)]
    pub views: Option<usize>,
    /// Reconstruction grid nx,ny [default: input in-plane dims]
    #[arg(long, value_parser = stages::parse_usize2)]
    pub recon_dims: Option<[usize; 2]>,
    /// Reconstruction pixel size in mm [default: input x spacing]
    #[arg(long)]
    pub out_spacing: Option<f64>,
    /// Skip photon noise and scatter.
    #[arg(long)]
    pub no_noise: bool,
    /// Also write the sinogram here.
    #[arg(long)]
    pub sinogram: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Feature table (CSV) as written by `lesion embed`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Logistic model file [default: config label_model_path, else built-in coefficients]
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// det or bern.
    #[arg(long)]
    pub mode: Option<synlungs_core::labeler::LabelMode>,
    /// Write the model that was used.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ExportCmd {
    /// Add one reconstructed scan and its lesions to a dataset tree.
    Scan(ExportScanArgs),
    /// Cut resampled, clipped and standardised patches around every manifest row.
    Patches(ExportPatchesArgs),
}

#[derive(Debug, Args)]
pub struct ExportScanArgs {
    /// HU volume written by `ct simulate`.
    #[arg(long)]
    pub volume: PathBuf,
    /// Instance mask written by `lesion embed`.
    #[arg(long)]
    pub mask: PathBuf,
    /// Label table written by `label`.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub scan_id: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportPatchesArgs {
    /// Dataset root containing manifest.csv.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Patch directory [default: <dataset>/patches]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep clipped HU instead of standardising.
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Subcommand)]
pub enum QcCmd {
    /// Dice overlap of two masks on the same grid.
    Dice(DiceArgs),
}

#[derive(Debug, Args)]
pub struct DiceArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum PipelineCmd {
    /// Generate a full dataset from --config (defaults when absent).
    Run(PipelineRunArgs),
}

#[derive(Debug, Args)]
pub struct PipelineRunArgs {
    /// Override output_dir from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// How a command ended.
pub enum Outcome {
    Done,
    Partial(String),
}

fn is_invalid_input(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(Error::Config(_)) | Some(Error::InvalidParameter(_))
        ) || c.is::<stages::UsageError>()
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match stages::run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(msg)) => {
            eprintln!("synlungs: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("synlungs: {e:#}");
            if is_invalid_input(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
