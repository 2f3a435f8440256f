//! `dps` — data generation, denoising, score-model training, reconstruction
//! and experiments from the command line.
//!
//! Exit codes: 0 on success, 2 on configuration or argument errors, 3 on
//! numerical failure, 1 on I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dps_mri::baseline::{l1_wavelet_reconstruct, CSConfig};
use dps_mri::denoise::{denoise_dataset, train_denoiser, DenoiserCheckpoint, DenoiserConfig};
use dps_mri::harness::{
    background_noise_audit, emit_report, load_result, run_ablation, run_averaging_sweep, run_pipeline, write_audit,
    ExperimentConfig, PipelineConfig,
};
use dps_mri::io::{read_complex, read_toml, write_complex, write_image, write_toml};
use dps_mri::operators::{add_measurement_noise, forward, make_echo_train_mask, KSpaceMeasurement, MaskFile, MaskMode, SamplingMask};
use dps_mri::phantoms::{build_dataset, load_dataset, ClassLabel, DatasetConfig, Image, SplitCounts};
use dps_mri::sampler::{reconstruct, SamplerConfig};
use dps_mri::scorenet::{train_score_model, Regime, ScoreCheckpoint, ScoreModelConfig, TrainConfig};
use dps_mri::{Error, Result};

#[derive(Parser)]
#[command(name = "dps", version, about = "Diffusion posterior sampling for undersampled MRI")]
struct Cli {
    /// Master seed; overrides the seed of any configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic data generation and measurement.
    #[command(subcommand)]
    Data(DataCmd),
    /// Self-supervised denoiser training and application.
    #[command(subcommand)]
    Denoise(DenoiseCmd),
    /// Score-model training.
    #[command(subcommand)]
    Scorenet(ScorenetCmd),
    /// Reconstruction from undersampled k-space.
    #[command(subcommand)]
    Recon(ReconCmd),
    /// Experiments: ablation, averaging sweep, noise audit, full pipeline.
    #[command(subcommand)]
    Exp(ExpCmd),
    /// Re-renders the tables and plots of a result directory.
    Report {
        /// Directory containing results.csv (and provenance.csv, masks/).
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generates a synthetic dataset directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Dataset configuration file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        /// Comma-separated matrix sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Undersamples one dataset image, writing k-space and mask files.
    Measure {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 2.0)]
        r: f64,
        /// Echo-train length (fast-spin-echo classes; spin echo uses 1).
        #[arg(long, default_value_t = 4)]
        etl: usize,
        #[arg(long, default_value_t = 0.0)]
        sigma_d: f64,
        #[arg(long)]
        out_kspace: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
    },
}

#[derive(Subcommand)]
enum DenoiseCmd {
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Denoiser configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    Apply {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Configuration file of `scorenet train`.
#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct ScorenetFile {
    model: Option<ScoreModelConfig>,
    train: TrainConfig,
}

#[derive(Subcommand)]
enum ScorenetCmd {
    Train {
        #[arg(long)]
        data: PathBuf,
        /// per-class, all or all-embed.
        #[arg(long)]
        regime: String,
        /// Class of a per-class model.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// File with optional `[model]` and `[train]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Args)]
struct MeasurementArgs {
    /// Interleaved real/imaginary f32 k-space.
    #[arg(long)]
    kspace: PathBuf,
    /// Mask file (structured text).
    #[arg(long)]
    mask: PathBuf,
    /// Output image (f32, row-major); a `.toml` sidecar records its shape.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ReconCmd {
    /// Diffusion posterior sampling with posterior averaging.
    Dps {
        #[command(flatten)]
        io: MeasurementArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 5)]
        ns: usize,
        /// Sampler configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of sampler steps (overrides the config).
        #[arg(long)]
        nt: Option<usize>,
        #[arg(long)]
        save_samples: bool,
        #[arg(long)]
        save_stddev: bool,
    },
    /// L1-wavelet compressed sensing.
    L1 {
        #[command(flatten)]
        io: MeasurementArgs,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ExpCmd {
    Ablation {
        #[arg(long)]
        config: PathBuf,
    },
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Background-noise histograms of 25 random images.
    Audit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate → denoise → train → reconstruct → report in one directory.
    Pipeline {
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Reads a config file, reporting missing or malformed files as configuration errors.
fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::Config(format!("config file {} does not exist", path.display())));
    }
    read_toml(path).map_err(|e| match e {
        Error::Format { path, detail } => Error::Config(format!("{}: {detail}", path.display())),
        other => other,
    })
}

fn load_measurement(args: &MeasurementArgs) -> Result<KSpaceMeasurement> {
    let mask_file: MaskFile = read_config(&args.mask)?;
    let mask = SamplingMask::from_file(&mask_file)?;
    let values = read_complex(&args.kspace, mask.n_lines())?;
    KSpaceMeasurement::from_parts(values, mask, 0.0)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct ImageShape {
    height: usize,
    width: usize,
}

fn save_image(path: &Path, img: &Image) -> Result<()> {
    write_image(path, img)?;
    write_toml(
        &sibling(path, ".toml"),
        &ImageShape {
            height: img.nrows(),
            width: img.ncols(),
        },
    )
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Data(DataCmd::Gen {
            out,
            config,
            train,
            val,
            test,
            sizes,
        }) => {
            let mut cfg: DatasetConfig = match &config {
                Some(p) => read_config(p)?,
                None => DatasetConfig::default(),
            };
            let d = &cfg.per_class;
            cfg.per_class = SplitCounts {
                train: train.unwrap_or(d.train),
                val: val.unwrap_or(d.val),
                test: test.unwrap_or(d.test),
            };
            if let Some(s) = sizes {
                cfg.sizes = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let manifest = build_dataset(&cfg, &out)?;
            println!("wrote {} samples to {}", manifest.entries.len(), out.display());
        }
        Command::Data(DataCmd::Measure {
            data,
            id,
            r,
            etl,
            sigma_d,
            out_kspace,
            out_mask,
        }) => {
            let ds = load_dataset(&data)?;
            let item = ds
                .items
                .iter()
                .find(|it| it.id == id)
                .ok_or_else(|| Error::Config(format!("no sample with id '{id}' in {}", data.display())))?;
            let s = seed.unwrap_or(0);
            let (etl, mode) = if item.sample.label.is_fse() { (etl, MaskMode::Fse) } else { (1, MaskMode::Se) };
            let mask = make_echo_train_mask(item.sample.pixels.nrows(), etl, r, s, mode)?;
            let y = add_measurement_noise(&forward(&item.sample.pixels, &mask)?, sigma_d, s)?;
            write_complex(&out_kspace, &y.values)?;
            write_toml(&out_mask, &mask.to_file())?;
            println!("R = {:.4} ({} of {} lines kept)", mask.r, mask.kept(), mask.n_lines());
        }
        Command::Denoise(DenoiseCmd::Train {
            data,
            out,
            config,
            steps,
        }) => {
            let mut cfg: DenoiserConfig = match &config {
                Some(p) => read_config(p)?,
                None => DenoiserConfig::desk(),
            };
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let ds = load_dataset(&data)?;
            let ckpt = train_denoiser(&ds, &cfg)?;
            ckpt.save(&out)?;
            println!("saved denoiser {} (sha256 {})", out.display(), ckpt.sha256());
        }
        Command::Denoise(DenoiseCmd::Apply { data, ckpt, out }) => {
            let ck = DenoiserCheckpoint::load(&ckpt)?;
            let manifest = denoise_dataset(&data, &ck, &out)?;
            println!("denoised {} samples into {}", manifest.entries.len(), out.display());
        }
        Command::Scorenet(ScorenetCmd::Train {
            data,
            regime,
            class,
            out,
            config,
            steps,
        }) => {
            let file: ScorenetFile = match &config {
                Some(p) => read_config(p)?,
                None => ScorenetFile::default(),
            };
            let mut train = file.train;
            if let Some(s) = steps {
                train.steps = s;
            }
            if let Some(s) = seed {
                train.seed = s;
            }
            let class = class.as_deref().map(str::parse::<ClassLabel>).transpose()?;
            let regime = Regime::parse(&regime, class)?;
            let model = file.model.unwrap_or_else(|| ScoreModelConfig::desk((48, 48)));
            let ds = load_dataset(&data)?;
            let ckpt = train_score_model(&ds, &model, &train, regime)?;
            ckpt.save(&out)?;
            println!("saved {} model {} (sha256 {})", regime, out.display(), ckpt.sha256());
        }
        Command::Recon(ReconCmd::Dps {
            io,
            ckpt,
            class,
            ns,
            config,
            nt,
            save_samples,
            save_stddev,
        }) => {
            let mut cfg: SamplerConfig = match &config {
                Some(p) => read_config(p)?,
                None => SamplerConfig::default(),
            };
            cfg.n_s = ns;
            if let Some(n) = nt {
                cfg.n_t = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let class: ClassLabel = class.parse()?;
            let y = load_measurement(&io)?;
            let model = ScoreCheckpoint::load(&ckpt)?;
            let res = reconstruct(&y, Some(class), &model, &cfg)?;
            save_image(&io.out, &res.mean_image)?;
            if save_samples {
                for (k, s) in res.samples.iter().flatten().enumerate() {
                    save_image(&sibling(&io.out, &format!(".sample{k}")), s)?;
                }
            }
            if save_stddev {
                if let Some(sd) = &res.stddev_map {
                    save_image(&sibling(&io.out, ".stddev"), sd)?;
                }
            }
            println!("wrote {}", io.out.display());
        }
        Command::Recon(ReconCmd::L1 { io, lambda, iters }) => {
            let mut cfg = CSConfig::default();
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            if let Some(n) = iters {
                cfg.n_iters = n;
            }
            let y = load_measurement(&io)?;
            let x = l1_wavelet_reconstruct(&y, &cfg)?;
            save_image(&io.out, &x)?;
            println!("wrote {}", io.out.display());
        }
        Command::Exp(ExpCmd::Ablation { config }) => {
            let cfg = experiment_config(&config, seed)?;
            let result = run_ablation(&cfg)?;
            let files = emit_report(&result, &cfg.output_dir)?;
            println!("{} rows → {}", result.rows.len(), files.results_csv.display());
        }
        Command::Exp(ExpCmd::Sweep { config }) => {
            let cfg = experiment_config(&config, seed)?;
            let result = run_averaging_sweep(&cfg)?;
            let files = emit_report(&result, &cfg.output_dir)?;
            println!("{} rows → {}", result.rows.len(), files.results_csv.display());
        }
        Command::Exp(ExpCmd::Audit { data, out }) => {
            let ds = load_dataset(&data)?;
            let report = background_noise_audit(&ds, seed.unwrap_or(0))?;
            let (csv, png) = write_audit(&report, &out)?;
            println!(
                "{} panels, mean |mu| = {:.5} → {}, {}",
                report.panels.len(),
                report.mean_abs_mu(),
                csv.display(),
                png.display()
            );
        }
        Command::Exp(ExpCmd::Pipeline { workdir, config }) => {
            let mut cfg: PipelineConfig = match &config {
                Some(p) => read_config(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = run_pipeline(&cfg, &workdir)?;
            println!(
                "ablation: {} rows → {}",
                out.ablation.rows.len(),
                out.ablation_report.results_csv.display()
            );
            if let (Some(s), Some(f)) = (&out.sweep, &out.sweep_report) {
                println!("sweep: {} rows → {}", s.rows.len(), f.results_csv.display());
            }
        }
        Command::Report { results, out } => {
            let result = load_result(&results)?;
            let files = emit_report(&result, &out)?;
            println!("{} rows → {}", result.rows.len(), files.results_csv.display());
        }
    }
    Ok(())
}

fn experiment_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.sampler.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
