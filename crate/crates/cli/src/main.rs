use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use promptseg3d::curate::curate_dataset;
use promptseg3d::evalbench::{aggregate_report, run_prompt_sweep, write_report, GroupBy, DEFAULT_BUDGETS};
use promptseg3d::infer::{segment_volume, InferConfig};
use promptseg3d::net3d::{export_encoder, load_model};
use promptseg3d::train::{normalize_intensity, train_stage, Normalization, ShapeFamily, SyntheticSpec};
use promptseg3d::voxgrid::Connectivity;
use promptseg3d::{
    nifti, CurateConfig, DatasetManifest, Error, ModelState, NetConfig, PointPrompt, Result, Stage, TrainConfig,
};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "promptseg3d", version, about = "Click-prompted 3D volume segmentation")]
struct Cli {
    /// Log level used when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean labels and write a curated manifest plus report.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated class names to split into left/right.
        #[arg(long, value_delimiter = ',')]
        symmetric_classes: Vec<String>,
        #[arg(long, default_value_t = 26)]
        connectivity: u32,
        /// JSON file with further curation settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one stage and write checkpoints, metrics and `final.psg`.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON training config; missing keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from, typically the stage-1 result.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Architecture for a fresh model: reference, desk, test or a JSON file.
        #[arg(long, default_value = "desk")]
        net: String,
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        /// Curation report used by fine-tuning to pick clean targets.
        #[arg(long)]
        curation_report: Option<PathBuf>,
    },
    /// Segment a volume from clicks.
    Infer {
        #[arg(long)]
        volume: PathBuf,
        /// `i,j,k,+` or `i,j,k,-`; the first click must be positive.
        #[arg(long = "click", required = true)]
        clicks: Vec<PointPrompt>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Simulated-click evaluation over a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUDGETS.to_vec())]
        budgets: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the HTTP session service. Flags override SEG_* variables.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        max_sessions: Option<usize>,
        #[arg(long)]
        max_volume_mb: Option<usize>,
    },
    /// Write a synthetic dataset (images, labels, manifest).
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, value_enum, default_value = "ellipsoid")]
        family: FamilyArg,
        /// Voxels per axis of each volume.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        val_fraction: f64,
        /// Fraction of cases whose labels get corrupted.
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON spec; overrides the flags above.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Save the image encoder of a checkpoint on its own.
    ExportEncoder {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Ellipsoid,
    Tube,
    MultiBlob,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn net_config(spec: &str) -> Result<NetConfig> {
    let cfg = match spec {
        "reference" => NetConfig::reference(),
        "desk" => NetConfig::desk(),
        "test" => NetConfig::test(),
        path => read_json(Path::new(path))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Curate {
            manifest,
            out_dir,
            symmetric_classes,
            connectivity,
            config,
        } => {
            let mut cfg: CurateConfig = match config {
                Some(p) => read_json(&p)?,
                None => CurateConfig::default(),
            };
            if !symmetric_classes.is_empty() {
                cfg.symmetric_classes = symmetric_classes;
            }
            cfg.connectivity = Connectivity::from_count(connectivity)
                .ok_or_else(|| Error::Config(format!("connectivity must be 6 or 26, got {connectivity}")))?;
            let m = DatasetManifest::load(&manifest)?;
            let (curated, report) = curate_dataset(&m, &cfg, &out_dir)?;
            let kept = report.records.iter().filter(|r| r.kept).count();
            println!(
                "{} of {} cases curated, {kept} of {} classes kept, {} skipped; wrote {}",
                curated.len(),
                m.len(),
                report.records.len(),
                report.skipped.len(),
                out_dir.join("manifest.json").display()
            );
        }
        Command::Train {
            stage,
            manifest,
            config,
            out,
            init,
            net,
            model_seed,
            curation_report,
        } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            cfg.stage = match stage {
                StageArg::Pretrain => Stage::Pretrain,
                StageArg::Finetune => Stage::Finetune,
            };
            cfg.out_dir = Some(out.clone());
            if curation_report.is_some() {
                cfg.curation_report = curation_report;
            }
            let model = match init {
                Some(p) => load_model(&p)?,
                None => ModelState::new(net_config(&net)?, model_seed)?,
            };
            let data = DatasetManifest::load(&manifest)?;
            let (_, log) = train_stage(model, &data, &cfg)?;
            match log.metrics.last() {
                Some(m) => println!(
                    "{} steps, final loss {:.4}, dice {:.4}",
                    log.metrics.len(),
                    m.loss,
                    m.dice
                ),
                None => println!("no training targets; model unchanged"),
            }
            println!("wrote {}", out.join("final.psg").display());
        }
        Command::Infer {
            volume,
            clicks,
            checkpoint,
            out,
            threshold,
        } => {
            let model: ModelState<f32> = load_model(&checkpoint)?;
            let v = nifti::read_volume(&volume)?;
            let input = normalize_intensity(&v, &Normalization::default());
            let cfg = InferConfig {
                threshold,
                ..InferConfig::default()
            };
            let seg = segment_volume(&input, &clicks, &model, cfg)?;
            nifti::write_mask(&out, &seg.mask, v.spacing, v.origin)?;
            println!(
                "{} foreground voxels from {} windows; wrote {}",
                seg.mask.count(),
                seg.windows.len(),
                out.display()
            );
        }
        Command::Eval {
            manifest,
            checkpoint,
            budgets,
            seed,
            report,
        } => {
            let model: ModelState<f32> = load_model(&checkpoint)?;
            let m = DatasetManifest::load(&manifest)?;
            let segment = |v: &promptseg3d::Volume, c: &[PointPrompt]| {
                segment_volume(v, c, &model, InferConfig::default()).map(|s| s.mask)
            };
            let (records, skipped) = run_prompt_sweep(segment, &m, &budgets, seed, &Normalization::default())?;
            for s in &skipped {
                log::warn!("skipped {}: {}", s.case_id, s.reason);
            }
            write_report(&report, &records)?;
            if !records.is_empty() {
                println!("{}", aggregate_report(&records, GroupBy::Organ)?.to_table());
            }
            println!("{} records; wrote {}", records.len(), report.display());
        }
        Command::Serve {
            checkpoint,
            port,
            max_sessions,
            max_volume_mb,
        } => {
            let mut cfg = promptseg3d_serve::ServeConfig::from_env()?;
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.port = port.unwrap_or(cfg.port);
            cfg.max_sessions = max_sessions.unwrap_or(cfg.max_sessions);
            cfg.max_volume_mb = max_volume_mb.unwrap_or(cfg.max_volume_mb);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(promptseg3d_serve::run(cfg))?;
        }
        Command::Synth {
            out_dir,
            count,
            family,
            size,
            val_fraction,
            label_noise,
            seed,
            config,
        } => {
            let spec = match config {
                Some(p) => read_json(&p)?,
                None => SyntheticSpec {
                    count,
                    family: match family {
                        FamilyArg::Ellipsoid => ShapeFamily::Ellipsoid,
                        FamilyArg::Tube => ShapeFamily::Tube,
                        FamilyArg::MultiBlob => ShapeFamily::MultiBlob,
                    },
                    dims: [size; 3],
                    val_fraction,
                    label_noise,
                    ..SyntheticSpec::default()
                },
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = promptseg3d::train::make_synthetic_dataset(&spec, &mut rng, &out_dir)?;
            println!("{} cases; wrote {}", m.len(), out_dir.join("manifest.json").display());
        }
        Command::ExportEncoder { checkpoint, out } => {
            let model: ModelState<f32> = load_model(&checkpoint)?;
            export_encoder(&model, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
