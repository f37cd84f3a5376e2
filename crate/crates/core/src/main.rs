use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csi_reid::augment::{augment, AugmentConfig};
use csi_reid::calibration::{
    calibrate_segment_with, read_calibrated_dataset, write_calibrated_dataset, CalibratedSegment,
    CalibrationOptions,
};
use csi_reid::csi::{read_dataset, read_raw, write_dataset, DatasetManifest, VERSION_COMPLEX};
use csi_reid::synth::{generate_dataset, SynthConfig};
use csi_reid::train::{
    ablation_matrix, evaluate, evaluate_rounds, export_embeddings, fusion_ablation, load_calibrated,
    load_split, save_split, select, split_segments, train, LogFormat, Model, TrainConfig,
};
use csi_reid::{Error, Result};

#[derive(Parser)]
#[command(name = "csi-reid", version, about = "WiFi CSI person re-identification")]
struct Cli {
    /// JSON config for the chosen verb.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or dataset path for `synth`, `calibrate`, `augment`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "text")]
    log_format: Format,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Text,
    Jsonl,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a synthetic multipath dataset.
    Synth,
    /// Calibrate a complex dataset into amplitude and sanitised phase.
    Calibrate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        center_indices: bool,
    },
    /// Offline preview of training-time augmentation.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train on an identity-disjoint split of a dataset.
    Train(DataArg),
    /// Evaluate a checkpoint on query/gallery data.
    Eval(EvalArgs),
    /// Loss and augmentation ablation.
    AblateLosses(DataArg),
    /// Fusion-strategy ablation.
    AblateFusion(DataArg),
    /// Write `id\tlabel\tv1..vd` embeddings.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Restrict to the segments of this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArg {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split file written by `train`; its test side is evaluated over
    /// `eval_rounds` query/gallery samplings.
    #[arg(long, conflicts_with_all = ["query", "gallery"])]
    split: Option<PathBuf>,
    #[arg(long, requires = "gallery")]
    query: Option<PathBuf>,
    #[arg(long, requires = "query")]
    gallery: Option<PathBuf>,
    /// Also write per-query rows as TSV.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_slice(&fs::read(p)?)?),
        None => Ok(T::default()),
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn out_file(cli: &Cli, default_name: &str) -> Result<PathBuf> {
    match &cli.out {
        Some(p) if p.extension().is_some() => {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Ok(p.clone())
        }
        _ => Ok(out_dir(cli)?.join(default_name)),
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_json(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.log_format = match cli.log_format {
        Format::Text => LogFormat::Text,
        Format::Jsonl => LogFormat::Jsonl,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Calibrated segments plus the geometry needed to write them back.
fn load_with_geometry(
    path: &Path,
    opts: CalibrationOptions,
) -> Result<(Vec<CalibratedSegment>, csi_reid::csi::FileGeometry)> {
    let geometry = read_raw(path)?.geometry;
    if geometry.version == VERSION_COMPLEX {
        let (segs, _) = read_dataset(path)?;
        let cal = segs
            .iter()
            .map(|s| calibrate_segment_with(s, opts))
            .collect::<Result<Vec<_>>>()?;
        Ok((cal, geometry))
    } else {
        read_calibrated_dataset(path)
    }
}

fn write_calibrated(path: &Path, segs: &[CalibratedSegment], g: &csi_reid::csi::FileGeometry) -> Result<()> {
    let layout = g
        .layout
        .as_ref()
        .ok_or_else(|| Error::Data("dataset has no subcarrier layout".into()))?;
    write_calibrated_dataset(segs, layout, g.antenna_count, g.sample_rate_hz, path)?;
    log::info!("wrote {} segments to {}", segs.len(), path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.verb {
        Verb::Synth => {
            let mut cfg: SynthConfig = read_json(cli.config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let segs = generate_dataset(&cfg)?;
            let path = out_file(cli, "dataset.csi")?;
            write_dataset(&segs, &path)?;
            log::info!("wrote {} segments to {}", segs.len(), path.display());
        }
        Verb::Calibrate { input, center_indices } => {
            let opts = CalibrationOptions {
                center_indices: *center_indices,
            };
            let (segs, geometry) = load_with_geometry(input, opts)?;
            write_calibrated(&out_file(cli, "calibrated.csi")?, &segs, &geometry)?;
        }
        Verb::Augment { input } => {
            let mut cfg: AugmentConfig = read_json(cli.config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let (segs, geometry) = load_with_geometry(input, CalibrationOptions::default())?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let out: Vec<_> = segs.iter().map(|s| augment(s, &cfg, &mut rng)).collect();
            write_calibrated(&out_file(cli, "augmented.csi")?, &out, &geometry)?;
        }
        Verb::Train(DataArg { data }) => {
            let cfg = train_config(cli)?;
            let segs = load_calibrated(data, cfg.calibration)?;
            let dir = out_dir(cli)?;
            let (split, train_segs, _) = split_segments(&segs, cfg.train_fraction, cfg.seed)?;
            save_split(&split, &dir.join("split.json"))?;
            let outcome = train(&cfg, &train_segs, Some(&dir))?;
            log::info!(
                "trained {} epochs; checkpoint in {}",
                outcome.log.len(),
                dir.display()
            );
        }
        Verb::Eval(args) => {
            let model = Model::load(&args.checkpoint)?;
            let mut cfg = model.meta.train.clone();
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let segs = load_calibrated(&args.data, cfg.calibration)?;
            let report = if let (Some(q), Some(g)) = (&args.query, &args.gallery) {
                let query = select(&segs, &DatasetManifest::load(q)?)?;
                let gallery = select(&segs, &DatasetManifest::load(g)?)?;
                evaluate(&model, &query, &gallery)?
            } else {
                let test = match &args.split {
                    Some(p) => {
                        let split = load_split(p)?;
                        let test = DatasetManifest {
                            split_tag: None,
                            entries: split.test_entries(),
                        };
                        select(&segs, &test)?
                    }
                    None => split_segments(&segs, cfg.train_fraction, cfg.seed)?.2,
                };
                evaluate_rounds(&model, &test, cfg.eval_rounds, cfg.seed)?
            };
            write_json(&out_dir(cli)?.join("report.json"), &report)?;
            if let Some(tsv) = &args.tsv {
                fs::write(tsv, report.per_query_tsv())?;
            }
            println!(
                "mAP {:.4} mINP {:.4} Rank-1 {:.4} Rank-3 {:.4} Rank-5 {:.4} AUC {:.4}",
                report.map,
                report.minp,
                report.rank(1),
                report.rank(3),
                report.rank(5),
                report.roc_auc
            );
        }
        Verb::AblateLosses(DataArg { data }) => {
            let cfg = train_config(cli)?;
            let segs = load_calibrated(data, cfg.calibration)?;
            let rows = ablation_matrix(&cfg, &segs)?;
            for r in &rows {
                println!("{:<14} mAP {:.4} mINP {:.4} Rank-1 {:.4} Rank-3 {:.4}", r.label, r.report.map, r.report.minp, r.report.rank(1), r.report.rank(3));
            }
            write_json(&out_dir(cli)?.join("ablation_losses.json"), &rows)?;
        }
        Verb::AblateFusion(DataArg { data }) => {
            let cfg = train_config(cli)?;
            let segs = load_calibrated(data, cfg.calibration)?;
            let rows = fusion_ablation(&cfg, &segs)?;
            for r in &rows {
                println!("{:<8} mAP {:.4} mINP {:.4} Rank-1 {:.4} Rank-5 {:.4}", format!("{:?}", r.fusion), r.report.map, r.report.minp, r.report.rank(1), r.report.rank(5));
            }
            write_json(&out_dir(cli)?.join("ablation_fusion.json"), &rows)?;
        }
        Verb::ExportEmbeddings { checkpoint, data, manifest } => {
            let model = Model::load(checkpoint)?;
            let mut segs = load_calibrated(data, model.meta.train.calibration)?;
            if let Some(m) = manifest {
                segs = select(&segs, &DatasetManifest::load(m)?)?;
            }
            let path = out_file(cli, "embeddings.tsv")?;
            fs::write(&path, export_embeddings(&model, &segs)?)?;
            log::info!("wrote {} embeddings to {}", segs.len(), path.display());
        }
    }
    Ok(())
}

fn init_logging(format: Format) {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if let Format::Jsonl = format {
        builder.format(|buf, record| {
            let msg = record.args().to_string();
            if msg.starts_with('{') {
                writeln!(buf, "{msg}")
            } else {
                let line = serde_json::json!({ "level": record.level().as_str(), "message": msg });
                writeln!(buf, "{line}")
            }
        });
    }
    builder.init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log_format);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
