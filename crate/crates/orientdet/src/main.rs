//! Command-line front end: dataset generation, training, pseudo-label
//! export, detector training, evaluation, and metric plotting.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use orientdet::geom::dota_decode;
use orientdet::netcore::Model;
use orientdet::synthdata::{generate_dataset, parse_class_name, Dataset};
use orientdet::trainer::{
    detect, evaluate_map50, evaluate_miou, export_pseudo_labels, plot::plot_csv, train,
    train_detector, RunConfig,
};

#[derive(Parser)]
#[command(name = "orientdet", about = "Point-supervised oriented object detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    TwoStage,
    E2e,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Miou,
    Map50,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (images, DOTA labels, point labels).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of images (defaults to train_images from the config).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the point-supervised model on a generated dataset.
    Train {
        #[arg(long, value_enum, default_value = "two-stage")]
        mode: TrainMode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export pseudo oriented boxes (one DOTA file per image) from a checkpoint.
    GenPseudo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on exported pseudo labels.
    TrainDetector {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate predictions against ground truth (directories of DOTA
    /// files), or run a detector checkpoint over a dataset first.
    Eval {
        /// Directory of prediction DOTA files ({i}.dota).
        #[arg(long, conflicts_with = "ckpt")]
        pred: Option<PathBuf>,
        /// Directory of ground-truth DOTA files ({i}.dota).
        #[arg(long, required_unless_present = "ckpt")]
        gt: Option<PathBuf>,
        /// Detector checkpoint: run inference over --data and evaluate.
        #[arg(long, requires = "config", requires = "data")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Detection score threshold when running a checkpoint.
        #[arg(long, default_value_t = 0.05)]
        score_thr: f64,
        #[arg(long, value_enum)]
        metric: Metric,
    },
    /// Render a metrics CSV log to a PNG plot.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> Result<(), Box<dyn std::error::Error>> {
    match Cli::parse().cmd {
        Cmd::GenData { config, out, count } => {
            let cfg = RunConfig::from_file(&config)?;
            let n = count.unwrap_or(cfg.train.train_images + cfg.train.holdout_images);
            generate_dataset(&cfg.scene, n, &out)?;
            println!("wrote {n} images to {}", out.display());
        }
        Cmd::Train { mode, config, data, out } => {
            let mut cfg = RunConfig::from_file(&config)?;
            cfg.e2e = mode == TrainMode::E2e;
            let res = train(&cfg, &data, &out)?;
            println!("final train mIoU {:.4}; artifacts in {}", res.final_miou, out.display());
        }
        Cmd::GenPseudo { config, ckpt, data, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let model = Model::load(cfg.model.clone(), &ckpt)?;
            let n = export_pseudo_labels(&model, &cfg, &data, &out)?;
            println!("wrote {n} pseudo boxes to {}", out.display());
        }
        Cmd::TrainDetector { config, data, labels, out } => {
            let cfg = RunConfig::from_file(&config)?;
            train_detector(&cfg, &data, &labels, &out)?;
            println!("detector checkpoint in {}", out.display());
        }
        Cmd::Eval { pred, gt, ckpt, config, data, score_thr, metric } => {
            if let Some(ckpt) = ckpt {
                let cfg = RunConfig::from_file(&config.expect("clap enforces --config"))?;
                let model = Model::load(cfg.model.clone(), &ckpt)?;
                let ds = Dataset::open(&data.expect("clap enforces --data"))?;
                let mut dets = Vec::with_capacity(ds.len());
                let mut gt_items = Vec::with_capacity(ds.len());
                for i in 0..ds.len() {
                    let item = ds.load(i)?;
                    dets.push(detect(&model, &item.image, score_thr));
                    gt_items.push(item.boxes);
                }
                match metric {
                    Metric::Map50 => {
                        println!(
                            "mAP50 {:.4} over {} images",
                            evaluate_map50(&dets, &gt_items),
                            dets.len()
                        );
                    }
                    Metric::Miou => {
                        return Err("mIoU needs paired --pred/--gt label sets".into());
                    }
                }
                return Ok(());
            }
            let pred = pred.ok_or("--pred is required without --ckpt")?;
            let gt = gt.expect("clap enforces --gt");
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for i in 0.. {
                let p = pred.join(format!("{i}.dota"));
                let g = gt.join(format!("{i}.dota"));
                if !p.exists() || !g.exists() {
                    break;
                }
                preds.push(dota_decode(&std::fs::read_to_string(p)?)?);
                gts.push(dota_decode(&std::fs::read_to_string(g)?)?);
            }
            if preds.is_empty() {
                return Err("no paired {i}.dota files found".into());
            }
            match metric {
                Metric::Miou => {
                    let pb: Vec<Vec<_>> =
                        preds.iter().map(|r| r.iter().map(|d| d.bbox).collect()).collect();
                    let gb: Vec<Vec<_>> =
                        gts.iter().map(|r| r.iter().map(|d| d.bbox).collect()).collect();
                    let (miou, warn) = evaluate_miou(&pb, &gb);
                    println!("mIoU {miou:.4} over {} images ({warn} unpaired)", pb.len());
                }
                Metric::Map50 => {
                    // Predictions carry no scores in DOTA files; rank by
                    // file order with descending synthetic confidence.
                    let dets: Vec<Vec<orientdet::trainer::Detection>> = preds
                        .iter()
                        .map(|recs| {
                            recs.iter()
                                .enumerate()
                                .map(|(k, r)| {
                                    Ok(orientdet::trainer::Detection {
                                        bbox: r.bbox,
                                        score: 1.0 / (k + 1) as f64,
                                        class: parse_class_name(&r.class_name)?,
                                    })
                                })
                                .collect::<Result<_, Box<dyn std::error::Error>>>()
                        })
                        .collect::<Result<_, _>>()?;
                    let gt_items: Vec<Vec<_>> = gts
                        .iter()
                        .map(|recs| {
                            recs.iter()
                                .map(|r| Ok((r.bbox, parse_class_name(&r.class_name)?)))
                                .collect::<Result<_, Box<dyn std::error::Error>>>()
                        })
                        .collect::<Result<_, _>>()?;
                    println!("mAP50 {:.4} over {} images", evaluate_map50(&dets, &gt_items), dets.len());
                }
            }
        }
        Cmd::Plot { log, out } => {
            plot_csv(&std::fs::read_to_string(&log)?, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
