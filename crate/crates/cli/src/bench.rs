//! Per-frame timing of the encode-to-pose path for one temporal variant.

use std::path::PathBuf;
use std::time::Instant;

use candle_core::DType;
use clap::Args;
use serde::{Deserialize, Serialize};
use videopose_core::data::FrameRecord;
use videopose_model::checkpoint::load_checkpoint;
use videopose_model::infer::gt_boxes;
use videopose_model::network::{ImageCamera, ObjectQuery, Tracker};
use videopose_model::train::TrainConfig;
use videopose_model::Network;

use crate::{open_dataset, parse_preset, parse_variant, write_json, Cli, CliError, CliResult};

pub const MIN_FRAMES: usize = 100;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Trained weights; without it a freshly initialized network is timed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// baseline_rnn, convgru or none. Required without a checkpoint.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long, default_value_t = MIN_FRAMES)]
    pub frames: usize,
    /// Leading frames excluded from timing.
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    /// Timed passes over the same frames; the fastest one is reported.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: String,
    /// Frames processed, warmup included.
    pub frames: usize,
    /// Frames timed in each pass.
    pub timed_frames: usize,
    /// Wall time of the fastest pass.
    pub wall_time_s: f64,
    pub fps: f64,
    pub pass_fps: Vec<f64>,
}

fn build_network(cli: &Cli, args: &BenchArgs, num_classes: usize) -> CliResult<Network> {
    if let Some(ck) = &args.checkpoint {
        let net = load_checkpoint(ck, DType::F32)?.network;
        if let Some(v) = &args.variant {
            if parse_variant(v)? != net.cfg.temporal {
                return Err(CliError::Usage(format!(
                    "checkpoint holds a {} network, not {v}",
                    net.cfg.temporal.name()
                )));
            }
        }
        return Ok(net);
    }
    let variant = args
        .variant
        .as_deref()
        .ok_or_else(|| CliError::Usage("bench needs --checkpoint or --variant".into()))?;
    let cfg = TrainConfig {
        temporal: parse_variant(variant)?,
        preset: parse_preset(&args.preset)?,
        ..TrainConfig::default()
    };
    Ok(Network::new(cfg.model_config(num_classes), cli.seed.unwrap_or(0), DType::F32)?)
}

/// Times `frames` consecutive frames, cycling through the videos; the
/// temporal state restarts at each video boundary and at the start of each
/// timed pass.
pub fn cmd_bench(cli: &Cli, args: &BenchArgs) -> CliResult<BenchResult> {
    if args.frames < MIN_FRAMES {
        return Err(CliError::Usage(format!("--frames must be at least {MIN_FRAMES}")));
    }
    if args.warmup >= args.frames || args.repeats == 0 {
        return Err(CliError::Usage("--warmup must be smaller than --frames and --repeats positive".into()));
    }
    let dataset = open_dataset(&args.data)?;
    let net = build_network(cli, args, dataset.registry.len())?;

    let mut sequence: Vec<(usize, FrameRecord)> = Vec::with_capacity(args.frames);
    'fill: loop {
        for v in 0..dataset.videos.len() {
            for f in dataset.load_video(v)? {
                if sequence.len() == args.frames {
                    break 'fill;
                }
                sequence.push((v, f));
            }
        }
        if sequence.is_empty() {
            return Err(CliError::Data("dataset has no frames".into()));
        }
    }
    let queries: Vec<Vec<ObjectQuery>> = sequence
        .iter()
        .map(|(_, f)| {
            Ok(gt_boxes(f, &dataset.registry)?
                .into_iter()
                .map(|b| ObjectQuery { image: 0, track: b.class, class: b.class, bbox: b.bbox })
                .collect())
        })
        .collect::<CliResult<_>>()?;

    let run = |frames: &[(usize, FrameRecord)], queries: &[Vec<ObjectQuery>]| -> CliResult<f64> {
        let mut tracker = Tracker::new();
        let mut current = usize::MAX;
        let start = Instant::now();
        for ((video, frame), q) in frames.iter().zip(queries) {
            if *video != current {
                tracker = Tracker::new();
                current = *video;
            }
            let cameras = [ImageCamera { extrinsic: frame.extrinsic, intrinsics: frame.intrinsics }];
            let images = net.image_tensor(&[&frame.rgb])?;
            let step = net.step(&images, &cameras, q, &mut tracker)?;
            if !q.is_empty() {
                let poses = net.assemble_poses(&step.heads, &step.features, &cameras, q)?;
                std::hint::black_box(poses);
            }
        }
        Ok(start.elapsed().as_secs_f64())
    };
    let w = args.warmup;
    run(&sequence[..w], &queries[..w])?;
    let timed = args.frames - w;
    let walls = (0..args.repeats)
        .map(|_| run(&sequence[w..], &queries[w..]))
        .collect::<CliResult<Vec<f64>>>()?;
    let wall = walls.iter().copied().fold(f64::INFINITY, f64::min);
    let result = BenchResult {
        variant: net.cfg.temporal.name().into(),
        frames: args.frames,
        timed_frames: timed,
        wall_time_s: wall,
        fps: timed as f64 / wall,
        pass_fps: walls.iter().map(|t| timed as f64 / t).collect(),
    };
    if let Some(out) = &args.out {
        write_json(out, &result)?;
    }
    println!("{}", serde_json::to_string(&result).map_err(|e| CliError::Data(e.to_string()))?);
    Ok(result)
}
