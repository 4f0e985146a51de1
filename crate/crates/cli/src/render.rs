//! Overlays of model points under ground-truth (green) and predicted (red) poses.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use videopose_core::data::FrameRecord;
use videopose_core::geometry::{CameraIntrinsics, Pose};
use videopose_core::objects::ObjectModel;
use videopose_model::infer::ClipInput;

use crate::eval::{BoxSource, Predictor};
use crate::{io_err, open_dataset, write_json, CliError, CliResult};

pub const GT_COLOR: Rgb<u8> = Rgb([0, 220, 0]);
pub const PRED_COLOR: Rgb<u8> = Rgb([230, 0, 0]);

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Checkpoint file, or `gt-echo`.
    #[arg(long)]
    pub checkpoint: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Video id or index.
    #[arg(long, default_value = "0")]
    pub video: String,
    /// Frame indices to draw; the video is run from its first frame so
    /// the temporal state matches evaluation.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize])]
    pub frames: Vec<usize>,
    /// Integer upscaling of the output images.
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
    #[arg(long)]
    pub out: PathBuf,
}

/// Pixel positions (in input-image coordinates) of one object's points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectOverlay {
    pub object: String,
    pub gt: Vec<(f64, f64)>,
    pub pred: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedFrame {
    pub frame: usize,
    pub image: PathBuf,
    pub objects: Vec<ObjectOverlay>,
}

fn project_points(model: &ObjectModel, pose: &Pose, k: &CameraIntrinsics) -> Vec<(f64, f64)> {
    model
        .points()
        .iter()
        .filter_map(|p| k.project(&pose.transform_point(p)).ok())
        .collect()
}

fn draw(img: &mut RgbImage, pts: &[(f64, f64)], scale: u32, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let s = scale as f64;
    for &(u, v) in pts {
        if !(u.is_finite() && v.is_finite()) {
            continue;
        }
        let (cx, cy) = ((u * s).floor() as i64, (v * s).floor() as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (cx + dx, cy + dy);
                if (0..w).contains(&x) && (0..h).contains(&y) {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
}

fn frame_image(frame: &FrameRecord, scale: u32) -> RgbImage {
    let (h, w, _) = frame.rgb.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (frame.rgb[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    imageops::resize(&img, w as u32 * scale, h as u32 * scale, imageops::FilterType::Nearest)
}

pub fn cmd_render(args: &RenderArgs) -> CliResult<Vec<RenderedFrame>> {
    if args.frames.is_empty() || args.scale == 0 {
        return Err(CliError::Usage("--frames must be non-empty and --scale positive".into()));
    }
    let dataset = open_dataset(&args.data)?;
    let video = match args.video.parse::<usize>() {
        Ok(i) if i < dataset.videos.len() => i,
        Ok(i) => return Err(CliError::Data(format!("video index {i} out of range"))),
        Err(_) => dataset
            .videos
            .iter()
            .position(|v| v.id == args.video)
            .ok_or_else(|| CliError::Data(format!("unknown video `{}`", args.video)))?,
    };
    let frames = dataset.load_video(video)?;
    let last = *args.frames.iter().max().expect("non-empty");
    if last >= frames.len() {
        return Err(CliError::Data(format!("frame {last} not in video with {} frames", frames.len())));
    }
    let predictor = Predictor::load(&args.checkpoint)?;
    let name = dataset.videos[video].id.clone();
    let source = BoxSource::Gt { dilate: 1.0 };
    let prefix = &frames[..=last];
    let boxes = prefix
        .iter()
        .map(|f| source.boxes(&name, f, &dataset))
        .collect::<CliResult<Vec<_>>>()?;
    let preds = predictor.predict(&[ClipInput { frames: prefix, boxes: &boxes }])?.remove(0);

    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let mut out = Vec::with_capacity(args.frames.len());
    for &fi in &args.frames {
        let frame = &frames[fi];
        let mut img = frame_image(frame, args.scale);
        let mut objects = Vec::new();
        for p in &preds[fi] {
            let (Some(model), Some(ann)) = (dataset.registry.get(&p.object), frame.object(&p.object)) else {
                continue;
            };
            let gt = project_points(model, &ann.pose, &frame.intrinsics);
            let pred = project_points(model, &p.pose, &frame.intrinsics);
            draw(&mut img, &gt, args.scale, GT_COLOR);
            draw(&mut img, &pred, args.scale, PRED_COLOR);
            objects.push(ObjectOverlay { object: p.object.clone(), gt, pred });
        }
        let path = args.out.join(format!("{name}_{fi:06}.png"));
        img.save(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        out.push(RenderedFrame { frame: fi, image: path, objects });
    }
    write_json(&args.out.join("overlays.json"), &out)?;
    println!("wrote {} overlay(s) to {}", out.len(), args.out.display());
    Ok(out)
}
