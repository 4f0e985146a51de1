//! Evaluation, box sources and the keyframe-position study.

use std::collections::HashMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use videopose_core::data::{make_clips, make_eval_clips, BBox, ClipSpec, Dataset, FrameRecord};
use videopose_core::metrics::{evaluate_dataset, write_predictions, DatasetReport, EvalConfig, PredictionRecord};
use videopose_model::checkpoint::load_checkpoint;
use videopose_model::infer::{gt_boxes, predict_clips, BoxInput, ClipInput, ObjectPrediction};
use videopose_model::train::split_videos;
use videopose_model::Network;

use crate::{io_err, open_dataset, write_json, Cli, CliError, CliResult};

/// Checkpoint argument naming the fixture that returns ground-truth poses.
pub const GT_ECHO: &str = "gt-echo";

/// Source of poses for evaluation.
#[derive(Debug)]
pub enum Predictor {
    Network { net: Network, id: String },
    /// Echoes the annotated pose of every box.
    GtEcho,
}

impl Predictor {
    pub fn load(arg: &str) -> CliResult<Self> {
        if arg == GT_ECHO {
            return Ok(Predictor::GtEcho);
        }
        let path = Path::new(arg);
        let bytes = fs::read(path).map_err(io_err(path))?;
        let digest = Sha256::digest(&bytes);
        let ck = load_checkpoint(path, DType::F32)?;
        Ok(Predictor::Network {
            net: ck.network,
            id: format!("{}@{}", path.file_name().map_or(arg.into(), |n| n.to_string_lossy()), &hex::encode(digest)[..12]),
        })
    }

    pub fn id(&self) -> String {
        match self {
            Predictor::Network { id, .. } => id.clone(),
            Predictor::GtEcho => GT_ECHO.to_string(),
        }
    }

    pub fn network(&self) -> Option<&Network> {
        match self {
            Predictor::Network { net, .. } => Some(net),
            Predictor::GtEcho => None,
        }
    }

    pub fn predict(&self, clips: &[ClipInput<'_>]) -> CliResult<Vec<Vec<Vec<ObjectPrediction>>>> {
        match self {
            Predictor::Network { net, .. } => Ok(predict_clips(net, clips)?),
            Predictor::GtEcho => Ok(clips
                .iter()
                .map(|c| {
                    c.frames
                        .iter()
                        .zip(c.boxes)
                        .map(|(f, bs)| {
                            bs.iter()
                                .filter_map(|b| {
                                    f.object(&b.object).map(|o| ObjectPrediction {
                                        object: b.object.clone(),
                                        class: b.class,
                                        bbox: b.bbox,
                                        pose: o.pose,
                                    })
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()),
        }
    }
}

/// One line of a boxes file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub video: String,
    pub frame: usize,
    pub object: String,
    pub bbox: BBox,
}

/// Where ROIs come from.
#[derive(Debug, Clone)]
pub enum BoxSource {
    /// Annotated boxes scaled about their centers.
    Gt { dilate: f64 },
    File(HashMap<(String, usize), Vec<BoxRecord>>),
}

impl BoxSource {
    pub fn parse(arg: &str, dilate: f64, dataset: &Dataset) -> CliResult<Self> {
        if !(dilate > 0.0 && dilate.is_finite()) {
            return Err(CliError::Usage(format!("--dilate must be positive, got {dilate}")));
        }
        if arg == "gt" {
            return Ok(BoxSource::Gt { dilate });
        }
        let path = Path::new(arg);
        let f = fs::File::open(path).map_err(io_err(path))?;
        let mut map: HashMap<(String, usize), Vec<BoxRecord>> = HashMap::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: BoxRecord = serde_json::from_str(&line)
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if dataset.registry.class_index(&r.object).is_none() {
                return Err(CliError::Data(format!(
                    "{}:{}: unknown object `{}`",
                    path.display(),
                    i + 1,
                    r.object
                )));
            }
            map.entry((r.video.clone(), r.frame)).or_default().push(r);
        }
        Ok(BoxSource::File(map))
    }

    pub fn name(&self) -> &'static str {
        match self {
            BoxSource::Gt { .. } => "gt",
            BoxSource::File(_) => "file",
        }
    }

    pub fn boxes(&self, video: &str, frame: &FrameRecord, dataset: &Dataset) -> CliResult<Vec<BoxInput>> {
        let (w, h) = (frame.width(), frame.height());
        let mut out = match self {
            BoxSource::Gt { dilate } => {
                let mut b = gt_boxes(frame, &dataset.registry)?;
                for x in &mut b {
                    x.bbox = x.bbox.scaled(*dilate, *dilate).clip_to(w, h);
                }
                b
            }
            BoxSource::File(map) => map
                .get(&(video.to_string(), frame.index))
                .map(|v| v.as_slice())
                .unwrap_or_default()
                .iter()
                .map(|r| BoxInput {
                    object: r.object.clone(),
                    class: dataset.registry.class_index(&r.object).unwrap_or(0),
                    bbox: r.bbox.clip_to(w, h),
                })
                .collect(),
        };
        out.retain(|b| b.bbox.width() > 0.0 && b.bbox.height() > 0.0);
        Ok(out)
    }
}

/// Which videos a command runs on.
pub fn select_videos(dataset: &Dataset, split: &str) -> CliResult<Vec<usize>> {
    let (train, val) = split_videos(dataset.videos.len(), 0.2);
    match split {
        "all" => Ok((0..dataset.videos.len()).collect()),
        "val" => Ok(val),
        "train" => Ok(train),
        other => Err(CliError::Usage(format!("unknown split `{other}` (all, train or val)"))),
    }
}

/// Name plus a digest of the index (seed, size, videos) and the object registry.
pub fn dataset_id(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&dataset.info).expect("dataset index serializes"));
    h.update(dataset.registry.content_hash().as_bytes());
    format!("{}@{}", dataset.info.name, &hex::encode(h.finalize())[..12])
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file, or `gt-echo` for the ground-truth fixture.
    #[arg(long)]
    pub checkpoint: String,
    #[arg(long)]
    pub data: PathBuf,
    /// `gt` or a JSON-lines file of `{video, frame, object, bbox: [x0, y0, x1, y1]}`.
    #[arg(long, default_value = "gt")]
    pub boxes: String,
    /// Scale applied to annotated boxes.
    #[arg(long, default_value_t = 1.0)]
    pub dilate: f64,
    #[arg(long, default_value = "all")]
    pub split: String,
    #[arg(long, default_value_t = 10)]
    pub clip_len: usize,
    /// Earlier `report.json` to diff against.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: String,
    pub dataset: String,
    pub box_source: String,
    pub dilate: f64,
    pub split: String,
    pub clip_len: usize,
}

/// AUCs in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub id: String,
    pub count: usize,
    pub add: Option<f64>,
    pub add_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDelta {
    pub id: String,
    pub add: Option<f64>,
    pub add_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub metadata: ReportMeta,
    /// Registry order, then the pooled `ALL` row.
    pub rows: Vec<TableRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<RowDelta>>,
}

impl ReportTable {
    pub fn from_report(report: &DatasetReport, metadata: ReportMeta) -> Self {
        let pct = |v: Option<f64>| v.map(|x| 100.0 * x);
        let rows = report
            .rows
            .iter()
            .chain(std::iter::once(&report.all))
            .map(|r| TableRow {
                id: r.id.clone(),
                count: r.count,
                add: pct(r.add_auc),
                add_s: pct(r.add_s_auc),
            })
            .collect();
        Self { metadata, rows, deltas: None }
    }

    pub fn all(&self) -> &TableRow {
        self.rows.last().expect("report has an ALL row")
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(3).max(6);
        let f = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.2}"));
        let mut s = format!(
            "checkpoint {}  dataset {}  boxes {} (x{})\n{:<width$}  {:>6}  {:>7}  {:>7}\n",
            self.metadata.checkpoint, self.metadata.dataset, self.metadata.box_source, self.metadata.dilate,
            "object", "count", "ADD", "ADD-S"
        );
        for r in &self.rows {
            s += &format!("{:<width$}  {:>6}  {:>7}  {:>7}\n", r.id, r.count, f(r.add), f(r.add_s));
        }
        if let Some(d) = &self.deltas {
            s += "delta vs reference\n";
            for r in d {
                s += &format!("{:<width$}  {:>6}  {:>7}  {:>7}\n", r.id, "", f(r.add), f(r.add_s));
            }
        }
        s
    }
}

/// Predictions over the given clips of the selected videos.
pub fn predict_videos(
    predictor: &Predictor,
    dataset: &Dataset,
    videos: &[usize],
    boxes: &BoxSource,
    clips_of: impl Fn(usize) -> Vec<ClipSpec>,
) -> CliResult<Vec<(String, ClipSpec, Vec<Vec<ObjectPrediction>>, Vec<FrameRecord>)>> {
    let mut out = Vec::new();
    for &v in videos {
        let frames = dataset.load_video(v)?;
        let name = dataset.videos[v].id.clone();
        let specs = clips_of(frames.len());
        let mut clip_frames = Vec::with_capacity(specs.len());
        let mut clip_boxes = Vec::with_capacity(specs.len());
        for spec in &specs {
            let fr: Vec<FrameRecord> = spec.indices().into_iter().map(|i| frames[i].clone()).collect();
            let bx = fr.iter().map(|f| boxes.boxes(&name, f, dataset)).collect::<CliResult<Vec<_>>>()?;
            clip_frames.push(fr);
            clip_boxes.push(bx);
        }
        let inputs: Vec<ClipInput<'_>> = clip_frames
            .iter()
            .zip(&clip_boxes)
            .map(|(f, b)| ClipInput { frames: f, boxes: b })
            .collect();
        // Clips of one video are independent, so they run as one batch.
        let preds = if inputs.is_empty() { vec![] } else { predictor.predict(&inputs)? };
        for ((spec, p), fr) in specs.into_iter().zip(preds).zip(clip_frames) {
            out.push((name.clone(), spec, p, fr));
        }
    }
    Ok(out)
}

/// Scorable records from per-frame predictions; objects without a ground
/// truth pose in that frame are skipped.
pub fn to_records(video: &str, frames: &[FrameRecord], preds: &[Vec<ObjectPrediction>]) -> CliResult<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (f, ps) in frames.iter().zip(preds) {
        for p in ps {
            let Some(gt) = f.object(&p.object) else { continue };
            let finite = p.pose.translation.iter().all(|x| x.is_finite())
                && p.pose.rotation.to_array().iter().all(|x| x.is_finite());
            if !finite {
                return Err(CliError::Numerical(format!(
                    "non-finite pose for `{}` in {video} frame {}",
                    p.object, f.index
                )));
            }
            out.push(PredictionRecord {
                video: video.to_string(),
                frame: f.index,
                object: p.object.clone(),
                pred: p.pose,
                gt: gt.pose,
            });
        }
    }
    Ok(out)
}

pub fn cmd_eval(_cli: &Cli, args: &EvalArgs) -> CliResult<ReportTable> {
    if args.clip_len == 0 {
        return Err(CliError::Usage("--clip-len must be positive".into()));
    }
    let dataset = open_dataset(&args.data)?;
    let predictor = Predictor::load(&args.checkpoint)?;
    let boxes = BoxSource::parse(&args.boxes, args.dilate, &dataset)?;
    let videos = select_videos(&dataset, &args.split)?;
    let clip_len = args.clip_len;
    let runs = predict_videos(&predictor, &dataset, &videos, &boxes, |n| make_eval_clips(n, clip_len))?;
    let mut records = Vec::new();
    for (video, _, preds, frames) in &runs {
        records.extend(to_records(video, frames, preds)?);
    }
    if records.is_empty() {
        return Err(CliError::Data("no predictions to score".into()));
    }
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let pred_path = args.out.join("predictions.jsonl");
    let file = fs::File::create(&pred_path).map_err(io_err(&pred_path))?;
    write_predictions(std::io::BufWriter::new(file), &records).map_err(io_err(&pred_path))?;

    let report = evaluate_dataset(&records, &dataset.registry, &EvalConfig::default())?;
    let mut table = ReportTable::from_report(
        &report,
        ReportMeta {
            checkpoint: predictor.id(),
            dataset: dataset_id(&dataset),
            box_source: boxes.name().into(),
            dilate: args.dilate,
            split: args.split.clone(),
            clip_len,
        },
    );
    if let Some(reference) = &args.compare {
        let other: ReportTable = crate::read_structured(reference)?;
        let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
        table.deltas = Some(
            table
                .rows
                .iter()
                .filter_map(|r| {
                    other.rows.iter().find(|o| o.id == r.id).map(|o| RowDelta {
                        id: r.id.clone(),
                        add: diff(r.add, o.add),
                        add_s: diff(r.add_s, o.add_s),
                    })
                })
                .collect(),
        );
    }
    write_json(&args.out.join("report.json"), &table)?;
    let text = table.to_text();
    fs::write(args.out.join("report.txt"), &text).map_err(io_err(&args.out))?;
    print!("{text}");
    Ok(table)
}

#[derive(Debug, Args)]
pub struct KeyframeArgs {
    #[arg(long)]
    pub checkpoint: String,
    #[arg(long)]
    pub data: PathBuf,
    /// 0-based clip positions to score.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 5, 10, 15, 19])]
    pub positions: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub clip_len: usize,
    /// Frame step inside a clip.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value = "all")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// AUCs in percent for the predictions at one clip position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub position: usize,
    pub count: usize,
    pub add: Option<f64>,
    pub add_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeReport {
    pub checkpoint: String,
    pub dataset: String,
    pub clip_len: usize,
    pub stride: usize,
    pub clips: usize,
    pub positions: Vec<PositionRow>,
    /// The first frame of every clip evaluated on its own.
    pub single_frame: PositionRow,
}

fn score_position(position: usize, records: &[PredictionRecord], dataset: &Dataset) -> CliResult<PositionRow> {
    if records.is_empty() {
        return Ok(PositionRow { position, count: 0, add: None, add_s: None });
    }
    let r = evaluate_dataset(records, &dataset.registry, &EvalConfig::default())?;
    Ok(PositionRow {
        position,
        count: r.all.count,
        add: r.all.add_auc.map(|x| 100.0 * x),
        add_s: r.all.add_s_auc.map(|x| 100.0 * x),
    })
}

pub fn cmd_keyframe(_cli: &Cli, args: &KeyframeArgs) -> CliResult<KeyframeReport> {
    if args.clip_len == 0 || args.stride == 0 {
        return Err(CliError::Usage("--clip-len and --stride must be positive".into()));
    }
    if let Some(p) = args.positions.iter().find(|&&p| p >= args.clip_len) {
        return Err(CliError::Usage(format!("position {p} is outside clips of {} frames", args.clip_len)));
    }
    let dataset = open_dataset(&args.data)?;
    let predictor = Predictor::load(&args.checkpoint)?;
    let boxes = BoxSource::Gt { dilate: 1.0 };
    let videos = select_videos(&dataset, &args.split)?;
    let (len, stride) = (args.clip_len, args.stride);
    let full = |n: usize| -> Vec<ClipSpec> {
        make_clips(n, len, stride).into_iter().filter(|c| c.len == len).collect()
    };
    let runs = predict_videos(&predictor, &dataset, &videos, &boxes, full)?;
    if runs.is_empty() {
        return Err(CliError::Data(format!("no video has {} usable frames", (len - 1) * stride + 1)));
    }
    let mut positions = Vec::new();
    for &p in &args.positions {
        let mut records = Vec::new();
        for (video, _, preds, frames) in &runs {
            records.extend(to_records(video, &frames[p..=p], &preds[p..=p])?);
        }
        positions.push(score_position(p, &records, &dataset)?);
    }
    let single = predict_videos(&predictor, &dataset, &videos, &boxes, |n| {
        full(n).into_iter().map(|c| ClipSpec { len: 1, ..c }).collect()
    })?;
    let mut records = Vec::new();
    for (video, _, preds, frames) in &single {
        records.extend(to_records(video, frames, preds)?);
    }
    let report = KeyframeReport {
        checkpoint: predictor.id(),
        dataset: dataset_id(&dataset),
        clip_len: len,
        stride,
        clips: runs.len(),
        positions,
        single_frame: score_position(0, &records, &dataset)?,
    };
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    let f = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.2}"));
    println!("{:>8}  {:>6}  {:>7}  {:>7}", "position", "count", "ADD", "ADD-S");
    for r in &report.positions {
        println!("{:>8}  {:>6}  {:>7}  {:>7}", r.position, r.count, f(r.add), f(r.add_s));
    }
    let s = &report.single_frame;
    println!("{:>8}  {:>6}  {:>7}  {:>7}", "single", s.count, f(s.add), f(s.add_s));
    Ok(report)
}
