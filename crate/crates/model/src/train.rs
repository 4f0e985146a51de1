//! Learning-rate schedule, batch loss with gradient injection, the epoch
//! loop, validation, metrics log and resume.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use videopose_core::data::{
    augment_bbox, augment_frame, make_eval_clips, sample_train_clip, AugmentConfig, Dataset, FrameRecord,
};
use videopose_core::geometry::Quaternion;
use videopose_core::losses::{
    frame_loss_with_grad, FrameLossInput, LossBreakdown, LossOptions, LossTerms, LossWeights, ObjectLossInput,
};
use videopose_core::metrics::{evaluate_dataset, EvalConfig, PredictionRecord};
use videopose_core::objects::ObjectRegistry;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ModelConfig, TemporalVariant, TzSource, WarpMode};
use crate::infer::{gt_boxes, host_tensor, predict_clips, rollout, BoxInput, ClipInput};
use crate::network::{lift_center, Network};
use crate::optim::{Adam, AdamConfig};
use crate::ModelError;

/// Architecture presets selectable from a training configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Standard,
    Toy,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub lr_floor: f64,
    pub epochs: usize,
    /// Clips per optimizer step.
    pub batch_clips: usize,
    /// Training clips drawn from each training video per epoch.
    pub clips_per_video: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub double_cover_abs: bool,
    pub augment: AugmentConfig,
    pub temporal: TemporalVariant,
    pub warp: WarpMode,
    pub tz_source: TzSource,
    pub preset: ModelPreset,
    /// Model points used by the pose loss.
    pub loss_points: usize,
    /// Trailing fraction of videos held out for validation.
    pub val_fraction: f64,
    pub val_clip_len: usize,
    pub clip_norm: Option<f64>,
    /// Per-epoch checkpoints kept on disk (older ones are removed).
    pub keep_checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            weight_decay: 1e-5,
            lr_decay: 0.8,
            decay_every: 5,
            lr_floor: 1e-6,
            epochs: 100,
            batch_clips: 4,
            clips_per_video: 1,
            seed: 0,
            loss_weights: LossWeights::default(),
            double_cover_abs: false,
            augment: AugmentConfig::default(),
            temporal: TemporalVariant::BaselineRnn,
            warp: WarpMode::Geometric,
            tz_source: TzSource::Regressed,
            preset: ModelPreset::Desk,
            loss_points: videopose_core::objects::DEFAULT_LOSS_POINTS,
            val_fraction: 0.2,
            val_clip_len: 10,
            clip_norm: Some(10.0),
            keep_checkpoints: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.base_lr) {
            return bad("need 0 < lr_floor <= base_lr");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must lie in (0, 1)");
        }
        if self.decay_every == 0 || self.batch_clips == 0 || self.clips_per_video == 0 {
            return bad("decay_every, batch_clips and clips_per_video must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.loss_points == 0 || self.val_clip_len == 0 {
            return bad("loss_points and val_clip_len must be positive");
        }
        Ok(())
    }

    /// Network configuration for `num_classes` objects.
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let base = match self.preset {
            ModelPreset::Standard => ModelConfig::standard(num_classes),
            ModelPreset::Toy => ModelConfig::toy(num_classes),
            ModelPreset::Desk => ModelConfig::desk(num_classes),
        };
        ModelConfig {
            temporal: self.temporal,
            warp: self.warp,
            tz_source: self.tz_source,
            ..base
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// `max(base_lr * decay^(epoch / every), floor)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = (epoch / cfg.decay_every.max(1)) as i32;
    (cfg.base_lr * cfg.lr_decay.powi(k)).max(cfg.lr_floor)
}

/// Generator for everything random inside one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Videos used for training and for validation.
pub fn split_videos(count: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut val = (count as f64 * val_fraction).ceil() as usize;
    if val >= count {
        val = count.saturating_sub(1);
    }
    let cut = count - val;
    ((0..cut).collect(), (cut..count).collect())
}

/// Scalar loss of a batch together with the tensor whose gradient equals the
/// gradient of that loss.
#[derive(Debug)]
pub struct BatchLoss {
    /// Mean over all frames of all clips.
    pub breakdown: LossBreakdown,
    pub surrogate: Tensor,
    pub frames: usize,
}

/// Runs the clips and evaluates the frame losses on the host in `f64`. Their
/// gradients w.r.t. the network outputs are attached through
/// `sum(output * grad)`, so one backward pass yields the loss gradient.
pub fn batch_loss(
    net: &Network,
    clips: &[ClipInput<'_>],
    registry: &ObjectRegistry,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<BatchLoss, ModelError> {
    let steps = rollout(net, clips)?;
    let frames: usize = clips.iter().map(|c| c.frames.len()).sum();
    let scale = 1.0 / frames.max(1) as f64;
    let mut terms = LossTerms::default();
    let mut surrogate: Option<Tensor> = None;
    let mut add = |t: Tensor| -> Result<(), ModelError> {
        surrogate = Some(match surrogate.take() {
            Some(s) => (s + t)?,
            None => t,
        });
        Ok(())
    };

    for step in &steps {
        let f = &step.features;
        let (b, c, h, w) = f.logits.dims4()?;
        let depth: Vec<f64> = f.depth.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let logits: Vec<f64> = f.logits.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let n_q = step.queries.len();
        let (dc, tz, qs) = if n_q > 0 {
            (
                step.heads.delta_c.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?,
                step.heads.tz.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?,
                step.heads.quat.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?,
            )
        } else {
            (vec![], vec![], vec![])
        };
        let mut g_depth = Vec::with_capacity(b * h * w);
        let mut g_logits = Vec::with_capacity(b * c * h * w);
        let mut g_dc = vec![0.0; n_q * 2];
        let mut g_tz = vec![0.0; n_q];
        let mut g_q = vec![0.0; n_q * 4];

        for (image, &clip) in step.clips.iter().enumerate() {
            let frame = &clips[clip].frames[step.t];
            let boxes = &clips[clip].boxes[step.t];
            if frame.height() != h || frame.width() != w {
                return Err(ModelError::Shape("frame size changed inside a batch".into()));
            }
            let dp = Array2::from_shape_vec((h, w), depth[image * h * w..(image + 1) * h * w].to_vec())
                .map_err(|e| ModelError::Shape(e.to_string()))?;
            let lg = ArrayView3::from_shape((c, h, w), &logits[image * c * h * w..(image + 1) * c * h * w])
                .map_err(|e| ModelError::Shape(e.to_string()))?
                .permuted_axes([1, 2, 0]);
            let depth_gt = frame.depth.mapv(f64::from);
            let mask = frame.depth.mapv(|d| d > 0.0);

            let qidx: Vec<usize> = (0..n_q).filter(|&i| step.queries[i].image == image).collect();
            let mut objects = Vec::with_capacity(qidx.len());
            let mut lifted = Vec::with_capacity(qidx.len());
            for (bi, &qi) in qidx.iter().enumerate() {
                let bx: &BoxInput = &boxes[bi];
                let ann = frame
                    .object(&bx.object)
                    .ok_or_else(|| ModelError::Config(format!("no ground truth for `{}`", bx.object)))?;
                let model = registry
                    .by_index(bx.class)
                    .ok_or(ModelError::ClassOutOfRange { class: bx.class, classes: registry.len() })?;
                let k = &frame.intrinsics;
                let t_pred = lift_center(&bx.bbox, (dc[qi][0], dc[qi][1]), tz[qi][0], k);
                lifted.push((qi, bx.bbox.center(), tz[qi][0], dc[qi].clone()));
                objects.push(ObjectLossInput {
                    model,
                    q_pred: Quaternion::new(qs[qi][0], qs[qi][1], qs[qi][2], qs[qi][3]),
                    t_pred,
                    q_gt: ann.pose.rotation,
                    t_gt: ann.pose.translation,
                });
            }
            let input = FrameLossInput {
                depth_pred: dp.view(),
                depth_gt: depth_gt.view(),
                depth_mask: mask.view(),
                logits: lg,
                labels: frame.labels.view(),
                objects,
            };
            let g = frame_loss_with_grad(&input, weights, opts)?;
            terms.add_assign_scaled(&g.breakdown.terms(), scale);
            g_depth.extend(g.d_depth.iter().map(|v| v * scale));
            let dl: Array3<f64> = g.d_logits.permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
            g_logits.extend(dl.iter().map(|v| v * scale));

            let k = &frame.intrinsics;
            for ((qi, (cx, cy), z, d), (dq, dt)) in lifted.into_iter().zip(&g.d_objects) {
                g_dc[qi * 2] = scale * dt.x * z / k.fx;
                g_dc[qi * 2 + 1] = scale * dt.y * z / k.fy;
                g_tz[qi] = scale
                    * (dt.x * (cx + d[0] - k.px) / k.fx + dt.y * (cy + d[1] - k.py) / k.fy + dt.z);
                for j in 0..4 {
                    g_q[qi * 4 + j] = scale * dq[j];
                }
            }
        }

        let dot = |out: &Tensor, g: Vec<f64>| -> Result<Tensor, ModelError> {
            let g = host_tensor(net, g, out.dims())?;
            Ok((out * g)?.sum_all()?)
        };
        add(dot(&f.depth, g_depth)?)?;
        add(dot(&f.logits, g_logits)?)?;
        if n_q > 0 {
            add(dot(&step.heads.delta_c, g_dc)?)?;
            add(dot(&step.heads.tz, g_tz)?)?;
            add(dot(&step.heads.quat, g_q)?)?;
        }
    }
    let surrogate = surrogate.ok_or_else(|| ModelError::Shape("empty batch".into()))?;
    Ok(BatchLoss {
        breakdown: videopose_core::losses::total_loss(&terms, weights),
        surrogate,
        frames,
    })
}

/// Owned training clip after augmentation.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub frames: Vec<FrameRecord>,
    pub boxes: Vec<Vec<BoxInput>>,
}

impl PreparedClip {
    pub fn input(&self) -> ClipInput<'_> {
        ClipInput {
            frames: &self.frames,
            boxes: &self.boxes,
        }
    }
}

/// Samples and augments one training clip of a preloaded video.
pub fn prepare_train_clip(
    video: &[FrameRecord],
    registry: &ObjectRegistry,
    augment: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedClip, ModelError> {
    let spec = sample_train_clip(video.len(), rng)?;
    let mut frames = Vec::with_capacity(spec.len);
    let mut boxes = Vec::with_capacity(spec.len);
    for i in spec.indices() {
        let frame = augment_frame(&video[i], augment, rng);
        let mut b = gt_boxes(&frame, registry)?;
        for bx in &mut b {
            bx.bbox = augment_bbox(&bx.bbox, augment, frame.width(), frame.height(), rng);
        }
        frames.push(frame);
        boxes.push(b);
    }
    Ok(PreparedClip { frames, boxes })
}

/// Evaluation clips of preloaded videos with annotation boxes.
pub fn eval_clips(
    videos: &[(String, Vec<FrameRecord>)],
    registry: &ObjectRegistry,
    clip_len: usize,
) -> Result<Vec<(String, PreparedClip)>, ModelError> {
    let mut out = Vec::new();
    for (name, frames) in videos {
        for spec in make_eval_clips(frames.len(), clip_len) {
            let fr: Vec<FrameRecord> = spec.indices().into_iter().map(|i| frames[i].clone()).collect();
            let boxes = fr.iter().map(|f| gt_boxes(f, registry)).collect::<Result<_, _>>()?;
            out.push((name.clone(), PreparedClip { frames: fr, boxes }));
        }
    }
    Ok(out)
}

/// Predictions over prepared clips, in clip, frame and box order.
pub fn predict_records(
    net: &Network,
    clips: &[(String, PreparedClip)],
    batch: usize,
) -> Result<Vec<PredictionRecord>, ModelError> {
    let mut records = Vec::new();
    for chunk in clips.chunks(batch.max(1)) {
        let inputs: Vec<ClipInput<'_>> = chunk.iter().map(|(_, c)| c.input()).collect();
        let preds = predict_clips(net, &inputs)?;
        for ((video, clip), per_clip) in chunk.iter().zip(preds) {
            for (frame, per_frame) in clip.frames.iter().zip(per_clip) {
                for p in per_frame {
                    let gt = frame.object(&p.object).map(|o| o.pose).ok_or_else(|| {
                        ModelError::Config(format!("no ground truth for `{}`", p.object))
                    })?;
                    records.push(PredictionRecord {
                        video: video.clone(),
                        frame: frame.index,
                        object: p.object,
                        pred: p.pose,
                        gt,
                    });
                }
            }
        }
    }
    Ok(records)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub batches: usize,
    pub val_add_auc: Option<f64>,
    pub val_add_s_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochRecord>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
struct Progress {
    best_score: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Trains from scratch, writing checkpoints and `metrics.jsonl` to `out_dir`.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let model = cfg.model_config(dataset.registry.len());
    let net = Network::new(model, cfg.seed, DType::F32)?;
    let opt = Adam::new(cfg.adam(), &net.params);
    let metrics = out_dir.join(METRICS_FILE);
    fs::create_dir_all(out_dir).map_err(|source| ModelError::Io { path: out_dir.to_path_buf(), source })?;
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|source| ModelError::Io { path: metrics.clone(), source })?;
    }
    run(cfg, dataset, out_dir, net, opt, 0, Progress::default())
}

/// Continues a run from a checkpoint written by [`train`].
pub fn resume(checkpoint: &Path, cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint, DType::F32)?;
    let refuse = |msg: String| ModelError::Checkpoint { path: checkpoint.to_path_buf(), msg };
    let hash = dataset.registry.content_hash();
    if ck.header.config.num_classes != dataset.registry.len() {
        return Err(refuse(format!(
            "checkpoint has {} classes, dataset registry has {}",
            ck.header.config.num_classes,
            dataset.registry.len()
        )));
    }
    if ck.header.registry_hash != hash {
        return Err(refuse(format!(
            "registry hash {} does not match the dataset's {hash}",
            ck.header.registry_hash
        )));
    }
    if ck.header.config != cfg.model_config(dataset.registry.len()) {
        return Err(refuse("model configuration differs from the training configuration".into()));
    }
    let progress: Progress = ck.header.extra.get("progress").cloned().map(serde_json::from_value).transpose()
        .map_err(|e| refuse(e.to_string()))?
        .unwrap_or_default();
    let net = ck.network;
    let opt = ck.optimizer.unwrap_or_else(|| Adam::new(cfg.adam(), &net.params));
    run(cfg, dataset, out_dir, net, opt, ck.header.epoch, progress)
}

fn load_videos(dataset: &Dataset, ids: &[usize]) -> Result<Vec<(String, Vec<FrameRecord>)>, ModelError> {
    ids.iter()
        .map(|&v| Ok((dataset.videos[v].id.clone(), dataset.load_video(v)?)))
        .collect()
}

/// Pooled validation AUCs.
pub fn validate_network(
    net: &Network,
    clips: &[(String, PreparedClip)],
    registry: &ObjectRegistry,
    batch: usize,
) -> Result<(Option<f64>, Option<f64>), ModelError> {
    if clips.is_empty() {
        return Ok((None, None));
    }
    let records = predict_records(net, clips, batch)?;
    if records.is_empty() {
        return Ok((None, None));
    }
    let report = evaluate_dataset(&records, registry, &EvalConfig::default())?;
    Ok((report.all.add_auc, report.all.add_s_auc))
}

fn run(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    net: Network,
    mut opt: Adam,
    start_epoch: usize,
    mut progress: Progress,
) -> Result<TrainOutcome, ModelError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ModelError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let registry = &dataset.registry;
    let loss_registry = registry.subsampled(cfg.loss_points, cfg.seed)?;
    let hash = registry.content_hash();
    let (train_ids, val_ids) = split_videos(dataset.videos.len(), cfg.val_fraction);
    if train_ids.is_empty() {
        return Err(ModelError::Config("no training videos".into()));
    }
    let train_videos = load_videos(dataset, &train_ids)?;
    let val_clips = eval_clips(&load_videos(dataset, &val_ids)?, registry, cfg.val_clip_len)?;
    let weights = cfg.loss_weights;
    let opts = LossOptions { double_cover_abs: cfg.double_cover_abs };
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut history = Vec::new();
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut last_path = best_path.clone();

    for epoch in start_epoch..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_videos.len())
            .flat_map(|v| std::iter::repeat_n(v, cfg.clips_per_video))
            .collect();
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let mut frames = 0usize;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_clips).enumerate() {
            let clips = chunk
                .iter()
                .map(|&v| prepare_train_clip(&train_videos[v].1, registry, &cfg.augment, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let inputs: Vec<ClipInput<'_>> = clips.iter().map(|c| c.input()).collect();
            let loss = batch_loss(&net, &inputs, &loss_registry, &weights, &opts)?;
            if !loss.breakdown.total.is_finite() {
                log::error!("non-finite loss at epoch {epoch}, batch {bi}");
                return Err(ModelError::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = loss.surrogate.backward()?;
            opt.step(&net.params, &grads, lr)
                .map_err(|_| ModelError::NonFiniteLoss { epoch, batch: bi })?;
            sum.add_assign_scaled(&loss.breakdown.terms(), loss.frames as f64);
            frames += loss.frames;
            batches += 1;
        }
        let mut mean = LossTerms::default();
        mean.add_assign_scaled(&sum, 1.0 / frames.max(1) as f64);
        let loss = videopose_core::losses::total_loss(&mean, &weights);
        let (val_add, val_add_s) = validate_network(&net, &val_clips, registry, cfg.batch_clips)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss,
            batches,
            val_add_auc: val_add,
            val_add_s_auc: val_add_s,
        };
        log::info!(
            "epoch {} lr {:.2e} loss {:.4} val ADD-S {}",
            record.epoch,
            lr,
            loss.total,
            val_add_s.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
        );
        let mut f = OpenOptions::new().create(true).append(true).open(&metrics_path).map_err(io(&metrics_path))?;
        let line = serde_json::to_string(&record).map_err(|e| ModelError::Config(e.to_string()))?;
        writeln!(f, "{line}").map_err(io(&metrics_path))?;

        // Without a validation split the training loss ranks epochs instead.
        let score = val_add_s.unwrap_or(-loss.total);
        let improved = progress.best_score.is_none_or(|b| score > b);
        if improved {
            progress.best_score = Some(score);
        }
        let extra = serde_json::json!({
            "train": cfg,
            "progress": progress,
        });
        last_path = out_dir.join(epoch_checkpoint_name(epoch + 1));
        save_checkpoint(&last_path, &net, Some(&opt), &hash, epoch + 1, extra.clone())?;
        if improved {
            save_checkpoint(&best_path, &net, None, &hash, epoch + 1, extra)?;
        }
        if cfg.keep_checkpoints > 0 && epoch + 1 > cfg.keep_checkpoints {
            let old = out_dir.join(epoch_checkpoint_name(epoch + 1 - cfg.keep_checkpoints));
            if old.exists() {
                fs::remove_file(&old).map_err(io(&old))?;
            }
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        network: net,
        history,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| ModelError::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })
        })
        .collect()
}
