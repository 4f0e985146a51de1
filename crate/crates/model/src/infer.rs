//! Clip rollout: runs the network frame by frame over a batch of clips,
//! threading per-object temporal state.

use candle_core::Tensor;
use videopose_core::data::{BBox, FrameRecord};
use videopose_core::geometry::Pose;
use videopose_core::objects::ObjectRegistry;

use crate::network::{FrameFeatures, ImageCamera, Network, ObjectQuery, PoseHeadOutput, Tracker};
use crate::ModelError;

/// Track keys are `clip * TRACK_STRIDE + class`.
const TRACK_STRIDE: usize = 1 << 16;

/// A box to regress in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxInput {
    pub object: String,
    pub class: usize,
    pub bbox: BBox,
}

/// One clip to roll out: frames in order and the boxes of each frame.
#[derive(Debug, Clone, Copy)]
pub struct ClipInput<'a> {
    pub frames: &'a [FrameRecord],
    pub boxes: &'a [Vec<BoxInput>],
}

/// Network outputs at one time step over the clips still running.
#[derive(Debug, Clone)]
pub struct FrameStep {
    /// Clip index of each image in the batch.
    pub clips: Vec<usize>,
    /// Time index inside the clips.
    pub t: usize,
    pub cameras: Vec<ImageCamera>,
    pub queries: Vec<ObjectQuery>,
    pub features: FrameFeatures,
    pub heads: PoseHeadOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPrediction {
    pub object: String,
    pub class: usize,
    pub bbox: BBox,
    pub pose: Pose,
}

/// Boxes of every visible object, taken from the annotations.
pub fn gt_boxes(frame: &FrameRecord, registry: &ObjectRegistry) -> Result<Vec<BoxInput>, ModelError> {
    let mut out = Vec::new();
    for o in &frame.objects {
        let class = registry
            .class_index(&o.id)
            .ok_or_else(|| ModelError::Config(format!("object `{}` is not in the registry", o.id)))?;
        if o.visible_fraction > 0.0 && o.bbox.width() > 0.0 && o.bbox.height() > 0.0 {
            out.push(BoxInput {
                object: o.id.clone(),
                class,
                bbox: o.bbox,
            });
        }
    }
    Ok(out)
}

/// Runs all clips in lockstep. Clips may differ in length; finished clips
/// simply drop out of later batches.
pub fn rollout(net: &Network, clips: &[ClipInput<'_>]) -> Result<Vec<FrameStep>, ModelError> {
    for (i, c) in clips.iter().enumerate() {
        if c.frames.is_empty() || c.frames.len() != c.boxes.len() {
            return Err(ModelError::Shape(format!(
                "clip {i}: {} frames with {} box lists",
                c.frames.len(),
                c.boxes.len()
            )));
        }
    }
    let steps = clips.iter().map(|c| c.frames.len()).max().unwrap_or(0);
    let mut tracker = Tracker::new();
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let active: Vec<usize> = (0..clips.len()).filter(|&c| clips[c].frames.len() > t).collect();
        let images: Vec<_> = active.iter().map(|&c| &clips[c].frames[t].rgb).collect();
        let cameras: Vec<ImageCamera> = active
            .iter()
            .map(|&c| ImageCamera {
                extrinsic: clips[c].frames[t].extrinsic,
                intrinsics: clips[c].frames[t].intrinsics,
            })
            .collect();
        let mut queries = Vec::new();
        for (image, &c) in active.iter().enumerate() {
            for b in &clips[c].boxes[t] {
                queries.push(ObjectQuery {
                    image,
                    track: c * TRACK_STRIDE + b.class,
                    class: b.class,
                    bbox: b.bbox,
                });
            }
        }
        let images = net.image_tensor(&images)?;
        let step = net.step(&images, &cameras, &queries, &mut tracker)?;
        out.push(FrameStep {
            clips: active,
            t,
            cameras,
            queries,
            features: step.features,
            heads: step.heads,
        });
    }
    Ok(out)
}

/// Poses for every box of every frame: `[clip][frame][box]`.
pub fn predict_clips(net: &Network, clips: &[ClipInput<'_>]) -> Result<Vec<Vec<Vec<ObjectPrediction>>>, ModelError> {
    let mut out: Vec<Vec<Vec<ObjectPrediction>>> =
        clips.iter().map(|c| vec![Vec::new(); c.frames.len()]).collect();
    for step in rollout(net, clips)? {
        if step.queries.is_empty() {
            continue;
        }
        let poses = net.assemble_poses(&step.heads, &step.features, &step.cameras, &step.queries)?;
        // Queries are grouped by image in clip order, and boxes keep their input order.
        let mut cursor = vec![0usize; clips.len()];
        for (q, pose) in step.queries.iter().zip(poses) {
            let c = step.clips[q.image];
            let b = &clips[c].boxes[step.t][cursor[c]];
            cursor[c] += 1;
            out[c][step.t].push(ObjectPrediction {
                object: b.object.clone(),
                class: b.class,
                bbox: b.bbox,
                pose,
            });
        }
    }
    Ok(out)
}

/// Raw quaternion outputs of a rollout, one `[w, x, y, z]` per query.
pub fn raw_quaternions(steps: &[FrameStep]) -> Result<Vec<[f64; 4]>, ModelError> {
    let mut out = Vec::new();
    for s in steps {
        if s.queries.is_empty() {
            continue;
        }
        let q: Vec<Vec<f64>> = s.heads.quat.to_dtype(candle_core::DType::F64)?.to_vec2()?;
        out.extend(q.into_iter().map(|r| [r[0], r[1], r[2], r[3]]));
    }
    Ok(out)
}

/// Stacks per-image host arrays into one tensor on the network's device.
pub(crate) fn host_tensor(net: &Network, data: Vec<f64>, shape: &[usize]) -> Result<Tensor, ModelError> {
    Ok(Tensor::from_vec(data, shape, net.device())?.to_dtype(net.dtype())?)
}
