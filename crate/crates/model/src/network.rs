//! The pose network: frame encoder with depth/label decoder, ROI fusion,
//! temporal block and the two disconnected pose regressors.

use std::collections::HashMap;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use nalgebra::Matrix4;
use ndarray::Array3;
use videopose_core::data::BBox;
use videopose_core::geometry::{
    recover_translation, relative_transform, CameraExtrinsic, CameraIntrinsics, Pose, Quaternion,
};

use crate::config::{ModelConfig, TemporalVariant, TzSource, WarpMode};
use crate::params::{init_rng, Init, ParamStore};
use crate::sampling::{conjugation_operator, geometric_warp_sampler, roi_align_sampler, Sampler};
use crate::ModelError;

/// Bilinear samples per ROI bin side.
const ROI_SAMPLING: usize = 2;

/// Per-frame outputs of the encoder and decoder, batched over images.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    /// Final backbone map, `B x C x h x w`.
    pub backbone: Tensor,
    /// Penultimate decoder map, `B x D x h2 x w2`.
    pub decoder: Tensor,
    /// Depth in meters, `B x H x W`.
    pub depth: Tensor,
    /// Label logits, `B x (n + 1) x H x W`.
    pub logits: Tensor,
}

/// Recurrent memory of one tracked object.
#[derive(Debug, Clone)]
pub struct TemporalState {
    /// `M x k x k`.
    pub memory: Tensor,
    pub extrinsic: CameraExtrinsic,
    /// ROI the memory grid was laid over.
    pub bbox: BBox,
}

/// Class-selected regressor outputs for `N` queries.
#[derive(Debug, Clone)]
pub struct PoseHeadOutput {
    /// Center offsets in pixels, `N x 2`.
    pub delta_c: Tensor,
    /// Depth in meters, `N x 1`.
    pub tz: Tensor,
    /// Raw quaternion `(w, x, y, z)`, `N x 4`.
    pub quat: Tensor,
}

/// Full-width head outputs before class selection: `(N x 2n, N x n, N x 4n)`.
#[derive(Debug, Clone)]
pub struct RawHeads {
    pub delta_c: Tensor,
    pub tz: Tensor,
    pub quat: Tensor,
}

/// One object to process in a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectQuery {
    /// Image index inside the batch.
    pub image: usize,
    /// Key threading the temporal state across frames.
    pub track: usize,
    pub class: usize,
    pub bbox: BBox,
}

/// Camera of one image in the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageCamera {
    pub extrinsic: CameraExtrinsic,
    pub intrinsics: CameraIntrinsics,
}

/// Temporal states keyed by track.
#[derive(Debug, Clone, Default)]
pub struct Tracker {
    states: HashMap<usize, TemporalState>,
}

impl Tracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, track: usize) -> Option<&TemporalState> {
        self.states.get(&track)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Everything one frame step produces.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub features: FrameFeatures,
    pub heads: PoseHeadOutput,
    /// Fused features fed to the regressors, `N x F x k x k`.
    pub fused: Tensor,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

fn he(fan_in: usize) -> Init {
    Init::Normal((2.0 / fan_in as f64).sqrt())
}

fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Nearest-neighbour upsampling by an integer factor, built from broadcasts
/// so its gradient accumulates correctly.
fn upsample(x: &Tensor, factor: usize) -> candle_core::Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))
}

impl Network {
    /// Builds the network with seeded weights.
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = init_rng(seed);
        let mut p = ParamStore::new(dtype, Device::Cpu);
        let n = cfg.num_classes;
        let (k, m, f) = (cfg.roi_size, cfg.memory_channels, cfg.fused_channels);
        let conv = |p: &mut ParamStore, rng: &mut _, name: &str, cin: usize, cout: usize, train: bool| {
            p.add(&format!("{name}.w"), &[cout, cin, 3, 3], he(cin * 9), train, rng)?;
            p.add(&format!("{name}.b"), &[cout], Init::Const(0.0), train, rng)
        };

        let mut cin = 3;
        for (i, &w) in cfg.encoder.widths.iter().enumerate() {
            let train = i >= cfg.encoder.frozen_stages;
            conv(&mut p, &mut rng, &format!("enc.{i}"), cin, w, train)?;
            cin = w;
        }
        let [d1, d2] = cfg.decoder_widths;
        conv(&mut p, &mut rng, "dec.0", cin, d1, true)?;
        conv(&mut p, &mut rng, "dec.1", d1, d2, true)?;
        p.add("dec.2.w", &[n + 2, d2, 3, 3], Init::Normal(0.1 / ((d2 * 9) as f64).sqrt()), true, &mut rng)?;
        let mut bias = vec![0.0; n + 2];
        bias[0] = cfg.depth_prior;
        p.add("dec.2.b", &[n + 2], Init::Values(bias), true, &mut rng)?;

        let c_roi = cfg.roi_channels();
        match cfg.temporal {
            TemporalVariant::BaselineRnn | TemporalVariant::None => {
                conv(&mut p, &mut rng, "tmp.0", m + c_roi, m + f, true)?;
                conv(&mut p, &mut rng, "tmp.1", m + f, m + f, true)?;
            }
            TemporalVariant::ConvGru => {
                conv(&mut p, &mut rng, "gru.gates", m + c_roi, 2 * m, true)?;
                conv(&mut p, &mut rng, "gru.cand", m + c_roi, m, true)?;
                conv(&mut p, &mut rng, "gru.out.0", m + c_roi, m + f, true)?;
                conv(&mut p, &mut rng, "gru.out.1", m + f, f, true)?;
            }
        }

        let flat = f * k * k;
        let hidden = cfg.hidden;
        let out_std = 0.1 / (hidden as f64).sqrt();
        p.add("head.t.fc.w", &[hidden, flat], he(flat), true, &mut rng)?;
        p.add("head.t.fc.b", &[hidden], Init::Const(0.0), true, &mut rng)?;
        p.add("head.t.c.w", &[2 * n, hidden], Init::Normal(out_std), true, &mut rng)?;
        p.add("head.t.c.b", &[2 * n], Init::Const(0.0), true, &mut rng)?;
        p.add("head.t.z.w", &[n, hidden], Init::Normal(out_std), true, &mut rng)?;
        p.add("head.t.z.b", &[n], Init::Const(cfg.depth_prior), true, &mut rng)?;
        p.add("head.r.fc.w", &[hidden, flat], he(flat), true, &mut rng)?;
        p.add("head.r.fc.b", &[hidden], Init::Const(0.0), true, &mut rng)?;
        p.add("head.r.q.w", &[4 * n, hidden], Init::Normal(out_std), true, &mut rng)?;
        let qb: Vec<f64> = (0..4 * n).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        p.add("head.r.q.b", &[4 * n], Init::Values(qb), true, &mut rng)?;

        Ok(Self { cfg, params: p })
    }

    /// Same configuration and weights in another precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self, ModelError> {
        Ok(Self {
            cfg: self.cfg.clone(),
            params: self.params.to_dtype(dtype)?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    fn conv(&self, x: &Tensor, name: &str, stride: usize) -> Result<Tensor, ModelError> {
        let w = self.params.get(&format!("{name}.w"))?;
        let b = self.params.get(&format!("{name}.b"))?;
        let y = x.conv2d(&w, 1, stride, 1, 1)?;
        Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
    }

    fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor, ModelError> {
        let w = self.params.get(&format!("{name}.w"))?;
        let b = self.params.get(&format!("{name}.b"))?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }

    /// Converts `H x W x 3` images into a `B x 3 x H x W` tensor.
    pub fn image_tensor(&self, images: &[&Array3<f32>]) -> Result<Tensor, ModelError> {
        let (h, w, _) = images
            .first()
            .ok_or_else(|| ModelError::Shape("no images".into()))?
            .dim();
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.dim() != (h, w, 3) {
                return Err(ModelError::Shape(format!("image {:?} vs {:?}", img.dim(), (h, w, 3))));
            }
            for c in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        data.push(img[[i, j, c]]);
                    }
                }
            }
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), self.device())?.to_dtype(self.dtype())?)
    }

    /// Backbone, depth map and label logits for a batch of images.
    pub fn encode_frame(&self, images: &Tensor) -> Result<FrameFeatures, ModelError> {
        let (_, c, h, w) = images.dims4()?;
        let stride = self.cfg.encoder.total_stride();
        if c != 3 || h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(ModelError::Shape(format!(
                "input {h}x{w}x{c} is not a 3-channel image divisible by stride {stride}"
            )));
        }
        let mut x = images.clone();
        for (i, &s) in self.cfg.encoder.strides.iter().enumerate() {
            x = self.conv(&x, &format!("enc.{i}"), s)?.relu()?;
        }
        let backbone = x;
        let d = self.conv(&backbone, "dec.0", 1)?.relu()?;
        let d = upsample(&d, stride / self.cfg.decoder_stride())?;
        let decoder = self.conv(&d, "dec.1", 1)?.relu()?;
        let out = self.conv(&upsample(&decoder, self.cfg.decoder_stride())?, "dec.2", 1)?;
        let n1 = self.cfg.num_classes + 1;
        let depth = out.narrow(1, 0, 1)?.squeeze(1)?;
        let logits = out.narrow(1, 1, n1)?;
        Ok(FrameFeatures {
            backbone,
            decoder,
            depth,
            logits,
        })
    }

    fn sampler_tensor(&self, s: &Sampler) -> Result<Tensor, ModelError> {
        Ok(Tensor::from_vec(s.dense_transposed(), (s.inputs, s.outputs), self.device())?
            .to_dtype(self.dtype())?)
    }

    fn roi_map(&self, map: &Tensor, image: usize, stride: usize, bbox: &BBox) -> Result<Tensor, ModelError> {
        let (_, c, h, w) = map.dims4()?;
        let k = self.cfg.roi_size;
        let s = roi_align_sampler(bbox, stride, h, w, k, ROI_SAMPLING)?;
        let flat = map.i(image)?.reshape((c, h * w))?;
        Ok(flat.matmul(&self.sampler_tensor(&s)?)?.reshape((1, c, k, k))?)
    }

    /// ROI Align over the concatenated backbone and penultimate decoder maps:
    /// `N x C' x k x k`, one row per box.
    pub fn roi_fuse(&self, feats: &FrameFeatures, boxes: &[(usize, BBox)]) -> Result<Tensor, ModelError> {
        let mut rows = Vec::with_capacity(boxes.len());
        for (image, bbox) in boxes {
            let a = self.roi_map(&feats.backbone, *image, self.cfg.encoder.total_stride(), bbox)?;
            let b = self.roi_map(&feats.decoder, *image, self.cfg.decoder_stride(), bbox)?;
            rows.push(Tensor::cat(&[a, b], 1)?);
        }
        if rows.is_empty() {
            return Err(ModelError::Shape("no boxes to fuse".into()));
        }
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Predicted depth sampled at the ROI cell centers, detached.
    pub fn depth_roi(&self, depth: &[f64], h: usize, w: usize, bbox: &BBox) -> Result<Vec<f64>, ModelError> {
        let k = self.cfg.roi_size;
        Ok(roi_align_sampler(bbox, 1, h, w, k, 1)?.apply(depth))
    }

    pub fn zero_memory(&self) -> Result<Tensor, ModelError> {
        let k = self.cfg.roi_size;
        Ok(Tensor::zeros((self.cfg.memory_channels, k, k), self.dtype(), self.device())?)
    }

    /// Carries a stored memory into the current frame's ROI grid.
    pub fn warp_previous_features(
        &self,
        state: &TemporalState,
        curr_extrinsic: &CameraExtrinsic,
        curr_box: &BBox,
        curr_depth_roi: &[f64],
        intrinsics: &CameraIntrinsics,
    ) -> Result<Tensor, ModelError> {
        let k = self.cfg.roi_size;
        let m = self.cfg.memory_channels;
        let mem = state.memory.reshape((m, k * k))?;
        let warped = match self.cfg.warp {
            WarpMode::Geometric => {
                let curr_to_prev: Matrix4<f64> = *relative_transform(curr_extrinsic, &state.extrinsic).matrix();
                let s = geometric_warp_sampler(&state.bbox, curr_box, k, curr_depth_roi, intrinsics, &curr_to_prev);
                mem.matmul(&self.sampler_tensor(&s)?)?
            }
            WarpMode::Conjugation => {
                let op = conjugation_operator(curr_extrinsic.matrix(), state.extrinsic.inverse().matrix());
                let op = Tensor::from_slice(&op, (1, 16, 16), self.device())?.to_dtype(self.dtype())?;
                op.broadcast_matmul(&mem.reshape((m / 16, 16, k * k))?)?
                    .reshape((m, k * k))?
            }
        };
        Ok(warped.reshape((m, k, k))?)
    }

    fn check_channels(&self, warped: &Tensor, z: &Tensor) -> Result<(), ModelError> {
        let (_, cm, _, _) = warped.dims4()?;
        let (_, cz, _, _) = z.dims4()?;
        if cm != self.cfg.memory_channels || cz != self.cfg.roi_channels() || warped.dim(0)? != z.dim(0)? {
            return Err(ModelError::Shape(format!(
                "temporal input channels ({cm}, {cz}) vs configured ({}, {})",
                self.cfg.memory_channels,
                self.cfg.roi_channels()
            )));
        }
        Ok(())
    }

    /// Two-convolution temporal encoder; returns `(memory, fused)` with
    /// `M` and `F` channels.
    pub fn temporal_step(&self, warped: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        self.check_channels(warped, z)?;
        let m = self.cfg.memory_channels;
        let x = Tensor::cat(&[warped, z], 1)?;
        let h = self.conv(&x, "tmp.0", 1)?.relu()?;
        let o = self.conv(&h, "tmp.1", 1)?;
        let memory = o.narrow(1, 0, m)?.tanh()?;
        let fused = o.narrow(1, m, self.cfg.fused_channels)?.relu()?;
        Ok((memory, fused))
    }

    /// Convolutional GRU over the memory, followed by the same two-layer
    /// output stack reading `[z, h']`.
    pub fn temporal_step_convgru(&self, warped: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        Ok(self.convgru_parts(warped, z)?.0)
    }

    /// GRU step plus the gate activations `N x 2M`.
    pub fn convgru_parts(&self, warped: &Tensor, z: &Tensor) -> Result<((Tensor, Tensor), Tensor), ModelError> {
        self.check_channels(warped, z)?;
        let m = self.cfg.memory_channels;
        let gates = sigmoid(&self.conv(&Tensor::cat(&[z, warped], 1)?, "gru.gates", 1)?)?;
        let reset = gates.narrow(1, 0, m)?;
        let update = gates.narrow(1, m, m)?;
        let cand = self
            .conv(&Tensor::cat(&[z, &(&reset * warped)?], 1)?, "gru.cand", 1)?
            .tanh()?;
        let memory = ((update.affine(-1.0, 1.0)? * warped)? + (&update * cand)?)?;
        let h = self.conv(&Tensor::cat(&[z, &memory], 1)?, "gru.out.0", 1)?.relu()?;
        let fused = self.conv(&h, "gru.out.1", 1)?.relu()?;
        Ok(((memory, fused), gates))
    }

    /// Temporal block of the configured variant.
    pub fn temporal(&self, warped: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        match self.cfg.temporal {
            TemporalVariant::BaselineRnn | TemporalVariant::None => self.temporal_step(warped, z),
            TemporalVariant::ConvGru => self.temporal_step_convgru(warped, z),
        }
    }

    /// Both regressor branches at full width.
    pub fn raw_heads(&self, fused: &Tensor) -> Result<RawHeads, ModelError> {
        let flat = fused.flatten_from(1)?;
        let t = self.linear(&flat, "head.t.fc")?.relu()?;
        let r = self.linear(&flat, "head.r.fc")?.relu()?;
        Ok(RawHeads {
            delta_c: self.linear(&t, "head.t.c")?,
            tz: self.linear(&t, "head.t.z")?,
            quat: self.linear(&r, "head.r.q")?,
        })
    }

    /// Regresses `(delta_c, tz, quat)` and keeps each query's class slice.
    pub fn regress_pose(&self, fused: &Tensor, classes: &[usize]) -> Result<PoseHeadOutput, ModelError> {
        let n = self.cfg.num_classes;
        if let Some(&c) = classes.iter().find(|&&c| c >= n) {
            return Err(ModelError::ClassOutOfRange { class: c, classes: n });
        }
        let rows = classes.len();
        if fused.dim(0)? != rows {
            return Err(ModelError::Shape(format!("{} fused rows for {rows} classes", fused.dim(0)?)));
        }
        let raw = self.raw_heads(fused)?;
        let mut onehot = vec![0.0f64; rows * n];
        for (r, &c) in classes.iter().enumerate() {
            onehot[r * n + c] = 1.0;
        }
        let onehot = Tensor::from_vec(onehot, (rows, n, 1), self.device())?.to_dtype(self.dtype())?;
        let pick = |t: &Tensor, width: usize| -> Result<Tensor, ModelError> {
            Ok(t.reshape((rows, n, width))?.broadcast_mul(&onehot)?.sum(1)?)
        };
        Ok(PoseHeadOutput {
            delta_c: pick(&raw.delta_c, 2)?,
            tz: pick(&raw.tz, 1)?,
            quat: pick(&raw.quat, 4)?,
        })
    }

    /// One frame for a batch of images: encode, fuse each query's ROI, warp
    /// its memory, run the temporal block and regress. Tracks absent from
    /// `queries` lose their state.
    pub fn step(
        &self,
        images: &Tensor,
        cameras: &[ImageCamera],
        queries: &[ObjectQuery],
        tracker: &mut Tracker,
    ) -> Result<StepOutput, ModelError> {
        let features = self.encode_frame(images)?;
        let (fused, heads) = self.step_objects(&features, cameras, queries, tracker)?;
        Ok(StepOutput { features, heads, fused })
    }

    /// The per-object part of [`Network::step`] given encoded features.
    pub fn step_objects(
        &self,
        features: &FrameFeatures,
        cameras: &[ImageCamera],
        queries: &[ObjectQuery],
        tracker: &mut Tracker,
    ) -> Result<(Tensor, PoseHeadOutput), ModelError> {
        if queries.is_empty() {
            tracker.states.clear();
            let k = self.cfg.roi_size;
            let empty = Tensor::zeros((0, self.cfg.fused_channels, k, k), self.dtype(), self.device())?;
            let z = |w: usize| Tensor::zeros((0, w), self.dtype(), self.device());
            return Ok((empty, PoseHeadOutput { delta_c: z(2)?, tz: z(1)?, quat: z(4)? }));
        }
        let boxes: Vec<(usize, BBox)> = queries.iter().map(|q| (q.image, q.bbox)).collect();
        let z = self.roi_fuse(features, &boxes)?;

        let temporal = self.cfg.temporal != TemporalVariant::None;
        let mut warped = Vec::with_capacity(queries.len());
        let depth_host: Option<(Vec<f64>, usize, usize)> = if temporal && !tracker.is_empty() {
            let (_, h, w) = features.depth.dims3()?;
            Some((features.depth.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?, h, w))
        } else {
            None
        };
        for q in queries {
            let state = if temporal { tracker.get(q.track) } else { None };
            let mem = match (state, &depth_host) {
                (Some(state), Some((depth, h, w))) => {
                    let plane = &depth[q.image * h * w..(q.image + 1) * h * w];
                    let droi = self.depth_roi(plane, *h, *w, &q.bbox)?;
                    let cam = &cameras[q.image];
                    self.warp_previous_features(state, &cam.extrinsic, &q.bbox, &droi, &cam.intrinsics)?
                }
                _ => self.zero_memory()?,
            };
            warped.push(mem.unsqueeze(0)?);
        }
        let warped = Tensor::cat(&warped, 0)?;
        let (memory, fused) = self.temporal(&warped, &z)?;

        let mut next = HashMap::with_capacity(queries.len());
        if temporal {
            for (i, q) in queries.iter().enumerate() {
                next.insert(
                    q.track,
                    TemporalState {
                        memory: memory.i(i)?,
                        extrinsic: cameras[q.image].extrinsic,
                        bbox: q.bbox,
                    },
                );
            }
        }
        tracker.states = next;

        let classes: Vec<usize> = queries.iter().map(|q| q.class).collect();
        let heads = self.regress_pose(&fused, &classes)?;
        Ok((fused, heads))
    }

    /// Turns head outputs into poses: the box center plus offset is lifted
    /// with the regressed (or depth-read) `Tz`.
    pub fn assemble_poses(
        &self,
        heads: &PoseHeadOutput,
        features: &FrameFeatures,
        cameras: &[ImageCamera],
        queries: &[ObjectQuery],
    ) -> Result<Vec<Pose>, ModelError> {
        let dc: Vec<Vec<f64>> = heads.delta_c.to_dtype(DType::F64)?.to_vec2()?;
        let tz: Vec<Vec<f64>> = heads.tz.to_dtype(DType::F64)?.to_vec2()?;
        let qs: Vec<Vec<f64>> = heads.quat.to_dtype(DType::F64)?.to_vec2()?;
        let depth = if self.cfg.tz_source == TzSource::DepthMedian {
            let (_, h, w) = features.depth.dims3()?;
            Some((features.depth.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?, h, w))
        } else {
            None
        };
        let mut out = Vec::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            let cam = &cameras[q.image];
            let z = match &depth {
                Some((d, h, w)) => median_in_box(&d[q.image * h * w..(q.image + 1) * h * w], *h, *w, &q.bbox)
                    .unwrap_or(tz[i][0]),
                None => tz[i][0],
            };
            let t = lift_center(&q.bbox, (dc[i][0], dc[i][1]), z, &cam.intrinsics);
            let raw = Quaternion::new(qs[i][0], qs[i][1], qs[i][2], qs[i][3]);
            let rotation = raw.normalized().unwrap_or(Quaternion::identity());
            out.push(Pose { rotation, translation: t });
        }
        Ok(out)
    }
}

/// Translation from a box center, a pixel offset and a depth. Non-positive
/// depths, which only occur with untrained weights, use the same formula.
pub fn lift_center(
    bbox: &BBox,
    delta_c: (f64, f64),
    tz: f64,
    k: &CameraIntrinsics,
) -> nalgebra::Vector3<f64> {
    let c = bbox.center();
    recover_translation(c, delta_c, tz, k).unwrap_or_else(|_| {
        nalgebra::Vector3::new(
            (c.0 + delta_c.0 - k.px) * tz / k.fx,
            (c.1 + delta_c.1 - k.py) * tz / k.fy,
            tz,
        )
    })
}

/// Median of positive depths at pixel centers inside the box.
pub fn median_in_box(depth: &[f64], h: usize, w: usize, bbox: &BBox) -> Option<f64> {
    let mut vals: Vec<f64> = Vec::new();
    let (i0, i1) = (bbox.y0.max(0.0).floor() as usize, (bbox.y1.ceil() as usize).min(h));
    let (j0, j1) = (bbox.x0.max(0.0).floor() as usize, (bbox.x1.ceil() as usize).min(w));
    for i in i0..i1 {
        for j in j0..j1 {
            let d = depth[i * w + j];
            if d > 0.0 && bbox.contains(j as f64 + 0.5, i as f64 + 0.5) {
                vals.push(d);
            }
        }
    }
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    Some(vals[vals.len() / 2])
}

/// Last-axis length of a `N x width` head tensor.
pub fn head_width(t: &Tensor) -> Result<usize, ModelError> {
    Ok(t.dim(D::Minus1)?)
}
