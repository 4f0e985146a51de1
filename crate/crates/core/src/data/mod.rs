//! Frames, clips, augmentation, the portable on-disk layout and the synthetic
//! scene generator.
//!
//! Pixel convention: pixel `(row, col)` covers `[col, col + 1) x [row, row + 1)`
//! so its center sits at `(col + 0.5, row + 0.5)` and the image spans
//! `[0, width] x [0, height]`.

mod augment;
mod clips;
mod layout;
mod raster;
mod synth;

pub use augment::{augment_bbox, augment_bbox_with, augment_frame, AugmentConfig};
pub use clips::{
    make_clips, make_eval_clips, sample_train_clip, ClipSpec, EVAL_STRIDE, MAX_TRAIN_STRIDE,
    TRAIN_CLIP_LEN,
};
pub use layout::{
    load_dataset, write_frame, Dataset, DatasetInfo, FrameMeta, VideoIndex, DEPTH_SCALE,
};
pub use raster::{render_scene, RenderOutput, RenderTriangle};
pub use synth::{
    generate_synthetic_dataset, projected_bbox, render_video, video_name, JitterSpec, ObjectSpec, OccluderSpec, SceneSpec,
    TableSpec, TrajectorySpec,
};

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraExtrinsic, CameraIntrinsics, GeometryError, Pose};
use crate::objects::ObjectsError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error("{path}: labeled object `{object}` has no pose annotation")]
    MissingPose { path: PathBuf, object: String },
    #[error("{path}: unreadable image: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("{path}: intrinsics differ from the first frame of the video")]
    IntrinsicsMismatch { path: PathBuf },
    #[error("dataset root {0} contains no videos")]
    Empty(PathBuf),
    #[error("video has {frames} frames, need at least {needed}")]
    VideoTooShort { frames: usize, needed: usize },
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Objects(#[from] ObjectsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
        let path = path.into();
        move |source| DataError::Io { path, source }
    }

    pub(crate) fn invalid(path: impl Into<PathBuf>, msg: impl Into<String>) -> DataError {
        DataError::Invalid {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Intersection with the image rectangle `[0, width] x [0, height]`.
    pub fn clip_to(&self, width: usize, height: usize) -> BBox {
        BBox::new(
            self.x0.clamp(0.0, width as f64),
            self.y0.clamp(0.0, height as f64),
            self.x1.clamp(0.0, width as f64),
            self.y1.clamp(0.0, height as f64),
        )
    }

    /// Grows width and height by the given factors about the center.
    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        let (cx, cy) = self.center();
        let (hw, hh) = (0.5 * self.width() * sx, 0.5 * self.height() * sy);
        BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    /// Bounding rectangle of a point set.
    pub fn enclosing(points: impl IntoIterator<Item = (f64, f64)>) -> Option<BBox> {
        let mut it = points.into_iter();
        let (x, y) = it.next()?;
        let mut b = BBox::new(x, y, x, y);
        for (x, y) in it {
            b.x0 = b.x0.min(x);
            b.y0 = b.y0.min(y);
            b.x1 = b.x1.max(x);
            b.y1 = b.y1.max(y);
        }
        Some(b)
    }
}

/// Ground-truth annotation of one object in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub id: String,
    pub pose: Pose,
    pub bbox: BBox,
    /// Visible pixels over pixels covered when rendered alone.
    pub visible_fraction: f64,
}

/// One decoded frame with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    /// `H x W x 3`, values in `[0, 1]`.
    pub rgb: Array3<f32>,
    /// Meters along +z; 0 marks invalid depth.
    pub depth: Array2<f32>,
    /// Class label per pixel, 0 = background, `class + 1` otherwise.
    pub labels: Array2<u8>,
    pub objects: Vec<ObjectAnnotation>,
    pub extrinsic: CameraExtrinsic,
    pub intrinsics: CameraIntrinsics,
}

impl FrameRecord {
    pub fn width(&self) -> usize {
        self.rgb.dim().1
    }

    pub fn height(&self) -> usize {
        self.rgb.dim().0
    }

    pub fn object(&self, id: &str) -> Option<&ObjectAnnotation> {
        self.objects.iter().find(|o| o.id == id)
    }
}

/// Ordered frames of one video sampled at a constant stride.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub video: String,
    pub stride: usize,
    pub frames: Vec<FrameRecord>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks the constant-stride invariant on frame indices.
    pub fn is_well_formed(&self) -> bool {
        self.frames
            .windows(2)
            .all(|w| w[1].index > w[0].index && w[1].index - w[0].index == self.stride)
    }
}
